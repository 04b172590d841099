//! Fréchet distance, classification accuracy score, the small-sample
//! augmentation harness and the concentrated-versus-sparse sampling study.

mod classify;
mod features;
mod frechet;

pub use classify::{accuracy, align_clusters, cas_score, predict, train_classifier, CasReport, ClassifierConfig, TrainStats};
pub use features::{ClassifierFeatures, FeatureExtractor, Flatten, Pca};
pub use frechet::{frechet_distance, GaussianMoments, PSD_TOLERANCE};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::Generator;
use crate::posterior::{generate_images, sample_codes, ClusterPosterior, SampleMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub mean: f64,
    pub per_repeat: Vec<f64>,
}

/// Fréchet distance between feature moments of `real` and of `fake`.
///
/// With `repeats > 1`, each repeat draws `sample_size` fake images without
/// replacement (capped by the set size) and the report averages them.
pub fn fid_score(
    real: &LabeledImageSet,
    fake: &LabeledImageSet,
    fx: &dyn FeatureExtractor,
    repeats: usize,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<FidReport> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::InvalidArgument("FID needs at least 2 images on each side".into()));
    }
    let reference = GaussianMoments::fit(&fx.extract(real)?, fx.dim())?;
    let fake_features = fx.extract(fake)?;
    let f = fx.dim();
    let size = sample_size.unwrap_or(fake.len()).clamp(2, fake.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_repeat = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let rows: Vec<usize> = if size == fake.len() {
            (0..size).collect()
        } else {
            let mut all: Vec<usize> = (0..fake.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(size);
            all
        };
        let picked: Vec<f64> = rows.iter().flat_map(|&i| fake_features[i * f..(i + 1) * f].to_vec()).collect();
        per_repeat.push(frechet_distance(&reference, &GaussianMoments::fit(&picked, f)?)?);
    }
    Ok(FidReport {
        mean: per_repeat.iter().sum::<f64>() / per_repeat.len() as f64,
        per_repeat,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    RealOnly,
    SyntheticOnly,
    Mix,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::RealOnly, Regime::SyntheticOnly, Regime::Mix];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::RealOnly => "real",
            Regime::SyntheticOnly => "synthetic",
            Regime::Mix => "mix",
        }
    }
}

/// Real and synthetic parts of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct MixDataset {
    pub real: LabeledImageSet,
    pub synthetic: LabeledImageSet,
    pub ratio: f64,
}

impl MixDataset {
    /// Takes the first `N_real (1 − r) / r` synthetic images, so `ratio = 1`
    /// yields the real set alone.
    pub fn new(real: &LabeledImageSet, synthetic_pool: &LabeledImageSet, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("mix ratio must lie in (0, 1], got {ratio}")));
        }
        if real.shape() != synthetic_pool.shape() || real.class_count() != synthetic_pool.class_count() {
            return Err(Error::Shape("real and synthetic parts differ in classes or image shape".into()));
        }
        real.require_labels("mix real part")?;
        synthetic_pool.require_labels("mix synthetic part")?;
        let want = (real.len() as f64 * (1.0 - ratio) / ratio).round() as usize;
        if want > synthetic_pool.len() {
            return Err(Error::Data(format!("mix needs {want} synthetic images, pool holds {}", synthetic_pool.len())));
        }
        Ok(Self {
            real: real.clone(),
            synthetic: synthetic_pool.select(&(0..want).collect::<Vec<_>>())?,
            ratio,
        })
    }

    pub fn combined(&self) -> Result<LabeledImageSet> {
        self.real.concat(&self.synthetic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: Regime,
    pub seed: u64,
    pub accuracy: f64,
    pub train_size: usize,
    pub steps: usize,
}

/// Trains one classifier under `regime` and scores it on `test`.
///
/// Every regime runs `ceil(N_real / batch)` iterations per epoch so the
/// optimizer sees the same number of steps regardless of set size.
pub fn train_small_sample(
    real: &LabeledImageSet,
    regime: Regime,
    synthetic_pool: Option<&LabeledImageSet>,
    test: &LabeledImageSet,
    config: &ClassifierConfig,
    mix_ratio: f64,
    seed: u64,
) -> Result<RegimeResult> {
    let pool = || {
        synthetic_pool.ok_or_else(|| Error::InvalidArgument(format!("regime {} needs generated images", regime.name())))
    };
    let train = match regime {
        Regime::RealOnly => real.clone(),
        Regime::SyntheticOnly => {
            let pool = pool()?;
            if pool.len() < real.len() {
                return Err(Error::Data(format!("synthetic pool has {} images, need {}", pool.len(), real.len())));
            }
            pool.select(&(0..real.len()).collect::<Vec<_>>())?
        }
        Regime::Mix => MixDataset::new(real, pool()?, mix_ratio)?.combined()?,
    };
    let iters = real.len().div_ceil(config.optim.batch_size);
    let (clf, stats) = train_classifier(&train, config, seed, Some(iters))?;
    Ok(RegimeResult {
        regime,
        seed,
        accuracy: accuracy(&clf, test)?,
        train_size: train.len(),
        steps: stats.steps,
    })
}

/// Synthetic set for classifier training: balanced classes, shuffled order.
pub fn synthesize<G: Generator + ?Sized>(
    gen: &G,
    post: &ClusterPosterior,
    n: usize,
    tau: f64,
    seed: u64,
) -> Result<LabeledImageSet> {
    let sampled = sample_codes(post, n, tau, SampleMode::Balanced, seed)?;
    let set = generate_images(gen, &sampled)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a));
    set.select(&order)
}

/// Sampling temperatures of the concentrated and sparse synthetic sets.
pub const DEFAULT_TAU_CONC: f64 = 0.05;
pub const DEFAULT_TAU_SPARSE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub tau_conc: f64,
    pub tau_sparse: f64,
    pub fid_conc: f64,
    pub fid_sparse: f64,
    pub cas_conc: f64,
    pub cas_sparse: f64,
}

impl DiscrepancyReport {
    pub fn cas_gap(&self) -> f64 {
        self.cas_sparse - self.cas_conc
    }

    pub fn relative_fid_gap(&self) -> f64 {
        (self.fid_conc - self.fid_sparse).abs() / self.fid_sparse
    }
}

/// Scores concentrated (`tau_conc`) and sparse (`tau_sparse`) synthetic sets
/// of equal size by both FID and CAS.
#[allow(clippy::too_many_arguments)]
pub fn fid_cas_discrepancy<G: Generator + ?Sized>(
    gen: &G,
    post: &ClusterPosterior,
    size: usize,
    real_test: &LabeledImageSet,
    fx: &dyn FeatureExtractor,
    clf: &ClassifierConfig,
    tau_conc: f64,
    tau_sparse: f64,
    seed: u64,
) -> Result<DiscrepancyReport> {
    let conc = synthesize(gen, post, size, tau_conc, seed)?;
    let sparse = synthesize(gen, post, size, tau_sparse, seed.wrapping_add(1))?;
    Ok(DiscrepancyReport {
        tau_conc,
        tau_sparse,
        fid_conc: fid_score(real_test, &conc, fx, 1, None, seed)?.mean,
        fid_sparse: fid_score(real_test, &sparse, fx, 1, None, seed)?.mean,
        cas_conc: cas_score(&conc, real_test, clf, seed)?.accuracy,
        cas_sparse: cas_score(&sparse, real_test, clf, seed)?.accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;

    #[test]
    fn unit_ratio_mix_is_real_set() {
        let shape = ImageShape::new(1, 2, 2);
        let real = LabeledImageSet::new(shape, vec![0.5; 8], Some(vec![0, 1]), 2).unwrap();
        let pool = LabeledImageSet::new(shape, vec![0.1; 8], Some(vec![1, 0]), 2).unwrap();
        let mix = MixDataset::new(&real, &pool, 1.0).unwrap();
        assert_eq!(mix.combined().unwrap(), real);
        let half = MixDataset::new(&real, &pool, 0.5).unwrap();
        assert_eq!(half.synthetic.len(), 2);
        assert!(MixDataset::new(&real, &pool, 0.2).is_err());
    }
}
