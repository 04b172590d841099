//! Step I → Step II → posterior, shared by the CLI and the toy experiments.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::clustering::{init_targets, purity, train_clustering, ClusterEpoch, ClusterInitConfig, ClusteringConfig, TargetTable, DEFAULT_TARGET_SIGMA};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::generation::{build_latent_table, GenEpoch, LatentMode, LatentSource, LatentTable, LaplacianPyramid, PyramidConfig, ReconstructionLoss};
use crate::generation::GenerationTrainer;
use crate::metrics::align_clusters;
use crate::nn::{
    Encoder, EncoderSpec, GeneratorArch, GeneratorSpec, ImageGenerator, OptimConfig, TrunkArch,
};
use crate::posterior::{fit_posterior, kmeans, ClusterPosterior, CovarianceMode, DEFAULT_RIDGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Clustered class codes from Step I, no labels.
    Cola,
    /// One-hot class codes from labels.
    Scola,
    /// Random-sphere class codes; clusters recovered by k-means afterwards.
    Glo,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cola" => Ok(Method::Cola),
            "scola" => Ok(Method::Scola),
            "glo" => Ok(Method::Glo),
            other => Err(Error::Config(format!("unknown method {other:?} (cola|scola|glo)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step1Config {
    #[serde(default)]
    pub encoder: TrunkArch,
    #[serde(default = "default_sigma")]
    pub target_sigma: f64,
    #[serde(default)]
    pub clustering: ClusteringConfig,
}

fn default_sigma() -> f64 {
    DEFAULT_TARGET_SIGMA
}

impl Step1Config {
    /// 64 epochs, enough for the toy sets.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.clustering.optim.epochs = 64;
        c
    }
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            encoder: TrunkArch::default(),
            target_sigma: DEFAULT_TARGET_SIGMA,
            clustering: ClusteringConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step2Config {
    #[serde(default = "default_generator")]
    pub generator: GeneratorArch,
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    #[serde(default = "default_sigma_noise")]
    pub sigma_noise: f64,
    /// Defaults from the image side when absent.
    #[serde(default)]
    pub pyramid: Option<PyramidConfig>,
    #[serde(default = "OptimConfig::generation")]
    pub optim: OptimConfig,
}

fn default_generator() -> GeneratorArch {
    GeneratorArch::Mlp {
        hidden: [256, 512],
        cond_norm: false,
    }
}

fn default_noise_dim() -> usize {
    16
}

fn default_sigma_noise() -> f64 {
    1.0
}

impl Step2Config {
    /// Default model with the rate halved four times over `epochs`.
    pub fn toy(epochs: usize) -> Self {
        let mut c = Self::default();
        c.optim.epochs = epochs;
        c.optim.decay_interval = (epochs / 4).max(1);
        c
    }
}

impl Default for Step2Config {
    fn default() -> Self {
        Self {
            generator: default_generator(),
            noise_dim: default_noise_dim(),
            sigma_noise: default_sigma_noise(),
            pyramid: None,
            optim: OptimConfig::generation(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorConfig {
    #[serde(default)]
    pub covariance: CovarianceMode,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            covariance: CovarianceMode::default(),
            ridge: DEFAULT_RIDGE,
        }
    }
}

pub struct Step1Output {
    pub encoder: Encoder,
    pub targets: TargetTable,
    pub log: Vec<ClusterEpoch>,
}

pub fn run_step1(
    data: &LabeledImageSet,
    config: &Step1Config,
    seed: u64,
    observer: impl FnMut(&ClusterEpoch),
) -> Result<Step1Output> {
    let k = data.class_count();
    if k == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    let spec = EncoderSpec {
        arch: config.encoder.clone(),
        shape: data.shape(),
        latent_dim: k,
    };
    let encoder = Encoder::new(&spec, seed, DType::F32)?;
    let mut targets = init_targets(data.len(), &ClusterInitConfig::one_hot(k, config.target_sigma), seed)?;
    let log = train_clustering(&data.without_labels(), &encoder, &mut targets, &config.clustering, seed, observer)?;
    Ok(Step1Output { encoder, targets, log })
}

/// Purity of the Step-I clusters against dataset labels (evaluation only).
pub fn step1_purity(data: &LabeledImageSet, targets: &TargetTable) -> Result<f64> {
    let labels = data.require_labels("purity")?;
    Ok(purity(&crate::clustering::cluster_membership(targets), labels))
}

pub fn reconstruction_loss_for(data: &LabeledImageSet, config: &Step2Config) -> Result<ReconstructionLoss> {
    let side = data.shape().height.min(data.shape().width);
    let pyr = config.pyramid.clone().unwrap_or_else(|| PyramidConfig::for_size(side));
    Ok(ReconstructionLoss::Laplacian(LaplacianPyramid::new(pyr, data.shape(), DType::F32)?))
}

pub fn initial_latents(
    data: &LabeledImageSet,
    method: Method,
    targets: Option<&TargetTable>,
    config: &Step2Config,
    seed: u64,
) -> Result<LatentTable> {
    let k = data.class_count();
    let source = match method {
        Method::Cola => LatentSource::Clustered(
            targets.ok_or_else(|| Error::InvalidArgument("cola needs Step-I targets".into()))?,
        ),
        Method::Scola => LatentSource::Labels {
            labels: data.require_labels("scola latent init")?,
            classes: k,
        },
        Method::Glo => LatentSource::RandomSphere { count: data.len(), classes: k },
    };
    build_latent_table(source, config.noise_dim, config.sigma_noise, seed)
}

pub fn new_generator(data: &LabeledImageSet, config: &Step2Config, seed: u64) -> Result<ImageGenerator> {
    ImageGenerator::new(
        &GeneratorSpec {
            arch: config.generator.clone(),
            shape: data.shape(),
            class_dim: data.class_count(),
            noise_dim: config.noise_dim,
        },
        seed,
        DType::F32,
    )
}

pub struct Step2Output {
    pub generator: ImageGenerator,
    pub table: LatentTable,
    pub log: Vec<GenEpoch>,
}

/// Trains Step II from scratch. Random-sphere tables get their memberships
/// from k-means on the trained class blocks.
pub fn run_step2(
    data: &LabeledImageSet,
    method: Method,
    targets: Option<&TargetTable>,
    config: &Step2Config,
    seed: u64,
    observer: impl FnMut(&GenEpoch, &LatentTable),
) -> Result<Step2Output> {
    let mut table = initial_latents(data, method, targets, config, seed)?;
    let generator = new_generator(data, config, seed)?;
    let loss = reconstruction_loss_for(data, config)?;
    let mut trainer = GenerationTrainer::new(&config.optim, &table)?;
    let train = data.without_labels();
    let log = trainer.run(&train, &mut table, &generator, &loss, seed, config.optim.epochs, observer)?;
    if table.mode() == LatentMode::RandomSphere {
        recluster(&mut table, seed)?;
    }
    Ok(Step2Output { generator, table, log })
}

/// Memberships from k-means (K clusters) on the class blocks.
pub fn recluster(table: &mut LatentTable, seed: u64) -> Result<()> {
    let (k, w) = (table.class_dim(), table.code_dim());
    let blocks: Vec<f64> = table.codes().chunks_exact(w).flat_map(|c| c[..k].to_vec()).collect();
    table.set_membership(kmeans(&blocks, k, k, seed, 100)?)
}

/// Renames memberships so cluster ids agree with `labels` as far as a
/// one-to-one map allows. Labels are read for evaluation only.
pub fn align_to_labels(table: &mut LatentTable, labels: &[usize]) -> Result<Vec<usize>> {
    let map = align_clusters(table.membership(), labels, table.class_dim())?;
    let renamed = table.membership().iter().map(|&c| map[c]).collect();
    table.set_membership(renamed)?;
    Ok(map)
}

pub fn run_posterior(table: &LatentTable, config: &PosteriorConfig) -> Result<ClusterPosterior> {
    fit_posterior(table, config.covariance, config.ridge)
}
