use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_membership, TargetTable};
use crate::error::{Error, Result};

/// How the class block of each code is initialized.
#[derive(Clone, Copy, Debug)]
pub enum LatentSource<'a> {
    /// Matched targets from latent clustering.
    Clustered(&'a TargetTable),
    /// One-hot class vectors.
    Labels { labels: &'a [usize], classes: usize },
    /// Uniform directions on the sphere; memberships are provisional
    /// (argmax of the class block) until reassigned after training.
    RandomSphere { count: usize, classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    Unsupervised,
    Supervised,
    RandomSphere,
}

impl LatentSource<'_> {
    pub fn mode(&self) -> LatentMode {
        match self {
            LatentSource::Clustered(_) => LatentMode::Unsupervised,
            LatentSource::Labels { .. } => LatentMode::Supervised,
            LatentSource::RandomSphere { .. } => LatentMode::RandomSphere,
        }
    }
}

/// Per-image codes `z_i = (t_i/‖t_i‖, v_i/‖v_i‖) ∈ R^(K+d)` with memberships.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatentTable")]
pub struct LatentTable {
    class_dim: usize,
    noise_dim: usize,
    /// `N × (K + d)`, row-major.
    codes: Vec<f64>,
    membership: Vec<usize>,
    sigma_noise: f64,
    mode: LatentMode,
}

#[derive(Deserialize)]
struct RawLatentTable {
    class_dim: usize,
    noise_dim: usize,
    codes: Vec<f64>,
    membership: Vec<usize>,
    sigma_noise: f64,
    mode: LatentMode,
}

impl TryFrom<RawLatentTable> for LatentTable {
    type Error = Error;

    fn try_from(r: RawLatentTable) -> Result<Self> {
        if r.codes.iter().any(|v| !v.is_finite()) || !r.sigma_noise.is_finite() {
            return Err(Error::Data("latent table holds non-finite values".into()));
        }
        Self::from_parts(r.class_dim, r.noise_dim, r.codes, r.membership, r.sigma_noise, r.mode)
    }
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Numerical(format!("cannot normalize a block of norm {norm}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn build_latent_table(
    source: LatentSource<'_>,
    noise_dim: usize,
    sigma_noise: f64,
    seed: u64,
) -> Result<LatentTable> {
    if noise_dim == 0 {
        return Err(Error::Config("noise dimension must be >= 1".into()));
    }
    if !(sigma_noise.is_finite() && sigma_noise > 0.0) {
        return Err(Error::Config(format!("sigma_noise must be positive, got {sigma_noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e);
    let (class_dim, class_blocks, membership): (usize, Vec<Vec<f64>>, Vec<usize>) = match source {
        LatentSource::Clustered(t) => {
            t.validate()?;
            let blocks = (0..t.len()).map(|i| t.assigned(i).to_vec()).collect();
            (t.dim(), blocks, cluster_membership(t))
        }
        LatentSource::Labels { labels, classes } => {
            if let Some(y) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::Data(format!("label {y} outside [0, {classes})")));
            }
            let blocks = labels
                .iter()
                .map(|&y| {
                    let mut e = vec![0.0; classes];
                    e[y] = 1.0;
                    e
                })
                .collect();
            (classes, blocks, labels.to_vec())
        }
        LatentSource::RandomSphere { count, classes } => {
            let blocks: Vec<Vec<f64>> = (0..count).map(|_| gaussian(&mut rng, classes, 1.0)).collect();
            let membership = blocks.iter().map(|b| argmax(b)).collect();
            (classes, blocks, membership)
        }
    };
    if class_dim == 0 {
        return Err(Error::Config("class dimension must be >= 1".into()));
    }
    let width = class_dim + noise_dim;
    let mut codes = Vec::with_capacity(class_blocks.len() * width);
    for block in class_blocks {
        codes.extend(block);
        codes.extend(gaussian(&mut rng, noise_dim, sigma_noise));
    }
    let mut table = LatentTable {
        class_dim,
        noise_dim,
        codes,
        membership,
        sigma_noise,
        mode: source.mode(),
    };
    table.normalize_blocks()?;
    Ok(table)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn class_dim(&self) -> usize {
        self.class_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn code_dim(&self) -> usize {
        self.class_dim + self.noise_dim
    }

    pub fn mode(&self) -> LatentMode {
        self.mode
    }

    pub fn sigma_noise(&self) -> f64 {
        self.sigma_noise
    }

    pub fn codes(&self) -> &[f64] {
        &self.codes
    }

    pub(crate) fn codes_mut(&mut self) -> &mut [f64] {
        &mut self.codes
    }

    pub fn code(&self, i: usize) -> &[f64] {
        let w = self.code_dim();
        &self.codes[i * w..(i + 1) * w]
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn set_membership(&mut self, membership: Vec<usize>) -> Result<()> {
        if membership.len() != self.len() || membership.iter().any(|&c| c >= self.class_dim) {
            return Err(Error::InvalidArgument(format!(
                "membership must hold {} ids in [0, {})",
                self.len(),
                self.class_dim
            )));
        }
        self.membership = membership;
        Ok(())
    }

    /// Projects each block of every code back onto its unit sphere.
    pub fn normalize_blocks(&mut self) -> Result<()> {
        let (k, w) = (self.class_dim, self.code_dim());
        for row in self.codes.chunks_exact_mut(w) {
            let (t, v) = row.split_at_mut(k);
            normalize(t)?;
            normalize(v)?;
        }
        Ok(())
    }

    /// Largest deviation of any block norm from 1.
    pub fn max_block_norm_error(&self) -> f64 {
        let k = self.class_dim;
        let norm = |b: &[f64]| b.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.codes
            .chunks_exact(self.code_dim())
            .map(|row| (norm(&row[..k]) - 1.0).abs().max((norm(&row[k..]) - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// Fraction of codes whose class-block argmax equals their membership.
    pub fn class_block_agreement(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let k = self.class_dim;
        let hits = (0..self.len())
            .filter(|&i| argmax(&self.code(i)[..k]) == self.membership[i])
            .count();
        hits as f64 / self.len() as f64
    }

    pub fn from_parts(
        class_dim: usize,
        noise_dim: usize,
        codes: Vec<f64>,
        membership: Vec<usize>,
        sigma_noise: f64,
        mode: LatentMode,
    ) -> Result<Self> {
        let w = class_dim + noise_dim;
        if class_dim == 0 || noise_dim == 0 || codes.len() != membership.len() * w {
            return Err(Error::Shape(format!(
                "latent table: {} codes of width {w} for {} memberships",
                codes.len(),
                membership.len()
            )));
        }
        let mut t = Self {
            class_dim,
            noise_dim,
            membership: vec![0; membership.len()],
            codes,
            sigma_noise,
            mode,
        };
        t.set_membership(membership)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{init_targets, ClusterInitConfig};

    #[test]
    fn supervised_class_block_is_one_hot() {
        let t = build_latent_table(LatentSource::Labels { labels: &[2, 0], classes: 3 }, 4, 0.1, 0).unwrap();
        assert_eq!(&t.code(0)[..3], &[0.0, 0.0, 1.0]);
        assert_eq!(t.membership(), &[2, 0]);
        assert!(t.max_block_norm_error() < 1e-12);
        assert_eq!(t.class_block_agreement(), 1.0);
    }

    #[test]
    fn clustered_memberships_pass_through() {
        let targets = init_targets(40, &ClusterInitConfig::one_hot(4, 0.15), 5).unwrap();
        let t = build_latent_table(LatentSource::Clustered(&targets), 8, 0.1, 1).unwrap();
        assert_eq!(t.membership(), &cluster_membership(&targets)[..]);
        assert_eq!(t.mode(), LatentMode::Unsupervised);
        assert!(t.max_block_norm_error() < 1e-12);
    }

    #[test]
    fn random_sphere_is_normalized() {
        let t = build_latent_table(LatentSource::RandomSphere { count: 30, classes: 3 }, 5, 0.1, 2).unwrap();
        assert_eq!(t.len(), 30);
        assert!(t.max_block_norm_error() < 1e-12);
        assert!(t.membership().iter().all(|&c| c < 3));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_latent_table(LatentSource::Labels { labels: &[3], classes: 3 }, 2, 0.1, 0).is_err());
        assert!(build_latent_table(LatentSource::Labels { labels: &[0], classes: 3 }, 0, 0.1, 0).is_err());
    }
}
