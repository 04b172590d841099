//! Latent clustering: batchwise optimal assignment of images to fixed
//! targets on the unit sphere, with augmentation consistency and a rotation
//! prediction auxiliary task.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_assignment, CostMatrix};
use crate::data::{images_to_tensor, rotate_batch, AugmentationSpec, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nn::layers::{argmax_rows, cross_entropy};
use crate::nn::optim::check_loss;
use crate::nn::{forward_chunked, DualHeadEncoder, OptimConfig, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterInitConfig {
    pub components: usize,
    /// Per-coordinate standard deviation around each component mean.
    pub sigma: f64,
    /// One mean per component; scaled one-hot vectors when absent.
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default = "one")]
    pub radius: f64,
}

fn one() -> f64 {
    1.0
}

pub const DEFAULT_TARGET_SIGMA: f64 = 0.15;

impl ClusterInitConfig {
    pub fn one_hot(components: usize, sigma: f64) -> Self {
        Self {
            components,
            sigma,
            means: None,
            radius: 1.0,
        }
    }

    pub fn component_means(&self) -> Vec<Vec<f64>> {
        match &self.means {
            Some(m) => m.clone(),
            None => (0..self.components)
                .map(|c| {
                    let mut e = vec![0.0; self.components];
                    e[c] = self.radius;
                    e
                })
                .collect(),
        }
    }

    /// `sigma = 0` is accepted as the degenerate limit in which every target
    /// equals its normalized component mean.
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("cluster count must be >= 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!("target sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::Config(format!("mean radius must be positive, got {}", self.radius)));
        }
        let means = self.component_means();
        if means.len() != self.components || means.iter().any(|m| m.len() != self.components) {
            return Err(Error::Config(format!(
                "need {} component means of dimension {}",
                self.components, self.components
            )));
        }
        for (a, ma) in means.iter().enumerate() {
            if ma.iter().all(|v| *v == 0.0) || ma.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("component mean {a} must be finite and nonzero")));
            }
            for (b, mb) in means.iter().enumerate().skip(a + 1) {
                if ma == mb {
                    return Err(Error::Config(format!("component means {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Fixed unit-norm targets and the image-to-target bijection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTargetTable")]
pub struct TargetTable {
    dim: usize,
    /// `N × dim`, row-major.
    targets: Vec<f64>,
    /// Image `i` is matched to target `assignment[i]`.
    assignment: Vec<usize>,
    cluster_of_target: Vec<usize>,
}

#[derive(Deserialize)]
struct RawTargetTable {
    dim: usize,
    targets: Vec<f64>,
    assignment: Vec<usize>,
    cluster_of_target: Vec<usize>,
}

impl TryFrom<RawTargetTable> for TargetTable {
    type Error = Error;

    fn try_from(r: RawTargetTable) -> Result<Self> {
        Self::new(r.dim, r.targets, r.assignment, r.cluster_of_target)
    }
}

impl TargetTable {
    pub fn new(dim: usize, targets: Vec<f64>, assignment: Vec<usize>, cluster_of_target: Vec<usize>) -> Result<Self> {
        let t = Self {
            dim,
            targets,
            assignment,
            cluster_of_target,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.assignment.len();
        if self.dim == 0 || self.targets.len() != n * self.dim || self.cluster_of_target.len() != n {
            return Err(Error::Shape(format!(
                "target table: {n} assignments, {} target values, {} clusters, dim {}",
                self.targets.len(),
                self.cluster_of_target.len(),
                self.dim
            )));
        }
        for (j, t) in self.targets.chunks_exact(self.dim).enumerate() {
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("target {j} has norm {norm}")));
            }
        }
        if let Some(c) = self.cluster_of_target.iter().find(|&&c| c >= self.dim) {
            return Err(Error::Data(format!("cluster id {c} outside [0, {})", self.dim)));
        }
        let mut seen = vec![false; n];
        for &j in &self.assignment {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Data("assignment is not a bijection".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target(&self, j: usize) -> &[f64] {
        &self.targets[j * self.dim..(j + 1) * self.dim]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of_target(&self) -> &[usize] {
        &self.cluster_of_target
    }

    /// Target currently matched to image `i`.
    pub fn assigned(&self, i: usize) -> &[f64] {
        self.target(self.assignment[i])
    }

    /// Swaps the targets of images `a` and `b`.
    pub fn swap(&mut self, a: usize, b: usize) {
        self.assignment.swap(a, b);
    }
}

pub fn init_targets(n: usize, config: &ClusterInitConfig, seed: u64) -> Result<TargetTable> {
    config.validate()?;
    let k = config.components;
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} images cannot fill {k} clusters")));
    }
    let means = config.component_means();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::with_capacity(n * k);
    let mut cluster_of_target = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..k);
        let v = loop {
            let v: Vec<f64> = means[c]
                .iter()
                .map(|m| m + config.sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        targets.extend(v);
        cluster_of_target.push(c);
    }
    let mut assignment: Vec<usize> = (0..n).collect();
    assignment.shuffle(&mut rng);
    TargetTable::new(k, targets, assignment, cluster_of_target)
}

/// `membership[i] = cluster_of_target[assignment[i]]`.
pub fn cluster_membership(table: &TargetTable) -> Vec<usize> {
    table.assignment.iter().map(|&j| table.cluster_of_target[j]).collect()
}

/// Fraction of items whose label is the majority label of their cluster.
pub fn purity(membership: &[usize], labels: &[usize]) -> f64 {
    if membership.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::<(usize, usize), usize>::new();
    for (&c, &y) in membership.iter().zip(labels) {
        *counts.entry((c, y)).or_default() += 1;
    }
    let mut best = std::collections::HashMap::<usize, usize>::new();
    for ((c, _), n) in counts {
        let e = best.entry(c).or_default();
        *e = (*e).max(n);
    }
    best.values().sum::<usize>() as f64 / membership.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    pub augmentation: AugmentationSpec,
    /// Augmented copies per image in the consistency term, besides the identity.
    #[serde(default = "two")]
    pub augmented_copies: usize,
    #[serde(default = "yes")]
    pub rotation_task: bool,
    pub optim: OptimConfig,
}

fn two() -> usize {
    2
}

fn yes() -> bool {
    true
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            augmentation: AugmentationSpec::default(),
            augmented_copies: 2,
            rotation_task: true,
            optim: OptimConfig::clustering(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEpoch {
    pub epoch: usize,
    /// Mean over batches of the consistency loss, per image and copy.
    pub assignment_loss: f64,
    pub rotation_loss: f64,
    pub rotation_accuracy: f64,
    /// Images whose target changed during the epoch.
    pub reassigned: usize,
}

pub(crate) fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
    rng
}

/// Trains the encoder in place and updates the assignment of `table`.
///
/// Each epoch is an assignment pass followed by a rotation pass (the latter
/// skipped when disabled). Labels in `data` are never read.
pub fn train_clustering<E: DualHeadEncoder + ?Sized>(
    data: &LabeledImageSet,
    encoder: &E,
    table: &mut TargetTable,
    config: &ClusteringConfig,
    seed: u64,
    mut observer: impl FnMut(&ClusterEpoch),
) -> Result<Vec<ClusterEpoch>> {
    config.optim.validate()?;
    let shape = data.shape();
    config.augmentation.validate(shape)?;
    if table.len() != data.len() {
        return Err(Error::Shape(format!("{} targets for {} images", table.len(), data.len())));
    }
    if encoder.latent_dim() != table.dim() {
        return Err(Error::Shape(format!(
            "encoder embeds into {} dimensions, targets have {}",
            encoder.latent_dim(),
            table.dim()
        )));
    }
    if config.rotation_task && !shape.is_square() {
        return Err(Error::Shape(format!("rotation task needs square images, got {shape}")));
    }
    let dtype = encoder.params().dtype();
    let n = data.len();
    let (k, b) = (table.dim(), config.optim.batch_size);
    let copies = 1 + config.augmented_copies;
    let mut opt = Optimizer::new(&config.optim);
    let mut log = Vec::with_capacity(config.optim.epochs);

    for epoch in 0..config.optim.epochs {
        let rate = config.optim.param_rate(epoch);
        let mut rng = epoch_rng(seed, epoch, 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let before = table.assignment.clone();
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(b) {
            let x = data.batch_tensor(idx, dtype)?;
            let (emb, _) = encoder.heads(&x)?;
            let emb = emb.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let slots: Vec<usize> = idx.iter().map(|&i| table.assignment[i]).collect();
            let t: Vec<f64> = slots.iter().flat_map(|&j| table.target(j).to_vec()).collect();
            let pi = solve_assignment(&CostMatrix::squared_distances(&emb, &t, k)?);
            for (row, &i) in idx.iter().enumerate() {
                table.assignment[i] = slots[pi.permutation[row]];
            }

            let mut buf = Vec::with_capacity(copies * idx.len() * shape.numel());
            let mut goal = Vec::with_capacity(copies * idx.len() * k);
            for copy in 0..copies {
                for &i in idx {
                    if copy == 0 {
                        buf.extend_from_slice(data.image(i));
                    } else {
                        buf.extend(config.augmentation.apply(data.image(i), shape, &mut rng));
                    }
                    goal.extend(table.assigned(i).iter().map(|&v| v as f32));
                }
            }
            let rows = copies * idx.len();
            let xs = images_to_tensor(buf, rows, shape, dtype)?;
            let goal = Tensor::from_vec(goal, (rows, k), xs.device())?.to_dtype(dtype)?;
            let (emb, _) = encoder.heads(&xs)?;
            let loss = (emb - goal)?.sqr()?.sum_keepdim(1)?.mean_all()?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            check_loss(value, "assignment")?;
            opt.step(encoder.params(), &loss.backward()?, rate)?;
            loss_sum += value;
            batches += 1;
        }
        let reassigned = before.iter().zip(&table.assignment).filter(|(a, b)| a != b).count();

        let (mut rot_loss, mut rot_correct, mut rot_total) = (0.0, 0usize, 0usize);
        if config.rotation_task {
            let mut rng = epoch_rng(seed, epoch, 2);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut rot_batches = 0usize;
            for idx in order.chunks(b) {
                let mut buf = Vec::with_capacity(idx.len() * shape.numel());
                for &i in idx {
                    buf.extend_from_slice(data.image(i));
                }
                let rotated = rotate_batch(&buf, shape)?;
                let xs = images_to_tensor(rotated.images, 4 * idx.len(), shape, dtype)?;
                let (_, logits) = encoder.heads(&xs)?;
                let loss = cross_entropy(&logits, &rotated.labels)?;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                check_loss(value, "rotation")?;
                let pred = argmax_rows(&logits.detach())?;
                rot_correct += pred.iter().zip(&rotated.labels).filter(|(p, l)| **p == **l as usize).count();
                rot_total += pred.len();
                opt.step(encoder.params(), &loss.backward()?, rate)?;
                rot_loss += value;
                rot_batches += 1;
            }
            rot_loss /= rot_batches.max(1) as f64;
        }

        let record = ClusterEpoch {
            epoch,
            assignment_loss: loss_sum / batches.max(1) as f64,
            rotation_loss: rot_loss,
            rotation_accuracy: if rot_total > 0 {
                rot_correct as f64 / rot_total as f64
            } else {
                0.0
            },
            reassigned,
        };
        observer(&record);
        log.push(record);
    }
    Ok(log)
}

/// Head-1 embeddings of every image in `data`, `N × K` row-major.
pub fn embed<E: DualHeadEncoder + ?Sized>(encoder: &E, data: &LabeledImageSet) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let x = data.to_tensor(encoder.params().dtype())?;
    let emb = forward_chunked(&x, 512, |c| Ok(encoder.heads(c)?.0))?;
    Ok(emb.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Cluster of the nearest target, for images outside the training set.
pub fn predict_clusters<E: DualHeadEncoder + ?Sized>(
    encoder: &E,
    data: &LabeledImageSet,
    table: &TargetTable,
) -> Result<Vec<usize>> {
    let k = table.dim();
    let emb = embed(encoder, data)?;
    Ok(emb
        .chunks_exact(k)
        .map(|e| {
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..table.len() {
                let d: f64 = e.iter().zip(table.target(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, table.cluster_of_target[j]);
                }
            }
            best.1
        })
        .collect())
}

/// Rotation-head accuracy over all four rotations of every image.
pub fn rotation_accuracy<E: DualHeadEncoder + ?Sized>(encoder: &E, data: &LabeledImageSet) -> Result<f64> {
    let rotated = rotate_batch(data.pixels(), data.shape())?;
    let x = images_to_tensor(rotated.images, 4 * data.len(), data.shape(), encoder.params().dtype())?;
    let logits = forward_chunked(&x, 512, |c| Ok(encoder.heads(c)?.1))?;
    let pred = argmax_rows(&logits)?;
    let hits = pred.iter().zip(&rotated.labels).filter(|(p, l)| **p == **l as usize).count();
    Ok(hits as f64 / pred.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_sigma_gives_one_hots() {
        let t = init_targets(50, &ClusterInitConfig::one_hot(3, 0.0), 1).unwrap();
        for j in 0..t.len() {
            let c = t.cluster_of_target()[j];
            let mut e = vec![0.0; 3];
            e[c] = 1.0;
            assert_eq!(t.target(j), &e[..]);
        }
    }

    #[test]
    fn init_is_valid_and_seeded() {
        let cfg = ClusterInitConfig::one_hot(4, 0.15);
        let a = init_targets(100, &cfg, 3).unwrap();
        a.validate().unwrap();
        assert_eq!(a, init_targets(100, &cfg, 3).unwrap());
        assert!(init_targets(3, &cfg, 3).is_err());
    }

    #[test]
    fn rejects_coincident_means() {
        let cfg = ClusterInitConfig {
            means: Some(vec![vec![1.0, 0.0], vec![1.0, 0.0]]),
            ..ClusterInitConfig::one_hot(2, 0.1)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn membership_follows_assignment_swaps() {
        let mut t = TargetTable::new(
            2,
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            vec![0, 1, 2],
            vec![0, 0, 1],
        )
        .unwrap();
        assert_eq!(cluster_membership(&t), vec![0, 0, 1]);
        t.swap(0, 1);
        assert_eq!(cluster_membership(&t), vec![0, 0, 1]);
        t.swap(1, 2);
        assert_eq!(cluster_membership(&t), vec![0, 1, 0]);
    }

    #[test]
    fn purity_by_majority() {
        assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 6, 5]), 0.75);
        assert_eq!(purity(&[0, 1, 2], &[1, 1, 1]), 1.0);
    }
}
