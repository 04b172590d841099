use candle_core::DType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_assignment, CostMatrix};
use crate::clustering::epoch_rng;
use crate::data::{images_to_tensor, AugmentationSpec, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nn::layers::{argmax_rows, cross_entropy};
use crate::nn::optim::check_loss;
use crate::nn::{forward_chunked, Classifier, ClassifierSpec, ImageClassifier, Module, OptimConfig, Optimizer, TrunkArch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    #[serde(default)]
    pub arch: TrunkArch,
    pub optim: OptimConfig,
    #[serde(default = "flip_crop")]
    pub augmentation: AugmentationSpec,
}

fn flip_crop() -> AugmentationSpec {
    AugmentationSpec::flip_crop(4)
}

impl ClassifierConfig {
    /// Full-length recipe: 180 epochs, rate 0.1 halved every 30.
    pub fn full() -> Self {
        Self {
            arch: TrunkArch::default(),
            optim: OptimConfig::classifier(),
            augmentation: flip_crop(),
        }
    }

    /// Same schedule shape compressed for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            arch: TrunkArch::Mlp { hidden: 128 },
            optim: OptimConfig {
                lr_params: 0.02,
                epochs: 30,
                decay_interval: 10,
                batch_size: 64,
                ..OptimConfig::classifier()
            },
            augmentation: AugmentationSpec::flip_crop(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub final_loss: f64,
}

/// Trains a fresh classifier on `train`.
///
/// `iterations_per_epoch` fixes the number of optimizer steps per epoch;
/// batches then walk a reshuffled permutation, wrapping as needed. When
/// `None`, each epoch is one pass over the data.
pub fn train_classifier(
    train: &LabeledImageSet,
    config: &ClassifierConfig,
    seed: u64,
    iterations_per_epoch: Option<usize>,
) -> Result<(ImageClassifier, TrainStats)> {
    config.optim.validate()?;
    let shape = train.shape();
    config.augmentation.validate(shape)?;
    let labels = train.require_labels("classifier training")?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let spec = ClassifierSpec {
        arch: config.arch.clone(),
        shape,
        classes: train.class_count(),
    };
    let clf = ImageClassifier::new(&spec, seed, DType::F32)?;
    let mut opt = Optimizer::new(&config.optim);
    let b = config.optim.batch_size;
    let n = train.len();
    let iters = iterations_per_epoch.unwrap_or(n.div_ceil(b));
    let mut steps = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..config.optim.epochs {
        let rate = config.optim.param_rate(epoch);
        let mut rng = epoch_rng(seed, epoch, 4);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for _ in 0..iters {
            let take = if iterations_per_epoch.is_some() { b } else { b.min(n - cursor.min(n)) };
            let mut idx = Vec::with_capacity(take);
            while idx.len() < take {
                if cursor == order.len() {
                    order = (0..n).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let mut buf = Vec::with_capacity(idx.len() * shape.numel());
            for &i in &idx {
                buf.extend(config.augmentation.apply(train.image(i), shape, &mut rng));
            }
            let x = images_to_tensor(buf, idx.len(), shape, DType::F32)?;
            let y: Vec<u32> = idx.iter().map(|&i| labels[i] as u32).collect();
            let loss = cross_entropy(&clf.logits(&x)?, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            check_loss(value, "classifier")?;
            opt.step(clf.params(), &loss.backward()?, rate)?;
            final_loss = value;
            steps += 1;
        }
    }
    Ok((clf, TrainStats { steps, final_loss }))
}

pub fn predict<C: Classifier + ?Sized>(clf: &C, set: &LabeledImageSet) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Ok(Vec::new());
    }
    let x = set.to_tensor(clf.params().dtype())?;
    argmax_rows(&forward_chunked(&x, 512, |c| clf.logits(c))?)
}

/// Top-1 accuracy on a labeled set.
pub fn accuracy<C: Classifier + ?Sized>(clf: &C, test: &LabeledImageSet) -> Result<f64> {
    let labels = test.require_labels("accuracy")?;
    if labels.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let pred = predict(clf, test)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasReport {
    pub accuracy: f64,
    pub train_size: usize,
    pub steps: usize,
}

/// Classification accuracy on real data of a classifier trained only on
/// `synthetic`.
pub fn cas_score(
    synthetic: &LabeledImageSet,
    real_test: &LabeledImageSet,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<CasReport> {
    let missing = synthetic.missing_classes();
    if synthetic.labels().is_none() || !missing.is_empty() {
        return Err(Error::Data(format!("synthetic set lacks classes {missing:?}")));
    }
    if synthetic.class_count() != real_test.class_count() || synthetic.shape() != real_test.shape() {
        return Err(Error::Shape("synthetic and real sets differ in classes or image shape".into()));
    }
    let (clf, stats) = train_classifier(synthetic, config, seed, None)?;
    Ok(CasReport {
        accuracy: accuracy(&clf, real_test)?,
        train_size: synthetic.len(),
        steps: stats.steps,
    })
}

/// Cluster-to-class map maximizing agreement with `labels` (one-to-one).
pub fn align_clusters(clusters: &[usize], labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if clusters.len() != labels.len() {
        return Err(Error::Shape(format!("{} clusters for {} labels", clusters.len(), labels.len())));
    }
    if clusters.iter().chain(labels).any(|&c| c >= k) {
        return Err(Error::InvalidArgument(format!("ids must lie in [0, {k})")));
    }
    let mut counts = vec![0usize; k * k];
    for (&c, &y) in clusters.iter().zip(labels) {
        counts[c * k + y] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let cost = CostMatrix::new(k, counts.iter().map(|&n| (max - n) as f64).collect())?;
    Ok(solve_assignment(&cost).permutation)
}
