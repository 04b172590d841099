//! Joint optimization of a generator and per-image latent codes.

mod latent;
mod pyramid;

pub use latent::{build_latent_table, LatentMode, LatentSource, LatentTable};
pub use pyramid::{lap_loss, LaplacianPyramid, PyramidConfig};

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::epoch_rng;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{BlockData, NamedBlock};
use crate::nn::optim::check_loss;
use crate::nn::{Classifier, Generator, ImageClassifier, OptimConfig, Optimizer, ParamStore, RowOptimizer};

/// Frozen network exposing intermediate feature maps.
pub trait PerceptualExtractor {
    fn layers(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

impl PerceptualExtractor for ImageClassifier {
    fn layers(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![self.features(x)?])
    }
}

/// `mean|x − y| + Σ_i mean|l_i(x) − l_i(y)|`.
pub fn perceptual_loss(x: &Tensor, y: &Tensor, extractor: &dyn PerceptualExtractor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("loss inputs {:?} and {:?}", x.dims(), y.dims())));
    }
    let mut total = (x - y)?.abs()?.mean_all()?;
    for (a, b) in extractor.layers(x)?.iter().zip(extractor.layers(y)?.iter()) {
        total = (total + (a - b)?.abs()?.mean_all()?)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Lap,
    Perceptual,
}

pub enum ReconstructionLoss {
    Laplacian(LaplacianPyramid),
    Perceptual(Box<dyn PerceptualExtractor>),
}

impl ReconstructionLoss {
    pub fn kind(&self) -> LossKind {
        match self {
            ReconstructionLoss::Laplacian(_) => LossKind::Lap,
            ReconstructionLoss::Perceptual(_) => LossKind::Perceptual,
        }
    }

    pub fn compute(&self, generated: &Tensor, target: &Tensor) -> Result<Tensor> {
        match self {
            ReconstructionLoss::Laplacian(p) => p.loss(generated, target),
            ReconstructionLoss::Perceptual(e) => perceptual_loss(generated, target, e.as_ref()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenEpoch {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

/// Optimizer state for generator parameters and latent rows, resumable
/// across processes.
pub struct GenerationTrainer {
    optim: OptimConfig,
    params: Optimizer,
    rows: RowOptimizer,
    next_epoch: usize,
}

impl GenerationTrainer {
    pub fn new(optim: &OptimConfig, table: &LatentTable) -> Result<Self> {
        optim.validate()?;
        Ok(Self {
            optim: optim.clone(),
            params: Optimizer::new(optim),
            rows: RowOptimizer::new(optim, table.len(), table.code_dim()),
            next_epoch: 0,
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    /// Trains until epoch `until` (exclusive), capped at the configured count.
    #[allow(clippy::too_many_arguments)]
    pub fn run<G: Generator + ?Sized>(
        &mut self,
        data: &LabeledImageSet,
        table: &mut LatentTable,
        gen: &G,
        loss: &ReconstructionLoss,
        seed: u64,
        until: usize,
        mut observer: impl FnMut(&GenEpoch, &LatentTable),
    ) -> Result<Vec<GenEpoch>> {
        check_compatible(data, table, gen)?;
        if self.rows.rows() != table.len() {
            return Err(Error::Shape("trainer was built for a different latent table".into()));
        }
        let dtype = gen.params().dtype();
        let w = table.code_dim();
        let until = until.min(self.optim.epochs);
        let mut log = Vec::new();
        while self.next_epoch < until {
            let epoch = self.next_epoch;
            let (prate, zrate) = (self.optim.param_rate(epoch), self.optim.latent_rate(epoch));
            let mut rng = epoch_rng(seed, epoch, 3);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let (mut sum, mut batches) = (0.0, 0usize);
            for idx in order.chunks(self.optim.batch_size) {
                let z: Vec<f64> = idx.iter().flat_map(|&i| table.code(i).to_vec()).collect();
                let z = Var::from_tensor(&Tensor::from_vec(z, (idx.len(), w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)?;
                let x = data.batch_tensor(idx, dtype)?;
                let l = loss.compute(&gen.generate(z.as_tensor())?, &x)?;
                let value = l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                check_loss(value, "reconstruction")?;
                let grads = l.backward()?;
                self.params.step(gen.params(), &grads, prate)?;
                let zg = match grads.get(z.as_tensor()) {
                    Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
                    None => vec![0.0; idx.len() * w],
                };
                self.rows.step(table.codes_mut(), idx, &zg, zrate)?;
                sum += value;
                batches += 1;
            }
            table.normalize_blocks()?;
            let record = GenEpoch {
                epoch,
                loss: sum / batches.max(1) as f64,
            };
            observer(&record, table);
            log.push(record);
            self.next_epoch += 1;
        }
        Ok(log)
    }

    pub fn state_blocks(&self, params: &ParamStore) -> Result<Vec<NamedBlock>> {
        let mut blocks = self.params.state_blocks(params, "opt.params")?;
        blocks.extend(self.rows.state_blocks("opt.latent")?);
        blocks.push(NamedBlock::new(
            "opt.next_epoch",
            vec![],
            BlockData::F64(vec![self.next_epoch as f64]),
        )?);
        Ok(blocks)
    }

    pub fn load_state(&mut self, params: &ParamStore, blocks: &[NamedBlock]) -> Result<()> {
        self.params.load_state(params, blocks, "opt.params")?;
        self.rows.load_state(blocks, "opt.latent")?;
        let next = blocks
            .iter()
            .find(|b| b.name == "opt.next_epoch")
            .ok_or_else(|| Error::Checkpoint("missing opt.next_epoch".into()))?;
        self.next_epoch = next.data.to_f64().first().copied().unwrap_or(0.0) as usize;
        Ok(())
    }
}

fn check_compatible<G: Generator + ?Sized>(data: &LabeledImageSet, table: &LatentTable, gen: &G) -> Result<()> {
    if table.len() != data.len() {
        return Err(Error::Shape(format!("{} codes for {} images", table.len(), data.len())));
    }
    if gen.class_dim() != table.class_dim() || gen.noise_dim() != table.noise_dim() {
        return Err(Error::Shape(format!(
            "generator takes ({}, {}) code blocks, table holds ({}, {})",
            gen.class_dim(),
            gen.noise_dim(),
            table.class_dim(),
            table.noise_dim()
        )));
    }
    if gen.image_shape() != data.shape() {
        return Err(Error::Shape(format!(
            "generator emits {} images, dataset holds {}",
            gen.image_shape(),
            data.shape()
        )));
    }
    Ok(())
}

/// Runs every configured epoch from scratch.
pub fn train_generation<G: Generator + ?Sized>(
    data: &LabeledImageSet,
    table: &mut LatentTable,
    gen: &G,
    loss: &ReconstructionLoss,
    optim: &OptimConfig,
    seed: u64,
    observer: impl FnMut(&GenEpoch, &LatentTable),
) -> Result<Vec<GenEpoch>> {
    let mut trainer = GenerationTrainer::new(optim, table)?;
    trainer.run(data, table, gen, loss, seed, optim.epochs, observer)
}

/// Decodes arbitrary codes (`n × (K + d)`) into clipped images.
pub fn decode_codes<G: Generator + ?Sized>(gen: &G, codes: &[f64], labels: Vec<usize>) -> Result<LabeledImageSet> {
    let w = gen.code_dim();
    let shape = gen.image_shape();
    if codes.len() != labels.len() * w {
        return Err(Error::Shape(format!(
            "{} code values for {} labels of width {w}",
            codes.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(LabeledImageSet::new(shape, Vec::new(), Some(Vec::new()), gen.class_dim())?);
    }
    let z = Tensor::from_slice(codes, (labels.len(), w), &candle_core::Device::Cpu)?.to_dtype(gen.params().dtype())?;
    let images = crate::nn::forward_chunked(&z, 256, |c| gen.generate(c))?;
    let pixels = images.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    LabeledImageSet::from_unclipped(shape, pixels, Some(labels), gen.class_dim())
}

/// `G(z_i)` for the requested rows, clipped to `[0, 1]`, labeled by membership.
pub fn reconstruct<G: Generator + ?Sized>(gen: &G, table: &LatentTable, indices: &[usize]) -> Result<LabeledImageSet> {
    if let Some(i) = indices.iter().find(|&&i| i >= table.len()) {
        return Err(Error::InvalidArgument(format!("index {i} outside a table of {}", table.len())));
    }
    let codes: Vec<f64> = indices.iter().flat_map(|&i| table.code(i).to_vec()).collect();
    let labels = indices.iter().map(|&i| table.membership()[i]).collect();
    decode_codes(gen, &codes, labels)
}

/// Mean reconstruction loss of the stored codes against `data`, unclipped output.
pub fn reconstruction_loss<G: Generator + ?Sized>(
    data: &LabeledImageSet,
    table: &LatentTable,
    gen: &G,
    loss: &ReconstructionLoss,
) -> Result<f64> {
    check_compatible(data, table, gen)?;
    let dtype = gen.params().dtype();
    let w = table.code_dim();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for idx in all.chunks(256) {
        let z: Vec<f64> = idx.iter().flat_map(|&i| table.code(i).to_vec()).collect();
        let z = Tensor::from_vec(z, (idx.len(), w), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        let l = loss.compute(&gen.generate(&z)?, &data.batch_tensor(idx, dtype)?)?;
        total += l.to_dtype(DType::F64)?.to_scalar::<f64>()? * idx.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}
