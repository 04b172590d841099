//! Differentiable model families, optimizers and the checkpoint container.

pub mod checkpoint;
pub mod layers;
mod models;
pub mod optim;
mod params;

pub use checkpoint::{BlockData, Checkpoint, CheckpointMeta, NamedBlock};
pub use models::{
    Classifier, ClassifierSpec, DualHeadEncoder, Encoder, EncoderSpec, Generator, GeneratorArch,
    GeneratorSpec, ImageClassifier, ImageGenerator, Module, TrunkArch,
};
pub use optim::{OptimConfig, Optimizer, OptimizerKind, RowOptimizer};
pub use params::ParamStore;

use candle_core::Tensor;

use crate::error::Result;

/// Applies `f` to consecutive row chunks of `x` and concatenates the results.
pub fn forward_chunked(x: &Tensor, chunk: usize, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = x.dim(0)?;
    if n <= chunk {
        return f(x);
    }
    let mut parts = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        parts.push(f(&x.narrow(0, start, len)?)?.detach());
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}
