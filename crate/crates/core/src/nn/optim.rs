//! Parameter and latent-row optimizers with step-decay schedules.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::{BlockData, NamedBlock};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Any loss above this aborts training as a divergence.
pub const LOSS_EXPLOSION_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// Initial rate for model parameters.
    pub lr_params: f64,
    /// Initial rate for per-image latent codes (unused by stages without codes).
    #[serde(default)]
    pub lr_latent: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// SGD momentum, or the first-moment coefficient of the adaptive optimizer.
    pub momentum: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

fn default_beta2() -> f64 {
    0.999
}

impl OptimConfig {
    /// Encoder recipe for latent clustering.
    pub fn clustering() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr_params: 0.05,
            lr_latent: 0.0,
            decay_factor: 0.5,
            decay_interval: 50,
            weight_decay: 5e-4,
            momentum: 0.9,
            beta2: default_beta2(),
            batch_size: 128,
            epochs: 200,
        }
    }

    /// Generator + latent code recipe.
    pub fn generation() -> Self {
        Self {
            kind: OptimizerKind::AdaptiveMoment,
            lr_params: 0.001,
            lr_latent: 0.01,
            decay_factor: 0.5,
            decay_interval: 50,
            weight_decay: 0.0,
            momentum: 0.9,
            beta2: default_beta2(),
            batch_size: 128,
            epochs: 500,
        }
    }

    /// Small-sample classifier recipe.
    pub fn classifier() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr_params: 0.1,
            lr_latent: 0.0,
            decay_factor: 0.5,
            decay_interval: 30,
            weight_decay: 5e-4,
            momentum: 0.9,
            beta2: default_beta2(),
            batch_size: 128,
            epochs: 180,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("lr_params", self.lr_params)?;
        finite_nonneg("lr_latent", self.lr_latent)?;
        finite_nonneg("weight_decay", self.weight_decay)?;
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_interval == 0 {
            return Err(Error::Config("decay_interval must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum and beta2 must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// `base × decay^⌊epoch / interval⌋`, epochs counted from 0.
    pub fn scheduled(&self, base: f64, epoch: usize) -> f64 {
        base * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }

    pub fn param_rate(&self, epoch: usize) -> f64 {
        self.scheduled(self.lr_params, epoch)
    }

    pub fn latent_rate(&self, epoch: usize) -> f64 {
        self.scheduled(self.lr_latent, epoch)
    }
}

/// Aborts on a non-finite or exploding loss.
pub fn check_loss(loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("{what} loss is {loss}")));
    }
    if loss > LOSS_EXPLOSION_LIMIT {
        return Err(Error::Numerical(format!(
            "{what} loss {loss:.3e} exceeds {LOSS_EXPLOSION_LIMIT:.0e}"
        )));
    }
    Ok(())
}

struct Slot {
    first: Tensor,
    second: Option<Tensor>,
}

/// Stateful optimizer over every parameter of a [`ParamStore`].
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta2: f64,
    weight_decay: f64,
    slots: Vec<Option<Slot>>,
    steps: u64,
}

const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(config: &OptimConfig) -> Self {
        Self {
            kind: config.kind,
            momentum: config.momentum,
            beta2: config.beta2,
            weight_decay: config.weight_decay,
            slots: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, rate: f64) -> Result<()> {
        if self.slots.len() < params.len() {
            self.slots.resize_with(params.len(), || None);
        }
        self.steps += 1;
        for (i, (name, var)) in params.iter().enumerate() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let norm = grad.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {name}")));
            }
            let theta = var.as_tensor().detach();
            let grad = grad.detach();
            let grad = if self.weight_decay > 0.0 {
                (grad + (&theta * self.weight_decay)?)?
            } else {
                grad
            };
            let update = match self.kind {
                OptimizerKind::SgdMomentum => {
                    let buf = match self.slots[i].take() {
                        Some(s) if self.momentum > 0.0 => ((s.first * self.momentum)? + &grad)?,
                        _ => grad,
                    };
                    let update = (&buf * rate)?;
                    self.slots[i] = Some(Slot {
                        first: buf,
                        second: None,
                    });
                    update
                }
                OptimizerKind::AdaptiveMoment => {
                    let (m, v) = match self.slots[i].take() {
                        Some(Slot {
                            first,
                            second: Some(second),
                        }) => (first, second),
                        _ => (grad.zeros_like()?, grad.zeros_like()?),
                    };
                    let m = ((m * self.momentum)? + (&grad * (1.0 - self.momentum))?)?;
                    let v = ((v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
                    let t = self.steps as i32;
                    let m_hat = (&m / (1.0 - self.momentum.powi(t)))?;
                    let v_hat = (&v / (1.0 - self.beta2.powi(t)))?;
                    let update = ((m_hat / (v_hat.sqrt()? + ADAM_EPS)?)? * rate)?;
                    self.slots[i] = Some(Slot {
                        first: m,
                        second: Some(v),
                    });
                    update
                }
            };
            var.set(&theta.sub(&update)?)?;
        }
        Ok(())
    }

    /// Moment buffers as checkpoint blocks, prefixed by `prefix`.
    pub fn state_blocks(&self, params: &ParamStore, prefix: &str) -> Result<Vec<NamedBlock>> {
        let mut out = vec![NamedBlock::new(
            format!("{prefix}.steps"),
            vec![],
            BlockData::F64(vec![self.steps as f64]),
        )?];
        for (i, (name, _)) in params.iter().enumerate() {
            if let Some(Some(slot)) = self.slots.get(i) {
                out.push(NamedBlock::from_tensor(&format!("{prefix}.first.{name}"), &slot.first)?);
                if let Some(second) = &slot.second {
                    out.push(NamedBlock::from_tensor(&format!("{prefix}.second.{name}"), second)?);
                }
            }
        }
        Ok(out)
    }

    pub fn load_state(&mut self, params: &ParamStore, blocks: &[NamedBlock], prefix: &str) -> Result<()> {
        let find = |n: String| blocks.iter().find(|b| b.name == n);
        let steps = find(format!("{prefix}.steps"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.steps")))?;
        self.steps = steps.data.to_f64().first().copied().unwrap_or(0.0) as u64;
        self.slots = Vec::with_capacity(params.len());
        for (name, var) in params.iter() {
            let to_tensor = |b: &NamedBlock| -> Result<Tensor> {
                if b.dims != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state for {name} has wrong dims")));
                }
                Ok(Tensor::from_vec(b.data.to_f64(), var.dims(), var.device())?.to_dtype(var.dtype())?)
            };
            let slot = match find(format!("{prefix}.first.{name}")) {
                Some(first) => Some(Slot {
                    first: to_tensor(first)?,
                    second: find(format!("{prefix}.second.{name}")).map(to_tensor).transpose()?,
                }),
                None => None,
            };
            self.slots.push(slot);
        }
        Ok(())
    }
}

/// Optimizer for rows of a dense table where each step touches a subset of rows.
///
/// Rows outside the step's index set are left bit-identical, including
/// their moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct RowOptimizer {
    kind: OptimizerKind,
    width: usize,
    momentum: f64,
    beta2: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: Vec<u32>,
}

impl RowOptimizer {
    pub fn new(config: &OptimConfig, rows: usize, width: usize) -> Self {
        Self {
            kind: config.kind,
            width,
            momentum: config.momentum,
            beta2: config.beta2,
            first: vec![0.0; rows * width],
            second: vec![0.0; rows * width],
            steps: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    /// Applies `grads` (one row per entry of `rows`) to `table`.
    pub fn step(&mut self, table: &mut [f64], rows: &[usize], grads: &[f64], rate: f64) -> Result<()> {
        let w = self.width;
        if grads.len() != rows.len() * w || table.len() != self.steps.len() * w {
            return Err(Error::Shape(format!(
                "row step: {} rows, {} gradient values, width {w}",
                rows.len(),
                grads.len()
            )));
        }
        if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite latent gradient {g}")));
        }
        let mut seen = std::collections::HashSet::with_capacity(rows.len());
        for &r in rows {
            if r >= self.steps.len() || !seen.insert(r) {
                return Err(Error::InvalidArgument(format!("row {r} out of range or repeated")));
            }
        }
        if rate == 0.0 {
            return Ok(());
        }
        for (j, &r) in rows.iter().enumerate() {
            self.steps[r] += 1;
            let t = self.steps[r] as i32;
            for k in 0..w {
                let g = grads[j * w + k];
                let idx = r * w + k;
                let delta = match self.kind {
                    OptimizerKind::SgdMomentum => {
                        self.first[idx] = self.momentum * self.first[idx] + g;
                        self.first[idx]
                    }
                    OptimizerKind::AdaptiveMoment => {
                        self.first[idx] = self.momentum * self.first[idx] + (1.0 - self.momentum) * g;
                        self.second[idx] = self.beta2 * self.second[idx] + (1.0 - self.beta2) * g * g;
                        let m_hat = self.first[idx] / (1.0 - self.momentum.powi(t));
                        let v_hat = self.second[idx] / (1.0 - self.beta2.powi(t));
                        m_hat / (v_hat.sqrt() + ADAM_EPS)
                    }
                };
                table[idx] -= rate * delta;
            }
        }
        Ok(())
    }

    pub fn state_blocks(&self, prefix: &str) -> Result<Vec<NamedBlock>> {
        let rows = self.steps.len();
        Ok(vec![
            NamedBlock::new(format!("{prefix}.first"), vec![rows, self.width], BlockData::F64(self.first.clone()))?,
            NamedBlock::new(format!("{prefix}.second"), vec![rows, self.width], BlockData::F64(self.second.clone()))?,
            NamedBlock::new(
                format!("{prefix}.steps"),
                vec![rows],
                BlockData::F64(self.steps.iter().map(|&s| s as f64).collect()),
            )?,
        ])
    }

    pub fn load_state(&mut self, blocks: &[NamedBlock], prefix: &str) -> Result<()> {
        let rows = self.steps.len();
        let get = |suffix: &str, len: usize| -> Result<Vec<f64>> {
            let name = format!("{prefix}.{suffix}");
            let b = blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
            if b.data.len() != len {
                return Err(Error::Checkpoint(format!("{name} has {} values, expected {len}", b.data.len())));
            }
            Ok(b.data.to_f64())
        };
        self.first = get("first", rows * self.width)?;
        self.second = get("second", rows * self.width)?;
        self.steps = get("steps", rows)?.into_iter().map(|s| s as u32).collect();
        Ok(())
    }
}
