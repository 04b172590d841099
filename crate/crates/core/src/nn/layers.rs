use candle_core::{Tensor, Var, D};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::Result;

fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

fn lecun_bound(fan_in: usize) -> f32 {
    (3.0 / fan_in as f32).sqrt()
}

pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// `relu_follows` selects He scaling, otherwise LeCun scaling.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        relu_follows: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = if relu_follows {
            he_bound(inputs)
        } else {
            lecun_bound(inputs)
        };
        let weight = ps.uniform(format!("{name}.weight"), &[outputs, inputs], bound, rng)?;
        let bias = ps.constant(format!("{name}.bias"), &[outputs], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = ps.uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            he_bound(fan_in),
            rng,
        )?;
        let bias = ps.constant(format!("{name}.bias"), &[out_channels], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Transposed convolution, kernel 4 / stride 2 / padding 1: doubles H and W.
pub struct UpConv {
    weight: Var,
    bias: Var,
}

impl UpConv {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        relu_follows: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // each output pixel sees in_channels * 4 taps
        let fan_in = in_channels * 4;
        let bound = if relu_follows {
            he_bound(fan_in)
        } else {
            lecun_bound(fan_in)
        };
        let weight = ps.uniform(
            format!("{name}.weight"),
            &[in_channels, out_channels, 4, 4],
            bound,
            rng,
        )?;
        let bias = ps.constant(format!("{name}.bias"), &[out_channels], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), 1, 0, 2, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Per-sample feature normalization with a class-selected gain and bias.
///
/// The class of each row is supplied as a one-hot matrix, so the selection
/// itself carries no gradient.
pub struct ClassConditionalNorm {
    gain: Var,
    bias: Var,
}

impl ClassConditionalNorm {
    pub fn new(ps: &mut ParamStore, name: &str, classes: usize, features: usize) -> Result<Self> {
        let gain = ps.constant(format!("{name}.gain"), &[classes, features], 1.0)?;
        let bias = ps.constant(format!("{name}.bias"), &[classes, features], 0.0)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, x: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let g = one_hot.matmul(self.gain.as_tensor())?;
        let b = one_hot.matmul(self.bias.as_tensor())?;
        Ok(((normed * g)? + b)?)
    }
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean cross-entropy of `logits` (B, K) against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let lp = log_softmax(logits)?;
    let idx = Tensor::from_slice(targets, (targets.len(), 1), logits.device())?;
    let picked = lp.gather(&idx, D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Argmax over the last dimension of a (B, K) tensor.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits
        .argmax(D::Minus1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|v| v as usize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn cross_entropy_matches_hand_value() {
        let logits = Tensor::new(&[[0.0f64, 0.0], [2.0, 0.0]], &Device::Cpu).unwrap();
        let ce = cross_entropy(&logits, &[0, 1]).unwrap().to_scalar::<f64>().unwrap();
        let expected = (2f64.ln() + (1.0 + 2f64.exp()).ln() - 0.0) / 2.0;
        assert!((ce - expected).abs() < 1e-12, "{ce} vs {expected}");
        let _ = DType::F64;
    }

    #[test]
    fn upconv_doubles_spatial_size() {
        use rand::SeedableRng;
        let mut ps = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let up = UpConv::new(&mut ps, "up", 4, 2, true, &mut rng).unwrap();
        let x = Tensor::zeros((3, 4, 5, 6), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[3, 2, 10, 12]);
    }
}
