//! Laplacian pyramid with a separable 5-tap binomial kernel.
//!
//! Every operator is a pair of dense matrices applied along H and W, so the
//! pyramid is an exact linear map that the autodiff backend differentiates
//! like any other matmul.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};

const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub levels: usize,
    /// Weight of the band-pass sum relative to the pixel term.
    pub gamma: f64,
}

impl PyramidConfig {
    /// 3 levels up to 32 px, 4 above.
    pub fn for_size(side: usize) -> Self {
        Self {
            levels: if side <= 32 { 3 } else { 4 },
            gamma: 1.0,
        }
    }

    pub fn validate(&self, shape: ImageShape) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("pyramid gamma must be positive, got {}", self.gamma)));
        }
        let side = shape.height.min(shape.width);
        if self.levels >= usize::BITS as usize || (1usize << self.levels) > side {
            return Err(Error::Config(format!(
                "{} pyramid levels do not fit {shape} images (need 2^k <= {side})",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Mirror index without edge repetition (`-1 → 1`, `n → n − 2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// `n × n` smoothing operator.
fn smooth_matrix(n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for p in 0..n {
        for (t, w) in KERNEL.iter().enumerate() {
            let q = reflect(p as isize + t as isize - 2, n);
            s[p * n + q] += w;
        }
    }
    s
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// `⌈n/2⌉ × n`: smooth then keep even samples.
fn down_matrix(n: usize) -> Vec<f64> {
    let s = smooth_matrix(n);
    let m = half(n);
    let mut d = vec![0.0; m * n];
    for r in 0..m {
        d[r * n..(r + 1) * n].copy_from_slice(&s[2 * r * n..(2 * r + 1) * n]);
    }
    d
}

/// `n × ⌈n/2⌉`: zero-insert then smooth, scaled by 2 to preserve constants.
fn up_matrix(n: usize) -> Vec<f64> {
    let s = smooth_matrix(n);
    let m = half(n);
    let mut u = vec![0.0; n * m];
    for p in 0..n {
        for c in 0..m {
            u[p * m + c] = 2.0 * s[p * n + 2 * c];
        }
    }
    u
}

struct Level {
    down_h: Tensor,
    down_w_t: Tensor,
    up_h: Tensor,
    up_w_t: Tensor,
}

pub struct LaplacianPyramid {
    config: PyramidConfig,
    shape: ImageShape,
    levels: Vec<Level>,
}

fn matrix(values: Vec<f64>, rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

impl LaplacianPyramid {
    pub fn new(config: PyramidConfig, shape: ImageShape, dtype: DType) -> Result<Self> {
        config.validate(shape)?;
        let (mut h, mut w) = (shape.height, shape.width);
        let mut levels = Vec::with_capacity(config.levels);
        for _ in 0..config.levels {
            let (h2, w2) = (half(h), half(w));
            levels.push(Level {
                down_h: matrix(down_matrix(h), h2, h, dtype)?,
                down_w_t: matrix(down_matrix(w), w2, w, dtype)?.t()?.contiguous()?,
                up_h: matrix(up_matrix(h), h, h2, dtype)?,
                up_w_t: matrix(up_matrix(w), w, w2, dtype)?.t()?.contiguous()?,
            });
            (h, w) = (h2, w2);
        }
        Ok(Self { config, shape, levels })
    }

    pub fn config(&self) -> PyramidConfig {
        self.config
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let s = self.shape;
        match x.dims() {
            [_, c, h, w] if (*c, *h, *w) == (s.channels, s.height, s.width) => Ok(()),
            d => Err(Error::Shape(format!("pyramid built for {s} images, got tensor {d:?}"))),
        }
    }

    /// Band-pass levels `L_0..L_{k−1}` and the low-pass residual `G_k`.
    pub fn decompose(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.check(x)?;
        let mut g = x.clone();
        let mut bands = Vec::with_capacity(self.levels.len());
        for lv in &self.levels {
            let next = lv.down_h.broadcast_matmul(&g)?.broadcast_matmul(&lv.down_w_t)?;
            let up = lv.up_h.broadcast_matmul(&next)?.broadcast_matmul(&lv.up_w_t)?;
            bands.push((g - up)?);
            g = next;
        }
        Ok((bands, g))
    }

    pub fn collapse(&self, bands: &[Tensor], residual: &Tensor) -> Result<Tensor> {
        if bands.len() != self.levels.len() {
            return Err(Error::Shape(format!(
                "{} bands for a {}-level pyramid",
                bands.len(),
                self.levels.len()
            )));
        }
        let mut g = residual.clone();
        for (lv, band) in self.levels.iter().zip(bands).rev() {
            g = (lv.up_h.broadcast_matmul(&g)?.broadcast_matmul(&lv.up_w_t)? + band)?;
        }
        Ok(g)
    }

    /// `mean|x − y| + γ Σ_i 2^(−2i) mean|L_i(x) − L_i(y)|` as a scalar tensor.
    pub fn loss(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.dims() != y.dims() {
            return Err(Error::Shape(format!("loss inputs {:?} and {:?}", x.dims(), y.dims())));
        }
        let diff = (x - y)?;
        let (bands, _) = self.decompose(&diff)?;
        let mut total = diff.abs()?.mean_all()?;
        for (i, band) in bands.iter().enumerate() {
            let w = self.config.gamma * 0.25f64.powi(i as i32);
            total = (total + (band.abs()?.mean_all()? * w)?)?;
        }
        Ok(total)
    }
}

/// Scalar convenience wrapper for single images in `C×H×W` layout.
pub fn lap_loss(x: &[f32], y: &[f32], shape: ImageShape, config: PyramidConfig) -> Result<f64> {
    let p = LaplacianPyramid::new(config, shape, DType::F64)?;
    let t = |v: &[f32]| -> Result<Tensor> {
        if v.len() != shape.numel() {
            return Err(Error::Shape(format!("image of {} values for {shape}", v.len())));
        }
        Ok(Tensor::from_slice(v, (1, shape.channels, shape.height, shape.width), &Device::Cpu)?
            .to_dtype(DType::F64)?)
    };
    Ok(p.loss(&t(x)?, &t(y)?)?.to_scalar::<f64>()?)
}
