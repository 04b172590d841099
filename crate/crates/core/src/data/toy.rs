//! Deterministic synthetic datasets for desk-scale experiments.

use std::f32::consts::PI;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageShape, LabeledImageSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyFamily {
    /// One Gaussian blob per image in the upper band; the class fixes the
    /// hue and a horizontal slot.
    Blobs,
    /// One outlined or filled shape per image; the class fixes the shape,
    /// colours are shared across classes.
    Shapes,
    /// One Gaussian blob anywhere in the image; only the hue marks the class.
    Scatter,
}

/// `toy:<K>x<spc>@<H>[:<family>]`
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToySpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub family: ToyFamily,
}

impl ToySpec {
    pub fn new(classes: usize, per_class: usize, size: usize) -> Self {
        Self {
            classes,
            per_class,
            size,
            family: ToyFamily::Blobs,
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(3, self.size, self.size)
    }

    pub fn with_per_class(self, per_class: usize) -> Self {
        Self { per_class, ..self }
    }
}

impl fmt::Display for ToySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "toy:{}x{}@{}", self.classes, self.per_class, self.size)?;
        match self.family {
            ToyFamily::Blobs => {}
            ToyFamily::Shapes => write!(f, ":shapes")?,
            ToyFamily::Scatter => write!(f, ":scatter")?,
        }
        Ok(())
    }
}

impl FromStr for ToySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "dataset spec {s:?} is not of the form toy:<K>x<spc>@<H>[:blobs|:shapes|:scatter]"
            ))
        };
        let body = s.strip_prefix("toy:").ok_or_else(bad)?;
        let (body, family) = match body.split_once(':') {
            None => (body, ToyFamily::Blobs),
            Some((b, "blobs")) => (b, ToyFamily::Blobs),
            Some((b, "shapes")) => (b, ToyFamily::Shapes),
            Some((b, "scatter")) => (b, ToyFamily::Scatter),
            Some(_) => return Err(bad()),
        };
        let (k, rest) = body.split_once('x').ok_or_else(bad)?;
        let (spc, size) = rest.split_once('@').ok_or_else(bad)?;
        let parse = |v: &str| -> Result<usize> {
            if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            v.parse::<usize>().map_err(|_| bad())
        };
        let spec = ToySpec {
            classes: parse(k)?,
            per_class: parse(spc)?,
            size: parse(size)?,
            family,
        };
        if spec.classes < 1 || spec.classes > 64 {
            return Err(Error::Config(format!("toy class count {} outside [1, 64]", spec.classes)));
        }
        if spec.per_class < 1 || spec.per_class > 100_000 {
            return Err(Error::Config(format!("toy spc {} outside [1, 100000]", spec.per_class)));
        }
        if spec.size < 8 || spec.size > 256 {
            return Err(Error::Config(format!("toy image size {} outside [8, 256]", spec.size)));
        }
        Ok(spec)
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum DatasetSpec {
    Toy(ToySpec),
    Directory(PathBuf),
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.starts_with("toy:") {
            return Ok(DatasetSpec::Toy(s.parse()?));
        }
        if s.is_empty() {
            return Err(Error::Config("empty dataset spec".into()));
        }
        Ok(DatasetSpec::Directory(PathBuf::from(s.strip_prefix("dir:").unwrap_or(s))))
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Toy(t) => t.fmt(f),
            DatasetSpec::Directory(p) => write!(f, "{}", p.display()),
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Builds `classes × per_class` images, class-major.
pub fn build_toy(spec: &ToySpec, seed: u64) -> Result<LabeledImageSet> {
    let shape = spec.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70f0_da7a);
    let n = spec.classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * shape.numel());
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.per_class {
            let img = match spec.family {
                ToyFamily::Blobs => blob_image(spec, c, &mut rng, true),
                ToyFamily::Scatter => blob_image(spec, c, &mut rng, false),
                ToyFamily::Shapes => shape_image(spec, c, &mut rng),
            };
            pixels.extend(img);
            labels.push(c);
        }
    }
    LabeledImageSet::new(shape, pixels, Some(labels), spec.classes)
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..3 * size * size).map(|_| rng.gen_range(0.0..0.12)).collect()
}

fn blob_image(spec: &ToySpec, class: usize, rng: &mut ChaCha8Rng, slotted: bool) -> Vec<f32> {
    let n = spec.size;
    let nf = n as f32;
    let k = spec.classes as f32;
    let hue = class as f32 / k + rng.gen_range(-0.03..0.03);
    let rgb = hsv_to_rgb(hue, rng.gen_range(0.75..1.0), 1.0);
    let (cy, cx) = if slotted {
        (rng.gen_range(0.22..0.42), 0.15 + 0.7 * (class as f32 + rng.gen_range(0.2..0.8)) / k)
    } else {
        (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8))
    };
    let (cy, cx) = (cy * nf, cx * nf);
    let sigma = rng.gen_range(0.07..0.12) * nf;
    let amp = rng.gen_range(0.7..1.0);
    let mut img = background(n, rng);
    for y in 0..n {
        for x in 0..n {
            let d2 = (y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2);
            let g = amp * (-d2 / (2.0 * sigma * sigma)).exp();
            for (ch, col) in rgb.iter().enumerate() {
                let p = &mut img[ch * n * n + y * n + x];
                *p = (*p + g * col).min(1.0);
            }
        }
    }
    img
}

fn shape_image(spec: &ToySpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = spec.size;
    let nf = n as f32;
    let rgb = hsv_to_rgb(rng.gen(), rng.gen_range(0.6..1.0), rng.gen_range(0.8..1.0));
    let cy = rng.gen_range(0.35..0.65) * nf;
    let cx = rng.gen_range(0.35..0.65) * nf;
    let r = rng.gen_range(0.18..0.3) * nf;
    let angle = rng.gen_range(-0.3..0.3f32);
    let kind = class % 8;
    let mut img = background(n, rng);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            let (u, v) = (
                dx * angle.cos() + dy * angle.sin(),
                -dx * angle.sin() + dy * angle.cos(),
            );
            let rho = (u * u + v * v).sqrt();
            let inside = match kind {
                0 => rho <= r,
                1 => u.abs() <= r * 0.85 && v.abs() <= r * 0.85,
                2 => rho <= r && rho >= r * 0.55,
                3 => (u.abs() <= r * 0.3 && v.abs() <= r) || (v.abs() <= r * 0.3 && u.abs() <= r),
                4 => u.abs() + v.abs() <= r,
                5 => v >= -r * 0.8 && v <= r * 0.8 && u.abs() <= (v + r * 0.8) * 0.6,
                6 => u.abs() <= r && v.abs() <= r * 0.35,
                _ => {
                    let t = v.atan2(u);
                    rho <= r * (0.65 + 0.35 * (5.0 * t + PI / 2.0).cos())
                }
            };
            if inside {
                for (ch, col) in rgb.iter().enumerate() {
                    img[ch * n * n + y * n + x] = *col;
                }
            }
        }
    }
    img
}
