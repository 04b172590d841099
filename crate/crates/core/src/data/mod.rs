//! Image sets, on-disk loading, subsampling and augmentation.
//!
//! Images are stored channel-major (`C×H×W`) as `f32` in `[0, 1]`, packed
//! contiguously in one buffer per set.

mod augment;
mod io;
mod toy;

pub use augment::{rotate_batch, rotate_image, AugmentationSpec, ColorJitter, RotatedBatch};
pub use io::{decode_image, load_dataset, save_dataset, save_grid};
pub use toy::{build_toy, DatasetSpec, ToyFamily, ToySpec};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_square(&self) -> bool {
        self.height == self.width
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A sample of images with optional integer labels in `[0, class_count)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    shape: ImageShape,
    pixels: Vec<f32>,
    labels: Option<Vec<usize>>,
    class_count: usize,
    class_names: Vec<String>,
}

impl LabeledImageSet {
    /// Builds a set, checking pixel range and label range.
    ///
    /// Class coverage (every class has a member) is not required here, since
    /// empty and partial sets occur naturally; see [`Self::missing_classes`].
    pub fn new(
        shape: ImageShape,
        pixels: Vec<f32>,
        labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        if shape.numel() == 0 {
            return Err(Error::Shape(format!("degenerate image shape {shape}")));
        }
        if pixels.len() % shape.numel() != 0 {
            return Err(Error::Shape(format!(
                "pixel buffer of {} values is not a multiple of {shape}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data(format!(
                "pixel {bad} has value {} outside [0, 1]",
                pixels[bad]
            )));
        }
        let n = pixels.len() / shape.numel();
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Data(format!(
                    "{} labels for {n} images",
                    labels.len()
                )));
            }
            if class_count == 0 {
                return Err(Error::Data("labeled set with zero classes".into()));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
                return Err(Error::Data(format!(
                    "label {bad} outside [0, {class_count})"
                )));
            }
        }
        let class_names = (0..class_count).map(default_class_name).collect();
        Ok(Self {
            shape,
            pixels,
            labels,
            class_count,
            class_names,
        })
    }

    /// Clamps every value into `[0, 1]` before building the set.
    pub fn from_unclipped(
        shape: ImageShape,
        mut pixels: Vec<f32>,
        labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        for p in &mut pixels {
            if !p.is_finite() {
                return Err(Error::Numerical("non-finite pixel value".into()));
            }
            *p = p.clamp(0.0, 1.0);
        }
        Self::new(shape, pixels, labels, class_count)
    }

    pub fn empty(shape: ImageShape, class_count: usize) -> Self {
        Self {
            shape,
            pixels: Vec::new(),
            labels: Some(Vec::new()),
            class_count,
            class_names: (0..class_count).map(default_class_name).collect(),
        }
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.class_count {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                names.len(),
                self.class_count
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Labels, or a data error naming the operation that needed them.
    pub fn require_labels(&self, what: &str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("{what} requires a labeled dataset")))
    }

    /// Same images with labels removed.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Classes with no member, ascending. Empty for unlabeled sets.
    pub fn missing_classes(&self) -> Vec<usize> {
        let Some(labels) = &self.labels else {
            return Vec::new();
        };
        let mut seen = vec![false; self.class_count];
        for &l in labels {
            seen[l] = true;
        }
        (0..self.class_count).filter(|&c| !seen[c]).collect()
    }

    /// Image indices grouped by label.
    pub fn indices_by_class(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self.require_labels("grouping by class")?;
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        Ok(groups)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for set of {n}"
            )));
        }
        let mut pixels = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self {
            shape: self.shape,
            pixels,
            labels,
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        })
    }

    /// Appends `other` after `self`; both must be labeled alike.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot concatenate {} with {}",
                self.shape, other.shape
            )));
        }
        if self.class_count != other.class_count {
            return Err(Error::Data(format!(
                "cannot concatenate sets with {} and {} classes",
                self.class_count, other.class_count
            )));
        }
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            (None, None) => None,
            _ => {
                return Err(Error::Data(
                    "cannot concatenate labeled with unlabeled set".into(),
                ))
            }
        };
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        Ok(Self {
            shape: self.shape,
            pixels,
            labels,
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        })
    }

    /// Stacks the selected images into a `(B, C, H, W)` tensor.
    pub fn batch_tensor(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let mut buf = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            buf.extend_from_slice(self.image(i));
        }
        images_to_tensor(buf, indices.len(), self.shape, dtype)
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        images_to_tensor(self.pixels.clone(), self.len(), self.shape, dtype)
    }
}

/// Wraps a packed `C×H×W` buffer of `count` images as a `(B, C, H, W)` tensor.
pub fn images_to_tensor(
    buf: Vec<f32>,
    count: usize,
    shape: ImageShape,
    dtype: DType,
) -> Result<Tensor> {
    let t = Tensor::from_vec(
        buf,
        (count, shape.channels, shape.height, shape.width),
        &Device::Cpu,
    )?;
    Ok(t.to_dtype(dtype)?)
}

pub(crate) fn default_class_name(c: usize) -> String {
    format!("class_{c:03}")
}

/// Draws exactly `spc` members of every class without replacement.
///
/// The result keeps the original relative order of the chosen images.
pub fn subsample_spc(data: &LabeledImageSet, spc: usize, seed: u64) -> Result<LabeledImageSet> {
    if spc == 0 {
        return Err(Error::InvalidArgument("spc must be positive".into()));
    }
    let groups = data.indices_by_class()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(spc * groups.len());
    for (c, members) in groups.iter().enumerate() {
        if members.len() < spc {
            return Err(Error::Data(format!(
                "class {c} has {} members, fewer than spc={spc}",
                members.len()
            )));
        }
        let mut pick: Vec<usize> = members.choose_multiple(&mut rng, spc).copied().collect();
        pick.sort_unstable();
        chosen.extend(pick);
    }
    chosen.sort_unstable();
    data.select(&chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(n_per_class: usize, k: usize) -> LabeledImageSet {
        let shape = ImageShape::new(1, 2, 2);
        let n = n_per_class * k;
        let pixels = (0..n * 4).map(|i| (i % 7) as f32 / 7.0).collect();
        let labels = (0..n).map(|i| i % k).collect();
        LabeledImageSet::new(shape, pixels, Some(labels), k).unwrap()
    }

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        let shape = ImageShape::new(1, 1, 2);
        assert!(LabeledImageSet::new(shape, vec![0.0, 1.5], None, 0).is_err());
        assert!(LabeledImageSet::new(shape, vec![0.0, 0.5], Some(vec![3]), 2).is_err());
        assert!(LabeledImageSet::new(shape, vec![0.0, 0.5, 0.1], None, 0).is_err());
    }

    #[test]
    fn subsample_counts_per_class() {
        let data = labeled(500, 10);
        let sub = subsample_spc(&data, 5, 0).unwrap();
        assert_eq!(sub.len(), 50);
        for g in sub.indices_by_class().unwrap() {
            assert_eq!(g.len(), 5);
        }
    }

    #[test]
    fn subsample_full_class_is_identity() {
        let data = labeled(4, 3);
        let sub = subsample_spc(&data, 4, 9).unwrap();
        assert_eq!(sub, data);
    }

    #[test]
    fn subsample_is_reproducible() {
        let data = labeled(50, 4);
        let a = subsample_spc(&data, 7, 3).unwrap();
        let b = subsample_spc(&data, 7, 3).unwrap();
        assert_eq!(a, b);
        let c = subsample_spc(&data, 7, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn subsample_too_few_members() {
        let data = labeled(3, 2);
        let err = subsample_spc(&data, 4, 0).unwrap_err();
        assert!(err.to_string().contains("fewer than spc"));
    }

    #[test]
    fn missing_classes_reported() {
        let shape = ImageShape::new(1, 1, 1);
        let set = LabeledImageSet::new(shape, vec![0.1, 0.2], Some(vec![0, 2]), 4).unwrap();
        assert_eq!(set.missing_classes(), vec![1, 3]);
    }
}
