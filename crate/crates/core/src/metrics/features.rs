use candle_core::DType;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::{forward_chunked, Classifier, ImageClassifier, Module};

/// Deterministic map from images to feature vectors.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    /// `N × dim`, row-major.
    fn extract(&self, set: &LabeledImageSet) -> Result<Vec<f64>>;
}

/// Raw pixels.
pub struct Flatten {
    pub dim: usize,
}

impl FeatureExtractor for Flatten {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, set: &LabeledImageSet) -> Result<Vec<f64>> {
        if set.shape().numel() != self.dim {
            return Err(Error::Shape(format!("flatten built for {} values, images have {}", self.dim, set.shape().numel())));
        }
        Ok(set.pixels().iter().map(|&p| p as f64).collect())
    }
}

/// Projection onto the leading principal axes of a reference set.
pub struct Pca {
    mean: Vec<f64>,
    /// `P × F`, row-major, unit rows.
    axes: Vec<f64>,
    pixels: usize,
}

impl Pca {
    /// Fits from the `N × N` Gram matrix, so cost is independent of image size.
    pub fn fit(reference: &LabeledImageSet, components: usize) -> Result<Self> {
        let n = reference.len();
        let f = reference.shape().numel();
        if components == 0 || components > n.saturating_sub(1) {
            return Err(Error::InvalidArgument(format!(
                "{components} components from {n} images; need 1..={}",
                n.saturating_sub(1)
            )));
        }
        let mut x = DMatrix::from_row_slice(n, f, &reference.pixels().iter().map(|&p| p as f64).collect::<Vec<_>>());
        let mean = x.row_mean();
        for mut row in x.row_iter_mut() {
            row -= &mean;
        }
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut axes = Vec::with_capacity(components * f);
        for &k in order.iter().take(components) {
            let lambda = eig.eigenvalues[k];
            if lambda <= 1e-12 {
                return Err(Error::Numerical("reference set has fewer informative directions than requested".into()));
            }
            let axis = x.transpose() * eig.eigenvectors.column(k) / lambda.sqrt();
            axes.extend(axis.iter());
        }
        Ok(Self {
            mean: mean.iter().copied().collect(),
            axes,
            pixels: f,
        })
    }
}

impl FeatureExtractor for Pca {
    fn dim(&self) -> usize {
        self.axes.len() / self.pixels
    }

    fn extract(&self, set: &LabeledImageSet) -> Result<Vec<f64>> {
        if set.shape().numel() != self.pixels {
            return Err(Error::Shape("image size differs from the PCA reference".into()));
        }
        let p = self.dim();
        let mut out = Vec::with_capacity(set.len() * p);
        for i in 0..set.len() {
            let img = set.image(i);
            for a in self.axes.chunks_exact(self.pixels) {
                out.push(img.iter().zip(&self.mean).zip(a).map(|((&x, m), w)| (x as f64 - m) * w).sum());
            }
        }
        Ok(out)
    }
}

/// Penultimate activations of a trained classifier.
pub struct ClassifierFeatures(pub ImageClassifier);

impl FeatureExtractor for ClassifierFeatures {
    fn dim(&self) -> usize {
        self.0.feature_dim()
    }

    fn extract(&self, set: &LabeledImageSet) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Ok(Vec::new());
        }
        let x = set.to_tensor(self.0.params().dtype())?;
        let f = forward_chunked(&x, 512, |c| self.0.features(c))?;
        Ok(f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;

    #[test]
    fn pca_axes_are_orthonormal() {
        let shape = ImageShape::new(1, 3, 3);
        let pixels: Vec<f32> = (0..10 * 9).map(|i| ((i * 37 % 101) as f32) / 101.0).collect();
        let set = LabeledImageSet::new(shape, pixels, None, 0).unwrap();
        let pca = Pca::fit(&set, 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..9).map(|j| pca.axes[a * 9 + j] * pca.axes[b * 9 + j]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
        assert_eq!(pca.extract(&set).unwrap().len(), 30);
        assert!(Pca::fit(&set, 10).is_err());
    }
}
