//! Per-cluster Gaussian posteriors over latent codes.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::generation::{decode_codes, LatentTable};
use crate::nn::Generator;

pub const DEFAULT_RIDGE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    #[default]
    Diag,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Covariance {
    /// Per-coordinate variances.
    Diag(Vec<f64>),
    /// Row-major `D × D`, with its lower Cholesky factor.
    Full { matrix: Vec<f64>, cholesky: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterGaussian {
    pub mean: Vec<f64>,
    pub covariance: Covariance,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPosterior {
    pub class_dim: usize,
    pub noise_dim: usize,
    pub mode: CovarianceMode,
    pub ridge: f64,
    pub clusters: Vec<ClusterGaussian>,
}

/// Streaming mean and co-moments (Welford).
struct Moments {
    n: usize,
    mean: Vec<f64>,
    /// Diagonal or full co-moment sums.
    m2: Vec<f64>,
    full: bool,
}

impl Moments {
    fn new(dim: usize, full: bool) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; if full { dim * dim } else { dim }],
            full,
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let d = self.mean.len();
        let before: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, delta) in self.mean.iter_mut().zip(&before) {
            *m += delta / self.n as f64;
        }
        let after: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        if self.full {
            for r in 0..d {
                for c in 0..d {
                    self.m2[r * d + c] += before[r] * after[c];
                }
            }
        } else {
            for j in 0..d {
                self.m2[j] += before[j] * after[j];
            }
        }
    }
}

/// Fits one Gaussian per cluster around the codes in `table`.
///
/// Covariances are population estimates (divided by the member count) plus
/// `ridge · I`.
pub fn fit_posterior(table: &LatentTable, mode: CovarianceMode, ridge: f64) -> Result<ClusterPosterior> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let k = table.class_dim();
    let d = table.code_dim();
    let full = mode == CovarianceMode::Full;
    let mut acc: Vec<Moments> = (0..k).map(|_| Moments::new(d, full)).collect();
    for (i, &c) in table.membership().iter().enumerate() {
        acc[c].push(table.code(i));
    }
    let mut clusters = Vec::with_capacity(k);
    for (c, m) in acc.into_iter().enumerate() {
        if m.n == 0 {
            return Err(Error::Data(format!("cluster {c} has no members")));
        }
        if full && m.n < 2 {
            return Err(Error::Data(format!("full covariance for cluster {c} needs >= 2 members")));
        }
        let scale = 1.0 / m.n as f64;
        let covariance = if full {
            let mut matrix: Vec<f64> = m.m2.iter().map(|v| v * scale).collect();
            // symmetrize away accumulation asymmetry
            for r in 0..d {
                for c2 in 0..r {
                    let avg = 0.5 * (matrix[r * d + c2] + matrix[c2 * d + r]);
                    matrix[r * d + c2] = avg;
                    matrix[c2 * d + r] = avg;
                }
                matrix[r * d + r] += ridge;
            }
            let chol = DMatrix::from_row_slice(d, d, &matrix)
                .cholesky()
                .ok_or_else(|| Error::Numerical(format!("covariance of cluster {c} is not positive definite; raise the ridge")))?;
            let l = chol.l();
            let cholesky = (0..d).flat_map(|r| (0..d).map(move |c2| (r, c2))).map(|(r, c2)| l[(r, c2)]).collect();
            Covariance::Full { matrix, cholesky }
        } else {
            Covariance::Diag(m.m2.iter().map(|v| v * scale + ridge).collect())
        };
        clusters.push(ClusterGaussian {
            mean: m.mean,
            covariance,
            count: m.n,
        });
    }
    Ok(ClusterPosterior {
        class_dim: k,
        noise_dim: table.noise_dim(),
        mode,
        ridge,
        clusters,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Component drawn uniformly per sample.
    Mixture,
    PerClass(usize),
    /// `n / K` per component, the first `n mod K` components one extra.
    Balanced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledCodes {
    /// `n × (K + d)`, both blocks unit norm.
    pub codes: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ClusterPosterior {
    pub fn code_dim(&self) -> usize {
        self.class_dim + self.noise_dim
    }

    /// Shape and finiteness checks for posteriors read from disk.
    pub fn validate(&self) -> Result<()> {
        let d = self.code_dim();
        if self.class_dim == 0 || self.noise_dim == 0 || self.clusters.is_empty() {
            return Err(Error::Shape("posterior needs non-empty blocks and at least one cluster".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        for (c, g) in self.clusters.iter().enumerate() {
            let ok = g.mean.len() == d
                && finite(&g.mean)
                && match &g.covariance {
                    Covariance::Diag(v) => v.len() == d && finite(v) && v.iter().all(|&x| x >= 0.0),
                    Covariance::Full { matrix, cholesky } => {
                        matrix.len() == d * d && cholesky.len() == d * d && finite(matrix) && finite(cholesky)
                    }
                };
            if !ok {
                return Err(Error::Shape(format!("cluster {c} does not describe a {d}-dimensional Gaussian")));
            }
        }
        Ok(())
    }

    fn draw(&self, c: usize, tau: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) -> Result<()> {
        let g = &self.clusters[c];
        let d = self.code_dim();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut z = g.mean.clone();
        match &g.covariance {
            Covariance::Diag(var) => {
                for j in 0..d {
                    z[j] += tau * var[j].sqrt() * eps[j];
                }
            }
            Covariance::Full { cholesky, .. } => {
                for r in 0..d {
                    let s: f64 = (0..=r).map(|c2| cholesky[r * d + c2] * eps[c2]).sum();
                    z[r] += tau * s;
                }
            }
        }
        let (t, v) = z.split_at_mut(self.class_dim);
        for block in [t, v] {
            let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Numerical(format!("sampled block of norm {norm} cannot be projected")));
            }
            block.iter_mut().for_each(|x| *x /= norm);
        }
        out.extend(z);
        Ok(())
    }
}

pub fn sample_codes(post: &ClusterPosterior, n: usize, tau: f64, mode: SampleMode, seed: u64) -> Result<SampledCodes> {
    post.validate()?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be finite and >= 0, got {tau}")));
    }
    let k = post.clusters.len();
    if let SampleMode::PerClass(c) = mode {
        if c >= k {
            return Err(Error::InvalidArgument(format!("unknown cluster {c}; the posterior has {k}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = Vec::with_capacity(n * post.code_dim());
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let c = match mode {
            SampleMode::Mixture => rng.gen_range(0..k),
            SampleMode::PerClass(c) => c,
            SampleMode::Balanced => balanced_label(s, n, k),
        };
        post.draw(c, tau, &mut rng, &mut codes)?;
        labels.push(c);
    }
    Ok(SampledCodes { codes, labels })
}

/// Label of sample `s` when `n` samples are split as evenly as possible.
fn balanced_label(s: usize, n: usize, k: usize) -> usize {
    let (base, extra) = (n / k, n % k);
    let big = extra * (base + 1);
    if s < big {
        s / (base + 1)
    } else {
        extra + (s - big) / base.max(1)
    }
}

/// Decodes sampled codes into a labeled image set.
pub fn generate_images<G: Generator + ?Sized>(gen: &G, sampled: &SampledCodes) -> Result<LabeledImageSet> {
    decode_codes(gen, &sampled.codes, sampled.labels.clone())
}

/// Lloyd's algorithm with k-means++ seeding; empty clusters are reseeded
/// at the point farthest from its centre.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, max_iter: usize) -> Result<Vec<usize>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Shape(format!("{} values do not form points of width {dim}", points.len())));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    let p = |i: usize| &points[i * dim..(i + 1) * dim];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres: Vec<Vec<f64>> = vec![p(rng.gen_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(p(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centres.push(p(next).to_vec());
        for i in 0..n {
            nearest[i] = nearest[i].min(dist(p(i), centres.last().unwrap()));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for (c, centre) in centres.iter().enumerate() {
                let d = dist(p(i), centre);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            sums[labels[i]].iter_mut().zip(p(i)).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist(p(a), &centres[labels[a]]).total_cmp(&dist(p(b), &centres[labels[b]]))
                    })
                    .unwrap();
                centres[c] = p(far).to_vec();
                labels[far] = c;
                changed = true;
            } else {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::LatentMode;

    fn table(codes: Vec<f64>, membership: Vec<usize>, k: usize, d: usize) -> LatentTable {
        LatentTable::from_parts(k, d, codes, membership, 0.1, LatentMode::Supervised).unwrap()
    }

    #[test]
    fn identical_codes_give_ridge_covariance() {
        let z = vec![0.6, 0.8, 1.0, 0.0];
        let t = table([z.clone(), z.clone(), z.clone()].concat(), vec![1, 1, 1], 2, 2);
        let err = fit_posterior(&t, CovarianceMode::Diag, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "cluster 0 is empty");
        let t = table([z.clone(), z.clone(), vec![1.0, 0.0, 0.0, 1.0]].concat(), vec![1, 1, 0], 2, 2);
        let post = fit_posterior(&t, CovarianceMode::Diag, 1e-4).unwrap();
        assert_eq!(post.clusters[1].mean, z);
        assert_eq!(post.clusters[1].covariance, Covariance::Diag(vec![1e-4; 4]));
    }

    #[test]
    fn two_point_statistics() {
        let a = [0.6, 0.8, 0.0, 1.0];
        let b = [0.8, 0.6, 1.0, 0.0];
        let t = table([a.to_vec(), b.to_vec(), a.to_vec()].concat(), vec![0, 0, 1], 2, 2);
        let post = fit_posterior(&t, CovarianceMode::Diag, 0.01).unwrap();
        let g = &post.clusters[0];
        for j in 0..4 {
            assert!((g.mean[j] - (a[j] + b[j]) / 2.0).abs() < 1e-15);
            let Covariance::Diag(v) = &g.covariance else { panic!() };
            assert!((v[j] - (((a[j] - b[j]) / 2.0).powi(2) + 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_temperature_returns_projected_means() {
        let t = table(vec![0.6, 0.8, 1.0, 0.0, 0.8, 0.6, 0.0, 1.0], vec![0, 1], 2, 2);
        let post = fit_posterior(&t, CovarianceMode::Diag, 1e-4).unwrap();
        let s = sample_codes(&post, 6, 0.0, SampleMode::Mixture, 1).unwrap();
        for (row, &c) in s.codes.chunks_exact(4).zip(&s.labels) {
            assert_eq!(row, t.code(c));
        }
        let s = sample_codes(&post, 5, 1.0, SampleMode::PerClass(1), 1).unwrap();
        assert!(s.labels.iter().all(|&c| c == 1));
        assert!(sample_codes(&post, 1, 1.0, SampleMode::PerClass(2), 1).is_err());
    }

    #[test]
    fn balanced_labels_are_even() {
        let labels: Vec<usize> = (0..10).map(|s| balanced_label(s, 10, 4)).collect();
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1, 2, 2, 3, 3]);
        let labels: Vec<usize> = (0..8).map(|s| balanced_label(s, 8, 4)).collect();
        assert_eq!(labels, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn kmeans_separates_obvious_groups() {
        let pts = vec![0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0, 0.0, 0.1];
        let l = kmeans(&pts, 2, 2, 0, 50).unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[0], l[4]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
    }
}
