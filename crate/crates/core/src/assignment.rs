//! Exact square linear assignment.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::DualHeadEncoder;

/// Square matrix of finite, non-negative costs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(size: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::Shape(format!(
                "cost matrix of size {size} needs {} entries, got {}",
                size * size,
                entries.len()
            )));
        }
        if let Some((k, v)) = entries.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost C[{}][{}] = {v} is not finite and non-negative",
                k / size.max(1),
                k % size.max(1)
            )));
        }
        Ok(Self { size, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(r) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::Shape(format!(
                "cost matrix row {r} has {} entries, expected {n}",
                rows[r].len()
            )));
        }
        Self::new(n, rows.concat())
    }

    /// `C[i][j] = ‖a_i − b_j‖²` for `n` row vectors of width `dim` on each side.
    pub fn squared_distances(a: &[f64], b: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || a.len() != b.len() || a.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "distance matrix: {} and {} values with width {dim}",
                a.len(),
                b.len()
            )));
        }
        let n = a.len() / dim;
        let mut entries = Vec::with_capacity(n * n);
        for x in a.chunks_exact(dim) {
            for t in b.chunks_exact(dim) {
                entries.push(x.iter().zip(t).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        Self::new(n, entries)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    /// `Σ_i C[i][π(i)]`, summed in row order.
    pub fn total(&self, permutation: &[usize]) -> f64 {
        permutation.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Row `i` is matched to column `permutation[i]`.
    pub permutation: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching by shortest augmenting paths with dual
/// potentials, `O(n³)`.
///
/// Ties resolve to the lowest column index encountered in scan order, so
/// the result is a deterministic function of the matrix.
pub fn solve_assignment(c: &CostMatrix) -> Assignment {
    let n = c.size;
    if n == 0 {
        return Assignment {
            permutation: Vec::new(),
            cost: 0.0,
        };
    }
    // 1-based; column 0 is a virtual root
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0usize; n];
    for j in 1..=n {
        permutation[row_of[j] - 1] = j - 1;
    }
    let cost = c.total(&permutation);
    Assignment { permutation, cost }
}

/// Embeds `images` with head 1 and matches them to `targets` (`b × K`, row-major).
pub fn batch_reassign<E: DualHeadEncoder + ?Sized>(
    encoder: &E,
    images: &Tensor,
    targets: &[f64],
) -> Result<Assignment> {
    let (embedding, _) = encoder.heads(images)?;
    let k = encoder.latent_dim();
    let emb = embedding.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if targets.len() != emb.len() {
        return Err(Error::Shape(format!(
            "{} images need {} target values of width {k}, got {}",
            emb.len() / k,
            emb.len(),
            targets.len()
        )));
    }
    Ok(solve_assignment(&CostMatrix::squared_distances(&emb, targets, k)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, perm: &mut Vec<usize>, free: &mut Vec<bool>, best: &mut f64) {
            let i = perm.len();
            if i == c.size() {
                *best = best.min(c.total(perm));
                return;
            }
            for j in 0..c.size() {
                if free[j] {
                    free[j] = false;
                    perm.push(j);
                    rec(c, perm, free, best);
                    perm.pop();
                    free[j] = true;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, &mut Vec::new(), &mut vec![true; c.size()], &mut best);
        best
    }

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
        CostMatrix::new(n, (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect()).unwrap()
    }

    #[test]
    fn two_by_two_cases() {
        let a = solve_assignment(&CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        assert_eq!(a.permutation, vec![0, 1]);
        assert_eq!(a.cost, 0.0);
        let a = solve_assignment(&CostMatrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap());
        assert_eq!(a.permutation, vec![1, 0]);
        assert_eq!(a.cost, 3.0);
    }

    #[test]
    fn six_by_six_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let c = random_matrix(6, &mut rng);
            assert_eq!(solve_assignment(&c).cost, brute_force(&c));
        }
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(CostMatrix::new(2, vec![0.0; 3]).is_err());
        assert!(CostMatrix::new(1, vec![f64::NAN]).is_err());
        assert!(CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn shuffled_targets_recover_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, k) = (9, 4);
        let emb: Vec<f64> = (0..n * k).map(|_| rng.gen()).collect();
        let mut sigma: Vec<usize> = (0..n).collect();
        sigma.shuffle(&mut rng);
        let mut targets = vec![0.0; n * k];
        for i in 0..n {
            targets[sigma[i] * k..(sigma[i] + 1) * k].copy_from_slice(&emb[i * k..(i + 1) * k]);
        }
        let a = solve_assignment(&CostMatrix::squared_distances(&emb, &targets, k).unwrap());
        assert_eq!(a.permutation, sigma);
        assert_eq!(a.cost, 0.0);
    }

    proptest! {
        #[test]
        fn output_is_a_permutation(seed in any::<u64>(), n in 0usize..12) {
            let c = random_matrix(n, &mut ChaCha8Rng::seed_from_u64(seed));
            let a = solve_assignment(&c);
            let mut seen = a.permutation.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn row_shift_keeps_optimum(seed in any::<u64>(), n in 1usize..8, row in 0usize..8, shift in 0.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_matrix(n, &mut rng);
            let row = row % n;
            let mut shifted = c.entries.clone();
            for j in 0..n {
                shifted[row * n + j] += shift;
            }
            let shifted = CostMatrix::new(n, shifted).unwrap();
            let a = solve_assignment(&c);
            let b = solve_assignment(&shifted);
            prop_assert_eq!(a.permutation, b.permutation);
        }
    }
}
