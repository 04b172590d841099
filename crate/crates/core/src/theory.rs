//! Sample-size thresholds at which a mean estimate from surrogate data beats
//! one from `m` real samples, and Monte-Carlo checks of those claims.
//!
//! The mean gap `|μ_x − μ_z|` is called `delta` (δ) throughout.

use num::{BigInt, BigRational, Signed, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution as _, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRIALS: usize = 100_000;
const BLOCK: usize = 1_000;

/// Scalar sampling family with known moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    Gaussian { mean: f64, std: f64 },
    /// `scale · Bernoulli(p)`.
    ScaledBernoulli { p: f64, scale: f64 },
    Uniform { low: f64, high: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Family::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            Family::ScaledBernoulli { p, scale } => (0.0..=1.0).contains(&p) && scale.is_finite(),
            Family::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution {self:?}")))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Family::Gaussian { mean, .. } => mean,
            Family::ScaledBernoulli { p, scale } => p * scale,
            Family::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Family::Gaussian { std, .. } => std * std,
            Family::ScaledBernoulli { p, scale } => scale * scale * p * (1.0 - p),
            Family::Uniform { low, high } => (high - low).powi(2) / 12.0,
        }
    }

    /// Support lies in `[0, 1]` almost surely.
    pub fn is_unit_bounded(&self) -> bool {
        match *self {
            Family::Gaussian { mean, std } => std == 0.0 && (0.0..=1.0).contains(&mean),
            Family::ScaledBernoulli { p, scale } => (0.0..=1.0).contains(&scale) || p == 0.0,
            Family::Uniform { low, high } => low >= 0.0 && high <= 1.0,
        }
    }

    fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        Ok(match *self {
            Family::Gaussian { mean, std } => {
                Sampler::Normal(Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?)
            }
            Family::ScaledBernoulli { p, scale } => {
                Sampler::Bernoulli(Bernoulli::new(p).map_err(|e| Error::Config(e.to_string()))?, scale)
            }
            Family::Uniform { low, high } if low == high => Sampler::Constant(low),
            Family::Uniform { low, high } => Sampler::Uniform(Uniform::new_inclusive(low, high)),
        })
    }
}

enum Sampler {
    Normal(Normal<f64>),
    Bernoulli(Bernoulli, f64),
    Uniform(Uniform<f64>),
    Constant(f64),
}

impl Sampler {
    fn mean_of<R: Rng>(&self, n: usize, rng: &mut R) -> f64 {
        let sum: f64 = match self {
            Sampler::Normal(d) => (0..n).map(|_| d.sample(rng)).sum(),
            Sampler::Bernoulli(d, s) => (0..n).filter(|_| d.sample(rng)).count() as f64 * s,
            Sampler::Uniform(d) => (0..n).map(|_| d.sample(rng)).sum(),
            Sampler::Constant(c) => c * n as f64,
        };
        sum / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "n", rename_all = "kebab-case")]
pub enum Threshold {
    Feasible(u64),
    Infeasible,
}

impl Threshold {
    pub fn value(&self) -> Option<u64> {
        match self {
            Threshold::Feasible(n) => Some(*n),
            Threshold::Infeasible => None,
        }
    }
}

/// Exact rational value of a finite float.
pub fn exact(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| Error::InvalidArgument(format!("{x} is not finite")))
}

fn ceil_u64(q: &BigRational) -> Result<u64> {
    q.ceil()
        .to_integer()
        .to_u64()
        .ok_or_else(|| Error::Numerical(format!("threshold {q} does not fit in 64 bits")))
}

fn non_negative(name: &str, x: f64) -> Result<BigRational> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {x}")));
    }
    exact(x)
}

/// Smallest surrogate size `n` with `m·varZ/n ≤ varX − m·δ²`, i.e.
/// `⌈m·varZ / (varX − m·δ²)⌉`; infeasible unless `varX > m·δ²`.
///
/// Evaluated in exact rational arithmetic on the inputs' binary values.
pub fn prop1_threshold(m: u64, var_x: f64, var_z: f64, delta: f64) -> Result<Threshold> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    let (vx, vz, d) = (non_negative("Var[X]", var_x)?, non_negative("Var[Z]", var_z)?, non_negative("delta", delta)?);
    let m = BigRational::from_integer(BigInt::from(m));
    let slack = vx - &m * &d * &d;
    if !slack.is_positive() {
        return Ok(Threshold::Infeasible);
    }
    let n = ceil_u64(&(m * vz / slack))?;
    Ok(Threshold::Feasible(n.max(1)))
}

/// Exact check of `Var[Z]/n + δ² ≤ Var[X]/m`, the expected-error comparison
/// the first threshold guarantees.
pub fn prop1_holds(m: u64, n: u64, var_x: f64, var_z: f64, delta: f64) -> Result<bool> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("sample sizes must be >= 1".into()));
    }
    let (vx, vz, d) = (non_negative("Var[X]", var_x)?, non_negative("Var[Z]", var_z)?, non_negative("delta", delta)?);
    let lhs = vz / BigRational::from_integer(n.into()) + &d * &d;
    Ok(lhs <= vx / BigRational::from_integer(m.into()))
}

/// `⌈m·(ε/(ε−δ))²⌉`, requires `ε > δ ≥ 0`.
pub fn prop2_threshold(m: u64, epsilon: f64, delta: f64) -> Result<u64> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    let (e, d) = (non_negative("epsilon", epsilon)?, non_negative("delta", delta)?);
    if e <= d {
        return Err(Error::InvalidArgument(format!("need epsilon > delta, got {epsilon} <= {delta}")));
    }
    let ratio = &e / (&e - d);
    ceil_u64(&(BigRational::from_integer(m.into()) * &ratio * ratio))
}

/// `2·exp(−2·size·radius²)`.
pub fn hoeffding_bound(sample_size: u64, radius: f64) -> Result<f64> {
    if sample_size == 0 || !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("bound needs size >= 1 and radius > 0, got ({sample_size}, {radius})")));
    }
    Ok(2.0 * (-2.0 * sample_size as f64 * radius * radius).exp())
}

/// Exact `B(Z) ≤ B(X)`, with `B(X)` at `(m, ε)` and `B(Z)` at `(n, ε−δ)`.
///
/// Since exp is monotone this is `n(ε−δ)² ≥ mε²`, decided in rationals so
/// the verdict never depends on floating-point underflow.
pub fn prop2_holds(m: u64, n: u64, epsilon: f64, delta: f64) -> Result<bool> {
    let (e, d) = (non_negative("epsilon", epsilon)?, non_negative("delta", delta)?);
    if e <= d || m == 0 || n == 0 {
        return Err(Error::InvalidArgument("need epsilon > delta and sizes >= 1".into()));
    }
    let gap = &e - d;
    Ok(BigRational::from_integer(n.into()) * &gap * gap >= BigRational::from_integer(m.into()) * &e * e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2Point {
    pub m: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub n: u64,
    pub bound_x: f64,
    pub bound_z: f64,
    pub holds: bool,
}

pub fn prop2_point(m: u64, epsilon: f64, delta: f64) -> Result<Prop2Point> {
    let n = prop2_threshold(m, epsilon, delta)?;
    Ok(Prop2Point {
        m,
        epsilon,
        delta,
        n,
        bound_x: hoeffding_bound(m, epsilon)?,
        bound_z: hoeffding_bound(n, epsilon - delta)?,
        holds: prop2_holds(m, n, epsilon, delta)?,
    })
}

/// 10 sizes × 10 radii × 10 gaps `δ = ε·k/10`, all with `ε > δ`.
pub fn default_prop2_grid() -> Vec<(u64, f64, f64)> {
    let ms = [1u64, 2, 5, 10, 20, 50, 100, 200, 500, 1000];
    let eps = [0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.7, 0.9];
    let mut grid = Vec::with_capacity(1000);
    for &m in &ms {
        for &e in &eps {
            for k in 0..10 {
                grid.push((m, e, e * k as f64 / 10.0));
            }
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateExperiment {
    pub x: Family,
    pub z: Family,
    pub m: usize,
    pub n: usize,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

impl SurrogateExperiment {
    pub fn delta(&self) -> f64 {
        (self.x.mean() - self.z.mean()).abs()
    }

    pub fn validate(&self) -> Result<()> {
        self.x.validate()?;
        self.z.validate()?;
        if self.m == 0 || self.n == 0 || self.trials == 0 {
            return Err(Error::Config("m, n and trials must be >= 1".into()));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(Error::Config(format!("epsilon must be > 0, got {e}")));
            }
            if !self.x.is_unit_bounded() || !self.z.is_unit_bounded() {
                return Err(Error::Config("tail-bound experiments need distributions supported on [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Mean and standard error of a Monte-Carlo average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub delta: f64,
    pub trials: usize,
    /// `(X̄^m − μ_x)²`.
    pub err_x: Estimate,
    /// `(Z̄^n − μ_x)²`.
    pub err_z: Estimate,
    /// `(Z̄^n − μ_z)²`.
    pub err_z_own: Estimate,
    /// `Var[Z]/n + δ²`.
    pub predicted_err_z: f64,
    /// Standard error of `err_z − err_x`.
    pub diff_se: f64,
    /// Fractions of trials with `|X̄ − μ_x| > ε` and `|Z̄ − μ_x| > ε`.
    #[serde(default)]
    pub tail_x: Option<f64>,
    #[serde(default)]
    pub tail_z: Option<f64>,
}

impl MonteCarloReport {
    /// `mean Err(Z) ≤ mean Err(X) + k·SE`.
    pub fn surrogate_not_worse(&self, k: f64) -> bool {
        self.err_z.mean <= self.err_x.mean + k * self.diff_se
    }

    /// `|mean Err(Z) − (Var[Z]/n + δ²)| ≤ k·SE`.
    pub fn decomposition_holds(&self, k: f64) -> bool {
        (self.err_z.mean - self.predicted_err_z).abs() <= k * self.err_z.se
    }
}

#[derive(Default, Clone, Copy)]
struct Sums {
    count: f64,
    x: [f64; 2],
    z: [f64; 2],
    own: [f64; 2],
    diff: [f64; 2],
    tail_x: f64,
    tail_z: f64,
}

impl Sums {
    fn merge(mut self, o: Sums) -> Sums {
        self.count += o.count;
        for (a, b) in [(&mut self.x, o.x), (&mut self.z, o.z), (&mut self.own, o.own), (&mut self.diff, o.diff)] {
            a[0] += b[0];
            a[1] += b[1];
        }
        self.tail_x += o.tail_x;
        self.tail_z += o.tail_z;
        self
    }

    fn estimate(&self, s: [f64; 2]) -> Estimate {
        let mean = s[0] / self.count;
        let var = if self.count > 1.0 {
            ((s[1] - self.count * mean * mean) / (self.count - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate { mean, se: (var / self.count).sqrt() }
    }
}

/// Runs `trials` independent draws of an `m`-sample from X and an `n`-sample
/// from Z. Trials are split in blocks of 1000, each with its own
/// deterministic stream, so results do not depend on the thread count.
pub fn monte_carlo_err(exp: &SurrogateExperiment) -> Result<MonteCarloReport> {
    exp.validate()?;
    let (sx, sz) = (exp.x.sampler()?, exp.z.sampler()?);
    let (mu_x, mu_z) = (exp.x.mean(), exp.z.mean());
    let blocks = exp.trials.div_ceil(BLOCK);
    let sums = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(exp.seed);
            rng.set_stream(b as u64);
            let mut s = Sums::default();
            let count = BLOCK.min(exp.trials - b * BLOCK);
            for _ in 0..count {
                let xb = sx.mean_of(exp.m, &mut rng);
                let zb = sz.mean_of(exp.n, &mut rng);
                let (ex, ez, eo) = ((xb - mu_x).powi(2), (zb - mu_x).powi(2), (zb - mu_z).powi(2));
                for (acc, v) in [(&mut s.x, ex), (&mut s.z, ez), (&mut s.own, eo), (&mut s.diff, ez - ex)] {
                    acc[0] += v;
                    acc[1] += v * v;
                }
                if let Some(e) = exp.epsilon {
                    s.tail_x += f64::from((xb - mu_x).abs() > e);
                    s.tail_z += f64::from((zb - mu_x).abs() > e);
                }
                s.count += 1.0;
            }
            s
        })
        .reduce(Sums::default, Sums::merge);
    let delta = exp.delta();
    let report = MonteCarloReport {
        delta,
        trials: exp.trials,
        err_x: sums.estimate(sums.x),
        err_z: sums.estimate(sums.z),
        err_z_own: sums.estimate(sums.own),
        predicted_err_z: exp.z.variance() / exp.n as f64 + delta * delta,
        diff_se: sums.estimate(sums.diff).se,
        tail_x: exp.epsilon.map(|_| sums.tail_x / sums.count),
        tail_z: exp.epsilon.map(|_| sums.tail_z / sums.count),
    };
    if !report.err_x.mean.is_finite() || !report.err_z.mean.is_finite() {
        return Err(Error::Numerical("non-finite Monte-Carlo estimate".into()));
    }
    Ok(report)
}

/// Grid of Gaussian experiments `X ~ N(0, varX)`, `Z ~ N(δ, varZ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Grid {
    pub ms: Vec<u64>,
    pub deltas: Vec<f64>,
    pub var_x: f64,
    pub var_zs: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Prop1Grid {
    fn default() -> Self {
        Self {
            ms: vec![5, 10, 20, 50],
            deltas: vec![0.0, 0.02, 0.05, 0.1, 0.2],
            var_x: 1.0,
            var_zs: vec![0.5, 1.0, 2.0],
            trials: 20_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Row {
    pub m: u64,
    pub delta: f64,
    pub var_x: f64,
    pub var_z: f64,
    /// Empty when infeasible.
    pub threshold: Option<u64>,
    pub exact_holds: Option<bool>,
    pub err_x: Option<f64>,
    pub err_z: Option<f64>,
    pub diff_se: Option<f64>,
    pub mc_holds: Option<bool>,
}

/// Thresholds and Monte-Carlo verdicts at every feasible grid point.
pub fn prop1_sweep(grid: &Prop1Grid) -> Result<Vec<Prop1Row>> {
    if grid.ms.is_empty() || grid.deltas.is_empty() || grid.var_zs.is_empty() {
        return Err(Error::Config("sweep grid has an empty axis".into()));
    }
    let mut rows = Vec::new();
    let mut point = 0u64;
    for &m in &grid.ms {
        for &var_z in &grid.var_zs {
            for &delta in &grid.deltas {
                let threshold = prop1_threshold(m, grid.var_x, var_z, delta)?.value();
                let mut row = Prop1Row {
                    m,
                    delta,
                    var_x: grid.var_x,
                    var_z,
                    threshold,
                    exact_holds: None,
                    err_x: None,
                    err_z: None,
                    diff_se: None,
                    mc_holds: None,
                };
                if let Some(n) = threshold {
                    row.exact_holds = Some(prop1_holds(m, n, grid.var_x, var_z, delta)?);
                    let mc = monte_carlo_err(&SurrogateExperiment {
                        x: Family::Gaussian { mean: 0.0, std: grid.var_x.sqrt() },
                        z: Family::Gaussian { mean: delta, std: var_z.sqrt() },
                        m: m as usize,
                        n: n as usize,
                        epsilon: None,
                        trials: grid.trials,
                        seed: grid.seed.wrapping_add(point),
                    })?;
                    row.err_x = Some(mc.err_x.mean);
                    row.err_z = Some(mc.err_z.mean);
                    row.diff_se = Some(mc.diff_se);
                    row.mc_holds = Some(mc.surrogate_not_worse(3.0));
                }
                rows.push(row);
                point += 1;
            }
        }
    }
    Ok(rows)
}

/// Threshold curve `n*(δ)` per `(m, varZ)`, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSeries {
    pub m: u64,
    pub var_z: f64,
    pub delta: Vec<f64>,
    pub threshold: Vec<Option<u64>>,
}

pub fn threshold_series(rows: &[Prop1Row]) -> Vec<ThresholdSeries> {
    let mut out: Vec<ThresholdSeries> = Vec::new();
    for r in rows {
        let pos = out.iter().position(|s| s.m == r.m && s.var_z == r.var_z);
        let s = match pos {
            Some(i) => &mut out[i],
            None => {
                out.push(ThresholdSeries { m: r.m, var_z: r.var_z, delta: Vec::new(), threshold: Vec::new() });
                out.last_mut().expect("just pushed")
            }
        };
        s.delta.push(r.delta);
        s.threshold.push(r.threshold);
    }
    out
}

pub fn write_csv<T: Serialize, W: std::io::Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush: {e}")))?;
    Ok(())
}

/// Count of grid points where the exact verdict fails.
pub fn prop2_violations(grid: &[(u64, f64, f64)]) -> Result<(Vec<Prop2Point>, usize)> {
    let points: Vec<Prop2Point> = grid.iter().map(|&(m, e, d)| prop2_point(m, e, d)).collect::<Result<_>>()?;
    let bad = points.iter().filter(|p| !p.holds).count();
    Ok((points, bad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_match_examples() {
        assert_eq!(prop1_threshold(10, 1.0, 1.0, 0.0).unwrap(), Threshold::Feasible(10));
        assert_eq!(prop1_threshold(10, 1.0, 1.0, 0.2).unwrap(), Threshold::Feasible(17));
        assert_eq!(prop1_threshold(100, 1.0, 1.0, 0.1).unwrap(), Threshold::Infeasible);
        assert_eq!(prop1_threshold(20, 1.0, 1.0, 0.05).unwrap(), Threshold::Feasible(22));
        assert_eq!(prop2_threshold(100, 0.2, 0.1).unwrap(), 400);
        assert_eq!(prop2_threshold(50, 0.3, 0.0).unwrap(), 50);
        assert_eq!(prop2_threshold(7, 0.25, 0.05).unwrap(), 11);
        assert!(prop2_threshold(7, 0.1, 0.1).is_err());
    }

    #[test]
    fn hoeffding_values() {
        assert!((hoeffding_bound(1, 1.0).unwrap() - 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        assert!(hoeffding_bound(10_000, 0.1).unwrap() < 1e-80);
        assert!(hoeffding_bound(0, 0.1).is_err());
        assert!(hoeffding_bound(3, 0.0).is_err());
    }

    #[test]
    fn one_below_threshold_fails_exactly() {
        let n = prop2_threshold(7, 0.25, 0.05).unwrap();
        assert!(prop2_holds(7, n, 0.25, 0.05).unwrap());
        assert!(!prop2_holds(7, n - 1, 0.25, 0.05).unwrap());
    }

    #[test]
    fn bounded_families() {
        assert!(Family::Uniform { low: 0.2, high: 0.9 }.is_unit_bounded());
        assert!(!Family::Gaussian { mean: 0.5, std: 0.1 }.is_unit_bounded());
        let b = Family::ScaledBernoulli { p: 0.3, scale: 0.5 };
        assert!(b.is_unit_bounded());
        assert!((b.variance() - 0.25 * 0.21).abs() < 1e-15);
    }
}
