use rand::Rng;
use rand_distr::{Distribution, Normal as NormalSampler};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{ensure, Error, Result};

/// A 1-D distribution with an invertible CDF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist1d {
    Gaussian { mean: f64, sd: f64 },
    /// Uniform weights on the samples (kept sorted).
    Empirical { sorted: Vec<f64> },
}

impl Dist1d {
    pub fn gaussian(mean: f64, sd: f64) -> Result<Self> {
        ensure!(mean.is_finite() && sd.is_finite() && sd > 0.0, "gaussian: need finite mean and sd > 0");
        Ok(Dist1d::Gaussian { mean, sd })
    }

    pub fn empirical(mut samples: Vec<f64>) -> Result<Self> {
        ensure!(!samples.is_empty(), "empirical distribution needs samples");
        ensure!(samples.iter().all(|v| v.is_finite()), "empirical samples must be finite");
        samples.sort_by(f64::total_cmp);
        Ok(Dist1d::Empirical { sorted: samples })
    }

    fn normal(mean: f64, sd: f64) -> Normal {
        Normal::new(mean, sd).expect("validated parameters")
    }

    pub fn cdf(&self, y: f64) -> f64 {
        match self {
            Dist1d::Gaussian { mean, sd } => Self::normal(*mean, *sd).cdf(y),
            Dist1d::Empirical { sorted } => sorted.partition_point(|&s| s <= y) as f64 / sorted.len() as f64,
        }
    }

    /// Left-continuous inverse CDF on `[0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            Dist1d::Gaussian { mean, sd } => Self::normal(*mean, *sd).inverse_cdf(u.clamp(0.0, 1.0)),
            Dist1d::Empirical { sorted } => {
                let n = sorted.len();
                let k = (u * n as f64).ceil() as usize;
                sorted[k.clamp(1, n) - 1]
            }
        }
    }

    /// `quantile(Phi(z))`, exact in `z` for Gaussians so the tails stay
    /// finite.
    fn quantile_z(&self, z: f64, std: &Normal) -> f64 {
        match self {
            Dist1d::Gaussian { mean, sd } => mean + sd * z,
            Dist1d::Empirical { .. } => self.quantile(std.cdf(z)),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, count: usize) -> Vec<f64> {
        match self {
            Dist1d::Gaussian { mean, sd } => {
                let d = NormalSampler::new(*mean, *sd).expect("validated parameters");
                (0..count).map(|_| d.sample(rng)).collect()
            }
            Dist1d::Empirical { sorted } => (0..count).map(|_| sorted[rng.gen_range(0..sorted.len())]).collect(),
        }
    }
}

/// `T = F_Q^{-1} o F_P` together with its transport cost
/// `int_0^1 |F_P^{-1}(u) - F_Q^{-1}(u)| du`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneMap {
    pub p: Dist1d,
    pub q: Dist1d,
    pub cost: f64,
    /// Estimated absolute quadrature error (0 when the cost is exact).
    pub cost_error: f64,
}

impl MonotoneMap {
    pub fn apply(&self, y: f64) -> f64 {
        match (&self.p, &self.q) {
            (Dist1d::Gaussian { mean: mp, sd: sp }, Dist1d::Gaussian { mean: mq, sd: sq }) => mq + sq * (y - mp) / sp,
            _ => self.q.quantile(self.p.cdf(y)),
        }
    }
}

/// Tolerance for the quadrature of the transport cost.
const QUAD_TOL: f64 = 1e-10;

/// Adaptive Simpson on `[a, b]`; returns (integral, error estimate).
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> (f64, f64) {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: usize) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if !diff.is_finite() {
            return (f64::NAN, f64::INFINITY);
        }
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return (left + right + diff / 15.0, diff.abs() / 15.0);
        }
        let (l, el) = rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1);
        let (r, er) = rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1);
        (l + r, el + er)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// Exact cost between two empirical distributions: the quantile functions
/// are step functions, so integrate over the merged breakpoints.
fn empirical_cost(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let (ka, kb) = ((i + 1) * m, (j + 1) * n);
        let next = if ka <= kb { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ka <= kb {
            i += 1;
        }
        if kb <= ka {
            j += 1;
        }
    }
    total
}

/// Monotone rearrangement between `p` and `q`, optimal for convex costs of
/// `|y - x|`; the cost reported is the Euclidean (`|y - x|`) one.
pub fn monotone_map_1d(p: &Dist1d, q: &Dist1d) -> Result<MonotoneMap> {
    let (cost, cost_error) = match (p, q) {
        (Dist1d::Empirical { sorted: a }, Dist1d::Empirical { sorted: b }) => (empirical_cost(a, b), 0.0),
        _ => {
            // u = Phi(z): the tails become integrable and smooth
            let std = Normal::new(0.0, 1.0).expect("standard normal");
            let f = |z: f64| (p.quantile_z(z, &std) - q.quantile_z(z, &std)).abs() * std.pdf(z);
            let mut total = 0.0;
            let mut err = 0.0;
            let edges: Vec<f64> = (0..=48).map(|k| -12.0 + 0.5 * k as f64).collect();
            for w in edges.windows(2) {
                let (v, e) = simpson(&f, w[0], w[1], QUAD_TOL / 48.0, 30);
                total += v;
                err += e;
            }
            if !total.is_finite() || err > 1e-6 * total.abs().max(1.0) {
                return Err(Error::numeric(format!(
                    "monotone_map_1d: quadrature did not converge (achieved error {err:.3e})"
                )));
            }
            (total, err)
        }
    };
    Ok(MonotoneMap {
        p: p.clone(),
        q: q.clone(),
        cost,
        cost_error,
    })
}
