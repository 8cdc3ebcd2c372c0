use serde::{Deserialize, Serialize};

use super::monotone::{monotone_map_1d, Dist1d};
use crate::error::{ensure, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddleReport {
    /// Monte-Carlo `E_P[c(y, T(y))]`.
    pub primal_cost: f64,
    /// `E_Q[phi] + E_P[c(y, T(y)) - phi(T(y))]`.
    pub dual_value: f64,
    pub oracle_cost: f64,
    /// `primal_cost - oracle_cost`.
    pub gap: f64,
    /// `gap / oracle_cost` (0 when both are 0).
    pub relative_gap: f64,
    /// Energy distance between `T#P` samples and `Q` samples; a map can only
    /// be compared with the oracle cost when this is small.
    pub energy_distance: f64,
    pub samples: usize,
    /// Standard error of `primal_cost`.
    pub primal_std_error: f64,
    /// Set when the standard error exceeds the requested relative tolerance.
    pub flagged: Option<String>,
}

/// Points used per side by [`energy_distance`] (it is quadratic).
const ENERGY_POINTS: usize = 2000;

fn mean_dist(a: &[Vec<f64>], b: &[Vec<f64>], skip_diag: bool) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            if skip_diag && i == j {
                continue;
            }
            s += p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` on the first (at most 2000)
/// samples of each set, with U-statistics for the within-set terms.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let a = &a[..a.len().min(ENERGY_POINTS)];
    let b = &b[..b.len().min(ENERGY_POINTS)];
    2.0 * mean_dist(a, b, false) - mean_dist(a, a, true) - mean_dist(b, b, true)
}

/// Score evaluated samples of a map and potential: `ys ~ P` with images
/// `tys = T(ys)`, `xs ~ Q`, potentials at `T(ys)` and `xs`.
#[allow(clippy::too_many_arguments)]
pub fn verify_saddle(
    ys: &[Vec<f64>],
    tys: &[Vec<f64>],
    xs: &[Vec<f64>],
    phi_ty: &[f64],
    phi_x: &[f64],
    cost: &dyn Fn(&[f64], &[f64]) -> f64,
    oracle_cost: f64,
    rel_tol: f64,
) -> Result<SaddleReport> {
    let n = ys.len();
    ensure!(n >= 2, "verify_saddle: need at least two P samples");
    ensure!(
        tys.len() == n && phi_ty.len() == n,
        "verify_saddle: T(y) and phi(T(y)) must match the P samples"
    );
    ensure!(
        !xs.is_empty() && phi_x.len() == xs.len(),
        "verify_saddle: phi(x) must match the Q samples"
    );
    let costs: Vec<f64> = ys.iter().zip(tys).map(|(y, t)| cost(y, t)).collect();
    ensure!(
        costs.iter().chain(phi_ty).chain(phi_x).all(|v| v.is_finite()),
        "verify_saddle: non-finite cost or potential"
    );
    let primal = costs.iter().sum::<f64>() / n as f64;
    let var = costs.iter().map(|c| (c - primal).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let e_phi_x = phi_x.iter().sum::<f64>() / phi_x.len() as f64;
    let e_inner = costs.iter().zip(phi_ty).map(|(c, p)| c - p).sum::<f64>() / n as f64;
    let gap = primal - oracle_cost;
    let relative_gap = if oracle_cost != 0.0 {
        gap / oracle_cost.abs()
    } else if gap == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let flagged = (se > rel_tol * oracle_cost.abs().max(1e-12)).then(|| {
        format!(
            "{n} samples give standard error {se:.3e}, above {rel_tol} x oracle cost; draw more samples"
        )
    });
    Ok(SaddleReport {
        primal_cost: primal,
        dual_value: e_phi_x + e_inner,
        oracle_cost,
        gap,
        relative_gap,
        energy_distance: energy_distance(tys, xs),
        samples: n,
        primal_std_error: se,
        flagged,
    })
}

/// 1-D saddle check against the monotone-rearrangement oracle for the
/// `|y - x|` cost. Samples come from the `"saddle-p"`/`"saddle-q"` streams of
/// `seed`.
#[allow(clippy::too_many_arguments)]
pub fn verify_saddle_1d(
    t: &dyn Fn(f64) -> f64,
    phi: &dyn Fn(f64) -> f64,
    p: &Dist1d,
    q: &Dist1d,
    cost: &dyn Fn(f64, f64) -> f64,
    samples: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<SaddleReport> {
    let oracle = monotone_map_1d(p, q)?;
    let ys = p.sample(&mut rng_for(seed, "saddle-p", 0), samples);
    let xs = q.sample(&mut rng_for(seed, "saddle-q", 0), samples);
    let tys: Vec<f64> = ys.iter().map(|&y| t(y)).collect();
    let col = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    let phi_ty: Vec<f64> = tys.iter().map(|&v| phi(v)).collect();
    let phi_x: Vec<f64> = xs.iter().map(|&v| phi(v)).collect();
    verify_saddle(
        &col(&ys),
        &col(&tys),
        &col(&xs),
        &phi_ty,
        &phi_x,
        &|a, b| cost(a[0], b[0]),
        oracle.cost,
        rel_tol,
    )
}
