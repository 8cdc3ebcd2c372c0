//! Exact optimal transport oracles: discrete Kantorovich problems (an
//! assignment solver for uniform equal-size marginals, min-cost flow
//! otherwise), 1-D monotone rearrangement, and a saddle-point report that
//! scores a trained map and potential against them.

mod assignment;
mod flow;
mod monotone;
mod saddle;

pub use assignment::hungarian;
pub use flow::min_cost_flow_plan;
pub use monotone::{monotone_map_1d, Dist1d, MonotoneMap};
pub use saddle::{energy_distance, verify_saddle, verify_saddle_1d, SaddleReport};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Weighted point cloud; weights sum to 1 within `1e-12`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    ensure!(!w.is_empty(), "{what}: no support points");
    ensure!(
        w.iter().all(|&x| x >= 0.0 && x.is_finite()),
        "{what}: weights must be finite and nonnegative"
    );
    let s: f64 = w.iter().sum();
    ensure!((s - 1.0).abs() <= 1e-12, "{what}: weights sum to {s}, not 1");
    Ok(())
}

impl DiscreteDistribution {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        ensure!(
            points.len() == weights.len(),
            "distribution: {} points vs {} weights",
            points.len(),
            weights.len()
        );
        check_weights(&weights, "distribution")?;
        Ok(DiscreteDistribution { points, weights })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        ensure!(n > 0, "distribution: no support points");
        Self::new(points, vec![1.0 / n as f64; n])
    }
}

/// `pi[i][j] >= 0` with row sums `mu` and column sums `nu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub pi: Vec<Vec<f64>>,
}

impl TransportPlan {
    /// Largest absolute marginal violation (and `inf` for a negative entry).
    pub fn marginal_error(&self, mu: &[f64], nu: &[f64]) -> f64 {
        if self.pi.len() != mu.len() || self.pi.iter().any(|r| r.len() != nu.len()) {
            return f64::INFINITY;
        }
        if self.pi.iter().flatten().any(|&p| p < 0.0) {
            return f64::INFINITY;
        }
        let rows = self.pi.iter().zip(mu).map(|(r, m)| (r.iter().sum::<f64>() - m).abs());
        let cols = (0..nu.len()).map(|j| (self.pi.iter().map(|r| r[j]).sum::<f64>() - nu[j]).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    pub fn cost(&self, c: &[Vec<f64>]) -> f64 {
        self.pi
            .iter()
            .zip(c)
            .map(|(pr, cr)| pr.iter().zip(cr).map(|(p, x)| p * x).sum::<f64>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpSolution {
    pub plan: TransportPlan,
    pub cost: f64,
    /// For uniform marginals of equal size: `i -> permutation[i]`.
    pub permutation: Option<Vec<usize>>,
}

/// Largest support size accepted by [`solve_kp_discrete`].
pub const MAX_SUPPORT: usize = 64;

/// Exact Kantorovich problem `min <C, pi>` over couplings of `mu` and `nu`.
pub fn solve_kp_discrete(cost: &[Vec<f64>], mu: &[f64], nu: &[f64]) -> Result<KpSolution> {
    let (n, m) = (mu.len(), nu.len());
    ensure!(n <= MAX_SUPPORT && m <= MAX_SUPPORT, "solve_kp_discrete: support larger than {MAX_SUPPORT}");
    check_weights(mu, "solve_kp_discrete: mu")?;
    check_weights(nu, "solve_kp_discrete: nu")?;
    ensure!(
        cost.len() == n && cost.iter().all(|r| r.len() == m),
        "solve_kp_discrete: cost matrix is not {n}x{m}"
    );
    ensure!(
        cost.iter().flatten().all(|c| c.is_finite()),
        "solve_kp_discrete: cost must be finite"
    );
    let uniform = n == m && mu.iter().chain(nu).all(|&w| w == mu[0]);
    if uniform {
        let perm = hungarian(cost)?;
        let w = 1.0 / n as f64;
        let mut pi = vec![vec![0.0; m]; n];
        for (i, &j) in perm.iter().enumerate() {
            pi[i][j] = w;
        }
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>() / n as f64;
        return Ok(KpSolution {
            plan: TransportPlan { pi },
            cost: total,
            permutation: Some(perm),
        });
    }
    let plan = min_cost_flow_plan(cost, mu, nu)?;
    let total = plan.cost(cost);
    Ok(KpSolution {
        plan,
        cost: total,
        permutation: None,
    })
}
