//! Transport costs, the Fourier residual regulariser `g`, the minibatch
//! transport and potential losses, and the contrastive task loss.
//!
//! Batched functions take NCHW tape variables and per-sample task labels;
//! per-sample scalars (potentials, costs) are rank-1 `[B]` variables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::degrade::Task;
use crate::error::{ensure, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    FourierL1,
    FourierL2,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Global switch and fallback: `off` disables `g` for every task.
    pub residual_reg_mode: RegMode,
    pub lambda_pair: f64,
    pub gamma_task: f64,
    pub tau: f64,
    /// Per-task override of the regulariser norm.
    pub per_task_reg: BTreeMap<Task, RegMode>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            residual_reg_mode: RegMode::FourierL1,
            lambda_pair: 10.0,
            gamma_task: 0.1,
            tau: 0.07,
            per_task_reg: BTreeMap::from([(Task::Noise, RegMode::FourierL2)]),
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0 && self.tau.is_finite(), "tau must be > 0, got {}", self.tau);
        ensure!(
            self.lambda_pair >= 0.0 && self.lambda_pair.is_finite(),
            "lambda_pair must be >= 0, got {}",
            self.lambda_pair
        );
        ensure!(
            self.gamma_task >= 0.0 && self.gamma_task.is_finite(),
            "gamma_task must be >= 0, got {}",
            self.gamma_task
        );
        Ok(())
    }

    pub fn reg_for(&self, task: Task) -> RegMode {
        if self.residual_reg_mode == RegMode::Off {
            return RegMode::Off;
        }
        self.per_task_reg.get(&task).copied().unwrap_or(self.residual_reg_mode)
    }
}

/// Euclidean transport cost `||y - t_y||_2` over all entries.
pub fn transport_cost(y: &Tensor, t_y: &Tensor) -> Result<f64> {
    ensure!(
        y.shape() == t_y.shape(),
        "transport_cost: shape mismatch {:?} vs {:?}",
        y.shape(),
        t_y.shape()
    );
    Ok(y.data().iter().zip(t_y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `g(r)` for a single residual (`HxW` or `CxHxW`).
pub fn residual_reg(r: &Tensor, mode: RegMode) -> Result<f64> {
    ensure!(r.rank() >= 2, "residual_reg: need an image, got {:?}", r.shape());
    if mode == RegMode::Off {
        return Ok(0.0);
    }
    let tape = Tape::new();
    let v = tape.constant(r.clone())?;
    let m = tape.fft2_magnitudes(v)?;
    let out = match mode {
        RegMode::FourierL1 => tape.l1_norm(m)?,
        _ => tape.l2_norm(m)?,
    };
    tape.item(out)
}

/// Per-sample costs `c(y_i, T(y_i))`, shape `[B]`.
pub fn transport_cost_batch(tape: &Tape, y: Var, t_y: Var) -> Result<Var> {
    let d = tape.sub(y, t_y)?;
    tape.l2_norm_per_sample(d)
}

/// Per-sample `g(r_i)` with the norm chosen by each sample's mode; `[B]`.
pub fn residual_reg_batch(tape: &Tape, r: Var, modes: &[RegMode]) -> Result<Var> {
    let shape = tape.shape(r);
    ensure!(
        shape.len() == 4 && shape[0] == modes.len(),
        "residual_reg_batch: residual {:?} vs {} modes",
        shape,
        modes.len()
    );
    let b = modes.len();
    let mask = |want: RegMode| Tensor::from_vec(modes.iter().map(|&m| (m == want) as u8 as f64).collect());
    let (m1, m2) = (mask(RegMode::FourierL1), mask(RegMode::FourierL2));
    if m1.sum() == 0.0 && m2.sum() == 0.0 {
        return tape.constant(Tensor::zeros(&[b]));
    }
    let mags = tape.fft2_magnitudes(r)?;
    let mut terms = Vec::new();
    if m1.sum() > 0.0 {
        let l1 = tape.l1_norm_per_sample(mags)?;
        terms.push(tape.mul(l1, tape.constant(m1)?)?);
    }
    if m2.sum() > 0.0 {
        let l2 = tape.l2_norm_per_sample(mags)?;
        terms.push(tape.mul(l2, tape.constant(m2)?)?);
    }
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(acc)
}

fn check_batch(tape: &Tape, what: &str, y: Var, t_y: Var, phi: Var, tasks: &[Task]) -> Result<usize> {
    let (ys, ts, ps) = (tape.shape(y), tape.shape(t_y), tape.shape(phi));
    ensure!(!ys.is_empty() && ys[0] > 0, "{what}: empty batch");
    ensure!(ys == ts, "{what}: y {:?} vs T(y) {:?}", ys, ts);
    ensure!(ps == [ys[0]], "{what}: potentials {:?}, expected [{}]", ps, ys[0]);
    ensure!(tasks.len() == ys[0], "{what}: {} task labels for batch {}", tasks.len(), ys[0]);
    Ok(ys[0])
}

/// Minibatch `L_u`: mean of `c(y, T(y)) + g(y - T(y)) - phi(T(y))`.
pub fn loss_transport_unpaired(
    tape: &Tape,
    y: Var,
    t_y: Var,
    phi_t_y: Var,
    tasks: &[Task],
    cfg: &CostConfig,
) -> Result<Var> {
    check_batch(tape, "loss_transport_unpaired", y, t_y, phi_t_y, tasks)?;
    let cost = transport_cost_batch(tape, y, t_y)?;
    let modes: Vec<RegMode> = tasks.iter().map(|&t| cfg.reg_for(t)).collect();
    let mut per = cost;
    if modes.iter().any(|&m| m != RegMode::Off) {
        let r = tape.sub(y, t_y)?;
        per = tape.add(per, residual_reg_batch(tape, r, &modes)?)?;
    }
    let per = tape.sub(per, phi_t_y)?;
    tape.mean(per)
}

/// Minibatch `L_p`: `L_u` plus `lambda * mean ||T(y) - x*||_1`. With
/// `lambda = 0` the unpaired node itself is returned.
pub fn loss_transport_paired(
    tape: &Tape,
    y: Var,
    t_y: Var,
    x_star: Option<Var>,
    phi_t_y: Var,
    tasks: &[Task],
    cfg: &CostConfig,
) -> Result<Var> {
    let Some(x_star) = x_star else {
        return Err(crate::Error::contract("loss_transport_paired: batch has no paired ground truth"));
    };
    ensure!(
        tape.shape(x_star) == tape.shape(t_y),
        "loss_transport_paired: x* {:?} vs T(y) {:?}",
        tape.shape(x_star),
        tape.shape(t_y)
    );
    let lu = loss_transport_unpaired(tape, y, t_y, phi_t_y, tasks, cfg)?;
    if cfg.lambda_pair == 0.0 {
        return Ok(lu);
    }
    let pair = pair_l1(tape, t_y, x_star)?;
    let pair = tape.scale(pair, cfg.lambda_pair)?;
    tape.add(lu, pair)
}

/// `mean_i ||T(y_i) - x*_i||_1`.
pub fn pair_l1(tape: &Tape, t_y: Var, x_star: Var) -> Result<Var> {
    let d = tape.sub(t_y, x_star)?;
    let l1 = tape.l1_norm_per_sample(d)?;
    tape.mean(l1)
}

/// `L_phi = mean phi(T(y)) - mean phi(x)`.
pub fn loss_potential(tape: &Tape, phi_t_y: Var, phi_x: Var) -> Result<Var> {
    for (v, name) in [(phi_t_y, "phi(T(y))"), (phi_x, "phi(x)")] {
        let s = tape.shape(v);
        ensure!(s.len() == 1 && s[0] > 0, "loss_potential: {name} must be a nonempty [B], got {:?}", s);
    }
    let a = tape.mean(phi_t_y)?;
    let b = tape.mean(phi_x)?;
    tape.sub(a, b)
}

pub struct ContrastiveLoss {
    pub loss: Var,
    /// Tasks that had no positive pair and therefore contributed 0.
    pub flagged: Vec<Task>,
}

/// Contrastive task loss over pooled embeddings `[B, D]`.
///
/// For each task `k`, with `s_ij` the cosine similarity,
/// `P_k = mean_{i,j in k, i != j} exp(s_ij / tau)` and
/// `N_k = mean_{i in k, j not in k} exp(s_ij / tau)`, the task contributes
/// `-log(P_k / (P_k + N_k))`; contributions are summed over tasks. Means
/// rather than sums keep a task's term independent of how many samples it
/// has, so equal similarities give exactly `log 2` per task. Exponents are
/// shifted by `-1/tau` (cosines are at most 1), which cancels in the ratio.
pub fn loss_task_contrastive(tape: &Tape, emb: Var, labels: &[Task], tau: f64) -> Result<ContrastiveLoss> {
    let s = tape.shape(emb);
    ensure!(
        s.len() == 2 && s[0] == labels.len() && s[0] > 0,
        "loss_task_contrastive: embeddings {:?} vs {} labels",
        s,
        labels.len()
    );
    ensure!(tau > 0.0, "loss_task_contrastive: tau must be > 0");
    let b = s[0];
    let e = tape.normalize_rows(emb)?;
    let et = tape.transpose(e)?;
    let sim = tape.matmul(e, et)?;
    let shifted = tape.add_scalar(sim, -1.0)?;
    let z = tape.exp(tape.scale(shifted, 1.0 / tau)?)?;

    let mut present: Vec<Task> = labels.to_vec();
    present.sort();
    present.dedup();
    let mut total: Option<Var> = None;
    let mut flagged = Vec::new();
    for &k in &present {
        let mut pos = vec![0.0; b * b];
        let mut neg = vec![0.0; b * b];
        let (mut np, mut nn) = (0usize, 0usize);
        for i in 0..b {
            if labels[i] != k {
                continue;
            }
            for j in 0..b {
                if i == j {
                    continue;
                }
                if labels[j] == k {
                    pos[i * b + j] = 1.0;
                    np += 1;
                } else {
                    neg[i * b + j] = 1.0;
                    nn += 1;
                }
            }
        }
        if np == 0 {
            flagged.push(k);
            continue;
        }
        let p = tape.sum(tape.mul(z, tape.constant(Tensor::new(vec![b, b], pos)?)?)?)?;
        let p = tape.scale(p, 1.0 / np as f64)?;
        let term = if nn == 0 {
            // ratio is exactly 1
            tape.scale(p, 0.0)?
        } else {
            let n = tape.sum(tape.mul(z, tape.constant(Tensor::new(vec![b, b], neg)?)?)?)?;
            let n = tape.scale(n, 1.0 / nn as f64)?;
            let denom = tape.add(p, n)?;
            tape.sub(tape.log(denom)?, tape.log(p)?)?
        };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    Ok(ContrastiveLoss { loss, flagged })
}

#[cfg(test)]
mod tests;
