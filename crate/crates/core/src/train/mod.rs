//! Alternating optimisation of the potential `phi_omega` and the transport
//! map `T_theta` with RMSProp.

mod source;

pub use source::{BatchSource, BundleSource, GaussianPair};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::degrade::{Pairing, Task};
use crate::error::{ensure, Error, Result};
use crate::nets::{ParamStore, PotentialModel, TransportModel, TransportOutput};
use crate::objective::{
    loss_potential, loss_task_contrastive, loss_transport_paired, loss_transport_unpaired, pair_l1, CostConfig,
};
use crate::seed::rng_for;
use crate::tensor::{Tape, Tensor, Var};

/// What the transport update minimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_p` (paired mode) or `L_u` (unpaired mode) against the potential.
    Transport,
    /// Plain supervised `mean ||T(y) - x*||_1`; no potential is trained.
    L1Only,
}

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `1 - step / steps`, reaching zero at the end.
    LinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_t: f64,
    pub lr_phi: f64,
    pub n_t: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub mode: Pairing,
    pub seed: u64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub lr_schedule: LrSchedule,
    /// Weight of the finite-difference Lipschitz penalty on `phi` (0 = off).
    pub grad_penalty: f64,
    pub objective: Objective,
    pub cost: CostConfig,
    /// Emit a metrics record every `log_every` steps (and at the last step).
    pub log_every: u64,
    /// Call the checkpoint hook every `checkpoint_every` steps (0 = only at
    /// the end).
    pub checkpoint_every: u64,
    /// Record wall-clock time in metrics; turn off for byte-comparable logs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_t: 1e-4,
            lr_phi: 0.5e-4,
            n_t: 1,
            batch_size: 6,
            steps: 1000,
            mode: Pairing::Paired,
            seed: 0,
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-8,
            lr_schedule: LrSchedule::Constant,
            grad_penalty: 0.0,
            objective: Objective::Transport,
            cost: CostConfig::default(),
            log_every: 1,
            checkpoint_every: 0,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr_t >= 0.0 && self.lr_t.is_finite(), "lr_t must be >= 0, got {}", self.lr_t);
        ensure!(self.lr_phi >= 0.0 && self.lr_phi.is_finite(), "lr_phi must be >= 0, got {}", self.lr_phi);
        ensure!(self.n_t >= 1, "n_t must be >= 1");
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.rmsprop_decay),
            "rmsprop_decay must lie in [0, 1), got {}",
            self.rmsprop_decay
        );
        ensure!(self.rmsprop_eps >= 0.0, "rmsprop_eps must be >= 0");
        ensure!(self.grad_penalty >= 0.0, "grad_penalty must be >= 0");
        ensure!(self.log_every >= 1, "log_every must be >= 1");
        self.cost.validate()
    }

    /// Multiplier applied to both learning rates during step `step`
    /// (0-based).
    pub fn lr_scale(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::LinearDecay if self.steps == 0 => 1.0,
            LrSchedule::LinearDecay => 1.0 - step as f64 / self.steps as f64,
        }
    }
}

/// One RMSProp step on flat buffers:
/// `v <- d v + (1 - d) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
pub fn rmsprop_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, decay: f64, eps: f64) -> Result<()> {
    ensure!(
        p.len() == g.len() && p.len() == v.len(),
        "rmsprop_update: lengths {} / {} / {}",
        p.len(),
        g.len(),
        v.len()
    );
    if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::numeric(format!("rmsprop_update: non-finite gradient at index {bad}")));
    }
    for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = decay * *vi + (1.0 - decay) * gi * gi;
        let denom = vi.sqrt() + eps;
        if denom > 0.0 {
            *pi -= lr * gi / denom;
        }
    }
    Ok(())
}

/// Second-moment buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmsProp {
    pub v: ParamStore,
}

impl RmsProp {
    pub fn for_params(p: &ParamStore) -> Self {
        let mut v = ParamStore::new();
        for (name, t) in p.iter() {
            v.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        RmsProp { v }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        decay: f64,
        eps: f64,
    ) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("rmsprop: no gradient for '{name}'")))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("rmsprop: no state for '{name}'")))?;
            ensure!(
                g.shape() == p.shape() && v.shape() == p.shape(),
                "rmsprop: shape mismatch for '{name}'"
            );
            rmsprop_update(p.data_mut(), g.data(), v.data_mut(), lr, decay, eps)
                .map_err(|e| Error::numeric(format!("parameter '{name}': {e}")))?;
        }
        Ok(())
    }
}

/// One minibatch. `x` is the clean-side batch seen by the potential; in
/// paired mode `x_star` holds the ground truth of each `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub y: Tensor,
    pub x: Tensor,
    pub x_star: Option<Tensor>,
    pub tasks: Vec<Task>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub theta: ParamStore,
    pub omega: ParamStore,
    pub opt_theta: RmsProp,
    pub opt_omega: RmsProp,
    /// Completed steps.
    pub step: u64,
    pub phi_updates: u64,
    pub t_updates: u64,
}

impl TrainerState {
    /// Fresh initialisation from the config seed.
    pub fn init(cfg: &TrainConfig, model: &dyn TransportModel, potential: &dyn PotentialModel) -> Self {
        let theta = model.init(&mut rng_for(cfg.seed, "init-theta", 0));
        let omega = potential.init(&mut rng_for(cfg.seed, "init-omega", 0));
        TrainerState {
            opt_theta: RmsProp::for_params(&theta),
            opt_omega: RmsProp::for_params(&omega),
            theta,
            omega,
            step: 0,
            phi_updates: 0,
            t_updates: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_phi")]
    pub l_phi: f64,
    #[serde(rename = "L_T")]
    pub l_t: f64,
    #[serde(rename = "L_task")]
    pub l_task: f64,
    pub wall_ms: f64,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("{name} is not finite ({v})")))
    }
}

/// Attach a loss-term name to any numeric failure.
fn term<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::numeric(format!("{name}: {m}")),
        other => other,
    })
}

/// Finite-difference Lipschitz penalty on matched pairs:
/// `mean relu(((phi(a) - phi(b)) / |a - b|)^2 - 1)`.
fn lipschitz_penalty(tape: &Tape, phi_a: Var, phi_b: Var, a: &Tensor, b: &Tensor) -> Result<Var> {
    let n = a.shape()[0];
    let per = a.numel() / n;
    let inv: Vec<f64> = (0..n)
        .map(|i| {
            let d2: f64 = a.data()[i * per..(i + 1) * per]
                .iter()
                .zip(&b.data()[i * per..(i + 1) * per])
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            if d2 > 1e-24 {
                1.0 / d2.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let slope = tape.mul(tape.sub(phi_a, phi_b)?, tape.constant(Tensor::from_vec(inv))?)?;
    let excess = tape.add_scalar(tape.mul(slope, slope)?, -1.0)?;
    tape.mean(tape.relu(excess)?)
}

fn distinct_tasks(tasks: &[Task]) -> usize {
    let mut t = tasks.to_vec();
    t.sort();
    t.dedup();
    t.len()
}

/// Loss, backward and one RMSProp step on theta for a recorded forward.
#[allow(clippy::too_many_arguments)]
fn transport_update(
    state: &mut TrainerState,
    cfg: &TrainConfig,
    potential: &dyn PotentialModel,
    batch: &Batch,
    use_task: bool,
    tape: &Tape,
    theta: &crate::nets::Bound,
    yv: Var,
    out: &TransportOutput,
) -> Result<(f64, f64)> {
    let x_star = match &batch.x_star {
        Some(xs) => Some(tape.constant(xs.clone())?),
        None => None,
    };
    let lt = match (cfg.objective, x_star) {
        (Objective::L1Only, Some(xs)) => term("L_T", pair_l1(tape, out.restored, xs))?,
        (Objective::L1Only, None) => return Err(Error::contract("L1-only training needs paired batches")),
        (Objective::Transport, x_star) => {
            let omega = state.omega.bind(tape, false)?;
            let phi_ty = term("phi(T(y))", potential.forward(tape, &omega, out.restored))?;
            if cfg.mode == Pairing::Paired {
                let l = loss_transport_paired(tape, yv, out.restored, x_star, phi_ty, &batch.tasks, &cfg.cost);
                term("L_T", l)?
            } else {
                let l = loss_transport_unpaired(tape, yv, out.restored, phi_ty, &batch.tasks, &cfg.cost);
                term("L_T", l)?
            }
        }
    };
    let l_t = finite("L_T", tape.item(lt)?)?;
    let mut loss = lt;
    let mut l_task = 0.0;
    if let (true, Some(emb)) = (use_task, out.task_embedding) {
        if batch.tasks.len() < 2 {
            log::warn!("batch of {} is too small for the task loss; skipping it", batch.tasks.len());
        } else {
            let c = term("L_task", loss_task_contrastive(tape, emb, &batch.tasks, cfg.cost.tau))?;
            l_task = finite("L_task", tape.item(c.loss)?)?;
            loss = tape.add(loss, tape.scale(c.loss, cfg.cost.gamma_task)?)?;
        }
    }
    tape.backward(loss)?;
    let grads = theta.grads(tape)?;
    state
        .opt_theta
        .step(&mut state.theta, &grads, cfg.lr_t * cfg.lr_scale(state.step), cfg.rmsprop_decay, cfg.rmsprop_eps)?;
    state.t_updates += 1;
    Ok((l_t, l_task))
}

/// Algorithm step: one potential update on `(T(y), x)` followed by `n_t`
/// transport updates on `L_T + gamma L_task`.
pub fn train_step(
    state: &mut TrainerState,
    cfg: &TrainConfig,
    model: &dyn TransportModel,
    potential: &dyn PotentialModel,
    batch: &Batch,
) -> Result<StepMetrics> {
    ensure!(batch.tasks.len() == batch.y.shape()[0], "batch: task labels do not match batch size");
    let uses_phi = cfg.objective == Objective::Transport;
    let paired = cfg.mode == Pairing::Paired || cfg.objective == Objective::L1Only;
    if paired {
        ensure!(batch.x_star.is_some(), "paired training needs ground truth in every batch");
    }

    // Transport forward at the current theta; reused by the first update.
    let tape = Tape::new();
    let theta = state.theta.bind(&tape, true)?;
    let yv = tape.constant(batch.y.clone())?;
    let first = term("T(y)", model.forward(&tape, &theta, yv))?;
    let t_y = tape.value(first.restored);

    let mut l_phi = 0.0;
    if uses_phi {
        let ptape = Tape::new();
        let omega = state.omega.bind(&ptape, true)?;
        let ty = ptape.constant(t_y.clone())?;
        let xv = ptape.constant(batch.x.clone())?;
        let phi_ty = term("phi(T(y))", potential.forward(&ptape, &omega, ty))?;
        let phi_x = term("phi(x)", potential.forward(&ptape, &omega, xv))?;
        let mut loss = term("L_phi", loss_potential(&ptape, phi_ty, phi_x))?;
        l_phi = finite("L_phi", ptape.item(loss)?)?;
        if cfg.grad_penalty > 0.0 && batch.x.shape() == t_y.shape() {
            let pen = lipschitz_penalty(&ptape, phi_x, phi_ty, &batch.x, &t_y)?;
            loss = ptape.add(loss, ptape.scale(pen, cfg.grad_penalty)?)?;
        }
        ptape.backward(loss)?;
        let grads = omega.grads(&ptape)?;
        state
            .opt_omega
            .step(&mut state.omega, &grads, cfg.lr_phi * cfg.lr_scale(state.step), cfg.rmsprop_decay, cfg.rmsprop_eps)?;
        state.phi_updates += 1;
    }

    let use_task = cfg.cost.gamma_task > 0.0 && distinct_tasks(&batch.tasks) > 1;
    let (mut l_t, mut l_task) = (0.0, 0.0);
    for t in 0..cfg.n_t {
        if t == 0 {
            (l_t, l_task) = transport_update(state, cfg, potential, batch, use_task, &tape, &theta, yv, &first)?;
        } else {
            let tape = Tape::new();
            let theta = state.theta.bind(&tape, true)?;
            let yv = tape.constant(batch.y.clone())?;
            let out = term("T(y)", model.forward(&tape, &theta, yv))?;
            (l_t, l_task) = transport_update(state, cfg, potential, batch, use_task, &tape, &theta, yv, &out)?;
        }
    }
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        l_phi,
        l_t,
        l_task,
        wall_ms: 0.0,
    })
}

#[derive(Debug)]
pub struct FitOutput {
    pub state: TrainerState,
    pub log: Vec<StepMetrics>,
}

/// Optional callbacks of [`fit_with`].
#[derive(Default)]
pub struct FitHooks<'a> {
    pub on_metrics: Option<&'a mut dyn FnMut(&StepMetrics) -> Result<()>>,
    pub on_checkpoint: Option<&'a mut dyn FnMut(&TrainerState) -> Result<()>>,
}

/// Run `cfg.steps` steps from a fresh initialisation.
pub fn fit(
    cfg: &TrainConfig,
    model: &dyn TransportModel,
    potential: &dyn PotentialModel,
    source: &dyn BatchSource,
) -> Result<FitOutput> {
    let state = TrainerState::init(cfg, model, potential);
    fit_with(cfg, model, potential, source, state, &mut FitHooks::default())
}

/// Continue from `state` up to `cfg.steps` completed steps. Batches are
/// derived from `(cfg.seed, step)`, so resuming from a saved state
/// reproduces the uninterrupted run.
pub fn fit_with(
    cfg: &TrainConfig,
    model: &dyn TransportModel,
    potential: &dyn PotentialModel,
    source: &dyn BatchSource,
    mut state: TrainerState,
    hooks: &mut FitHooks,
) -> Result<FitOutput> {
    cfg.validate()?;
    ensure!(
        state.step <= cfg.steps,
        "state is at step {} but the run has only {} steps",
        state.step,
        cfg.steps
    );
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let started = Instant::now();
        let batch = source.batch(state.step, cfg.batch_size, cfg.seed)?;
        let mut m = train_step(&mut state, cfg, model, potential, &batch)?;
        if cfg.log_wall_time {
            m.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        }
        if m.step % cfg.log_every == 0 || m.step == cfg.steps {
            if let Some(f) = hooks.on_metrics.as_mut() {
                f(&m)?;
            }
            log.push(m);
        }
        let ckpt_due = cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every);
        if ckpt_due && state.step < cfg.steps {
            if let Some(f) = hooks.on_checkpoint.as_mut() {
                f(&state)?;
            }
        }
    }
    if let Some(f) = hooks.on_checkpoint.as_mut() {
        f(&state)?;
    }
    Ok(FitOutput { state, log })
}

#[cfg(test)]
mod tests;
