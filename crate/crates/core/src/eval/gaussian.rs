use serde::{Deserialize, Serialize};

use crate::degrade::Pairing;
use crate::error::{ensure, Result};
use crate::nets::{MlpPotential1d, MonotoneMap1d, ParamStore, PotentialModel, TransportModel};
use crate::objective::{CostConfig, RegMode};
use crate::ot::{monotone_map_1d, verify_saddle_1d, Dist1d, SaddleReport};
use crate::tensor::{Tape, Tensor};
use crate::train::{fit_with, FitHooks, GaussianPair, LrSchedule, StepMetrics, TrainConfig, TrainerState};

/// Unpaired 1-D transport between two Gaussians with `g` off and the
/// Euclidean cost, scored against the monotone-rearrangement oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianRunConfig {
    /// `(mean, sd)` of the source.
    pub p: (f64, f64),
    /// `(mean, sd)` of the target.
    pub q: (f64, f64),
    pub map_units: usize,
    pub potential_hidden: usize,
    pub potential_depth: usize,
    pub train: TrainConfig,
    /// Parameters are averaged over the steps after this fraction of the
    /// run; 1 keeps the last iterate.
    pub average_from: f64,
    pub saddle_samples: usize,
    pub saddle_seed: u64,
    /// Map error is measured on a uniform grid over this interval.
    pub grid: (f64, f64),
}

impl Default for GaussianRunConfig {
    fn default() -> Self {
        GaussianRunConfig {
            p: (0.0, 1.0),
            q: (2.0, 2.0),
            map_units: 8,
            potential_hidden: 32,
            potential_depth: 2,
            train: TrainConfig {
                lr_t: 2e-3,
                lr_phi: 2e-3,
                n_t: 5,
                batch_size: 512,
                steps: 6000,
                mode: Pairing::Unpaired,
                grad_penalty: 0.0,
                lr_schedule: LrSchedule::LinearDecay,
                cost: CostConfig {
                    residual_reg_mode: RegMode::Off,
                    ..CostConfig::default()
                },
                log_every: 100,
                log_wall_time: false,
                ..TrainConfig::default()
            },
            average_from: 0.5,
            saddle_samples: 20_000,
            saddle_seed: 11,
            grid: (-2.0, 2.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianRunReport {
    pub saddle: SaddleReport,
    /// `max |T(y) - T*(y)|` over 401 grid points.
    pub max_map_error: f64,
    /// `(y, T(y), T*(y))` at 9 evenly spaced grid points.
    pub profile: Vec<[f64; 3]>,
    pub final_metrics: Option<StepMetrics>,
}

fn scalar_fn<'a>(f: impl Fn(&Tape, crate::Var) -> Result<crate::Var> + 'a) -> impl Fn(f64) -> f64 + 'a {
    move |v| {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1], vec![v]).expect("one entry")).expect("finite input");
        f(&tape, x).map(|o| tape.value(o).data()[0]).unwrap_or(f64::NAN)
    }
}

fn running_mean(acc: &mut ParamStore, x: &ParamStore, w: f64) {
    for ((_, a), (_, b)) in acc.iter_mut().zip(x.iter()) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(u, v)| *u += w * (v - *u));
    }
}

/// Train, then score the map against the oracle.
pub fn gaussian_transport_run(cfg: &GaussianRunConfig) -> Result<GaussianRunReport> {
    ensure!(cfg.train.mode == Pairing::Unpaired, "gaussian run: train.mode must be unpaired");
    ensure!(cfg.grid.0 < cfg.grid.1, "gaussian run: empty grid");
    let (p, q) = (Dist1d::gaussian(cfg.p.0, cfg.p.1)?, Dist1d::gaussian(cfg.q.0, cfg.q.1)?);
    let oracle = monotone_map_1d(&p, &q)?;
    let model = MonotoneMap1d { units: cfg.map_units };
    let potential = MlpPotential1d {
        hidden: cfg.potential_hidden,
        depth: cfg.potential_depth,
    };
    ensure!(
        (0.0..=1.0).contains(&cfg.average_from),
        "gaussian run: average_from must lie in [0, 1], got {}",
        cfg.average_from
    );
    let mut train = cfg.train.clone();
    train.checkpoint_every = 1;
    let start = ((cfg.average_from * train.steps as f64).ceil() as u64).min(train.steps);
    let mut avg: Option<(ParamStore, ParamStore)> = None;
    let (mut seen, mut last) = (0u64, None);
    let mut on_state = |s: &TrainerState| -> Result<()> {
        if s.step < start.max(1) || last == Some(s.step) {
            return Ok(());
        }
        last = Some(s.step);
        seen += 1;
        let w = 1.0 / seen as f64;
        match avg.as_mut() {
            None => avg = Some((s.theta.clone(), s.omega.clone())),
            Some((a, b)) => {
                running_mean(a, &s.theta, w);
                running_mean(b, &s.omega, w);
            }
        }
        Ok(())
    };
    let init = TrainerState::init(&train, &model, &potential);
    let source = GaussianPair { p: cfg.p, q: cfg.q };
    let out = {
        let mut hooks = FitHooks {
            on_checkpoint: Some(&mut on_state),
            ..FitHooks::default()
        };
        fit_with(&train, &model, &potential, &source, init, &mut hooks)?
    };
    let (theta, omega) = match &avg {
        Some((a, b)) => (a, b),
        None => (&out.state.theta, &out.state.omega),
    };
    let t = scalar_fn(|tape, x| Ok(model.forward(tape, &theta.bind(tape, false)?, x)?.restored));
    let phi = scalar_fn(|tape, x| potential.forward(tape, &omega.bind(tape, false)?, x));
    let saddle = verify_saddle_1d(&t, &phi, &p, &q, &|a, b| (a - b).abs(), cfg.saddle_samples, cfg.saddle_seed, 0.05)?;
    let errors: Vec<f64> = (0..=400)
        .map(|i| {
            let y = cfg.grid.0 + (cfg.grid.1 - cfg.grid.0) * i as f64 / 400.0;
            (t(y) - oracle.apply(y)).abs()
        })
        .collect();
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(crate::Error::numeric("gaussian run: trained map is not finite on the grid"));
    }
    let max_map_error = errors.into_iter().fold(0.0, f64::max);
    let profile = (0..9)
        .map(|i| {
            let y = cfg.grid.0 + (cfg.grid.1 - cfg.grid.0) * i as f64 / 8.0;
            [y, t(y), oracle.apply(y)]
        })
        .collect();
    Ok(GaussianRunReport {
        saddle,
        max_map_error,
        profile,
        final_metrics: out.log.last().cloned(),
    })
}
