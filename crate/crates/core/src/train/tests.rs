use super::*;
use crate::degrade::{make_dataset, GenerationConfig};
use crate::nets::{Conditioning, DaRcot, Mlp1d, MlpPotential1d, NetConfig, PotentialNet};
use crate::objective::RegMode;

fn gauss_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        lr_t: 1e-3,
        lr_phi: 1e-3,
        batch_size: 16,
        steps,
        mode: Pairing::Unpaired,
        seed: 11,
        log_wall_time: false,
        cost: CostConfig {
            residual_reg_mode: RegMode::Off,
            ..CostConfig::default()
        },
        ..TrainConfig::default()
    }
}

const PAIR: GaussianPair = GaussianPair {
    p: (0.0, 1.0),
    q: (2.0, 2.0),
};

fn mlps() -> (Mlp1d, MlpPotential1d) {
    (Mlp1d { hidden: 8, depth: 2 }, MlpPotential1d { hidden: 8, depth: 2 })
}

fn tiny_net() -> (DaRcot, PotentialNet) {
    let cfg = NetConfig {
        base_channels: 4,
        embed_channels: [8, 4, 4],
        potential_channels: 4,
        conditioning: Conditioning::Full,
    };
    (DaRcot::new(cfg), PotentialNet::new(4))
}

#[test]
fn rmsprop_first_step_example() {
    let (mut p, mut v) = (vec![0.0], vec![0.0]);
    rmsprop_update(&mut p, &[1.0], &mut v, 0.1, 0.99, 0.0).unwrap();
    assert!((p[0] + 1.0).abs() < 1e-12, "{}", p[0]);
}

#[test]
fn rmsprop_zero_grad_is_noop() {
    let (mut p, mut v) = (vec![1.5, -2.0], vec![0.3, 0.0]);
    rmsprop_update(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.99, 1e-8).unwrap();
    assert_eq!(p, vec![1.5, -2.0]);
}

#[test]
fn rmsprop_constant_grad_step_tends_to_lr() {
    let (mut p, mut v) = (vec![0.0], vec![0.0]);
    let mut last = 0.0;
    for _ in 0..3000 {
        let before = p[0];
        rmsprop_update(&mut p, &[0.7], &mut v, 0.01, 0.99, 1e-8).unwrap();
        last = before - p[0];
    }
    assert!((last - 0.01).abs() < 1e-6, "{last}");
}

#[test]
fn rmsprop_rejects_non_finite() {
    let (mut p, mut v) = (vec![0.0], vec![0.0]);
    let err = rmsprop_update(&mut p, &[f64::NAN], &mut v, 0.1, 0.9, 0.0).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(p[0], 0.0);
}

#[test]
fn same_seed_gives_identical_logs() {
    let (t, phi) = mlps();
    let cfg = gauss_cfg(30);
    let a = fit(&cfg, &t, &phi, &PAIR).unwrap();
    let b = fit(&cfg, &t, &phi, &PAIR).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.state, b.state);
    let other = fit(&TrainConfig { seed: 12, ..cfg }, &t, &phi, &PAIR).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn zero_learning_rates_freeze_parameters() {
    let (t, phi) = mlps();
    let cfg = TrainConfig {
        lr_t: 0.0,
        lr_phi: 0.0,
        ..gauss_cfg(10)
    };
    let init = TrainerState::init(&cfg, &t, &phi);
    let out = fit(&cfg, &t, &phi, &PAIR).unwrap();
    assert_eq!(out.state.theta, init.theta);
    assert_eq!(out.state.omega, init.omega);
}

#[test]
fn zero_steps_returns_initialisation() {
    let (t, phi) = mlps();
    let cfg = gauss_cfg(0);
    let out = fit(&cfg, &t, &phi, &PAIR).unwrap();
    assert_eq!(out.state, TrainerState::init(&cfg, &t, &phi));
    assert!(out.log.is_empty());
}

#[test]
fn update_counters() {
    let (t, phi) = mlps();
    let cfg = TrainConfig { n_t: 3, ..gauss_cfg(7) };
    let out = fit(&cfg, &t, &phi, &PAIR).unwrap();
    assert_eq!(out.state.step, 7);
    assert_eq!(out.state.phi_updates, 7);
    assert_eq!(out.state.t_updates, 21);
}

#[test]
fn l1_only_skips_potential() {
    let data = make_dataset(&GenerationConfig::new(vec![Task::Noise], 4, Pairing::Paired), 3).unwrap();
    let (t, phi) = tiny_net();
    let cfg = TrainConfig {
        objective: Objective::L1Only,
        steps: 2,
        batch_size: 2,
        log_wall_time: false,
        ..TrainConfig::default()
    };
    let src = BundleSource::new(&data).unwrap();
    let out = fit(&cfg, &t, &phi, &src).unwrap();
    let init = TrainerState::init(&cfg, &t, &phi);
    assert_eq!(out.state.phi_updates, 0);
    assert_eq!(out.state.omega, init.omega);
    assert_ne!(out.state.theta, init.theta);
}

#[test]
fn potential_step_does_not_increase_its_loss() {
    let (t, phi) = mlps();
    let cfg = TrainConfig {
        lr_t: 0.0,
        lr_phi: 1e-3,
        ..gauss_cfg(1)
    };
    let batch = PAIR.batch(0, 64, 5).unwrap();
    let l_phi = |state: &TrainerState| {
        let tape = Tape::new();
        let th = state.theta.bind(&tape, false).unwrap();
        let om = state.omega.bind(&tape, false).unwrap();
        let y = tape.constant(batch.y.clone()).unwrap();
        let x = tape.constant(batch.x.clone()).unwrap();
        let ty = t.forward(&tape, &th, y).unwrap().restored;
        let a = phi.forward(&tape, &om, ty).unwrap();
        let b = phi.forward(&tape, &om, x).unwrap();
        tape.item(loss_potential(&tape, a, b).unwrap()).unwrap()
    };
    let mut state = TrainerState::init(&cfg, &t, &phi);
    for _ in 0..5 {
        let before = l_phi(&state);
        let m = train_step(&mut state, &cfg, &t, &phi, &batch).unwrap();
        assert_eq!(m.l_phi, before);
        assert!(l_phi(&state) <= before, "{} > {before}", l_phi(&state));
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (t, phi) = mlps();
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..gauss_cfg(12)
    };
    let full = fit(&cfg, &t, &phi, &PAIR).unwrap();

    let mut saved = Vec::new();
    let mut on_ckpt = |s: &TrainerState| {
        saved.push(s.clone());
        Ok(())
    };
    let mut hooks = FitHooks {
        on_checkpoint: Some(&mut on_ckpt),
        ..FitHooks::default()
    };
    let init = TrainerState::init(&cfg, &t, &phi);
    let first = fit_with(&TrainConfig { steps: 8, ..cfg.clone() }, &t, &phi, &PAIR, init, &mut hooks).unwrap();
    assert_eq!(saved.iter().map(|s| s.step).collect::<Vec<_>>(), vec![4, 8]);
    let mid = saved[0].clone();
    let rest = fit_with(&cfg, &t, &phi, &PAIR, mid, &mut FitHooks::default()).unwrap();
    assert_eq!(rest.state, full.state);
    let mut joined = first.log[..4].to_vec();
    joined.extend(rest.log);
    assert_eq!(joined, full.log);
}

#[test]
fn metrics_hook_sees_every_logged_step() {
    let (t, phi) = mlps();
    let cfg = TrainConfig {
        log_every: 4,
        ..gauss_cfg(10)
    };
    let mut seen = Vec::new();
    let mut on_metrics = |m: &StepMetrics| {
        seen.push(m.step);
        Ok(())
    };
    let mut hooks = FitHooks {
        on_metrics: Some(&mut on_metrics),
        ..FitHooks::default()
    };
    let init = TrainerState::init(&cfg, &t, &phi);
    let out = fit_with(&cfg, &t, &phi, &PAIR, init, &mut hooks).unwrap();
    assert_eq!(seen, vec![4, 8, 10]);
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|m| m.wall_ms == 0.0));
}

#[test]
fn paired_mode_without_pairs_is_a_contract_error() {
    let (t, phi) = mlps();
    let cfg = TrainConfig {
        mode: Pairing::Paired,
        ..gauss_cfg(1)
    };
    let err = fit(&cfg, &t, &phi, &PAIR).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn non_finite_loss_names_the_term() {
    let (t, phi) = mlps();
    let cfg = gauss_cfg(1);
    let mut state = TrainerState::init(&cfg, &t, &phi);
    let mut batch = PAIR.batch(0, 4, 0).unwrap();
    batch.x.data_mut()[0] = f64::INFINITY;
    let err = train_step(&mut state, &cfg, &t, &phi, &batch).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn bundle_batches_are_stratified_and_paired() {
    let gen = GenerationConfig::new(vec![Task::Noise, Task::Rain, Task::Haze], 9, Pairing::Paired);
    let data = make_dataset(&gen, 1).unwrap();
    let src = BundleSource::new(&data).unwrap();
    let b = src.batch(3, 6, 9).unwrap();
    let tasks = data.tasks();
    assert_eq!(b.tasks, vec![tasks[0], tasks[1], tasks[2], tasks[0], tasks[1], tasks[2]]);
    assert_eq!(Some(&b.x), b.x_star.as_ref());
    assert_eq!(b, src.batch(3, 6, 9).unwrap());
    assert_ne!(b, src.batch(4, 6, 9).unwrap());

    let gen = GenerationConfig::new(vec![Task::Noise], 4, Pairing::Unpaired);
    let data = make_dataset(&gen, 1).unwrap();
    let b = BundleSource::new(&data).unwrap().batch(0, 3, 0).unwrap();
    assert!(b.x_star.is_none());
    assert_eq!(b.x.shape(), b.y.shape());
}

#[test]
fn toy_paired_denoising_improves() {
    let mut gen = GenerationConfig::new(vec![Task::Noise], 64, Pairing::Paired);
    gen.height = 16;
    gen.width = 16;
    gen.noise_sigmas = vec![25.0];
    let data = make_dataset(&gen, 4).unwrap();
    let (t, phi) = tiny_net();
    let cfg = TrainConfig {
        lr_t: 1e-3,
        lr_phi: 1e-4,
        batch_size: 4,
        steps: 500,
        seed: 2,
        log_every: 500,
        log_wall_time: false,
        ..TrainConfig::default()
    };
    let src = BundleSource::new(&data).unwrap();
    let eval_l1 = |state: &TrainerState| {
        let tape = Tape::new();
        let p = state.theta.bind(&tape, false).unwrap();
        let ys: Vec<Tensor> = data.degraded.iter().map(|d| d.image.clone()).collect();
        let xs: Vec<Tensor> = (0..ys.len()).map(|i| data.target(i).unwrap().clone()).collect();
        let y = tape.constant(Tensor::stack(&ys).unwrap()).unwrap();
        let x = tape.constant(Tensor::stack(&xs).unwrap()).unwrap();
        let out = t.forward(&tape, &p, y).unwrap().restored;
        tape.item(pair_l1(&tape, out, x).unwrap()).unwrap()
    };
    let before = eval_l1(&TrainerState::init(&cfg, &t, &phi));
    let out = fit(&cfg, &t, &phi, &src).unwrap();
    let after = eval_l1(&out.state);
    assert!(after < before, "{after} >= {before}");
    assert!(out.log.iter().all(|m| m.l_t.is_finite() && m.l_phi.is_finite()));
}
