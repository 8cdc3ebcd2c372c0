use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::finite_diff_check;
use crate::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct DFT magnitudes of one plane.
fn dft_mags(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -std::f64::consts::TAU * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re += plane[y * w + x] * a.cos();
                    im += plane[y * w + x] * a.sin();
                }
            }
            out.push(re.hypot(im));
        }
    }
    out
}

fn reg_oracle(sample: &[f64], h: usize, w: usize, mode: RegMode) -> f64 {
    let mags: Vec<f64> = sample.chunks(h * w).flat_map(|p| dft_mags(p, h, w)).collect();
    match mode {
        RegMode::FourierL1 => mags.iter().sum(),
        RegMode::FourierL2 => mags.iter().map(|m| m * m).sum::<f64>().sqrt(),
        RegMode::Off => 0.0,
    }
}

fn off() -> CostConfig {
    CostConfig {
        residual_reg_mode: RegMode::Off,
        ..CostConfig::default()
    }
}

#[test]
fn transport_cost_examples() {
    let y = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    assert_eq!(transport_cost(&y, &y).unwrap(), 0.0);
    let mut t = y.clone();
    t.data_mut()[2] += 1.0;
    assert!((transport_cost(&y, &t).unwrap() - 1.0).abs() < 1e-15);
    let z = Tensor::zeros(&[4]);
    let d = Tensor::from_vec(vec![0.3, 0.4, 0.0, 0.0]);
    assert!((transport_cost(&d, &z).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(transport_cost(&z, &y), Err(Error::Contract(_))));
}

#[test]
fn residual_reg_examples() {
    let zero = Tensor::zeros(&[3, 4, 4]);
    for m in [RegMode::FourierL1, RegMode::FourierL2, RegMode::Off] {
        assert_eq!(residual_reg(&zero, m).unwrap(), 0.0);
    }
    let imp = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((residual_reg(&imp, RegMode::FourierL1).unwrap() - 4.0).abs() < 1e-12);
    assert!((residual_reg(&imp, RegMode::FourierL2).unwrap() - 2.0).abs() < 1e-12);
    assert!((reg_oracle(imp.data(), 2, 2, RegMode::FourierL1) - 4.0).abs() < 1e-12);
    let c = Tensor::full(&[2, 2], -0.35);
    assert!((residual_reg(&c, RegMode::FourierL1).unwrap() - 4.0 * 0.35).abs() < 1e-12);
}

#[test]
fn residual_reg_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = rand_tensor(&mut rng, &[3, 5, 6]);
    for m in [RegMode::FourierL1, RegMode::FourierL2] {
        let a = residual_reg(&r, m).unwrap();
        let b = reg_oracle(r.data(), 5, 6, m);
        assert!((a - b).abs() < 1e-9 * b.max(1.0), "{m:?}: {a} vs {b}");
    }
}

#[test]
fn per_task_modes_default_to_l2_for_noise() {
    let c = CostConfig::default();
    assert_eq!(c.reg_for(Task::Noise), RegMode::FourierL2);
    for t in [Task::Rain, Task::Haze, Task::Blur, Task::Lowlight] {
        assert_eq!(c.reg_for(t), RegMode::FourierL1);
    }
    assert_eq!(off().reg_for(Task::Noise), RegMode::Off);
    let bad = CostConfig {
        tau: 0.0,
        ..CostConfig::default()
    };
    assert!(bad.validate().is_err());
}

struct Batch {
    y: Tensor,
    ty: Tensor,
    xs: Tensor,
    phi: Tensor,
    tasks: Vec<Task>,
}

fn random_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        y: rand_tensor(&mut rng, &[3, 3, 4, 4]),
        ty: rand_tensor(&mut rng, &[3, 3, 4, 4]),
        xs: rand_tensor(&mut rng, &[3, 3, 4, 4]),
        phi: rand_tensor(&mut rng, &[3]),
        tasks: vec![Task::Noise, Task::Rain, Task::Haze],
    }
}

fn eval_unpaired(b: &Batch, cfg: &CostConfig) -> f64 {
    let tape = Tape::new();
    let (y, ty, phi) = (
        tape.constant(b.y.clone()).unwrap(),
        tape.constant(b.ty.clone()).unwrap(),
        tape.constant(b.phi.clone()).unwrap(),
    );
    let l = loss_transport_unpaired(&tape, y, ty, phi, &b.tasks, cfg).unwrap();
    tape.item(l).unwrap()
}

fn eval_paired(b: &Batch, cfg: &CostConfig) -> f64 {
    let tape = Tape::new();
    let (y, ty, xs, phi) = (
        tape.constant(b.y.clone()).unwrap(),
        tape.constant(b.ty.clone()).unwrap(),
        tape.constant(b.xs.clone()).unwrap(),
        tape.constant(b.phi.clone()).unwrap(),
    );
    let l = loss_transport_paired(&tape, y, ty, Some(xs), phi, &b.tasks, cfg).unwrap();
    tape.item(l).unwrap()
}

#[test]
fn unpaired_loss_trivial_cases() {
    let y = Tensor::full(&[1, 3, 4, 4], 0.5);
    let mut b = Batch {
        y: y.clone(),
        ty: y.clone(),
        xs: y,
        phi: Tensor::from_vec(vec![0.0]),
        tasks: vec![Task::Rain],
    };
    assert_eq!(eval_unpaired(&b, &off()), 0.0);
    b.phi = Tensor::from_vec(vec![5.0]);
    assert_eq!(eval_unpaired(&b, &off()), -5.0);
}

#[test]
fn unpaired_loss_matches_resummation() {
    let b = random_batch(5);
    let cfg = CostConfig::default();
    let per = b.y.numel() / 3;
    let mut total = 0.0;
    for i in 0..3 {
        let (ys, ts) = (&b.y.data()[i * per..(i + 1) * per], &b.ty.data()[i * per..(i + 1) * per]);
        let r: Vec<f64> = ys.iter().zip(ts).map(|(a, c)| a - c).collect();
        let c = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += c + reg_oracle(&r, 4, 4, cfg.reg_for(b.tasks[i])) - b.phi.data()[i];
    }
    let got = eval_unpaired(&b, &cfg);
    assert!((got - total / 3.0).abs() < 1e-9 * total.abs().max(1.0), "{got} vs {}", total / 3.0);
}

#[test]
fn paired_loss_reduces_and_adds_pair_term() {
    let b = random_batch(6);
    let cfg = CostConfig {
        lambda_pair: 0.0,
        ..CostConfig::default()
    };
    assert_eq!(eval_paired(&b, &cfg).to_bits(), eval_unpaired(&b, &cfg).to_bits());

    // T(y) = x*: only the transport cost remains.
    let mut c = random_batch(7);
    c.xs = c.ty.clone();
    c.phi = Tensor::zeros(&[3]);
    let per = c.y.numel() / 3;
    let mean_cost: f64 = (0..3)
        .map(|i| {
            let (ys, ts) = (&c.y.data()[i * per..(i + 1) * per], &c.ty.data()[i * per..(i + 1) * per]);
            ys.iter().zip(ts).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / 3.0;
    assert!((eval_paired(&c, &off()) - mean_cost).abs() < 1e-12);

    // lambda 10, ||T(y) - x*||_1 = 0.2 and nothing else.
    let y = Tensor::full(&[1, 3, 2, 2], 0.5);
    let mut xs = y.clone();
    xs.data_mut()[0] += 0.15;
    xs.data_mut()[5] -= 0.05;
    let d = Batch {
        y: y.clone(),
        ty: y,
        xs,
        phi: Tensor::zeros(&[1]),
        tasks: vec![Task::Haze],
    };
    let cfg = CostConfig {
        lambda_pair: 10.0,
        ..off()
    };
    assert!((eval_paired(&d, &cfg) - 2.0).abs() < 1e-12);
}

#[test]
fn paired_loss_requires_ground_truth() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
    let p = tape.constant(Tensor::zeros(&[1])).unwrap();
    let r = loss_transport_paired(&tape, y, y, None, p, &[Task::Noise], &off());
    assert!(matches!(r, Err(Error::Contract(_))));
    let e = tape.constant(Tensor::zeros(&[0, 3, 2, 2])).unwrap();
    let pe = tape.constant(Tensor::zeros(&[0])).unwrap();
    assert!(loss_transport_unpaired(&tape, e, e, pe, &[], &off()).is_err());
}

#[test]
fn potential_loss_examples() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::full(&[4], 3.0)).unwrap();
    let b = tape.constant(Tensor::full(&[2], 3.0)).unwrap();
    assert_eq!(tape.item(loss_potential(&tape, a, b).unwrap()).unwrap(), 0.0);
    let a = tape.constant(Tensor::from_vec(vec![1.0, 3.0])).unwrap();
    let b = tape.constant(Tensor::from_vec(vec![4.0, 6.0, 5.0])).unwrap();
    assert_eq!(tape.item(loss_potential(&tape, a, b).unwrap()).unwrap(), -3.0);
    let e = tape.constant(Tensor::zeros(&[0])).unwrap();
    assert!(loss_potential(&tape, e, b).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (p, q) = (rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[7]));
    let want = p.data().iter().sum::<f64>() / 5.0 - q.data().iter().sum::<f64>() / 7.0;
    let (pv, qv) = (tape.constant(p).unwrap(), tape.constant(q).unwrap());
    assert!((tape.item(loss_potential(&tape, pv, qv).unwrap()).unwrap() - want).abs() < 1e-14);
}

/// Plain evaluation of the contrastive loss from a similarity matrix.
fn contrastive_oracle(sim: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = labels.len();
    let mut tasks: Vec<usize> = labels.to_vec();
    tasks.sort();
    tasks.dedup();
    let mut total = 0.0;
    for k in tasks {
        let (mut p, mut np, mut q, mut nq) = (0.0, 0, 0.0, 0);
        for i in 0..n {
            for j in 0..n {
                if i == j || labels[i] != k {
                    continue;
                }
                if labels[j] == k {
                    p += (sim[i][j] / tau).exp();
                    np += 1;
                } else {
                    q += (sim[i][j] / tau).exp();
                    nq += 1;
                }
            }
        }
        if np == 0 {
            continue;
        }
        let (p, q) = (p / np as f64, if nq == 0 { 0.0 } else { q / nq as f64 });
        total += -(p / (p + q)).ln();
    }
    total
}

fn contrastive(emb: &Tensor, labels: &[Task], tau: f64) -> (f64, Vec<Task>) {
    let tape = Tape::new();
    let e = tape.constant(emb.clone()).unwrap();
    let out = loss_task_contrastive(&tape, e, labels, tau).unwrap();
    (tape.item(out.loss).unwrap(), out.flagged)
}

#[test]
fn contrastive_single_task_single_positive_is_zero() {
    let emb = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.3, 0.9, 0.1]).unwrap();
    let (l, flagged) = contrastive(&emb, &[Task::Rain, Task::Rain], 0.07);
    assert_eq!(l, 0.0);
    assert!(flagged.is_empty());
}

#[test]
fn contrastive_symmetric_case_is_two_log_two() {
    // All four vectors identical: every similarity equals 1.
    let emb = Tensor::full(&[4, 3], 0.5);
    let labels = [Task::Noise, Task::Noise, Task::Rain, Task::Rain];
    let (l, _) = contrastive(&emb, &labels, 0.07);
    assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-9, "{l}");
    // Unequal group sizes with equal similarities: still log 2 per task.
    let emb = Tensor::full(&[5, 2], -0.2);
    let labels = [Task::Noise, Task::Noise, Task::Noise, Task::Rain, Task::Rain];
    let (l, _) = contrastive(&emb, &labels, 0.5);
    assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-9, "{l}");
}

#[test]
fn contrastive_separated_clusters_vanish() {
    // Positives at similarity 1, negatives at -1.
    let emb = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]).unwrap();
    let labels = [Task::Haze, Task::Haze, Task::Blur, Task::Blur];
    let (l, _) = contrastive(&emb, &labels, 0.07);
    assert!(l < 1e-8, "{l}");
}

#[test]
fn contrastive_matches_oracle_and_flags_singletons() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = rand_tensor(&mut rng, &[7, 5]);
    let labels = [Task::Noise, Task::Rain, Task::Haze, Task::Noise, Task::Rain, Task::Noise, Task::Blur];
    let ids: Vec<usize> = labels.iter().map(|t| *t as usize).collect();
    let rows: Vec<Vec<f64>> = emb
        .data()
        .chunks(5)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let sim: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect())
        .collect();
    let (l, flagged) = contrastive(&emb, &labels, 0.2);
    let want = contrastive_oracle(&sim, &ids, 0.2);
    assert!((l - want).abs() < 1e-10, "{l} vs {want}");
    assert_eq!(flagged, vec![Task::Haze, Task::Blur]);
}

/// Embeddings on the unit circle: rows 0,1 are one task, row 2 another.
/// The angle between rows 0 and 1 controls the positive similarity.
fn circle_emb(pos_angle: f64) -> Tensor {
    Tensor::new(vec![3, 2], vec![1.0, 0.0, pos_angle.cos(), pos_angle.sin(), -0.2f64.cos(), 0.9]).unwrap()
}

#[test]
fn contrastive_decreases_with_positive_similarity() {
    let labels = [Task::Rain, Task::Rain, Task::Haze];
    let mut prev = f64::INFINITY;
    for i in 0..=20 {
        let angle = 1.5 - 1.5 * i as f64 / 20.0;
        let (l, _) = contrastive(&circle_emb(angle), &labels, 0.1);
        assert!(l < prev, "step {i}: {l} !< {prev}");
        prev = l;
    }
}

#[test]
fn loss_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let b = random_batch(11);
    let tasks = b.tasks.clone();
    let cfg = CostConfig::default();
    let (y, xs, phi) = (b.y.clone(), b.xs.clone(), b.phi.clone());
    let f_u = |t: &Tape, v: Var| {
        let (yv, pv) = (t.constant(y.clone())?, t.constant(phi.clone())?);
        loss_transport_unpaired(t, yv, v, pv, &tasks, &cfg)
    };
    assert!(finite_diff_check(f_u, &b.ty, 1e-6).unwrap() < 1e-4);
    let f_p = |t: &Tape, v: Var| {
        let (yv, xv, pv) = (t.constant(y.clone())?, t.constant(xs.clone())?, t.constant(phi.clone())?);
        loss_transport_paired(t, yv, v, Some(xv), pv, &tasks, &cfg)
    };
    assert!(finite_diff_check(f_p, &b.ty, 1e-6).unwrap() < 1e-4);
    let q = rand_tensor(&mut rng, &[4]);
    let f_phi = |t: &Tape, v: Var| {
        let qv = t.constant(q.clone())?;
        loss_potential(t, v, qv)
    };
    assert!(finite_diff_check(f_phi, &b.phi, 1e-6).unwrap() < 1e-4);
    let emb = rand_tensor(&mut rng, &[6, 4]);
    let labels = [Task::Noise, Task::Rain, Task::Haze, Task::Noise, Task::Rain, Task::Haze];
    let f_c = |t: &Tape, v: Var| Ok(loss_task_contrastive(t, v, &labels, 0.07)?.loss);
    assert!(finite_diff_check(f_c, &emb, 1e-6).unwrap() < 1e-4);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn img() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, 2 * 4 * 6)
            .prop_map(|d| Tensor::new(vec![2, 4, 6], d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn l2_mode_is_parseval(r in img()) {
            let want = (24f64).sqrt() * r.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let got = residual_reg(&r, RegMode::FourierL2).unwrap();
            prop_assert!((got - want).abs() <= 1e-9 * want.max(1e-300));
        }

        #[test]
        fn costs_are_nonnegative(r in img()) {
            let z = Tensor::zeros(r.shape());
            prop_assert!(transport_cost(&r, &z).unwrap() >= 0.0);
            for m in [RegMode::FourierL1, RegMode::FourierL2] {
                let g = residual_reg(&r, m).unwrap();
                prop_assert!(g >= 0.0);
                prop_assert_eq!(g == 0.0, r.data().iter().all(|v| *v == 0.0));
            }
        }

        #[test]
        fn lambda_zero_is_bitwise_unpaired(seed in any::<u64>()) {
            let b = random_batch(seed);
            let cfg = CostConfig { lambda_pair: 0.0, ..CostConfig::default() };
            prop_assert_eq!(eval_paired(&b, &cfg).to_bits(), eval_unpaired(&b, &cfg).to_bits());
        }

        #[test]
        fn raising_a_positive_similarity_lowers_the_loss(a in 0.05f64..1.5, da in 0.01f64..0.5) {
            let labels = [Task::Rain, Task::Rain, Task::Haze];
            let (hi, _) = contrastive(&circle_emb(a), &labels, 0.1);
            let (lo, _) = contrastive(&circle_emb((a - da).max(0.0)), &labels, 0.1);
            prop_assert!(lo < hi);
        }
    }
}
