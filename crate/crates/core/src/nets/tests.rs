use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transport::{init_res, res_block};
use super::*;
use crate::tensor::finite_diff_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn tiny(conditioning: Conditioning) -> NetConfig {
    NetConfig {
        base_channels: 2,
        embed_channels: [4, 3, 2],
        potential_channels: 2,
        conditioning,
    }
}

/// Replace every parameter (including zero-initialised fusion and biases)
/// with random values so no path is trivially dead.
fn randomize(p: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in p.iter_mut() {
        if name.ends_with("alpha") {
            continue;
        }
        let scale = 0.4;
        for v in t.data_mut() {
            *v += r.gen_range(-scale..scale);
        }
    }
}

/// Max finite-difference error over every parameter tensor of `store`,
/// for the scalar `loss(tape, bound)`.
fn check_all_params<F>(store: &ParamStore, loss: F) -> f64
where
    F: Fn(&Tape, &Bound) -> crate::Result<Var>,
{
    let mut worst: f64 = 0.0;
    for (name, t) in store.iter() {
        let f = |tape: &Tape, v: Var| {
            let mut b = store.bind(tape, false)?;
            b.replace(name, v)?;
            loss(tape, &b)
        };
        let e = finite_diff_check(f, t, 1e-6).unwrap();
        assert!(e < 1e-4, "{name}: {e}");
        worst = worst.max(e);
    }
    worst
}

fn image(seed: u64, shape: &[usize]) -> Tensor {
    rand_tensor(&mut rng(seed), shape, 0.0, 1.0)
}

#[test]
fn generator_preserves_shape() {
    let model = DaRcot::new(NetConfig {
        base_channels: 4,
        embed_channels: [8, 4, 4],
        potential_channels: 4,
        conditioning: Conditioning::Full,
    });
    let p = model.init(&mut rng(1));
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let y = tape.constant(image(2, &[1, 3, 32, 32])).unwrap();
    let out = generator_forward(&tape, &b, y, &Injection::default()).unwrap();
    assert_eq!(tape.shape(out), vec![1, 3, 32, 32]);
    let bad = tape.constant(image(3, &[1, 3, 30, 32])).unwrap();
    assert!(matches!(
        generator_forward(&tape, &b, bad, &Injection::default()),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn zero_fusion_reduces_to_first_pass() {
    let model = DaRcot::new(tiny(Conditioning::Full));
    let mut p = model.init(&mut rng(4));
    randomize(&mut p, 5);
    p.zero_prefix("gen.fuse");
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let y = tape.constant(image(6, &[2, 3, 8, 8])).unwrap();
    let out = two_pass_restore(&tape, &b, y).unwrap();
    assert_eq!(tape.value(out.x_hat), tape.value(out.x0_hat));
    // Fresh initialisation already has zero fusion weights.
    let p = model.init(&mut rng(7));
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let y = tape.constant(image(8, &[1, 3, 8, 8])).unwrap();
    let out = two_pass_restore(&tape, &b, y).unwrap();
    assert_eq!(tape.value(out.x_hat), tape.value(out.x0_hat));
}

#[test]
fn embedding_scale_mismatch_is_rejected() {
    let model = DaRcot::new(tiny(Conditioning::Full));
    let p = model.init(&mut rng(9));
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let y = tape.constant(image(10, &[1, 3, 8, 8])).unwrap();
    let wrong = tape.constant(Tensor::zeros(&[1, 4, 4, 4])).unwrap();
    let inj = Injection {
        bottleneck: Some(wrong),
        ..Injection::default()
    };
    assert!(matches!(generator_forward(&tape, &b, y, &inj), Err(crate::Error::Contract(_))));
}

#[test]
fn regm_shapes() {
    let model = DaRcot::new(NetConfig {
        base_channels: 4,
        embed_channels: [8, 6, 4],
        potential_channels: 4,
        conditioning: Conditioning::Full,
    });
    let p = model.init(&mut rng(11));
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let r = tape.constant(rand_tensor(&mut rng(12), &[2, 3, 32, 32], -0.5, 0.5)).unwrap();
    let e = regm_forward(&tape, &b, r).unwrap();
    assert_eq!(tape.shape(e.r1), vec![2, 8, 8, 8]);
    assert_eq!(tape.shape(e.r2), vec![2, 6, 16, 16]);
    assert_eq!(tape.shape(e.r3), vec![2, 4, 32, 32]);
}

#[test]
fn regm_of_zero_residual_is_deterministic() {
    let model = DaRcot::new(tiny(Conditioning::Full));
    let mut p = model.init(&mut rng(13));
    randomize(&mut p, 14);
    let run = || {
        let tape = Tape::new();
        let b = p.bind(&tape, false).unwrap();
        let z = tape.constant(Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        let e = regm_forward(&tape, &b, z).unwrap();
        (tape.value(e.r1), tape.value(e.r2), tape.value(e.r3))
    };
    assert_eq!(run(), run());
}

#[test]
fn mdta_rows_are_distributions_and_shape_is_kept() {
    let mut p = ParamStore::new();
    super::blocks::init_mdta(&mut p, "m", 4, &mut rng(15));
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let x = tape.constant(rand_tensor(&mut rng(16), &[2, 4, 5, 6], -1.0, 1.0)).unwrap();
    let (a, _) = mdta_attention(&tape, &b, "m", x).unwrap();
    let av = tape.value(a);
    assert_eq!(av.shape(), &[2, 4, 4]);
    for row in av.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(tape.shape(mdta_block(&tape, &b, "m", x).unwrap()), vec![2, 4, 5, 6]);
}

#[test]
fn blocks_with_zeroed_inner_weights_are_identity() {
    let x = rand_tensor(&mut rng(17), &[1, 4, 4, 4], -1.0, 1.0);
    let mut p = ParamStore::new();
    super::blocks::init_mdta(&mut p, "m", 4, &mut rng(18));
    super::blocks::init_gdfn(&mut p, "g", 4, &mut rng(19));
    init_res(&mut p, "r", 4, &mut rng(20));
    p.zero_prefix("m.proj");
    p.zero_prefix("g.gate_");
    p.zero_prefix("r.c2");
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    assert_eq!(tape.value(mdta_block(&tape, &b, "m", xv).unwrap()), x);
    assert_eq!(tape.value(gdfn_block(&tape, &b, "g", xv).unwrap()), x);
    assert_eq!(tape.value(res_block(&tape, &b, "r", xv).unwrap()), x);
}

fn sq_mean(tape: &Tape, v: Var) -> crate::Result<Var> {
    let s = tape.mul(v, v)?;
    tape.mean(s)
}

#[test]
fn mdta_and_gdfn_gradients() {
    let x = rand_tensor(&mut rng(21), &[2, 3, 4, 4], -1.0, 1.0);
    for which in ["mdta", "gdfn"] {
        let mut p = ParamStore::new();
        if which == "mdta" {
            super::blocks::init_mdta(&mut p, "b", 3, &mut rng(22));
        } else {
            super::blocks::init_gdfn(&mut p, "b", 3, &mut rng(22));
        }
        randomize(&mut p, 23);
        let block = |tape: &Tape, b: &Bound, v: Var| {
            if which == "mdta" {
                mdta_block(tape, b, "b", v)
            } else {
                gdfn_block(tape, b, "b", v)
            }
        };
        let xc = x.clone();
        check_all_params(&p, |tape, b| {
            let v = tape.constant(xc.clone())?;
            sq_mean(tape, block(tape, b, v)?)
        });
        let f = |tape: &Tape, v: Var| {
            let b = p.bind(tape, false)?;
            sq_mean(tape, block(tape, &b, v)?)
        };
        assert!(finite_diff_check(f, &x, 1e-6).unwrap() < 1e-4, "{which} input grad");
    }
}

#[test]
fn generator_gradients_wrt_theta1() {
    let model = DaRcot::new(tiny(Conditioning::None));
    let mut p = model.init(&mut rng(24));
    randomize(&mut p, 25);
    let y = image(26, &[1, 3, 8, 8]);
    check_all_params(&p, |tape, b| {
        let v = tape.constant(y.clone())?;
        tape.mean(generator_forward(tape, b, v, &Injection::default())?)
    });
}

#[test]
fn regm_chain_gradients() {
    let model = DaRcot::new(tiny(Conditioning::Full));
    let mut p = model.init(&mut rng(27));
    randomize(&mut p, 28);
    let r = rand_tensor(&mut rng(29), &[1, 3, 8, 8], -0.5, 0.5);
    let loss = |tape: &Tape, b: &Bound, v: Var| -> crate::Result<Var> {
        let e = regm_forward(tape, b, v)?;
        let (a, c, d) = (sq_mean(tape, e.r1)?, tape.mean(e.r2)?, sq_mean(tape, e.r3)?);
        tape.add(tape.add(a, c)?, d)
    };
    let regm_only: ParamStore = {
        let mut q = ParamStore::new();
        for (n, t) in p.iter().filter(|(n, _)| n.starts_with("regm.")) {
            q.insert(n.clone(), t.clone());
        }
        q
    };
    check_all_params(&regm_only, |tape, b| loss(tape, b, tape.constant(r.clone())?));
    let f = |tape: &Tape, v: Var| loss(tape, &p.bind(tape, false)?, v);
    assert!(finite_diff_check(f, &r, 1e-6).unwrap() < 1e-4);
}

#[test]
fn two_pass_pipeline_gradients() {
    let model = DaRcot::new(tiny(Conditioning::Full));
    let mut p = model.init(&mut rng(30));
    randomize(&mut p, 31);
    let y = image(32, &[1, 3, 8, 8]);
    let f = |tape: &Tape, v: Var| {
        let b = p.bind(tape, false)?;
        sq_mean(tape, two_pass_restore(tape, &b, v)?.x_hat)
    };
    assert!(finite_diff_check(f, &y, 1e-6).unwrap() < 1e-4);
    check_all_params(&p, |tape, b| {
        let v = tape.constant(y.clone())?;
        sq_mean(tape, two_pass_restore(tape, b, v)?.x_hat)
    });
}

#[test]
fn two_pass_shapes_are_consistent() {
    let model = DaRcot::new(tiny(Conditioning::Full));
    let p = model.init(&mut rng(33));
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let y = tape.constant(image(34, &[2, 3, 16, 12])).unwrap();
    let out = two_pass_restore(&tape, &b, y).unwrap();
    for v in [out.x_hat, out.x0_hat, out.r0_hat] {
        assert_eq!(tape.shape(v), vec![2, 3, 16, 12]);
    }
    assert_eq!(tape.shape(out.embeddings.r1), vec![2, 4, 4, 3]);
    assert_eq!(tape.shape(out.embeddings.r2), vec![2, 3, 8, 6]);
    assert_eq!(tape.shape(out.embeddings.r3), vec![2, 2, 16, 12]);
}

#[test]
fn every_conditioning_mode_runs_and_starts_at_first_pass() {
    for mode in [Conditioning::None, Conditioning::X0, Conditioning::R0, Conditioning::Full] {
        let model = DaRcot::new(tiny(mode));
        let p = model.init(&mut rng(35));
        let tape = Tape::new();
        let b = p.bind(&tape, false).unwrap();
        let y = tape.constant(image(36, &[3, 3, 8, 8])).unwrap();
        let out = model.forward(&tape, &b, y).unwrap();
        let x0 = generator_forward(&tape, &b, y, &Injection::default()).unwrap();
        assert_eq!(tape.value(out.restored), tape.value(x0), "{mode:?}");
        assert_eq!(out.task_embedding.is_some(), mode == Conditioning::Full);
        if let Some(e) = out.task_embedding {
            assert_eq!(tape.shape(e), vec![3, 4]);
        }
    }
}

#[test]
fn default_widths_give_finite_output_at_init() {
    let cfg = NetConfig::default();
    let model = DaRcot::new(cfg.clone());
    let p = model.init(&mut rng(37));
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let y = tape.constant(image(38, &[1, 3, 32, 32])).unwrap();
    let out = model.forward(&tape, &b, y).unwrap();
    assert!(tape.value(out.restored).is_finite());
    let phi = PotentialNet::new(cfg.potential_channels);
    let q = phi.init(&mut rng(39));
    let bq = q.bind(&tape, false).unwrap();
    assert!(tape.value(phi.forward(&tape, &bq, y).unwrap()).is_finite());
}

#[test]
fn potential_is_scalar_and_deterministic() {
    let net = PotentialNet::new(2);
    let p = net.init(&mut rng(40));
    let x = image(41, &[3, 16, 16]);
    let run = || {
        let tape = Tape::new();
        let b = p.bind(&tape, false).unwrap();
        let v = tape.constant(x.clone()).unwrap();
        let out = potential_forward(&tape, &net, &b, v).unwrap();
        tape.value(out)
    };
    let a = run();
    assert_eq!(a.shape(), &[] as &[usize]);
    assert_eq!(a, run());
    let tape = Tape::new();
    let b = p.bind(&tape, false).unwrap();
    let xb = tape.constant(image(42, &[5, 3, 16, 16])).unwrap();
    assert_eq!(tape.shape(net.forward(&tape, &b, xb).unwrap()), vec![5]);
}

#[test]
fn potential_gradients_wrt_omega() {
    let net = PotentialNet::new(2);
    let mut p = net.init(&mut rng(43));
    randomize(&mut p, 44);
    let x = image(45, &[2, 3, 16, 16]);
    check_all_params(&p, |tape, b| {
        let v = tape.constant(x.clone())?;
        tape.mean(net.forward(tape, b, v)?)
    });
}

#[test]
fn mlp_models_gradients() {
    let y = rand_tensor(&mut rng(46), &[6, 1], -2.0, 2.0);
    let t = Mlp1d { hidden: 5, depth: 2 };
    let p = t.init(&mut rng(47));
    check_all_params(&p, |tape, b| sq_mean(tape, t.forward(tape, b, tape.constant(y.clone())?)?.restored));
    let m = MonotoneMap1d { units: 4 };
    let mut p = m.init(&mut rng(48));
    randomize(&mut p, 49);
    check_all_params(&p, |tape, b| sq_mean(tape, m.forward(tape, b, tape.constant(y.clone())?)?.restored));
    let phi = MlpPotential1d { hidden: 5, depth: 2 };
    let p = phi.init(&mut rng(50));
    check_all_params(&p, |tape, b| tape.mean(phi.forward(tape, b, tape.constant(y.clone())?)?));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn monotone_map_is_increasing(seed in any::<u64>(), a in -4.0f64..4.0, d in 1e-3f64..2.0) {
            let m = MonotoneMap1d { units: 6 };
            let mut p = m.init(&mut rng(seed));
            randomize(&mut p, seed ^ 1);
            let tape = Tape::new();
            let b = p.bind(&tape, false).unwrap();
            let y = tape.constant(Tensor::new(vec![2, 1], vec![a, a + d]).unwrap()).unwrap();
            let out = tape.value(m.forward(&tape, &b, y).unwrap().restored);
            prop_assert!(out.data()[1] > out.data()[0]);
        }
    }
}
