use proptest::prelude::*;

use super::*;
use crate::degrade::{make_dataset, Pairing, Task};
use crate::nets::{Mlp1d, MlpPotential1d};
use crate::tensor::Tensor;
use crate::train::{fit, GaussianPair};

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn f64_tensor_roundtrips_bitwise() {
    let t = Tensor::new(vec![2, 3], vec![0.1, -2.5e-300, 1e300, -0.0, f64::MIN_POSITIVE, 7.0]).unwrap();
    let bytes = encode_tensor(&t, DType::F64).unwrap();
    let (back, used) = decode_tensor(&bytes).unwrap();
    assert_eq!(used, bytes.len());
    assert_eq!(back.shape(), t.shape());
    assert_eq!(bits(&back), bits(&t));
}

#[test]
fn scalar_tensor_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.frtn");
    let t = Tensor::scalar(3.25);
    write_tensor(&p, &t, DType::F64).unwrap();
    let back = read_tensor(&p).unwrap();
    assert_eq!(back.shape(), &[] as &[usize]);
    assert_eq!(back.item().unwrap(), 3.25);
}

#[test]
fn header_layout() {
    let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let b = encode_tensor(&t, DType::F32).unwrap();
    assert_eq!(&b[..4], b"FRTN");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(b[8], 0);
    assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(b[13..21].try_into().unwrap()), 2);
    assert_eq!(b.len(), 21 + 8);
    assert_eq!(f32::from_le_bytes(b[21..25].try_into().unwrap()), 1.0);
}

#[test]
fn f32_rejects_unrepresentable_values() {
    let t = Tensor::from_vec(vec![0.1]);
    assert_eq!(encode_tensor(&t, DType::F32).unwrap_err().exit_code(), 1);
}

#[test]
fn corrupt_files_name_the_field() {
    let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let good = encode_tensor(&t, DType::F64).unwrap();
    let cases: Vec<(Vec<u8>, &str)> = vec![
        ({
            let mut b = good.clone();
            b[0] = b'X';
            b
        }, "magic"),
        ({
            let mut b = good.clone();
            b[4] = 9;
            b
        }, "version"),
        ({
            let mut b = good.clone();
            b[8] = 5;
            b
        }, "dtype"),
        (good[..15].to_vec(), "dims"),
        (good[..good.len() - 1].to_vec(), "payload"),
        (good[..2].to_vec(), "magic"),
    ];
    for (bytes, field) in cases {
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains(field), "{err} should mention {field}");
    }
}

#[test]
fn wrong_magic_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.frtn");
    std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
    assert!(matches!(read_tensor(&p).unwrap_err(), Error::Format(_)));
}

#[test]
fn atomic_write_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sub").join("x.json");
    write_json(&p, &vec![1, 2, 3]).unwrap();
    write_json(&p, &vec![4]).unwrap();
    let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
    let v: Vec<i32> = read_json(&p).unwrap();
    assert_eq!(v, vec![4]);
}

fn trained_state() -> (TrainerState, TrainConfig) {
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 8,
        mode: Pairing::Unpaired,
        lr_t: 1e-2,
        lr_phi: 1e-2,
        log_wall_time: false,
        cost: crate::objective::CostConfig {
            residual_reg_mode: crate::objective::RegMode::Off,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let src = GaussianPair {
        p: (0.0, 1.0),
        q: (2.0, 2.0),
    };
    let out = fit(&cfg, &Mlp1d { hidden: 4, depth: 1 }, &MlpPotential1d { hidden: 4, depth: 1 }, &src).unwrap();
    (out.state, cfg)
}

#[test]
fn checkpoint_roundtrips_bitwise() {
    let (state, cfg) = trained_state();
    let hash = config_hash(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ckpt.bin");
    save_checkpoint(&p, &state, &hash).unwrap();
    let (back, header) = load_checkpoint(&p).unwrap();
    assert_eq!(header.step, 5);
    assert_eq!(header.config_hash, hash);
    assert_eq!(back.step, state.step);
    assert_eq!(back.phi_updates, state.phi_updates);
    for (a, b) in [(&back.theta, &state.theta), (&back.opt_omega.v, &state.opt_omega.v)] {
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(bits(ta), bits(tb));
        }
    }
    assert_eq!(back, state);
    let again = encode_checkpoint(&back, &hash).unwrap();
    assert_eq!(again, std::fs::read(&p).unwrap());
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let (state, _) = trained_state();
    let bytes = encode_checkpoint(&state, "h").unwrap();
    for bad in [&bytes[..3], &bytes[..20], &bytes[..bytes.len() - 3]] {
        assert!(matches!(decode_checkpoint(bad).unwrap_err(), Error::Format(_)));
    }
}

#[test]
fn bundle_roundtrips() {
    let gen = GenerationConfig::new(vec![Task::Noise, Task::Haze], 4, Pairing::Paired);
    let bundle = make_dataset(&gen, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(dir.path(), &bundle).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back, bundle);
}

#[test]
fn config_rejects_unknown_keys_at_every_level() {
    let ok = r#"{"data": {"tasks": ["noise"], "count": 4, "pairing": "paired"}, "train": {"steps": 3}}"#;
    let cfg = ExperimentConfig::from_json(ok).unwrap();
    assert_eq!(cfg.train.steps, 3);
    assert_eq!(cfg.train.lr_t, 1e-4);
    for bad in [
        r#"{"dataa": {}}"#,
        r#"{"train": {"stepz": 3}}"#,
        r#"{"train": {"cost": {"tau": 0.1, "lamda_pair": 1}}}"#,
        r#"{"net": {"base_channel": 4}}"#,
        r#"{"data": {"tasks": ["noise"], "count": 4, "pairing": "paired", "hieght": 8}}"#,
    ] {
        let err = ExperimentConfig::from_json(bad).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{bad}");
    }
}

#[test]
fn config_hash_tracks_semantic_fields_only() {
    let base = ExperimentConfig::default();
    let h = base.hash().unwrap();
    let mut logging = base.clone();
    logging.train.log_every = 50;
    logging.train.log_wall_time = false;
    logging.train.checkpoint_every = 7;
    assert_eq!(logging.hash().unwrap(), h);

    let mut variants = Vec::new();
    let mut c = base.clone();
    c.train.lr_t = 2e-4;
    variants.push(c);
    let mut c = base.clone();
    c.train.cost.tau = 0.1;
    variants.push(c);
    let mut c = base.clone();
    c.net.base_channels = 8;
    variants.push(c);
    let mut c = base.clone();
    c.data.count = 10;
    variants.push(c);
    let mut c = base.clone();
    c.data_seed = 1;
    variants.push(c);
    let mut c = base.clone();
    c.eval.per_task = 3;
    variants.push(c);
    for v in variants {
        assert_ne!(v.hash().unwrap(), h);
    }
}

#[test]
fn metrics_jsonl_roundtrip() {
    let log = vec![
        StepMetrics {
            step: 1,
            l_phi: -0.5,
            l_t: 2.0,
            l_task: 0.1,
            wall_ms: 0.0,
        },
        StepMetrics {
            step: 2,
            l_phi: 0.25,
            l_t: 1.0,
            l_task: 0.0,
            wall_ms: 0.0,
        },
    ];
    let text = metrics_jsonl(&log).unwrap();
    assert!(text.lines().next().unwrap().contains("\"L_phi\""));
    assert_eq!(parse_metrics_jsonl(&text).unwrap(), log);
}

proptest! {
    #[test]
    fn random_f64_tensors_roundtrip(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| f64::from_bits(r.gen::<u64>() & 0x7fef_ffff_ffff_ffff)).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let (back, _) = decode_tensor(&encode_tensor(&t, DType::F64).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(bits(&back), bits(&t));
    }
}
