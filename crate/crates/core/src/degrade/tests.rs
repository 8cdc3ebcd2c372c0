use super::*;
use crate::seed::rng_for;

fn constant(c: usize, h: usize, w: usize, v: f64) -> Tensor {
    Tensor::full(&[c, h, w], v)
}

fn spec(params: DegradationParams) -> DegradationSpec {
    DegradationSpec::new(params, 11)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.numel() as f64
}

#[test]
fn haze_without_scattering_is_identity() {
    let x = generate_scene(16, 16, &mut rng_for(1, "t", 0));
    let y = apply_degradation(&x, &spec(DegradationParams::Haze { transmission: 1.0, airlight: 0.7 })).unwrap();
    assert_eq!(x, y);
}

#[test]
fn opaque_haze_gives_airlight() {
    let x = generate_scene(16, 16, &mut rng_for(2, "t", 0));
    let y = apply_degradation(&x, &spec(DegradationParams::Haze { transmission: 0.0, airlight: 1.0 })).unwrap();
    assert!(y.data().iter().all(|&v| v == 1.0));
}

#[test]
fn noise_sigma_25_psnr() {
    let x = constant(1, 256, 256, 0.5);
    let y = apply_degradation(&x, &spec(DegradationParams::Noise { sigma: 25.0 })).unwrap();
    let psnr = 10.0 * (1.0 / mse(&x, &y)).log10();
    let expected = 20.0 * (255.0f64 / 25.0).log10();
    assert!((psnr - expected).abs() < 0.2, "psnr {psnr} vs {expected}");
}

#[test]
fn out_of_range_parameters_are_rejected() {
    let x = constant(3, 8, 8, 0.5);
    for p in [
        DegradationParams::Noise { sigma: -1.0 },
        DegradationParams::Haze { transmission: 1.5, airlight: 0.5 },
        DegradationParams::Lowlight { gamma: 0.5, gain: 0.5 },
        DegradationParams::Lowlight { gamma: 2.0, gain: 0.0 },
        DegradationParams::Blur { length: 0.5, angle_deg: 0.0 },
        DegradationParams::Rain { streaks: 3, length: -2.0, angle_deg: 90.0, intensity: 0.5 },
    ] {
        assert!(matches!(apply_degradation(&x, &spec(p)), Err(Error::Contract(_))));
    }
    let bad = constant(3, 8, 8, 1.5);
    assert!(apply_degradation(&bad, &spec(DegradationParams::Noise { sigma: 5.0 })).is_err());
}

#[test]
fn blur_preserves_constants_and_lowlight_matches_formula() {
    let x = constant(3, 12, 12, 0.4);
    let y = apply_degradation(&x, &spec(DegradationParams::Blur { length: 5.0, angle_deg: 30.0 })).unwrap();
    assert!(y.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    let y = apply_degradation(&x, &spec(DegradationParams::Lowlight { gamma: 2.0, gain: 0.5 })).unwrap();
    assert!(y.data().iter().all(|v| (v - 0.08).abs() < 1e-12));
}

#[test]
fn spec_json_roundtrip() {
    let s = spec(DegradationParams::Rain { streaks: 4, length: 6.0, angle_deg: 80.0, intensity: 0.5 });
    let j = serde_json::to_string(&s).unwrap();
    assert!(j.contains("\"task\":\"rain\""));
    let back: DegradationSpec = serde_json::from_str(&j).unwrap();
    assert_eq!(s, back);
}

#[test]
fn task_names_parse() {
    for t in Task::ALL {
        assert_eq!(t.name().parse::<Task>().unwrap(), t);
    }
    assert!("snow".parse::<Task>().is_err());
}

#[test]
fn impulse_has_flat_spectrum() {
    let mut r = Tensor::zeros(&[1, 8, 8]);
    r.data_mut()[9] = 0.7;
    let s = residual_spectrum_stats(&r).unwrap();
    assert!(s.sparsity.abs() < 1e-12);
    assert!(!s.all_zero);
}

#[test]
fn constant_residual_is_maximally_sparse() {
    let r = constant(3, 4, 8, -0.2);
    let s = residual_spectrum_stats(&r).unwrap();
    let expected = 1.0 - 1.0 / (32f64).sqrt();
    assert!((s.sparsity - expected).abs() < 1e-12);
    assert!((s.counts.iter().sum::<f64>() - 32.0).abs() < 1e-9);
    assert_eq!(s.bin_edges.len(), s.counts.len() + 1);
}

#[test]
fn zero_residual_is_flagged() {
    let s = residual_spectrum_stats(&Tensor::zeros(&[3, 4, 4])).unwrap();
    assert!(s.all_zero);
    assert_eq!(s.sparsity, 0.0);
}

fn mean_sparsity(task: Task, n: u64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let x = generate_scene(32, 32, &mut rng_for(5, "scene", i));
        let s = random_spec(task, &[15.0, 25.0, 50.0], &mut rng_for(5, task.name(), i));
        let y = apply_degradation(&x, &s).unwrap();
        let r = y.zip_map(&x, |a, b| a - b).unwrap();
        total += residual_spectrum_stats(&r).unwrap().sparsity;
    }
    total / n as f64
}

#[test]
fn structured_residuals_are_sparser_than_noise() {
    let noise = mean_sparsity(Task::Noise, 40);
    for task in [Task::Rain, Task::Blur, Task::Haze, Task::Lowlight] {
        let s = mean_sparsity(task, 40);
        assert!(s > noise + 0.15, "{task}: {s} vs noise {noise}");
    }
}

#[test]
fn rain_beats_noise_at_equal_energy() {
    for i in 0..40 {
        let x = generate_scene(32, 32, &mut rng_for(9, "scene", i));
        let rs = random_spec(Task::Rain, &[], &mut rng_for(9, "rain", i));
        let rain = apply_degradation(&x, &rs).unwrap().zip_map(&x, |a, b| a - b).unwrap();
        let energy = rain.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if energy == 0.0 {
            continue;
        }
        let mut noise = Tensor::zeros(rain.shape());
        let mut rng = rng_for(9, "white", i);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for v in noise.data_mut() {
            *v = normal.sample(&mut rng);
        }
        let scale = energy / noise.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let noise = noise.map(|v| v * scale);
        let (a, b) = (
            residual_spectrum_stats(&rain).unwrap().sparsity,
            residual_spectrum_stats(&noise).unwrap().sparsity,
        );
        assert!(a > b, "pair {i}: rain {a} <= noise {b}");
    }
}

#[test]
fn dataset_cardinality_and_balance() {
    let b = make_dataset(&GenerationConfig::new(vec![Task::Noise], 4, Pairing::Paired), 7).unwrap();
    assert_eq!(b.degraded.len(), 4);
    assert!(b.degraded.iter().all(|d| d.task == Task::Noise && d.clean_index.is_some()));
    let cfg = GenerationConfig::new(vec![Task::Noise, Task::Rain, Task::Haze], 30, Pairing::Paired);
    let b = make_dataset(&cfg, 3).unwrap();
    for t in [Task::Noise, Task::Rain, Task::Haze] {
        assert_eq!(b.count_for(t), 10);
    }
    assert_eq!(b.manifest.items.len(), 30);
}

#[test]
fn dataset_is_deterministic() {
    let cfg = GenerationConfig::new(vec![Task::Rain, Task::Blur], 6, Pairing::Unpaired);
    let a = make_dataset(&cfg, 21).unwrap();
    let b = make_dataset(&cfg, 21).unwrap();
    assert_eq!(a, b);
    assert!(a.degraded.iter().all(|d| d.clean_index.is_none()));
    let c = make_dataset(&cfg, 22).unwrap();
    assert_ne!(a.degraded[0].image, c.degraded[0].image);
}

#[test]
fn empty_inputs_are_contract_violations() {
    assert!(make_dataset(&GenerationConfig::new(vec![], 4, Pairing::Paired), 0).is_err());
    assert!(make_dataset(&GenerationConfig::new(vec![Task::Noise], 0, Pairing::Paired), 0).is_err());
    let cfg = GenerationConfig::new(vec![Task::Noise], 2, Pairing::Paired);
    assert!(matches!(make_dataset_from_clean(&cfg, vec![], 0), Err(Error::Contract(_))));
}

#[test]
fn png_folder_loader_crops() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::RgbImage::from_fn(10, 12, |x, y| image::Rgb([(x * 20) as u8, (y * 20) as u8, 7]));
    img.save(dir.path().join("a.png")).unwrap();
    let out = load_image_folder(dir.path(), 8, 8).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].shape(), &[3, 8, 8]);
    // crop origin (1, 2)
    assert!((out[0].data()[0] - 20.0 / 255.0).abs() < 1e-6);
    assert!((out[0].data()[64] - 40.0 / 255.0).abs() < 1e-6);
    assert!(load_image_folder(dir.path(), 16, 16).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_stay_in_unit_range_and_repeat(seed in any::<u64>(), t in 0usize..5) {
            let task = Task::ALL[t];
            let x = generate_scene(16, 16, &mut rng_for(seed, "scene", 0));
            let s = random_spec(task, &[15.0, 25.0, 50.0], &mut rng_for(seed, "spec", 0));
            let a = apply_degradation(&x, &s).unwrap();
            let b = apply_degradation(&x, &s).unwrap();
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a, b);
        }
    }
}
