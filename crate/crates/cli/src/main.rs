use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use darcot::degrade::{analyze_residuals, load_image_folder, make_dataset, make_dataset_from_clean, Pairing, Task};
use darcot::eval::{
    build_models, evaluate_state, gaussian_transport_run, run_ablation, ArmCache, EvalReport, GaussianRunConfig,
    RunReport, Suite,
};
use darcot::gradsuite::gradient_suite;
use darcot::io::{
    load_bundle, load_checkpoint, metrics_jsonl, read_json, save_bundle, save_checkpoint, write_atomic, write_json,
    ExperimentConfig,
};
use darcot::train::{fit_with, BundleSource, FitHooks, StepMetrics, TrainerState};
use darcot::{Error, Result};

/// Gradient-check tolerance at f64.
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "darcot", version, about = "Residual-conditioned optimal transport for image restoration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Overrides shared by the experiment subcommands.
#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (JSON); defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the data and the trainer.
    #[arg(long)]
    seed: Option<u64>,
    /// paired | unpaired
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated task list, e.g. noise,rain,haze.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset bundle.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Total number of degraded items.
        #[arg(long)]
        count: Option<usize>,
        /// Degrade PNGs from this folder instead of procedural scenes.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on an existing bundle instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out synthetic set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output report (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fourier magnitude histograms and sparsity of degradation residuals.
    AnalyzeResidual {
        #[command(flatten)]
        common: Common,
        /// Pairs per task.
        #[arg(long, default_value_t = 40)]
        count: usize,
        /// Also write a bar chart of the histograms.
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op, block and loss.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a 1-D map between Gaussians and score it against the exact
    /// transport oracle.
    OtSanity {
        /// 1-D run config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every arm of an ablation suite.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// rec_conditioning | loss_variants | residual_reg | task_count
        #[arg(long)]
        suite: String,
        /// Comma-separated seeds (overrides --seed).
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated subset of arm names.
        #[arg(long)]
        arms: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_csv<T>(s: &str, what: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| Error::contract(format!("bad {what} '{p}': {e}"))))
        .collect()
}

fn experiment_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.data_seed = s;
        cfg.train.seed = s;
    }
    if let Some(m) = &c.mode {
        let m: Pairing = m.parse()?;
        cfg.data.pairing = m;
        cfg.train.mode = m;
    }
    if let Some(t) = &c.tasks {
        cfg.data.tasks = parse_csv::<Task>(t, "task")?;
    }
    if let Some(n) = c.steps {
        cfg.train.steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn synth_data(common: &Common, count: Option<usize>, images: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = experiment_config(common)?;
    if let Some(n) = count {
        cfg.data.count = n;
    }
    cfg.data.validate()?;
    let bundle = match images {
        Some(dir) => make_dataset_from_clean(&cfg.data, load_image_folder(dir, cfg.data.height, cfg.data.width)?, cfg.data_seed)?,
        None => make_dataset(&cfg.data, cfg.data_seed)?,
    };
    ensure_dir(out)?;
    save_bundle(out, &bundle)?;
    println!("wrote {} items to {}", bundle.degraded.len(), out.display());
    Ok(())
}

fn train(common: &Common, data: Option<&Path>, resume: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = experiment_config(common)?;
    let hash = cfg.hash()?;
    let bundle = match data {
        Some(dir) => load_bundle(dir)?,
        None => make_dataset(&cfg.data, cfg.data_seed)?,
    };
    if bundle.pairing != cfg.train.mode {
        return Err(Error::contract(format!(
            "bundle is {:?} but train.mode is {:?}",
            bundle.pairing, cfg.train.mode
        )));
    }
    let (model, potential) = build_models(&cfg);
    let fresh = TrainerState::init(&cfg.train, &model, &potential);
    let (state, mut log) = match resume {
        Some(p) => {
            let (state, header) = load_checkpoint(p)?;
            if header.config_hash != hash {
                return Err(Error::contract(format!(
                    "checkpoint {} was written for config {} but this run is {hash}",
                    p.display(),
                    header.config_hash
                )));
            }
            darcot::io::check_state_matches(&state, &fresh)?;
            let prior = out.join("metrics.jsonl");
            let log = match fs::read_to_string(&prior) {
                Ok(text) => darcot::io::parse_metrics_jsonl(&text)?
                    .into_iter()
                    .filter(|m| m.step <= state.step)
                    .collect(),
                Err(_) => Vec::new(),
            };
            (state, log)
        }
        None => (fresh, Vec::new()),
    };
    ensure_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let source = BundleSource::new(&bundle)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut pending: Vec<StepMetrics> = Vec::new();
    let mut on_metrics = |m: &StepMetrics| -> Result<()> {
        log::info!("step {} L_phi {:.4e} L_T {:.4e} L_task {:.4}", m.step, m.l_phi, m.l_t, m.l_task);
        pending.push(m.clone());
        Ok(())
    };
    let mut on_checkpoint = |s: &TrainerState| -> Result<()> {
        save_checkpoint(&out.join(format!("checkpoint_{:08}.bin", s.step)), s, &hash)?;
        save_checkpoint(&out.join("checkpoint.bin"), s, &hash)
    };
    let mut hooks = FitHooks {
        on_metrics: Some(&mut on_metrics),
        on_checkpoint: Some(&mut on_checkpoint),
    };
    let result = fit_with(&cfg.train, &model, &potential, &source, state, &mut hooks)?;
    drop(hooks);
    log.extend(pending);
    write_atomic(&metrics_path, metrics_jsonl(&log)?.as_bytes())?;
    println!("trained to step {} in {}", result.state.step, out.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = experiment_config(common)?;
    let (state, header) = load_checkpoint(checkpoint)?;
    let hash = cfg.hash()?;
    if header.config_hash != hash {
        return Err(Error::contract(format!(
            "checkpoint was written for config {} but the given config hashes to {hash}",
            header.config_hash
        )));
    }
    let (model, potential) = build_models(&cfg);
    darcot::io::check_state_matches(&state, &TrainerState::init(&cfg.train, &model, &potential))?;
    let (eval, probe) = evaluate_state(&cfg, &state.theta)?;
    let report = EvalReport::single(
        &cfg,
        RunReport {
            seed: cfg.train.seed,
            config_hash: hash,
            eval,
            probe,
            final_metrics: None,
        },
    )?;
    write_json(out, &report)?;
    println!("avg PSNR {:.3} dB, avg SSIM {:.4}", report.arms[0].mean_psnr, report.arms[0].mean_ssim);
    Ok(())
}

fn analyze_residual(common: &Common, count: usize, plot: bool, out: &Path) -> Result<()> {
    let mut cfg = experiment_config(common)?;
    if common.tasks.is_none() {
        cfg.data.tasks = vec![Task::Noise, Task::Rain, Task::Blur, Task::Haze, Task::Lowlight];
    }
    let analysis = analyze_residuals(&cfg.data.tasks, count, &cfg.data, cfg.data_seed)?;
    ensure_dir(out)?;
    write_json(&out.join("residual_spectrum.json"), &analysis)?;
    for t in &analysis.tasks {
        println!("{:9} sparsity {:.4} ({} pairs)", t.task.name(), t.mean_sparsity, t.pairs);
    }
    if plot {
        write_plot(&out.join("residual_spectrum.png"), &analysis)?;
    }
    Ok(())
}

/// One histogram panel per task, stacked vertically.
fn write_plot(path: &Path, a: &darcot::degrade::ResidualAnalysis) -> Result<()> {
    const BAR: u32 = 8;
    const PANEL: u32 = 80;
    let bins = a.bin_edges.len().saturating_sub(1) as u32;
    let (w, h) = (bins * BAR, PANEL * a.tasks.len() as u32);
    let mut img = image::RgbImage::from_pixel(w.max(1), h.max(1), image::Rgb([255, 255, 255]));
    for (k, t) in a.tasks.iter().enumerate() {
        let peak = t.mean_counts.iter().cloned().fold(0.0, f64::max).max(1e-12);
        for (b, &c) in t.mean_counts.iter().enumerate() {
            let bar = ((c / peak) * (PANEL - 4) as f64).round() as u32;
            for dx in 1..BAR - 1 {
                for dy in 0..bar {
                    let y = PANEL * (k as u32 + 1) - 1 - dy;
                    img.put_pixel(b as u32 * BAR + dx, y, image::Rgb([40, 80 + 30 * k as u8, 160]));
                }
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::format(format!("png encode: {e}")))?;
    write_atomic(path, &bytes)
}

fn grad_check(seed: u64, out: Option<&Path>) -> Result<()> {
    let rows = gradient_suite(seed)?;
    println!("{:48} {:>7} {:>12}", "case", "numel", "max_error");
    let mut failed = 0;
    for r in &rows {
        let ok = r.max_error < GRAD_TOL;
        failed += usize::from(!ok);
        println!("{:48} {:>7} {:>12.3e} {}", r.name, r.numel, r.max_error, if ok { "ok" } else { "FAIL" });
    }
    if let Some(p) = out {
        write_json(p, &rows)?;
    }
    if failed > 0 {
        return Err(Error::numeric(format!("{failed} gradient checks exceed {GRAD_TOL:e}")));
    }
    Ok(())
}

fn ot_sanity(config: Option<&Path>, seed: Option<u64>, steps: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg: GaussianRunConfig = match config {
        Some(p) => read_json(p).map_err(|e| Error::contract(format!("config: {e}")))?,
        None => GaussianRunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    let rep = gaussian_transport_run(&cfg)?;
    let s = &rep.saddle;
    println!(
        "primal {:.5} oracle {:.5} gap {:.5} ({:.2}%) dual {:.5} energy {:.4} max|T-T*| {:.4}",
        s.primal_cost,
        s.oracle_cost,
        s.gap,
        100.0 * s.relative_gap,
        s.dual_value,
        s.energy_distance,
        rep.max_map_error
    );
    if let Some(f) = &s.flagged {
        println!("flagged: {f}");
    }
    if let Some(p) = out {
        write_json(p, &rep)?;
    }
    Ok(())
}

fn ablate(common: &Common, suite: &str, seeds: Option<&str>, arms: Option<&str>, out: &Path) -> Result<()> {
    let cfg = experiment_config(common)?;
    let suite: Suite = suite.parse()?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => parse_csv(s, "seed")?,
        None => vec![common.seed.unwrap_or(cfg.train.seed)],
    };
    let names: Option<Vec<String>> = arms.map(|a| parse_csv(a, "arm")).transpose()?;
    let refs: Option<Vec<&str>> = names.as_ref().map(|v| v.iter().map(String::as_str).collect());
    ensure_dir(out)?;
    let cache_path = out.join("runs.json");
    let mut cache: ArmCache = if cache_path.exists() { read_json(&cache_path)? } else { ArmCache::new() };
    let report = run_ablation(suite, &cfg, &seeds, refs.as_deref(), &mut cache)?;
    write_json(&cache_path, &cache)?;
    write_json(&out.join("report.json"), &report)?;
    write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::SynthData { common, count, images, out } => synth_data(common, *count, images.as_deref(), out),
        Cmd::Train { common, data, resume, out } => train(common, data.as_deref(), resume.as_deref(), out),
        Cmd::Eval { common, checkpoint, out } => eval(common, checkpoint, out),
        Cmd::AnalyzeResidual { common, count, plot, out } => analyze_residual(common, *count, *plot, out),
        Cmd::GradCheck { seed, out } => grad_check(*seed, out.as_deref()),
        Cmd::OtSanity { config, seed, steps, out } => ot_sanity(config.as_deref(), *seed, *steps, out.as_deref()),
        Cmd::Ablate { common, suite, seeds, arms, out } => ablate(common, suite, seeds.as_deref(), arms.as_deref(), out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
