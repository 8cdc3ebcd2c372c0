use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{psnr, ssim};
use super::probe::{embedding_probe, ProbeResult, MIN_PER_CLASS};
use crate::degrade::{make_dataset, DatasetBundle, GenerationConfig, Pairing, Task};
use crate::error::{ensure, Error, Result};
use crate::io::{config_hash, ExperimentConfig};
use crate::nets::{Conditioning, DaRcot, ParamStore, PotentialNet, TransportModel};
use crate::objective::RegMode;
use crate::tensor::{Tape, Tensor};
use crate::train::{fit, BundleSource, Objective, StepMetrics, TrainerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// What the second pass is conditioned on.
    RecConditioning,
    /// Supervised L1 against paired/unpaired transport losses, with and
    /// without the task loss.
    LossVariants,
    /// Transport cost with and without the Fourier residual term.
    ResidualReg,
    /// Growing task queue: first task, first two, ...
    TaskCount,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rec_conditioning" => Ok(Suite::RecConditioning),
            "loss_variants" => Ok(Suite::LossVariants),
            "residual_reg" => Ok(Suite::ResidualReg),
            "task_count" => Ok(Suite::TaskCount),
            _ => Err(Error::contract(format!(
                "unknown suite '{s}' (expected rec_conditioning|loss_variants|residual_reg|task_count)"
            ))),
        }
    }
}

/// One ablation arm: a named variant of the base experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: ExperimentConfig,
}

fn arm(name: &str, base: &ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig)) -> Arm {
    let mut config = base.clone();
    edit(&mut config);
    Arm {
        name: name.to_string(),
        config,
    }
}

fn set_pairing(c: &mut ExperimentConfig, p: Pairing) {
    c.data.pairing = p;
    c.train.mode = p;
}

/// The arms of `suite`, first arm being the reference for deltas.
pub fn suite_arms(suite: Suite, base: &ExperimentConfig) -> Vec<Arm> {
    let with_g = if base.train.cost.residual_reg_mode == RegMode::Off {
        RegMode::FourierL1
    } else {
        base.train.cost.residual_reg_mode
    };
    let gamma = base.train.cost.gamma_task;
    match suite {
        Suite::RecConditioning => [
            ("none", Conditioning::None),
            ("x0", Conditioning::X0),
            ("r0", Conditioning::R0),
            ("r1_r3", Conditioning::Full),
        ]
        .iter()
        .map(|&(n, c)| arm(n, base, |x| x.net.conditioning = c))
        .collect(),
        Suite::LossVariants => vec![
            arm("l1_only", base, |c| {
                set_pairing(c, Pairing::Paired);
                c.train.objective = Objective::L1Only;
                c.train.cost.gamma_task = 0.0;
            }),
            arm("l_p", base, |c| {
                set_pairing(c, Pairing::Paired);
                c.train.objective = Objective::Transport;
                c.train.cost.gamma_task = 0.0;
            }),
            arm("l_p+l_task", base, |c| {
                set_pairing(c, Pairing::Paired);
                c.train.objective = Objective::Transport;
                c.train.cost.gamma_task = gamma;
            }),
            arm("l_u", base, |c| {
                set_pairing(c, Pairing::Unpaired);
                c.train.objective = Objective::Transport;
                c.train.cost.gamma_task = 0.0;
            }),
            arm("l_u+l_task", base, |c| {
                set_pairing(c, Pairing::Unpaired);
                c.train.objective = Objective::Transport;
                c.train.cost.gamma_task = gamma;
            }),
        ],
        Suite::ResidualReg => vec![
            arm("without_g", base, |c| c.train.cost.residual_reg_mode = RegMode::Off),
            arm("with_g", base, |c| c.train.cost.residual_reg_mode = with_g),
        ],
        Suite::TaskCount => (1..=base.data.tasks.len())
            .map(|k| {
                arm(&format!("tasks_{k}"), base, |c| {
                    c.data.tasks.truncate(k);
                })
            })
            .collect(),
    }
}

pub fn build_models(cfg: &ExperimentConfig) -> (DaRcot, PotentialNet) {
    (DaRcot::new(cfg.net.clone()), PotentialNet::new(cfg.net.potential_channels))
}

/// Generate the training data and run the trainer.
pub fn train_experiment(cfg: &ExperimentConfig) -> Result<(TrainerState, Vec<StepMetrics>)> {
    cfg.validate()?;
    let data = make_dataset(&cfg.data, cfg.data_seed)?;
    let (model, potential) = build_models(cfg);
    let source = BundleSource::new(&data)?;
    let out = fit(&cfg.train, &model, &potential, &source)?;
    Ok((out.state, out.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the degraded input itself.
    pub input_psnr: f64,
    pub input_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub per_task: BTreeMap<Task, TaskScores>,
    /// Means over tasks of the per-task entries.
    pub avg_psnr: f64,
    pub avg_ssim: f64,
    pub avg_input_psnr: f64,
    pub avg_input_ssim: f64,
}

/// The held-out paired set every arm of an experiment is scored on.
fn eval_set(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let gen = GenerationConfig {
        tasks: cfg.data.tasks.clone(),
        count: cfg.eval.per_task * cfg.data.tasks.len(),
        pairing: Pairing::Paired,
        ..cfg.data.clone()
    };
    make_dataset(&gen, cfg.eval.seed)
}

const EVAL_CHUNK: usize = 8;

/// Restored images (clamped to `[0, 1]`) and pooled task embeddings.
fn restore_all(model: &dyn TransportModel, theta: &ParamStore, ys: &[Tensor]) -> Result<(Vec<Tensor>, Option<Vec<Vec<f64>>>)> {
    let mut restored = Vec::with_capacity(ys.len());
    let mut embs: Option<Vec<Vec<f64>>> = None;
    for chunk in ys.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let p = theta.bind(&tape, false)?;
        let y = tape.constant(Tensor::stack(chunk)?)?;
        let out = model.forward(&tape, &p, y)?;
        let x = tape.value(out.restored);
        for i in 0..chunk.len() {
            restored.push(x.index_first(i)?.clamp(0.0, 1.0));
        }
        if let Some(e) = out.task_embedding {
            let e = tape.value(e);
            let d = e.shape()[1];
            let list = embs.get_or_insert_with(Vec::new);
            for i in 0..chunk.len() {
                list.push(e.data()[i * d..(i + 1) * d].to_vec());
            }
        }
    }
    Ok((restored, embs))
}

/// PSNR/SSIM of a trained map on the held-out set, plus the linear probe
/// on pooled `R1` when the model produces task embeddings.
pub fn evaluate_state(cfg: &ExperimentConfig, theta: &ParamStore) -> Result<(ModelEval, Option<ProbeResult>)> {
    let data = eval_set(cfg)?;
    let (model, _) = build_models(cfg);
    let ys: Vec<Tensor> = data.degraded.iter().map(|d| d.image.clone()).collect();
    let (restored, embs) = restore_all(&model, theta, &ys)?;

    let mut acc: BTreeMap<Task, [f64; 5]> = BTreeMap::new();
    for (i, item) in data.degraded.iter().enumerate() {
        let x = data.target(i).ok_or_else(|| Error::contract("evaluation set must be paired"))?;
        let e = acc.entry(item.task).or_insert([0.0; 5]);
        e[0] += 1.0;
        e[1] += psnr(&restored[i], x, 1.0)?;
        e[2] += ssim(&restored[i], x)?;
        e[3] += psnr(&item.image, x, 1.0)?;
        e[4] += ssim(&item.image, x)?;
    }
    let per_task: BTreeMap<Task, TaskScores> = acc
        .into_iter()
        .map(|(t, [n, p, s, ip, is])| {
            (
                t,
                TaskScores {
                    count: n as usize,
                    psnr: p / n,
                    ssim: s / n,
                    input_psnr: ip / n,
                    input_ssim: is / n,
                },
            )
        })
        .collect();
    let k = per_task.len() as f64;
    let mean = |f: fn(&TaskScores) -> f64| per_task.values().map(f).sum::<f64>() / k;
    let eval = ModelEval {
        avg_psnr: mean(|s| s.psnr),
        avg_ssim: mean(|s| s.ssim),
        avg_input_psnr: mean(|s| s.input_psnr),
        avg_input_ssim: mean(|s| s.input_ssim),
        per_task,
    };

    let probe = match embs {
        Some(e) if cfg.data.tasks.len() >= 2 && cfg.eval.per_task >= MIN_PER_CLASS => {
            let labels: Vec<usize> = data
                .degraded
                .iter()
                .map(|d| cfg.data.tasks.iter().position(|&t| t == d.task).expect("eval task in config"))
                .collect();
            Some(embedding_probe(&e, &labels, cfg.eval.seed)?)
        }
        _ => None,
    };
    Ok((eval, probe))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub eval: ModelEval,
    pub probe: Option<ProbeResult>,
    /// Last logged training metrics, if any steps ran.
    pub final_metrics: Option<StepMetrics>,
}

/// Train and evaluate one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (state, log) = train_experiment(cfg)?;
    let (eval, probe) = evaluate_state(cfg, &state.theta)?;
    Ok(RunReport {
        seed: cfg.train.seed,
        config_hash: config_hash(cfg)?,
        eval,
        probe,
        final_metrics: log.last().cloned(),
    })
}

/// Finished runs keyed by config hash, so arms shared between suites (or
/// repeated within one) train once.
pub type ArmCache = BTreeMap<String, RunReport>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub runs: Vec<RunReport>,
    /// Seed-averaged scores.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: f64,
    /// `mean_psnr` minus that of the suite's reference (first) arm.
    pub delta_psnr: f64,
    pub delta_ssim: f64,
    pub mean_probe_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: Option<Suite>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub arms: Vec<ArmReport>,
}

impl EvalReport {
    /// Report for a single trained model.
    pub fn single(cfg: &ExperimentConfig, run: RunReport) -> Result<Self> {
        Ok(EvalReport {
            suite: None,
            seeds: vec![run.seed],
            config_hash: config_hash(cfg)?,
            arms: vec![summarize("model", vec![run], None)],
        })
    }

    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// One row per arm: per-task PSNR/SSIM, then averages and deltas.
    pub fn to_csv(&self) -> String {
        let mut tasks: Vec<Task> = Vec::new();
        for a in &self.arms {
            for r in &a.runs {
                for t in r.eval.per_task.keys() {
                    if !tasks.contains(t) {
                        tasks.push(*t);
                    }
                }
            }
        }
        tasks.sort();
        let mut out = String::from("arm");
        for t in &tasks {
            let _ = write!(out, ",{0}_psnr,{0}_ssim", t.name());
        }
        out.push_str(",avg_psnr,avg_ssim,delta_psnr,delta_ssim\n");
        for a in &self.arms {
            out.push_str(&a.name);
            for t in &tasks {
                let vals: Vec<&TaskScores> = a.runs.iter().filter_map(|r| r.eval.per_task.get(t)).collect();
                if vals.is_empty() {
                    out.push_str(",,");
                } else {
                    let n = vals.len() as f64;
                    let p = vals.iter().map(|s| s.psnr).sum::<f64>() / n;
                    let s = vals.iter().map(|s| s.ssim).sum::<f64>() / n;
                    let _ = write!(out, ",{p:.4},{s:.4}");
                }
            }
            let _ = writeln!(
                out,
                ",{:.4},{:.4},{:.4},{:.4}",
                a.mean_psnr, a.mean_ssim, a.delta_psnr, a.delta_ssim
            );
        }
        out
    }
}

fn summarize(name: &str, runs: Vec<RunReport>, reference: Option<(f64, f64)>) -> ArmReport {
    let n = runs.len() as f64;
    let mean_psnr = runs.iter().map(|r| r.eval.avg_psnr).sum::<f64>() / n;
    let mean_ssim = runs.iter().map(|r| r.eval.avg_ssim).sum::<f64>() / n;
    let mean_input_psnr = runs.iter().map(|r| r.eval.avg_input_psnr).sum::<f64>() / n;
    let probes: Vec<f64> = runs.iter().filter_map(|r| r.probe.as_ref().map(|p| p.accuracy)).collect();
    let (rp, rs) = reference.unwrap_or((mean_psnr, mean_ssim));
    ArmReport {
        name: name.to_string(),
        mean_probe_accuracy: (probes.len() == runs.len() && !probes.is_empty())
            .then(|| probes.iter().sum::<f64>() / probes.len() as f64),
        runs,
        mean_psnr,
        mean_ssim,
        mean_input_psnr,
        delta_psnr: mean_psnr - rp,
        delta_ssim: mean_ssim - rs,
    }
}

/// Train every arm of `suite` (optionally only those named in `only`) for
/// each seed, with seed `s` driving both the training data and the
/// trainer. Runs already in `cache` are reused.
pub fn run_ablation(
    suite: Suite,
    base: &ExperimentConfig,
    seeds: &[u64],
    only: Option<&[&str]>,
    cache: &mut ArmCache,
) -> Result<EvalReport> {
    ensure!(!seeds.is_empty(), "run_ablation: no seeds");
    base.validate()?;
    let mut arms = suite_arms(suite, base);
    if let Some(names) = only {
        for n in names {
            ensure!(arms.iter().any(|a| a.name == *n), "suite {suite:?} has no arm '{n}'");
        }
        arms.retain(|a| names.contains(&a.name.as_str()));
    }
    let mut reports = Vec::with_capacity(arms.len());
    let mut reference = None;
    for a in &arms {
        let mut runs = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let mut cfg = a.config.clone();
            cfg.train.seed = s;
            cfg.data_seed = s;
            let key = config_hash(&cfg)?;
            let run = match cache.get(&key) {
                Some(r) => r.clone(),
                None => {
                    log::info!("ablation {suite:?}: arm '{}' seed {s}", a.name);
                    let r = run_experiment(&cfg)?;
                    cache.insert(key, r.clone());
                    r
                }
            };
            runs.push(run);
        }
        let rep = summarize(&a.name, runs, reference);
        reference.get_or_insert((rep.mean_psnr, rep.mean_ssim));
        reports.push(rep);
    }
    Ok(EvalReport {
        suite: Some(suite),
        seeds: seeds.to_vec(),
        config_hash: config_hash(base)?,
        arms: reports,
    })
}
