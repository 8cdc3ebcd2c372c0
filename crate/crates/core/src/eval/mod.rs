//! Image quality metrics, the linear embedding probe, and ablation runs
//! that train and score model variants under identical seeds and budgets.

mod ablation;
mod gaussian;
mod metrics;
mod probe;

pub use ablation::{
    build_models, evaluate_state, run_ablation, run_experiment, suite_arms, train_experiment, Arm, ArmCache, ArmReport,
    EvalReport, ModelEval, RunReport, Suite, TaskScores,
};
pub use gaussian::{gaussian_transport_run, GaussianRunConfig, GaussianRunReport};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use probe::{embedding_probe, ProbeResult, MIN_PER_CLASS};
