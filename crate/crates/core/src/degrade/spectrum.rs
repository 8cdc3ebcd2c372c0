use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::kernels::fft2_real;
use crate::tensor::Tensor;

/// Log-spaced histogram range for DFT magnitudes.
const HIST_LO: f64 = 1e-4;
const HIST_HI: f64 = 1e4;
const HIST_BINS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    /// `HIST_BINS + 1` log-spaced edges; values outside land in the end bins.
    pub bin_edges: Vec<f64>,
    /// Per-bin counts averaged over channels.
    pub counts: Vec<f64>,
    /// `1 - |F|_1 / (sqrt(HW) |F|_2)`, averaged over channels with energy.
    pub sparsity: f64,
    /// Set when the residual is identically zero (sparsity reported as 0).
    pub all_zero: bool,
}

/// Fourier magnitude histogram and sparsity of a residual image
/// (`CxHxW` or `HxW`).
pub fn residual_spectrum_stats(r: &Tensor) -> Result<SpectrumStats> {
    let (c, h, w) = match *r.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => (0, 0, 0),
    };
    ensure!(c > 0 && h > 0 && w > 0, "residual_spectrum_stats: expected HxW or CxHxW, got {:?}", r.shape());
    r.check_finite("residual_spectrum_stats")?;

    let log_lo = HIST_LO.log10();
    let step = (HIST_HI.log10() - log_lo) / HIST_BINS as f64;
    let bin_edges: Vec<f64> = (0..=HIST_BINS).map(|i| 10f64.powf(log_lo + step * i as f64)).collect();
    let mut counts = vec![0.0; HIST_BINS];
    let n = (h * w) as f64;
    let mut sparsity_sum = 0.0;
    let mut active = 0usize;
    for plane in r.data().chunks(h * w) {
        let spec = fft2_real(plane, h, w);
        let (mut l1, mut l2sq) = (0.0, 0.0);
        for z in &spec {
            let m = z.norm();
            l1 += m;
            l2sq += m * m;
            let bin = if m <= HIST_LO {
                0
            } else {
                (((m.log10() - log_lo) / step).floor() as usize).min(HIST_BINS - 1)
            };
            counts[bin] += 1.0 / c as f64;
        }
        if l2sq > 0.0 {
            sparsity_sum += (1.0 - l1 / (n.sqrt() * l2sq.sqrt())).clamp(0.0, 1.0);
            active += 1;
        }
    }
    let all_zero = active == 0;
    Ok(SpectrumStats {
        bin_edges,
        counts,
        sparsity: if all_zero { 0.0 } else { sparsity_sum / active as f64 },
        all_zero,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpectrum {
    pub task: super::Task,
    pub pairs: usize,
    pub mean_sparsity: f64,
    /// Histogram counts averaged over pairs.
    pub mean_counts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualAnalysis {
    pub bin_edges: Vec<f64>,
    pub tasks: Vec<TaskSpectrum>,
}

/// Spectrum statistics of `y - x` over `pairs` synthetic pairs per task.
pub fn analyze_residuals(tasks: &[super::Task], pairs: usize, config: &super::GenerationConfig, seed: u64) -> Result<ResidualAnalysis> {
    ensure!(!tasks.is_empty() && pairs > 0, "analyze_residuals: need at least one task and one pair");
    let mut cfg = config.clone();
    cfg.tasks = tasks.to_vec();
    cfg.count = pairs * tasks.len();
    cfg.pairing = super::Pairing::Paired;
    let data = super::make_dataset(&cfg, seed)?;
    let mut bin_edges = Vec::new();
    let mut out = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let mut counts = vec![0.0; HIST_BINS];
        let (mut total, mut n) = (0.0, 0usize);
        for (i, item) in data.degraded.iter().enumerate().filter(|(_, d)| d.task == task) {
            let x = data.target(i).expect("paired dataset");
            let s = residual_spectrum_stats(&item.image.zip_map(x, |a, b| a - b)?)?;
            total += s.sparsity;
            counts.iter_mut().zip(&s.counts).for_each(|(a, b)| *a += b);
            bin_edges = s.bin_edges;
            n += 1;
        }
        out.push(TaskSpectrum {
            task,
            pairs: n,
            mean_sparsity: total / n as f64,
            mean_counts: counts.into_iter().map(|c| c / n as f64).collect(),
        });
    }
    Ok(ResidualAnalysis { bin_edges, tasks: out })
}
