//! Synthetic degradations, procedural clean scenes, labelled datasets and
//! Fourier statistics of degradation residuals.

mod dataset;
mod scene;
mod spectrum;

pub use dataset::{
    load_image_folder, make_dataset, make_dataset_from_clean, DatasetBundle, DegradedItem, GenerationConfig,
    Manifest, ManifestItem, Pairing,
};
pub use scene::generate_scene;
pub use spectrum::{analyze_residuals, residual_spectrum_stats, ResidualAnalysis, SpectrumStats, TaskSpectrum};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Noise,
    Rain,
    Haze,
    Blur,
    Lowlight,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Noise, Task::Rain, Task::Haze, Task::Blur, Task::Lowlight];

    pub fn name(self) -> &'static str {
        match self {
            Task::Noise => "noise",
            Task::Rain => "rain",
            Task::Haze => "haze",
            Task::Blur => "blur",
            Task::Lowlight => "lowlight",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::contract(format!("unknown task '{s}' (expected noise|rain|haze|blur|lowlight)")))
    }
}

/// Task-specific degradation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum DegradationParams {
    /// Additive Gaussian noise; `sigma` on the 0-255 scale.
    Noise { sigma: f64 },
    /// Bright anti-aliased streaks.
    Rain {
        streaks: usize,
        length: f64,
        angle_deg: f64,
        intensity: f64,
    },
    /// Homogeneous scattering `y = x t + A (1 - t)`.
    Haze { transmission: f64, airlight: f64 },
    /// Linear motion blur.
    Blur { length: f64, angle_deg: f64 },
    /// `y = gain * x^gamma`.
    Lowlight { gamma: f64, gain: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(flatten)]
    pub params: DegradationParams,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(params: DegradationParams, seed: u64) -> Self {
        DegradationSpec { params, seed }
    }

    pub fn task(&self) -> Task {
        match self.params {
            DegradationParams::Noise { .. } => Task::Noise,
            DegradationParams::Rain { .. } => Task::Rain,
            DegradationParams::Haze { .. } => Task::Haze,
            DegradationParams::Blur { .. } => Task::Blur,
            DegradationParams::Lowlight { .. } => Task::Lowlight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64, what: &str| -> Result<()> {
            ensure!(v.is_finite(), "{what} must be finite, got {v}");
            Ok(())
        };
        match self.params {
            DegradationParams::Noise { sigma } => {
                ensure!((0.0..=255.0).contains(&sigma), "noise sigma {sigma} outside [0, 255]");
            }
            DegradationParams::Rain {
                streaks,
                length,
                angle_deg,
                intensity,
            } => {
                ensure!(streaks <= 10_000, "rain streak count {streaks} too large");
                ensure!(length > 0.0 && length <= 1024.0, "rain length {length} outside (0, 1024]");
                finite(angle_deg, "rain angle")?;
                ensure!((0.0..=1.0).contains(&intensity), "rain intensity {intensity} outside [0, 1]");
            }
            DegradationParams::Haze { transmission, airlight } => {
                ensure!(
                    (0.0..=1.0).contains(&transmission),
                    "haze transmission {transmission} outside [0, 1]"
                );
                ensure!((0.0..=1.0).contains(&airlight), "haze airlight {airlight} outside [0, 1]");
            }
            DegradationParams::Blur { length, angle_deg } => {
                ensure!((1.0..=64.0).contains(&length), "blur length {length} outside [1, 64]");
                finite(angle_deg, "blur angle")?;
            }
            DegradationParams::Lowlight { gamma, gain } => {
                ensure!(gamma >= 1.0 && gamma.is_finite(), "lowlight gamma {gamma} must be >= 1");
                ensure!(gain > 0.0 && gain <= 1.0, "lowlight gain {gain} outside (0, 1]");
            }
        }
        Ok(())
    }
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::contract(format!("expected a CxHxW image, got {:?}", x.shape()))),
    }
}

/// Degrade a clean image. Output stays in `[0, 1]` and depends only on
/// `(x, spec)`.
pub fn apply_degradation(x: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = image_dims(x)?;
    ensure!(
        x.data().iter().all(|v| (0.0..=1.0).contains(v)),
        "clean image values must lie in [0, 1]"
    );
    let mut rng = crate::seed::rng_for(spec.seed, "degradation", 0);
    let y = match spec.params {
        DegradationParams::Noise { sigma } => {
            let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::contract(e.to_string()))?;
            let mut y = x.clone();
            for v in y.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            y
        }
        DegradationParams::Rain {
            streaks,
            length,
            angle_deg,
            intensity,
        } => {
            let map = rain_streaks(h, w, streaks, length, angle_deg, intensity, &mut rng);
            let mut y = x.clone();
            for ch in 0..c {
                for (v, s) in y.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&map) {
                    *v = (*v + s).clamp(0.0, 1.0);
                }
            }
            y
        }
        DegradationParams::Haze { transmission, airlight } => {
            x.map(|v| (v * transmission + airlight * (1.0 - transmission)).clamp(0.0, 1.0))
        }
        DegradationParams::Blur { length, angle_deg } => {
            let (kernel, k) = line_kernel(length, angle_deg);
            let mut y = Tensor::zeros(x.shape());
            for ch in 0..c {
                let src = &x.data()[ch * h * w..(ch + 1) * h * w];
                let dst = &mut y.data_mut()[ch * h * w..(ch + 1) * h * w];
                convolve_replicate(src, h, w, &kernel, k, dst);
            }
            y.clamp(0.0, 1.0)
        }
        DegradationParams::Lowlight { gamma, gain } => x.map(|v| (gain * v.powf(gamma)).clamp(0.0, 1.0)),
    };
    Ok(y)
}

/// Sum of Gaussian-profile line segments, one shared map for all channels.
fn rain_streaks(
    h: usize,
    w: usize,
    streaks: usize,
    length: f64,
    angle_deg: f64,
    intensity: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    const WIDTH: f64 = 0.6;
    let mut map = vec![0.0; h * w];
    for _ in 0..streaks {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let theta = (angle_deg + rng.gen_range(-6.0..6.0)).to_radians();
        let len = length * rng.gen_range(0.7..1.3);
        let amp = intensity * rng.gen_range(0.6..1.0);
        let (dx, dy) = (theta.cos() * len / 2.0, -theta.sin() * len / 2.0);
        let (x0, y0, x1, y1) = (cx - dx, cy - dy, cx + dx, cy + dy);
        let reach = 3.0 * WIDTH;
        let (lo_x, hi_x) = (x0.min(x1) - reach, x0.max(x1) + reach);
        let (lo_y, hi_y) = (y0.min(y1) - reach, y0.max(y1) + reach);
        let (seg_x, seg_y) = (x1 - x0, y1 - y0);
        let seg_len2 = (seg_x * seg_x + seg_y * seg_y).max(1e-12);
        for py in (lo_y.floor().max(0.0) as usize)..=(hi_y.ceil().min(h as f64 - 1.0).max(0.0) as usize) {
            for px in (lo_x.floor().max(0.0) as usize)..=(hi_x.ceil().min(w as f64 - 1.0).max(0.0) as usize) {
                let (qx, qy) = (px as f64 + 0.5, py as f64 + 0.5);
                let t = (((qx - x0) * seg_x + (qy - y0) * seg_y) / seg_len2).clamp(0.0, 1.0);
                let (ex, ey) = (qx - (x0 + t * seg_x), qy - (y0 + t * seg_y));
                let d2 = ex * ex + ey * ey;
                map[py * w + px] += amp * (-d2 / (2.0 * WIDTH * WIDTH)).exp();
            }
        }
    }
    map
}

/// Normalised anti-aliased line kernel; returns `(weights, side)`.
fn line_kernel(length: f64, angle_deg: f64) -> (Vec<f64>, usize) {
    let side = (length.ceil() as usize) | 1;
    let mut k = vec![0.0; side * side];
    let c = (side / 2) as f64;
    let theta = angle_deg.to_radians();
    let samples = (8.0 * length).ceil() as usize + 1;
    for i in 0..samples {
        let s = if samples == 1 {
            0.0
        } else {
            -(length - 1.0) / 2.0 + (length - 1.0) * i as f64 / (samples - 1) as f64
        };
        let (fx, fy) = (c + s * theta.cos(), c - s * theta.sin());
        let (ix, iy) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - ix, fy - iy);
        for (ox, oy, wgt) in [
            (0, 0, (1.0 - ax) * (1.0 - ay)),
            (1, 0, ax * (1.0 - ay)),
            (0, 1, (1.0 - ax) * ay),
            (1, 1, ax * ay),
        ] {
            let (xx, yy) = (ix as i64 + ox, iy as i64 + oy);
            if xx >= 0 && yy >= 0 && (xx as usize) < side && (yy as usize) < side {
                k[yy as usize * side + xx as usize] += wgt;
            }
        }
    }
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    (k, side)
}

fn convolve_replicate(src: &[f64], h: usize, w: usize, kernel: &[f64], k: usize, dst: &mut [f64]) {
    let r = (k / 2) as i64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k {
                let sy = (y as i64 + ky as i64 - r).clamp(0, h as i64 - 1) as usize;
                for kx in 0..k {
                    let wgt = kernel[ky * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let sx = (x as i64 + kx as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += wgt * src[sy * w + sx];
                }
            }
            dst[y * w + x] = acc;
        }
    }
}

/// Draw a random, valid spec for `task`. Noise levels are drawn from
/// `noise_sigmas`.
pub fn random_spec(task: Task, noise_sigmas: &[f64], rng: &mut impl Rng) -> DegradationSpec {
    let params = match task {
        Task::Noise => DegradationParams::Noise {
            sigma: if noise_sigmas.is_empty() {
                25.0
            } else {
                noise_sigmas[rng.gen_range(0..noise_sigmas.len())]
            },
        },
        Task::Rain => DegradationParams::Rain {
            streaks: rng.gen_range(12..=28),
            length: rng.gen_range(5.0..11.0),
            angle_deg: rng.gen_range(65.0..115.0),
            intensity: rng.gen_range(0.45..0.8),
        },
        Task::Haze => DegradationParams::Haze {
            transmission: rng.gen_range(0.45..0.8),
            airlight: rng.gen_range(0.75..1.0),
        },
        Task::Blur => DegradationParams::Blur {
            length: rng.gen_range(3.0..7.0),
            angle_deg: rng.gen_range(0.0..180.0),
        },
        Task::Lowlight => DegradationParams::Lowlight {
            gamma: rng.gen_range(1.5..2.5),
            gain: rng.gen_range(0.35..0.7),
        },
    };
    DegradationSpec::new(params, rng.gen())
}

#[cfg(test)]
mod tests;
