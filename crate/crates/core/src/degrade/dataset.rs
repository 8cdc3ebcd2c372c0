use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{apply_degradation, generate_scene, random_spec, DegradationSpec, Task};
use crate::error::{ensure, Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    Paired,
    Unpaired,
}

impl std::str::FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Pairing::Paired),
            "unpaired" => Ok(Pairing::Unpaired),
            _ => Err(Error::contract(format!("unknown mode '{s}' (expected paired|unpaired)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub tasks: Vec<Task>,
    pub count: usize,
    pub pairing: Pairing,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    /// Noise levels (0-255 scale) drawn uniformly per noisy item.
    #[serde(default = "default_sigmas")]
    pub noise_sigmas: Vec<f64>,
}

fn default_size() -> usize {
    32
}

fn default_sigmas() -> Vec<f64> {
    vec![15.0, 25.0, 50.0]
}

impl GenerationConfig {
    pub fn new(tasks: Vec<Task>, count: usize, pairing: Pairing) -> Self {
        GenerationConfig {
            tasks,
            count,
            pairing,
            height: default_size(),
            width: default_size(),
            noise_sigmas: default_sigmas(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.tasks.is_empty(), "dataset config enables no task");
        ensure!(self.count > 0, "dataset config asks for zero items");
        ensure!(
            self.height > 0 && self.width > 0,
            "dataset image size {}x{} is empty",
            self.height,
            self.width
        );
        ensure!(
            self.noise_sigmas.iter().all(|s| (0.0..=255.0).contains(s)),
            "noise levels must lie in [0, 255]"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradedItem {
    pub image: Tensor,
    pub task: Task,
    pub spec: DegradationSpec,
    /// Ground-truth index into the clean pool (paired mode only).
    pub clean_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub task: Task,
    pub spec: DegradationSpec,
    pub seed: u64,
    pub clean_index: Option<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub pairing: Pairing,
    pub height: usize,
    pub width: usize,
    pub tasks: Vec<Task>,
    pub clean_files: Vec<String>,
    pub items: Vec<ManifestItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub clean_pool: Vec<Tensor>,
    pub degraded: Vec<DegradedItem>,
    pub pairing: Pairing,
    pub manifest: Manifest,
}

impl DatasetBundle {
    pub fn tasks(&self) -> Vec<Task> {
        self.manifest.tasks.clone()
    }

    pub fn count_for(&self, task: Task) -> usize {
        self.degraded.iter().filter(|d| d.task == task).count()
    }

    /// Ground truth of degraded item `i`, if paired.
    pub fn target(&self, i: usize) -> Option<&Tensor> {
        self.degraded[i].clean_index.map(|j| &self.clean_pool[j])
    }

    /// Keep only items whose task is in `tasks`; clean pool is untouched.
    pub fn filter_tasks(&self, tasks: &[Task]) -> Result<DatasetBundle> {
        let mut out = self.clone();
        out.degraded.retain(|d| tasks.contains(&d.task));
        out.manifest.items.retain(|m| tasks.contains(&m.task));
        out.manifest.tasks.retain(|t| tasks.contains(t));
        ensure!(!out.degraded.is_empty(), "no items left after filtering to tasks {:?}", tasks);
        Ok(out)
    }
}

/// Procedural dataset. Item `i` gets task `tasks[i % tasks.len()]`, so
/// per-task counts differ by at most one. In unpaired mode the degraded
/// items come from a disjoint set of hidden scenes.
pub fn make_dataset(config: &GenerationConfig, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let clean: Vec<Tensor> = (0..config.count as u64)
        .map(|i| generate_scene(h, w, &mut rng_for(seed, "scene", i)))
        .collect();
    let sources = match config.pairing {
        Pairing::Paired => None,
        Pairing::Unpaired => Some(
            (0..config.count as u64)
                .map(|i| generate_scene(h, w, &mut rng_for(seed, "hidden-scene", i)))
                .collect::<Vec<_>>(),
        ),
    };
    assemble(config, clean, sources, seed)
}

/// Same as [`make_dataset`] but degrading user-supplied clean images
/// (recycled cyclically). Unpaired mode splits them into two halves.
pub fn make_dataset_from_clean(config: &GenerationConfig, clean: Vec<Tensor>, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    ensure!(!clean.is_empty(), "clean image pool is empty");
    for c in &clean {
        ensure!(
            c.shape() == [3, config.height, config.width],
            "clean image shape {:?} does not match config {}x{}",
            c.shape(),
            config.height,
            config.width
        );
    }
    match config.pairing {
        Pairing::Paired => assemble(config, clean, None, seed),
        Pairing::Unpaired => {
            ensure!(clean.len() >= 2, "unpaired mode needs at least two clean images");
            let mut clean = clean;
            let hidden = clean.split_off(clean.len() / 2);
            assemble(config, clean, Some(hidden), seed)
        }
    }
}

fn assemble(
    config: &GenerationConfig,
    clean: Vec<Tensor>,
    sources: Option<Vec<Tensor>>,
    seed: u64,
) -> Result<DatasetBundle> {
    let mut degraded = Vec::with_capacity(config.count);
    let mut items = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let task = config.tasks[i % config.tasks.len()];
        let spec = random_spec(task, &config.noise_sigmas, &mut rng_for(seed, "spec", i as u64));
        let (src, clean_index) = match &sources {
            None => (&clean[i % clean.len()], Some(i % clean.len())),
            Some(s) => (&s[i % s.len()], None),
        };
        let image = apply_degradation(src, &spec)?.round_to_f32();
        let id = format!("item_{i:05}");
        items.push(ManifestItem {
            file: format!("degraded/{id}.frtn"),
            id,
            task,
            seed: spec.seed,
            spec: spec.clone(),
            clean_index,
        });
        degraded.push(DegradedItem {
            image,
            task,
            spec,
            clean_index,
        });
    }
    let manifest = Manifest {
        seed,
        pairing: config.pairing,
        height: config.height,
        width: config.width,
        tasks: config.tasks.clone(),
        clean_files: (0..clean.len()).map(|j| format!("clean/clean_{j:05}.frtn")).collect(),
        items,
    };
    Ok(DatasetBundle {
        clean_pool: clean,
        degraded,
        pairing: config.pairing,
        manifest,
    })
}

/// Load every PNG in `dir` (sorted by name), centre-cropped to `h x w`.
pub fn load_image_folder(dir: &Path, h: usize, w: usize) -> Result<Vec<Tensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let img = image::open(&p)
            .map_err(|e| Error::format(format!("{}: {e}", p.display())))?
            .to_rgb8();
        let (iw, ih) = (img.width() as usize, img.height() as usize);
        ensure!(
            iw >= w && ih >= h,
            "{} is {iw}x{ih}, smaller than the {w}x{h} crop",
            p.display()
        );
        let (x0, y0) = ((iw - w) / 2, (ih - h) / 2);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel((x0 + x) as u32, (y0 + y) as u32);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = px[c] as f64 / 255.0;
                }
            }
        }
        out.push(Tensor::new(vec![3, h, w], data)?.round_to_f32());
    }
    ensure!(!out.is_empty(), "no PNG images found in {}", dir.display());
    Ok(out)
}
