//! Binary tensor files, checkpoints, dataset bundles on disk and JSON
//! experiment configs. Every write goes to a temporary sibling first and is
//! renamed into place.

mod tensor_file;

pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor, DType};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{DatasetBundle, DegradedItem, GenerationConfig, Manifest};
use crate::error::{ensure, Error, Result};
use crate::nets::{NetConfig, ParamStore};
use crate::train::{RmsProp, StepMetrics, TrainConfig, TrainerState};

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let res = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Line-delimited JSON metrics log.
pub fn metrics_jsonl(log: &[StepMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in log {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<StepMetrics>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Evaluation settings of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out degraded items per task.
    pub per_task: usize,
    /// Seed of the held-out set; distinct from the training data seed.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { per_task: 16, seed: 1_000_003 }
    }
}

/// Everything a run needs, as one JSON document. Unknown keys are rejected
/// at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: GenerationConfig,
    /// Seed of the training dataset.
    pub data_seed: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: GenerationConfig::new(
                vec![crate::degrade::Task::Noise, crate::degrade::Task::Rain, crate::degrade::Task::Haze],
                96,
                crate::degrade::Pairing::Paired,
            ),
            data_seed: 0,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::contract(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        ensure!(self.eval.per_task > 0, "eval.per_task must be positive");
        ensure!(
            self.data.pairing == self.train.mode,
            "data.pairing ({:?}) and train.mode ({:?}) disagree",
            self.data.pairing,
            self.train.mode
        );
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Keys that only affect logging and never the numbers a run produces.
const NON_SEMANTIC_KEYS: [&str; 3] = ["log_every", "checkpoint_every", "log_wall_time"];

fn strip_non_semantic(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            for k in NON_SEMANTIC_KEYS {
                map.remove(k);
            }
            map.values_mut().for_each(strip_non_semantic);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_non_semantic),
        _ => {}
    }
}

/// SHA-256 (hex) of the canonical JSON form of `cfg`, ignoring logging-only
/// fields.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let mut v = serde_json::to_value(cfg)?;
    strip_non_semantic(&mut v);
    // serde_json's default map is ordered, so this form is canonical
    let bytes = serde_json::to_vec(&v)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Byte offset of the tensor record, relative to the end of the header.
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: u64,
    pub phi_updates: u64,
    pub t_updates: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 4] = ["theta", "omega", "opt_theta", "opt_omega"];

fn groups(state: &TrainerState) -> [&ParamStore; 4] {
    [&state.theta, &state.omega, &state.opt_theta.v, &state.opt_omega.v]
}

/// Layout: `"DCKP"`, header length (u64 LE), JSON header, then one f64
/// tensor record per named tensor (`theta/…`, `omega/…`, `opt_theta/…`,
/// `opt_omega/…`).
pub fn encode_checkpoint(state: &TrainerState, config_hash: &str) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for (group, store) in GROUPS.iter().zip(groups(state)) {
        for (name, t) in store.iter() {
            let rec = encode_tensor(t, DType::F64)?;
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                offset: blobs.len() as u64,
                len: rec.len() as u64,
            });
            blobs.extend_from_slice(&rec);
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        step: state.step,
        phi_updates: state.phi_updates,
        t_updates: state.t_updates,
        config_hash: config_hash.to_string(),
        tensors,
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + hjson.len() + blobs.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainerState, CheckpointHeader)> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint: bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(12..)
        .filter(|b| b.len() >= hlen)
        .ok_or_else(|| Error::format("checkpoint: truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(format!("checkpoint: header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint: format_version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let blobs = &body[hlen..];
    let mut stores: [ParamStore; 4] = Default::default();
    for e in &header.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        let rec = blobs
            .get(start..end)
            .ok_or_else(|| Error::format(format!("checkpoint: tensor '{}' out of bounds", e.name)))?;
        let (t, used) = decode_tensor(rec).map_err(|err| Error::format(format!("checkpoint: '{}': {err}", e.name)))?;
        if used != rec.len() {
            return Err(Error::format(format!("checkpoint: tensor '{}' has trailing bytes", e.name)));
        }
        let (group, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| Error::format(format!("checkpoint: bad tensor name '{}'", e.name)))?;
        let gi = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| Error::format(format!("checkpoint: unknown group '{group}'")))?;
        stores[gi].insert(name, t);
    }
    let [theta, omega, vt, vo] = stores;
    let state = TrainerState {
        theta,
        omega,
        opt_theta: RmsProp { v: vt },
        opt_omega: RmsProp { v: vo },
        step: header.step,
        phi_updates: header.phi_updates,
        t_updates: header.t_updates,
    };
    Ok((state, header))
}

pub fn save_checkpoint(path: &Path, state: &TrainerState, config_hash: &str) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state, config_hash)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainerState, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Check that a loaded state has exactly the parameters a fresh model would.
pub fn check_state_matches(state: &TrainerState, fresh: &TrainerState) -> Result<()> {
    for (what, a, b) in [("theta", &state.theta, &fresh.theta), ("omega", &state.omega, &fresh.omega)] {
        let names_a: Vec<(&String, &[usize])> = a.iter().map(|(n, t)| (n, t.shape())).collect();
        let names_b: Vec<(&String, &[usize])> = b.iter().map(|(n, t)| (n, t.shape())).collect();
        ensure!(
            names_a == names_b,
            "checkpoint {what} parameters do not match the configured model"
        );
    }
    Ok(())
}

/// Write `manifest.json` plus one f32 tensor file per image under `dir`.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    for (t, f) in bundle.clean_pool.iter().zip(&bundle.manifest.clean_files) {
        write_tensor(&dir.join(f), t, DType::F32)?;
    }
    for (item, m) in bundle.degraded.iter().zip(&bundle.manifest.items) {
        write_tensor(&dir.join(&m.file), &item.image, DType::F32)?;
    }
    write_json(&dir.join("manifest.json"), &bundle.manifest)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let clean_pool = manifest
        .clean_files
        .iter()
        .map(|f| read_tensor(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let mut degraded = Vec::with_capacity(manifest.items.len());
    for m in &manifest.items {
        if let Some(c) = m.clean_index {
            ensure!(c < clean_pool.len(), "manifest item {} points at missing clean image {c}", m.id);
        }
        degraded.push(DegradedItem {
            image: read_tensor(&dir.join(&m.file))?,
            task: m.task,
            spec: m.spec.clone(),
            clean_index: m.clean_index,
        });
    }
    Ok(DatasetBundle {
        clean_pool,
        degraded,
        pairing: manifest.pairing,
        manifest,
    })
}

#[cfg(test)]
mod tests;
