//! `<name>.manifest` (TOML) plus `<name>.params` (flat little-endian floats).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::alignment::write_file;
use crate::error::{Error, Result};
use crate::model::{Janus, ModelConfig};
use crate::numerics::Precision;
use crate::tasks::TaskKind;

pub const CHECKPOINT_FORMAT: &str = "janus-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the params file.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub format_version: u32,
    pub crate_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// `f32`, or `f64` for 64-bit runs.
    pub dtype: Precision,
    pub task: TaskKind,
    pub epoch: usize,
    pub dev_metric: f64,
    pub relations: Vec<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Vec<ParamEntry>,
}

impl CheckpointManifest {
    /// Errors unless `model` and `task` describe the network stored here.
    pub fn check_compatible(&self, model: &ModelConfig, task: TaskKind) -> Result<()> {
        if task != self.task {
            return Err(Error::Config(format!(
                "checkpoint was trained for {} but {} was requested",
                self.task, task
            )));
        }
        if model != &self.model {
            let ours = toml::to_string(model).unwrap_or_default();
            let theirs = toml::to_string(&self.model).unwrap_or_default();
            let diff: Vec<String> = ours
                .lines()
                .zip(theirs.lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("config `{a}` vs checkpoint `{b}`"))
                .collect();
            return Err(Error::Config(format!(
                "model config does not match the checkpoint: {}",
                diff.join("; ")
            )));
        }
        Ok(())
    }
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.manifest")), PathBuf::from(format!("{s}.params")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    write_file(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(
    stem: &Path,
    model: &Janus,
    train: &TrainConfig,
    run_id: Option<&str>,
    epoch: usize,
    dev_metric: f64,
) -> Result<()> {
    let dtype = model.precision();
    let mut params = Vec::with_capacity(model.store().len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (_, p) in model.store().iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            trainable: p.trainable,
        });
        offset += p.value.numel();
        for &x in p.value.data() {
            match dtype {
                Precision::F32 => bytes.extend_from_slice(&(x as f32).to_le_bytes()),
                Precision::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        run_id: run_id.map(str::to_string),
        dtype,
        task: model.task(),
        epoch,
        dev_metric,
        relations: model.relations().to_vec(),
        model: model.config().clone(),
        train: train.clone(),
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("serialising manifest: {e}")))?;
    let (mpath, ppath) = checkpoint_paths(stem);
    if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(&ppath, &bytes)?;
    write_atomic(&mpath, text.as_bytes())
}

pub fn read_manifest(stem: &Path) -> Result<CheckpointManifest> {
    let (mpath, _) = checkpoint_paths(stem);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if m.format != CHECKPOINT_FORMAT || m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            mpath.display(),
            m.format,
            m.format_version
        )));
    }
    Ok(m)
}

/// Rebuilds the model from its manifest and overwrites every weight from the params file.
pub fn load_checkpoint(stem: &Path) -> Result<(Janus, CheckpointManifest)> {
    let m = read_manifest(stem)?;
    let mut model = Janus::new(m.model.clone(), m.task, m.relations.clone(), m.dtype)?;
    let (_, ppath) = checkpoint_paths(stem);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let width = match m.dtype {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let total: usize = model.store().iter().map(|(_, p)| p.value.numel()).sum();
    if bytes.len() != total * width {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, expected {}",
            ppath.display(),
            bytes.len(),
            total * width
        )));
    }
    if m.params.len() != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, the model has {}",
            m.params.len(),
            model.store().len()
        )));
    }
    let ids: Vec<_> = model.store().ids().collect();
    for (entry, id) in m.params.iter().zip(ids) {
        let p = model.store_mut().get_mut(id);
        if entry.name != p.name || entry.shape != p.value.shape() || entry.trainable != p.trainable {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match the model's {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        let raw = &bytes[entry.offset * width..(entry.offset + n) * width];
        for (x, c) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(width)) {
            *x = match m.dtype {
                Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            };
        }
    }
    Ok((model, m))
}
