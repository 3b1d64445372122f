//! Checkpoint directory: `params.bin` (flat little-endian parameters in
//! declaration order) next to `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{count_parameters, DenoiserConfig, Model, STAGE_ORDER};
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Linear β schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn toy() -> Self {
        Self {
            t_max: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DenoiserConfig,
    pub parameter_count: usize,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub stage_order: String,
    pub bytes_per_value: usize,
    pub params_sha256: String,
    /// Free-form provenance (training stage, step, config hash ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub manifest: Manifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    schedule: ScheduleSpec,
    seed: u64,
    extra: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let bytes = model.params.to_bytes();
    let manifest = Manifest {
        config: model.config().clone(),
        parameter_count: model.params.num_elements(),
        schedule,
        seed,
        stage_order: STAGE_ORDER.to_string(),
        bytes_per_value: T::BYTES,
        params_sha256: sha256_hex(&bytes),
        extra,
    };
    fs::write(dir.join(PARAMS_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Loads and validates a checkpoint: parameter count against the config,
/// archive length and hash against the manifest.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = load_manifest(dir)?;
    let expected = count_parameters(&manifest.config)?;
    if expected != manifest.parameter_count {
        return Err(Error::CheckpointMismatch(format!(
            "manifest declares {} parameters, config yields {expected}",
            manifest.parameter_count
        )));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE)).map_err(|_| Error::MissingCheckpoint(dir.to_path_buf()))?;
    if sha256_hex(&bytes) != manifest.params_sha256 {
        return Err(Error::CheckpointMismatch("parameter archive hash differs from manifest".into()));
    }
    let mut model = Model::<T>::new(&manifest.config, manifest.seed)?;
    model
        .params
        .load_bytes(&bytes, manifest.bytes_per_value)
        .map_err(Error::CheckpointMismatch)?;
    Ok(Checkpoint { model, manifest })
}
