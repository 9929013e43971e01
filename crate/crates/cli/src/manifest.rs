//! Stage provenance: each stage writes `stage.json` recording the settings it
//! ran with and sha256 hashes of every file it read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crackgnn_core::io::{read_json, write_json};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stage};
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "stage.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: Value,
    /// Paths relative to the workdir.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn config_hash(config: &Value) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("json value serializes"))
}

pub fn manifest_path(workdir: &Path, stage: Stage) -> PathBuf {
    workdir.join(stage.dir()).join(MANIFEST_FILE)
}

/// Hashes `files` (absolute, under `workdir`) keyed by their relative path.
pub fn hash_files(workdir: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(workdir).unwrap_or(f);
            let key = rel.to_string_lossy().replace('\\', "/");
            Ok((key, hash_file(f)?))
        })
        .collect()
}

pub fn write_manifest(
    config: &RunConfig,
    stage: Stage,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<StageManifest, CliError> {
    let stage_config = config.stage_config(stage);
    let manifest = StageManifest {
        stage: stage.name().into(),
        config_hash: config_hash(&stage_config),
        seed: config.seed,
        config: stage_config,
        inputs: hash_files(&config.workdir, inputs)?,
        outputs: hash_files(&config.workdir, outputs)?,
    };
    write_json(&manifest_path(&config.workdir, stage), &manifest)?;
    Ok(manifest)
}

/// Confirms the upstream stage ran with the settings this run would give it.
pub fn require_upstream(config: &RunConfig, stage: Stage) -> Result<StageManifest, CliError> {
    let up = stage.upstream().expect("stage has an upstream");
    let path = manifest_path(&config.workdir, up);
    if !path.exists() {
        return Err(CliError::MissingDependency(format!(
            "missing {} artifacts under {}; run `{}` first",
            up.artifacts(),
            config.workdir.join(up.dir()).display(),
            up.name()
        )));
    }
    let manifest: StageManifest = read_json(&path)?;
    if manifest.config_hash != config_hash(&config.stage_config(up)) {
        return Err(CliError::MissingDependency(format!(
            "{} artifacts were produced with different settings; rerun `{}`",
            up.artifacts(),
            up.name()
        )));
    }
    for (rel, hash) in &manifest.outputs {
        let actual = hash_file(&config.workdir.join(rel)).map_err(|_| {
            CliError::MissingDependency(format!("missing {} artifact {rel}; rerun `{}`", up.artifacts(), up.name()))
        })?;
        if &actual != hash {
            return Err(CliError::MissingDependency(format!(
                "{} artifact {rel} changed since `{}` wrote it; rerun it",
                up.artifacts(),
                up.name()
            )));
        }
    }
    Ok(manifest)
}
