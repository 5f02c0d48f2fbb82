//! Per-artifact manifests: which configuration, seed and input files
//! produced an output, and the output's own hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use diffattack_core::codec::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    pub artifact: String,
    pub config_hash: String,
    /// Hash of the configuration sections this artifact depends on.
    pub stage_hash: String,
    pub seed: u64,
    pub stage_seed: u64,
    /// Input file name to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub output_sha256: String,
}

pub fn manifest_path(dir: &Path, artifact: &str) -> PathBuf {
    dir.join(format!("{artifact}.manifest.json"))
}

fn artifact_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Artifact(format!("{}: {e}", path.display()))
}

pub fn file_sha(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| artifact_err(path, e))?))
}

pub fn read_manifest(dir: &Path, artifact: &str) -> CliResult<Option<Manifest>> {
    let path = manifest_path(dir, artifact);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| artifact_err(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| artifact_err(&path, e))?;
    if m.format_version != MANIFEST_FORMAT_VERSION {
        return Err(artifact_err(
            &path,
            format!("manifest format_version {} (expected {MANIFEST_FORMAT_VERSION})", m.format_version),
        ));
    }
    Ok(Some(m))
}

/// Checks that an upstream artifact exists, is intact and was produced by
/// the current configuration. Returns its content hash.
pub fn verified_input(dir: &Path, artifact: &str, stage_hash: &str, producer: &str) -> CliResult<String> {
    let path = dir.join(artifact);
    let manifest = read_manifest(dir, artifact)?.ok_or_else(|| {
        CliError::Artifact(format!("missing {}; run `diffattack {producer}` first", path.display()))
    })?;
    let sha = file_sha(&path)?;
    if sha != manifest.output_sha256 {
        return Err(artifact_err(&path, "contents do not match the manifest hash"));
    }
    if manifest.stage_hash != stage_hash {
        return Err(artifact_err(
            &path,
            format!("produced under a different configuration or seed; rerun `diffattack {producer}`"),
        ));
    }
    Ok(sha)
}

/// Whether `artifact` is already up to date for these inputs.
pub fn is_fresh(dir: &Path, artifact: &str, stage_hash: &str, inputs: &BTreeMap<String, String>) -> bool {
    let Ok(Some(m)) = read_manifest(dir, artifact) else {
        return false;
    };
    m.stage_hash == stage_hash
        && &m.inputs == inputs
        && file_sha(&dir.join(artifact)).is_ok_and(|sha| sha == m.output_sha256)
}

/// Writes the artifact and then its manifest.
pub fn write_artifact(dir: &Path, artifact: &str, bytes: &[u8], mut manifest: Manifest) -> CliResult<()> {
    let path = dir.join(artifact);
    fs::write(&path, bytes).map_err(|e| artifact_err(&path, e))?;
    manifest.artifact = artifact.to_string();
    manifest.output_sha256 = sha256_hex(bytes);
    let mpath = manifest_path(dir, artifact);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&mpath, text).map_err(|e| artifact_err(&mpath, e))
}
