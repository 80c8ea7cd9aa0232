// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-stage provenance records.
//!
//! Every stage writes `stages/<name>.json` listing the digests of the
//! artifacts it read and wrote. A later stage re-hashes the files on disk
//! and compares them with these records before reading anything.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatial_cbm::fsutil::{sha256_hex, write_atomic};
use spatial_cbm::{Error, Result};

pub const STAGES_DIR: &str = "stages";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub run_seed: u64,
    pub stage_seed: u64,
    pub config_sha256: String,
    /// Upstream artifact name to digest.
    pub inputs: BTreeMap<String, String>,
    /// Artifact path relative to the output directory, to digest.
    pub outputs: BTreeMap<String, String>,
}

pub fn record_path(out: &Path, stage: &str) -> PathBuf {
    out.join(STAGES_DIR).join(format!("{stage}.json"))
}

/// Digest of a file, or of a directory tree by relative path and content.
pub fn digest(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    if path.is_file() {
        return Ok(sha256_hex(&std::fs::read(path)?));
    }
    let mut entries = Vec::new();
    collect(path, path, &mut entries)?;
    entries.sort();
    let mut text = String::new();
    for (rel, h) in entries {
        text.push_str(&format!("{rel}\t{h}\n"));
    }
    Ok(sha256_hex(text.as_bytes()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            out.push((rel, sha256_hex(&std::fs::read(&p)?)));
        }
    }
    Ok(())
}

impl StageRecord {
    pub fn new(stage: &str, run_seed: u64, stage_seed: u64, config_sha256: String) -> Self {
        Self {
            stage: stage.into(),
            run_seed,
            stage_seed,
            config_sha256,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Hashes `rel` under `out` and lists it as an output.
    pub fn add_output(&mut self, out: &Path, rel: &str) -> Result<String> {
        let h = digest(&out.join(rel))?;
        self.outputs.insert(rel.into(), h.clone());
        Ok(h)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&record_path(out, &self.stage), &bytes)
    }

    /// Loads a record and checks every listed output against the disk.
    pub fn load_verified(out: &Path, stage: &str) -> Result<Self> {
        let path = record_path(out, stage);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let rec: StageRecord = serde_json::from_slice(&std::fs::read(&path)?)
            .map_err(|e| Error::integrity(format!("corrupt stage record {}: {e}", path.display())))?;
        for (rel, expected) in &rec.outputs {
            let found = digest(&out.join(rel))?;
            if &found != expected {
                return Err(Error::Provenance {
                    artifact: format!("{rel} (written by {stage})"),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(rec)
    }

    pub fn output(&self, rel: &str) -> Result<&str> {
        self.outputs
            .get(rel)
            .map(String::as_str)
            .ok_or_else(|| Error::integrity(format!("stage {} did not record {rel}", self.stage)))
    }

    /// Fails when this record consumed a different version of `rel` than
    /// `upstream` currently lists.
    pub fn check_input(&self, rel: &str, upstream: &StageRecord) -> Result<()> {
        let current = upstream.output(rel)?;
        match self.inputs.get(rel) {
            Some(used) if used == current => Ok(()),
            Some(used) => Err(Error::Provenance {
                artifact: format!("{rel} consumed by {}", self.stage),
                expected: used.clone(),
                found: current.into(),
            }),
            None => Err(Error::integrity(format!("stage {} did not record input {rel}", self.stage))),
        }
    }
}
