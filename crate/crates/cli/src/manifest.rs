//! `manifest.json`: effective configuration, status and artifact hashes.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use smokecausal_core::io::write_json;
use smokecausal_core::{Error, Result};

use crate::config::Effective;

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    status: &'a str,
    error: Option<String>,
    effective: &'a Effective,
    artifacts: Vec<Artifact>,
}

/// Files written by a command, in write order.
#[derive(Debug, Default)]
pub struct Recorder {
    paths: Vec<PathBuf>,
}

impl Recorder {
    pub fn add(&mut self, path: PathBuf) {
        if !self.paths.contains(&path) {
            self.paths.push(path);
        }
    }

    pub fn artifacts(&self, out: &Path) -> Result<Vec<Artifact>> {
        let mut v = Vec::new();
        for p in &self.paths {
            if !p.is_file() {
                continue;
            }
            let bytes = std::fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            let rel = p.strip_prefix(out).unwrap_or(p);
            v.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: format!("{:x}", Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        Ok(v)
    }

    pub fn write(&self, eff: &Effective, error: Option<&Error>) -> Result<()> {
        let m = Manifest {
            command: &eff.command,
            status: if error.is_some() { "failed" } else { "ok" },
            error: error.map(ToString::to_string),
            effective: eff,
            artifacts: self.artifacts(&eff.out)?,
        };
        write_json(&eff.out.join("manifest.json"), &m)
    }
}
