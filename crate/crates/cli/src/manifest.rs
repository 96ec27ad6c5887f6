//! `manifest.json`: what a run needs to be repeated bit for bit.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct Input {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub vibtag_version: &'static str,
    pub seed: u64,
    /// sha256 of `config.toml` as written next to the manifest.
    pub config_sha256: String,
    /// Inputs read by the run; synthetic runs have none.
    pub inputs: Vec<Input>,
    pub demo: bool,
    pub threads: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `config.toml` and `manifest.json` into `dir`.
pub fn write(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    inputs: &[PathBuf],
    demo: bool,
) -> std::io::Result<Manifest> {
    let toml = config.to_toml();
    std::fs::write(dir.join("config.toml"), &toml)?;
    let mut seen = Vec::new();
    for p in inputs {
        if !seen.iter().any(|i: &Input| &i.path == p) {
            seen.push(Input {
                path: p.clone(),
                sha256: hash_file(p)?,
            });
        }
    }
    let manifest = Manifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        vibtag_version: env!("CARGO_PKG_VERSION"),
        seed: config.model.seed,
        config_sha256: sha256_hex(toml.as_bytes()),
        inputs: seen,
        demo,
        threads: rayon::current_num_threads(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}
