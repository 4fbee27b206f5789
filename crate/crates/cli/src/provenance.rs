//! `run.json` provenance records.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub cli: &'static str,
    pub core: &'static str,
    pub run_json: u32,
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub versions: Versions,
    pub inputs: Vec<InputHash>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("cannot read {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Regular files under `path` (or `path` itself), sorted.
pub fn files_under(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).with_context(|| format!("cannot list {}", dir.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn hash_inputs(paths: &[PathBuf]) -> anyhow::Result<Vec<InputHash>> {
    let mut files = Vec::new();
    for p in paths {
        files.extend(files_under(p)?);
    }
    files.sort();
    files.dedup();
    files
        .into_iter()
        .map(|path| Ok(InputHash { sha256: sha256_file(&path)?, path }))
        .collect()
}

impl RunRecord {
    pub fn new(command: &str, config: &impl Serialize, seeds: serde_json::Value, inputs: &[PathBuf]) -> anyhow::Result<Self> {
        Ok(Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            seeds,
            versions: Versions {
                cli: env!("CARGO_PKG_VERSION"),
                core: tumorseg::VERSION,
                run_json: 1,
            },
            inputs: hash_inputs(inputs)?,
        })
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let p = dir.join("run.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?).with_context(|| format!("cannot write {}", p.display()))
    }
}
