use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn create(dir: &Path, name: &str) -> anyhow::Result<(BufWriter<File>, PathBuf)> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok((BufWriter::new(f), path))
}

pub fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> anyhow::Result<PathBuf> {
    let (mut w, path) = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(path)
}

/// Plain CSV writer; cells are numbers or identifiers, so no quoting is needed.
pub struct Csv {
    w: BufWriter<File>,
    pub path: PathBuf,
}

impl Csv {
    pub fn new(dir: &Path, name: &str, header: &[String]) -> anyhow::Result<Self> {
        let (mut w, path) = create(dir, name)?;
        writeln!(w, "{}", header.join(","))?;
        Ok(Self { w, path })
    }

    pub fn row(&mut self, cells: &[String]) -> anyhow::Result<()> {
        writeln!(self.w, "{}", cells.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.w.flush()?;
        Ok(self.path)
    }
}

pub fn num(x: f64) -> String {
    format!("{x:e}")
}

pub fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

#[derive(Debug, Serialize)]
struct Versions {
    sdopf: &'static str,
}

#[derive(Debug, Serialize)]
struct Seeds {
    trainer: u64,
    scenario: u64,
    eval_first: u64,
    oracle_scenario: u64,
    oracle_restarts: u64,
    rollout_scenario: u64,
    rollout_policy: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    case_sha256: Option<String>,
    seeds: Seeds,
    versions: Versions,
    outputs: Vec<String>,
    config: RunConfig,
}

/// Records what produced the outputs of one command: the effective config,
/// its hash, the case file hash, seeds and versions. No timestamps and no
/// output location, so two identical runs produce identical manifests.
pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, case_file: Option<&Path>, outputs: &[PathBuf]) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    cfg.output_dir = PathBuf::new();
    let canonical = serde_json::to_vec(&cfg)?;
    let case_sha256 = match case_file {
        Some(p) => Some(sha256_hex(&fs::read(p).with_context(|| format!("cannot read {}", p.display()))?)),
        None => None,
    };
    let manifest = Manifest {
        command,
        config_sha256: sha256_hex(&canonical),
        case_sha256,
        seeds: Seeds {
            trainer: cfg.trainer.seed,
            scenario: cfg.trainer.scenario.seed,
            eval_first: cfg.eval.first_seed,
            oracle_scenario: cfg.oracle.scenario_seed,
            oracle_restarts: cfg.oracle.seed,
            rollout_scenario: cfg.rollout.scenario_seed,
            rollout_policy: cfg.rollout.policy_seed,
        },
        versions: Versions { sdopf: env!("CARGO_PKG_VERSION") },
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        config: cfg,
    };
    write_json(dir, &format!("{command}_manifest.json"), &manifest)?;
    Ok(())
}
