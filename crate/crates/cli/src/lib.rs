//! Config-driven experiment runner.
//!
//! Each experiment reads an [`ExperimentConfig`], runs entirely in process and
//! returns a [`RunOutput`]: a JSON summary plus named CSV traces. The same
//! config and seed always produce byte-identical output files, regardless of
//! the thread count.
//!
//! # Seed derivation
//!
//! All randomness flows from the config `seed`:
//!
//! * replica `s` of a `seeds` list uses `derive_seed(seed, s)`;
//! * within a replica (or a single-run experiment) each stage uses
//!   `derive_seed(replica_seed, stream_tag(label))` with labels such as
//!   `"data"`, `"model"`, `"ell=16"` or `"learned_butterfly"`.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub use config::ExperimentConfig;
pub use experiments::{plan, run_experiment};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(#[from] butterfly_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit code: 2 for config errors, 3 for numerical failures and
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 1,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Everything an experiment writes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: serde_json::Value,
    /// `(file name, contents)` written next to `summary.json`.
    pub files: Vec<(String, Vec<u8>)>,
}

impl RunOutput {
    pub fn new(summary: impl Serialize) -> Self {
        Self {
            summary: serde_json::to_value(summary).expect("summary serializes"),
            files: Vec::new(),
        }
    }

    pub fn push_file(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        self.files.push((name.into(), contents.into()));
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Write `summary.json` and every extra file into `dir`, creating it.
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let summary = dir.join("summary.json");
        std::fs::write(&summary, self.summary_json()).map_err(|e| CliError::io(&summary, e))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Read and validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_json(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Run on a dedicated pool of `threads` workers (all cores when `None`).
pub fn run_with_threads(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<RunOutput, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment(cfg))
}
