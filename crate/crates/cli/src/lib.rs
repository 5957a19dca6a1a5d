//! Experiment runner: JSON configs in, per-seed CSV logs, summaries and audit reports out.

pub mod artifacts;
pub mod config;
pub mod envs;
pub mod experiments;
pub mod generate;

use std::path::Path;

use anyhow::{Context, Result};

pub use artifacts::{Check, Outcome};
pub use config::{ExperimentConfig, ExperimentKind};
pub use experiments::execute;
pub use generate::{generate, Generator};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "MTRL_WORKERS";

/// Runs a config file whose `kind` field selects the experiment.
pub fn run_file(path: &Path) -> Result<Outcome> {
    let (cfg, base) = ExperimentConfig::load(path)?;
    let kind = cfg.kind.context("kind: required by `run`")?;
    execute(&cfg, &base, kind)
}

/// Runs a config file as the given audit kind.
pub fn audit_file(kind: ExperimentKind, path: &Path) -> Result<Outcome> {
    if !kind.is_audit() {
        anyhow::bail!("`{}` is not an audit kind", kind.name());
    }
    let (cfg, base) = ExperimentConfig::load(path)?;
    execute(&cfg, &base, kind)
}

/// Worker count from [`WORKERS_ENV`], if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{WORKERS_ENV}: expected a positive integer, got `{v}`"))?;
            if n == 0 {
                anyhow::bail!("{WORKERS_ENV}: must be at least 1");
            }
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(WORKERS_ENV),
    }
}
