//! Environment generators writing JSON files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Subcommand;
use mtrl_core::diversity::{gen_hallway, gen_sparse_set, mirror_transform, random_sparse_mdp};
use mtrl_core::linear::gen_diverse_linear;
use mtrl_core::lqr::{gen_diverse_lqr, random_lqr_system};
use mtrl_core::rng::substream;
use mtrl_core::TabularMdp;
use serde::Serialize;

use crate::artifacts::write_json;
use crate::envs::{load_linear, load_lqr, load_tabular};

#[derive(Clone, Debug, PartialEq, Subcommand)]
pub enum Generator {
    /// Base corridor plus the `n` hallway tasks.
    Hallway {
        #[arg(long)]
        n: usize,
    },
    /// Every sparse-reward task on a tabular base.
    Sparse {
        #[arg(long)]
        base: PathBuf,
    },
    /// One task per feature coordinate and step of a linear (or one-hot embedded tabular) MDP.
    DiverseLinear {
        #[arg(long)]
        base: PathBuf,
    },
    /// One task per state coordinate and step of an LQR system.
    DiverseLqr {
        #[arg(long)]
        base: PathBuf,
    },
    /// Mirror transform of a tabular MDP at threshold `beta`.
    Mirror {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        beta: f64,
    },
    /// Random tabular MDP with dense transitions and rewards, or a sparse reward.
    Random {
        #[arg(long)]
        states: usize,
        #[arg(long)]
        actions: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sparse: bool,
    },
    /// Random well-posed LQR system.
    RandomLqr {
        #[arg(long)]
        ds: usize,
        #[arg(long)]
        da: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write_all<T: Serialize>(out: &Path, items: impl IntoIterator<Item = (String, T)>) -> Result<Vec<PathBuf>> {
    items
        .into_iter()
        .map(|(name, value)| {
            let path = out.join(name);
            write_json(&path, &value)?;
            Ok(path)
        })
        .collect()
}

fn numbered<T>(items: Vec<T>) -> impl Iterator<Item = (String, T)> {
    items
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("task_{}.json", i + 1), t))
}

/// Writes the generator's files into `out` and returns their paths.
pub fn generate(generator: &Generator, out: &Path) -> Result<Vec<PathBuf>> {
    match generator {
        Generator::Hallway { n } => {
            if *n == 0 {
                bail!("--n: must be at least 1");
            }
            let hall = gen_hallway(*n);
            let mut files = write_all(out, [("base.json".to_string(), hall.base.to_file())])?;
            files.extend(write_all(
                out,
                numbered(hall.tasks.iter().map(TabularMdp::to_file).collect()),
            )?);
            Ok(files)
        }
        Generator::Sparse { base } => {
            let b = load_tabular(base)?;
            write_all(
                out,
                numbered(gen_sparse_set(&b).iter().map(TabularMdp::to_file).collect()),
            )
        }
        Generator::DiverseLinear { base } => {
            let lm = load_linear(base)?;
            write_all(
                out,
                numbered(gen_diverse_linear(&lm).iter().map(|t| t.to_file()).collect()),
            )
        }
        Generator::DiverseLqr { base } => {
            let sys = load_lqr(base)?;
            let a: Vec<_> = (0..sys.horizon()).map(|h| sys.a(h).clone()).collect();
            let b: Vec<_> = (0..sys.horizon()).map(|h| sys.b(h).clone()).collect();
            let tasks = gen_diverse_lqr(&a, &b, sys.initial_state())?;
            write_all(out, numbered(tasks.iter().map(|t| t.to_file()).collect()))
        }
        Generator::Mirror { base, beta } => {
            let b = load_tabular(base)?;
            let mirror = mirror_transform(&b, *beta)?;
            write_all(out, [("mirror.json".to_string(), mirror.mdp.to_file())])
        }
        Generator::Random {
            states,
            actions,
            horizon,
            seed,
            sparse,
        } => {
            if *states == 0 || *actions == 0 || *horizon == 0 {
                bail!("--states, --actions and --horizon must be at least 1");
            }
            let mut rng = substream(*seed, 0, 0);
            let mdp = if *sparse {
                random_sparse_mdp(*states, *actions, *horizon, &mut rng).0
            } else {
                mtrl_core::diversity::random_mdp(*states, *actions, *horizon, &mut rng)
            };
            write_all(out, [("mdp.json".to_string(), mdp.to_file())])
        }
        Generator::RandomLqr { ds, da, horizon, seed } => {
            if *ds == 0 || *da == 0 || *horizon == 0 {
                bail!("--ds, --da and --horizon must be at least 1");
            }
            let mut rng = substream(*seed, 0, 0);
            let sys = random_lqr_system(*ds, *da, *horizon, &mut rng);
            write_all(out, [("lqr.json".to_string(), sys.to_file())])
        }
    }
}
