//! Loading environment files and drawing random instances.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtrl_core::diversity::{gen_hallway, gen_sparse_set, max_reach_at, random_sparse_mdp, random_transitions};
use mtrl_core::linear::{embed_tabular, LinearMdp, LinearMdpFile};
use mtrl_core::lqr::{random_lqr_system, LqrFile, LqrSystem};
use mtrl_core::rng::substream;
use mtrl_core::TabularMdp;
use rand::Rng;

use crate::config::{EnvSpec, ExperimentConfig, ExperimentKind};

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_with_path<T: serde::de::DeserializeOwned>(value: serde_json::Value, path: &Path) -> Result<T> {
    serde_path_to_error::deserialize(value)
        .map_err(|e| anyhow::anyhow!("{}: field {}: {}", path.display(), e.path(), e.inner()))
}

/// Loads and validates a tabular MDP file.
pub fn load_tabular(path: &Path) -> Result<TabularMdp> {
    let file = parse_with_path(read_json(path)?, path)?;
    let mdp = TabularMdp::from_file(&file).with_context(|| format!("loading {}", path.display()))?;
    let report = mdp.validate();
    if !report.is_valid() {
        bail!("{}: {}", path.display(), report.messages().join("; "));
    }
    Ok(mdp)
}

/// Loads a linear MDP file, or a tabular file as its one-hot embedding.
pub fn load_linear(path: &Path) -> Result<LinearMdp> {
    let value = read_json(path)?;
    if value.get("phi").is_some() {
        let file: LinearMdpFile = parse_with_path(value, path)?;
        LinearMdp::from_file(&file).with_context(|| format!("loading {}", path.display()))
    } else {
        Ok(embed_tabular(&load_tabular(path)?))
    }
}

pub fn load_lqr(path: &Path) -> Result<LqrSystem> {
    let file: LqrFile = parse_with_path(read_json(path)?, path)?;
    LqrSystem::from_file(&file).with_context(|| format!("loading {}", path.display()))
}

/// One audited instance: a label, its tasks, and the base dynamics when known.
pub struct TabularInstance {
    pub label: String,
    pub seed: Option<u64>,
    pub tasks: Vec<TabularMdp>,
    pub base: Option<TabularMdp>,
}

/// Tasks of a fixed environment; `single` keeps only the hallway's far-end task.
pub fn fixed_tasks(env: &EnvSpec, base_dir: &Path, single: bool) -> Result<(Vec<TabularMdp>, Option<TabularMdp>)> {
    Ok(match env {
        EnvSpec::Hallway { n } => {
            let hall = gen_hallway(*n);
            let tasks = if single { vec![hall.single] } else { hall.tasks };
            (tasks, Some(hall.base))
        }
        EnvSpec::Sparse { base } => {
            let b = load_tabular(&resolve(base_dir, base))?;
            (gen_sparse_set(&b), Some(b))
        }
        EnvSpec::Files { paths } => {
            let tasks = paths
                .iter()
                .map(|p| load_tabular(&resolve(base_dir, p)))
                .collect::<Result<Vec<_>>>()?;
            if single && tasks.len() != 1 {
                bail!(
                    "env.files.paths: single_task_run needs exactly one task file, got {}",
                    tasks.len()
                );
            }
            (tasks, None)
        }
        EnvSpec::Random { .. } | EnvSpec::RandomLqr { .. } => bail!("env: expected a fixed environment"),
    })
}

/// Random tabular tasks sharing one transition kernel, drawn from `(seed, 0, 0)`.
pub fn random_tabular(env: &EnvSpec, seed: u64) -> Result<(Vec<TabularMdp>, TabularMdp)> {
    let EnvSpec::Random {
        states,
        actions,
        horizon,
        tasks,
        sparse,
        support,
    } = env
    else {
        bail!("env: expected `random`");
    };
    let mut rng = substream(seed, 0, 0);
    let (n, m, h) = (states.draw(&mut rng), actions.draw(&mut rng), horizon.draw(&mut rng));
    let size = h * n * m;
    if *sparse {
        let (first, _) = random_sparse_mdp(n, m, h, &mut rng);
        let base = first.with_rewards(vec![0.0; size])?;
        let mut out = vec![first];
        while out.len() < *tasks {
            let (gh, gs, ga) = (rng.random_range(0..h), rng.random_range(0..n), rng.random_range(0..m));
            if max_reach_at(&base, gh, gs) == 0.0 {
                continue;
            }
            let mut r = vec![0.0; size];
            r[(gh * n + gs) * m + ga] = 1.0;
            out.push(base.with_rewards(r)?);
        }
        Ok((out, base))
    } else {
        let p = random_transitions(n, m, h, support.unwrap_or(n), &mut rng);
        let base = TabularMdp::from_flat(n, m, h, 0, p, vec![0.0; size])?;
        let out = (0..*tasks)
            .map(|_| {
                let r = (0..size).map(|_| rng.random_range(0.0..1.0) / h as f64).collect();
                base.with_rewards(r)
            })
            .collect::<mtrl_core::Result<Vec<_>>>()?;
        Ok((out, base))
    }
}

/// Every tabular instance a config audits: one per seed for random envs, else one.
pub fn tabular_instances(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    kind: ExperimentKind,
) -> Result<Vec<TabularInstance>> {
    if cfg.env.is_random() {
        cfg.seeds()
            .into_iter()
            .map(|seed| {
                let (tasks, base) = random_tabular(&cfg.env, seed)?;
                Ok(TabularInstance {
                    label: format!("seed{seed}"),
                    seed: Some(seed),
                    tasks,
                    base: Some(base),
                })
            })
            .collect()
    } else {
        let (tasks, base) = fixed_tasks(&cfg.env, base_dir, kind == ExperimentKind::SingleTaskRun)?;
        Ok(vec![TabularInstance {
            label: "env".into(),
            seed: None,
            tasks,
            base,
        }])
    }
}

/// Random well-posed LQR system drawn from `(seed, 0, 0)`.
pub fn random_lqr(env: &EnvSpec, seed: u64) -> Result<LqrSystem> {
    let EnvSpec::RandomLqr { ds, da, horizon } = env else {
        bail!("env: expected `random_lqr`");
    };
    let mut rng = substream(seed, 0, 0);
    let (ds, da, h) = (ds.draw(&mut rng), da.draw(&mut rng), horizon.draw(&mut rng));
    Ok(random_lqr_system(ds, da, h, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Size;

    #[test]
    fn random_instances_are_seeded() {
        let env = EnvSpec::Random {
            states: Size::Range([2, 3]),
            actions: Size::Fixed(2),
            horizon: Size::Fixed(3),
            tasks: 3,
            sparse: true,
            support: None,
        };
        let (a, base) = random_tabular(&env, 4).unwrap();
        let (b, _) = random_tabular(&env, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for t in &a {
            assert!(t.shares_transitions(&base));
            assert!(mtrl_core::diversity::sparse_goal(t).is_ok());
        }
    }

    #[test]
    fn hallway_single_and_multi() {
        let env = EnvSpec::Hallway { n: 5 };
        let (multi, base) = fixed_tasks(&env, Path::new("."), false).unwrap();
        let (single, _) = fixed_tasks(&env, Path::new("."), true).unwrap();
        assert_eq!(multi.len(), 5);
        assert_eq!(single, vec![multi[4].clone()]);
        assert!(base.is_some());
    }
}
