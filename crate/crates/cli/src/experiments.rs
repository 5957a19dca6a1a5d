//! Executes experiment configs: multitask runs, the curriculum learner and the audit suites.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use mtrl_core::diversity::{
    audit_mirror, check_prop1, meg_exact, meg_upper_sparse, mirror_transform, sparse_gap_check, sparse_goal, MegResult,
    SuboptimalJoint,
};
use mtrl_core::engine::{run_algorithm1, run_curriculum, RoundRecord, RunLog, RunOptions, TaskSet};
use mtrl_core::linear::{check_lemma_linear2, coverage_b1, embed_tabular, write_spectrum_csv, LinearMdp};
use mtrl_core::lqr::{
    diverse_lqr_coverage, lqr_regularity, lqr_value, riccati, riccati_optimality_check, GainPolicy, LqrSystem,
};
use mtrl_core::mdp::policy_value;
use mtrl_core::oracle::UnvisitedValue;
use mtrl_core::rng::substream;
use mtrl_core::{optimal_values, Error as CoreError, MarkovPolicy, QFunction, TabularMdp};
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{summarize_runs, write_atomic, write_json, write_report_csv, AuditSummary, Check, Outcome};
use crate::config::{EnvSpec, ExperimentConfig, ExperimentKind, JointSpec};
use crate::envs::{fixed_tasks, load_linear, load_lqr, random_lqr, random_tabular, resolve, tabular_instances};

/// Redraws allowed when sampling a random β-suboptimal joint.
pub const JOINT_TRIES: usize = 1000;

/// Validates `cfg` for `kind` and writes every artifact under its output directory.
pub fn execute(cfg: &ExperimentConfig, base_dir: &Path, kind: ExperimentKind) -> Result<Outcome> {
    cfg.validate(kind)?;
    let out = resolve(base_dir, &cfg.output);
    match kind {
        ExperimentKind::MtrlRun | ExperimentKind::SingleTaskRun => multitask_run(cfg, base_dir, &out, kind),
        ExperimentKind::CurriculumRun => curriculum_run(cfg, base_dir, &out),
        ExperimentKind::MegAudit => audit(&out, kind, meg_audit(cfg, base_dir)?),
        ExperimentKind::LemmaLinear2 => {
            let (checks, details, spectra) = lemma_audit(cfg, base_dir)?;
            let path = out.join("spectrum.csv");
            write_atomic(&path, |w| Ok(write_spectrum_csv(&spectra, w)?))?;
            let mut outcome = audit(&out, kind, (checks, details))?;
            outcome.files.push(path);
            Ok(outcome)
        }
        ExperimentKind::LqrSuite => audit(&out, kind, lqr_audit(cfg, base_dir)?),
        ExperimentKind::MirrorAudit => audit(&out, kind, mirror_audit(cfg, base_dir)?),
    }
}

fn multitask_run(cfg: &ExperimentConfig, base_dir: &Path, out: &Path, kind: ExperimentKind) -> Result<Outcome> {
    let (tasks, _) = fixed_tasks(&cfg.env, base_dir, kind == ExperimentKind::SingleTaskRun)?;
    let set = TaskSet::new(tasks).context("env")?;
    let (_, _, horizon) = set.shape();
    let sched = cfg.schedule.build(horizon)?;
    let beta = cfg.beta.expect("validated");
    let rounds = cfg.rounds.expect("validated");
    let opts = RunOptions {
        eval_every: cfg.eval_every,
        unvisited: UnvisitedValue::Pessimistic,
        stop_at_beta: cfg.stop_at_beta.then_some(beta),
    };
    let logs = cfg
        .seeds()
        .par_iter()
        .map(|&seed| run_algorithm1(&set, &sched, rounds, seed, &opts))
        .collect::<mtrl_core::Result<Vec<RunLog>>>()?;
    let mut files = Vec::new();
    let mut runs: Vec<(u64, String, usize, Vec<RoundRecord>)> = Vec::new();
    for log in logs {
        let name = format!("runlog_seed{}.csv", log.seed);
        let path = out.join(&name);
        write_atomic(&path, |w| Ok(log.write_csv(w)?))?;
        files.push(path);
        runs.push((log.seed, name, log.rounds_run, log.records));
    }
    let summary = summarize_runs(kind.name(), set.len(), rounds, beta, &runs);
    let path = out.join("summary.json");
    write_json(&path, &summary)?;
    files.push(path);
    Ok(Outcome {
        files,
        checks_total: 0,
        checks_failed: 0,
    })
}

#[derive(Serialize)]
struct CurriculumSeed {
    seed: u64,
    file: String,
    episodes: u64,
    budget: u64,
    final_suboptimality: f64,
    success: bool,
}

#[derive(Serialize)]
struct CurriculumSummary {
    kind: &'static str,
    num_tasks: usize,
    delta: f64,
    runs: Vec<CurriculumSeed>,
    success_fraction: f64,
}

fn curriculum_run(cfg: &ExperimentConfig, base_dir: &Path, out: &Path) -> Result<Outcome> {
    let (tasks, _) = fixed_tasks(&cfg.env, base_dir, false)?;
    let set = TaskSet::new(tasks).context("env")?;
    let delta = cfg.delta.expect("validated");
    let seeds = cfg.seeds();
    let results = seeds
        .par_iter()
        .map(|&seed| run_curriculum(&set, delta, seed))
        .collect::<mtrl_core::Result<Vec<_>>>()?;
    let last = set.tasks().last().expect("nonempty task set");
    let optimum = optimal_values(last).value();
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for (&seed, res) in seeds.iter().zip(&results) {
        let name = format!("curriculum_seed{seed}.csv");
        let path = out.join(&name);
        write_atomic(&path, |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(["phase", "episodes", "cumulative_episodes", "seed"])?;
            let mut total = 0;
            for (t, &count) in res.phase_episodes.iter().enumerate() {
                total += count;
                csv.write_record([
                    (t + 1).to_string(),
                    count.to_string(),
                    total.to_string(),
                    seed.to_string(),
                ])?;
            }
            csv.flush()?;
            Ok(())
        })?;
        files.push(path);
        runs.push(CurriculumSeed {
            seed,
            file: name,
            episodes: res.episodes,
            budget: res.budget,
            final_suboptimality: optimum - policy_value(last, &res.policy)?,
            success: res.success,
        });
    }
    let successes = runs.iter().filter(|r| r.success).count();
    let summary = CurriculumSummary {
        kind: "curriculum_run",
        num_tasks: set.len(),
        delta,
        success_fraction: successes as f64 / runs.len() as f64,
        runs,
    };
    let path = out.join("summary.json");
    write_json(&path, &summary)?;
    files.push(path);
    Ok(Outcome {
        files,
        checks_total: 0,
        checks_failed: 0,
    })
}

fn audit<T: Serialize>(out: &Path, kind: ExperimentKind, (checks, details): (Vec<Check>, T)) -> Result<Outcome> {
    let failed = checks.iter().filter(|c| !c.pass).count();
    let report = out.join("report.csv");
    write_report_csv(&report, &checks)?;
    let summary = AuditSummary {
        kind: kind.name().into(),
        passed: failed == 0,
        checks_total: checks.len(),
        checks_failed: failed,
        checks,
        details,
    };
    let path = out.join("summary.json");
    write_json(&path, &summary)?;
    Ok(Outcome {
        files: vec![report, path],
        checks_total: summary.checks_total,
        checks_failed: failed,
    })
}

#[derive(Serialize)]
struct MegDetail {
    instance: String,
    num_tasks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    multitask: Option<MegResult>,
    /// Single-task gaps `α(f_M, {M})`, where enumerable.
    single: Vec<Option<f64>>,
    /// Sparse-reward upper bounds per task, where the task is sparse.
    upper: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "String::is_empty")]
    note: String,
}

fn constant_action_joint(tasks: &[TabularMdp], action: usize) -> Result<Vec<QFunction>> {
    tasks
        .iter()
        .map(|t| {
            if action >= t.num_actions() {
                return Err(anyhow!(
                    "joint.constant_action.action: {action} out of range for {} actions",
                    t.num_actions()
                ));
            }
            Ok(QFunction::from_fn(
                t.num_states(),
                t.num_actions(),
                t.horizon(),
                |_, _, a| f64::from(a == action),
            ))
        })
        .collect()
}

/// `Ok(None)` when the enumeration cap is hit and skipping is allowed.
fn exact_or_skip(cfg: &ExperimentConfig, result: mtrl_core::Result<MegResult>) -> Result<Option<MegResult>> {
    match result {
        Ok(r) => Ok(Some(r)),
        Err(CoreError::EnumerationCap { .. }) if cfg.skip_unenumerable => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn meg_audit(cfg: &ExperimentConfig, base_dir: &Path) -> Result<(Vec<Check>, Vec<MegDetail>)> {
    let beta = cfg.beta.expect("validated");
    let slack = cfg.slack;
    let instances = tabular_instances(cfg, base_dir, ExperimentKind::MegAudit)?;
    let results = instances
        .par_iter()
        .map(|inst| -> Result<(Vec<Check>, MegDetail)> {
            let label = inst.label.as_str();
            let tasks = &inst.tasks;
            let horizon = tasks[0].horizon();
            let sched = cfg.schedule.build(horizon)?;
            let mut detail = MegDetail {
                instance: label.into(),
                num_tasks: tasks.len(),
                multitask: None,
                single: Vec::new(),
                upper: Vec::new(),
                note: String::new(),
            };
            let joint = match cfg.joint.as_ref().expect("validated") {
                JointSpec::ConstantAction { action } => {
                    SuboptimalJoint::new(constant_action_joint(tasks, *action)?, tasks, beta).context("joint")?
                }
                JointSpec::Random => {
                    let mut rng = substream(inst.seed.unwrap_or(0), 0, 1);
                    match SuboptimalJoint::random(tasks, beta, JOINT_TRIES, &mut rng) {
                        Some(j) => j,
                        None => {
                            detail.note = format!("no {beta}-suboptimal joint in {JOINT_TRIES} draws; skipped");
                            return Ok((Vec::new(), detail));
                        }
                    }
                }
            };
            let mut checks = Vec::new();
            let multi = exact_or_skip(cfg, meg_exact(&joint, tasks, &sched, cfg.cap))?;
            let single: Vec<Option<f64>> = if tasks.len() == 1 {
                vec![multi.as_ref().map(|r| r.alpha)]
            } else {
                (0..tasks.len())
                    .map(|i| {
                        let r = meg_exact(&joint.restrict(i), &tasks[i..=i], &sched, cfg.cap);
                        Ok(exact_or_skip(cfg, r)?.map(|r| r.alpha))
                    })
                    .collect::<Result<_>>()?
            };
            let mut upper = Vec::with_capacity(tasks.len());
            for (i, task) in tasks.iter().enumerate() {
                if sparse_goal(task).is_err() {
                    upper.push(None);
                    continue;
                }
                let u = meg_upper_sparse(task, &joint.functions()[i], &sched)?;
                let inst_i = format!("{label}/task{}", i + 1);
                if let Some(a) = single[i] {
                    checks.push(Check::at_most("sparse_upper", &inst_i, a, u, slack));
                }
                if let Some(max) = cfg.max_alpha {
                    checks.push(Check::at_most("max_alpha_upper", &inst_i, u, max, slack));
                }
                upper.push(Some(u));
            }
            if let Some(m) = &multi {
                if let Some(max) = cfg.max_alpha {
                    checks.push(Check::at_most("max_alpha", label, m.alpha, max, slack));
                }
                if tasks.len() > 1 && single.iter().all(Option::is_some) {
                    let p1 = check_prop1(&joint, tasks, &sched, cfg.cap)?;
                    checks.push(Check::at_least("prop1", label, p1.multitask, p1.bound, slack));
                }
            } else {
                detail.note = format!("exact MEG skipped: more than {} candidate policies", cfg.cap);
            }
            if cfg.lower_bound {
                let base = inst.base.as_ref().expect("sparse envs carry their base");
                let gap = sparse_gap_check(base, tasks, &joint, &sched, cfg.cap)?;
                checks.push(
                    Check::at_least("sparse_lower_bound", label, gap.alpha, gap.bound, slack)
                        .with_note(format!("critical layer {}", gap.critical_layer + 1)),
                );
            }
            detail.multitask = multi;
            detail.single = single;
            detail.upper = upper;
            Ok((checks, detail))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results
        .into_iter()
        .fold((Vec::new(), Vec::new()), |(mut c, mut d), (ci, di)| {
            c.extend(ci);
            d.push(di);
            (c, d)
        }))
}

#[derive(Serialize)]
struct LemmaDetail {
    instance: String,
    step: usize,
    b1: f64,
    degenerate_tasks: Vec<usize>,
    #[serde(skip_serializing_if = "String::is_empty")]
    note: String,
}

type Spectrum = (String, usize, Vec<f64>);

fn linear_instances(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Vec<(String, LinearMdp)>> {
    match &cfg.env {
        EnvSpec::Random { .. } => cfg
            .seeds()
            .into_iter()
            .map(|seed| Ok((format!("seed{seed}"), embed_tabular(&random_tabular(&cfg.env, seed)?.1))))
            .collect(),
        EnvSpec::Files { paths } => paths
            .iter()
            .map(|p| Ok((p.display().to_string(), load_linear(&resolve(base_dir, p))?)))
            .collect(),
        env => {
            let (tasks, base) = fixed_tasks(env, base_dir, false)?;
            let dynamics = base.unwrap_or_else(|| tasks[0].clone());
            Ok(vec![("env".into(), embed_tabular(&dynamics))])
        }
    }
}

fn lemma_audit(cfg: &ExperimentConfig, base_dir: &Path) -> Result<(Vec<Check>, Vec<LemmaDetail>, Vec<Spectrum>)> {
    let instances = linear_instances(cfg, base_dir)?;
    let results = instances
        .par_iter()
        .map(
            |(label, lm)| -> Result<Vec<(Option<Check>, LemmaDetail, Option<Spectrum>)>> {
                let sched = cfg.schedule.build(lm.horizon())?;
                let mut rows = Vec::new();
                for h in 0..lm.horizon().saturating_sub(1) {
                    let inst = format!("{label}/h{}", h + 1);
                    let cert = coverage_b1(lm, h + 1);
                    let mut detail = LemmaDetail {
                        instance: inst.clone(),
                        step: h + 1,
                        b1: cert.active_b1,
                        degenerate_tasks: Vec::new(),
                        note: String::new(),
                    };
                    if cert.active.is_empty() {
                        detail.note = "no feature coordinate reachable; skipped".into();
                        rows.push((None, detail, None));
                        continue;
                    }
                    match check_lemma_linear2(lm, h, &sched, cert.active_b1) {
                        Ok(lc) => {
                            detail.degenerate_tasks = lc.degenerate_tasks.clone();
                            let check = Check::at_least("lemma_linear2", &inst, lc.lhs, lc.rhs, cfg.slack);
                            rows.push((Some(check), detail, Some((label.clone(), h + 1, lc.eigenvalues))));
                        }
                        Err(CoreError::Invalid(msg)) if msg.contains("degenerate") => {
                            detail.note = msg;
                            rows.push((None, detail, None));
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                Ok(rows)
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();
    let mut details = Vec::new();
    let mut spectra = Vec::new();
    for (c, d, s) in results.into_iter().flatten() {
        checks.extend(c);
        details.push(d);
        spectra.extend(s);
    }
    Ok((checks, details, spectra))
}

#[derive(Serialize)]
struct LqrDetail {
    instance: String,
    state_dim: usize,
    action_dim: usize,
    horizon: usize,
    optimal_value: f64,
    best_random_value: f64,
    b3: f64,
    b4: f64,
    b5: f64,
}

fn lqr_instances(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Vec<(String, u64, LqrSystem)>> {
    match &cfg.env {
        EnvSpec::RandomLqr { .. } => cfg
            .seeds()
            .into_iter()
            .map(|seed| Ok((format!("seed{seed}"), seed, random_lqr(&cfg.env, seed)?)))
            .collect(),
        EnvSpec::Files { paths } => {
            let seed = cfg.seeds()[0];
            paths
                .iter()
                .map(|p| Ok((p.display().to_string(), seed, load_lqr(&resolve(base_dir, p))?)))
                .collect()
        }
        _ => unreachable!("validated"),
    }
}

fn lqr_audit(cfg: &ExperimentConfig, base_dir: &Path) -> Result<(Vec<Check>, Vec<LqrDetail>)> {
    let instances = lqr_instances(cfg, base_dir)?;
    let tol = cfg.residual_tol;
    let results = instances
        .par_iter()
        .map(|(label, seed, sys)| -> Result<(Vec<Check>, Option<LqrDetail>)> {
            let label = label.as_str();
            let sol = match riccati(sys) {
                Ok(sol) => sol,
                Err(e) => return Ok((vec![Check::failed("riccati", label, e.to_string())], None)),
            };
            let (ds, da, horizon) = (sys.state_dim(), sys.action_dim(), sys.horizon());
            let mut rng = substream(*seed, 0, 1);
            let mut checks = Vec::new();
            let res = riccati_optimality_check(sys, &sol, cfg.trials, &mut rng);
            checks.push(Check::at_most("riccati_residual", label, res.analytic, tol, 0.0));
            checks.push(Check::at_least("riccati_grid", label, res.grid, -tol, 0.0));
            let s1 = sys.initial_state();
            let optimal = sol.value_at(0, s1);
            let mut best = f64::NEG_INFINITY;
            for _ in 0..cfg.random_gains {
                let g = GainPolicy::random(ds, da, horizon, 1.0, &mut rng);
                best = best.max(lqr_value(sys, &g, s1)?);
            }
            checks.push(Check::at_least("riccati_beats_random", label, optimal, best, cfg.slack));
            if horizon == 1 {
                let diff = (&sol.p[0] - sys.rs(0)).amax();
                checks.push(Check::at_most("terminal_exact", label, diff, 0.0, 0.0));
            }
            if cfg.coverage {
                let sched = cfg.schedule.build(horizon)?;
                for k in 1..horizon {
                    let inst = format!("{label}/h{}", k + 1);
                    checks.push(match diverse_lqr_coverage(sys, &sched, k) {
                        Ok(c) => Check::at_least("lqr_coverage", &inst, c.lambda_min, c.noise_floor, cfg.slack),
                        Err(e) => Check::failed("lqr_coverage", &inst, e.to_string()),
                    });
                }
            }
            let reg = lqr_regularity(sys, std::slice::from_ref(&sol.gains))?;
            Ok((
                checks,
                Some(LqrDetail {
                    instance: label.into(),
                    state_dim: ds,
                    action_dim: da,
                    horizon,
                    optimal_value: optimal,
                    best_random_value: best,
                    b3: reg.b3,
                    b4: reg.b4,
                    b5: reg.b5,
                }),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();
    let mut details = Vec::new();
    for (c, d) in results {
        checks.extend(c);
        details.extend(d);
    }
    Ok((checks, details))
}

#[derive(Serialize)]
struct MirrorDetail {
    instance: String,
    beta: f64,
    redirected: usize,
    occupancy_margin: f64,
    dummy_excess: f64,
}

fn mirror_audit(cfg: &ExperimentConfig, base_dir: &Path) -> Result<(Vec<Check>, Vec<MirrorDetail>)> {
    let instances = tabular_instances(cfg, base_dir, ExperimentKind::MirrorAudit)?;
    let mut jobs: Vec<(String, u64, TabularMdp)> = Vec::new();
    let default_seed = cfg.seeds()[0];
    for inst in instances {
        let seed = inst.seed.unwrap_or(default_seed);
        match inst.base {
            Some(base) => jobs.push((inst.label, seed, base)),
            None => {
                for (i, t) in inst.tasks.into_iter().enumerate() {
                    jobs.push((format!("{}/task{}", inst.label, i + 1), seed, t));
                }
            }
        }
    }
    let betas = cfg.mirror_betas();
    let results = jobs
        .par_iter()
        .map(|(label, seed, base)| -> Result<Vec<(Vec<Check>, MirrorDetail)>> {
            let (n, m, horizon) = (base.num_states(), base.num_actions(), base.horizon());
            let mut rng = substream(*seed, 0, 2);
            let policies: Vec<MarkovPolicy> = (0..cfg.policies)
                .map(|_| MarkovPolicy::random(n, m, horizon, &mut rng))
                .collect();
            betas
                .iter()
                .map(|&beta| {
                    let inst = format!("{label}/beta{beta}");
                    let mirror = mirror_transform(base, beta)?;
                    let audit = audit_mirror(base, &mirror, beta, &policies)?;
                    let checks = vec![
                        Check::at_most("mirror_reach", &inst, audit.reach_violations.len() as f64, 0.0, 0.0),
                        Check::at_least("mirror_occupancy", &inst, audit.occupancy_margin, 0.0, cfg.slack),
                        Check::at_most("mirror_dummy", &inst, audit.dummy_excess, 0.0, cfg.slack),
                    ];
                    let detail = MirrorDetail {
                        instance: inst,
                        beta,
                        redirected: mirror.redirected.len(),
                        occupancy_margin: audit.occupancy_margin,
                        dummy_excess: audit.dummy_excess,
                    };
                    Ok((checks, detail))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();
    let mut details = Vec::new();
    for (c, d) in results.into_iter().flatten() {
        checks.extend(c);
        details.push(d);
    }
    Ok((checks, details))
}
