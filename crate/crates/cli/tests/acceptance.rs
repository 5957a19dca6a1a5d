//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::time::{Duration, Instant};

use mtrl_cli::{execute, ExperimentConfig, ExperimentKind};
use mtrl_core::diversity::{
    audit_mirror, check_prop1, coverage_constant, gen_hallway, gen_sparse_set, max_reach_at, meg_exact,
    meg_upper_sparse, mirror_transform, random_mdp, random_sparse_mdp, random_transitions, sparse_gap_check,
    SuboptimalJoint, DEFAULT_ENUMERATION_CAP,
};
use mtrl_core::engine::{run_algorithm1, run_curriculum, sample_complexity, RunOptions, TaskSet};
use mtrl_core::linear::{check_lemma_linear2, coverage_b1, embed_tabular};
use mtrl_core::lqr::{lqr_value, random_lqr_system, riccati, riccati_optimality_check, GainPolicy};
use mtrl_core::mdp::value_difference_check;
use mtrl_core::rng::substream;
use mtrl_core::{
    default_schedule, optimal_values, Error, ExplorationSchedule, MarkovPolicy, QFunction, ScheduleVariant, TabularMdp,
};
use rand::Rng;

const SLACK: f64 = 1e-9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn constant_action(tasks: &[TabularMdp], action: usize) -> Vec<QFunction> {
    tasks
        .iter()
        .map(|t| {
            QFunction::from_fn(t.num_states(), t.num_actions(), t.horizon(), |_, _, a| {
                f64::from(a == action)
            })
        })
        .collect()
}

fn hallway_single_task_bound() -> Verdict {
    let mut worst = f64::NEG_INFINITY;
    let mut notes = Vec::new();
    for n in [6usize, 8, 10] {
        let hall = gen_hallway(n);
        let tasks = vec![hall.single.clone()];
        let sched = default_schedule(n, ScheduleVariant::Thm2);
        let joint =
            SuboptimalJoint::new(constant_action(&tasks, 0), &tasks, 0.05).expect("backward greedy is suboptimal");
        let bound = 2f64.powf(-(n as f64) / 2.0);
        let upper = meg_upper_sparse(&tasks[0], &joint.functions()[0], &sched).unwrap();
        worst = worst.max(upper - bound);
        match meg_exact(&joint, &tasks, &sched, DEFAULT_ENUMERATION_CAP) {
            Ok(r) => {
                worst = worst.max(r.alpha - bound);
                notes.push(format!(
                    "N={n}: exact {:.3e}, upper {upper:.3e}, bound {bound:.3e}",
                    r.alpha
                ));
            }
            Err(Error::EnumerationCap { .. }) => {
                notes.push(format!(
                    "N={n}: exact not enumerable, upper {upper:.3e}, bound {bound:.3e}"
                ));
            }
            Err(e) => return verdict(false, e.to_string()),
        }
    }
    verdict(worst <= SLACK, notes.join("; "))
}

fn separation() -> Verdict {
    let beta = 0.05;
    let budget = 10_000;
    let opts = RunOptions {
        stop_at_beta: Some(beta),
        ..RunOptions::default()
    };
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let k = v.len();
        if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        }
    };
    let mut points = Vec::new();
    let mut ok = true;
    let mut notes = Vec::new();
    for n in [4usize, 6, 8, 10] {
        let hall = gen_hallway(n);
        let set = TaskSet::new(hall.tasks).unwrap();
        let sched = default_schedule(n, ScheduleVariant::Thm2);
        let rounds: Vec<f64> = (0..10)
            .map(|seed| {
                let log = run_algorithm1(&set, &sched, budget, seed, &opts).unwrap();
                sample_complexity(&log.records, beta).map_or(f64::INFINITY, |r| r as f64)
            })
            .collect();
        let reached = rounds.iter().filter(|r| r.is_finite()).count();
        ok &= reached >= 9;
        let m = median(rounds);
        notes.push(format!("N={n}: {reached}/10 reached, median {m}"));
        points.push(((n as f64).ln(), m.ln()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    ok &= slope.is_finite() && slope <= 4.0;
    let hall = gen_hallway(10);
    let single = TaskSet::new(vec![hall.single]).unwrap();
    let sched = default_schedule(10, ScheduleVariant::Thm2);
    let failed = (0..10)
        .filter(|&seed| {
            let log = run_algorithm1(&single, &sched, budget, seed, &opts).unwrap();
            sample_complexity(&log.records, beta).is_none()
        })
        .count();
    ok &= failed >= 9;
    notes.push(format!("slope {slope:.2}; single-task N=10 failed {failed}/10"));
    verdict(ok, notes.join("; "))
}

fn multitask_gap_dominates_single_task() -> Verdict {
    let mut rng = substream(3, 0, 0);
    let mut checked = 0;
    let mut worst = f64::INFINITY;
    while checked < 50 {
        let (n, h) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k = rng.random_range(2..=3);
        let p = random_transitions(n, 2, h, rng.random_range(1..=n), &mut rng);
        let base = TabularMdp::from_flat(n, 2, h, 0, p, vec![0.0; h * n * 2]).unwrap();
        let tasks: Vec<TabularMdp> = (0..k)
            .map(|_| {
                base.with_rewards(random_mdp(n, 2, h, &mut rng).rewards_flat().to_vec())
                    .unwrap()
            })
            .collect();
        let Some(joint) = SuboptimalJoint::random(&tasks, 0.01, 100, &mut rng) else {
            continue;
        };
        let sched = default_schedule(h, ScheduleVariant::Thm2);
        let c = check_prop1(&joint, &tasks, &sched, DEFAULT_ENUMERATION_CAP).unwrap();
        worst = worst.min(c.multitask - c.bound);
        checked += 1;
    }
    verdict(
        worst >= -SLACK,
        format!("50 instances, smallest α − max α_M/√|M| = {worst:.3e}"),
    )
}

fn sparse_upper_bound() -> Verdict {
    let mut rng = substream(4, 0, 0);
    let mut checked = 0;
    let mut worst = f64::INFINITY;
    while checked < 30 {
        let (n, h) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let (mdp, _) = random_sparse_mdp(n, 2, h, &mut rng);
        let tasks = vec![mdp];
        let Some(joint) = SuboptimalJoint::random(&tasks, 0.01, 100, &mut rng) else {
            continue;
        };
        let sched = default_schedule(h, ScheduleVariant::Thm2);
        let exact = meg_exact(&joint, &tasks, &sched, DEFAULT_ENUMERATION_CAP)
            .unwrap()
            .alpha;
        let upper = meg_upper_sparse(&tasks[0], &joint.functions()[0], &sched).unwrap();
        worst = worst.min(upper - exact);
        checked += 1;
    }
    verdict(
        worst >= -SLACK,
        format!("30 instances, smallest upper − exact = {worst:.3e}"),
    )
}

/// A joint that is optimal on every task except `target`, whose greedy policy is the worst one.
fn adversarial_joint(tasks: &[TabularMdp], target: usize) -> Vec<QFunction> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let q = optimal_values(t).q;
            if i == target {
                QFunction::from_fn(t.num_states(), t.num_actions(), t.horizon(), |h, s, a| -q.get(h, s, a))
            } else {
                q
            }
        })
        .collect()
}

fn sparse_lower_bound() -> Verdict {
    let mut rng = substream(5, 0, 0);
    let mut checked = 0;
    let mut worst = f64::INFINITY;
    let mut layers = Vec::new();
    let mut attempts = 0;
    while checked < 10 && attempts < 10_000 {
        attempts += 1;
        let (n, h) = (rng.random_range(2..=3), 3);
        let p = random_transitions(n, 2, h, rng.random_range(1..=n), &mut rng);
        let base = TabularMdp::from_flat(n, 2, h, 0, p, vec![0.0; h * n * 2]).unwrap();
        let tasks = gen_sparse_set(&base);
        let beta = coverage_constant(&base).b1 / 2.0;
        let eps = [0.3, 0.5, 0.8][checked % 3];
        let sched = ExplorationSchedule::constant(h, eps).unwrap();
        let joint = if checked % 2 == 0 {
            SuboptimalJoint::random(&tasks, beta, 100, &mut rng)
        } else {
            let target = rng.random_range(n..tasks.len());
            SuboptimalJoint::new(adversarial_joint(&tasks, target), &tasks, beta).ok()
        };
        let Some(joint) = joint else { continue };
        let c = sparse_gap_check(&base, &tasks, &joint, &sched, DEFAULT_ENUMERATION_CAP).unwrap();
        if c.bound <= 0.0 {
            return verdict(false, "vacuous bound on a constant schedule");
        }
        worst = worst.min(c.margin);
        layers.push(c.critical_layer + 1);
        checked += 1;
    }
    verdict(
        checked == 10 && worst >= -SLACK,
        format!("{checked} instances, critical layers {layers:?}, smallest α − bound = {worst:.3e}"),
    )
}

fn linear_lemma() -> Verdict {
    let mut rng = substream(6, 0, 0);
    let mut worst = f64::INFINITY;
    let mut steps = 0;
    for _ in 0..20 {
        let (n, m, h) = (
            rng.random_range(2..=5),
            rng.random_range(2..=3),
            rng.random_range(2..=4),
        );
        let lm = embed_tabular(&random_mdp(n, m, h, &mut rng));
        let sched = default_schedule(h, ScheduleVariant::Thm2);
        for step in 0..h - 1 {
            let b1 = coverage_b1(&lm, step + 1).active_b1;
            let c = check_lemma_linear2(&lm, step, &sched, b1).unwrap();
            worst = worst.min(c.margin);
            steps += 1;
        }
    }
    verdict(
        worst >= -SLACK,
        format!("20 instances, {steps} steps, smallest λ_min − bound = {worst:.3e}"),
    )
}

fn value_difference() -> Verdict {
    let mut rng = substream(7, 0, 0);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let (n, m, h) = (
            rng.random_range(1..=4),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
        );
        let mdp = random_mdp(n, m, h, &mut rng);
        let f = QFunction::from_fn(n, m, h, |_, _, _| rng.random_range(-1.0..1.0));
        let pi = MarkovPolicy::random(n, m, h, &mut rng);
        let (lhs, rhs) = value_difference_check(&mdp, &f, &pi).unwrap();
        worst = worst.min(rhs - lhs);
    }
    verdict(
        worst >= -SLACK,
        format!("100 triples, smallest rhs − lhs = {worst:.3e}"),
    )
}

fn mirror() -> Verdict {
    let mut rng = substream(8, 0, 0);
    let mut ok = true;
    let mut redirected = 0;
    let mut worst_margin = f64::INFINITY;
    for _ in 0..20 {
        let (n, m, h) = (
            rng.random_range(3..=5),
            rng.random_range(2..=3),
            rng.random_range(3..=4),
        );
        let p = random_transitions(n, m, h, rng.random_range(2..=n), &mut rng);
        let base = TabularMdp::from_flat(n, m, h, 0, p, vec![0.0; h * n * m]).unwrap();
        let policies: Vec<MarkovPolicy> = (0..100).map(|_| MarkovPolicy::random(n, m, h, &mut rng)).collect();
        for beta in [0.05, 0.2] {
            let mir = mirror_transform(&base, beta).unwrap();
            redirected += mir.redirected.len();
            for step in 0..h {
                for s in 0..n {
                    let r = max_reach_at(&mir.mdp, step, s);
                    ok &= r == 0.0 || r > beta;
                }
            }
            let audit = audit_mirror(&base, &mir, beta, &policies).unwrap();
            ok &= audit.passes(SLACK);
            worst_margin = worst_margin.min(audit.occupancy_margin);
        }
    }
    verdict(
        ok,
        format!("40 transforms, {redirected} redirections, smallest occupancy margin {worst_margin:.3e}"),
    )
}

fn curriculum() -> Verdict {
    let hall = gen_hallway(12);
    let set = TaskSet::new(hall.tasks).unwrap();
    let mut successes = 0;
    let mut within = true;
    for seed in 0..20 {
        let r = run_curriculum(&set, 0.1, seed).unwrap();
        within &= r.episodes <= r.budget;
        successes += usize::from(r.success);
    }
    verdict(
        successes >= 18 && within,
        format!("{successes}/20 seeds optimal within budget"),
    )
}

fn riccati_suite() -> Verdict {
    let mut rng = substream(10, 0, 0);
    let mut worst_residual = 0.0f64;
    let mut worst_grid = f64::INFINITY;
    let mut beaten = 0;
    let mut terminal = true;
    for i in 0..50 {
        let (ds, da) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let h = if i < 5 { 1 } else { rng.random_range(1..=6) };
        let sys = random_lqr_system(ds, da, h, &mut rng);
        let sol = riccati(&sys).unwrap();
        let res = riccati_optimality_check(&sys, &sol, 20, &mut rng);
        worst_residual = worst_residual.max(res.analytic);
        worst_grid = worst_grid.min(res.grid);
        let s1 = sys.initial_state();
        let opt = sol.value_at(0, s1);
        let best = (0..100)
            .map(|_| lqr_value(&sys, &GainPolicy::random(ds, da, h, 1.0, &mut rng), s1).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        beaten += usize::from(opt >= best);
        if h == 1 {
            terminal &= sol.p[0] == *sys.rs(0);
        }
    }
    verdict(
        worst_residual <= 1e-6 && worst_grid >= -1e-6 && beaten == 50 && terminal,
        format!("residual {worst_residual:.2e}, grid margin {worst_grid:.2e}, beat random gains {beaten}/50, H=1 exact {terminal}"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        (
            ExperimentKind::MtrlRun,
            serde_json::json!({
                "env": {"hallway": {"n": 5}},
                "rounds": 400,
                "beta": 0.05,
                "seeds": {"start": 0, "count": 4}
            }),
        ),
        (
            ExperimentKind::MirrorAudit,
            serde_json::json!({
                "env": {"random": {"states": 4, "actions": 2, "horizon": 3, "support": 3}},
                "betas": [0.05, 0.2],
                "policies": 20,
                "seeds": {"start": 0, "count": 4}
            }),
        ),
    ];
    let snapshot = |out: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        v.sort();
        v
    };
    let mut identical = true;
    let mut files = 0;
    for (kind, mut cfg) in configs {
        let mut snaps = Vec::new();
        for (i, workers) in [1usize, 3, 8, 1].into_iter().enumerate() {
            let out = format!("{}_{i}", kind.name());
            cfg["output"] = serde_json::json!(out);
            let cfg: ExperimentConfig = ExperimentConfig::from_json(&cfg.to_string()).unwrap();
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            pool.install(|| execute(&cfg, dir.path(), kind)).unwrap();
            snaps.push(snapshot(&dir.path().join(out)));
        }
        files += snaps[0].len();
        identical &= snaps.windows(2).all(|w| w[0] == w[1]);
    }
    verdict(
        identical,
        format!("{files} files identical across 1, 3, 8 workers and a rerun"),
    )
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Verdict);
    let criteria: [Criterion; 11] = [
        (
            "hallway single-task MEG ≤ 2^(-H/2)",
            Duration::from_secs(10),
            hallway_single_task_bound,
        ),
        (
            "multitask/single-task separation on the hallway",
            Duration::from_secs(300),
            separation,
        ),
        (
            "multitask MEG ≥ max single-task MEG / √|M|",
            Duration::from_secs(120),
            multitask_gap_dominates_single_task,
        ),
        (
            "sparse-reward MEG upper bound",
            Duration::from_secs(120),
            sparse_upper_bound,
        ),
        (
            "sparse-set MEG lower bound at the critical layer",
            Duration::from_secs(120),
            sparse_lower_bound,
        ),
        (
            "linear feature-covariance λ_min bound",
            Duration::from_secs(60),
            linear_lemma,
        ),
        ("value-difference inequality", Duration::from_secs(60), value_difference),
        (
            "mirror reach dichotomy and occupancy bound",
            Duration::from_secs(120),
            mirror,
        ),
        ("curriculum learner on hallway(12)", Duration::from_secs(60), curriculum),
        ("Riccati optimality", Duration::from_secs(120), riccati_suite),
        (
            "bit-identical output across worker counts",
            Duration::from_secs(120),
            determinism,
        ),
    ];
    let mut failures = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = run();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= *limit;
        failures += usize::from(!pass);
        println!(
            "criterion {:>2} {} {name} [{:.2}s / {}s] {}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            v.detail
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance criteria passed");
}
