//! Exact Multitask Myopic Exploration Gap on small tabular task sets.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exploration::{eps_greedy, ExplorationSchedule, Mixture};
use crate::mdp::{
    markov_occupancy, occupancy, optimal_values, policy_value, MarkovPolicy, Occupancy, QFunction, TabularMdp,
    TabularPolicy,
};

use super::generators::sparse_goal;

/// Default limit on the number of enumerated deterministic policies per task.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;

/// `max(1, max_{h,s,a} μ^target / μ^behavior)` with `0/0 → 0` and `x/0 → ∞`.
pub fn concentrability(mdp: &TabularMdp, behavior: &impl TabularPolicy, target: &impl TabularPolicy) -> Result<f64> {
    Ok(occupancy_ratio(&occupancy(mdp, behavior)?, &occupancy(mdp, target)?))
}

fn occupancy_ratio(behavior: &Occupancy, target: &Occupancy) -> f64 {
    behavior
        .as_flat()
        .iter()
        .zip(target.as_flat())
        .map(|(&b, &t)| cell_ratio(t, b))
        .fold(1.0, f64::max)
}

#[inline]
fn cell_ratio(target: f64, behavior: f64) -> f64 {
    if target == 0.0 {
        0.0
    } else if behavior == 0.0 {
        f64::INFINITY
    } else {
        target / behavior
    }
}

/// A joint value function `(f_M)_M` with at least one β-suboptimal greedy policy.
#[derive(Clone, Debug, PartialEq)]
pub struct SuboptimalJoint {
    fs: Vec<QFunction>,
    beta: f64,
}

impl SuboptimalJoint {
    /// Checks membership: some task's greedy policy has `V* − V^{π^f} > β`.
    pub fn new(fs: Vec<QFunction>, tasks: &[TabularMdp], beta: f64) -> Result<Self> {
        check_joint(&fs, tasks)?;
        let gaps = greedy_gaps(&fs, tasks)?;
        if !gaps.iter().any(|&g| g > beta) {
            return Err(Error::Invalid(format!(
                "no task's greedy policy is {beta}-suboptimal (largest gap {:e})",
                gaps.iter().copied().fold(0.0, f64::max)
            )));
        }
        Ok(Self { fs, beta })
    }

    /// Draws per-task Q-tables uniform on `[0, 1)` until the joint is a member;
    /// `None` after `tries` failed draws.
    pub fn random<R: Rng + ?Sized>(tasks: &[TabularMdp], beta: f64, tries: usize, rng: &mut R) -> Option<Self> {
        for _ in 0..tries {
            let fs = tasks
                .iter()
                .map(|t| {
                    let (n, m, horizon) = (t.num_states(), t.num_actions(), t.horizon());
                    let values = (0..horizon * n * m).map(|_| rng.random_range(0.0..1.0)).collect();
                    QFunction::from_layers(n, m, horizon, values).expect("shape matches")
                })
                .collect();
            if let Ok(joint) = Self::new(fs, tasks, beta) {
                return Some(joint);
            }
        }
        None
    }

    /// Skips the membership check; MEG of a non-member is still well defined.
    pub fn unchecked(fs: Vec<QFunction>) -> Self {
        Self { fs, beta: 0.0 }
    }

    pub fn functions(&self) -> &[QFunction] {
        &self.fs
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// The one-task joint `f_M` for task `m`.
    pub fn restrict(&self, m: usize) -> Self {
        Self {
            fs: vec![self.fs[m].clone()],
            beta: self.beta,
        }
    }
}

fn check_joint(fs: &[QFunction], tasks: &[TabularMdp]) -> Result<()> {
    if fs.len() != tasks.len() {
        return Err(shape_err(format!(
            "{} value functions for {} tasks",
            fs.len(),
            tasks.len()
        )));
    }
    if tasks.is_empty() {
        return Err(Error::Invalid("task set is empty".into()));
    }
    for (f, m) in fs.iter().zip(tasks) {
        f.check_shape(m)?;
    }
    Ok(())
}

/// `V* − V^{π^{f_M}}` per task.
pub fn greedy_gaps(fs: &[QFunction], tasks: &[TabularMdp]) -> Result<Vec<f64>> {
    fs.iter()
        .zip(tasks)
        .map(|(f, m)| Ok(optimal_values(m).value() - policy_value(m, &f.greedy())?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MegResult {
    pub alpha: f64,
    pub c: f64,
    pub task_index: usize,
    /// Deterministic maximizer as `[h][s]` actions; unreached states use action 0.
    pub improved_policy: Vec<Vec<usize>>,
    pub feasible: bool,
}

/// The episode-level mixture of every task's ε-greedy greedy policy.
pub fn behavior_policy(fs: &[QFunction], sched: &ExplorationSchedule) -> Result<Mixture<MarkovPolicy>> {
    let members = fs
        .iter()
        .map(|f| eps_greedy(&f.greedy(), sched))
        .collect::<Result<Vec<_>>>()?;
    Mixture::new(members)
}

/// Number of deterministic policies that differ on some reachable state,
/// or `None` once the count passes `cap`.
pub fn count_candidates(mdp: &TabularMdp, cap: u64) -> Option<u64> {
    let mut memo = HashMap::new();
    let mut start = vec![false; mdp.num_states()];
    start[mdp.initial_state()] = true;
    count_from(mdp, 0, start, cap, &mut memo)
}

fn count_from(
    mdp: &TabularMdp,
    h: usize,
    support: Vec<bool>,
    cap: u64,
    memo: &mut HashMap<(usize, Vec<bool>), Option<u64>>,
) -> Option<u64> {
    if h == mdp.horizon() {
        return Some(1);
    }
    if let Some(&v) = memo.get(&(h, support.clone())) {
        return v;
    }
    let reached: Vec<usize> = (0..mdp.num_states()).filter(|&s| support[s]).collect();
    let m = mdp.num_actions();
    let combos = (m as u64).checked_pow(reached.len() as u32);
    let mut total: u64 = 0;
    let result = 'outer: {
        let Some(combos) = combos else { break 'outer None };
        if combos > cap {
            break 'outer None;
        }
        for code in 0..combos {
            let mut next = vec![false; mdp.num_states()];
            let mut rem = code;
            for &s in &reached {
                let a = (rem % m as u64) as usize;
                rem /= m as u64;
                for (nx, &p) in next.iter_mut().zip(mdp.transition(h, s, a)) {
                    *nx |= p > 0.0;
                }
            }
            match count_from(mdp, h + 1, next, cap, memo) {
                Some(c) => {
                    total = total.saturating_add(c);
                    if total > cap {
                        break 'outer None;
                    }
                }
                None => break 'outer None,
            }
        }
        Some(total)
    };
    memo.insert((h, support), result);
    result
}

/// Best deterministic candidate on one task.
#[derive(Clone, Debug)]
struct Candidate {
    value: f64,
    c: f64,
    actions: Vec<usize>,
}

struct Search<'a> {
    mdp: &'a TabularMdp,
    behavior: &'a Occupancy,
    base_value: f64,
    base_c: f64,
    best: Option<Candidate>,
    actions: Vec<usize>,
}

impl Search<'_> {
    fn visit(&mut self, h: usize, dist: &[f64], value: f64, ratio: f64) {
        let (n, m) = (self.mdp.num_states(), self.mdp.num_actions());
        if h == self.mdp.horizon() {
            let c = ratio.max(self.base_c);
            let gain = value - self.base_value;
            let score = if c.is_finite() {
                gain / c.sqrt()
            } else {
                f64::NEG_INFINITY
            };
            let better = match &self.best {
                None => true,
                Some(b) => score > b.value,
            };
            if better && c.is_finite() {
                self.best = Some(Candidate {
                    value: score,
                    c,
                    actions: self.actions.clone(),
                });
            }
            return;
        }
        let reached: Vec<usize> = (0..n).filter(|&s| dist[s] > 0.0).collect();
        let combos = m.pow(reached.len() as u32);
        for code in 0..combos {
            let mut rem = code;
            let mut next = vec![0.0; n];
            let mut v = value;
            let mut r = ratio;
            for s in 0..n {
                self.actions[h * n + s] = 0;
            }
            for &s in &reached {
                let a = rem % m;
                rem /= m;
                self.actions[h * n + s] = a;
                let w = dist[s];
                v += w * self.mdp.reward(h, s, a);
                r = r.max(cell_ratio(w, self.behavior.get(h, s, a)));
                for (nx, p) in next.iter_mut().zip(self.mdp.transition(h, s, a)) {
                    *nx += w * p;
                }
            }
            if r.is_infinite() {
                continue;
            }
            self.visit(h + 1, &next, v, r);
        }
    }
}

fn best_on_task(mdp: &TabularMdp, f: &QFunction, behavior: &Mixture<MarkovPolicy>) -> Result<Option<Candidate>> {
    let mu_b = occupancy(mdp, behavior)?;
    let greedy = f.greedy();
    let base_value = policy_value(mdp, &greedy)?;
    let base_c = occupancy_ratio(&mu_b, &markov_occupancy(mdp, &greedy));
    if base_c.is_infinite() {
        return Ok(None);
    }
    let n = mdp.num_states();
    let mut dist = vec![0.0; n];
    dist[mdp.initial_state()] = 1.0;
    let mut search = Search {
        mdp,
        behavior: &mu_b,
        base_value,
        base_c,
        best: None,
        actions: vec![0; mdp.horizon() * n],
    };
    search.visit(0, &dist, 0.0, 1.0);
    Ok(search.best)
}

/// Exact MEG over deterministic improved policies.
///
/// Candidates are enumerated layer by layer over the states a partial policy
/// reaches; unreached states take action 0, which leaves occupancy, value and
/// concentrability unchanged. Refuses when any task has more than `cap`
/// candidates.
pub fn meg_exact(
    f: &SuboptimalJoint,
    tasks: &[TabularMdp],
    sched: &ExplorationSchedule,
    cap: u64,
) -> Result<MegResult> {
    let fs = f.functions();
    check_joint(fs, tasks)?;
    for m in tasks {
        if count_candidates(m, cap).is_none() {
            return Err(Error::EnumerationCap { cap });
        }
    }
    let behavior = behavior_policy(fs, sched)?;
    let per_task = tasks
        .par_iter()
        .zip(fs.par_iter())
        .map(|(m, fm)| best_on_task(m, fm, &behavior))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(usize, Candidate)> = None;
    for (i, cand) in per_task.into_iter().enumerate() {
        if let Some(c) = cand {
            if best.as_ref().is_none_or(|(_, b)| c.value > b.value) {
                best = Some((i, c));
            }
        }
    }
    let (n, horizon) = (tasks[0].num_states(), tasks[0].horizon());
    Ok(match best {
        Some((task_index, c)) => MegResult {
            alpha: c.value,
            c: c.c,
            task_index,
            improved_policy: c.actions.chunks(n).map(<[usize]>::to_vec).collect(),
            feasible: true,
        },
        None => MegResult {
            alpha: 0.0,
            c: f64::INFINITY,
            task_index: 0,
            improved_policy: vec![vec![0; n]; horizon],
            feasible: false,
        },
    })
}

/// Objective of an arbitrary (possibly stochastic) candidate `π̃` on task `m`.
pub fn candidate_value(
    f: &SuboptimalJoint,
    tasks: &[TabularMdp],
    sched: &ExplorationSchedule,
    m: usize,
    candidate: &MarkovPolicy,
) -> Result<f64> {
    let fs = f.functions();
    check_joint(fs, tasks)?;
    let behavior = behavior_policy(fs, sched)?;
    let mdp = &tasks[m];
    let mu_b = occupancy(mdp, &behavior)?;
    let greedy = fs[m].greedy();
    let c = occupancy_ratio(&mu_b, &markov_occupancy(mdp, &greedy))
        .max(occupancy_ratio(&mu_b, &markov_occupancy(mdp, candidate)));
    if c.is_infinite() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((policy_value(mdp, candidate)? - policy_value(mdp, &greedy)?) / c.sqrt())
}

/// `√μ^{expl(π^f)}_{h_t}(s_t, a_t)` at the goal of a sparse-reward MDP.
pub fn meg_upper_sparse(mdp: &TabularMdp, f: &QFunction, sched: &ExplorationSchedule) -> Result<f64> {
    let (h, s, a) = sparse_goal(mdp)?;
    f.check_shape(mdp)?;
    let mu = markov_occupancy(mdp, &eps_greedy(&f.greedy(), sched)?);
    Ok(mu.get(h, s, a).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Check {
    pub multitask: f64,
    pub single: Vec<f64>,
    /// `max_M α(f_M, {M}) / √|M|`.
    pub bound: f64,
}

impl Prop1Check {
    pub fn holds(&self, slack: f64) -> bool {
        self.multitask >= self.bound - slack
    }
}

/// Multitask MEG against every single-task MEG.
pub fn check_prop1(
    f: &SuboptimalJoint,
    tasks: &[TabularMdp],
    sched: &ExplorationSchedule,
    cap: u64,
) -> Result<Prop1Check> {
    let multitask = meg_exact(f, tasks, sched, cap)?.alpha;
    let single = (0..tasks.len())
        .map(|m| Ok(meg_exact(&f.restrict(m), std::slice::from_ref(&tasks[m]), sched, cap)?.alpha))
        .collect::<Result<Vec<_>>>()?;
    let bound = single.iter().copied().fold(f64::NEG_INFINITY, f64::max) / (tasks.len() as f64).sqrt();
    Ok(Prop1Check {
        multitask,
        single,
        bound,
    })
}
