//! The policy-sharing multitask loop, sample-complexity measurement and the
//! fixed-curriculum learner.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exploration::{eps_greedy, ExplorationSchedule, Mixture};
use crate::mdp::{optimal_values, policy_value, sample_episode, MarkovPolicy, QFunction, TabularMdp};
use crate::oracle::{fqi_tabular, Dataset, UnvisitedValue};
use crate::rng::substream;

/// Tolerance for "the policy is optimal" judgments on exact values.
pub const OPTIMALITY_TOL: f64 = 1e-12;

/// Tasks sharing `(S, A, H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    tasks: Vec<TabularMdp>,
    shared_transitions: bool,
}

impl TaskSet {
    pub fn new(tasks: Vec<TabularMdp>) -> Result<Self> {
        let Some(first) = tasks.first() else {
            return Err(Error::Invalid("task set is empty".into()));
        };
        let shape = (first.num_states(), first.num_actions(), first.horizon());
        for (i, t) in tasks.iter().enumerate() {
            if (t.num_states(), t.num_actions(), t.horizon()) != shape {
                return Err(shape_err(format!("task {i} has a different (S, A, H) from task 0")));
            }
            let report = t.validate();
            if !report.is_valid() {
                return Err(Error::Invalid(format!("task {i}: {}", report.messages().join("; "))));
            }
        }
        let shared_transitions = tasks.iter().all(|t| t.shares_transitions(first));
        Ok(Self {
            tasks,
            shared_transitions,
        })
    }

    pub fn tasks(&self) -> &[TabularMdp] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn shared_transitions(&self) -> bool {
        self.shared_transitions
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let t = &self.tasks[0];
        (t.num_states(), t.num_actions(), t.horizon())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Log greedy values every this many rounds (the last round is always logged).
    pub eval_every: usize,
    pub unvisited: UnvisitedValue,
    /// Stop after the first logged round at which every task is this close to optimal.
    pub stop_at_beta: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            eval_every: 1,
            unvisited: UnvisitedValue::Pessimistic,
            stop_at_beta: None,
        }
    }
}

/// Greedy-value record of one task at one logged round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub greedy_value: f64,
    pub optimal_value: f64,
}

impl TaskRecord {
    pub fn suboptimality(&self) -> f64 {
        self.optimal_value - self.greedy_value
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-indexed round.
    pub round: usize,
    pub tasks: Vec<TaskRecord>,
    /// Episodes collected over all tasks through this round.
    pub episodes_total: u64,
}

/// A run of the multitask loop.
///
/// The greedy policy logged at round `t` is the one fitted on all data
/// collected through round `t`, and is what round `t + 1` explores around.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub num_tasks: usize,
    pub rounds_run: usize,
    pub records: Vec<RoundRecord>,
    /// Run-length encoded greedy actions (`[h][s]`) per task, one entry per round.
    history: Vec<Vec<(Vec<usize>, u64)>>,
    shape: (usize, usize, usize),
    datasets: Vec<Dataset>,
}

impl RunLog {
    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    /// CSV with header `round,task_id,greedy_value,optimal_value,suboptimality,episodes_total,seed`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "round",
            "task_id",
            "greedy_value",
            "optimal_value",
            "suboptimality",
            "episodes_total",
            "seed",
        ])?;
        for rec in &self.records {
            for (i, t) in rec.tasks.iter().enumerate() {
                w.write_record(&[
                    rec.round.to_string(),
                    i.to_string(),
                    format_float(t.greedy_value),
                    format_float(t.optimal_value),
                    format_float(t.suboptimality()),
                    rec.episodes_total.to_string(),
                    self.seed.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds the logged records from a CSV written by [`RunLog::write_csv`].
    pub fn records_from_csv<R: std::io::Read>(input: R) -> Result<(u64, Vec<RoundRecord>)> {
        let mut rd = csv::Reader::from_reader(input);
        let mut records: Vec<RoundRecord> = Vec::new();
        let mut seed = 0;
        for row in rd.records() {
            let row = row?;
            let field = |i: usize| -> Result<&str> {
                row.get(i)
                    .ok_or_else(|| Error::Invalid(format!("run log row has no column {i}")))
            };
            let parse_f = |i: usize| -> Result<f64> {
                field(i)?
                    .parse()
                    .map_err(|e| Error::Invalid(format!("column {i}: {e}")))
            };
            let parse_u = |i: usize| -> Result<u64> {
                field(i)?
                    .parse()
                    .map_err(|e| Error::Invalid(format!("column {i}: {e}")))
            };
            let round = parse_u(0)? as usize;
            seed = parse_u(6)?;
            let rec = TaskRecord {
                greedy_value: parse_f(2)?,
                optimal_value: parse_f(3)?,
            };
            match records.last_mut() {
                Some(last) if last.round == round => last.tasks.push(rec),
                _ => records.push(RoundRecord {
                    round,
                    tasks: vec![rec],
                    episodes_total: parse_u(5)?,
                }),
            }
        }
        Ok((seed, records))
    }
}

/// Shortest round-tripping decimal form.
pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

/// Runs the multitask loop for `rounds` rounds.
///
/// Each round shares every task's ε-greedy greedy policy as one uniform
/// mixture, samples one episode per task from it, and refits every task's
/// data with tabular FQI. Task `i` in round `t` draws from its own substream `(seed, t, i)`.
pub fn run_algorithm1(
    tasks: &TaskSet,
    sched: &ExplorationSchedule,
    rounds: usize,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunLog> {
    if rounds == 0 {
        return Err(Error::Invalid("the number of rounds must be at least 1".into()));
    }
    if opts.eval_every == 0 {
        return Err(Error::Invalid("eval_every must be at least 1".into()));
    }
    let (n, m, horizon) = tasks.shape();
    if sched.horizon() != horizon {
        return Err(shape_err(format!(
            "schedule covers {} steps, tasks have horizon {horizon}",
            sched.horizon()
        )));
    }
    let optima: Vec<f64> = tasks.tasks.iter().map(|t| optimal_values(t).value()).collect();
    let mut datasets: Vec<Dataset> = (0..tasks.len()).map(|_| Dataset::new(n, m, horizon)).collect();
    let mut history: Vec<Vec<(Vec<usize>, u64)>> = vec![Vec::new(); tasks.len()];
    let mut records = Vec::new();
    let mut rounds_run = 0;
    let mut greedy: Vec<MarkovPolicy> = datasets
        .iter()
        .map(|d| fqi_tabular(d, opts.unvisited).greedy())
        .collect();
    for t in 1..=rounds {
        let explored = greedy
            .iter()
            .map(|g| eps_greedy(g, sched))
            .collect::<Result<Vec<_>>>()?;
        let shared = Mixture::new(explored)?;
        let episodes: Vec<_> = tasks
            .tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let mut rng: ChaCha8Rng = substream(seed, t as u64, i as u64);
                sample_episode(task, &shared, &mut rng)
            })
            .collect();
        for (d, ep) in datasets.iter_mut().zip(episodes) {
            d.push_episode(ep)?;
        }
        let fits: Vec<QFunction> = datasets.par_iter().map(|d| fqi_tabular(d, opts.unvisited)).collect();
        greedy = fits.iter().map(QFunction::greedy).collect();
        for (hist, f) in history.iter_mut().zip(&fits) {
            let acts = f.greedy_actions();
            match hist.last_mut() {
                Some((last, count)) if *last == acts => *count += 1,
                _ => hist.push((acts, 1)),
            }
        }
        rounds_run = t;
        if t % opts.eval_every != 0 && t != rounds {
            continue;
        }
        let values = tasks
            .tasks
            .par_iter()
            .zip(greedy.par_iter())
            .map(|(task, g)| policy_value(task, g))
            .collect::<Result<Vec<_>>>()?;
        let rec = RoundRecord {
            round: t,
            tasks: values
                .iter()
                .zip(&optima)
                .map(|(&v, &o)| TaskRecord {
                    greedy_value: v,
                    optimal_value: o,
                })
                .collect(),
            episodes_total: (t * tasks.len()) as u64,
        };
        let done = opts
            .stop_at_beta
            .is_some_and(|beta| rec.tasks.iter().all(|r| r.suboptimality() <= beta));
        records.push(rec);
        if done {
            break;
        }
    }
    Ok(RunLog {
        seed,
        num_tasks: tasks.len(),
        rounds_run,
        records,
        history,
        shape: (n, m, horizon),
        datasets,
    })
}

/// First logged round at which every task's greedy policy is `beta`-optimal.
pub fn sample_complexity(records: &[RoundRecord], beta: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.tasks.iter().all(|t| t.suboptimality() <= beta))
        .map(|r| r.round)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnMode {
    /// Uniform mixture over every round's greedy policy.
    MixtureGreedy,
    /// The last round's greedy policy.
    FinalGreedy,
}

/// A returned policy: a multiset of deterministic greedy policies mixed uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnedPolicy {
    pub members: Vec<(MarkovPolicy, u64)>,
}

impl ReturnedPolicy {
    /// Exact value; the episode-level mixture value is the weighted mean of member values.
    pub fn value(&self, mdp: &TabularMdp) -> Result<f64> {
        let total: u64 = self.members.iter().map(|(_, c)| c).sum();
        let mut acc = 0.0;
        for (pi, count) in &self.members {
            acc += *count as f64 * policy_value(mdp, pi)?;
        }
        Ok(acc / total as f64)
    }

    /// Expands the multiset into a uniform mixture.
    pub fn to_mixture(&self) -> Result<Mixture<MarkovPolicy>> {
        let mut out = Vec::new();
        for (pi, count) in &self.members {
            out.extend(std::iter::repeat_n(pi.clone(), *count as usize));
        }
        Mixture::new(out)
    }
}

pub fn returned_policy(log: &RunLog, task: usize, mode: ReturnMode) -> Result<ReturnedPolicy> {
    let hist = log
        .history
        .get(task)
        .ok_or_else(|| Error::Invalid(format!("task {task} not in the run")))?;
    let (n, m, horizon) = log.shape;
    let to_policy = |acts: &[usize]| MarkovPolicy::deterministic(n, m, horizon, acts);
    Ok(match mode {
        ReturnMode::FinalGreedy => {
            let (acts, _) = hist.last().ok_or_else(|| Error::Invalid("empty run".into()))?;
            ReturnedPolicy {
                members: vec![(to_policy(acts), 1)],
            }
        }
        ReturnMode::MixtureGreedy => ReturnedPolicy {
            members: hist.iter().map(|(acts, c)| (to_policy(acts), *c)).collect(),
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumResult {
    pub policy: MarkovPolicy,
    pub episodes: u64,
    pub budget: u64,
    pub success: bool,
    /// Episodes collected in each phase.
    pub phase_episodes: Vec<u64>,
}

/// `⌈4 A t log(H/δ)⌉`, the episode count of phase `t` (1-indexed).
pub fn curriculum_phase_budget(num_actions: usize, horizon: usize, t: usize, delta: f64) -> u64 {
    (4.0 * num_actions as f64 * t as f64 * (horizon as f64 / delta).ln()).ceil() as u64
}

/// Learns the task sequence in order. Phase `t` explores around the previous
/// phase's greedy policy with constant `ε = 1/t`, collects the phase budget on
/// task `t`, and fits tabular FQI on that phase's data alone.
pub fn run_curriculum(tasks: &TaskSet, delta: f64, seed: u64) -> Result<CurriculumResult> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if tasks.tasks.iter().any(|t| !t.is_deterministic()) {
        return Err(Error::Invalid(
            "the curriculum learner needs deterministic tasks".into(),
        ));
    }
    if !tasks.shared_transitions {
        return Err(Error::Invalid("the curriculum learner needs shared transitions".into()));
    }
    let (n, m, horizon) = tasks.shape();
    let mut policy = QFunction::zeros(n, m, horizon).greedy();
    let mut phase_episodes = Vec::with_capacity(tasks.len());
    let mut budget = 0;
    for (idx, task) in tasks.tasks.iter().enumerate() {
        let t = idx + 1;
        let count = curriculum_phase_budget(m, horizon, t, delta);
        budget += count;
        let sched = ExplorationSchedule::constant(horizon, 1.0 / t as f64)?;
        let behavior = eps_greedy(&policy, &sched)?;
        let mut rng: ChaCha8Rng = substream(seed, t as u64, 0);
        let mut data = Dataset::new(n, m, horizon);
        for _ in 0..count {
            data.push_episode(sample_episode(task, &behavior, &mut rng))?;
        }
        policy = fqi_tabular(&data, UnvisitedValue::Pessimistic).greedy();
        phase_episodes.push(count);
    }
    let last = tasks.tasks.last().expect("nonempty");
    let success = optimal_values(last).value() - policy_value(last, &policy)? <= OPTIMALITY_TOL;
    Ok(CurriculumResult {
        policy,
        episodes: phase_episodes.iter().sum(),
        budget,
        success,
        phase_episodes,
    })
}
