//! Finite episodic MDPs and exact dynamic programming over them.
//!
//! Steps are 0-indexed internally (`h in 0..horizon`); human-facing output
//! (validation messages, CSV exports) reports them 1-indexed. Transition
//! tensors are stored flat in `[h][s][a][s']` order and rewards in
//! `[h][s][a]` order.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const OCCUPANCY_TOL: f64 = 1e-10;
pub const CUMULATIVE_REWARD_TOL: f64 = 1e-9;

/// Finite-horizon MDP with a fixed initial state and deterministic rewards in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    transitions: Arc<[f64]>,
    rewards: Arc<[f64]>,
}

impl TabularMdp {
    /// Builds an MDP from nested `P[h][s][a][s']` and `R[h][s][a]` tensors.
    ///
    /// Only structure is checked here; use [`TabularMdp::validate`] for the
    /// stochasticity and reward invariants.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        transitions: &[Vec<Vec<Vec<f64>>>],
        rewards: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        check_len("P", "h", horizon, transitions.len())?;
        check_len("R", "h", horizon, rewards.len())?;
        let mut p = Vec::with_capacity(horizon * num_states * num_actions * num_states);
        for layer in transitions {
            check_len("P", "s", num_states, layer.len())?;
            for row in layer {
                check_len("P", "a", num_actions, row.len())?;
                for dist in row {
                    check_len("P", "s'", num_states, dist.len())?;
                    p.extend_from_slice(dist);
                }
            }
        }
        let mut r = Vec::with_capacity(horizon * num_states * num_actions);
        for layer in rewards {
            check_len("R", "s", num_states, layer.len())?;
            for row in layer {
                check_len("R", "a", num_actions, row.len())?;
                r.extend_from_slice(row);
            }
        }
        Self::from_flat(num_states, num_actions, horizon, initial_state, p, r)
    }

    /// Builds an MDP from flat row-major tensors.
    pub fn from_flat(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(Error::Invalid(format!(
                "S, A and H must be positive (got S={num_states}, A={num_actions}, H={horizon})"
            )));
        }
        if initial_state >= num_states {
            return Err(Error::Invalid(format!(
                "initial state {initial_state} out of range for {num_states} states"
            )));
        }
        check_len(
            "P",
            "flat",
            horizon * num_states * num_actions * num_states,
            transitions.len(),
        )?;
        check_len("R", "flat", horizon * num_states * num_actions, rewards.len())?;
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            initial_state,
            transitions: transitions.into(),
            rewards: rewards.into(),
        })
    }

    /// Same transitions (shared storage), new reward tensor in `[h][s][a]` order.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        check_len(
            "R",
            "flat",
            self.horizon * self.num_states * self.num_actions,
            rewards.len(),
        )?;
        Ok(Self {
            rewards: rewards.into(),
            ..self.clone()
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    /// Next-state distribution `P_h(· | s, a)`.
    #[inline]
    pub fn transition(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = ((h * n + s) * self.num_actions + a) * n;
        &self.transitions[start..start + n]
    }

    #[inline]
    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn transitions_flat(&self) -> &[f64] {
        &self.transitions
    }

    pub fn rewards_flat(&self) -> &[f64] {
        &self.rewards
    }

    /// Bitwise equality of transition tensors (and shape).
    pub fn shares_transitions(&self, other: &Self) -> bool {
        self.num_states == other.num_states
            && self.num_actions == other.num_actions
            && self.horizon == other.horizon
            && self.initial_state == other.initial_state
            && (Arc::ptr_eq(&self.transitions, &other.transitions)
                || self
                    .transitions
                    .iter()
                    .zip(other.transitions.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Every transition row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        self.transitions
            .chunks(self.num_states)
            .all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0))
    }

    /// Largest reward sum along any realizable path from `s1`.
    pub fn max_cumulative_reward(&self) -> f64 {
        let (n, m) = (self.num_states, self.num_actions);
        let mut next = vec![0.0; n];
        for h in (0..self.horizon).rev() {
            let mut cur = vec![f64::NEG_INFINITY; n];
            for s in 0..n {
                for a in 0..m {
                    let tail = self
                        .transition(h, s, a)
                        .iter()
                        .zip(&next)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(_, v)| *v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let tail = if tail.is_finite() { tail } else { 0.0 };
                    cur[s] = cur[s].max(self.reward(h, s, a) + tail);
                }
            }
            next = cur;
        }
        next[self.initial_state]
    }

    /// Checks every invariant and lists each violation with its location.
    pub fn validate(&self) -> ValidationReport {
        let (n, m) = (self.num_states, self.num_actions);
        let mut violations = Vec::new();
        for h in 0..self.horizon {
            for s in 0..n {
                for a in 0..m {
                    let row = self.transition(h, s, a);
                    if let Some((next, &p)) = row.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
                        violations.push(Violation::NegativeProbability {
                            h,
                            s,
                            a,
                            next,
                            value: p,
                        });
                    }
                    let sum: f64 = row.iter().sum();
                    if !((sum - 1.0).abs() <= STOCHASTIC_TOL) {
                        violations.push(Violation::RowSum { h, s, a, sum });
                    }
                    let r = self.reward(h, s, a);
                    if !(0.0..=1.0).contains(&r) {
                        violations.push(Violation::RewardRange { h, s, a, value: r });
                    }
                }
            }
        }
        if violations.is_empty() {
            let max = self.max_cumulative_reward();
            if max > 1.0 + CUMULATIVE_REWARD_TOL {
                violations.push(Violation::CumulativeReward { max });
            }
        }
        ValidationReport { violations }
    }

    pub fn to_file(&self) -> MdpFile {
        let (n, m) = (self.num_states, self.num_actions);
        MdpFile {
            num_states: n,
            num_actions: m,
            horizon: self.horizon,
            initial_state: self.initial_state,
            transitions: (0..self.horizon)
                .map(|h| {
                    (0..n)
                        .map(|s| (0..m).map(|a| self.transition(h, s, a).to_vec()).collect())
                        .collect()
                })
                .collect(),
            rewards: (0..self.horizon)
                .map(|h| (0..n).map(|s| (0..m).map(|a| self.reward(h, s, a)).collect()).collect())
                .collect(),
        }
    }

    pub fn from_file(file: &MdpFile) -> Result<Self> {
        Self::new(
            file.num_states,
            file.num_actions,
            file.horizon,
            file.initial_state,
            &file.transitions,
            &file.rewards,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }
}

fn check_len(tensor: &'static str, axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            tensor,
            axis,
            expected,
            found,
        })
    }
}

/// On-disk JSON form of a [`TabularMdp`], h-major nesting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpFile {
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "s1")]
    pub initial_state: usize,
    #[serde(rename = "P")]
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "R")]
    pub rewards: Vec<Vec<Vec<f64>>>,
}

/// A single failed invariant. Steps are reported 1-indexed.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    RowSum {
        h: usize,
        s: usize,
        a: usize,
        sum: f64,
    },
    NegativeProbability {
        h: usize,
        s: usize,
        a: usize,
        next: usize,
        value: f64,
    },
    RewardRange {
        h: usize,
        s: usize,
        a: usize,
        value: f64,
    },
    /// Reward normalization; reported but treated as a warning.
    CumulativeReward {
        max: f64,
    },
}

impl Violation {
    pub fn is_warning(&self) -> bool {
        matches!(self, Violation::CumulativeReward { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowSum { h, s, a, sum } => {
                write!(f, "row sum {} at ({},{},{})", round_display(*sum), h + 1, s, a)
            }
            Violation::NegativeProbability { h, s, a, next, value } => write!(
                f,
                "invalid probability {value} for next state {next} at ({},{},{})",
                h + 1,
                s,
                a
            ),
            Violation::RewardRange { h, s, a, value } => {
                write!(f, "reward {value} outside [0,1] at ({},{},{})", h + 1, s, a)
            }
            Violation::CumulativeReward { max } => {
                write!(f, "max cumulative reward {}", round_display(*max))
            }
        }
    }
}

fn round_display(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    /// No hard errors; normalization warnings are allowed.
    pub fn is_valid(&self) -> bool {
        self.violations.iter().all(Violation::is_warning)
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

/// Per-step stochastic action rule `π_h(a | s)`, stored `[h][s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovPolicy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    probs: Vec<f64>,
}

impl MarkovPolicy {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, probs: Vec<f64>) -> Result<Self> {
        check_len("pi", "flat", horizon * num_states * num_actions, probs.len())?;
        for (idx, row) in probs.chunks(num_actions.max(1)).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Invalid(format!(
                    "policy row (h={}, s={}) is not a distribution (sum {sum})",
                    idx / num_states + 1,
                    idx % num_states
                )));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            probs,
        })
    }

    /// Skips the row checks; callers guarantee each row is a distribution.
    pub(crate) fn from_probs_unchecked(num_states: usize, num_actions: usize, horizon: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), horizon * num_states * num_actions);
        Self {
            num_states,
            num_actions,
            horizon,
            probs,
        }
    }

    /// Deterministic policy from per-`(h, s)` actions in `[h][s]` order.
    pub fn deterministic(num_states: usize, num_actions: usize, horizon: usize, actions: &[usize]) -> Self {
        assert_eq!(actions.len(), horizon * num_states, "one action per (h, s)");
        let mut probs = vec![0.0; horizon * num_states * num_actions];
        for (idx, &a) in actions.iter().enumerate() {
            assert!(a < num_actions, "action {a} out of range");
            probs[idx * num_actions + a] = 1.0;
        }
        Self {
            num_states,
            num_actions,
            horizon,
            probs,
        }
    }

    /// Random stochastic policy; each row is an independent exponential-normalized draw.
    pub fn random<R: Rng + ?Sized>(num_states: usize, num_actions: usize, horizon: usize, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(horizon * num_states * num_actions);
        for _ in 0..horizon * num_states {
            let raw: Vec<f64> = (0..num_actions)
                .map(|_| -rng.random_range(f64::EPSILON..1.0).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            probs.extend(raw.into_iter().map(|x| x / total));
        }
        Self {
            num_states,
            num_actions,
            horizon,
            probs,
        }
    }

    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    #[inline]
    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    #[inline]
    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn probs_flat(&self) -> &[f64] {
        &self.probs
    }

    /// The action of a deterministic row, `None` if the row is stochastic.
    pub fn deterministic_action(&self, h: usize, s: usize) -> Option<usize> {
        let row = self.row(h, s);
        row.iter().position(|&p| p == 1.0)
    }

    pub(crate) fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_states != mdp.num_states || self.num_actions != mdp.num_actions || self.horizon != mdp.horizon {
            return Err(shape_err(format!(
                "policy shape (S={}, A={}, H={}) does not match MDP (S={}, A={}, H={})",
                self.num_states, self.num_actions, self.horizon, mdp.num_states, mdp.num_actions, mdp.horizon
            )));
        }
        Ok(())
    }
}

/// Anything that runs as an episode-level uniform mixture of Markov policies.
///
/// A plain [`MarkovPolicy`] is the one-member mixture.
pub trait TabularPolicy {
    fn members(&self) -> &[MarkovPolicy];
}

impl TabularPolicy for MarkovPolicy {
    fn members(&self) -> &[MarkovPolicy] {
        std::slice::from_ref(self)
    }
}

/// Tabular action-value function with `H + 1` layers; the last layer is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct QFunction {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    q: Vec<f64>,
}

impl QFunction {
    pub fn zeros(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            q: vec![0.0; (horizon + 1) * num_states * num_actions],
        }
    }

    /// Builds from the first `H` layers (`[h][s][a]`, flat); the terminal layer is appended.
    pub fn from_layers(num_states: usize, num_actions: usize, horizon: usize, values: Vec<f64>) -> Result<Self> {
        check_len("q", "flat", horizon * num_states * num_actions, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("Q-function entries must be finite".into()));
        }
        let mut q = values;
        q.resize((horizon + 1) * num_states * num_actions, 0.0);
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            q,
        })
    }

    pub fn from_fn(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(num_states, num_actions, horizon);
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    out.set(h, s, a, f(h, s, a));
                }
            }
        }
        out
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[(h * self.num_states + s) * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, h: usize, s: usize, a: usize, value: f64) {
        debug_assert!(h < self.horizon, "the terminal layer is fixed at zero");
        self.q[(h * self.num_states + s) * self.num_actions + a] = value;
    }

    #[inline]
    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.q[start..start + self.num_actions]
    }

    /// `max_a f_h(s, a)`; zero on the terminal layer.
    #[inline]
    pub fn max_value(&self, h: usize, s: usize) -> f64 {
        self.row(h, s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy actions in `[h][s]` order, ties to the lowest index.
    pub fn greedy_actions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.horizon * self.num_states);
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                out.push(argmax_lowest(self.row(h, s)));
            }
        }
        out
    }

    pub fn greedy(&self) -> MarkovPolicy {
        MarkovPolicy::deterministic(self.num_states, self.num_actions, self.horizon, &self.greedy_actions())
    }

    pub fn layers_flat(&self) -> &[f64] {
        &self.q[..self.horizon * self.num_states * self.num_actions]
    }

    pub(crate) fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_states != mdp.num_states || self.num_actions != mdp.num_actions || self.horizon != mdp.horizon {
            return Err(shape_err(format!(
                "Q-function shape (S={}, A={}, H={}) does not match MDP (S={}, A={}, H={})",
                self.num_states, self.num_actions, self.horizon, mdp.num_states, mdp.num_actions, mdp.horizon
            )));
        }
        Ok(())
    }
}

/// Index of the maximum; the first one wins ties.
#[inline]
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Exact state-action visitation probabilities `μ_h(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    mu: Vec<f64>,
}

impl Occupancy {
    pub(crate) fn zeros(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            mu: vec![0.0; horizon * num_states * num_actions],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.mu[(h * self.num_states + s) * self.num_actions + a]
    }

    #[inline]
    pub(crate) fn get_mut(&mut self, h: usize, s: usize, a: usize) -> &mut f64 {
        &mut self.mu[(h * self.num_states + s) * self.num_actions + a]
    }

    /// State marginal `μ_h(s) = Σ_a μ_h(s, a)`.
    pub fn state(&self, h: usize, s: usize) -> f64 {
        let start = (h * self.num_states + s) * self.num_actions;
        self.mu[start..start + self.num_actions].iter().sum()
    }

    pub fn layer(&self, h: usize) -> &[f64] {
        let len = self.num_states * self.num_actions;
        &self.mu[h * len..(h + 1) * len]
    }

    pub fn layer_sum(&self, h: usize) -> f64 {
        self.layer(h).iter().sum()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.mu
    }

    /// `Σ_h Σ_{s,a} μ_h(s, a) g_h(s, a)` for a table in `[h][s][a]` order.
    pub fn expectation(&self, table: &[f64]) -> f64 {
        debug_assert_eq!(table.len(), self.mu.len());
        self.mu.iter().zip(table).map(|(m, g)| m * g).sum()
    }
}

/// Exact value of a policy: `Q^π`, `V^π` (`[h][s]`, `H + 1` layers).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvaluation {
    pub q: QFunction,
    pub v: Vec<f64>,
    num_states: usize,
    initial_state: usize,
}

impl PolicyEvaluation {
    pub fn state_value(&self, h: usize, s: usize) -> f64 {
        self.v[h * self.num_states + s]
    }

    /// `V_1(s1)`.
    pub fn value(&self) -> f64 {
        self.v[self.initial_state]
    }
}

/// Backward induction for `Q^π` and `V^π`.
pub fn evaluate_policy(mdp: &TabularMdp, pi: &MarkovPolicy) -> Result<PolicyEvaluation> {
    pi.check_shape(mdp)?;
    let (n, m, horizon) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut q = QFunction::zeros(n, m, horizon);
    let mut v = vec![0.0; (horizon + 1) * n];
    for h in (0..horizon).rev() {
        let (head, tail) = v.split_at_mut((h + 1) * n);
        let next = &tail[..n];
        for s in 0..n {
            let mut vs = 0.0;
            for a in 0..m {
                let qa = mdp.reward(h, s, a) + dot(mdp.transition(h, s, a), next);
                q.set(h, s, a, qa);
                vs += pi.prob(h, s, a) * qa;
            }
            head[h * n + s] = vs;
        }
    }
    Ok(PolicyEvaluation {
        q,
        v,
        num_states: n,
        initial_state: mdp.initial_state,
    })
}

/// `V^π_1(s1)` of an episode-level mixture: the mean of member values.
pub fn policy_value(mdp: &TabularMdp, pi: &impl TabularPolicy) -> Result<f64> {
    let members = pi.members();
    let mut total = 0.0;
    for member in members {
        total += evaluate_policy(mdp, member)?.value();
    }
    Ok(total / members.len() as f64)
}

/// `Q*`, the greedy optimal policy (lowest-index ties) and `V*` (`[h][s]`, `H + 1` layers).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalSolution {
    pub q: QFunction,
    pub policy: MarkovPolicy,
    pub v: Vec<f64>,
    num_states: usize,
    initial_state: usize,
}

impl OptimalSolution {
    pub fn state_value(&self, h: usize, s: usize) -> f64 {
        self.v[h * self.num_states + s]
    }

    pub fn value(&self) -> f64 {
        self.v[self.initial_state]
    }
}

pub fn optimal_values(mdp: &TabularMdp) -> OptimalSolution {
    let (n, m, horizon) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut q = QFunction::zeros(n, m, horizon);
    let mut v = vec![0.0; (horizon + 1) * n];
    for h in (0..horizon).rev() {
        let (head, tail) = v.split_at_mut((h + 1) * n);
        let next = &tail[..n];
        for s in 0..n {
            for a in 0..m {
                q.set(h, s, a, mdp.reward(h, s, a) + dot(mdp.transition(h, s, a), next));
            }
            head[h * n + s] = q.max_value(h, s);
        }
    }
    let policy = q.greedy();
    OptimalSolution {
        q,
        policy,
        v,
        num_states: n,
        initial_state: mdp.initial_state,
    }
}

/// Forward DP for `μ^π_h(s, a)`; mixtures average their members' occupancies.
pub fn occupancy(mdp: &TabularMdp, pi: &impl TabularPolicy) -> Result<Occupancy> {
    let members = pi.members();
    if members.is_empty() {
        return Err(Error::Invalid("mixture has no members".into()));
    }
    let mut total = Occupancy::zeros(mdp.num_states, mdp.num_actions, mdp.horizon);
    let weight = 1.0 / members.len() as f64;
    for member in members {
        member.check_shape(mdp)?;
        let mu = markov_occupancy(mdp, member);
        if members.len() == 1 {
            return Ok(mu);
        }
        for (t, x) in total.mu.iter_mut().zip(&mu.mu) {
            *t += weight * x;
        }
    }
    Ok(total)
}

pub(crate) fn markov_occupancy(mdp: &TabularMdp, pi: &MarkovPolicy) -> Occupancy {
    let (n, m, horizon) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut out = Occupancy::zeros(n, m, horizon);
    let mut state_dist = vec![0.0; n];
    state_dist[mdp.initial_state] = 1.0;
    for h in 0..horizon {
        let mut next = vec![0.0; n];
        for s in 0..n {
            let ps = state_dist[s];
            if ps == 0.0 {
                continue;
            }
            for a in 0..m {
                let w = ps * pi.prob(h, s, a);
                *out.get_mut(h, s, a) = w;
                if w == 0.0 {
                    continue;
                }
                for (nx, p) in next.iter_mut().zip(mdp.transition(h, s, a)) {
                    *nx += w * p;
                }
            }
        }
        state_dist = next;
    }
    out
}

/// State distribution reached after the last action (`s_{H+1}`), used by reachability checks.
pub fn terminal_state_distribution(mdp: &TabularMdp, pi: &MarkovPolicy) -> Vec<f64> {
    let mu = markov_occupancy(mdp, pi);
    let h = mdp.horizon - 1;
    let mut out = vec![0.0; mdp.num_states];
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            let w = mu.get(h, s, a);
            for (o, p) in out.iter_mut().zip(mdp.transition(h, s, a)) {
                *o += w * p;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    /// 0-indexed step.
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub next: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub steps: Vec<Transition>,
}

/// Draws one episode. A mixture picks its member uniformly once, before step 1.
pub fn sample_episode<R: Rng + ?Sized>(mdp: &TabularMdp, pi: &impl TabularPolicy, rng: &mut R) -> Episode {
    let members = pi.members();
    assert!(!members.is_empty(), "mixture has no members");
    let member = if members.len() == 1 {
        &members[0]
    } else {
        &members[rng.random_range(0..members.len())]
    };
    let mut s = mdp.initial_state;
    let mut steps = Vec::with_capacity(mdp.horizon);
    for h in 0..mdp.horizon {
        let a = sample_index(member.row(h, s), rng);
        let next = sample_index(mdp.transition(h, s, a), rng);
        steps.push(Transition {
            h,
            s,
            a,
            r: mdp.reward(h, s, a),
            next,
        });
        s = next;
    }
    Episode { steps }
}

/// Inverse-CDF draw. Point masses consume no randomness.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    if let Some(i) = probs.iter().position(|&p| p == 1.0) {
        return i;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `(E_h f)(s, a) = f_h(s, a) − R_h(s, a) − Σ_{s'} P_h(s'|s, a) max_{a'} f_{h+1}(s', a')`, in `[s][a]` order.
pub fn bellman_residual(mdp: &TabularMdp, f: &QFunction, h: usize) -> Result<Vec<f64>> {
    f.check_shape(mdp)?;
    if h >= mdp.horizon {
        return Err(Error::Invalid(format!("step {} beyond horizon {}", h + 1, mdp.horizon)));
    }
    let n = mdp.num_states;
    let next_max: Vec<f64> = (0..n).map(|s| f.max_value(h + 1, s)).collect();
    let mut out = Vec::with_capacity(n * mdp.num_actions);
    for s in 0..n {
        for a in 0..mdp.num_actions {
            out.push(f.get(h, s, a) - mdp.reward(h, s, a) - dot(mdp.transition(h, s, a), &next_max));
        }
    }
    Ok(out)
}

/// Both sides of the value-difference inequality
/// `V^{π'}_1(s1) − V^{π^f}_1(s1) ≤ Σ_h E_{π^f}[E_h f] − Σ_h E_{π'}[E_h f]`.
pub fn value_difference_check(mdp: &TabularMdp, f: &QFunction, pi_prime: &MarkovPolicy) -> Result<(f64, f64)> {
    pi_prime.check_shape(mdp)?;
    let greedy = f.greedy();
    let lhs = evaluate_policy(mdp, pi_prime)?.value() - evaluate_policy(mdp, &greedy)?.value();
    let mut residuals = Vec::with_capacity(mdp.horizon * mdp.num_states * mdp.num_actions);
    for h in 0..mdp.horizon {
        residuals.extend(bellman_residual(mdp, f, h)?);
    }
    let mu_greedy = markov_occupancy(mdp, &greedy);
    let mu_prime = markov_occupancy(mdp, pi_prime);
    let rhs = mu_greedy.expectation(&residuals) - mu_prime.expectation(&residuals);
    Ok((lhs, rhs))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
