//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtrl_core::diversity::DEFAULT_ENUMERATION_CAP;
use mtrl_core::exploration::NoiseMode;
use mtrl_core::{default_schedule, ExplorationSchedule, ScheduleVariant};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MtrlRun,
    SingleTaskRun,
    CurriculumRun,
    MegAudit,
    LemmaLinear2,
    LqrSuite,
    MirrorAudit,
}

impl ExperimentKind {
    pub fn is_audit(self) -> bool {
        matches!(
            self,
            Self::MegAudit | Self::LemmaLinear2 | Self::LqrSuite | Self::MirrorAudit
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MtrlRun => "mtrl_run",
            Self::SingleTaskRun => "single_task_run",
            Self::CurriculumRun => "curriculum_run",
            Self::MegAudit => "meg_audit",
            Self::LemmaLinear2 => "lemma_linear2",
            Self::LqrSuite => "lqr_suite",
            Self::MirrorAudit => "mirror_audit",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.into()))
            .with_context(|| format!("unknown experiment kind `{name}`"))
    }
}

/// A size that is either fixed or drawn uniformly from an inclusive range per instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Size {
    Fixed(usize),
    Range([usize; 2]),
}

impl Size {
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> usize {
        match self {
            Size::Fixed(n) => n,
            Size::Range([lo, hi]) => rng.random_range(lo..=hi),
        }
    }

    fn min(self) -> usize {
        match self {
            Size::Fixed(n) => n,
            Size::Range([lo, _]) => lo,
        }
    }

    fn check(self, path: &str) -> Result<()> {
        if let Size::Range([lo, hi]) = self {
            if lo > hi {
                bail!("{path}: empty range [{lo}, {hi}]");
            }
        }
        if self.min() == 0 {
            bail!("{path}: must be at least 1");
        }
        Ok(())
    }
}

/// Where the environment comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    /// The `n`-task hallway; single-task kinds use the far-end task.
    Hallway { n: usize },
    /// Every sparse-reward task on the dynamics of a tabular base file.
    Sparse { base: PathBuf },
    /// Environment files in the format of the experiment kind.
    Files { paths: Vec<PathBuf> },
    /// A fresh random tabular instance per seed.
    Random {
        states: Size,
        actions: Size,
        horizon: Size,
        /// Number of tasks sharing the random transitions.
        #[serde(default = "one")]
        tasks: usize,
        /// Sparse rewards instead of dense ones.
        #[serde(default)]
        sparse: bool,
        /// Successor states per transition row; dense when absent.
        #[serde(default)]
        support: Option<usize>,
    },
    /// A fresh random well-posed LQR system per seed.
    RandomLqr { ds: Size, da: Size, horizon: Size },
}

fn one() -> usize {
    1
}

impl EnvSpec {
    pub fn is_random(&self) -> bool {
        matches!(self, EnvSpec::Random { .. } | EnvSpec::RandomLqr { .. })
    }

    fn check(&self) -> Result<()> {
        match self {
            EnvSpec::Hallway { n } if *n == 0 => bail!("env.hallway.n: must be at least 1"),
            EnvSpec::Files { paths } if paths.is_empty() => bail!("env.files.paths: must be nonempty"),
            EnvSpec::Random {
                states,
                actions,
                horizon,
                tasks,
                support,
                ..
            } => {
                states.check("env.random.states")?;
                actions.check("env.random.actions")?;
                horizon.check("env.random.horizon")?;
                if *tasks == 0 {
                    bail!("env.random.tasks: must be at least 1");
                }
                if *support == Some(0) {
                    bail!("env.random.support: must be at least 1");
                }
                Ok(())
            }
            EnvSpec::RandomLqr { ds, da, horizon } => {
                ds.check("env.random_lqr.ds")?;
                da.check("env.random_lqr.da")?;
                horizon.check("env.random_lqr.horizon")
            }
            _ => Ok(()),
        }
    }
}

/// Exploration schedule, resolved once the horizon is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `ε_h = 1/(h+1)`.
    Thm2,
    /// `ε_h = 1/h`.
    PropC,
    Constant {
        eps: f64,
    },
    Custom {
        eps: Vec<f64>,
    },
    /// Gaussian exploration with constant `σ`; `ε` is constant if given, else `1/(h+1)`.
    Gaussian {
        sigma: f64,
        #[serde(default)]
        eps: Option<f64>,
        #[serde(default)]
        noise: NoiseMode,
    },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::Thm2
    }
}

impl ScheduleSpec {
    pub fn build(&self, horizon: usize) -> Result<ExplorationSchedule> {
        let sched = match self {
            ScheduleSpec::Thm2 => default_schedule(horizon, ScheduleVariant::Thm2),
            ScheduleSpec::PropC => default_schedule(horizon, ScheduleVariant::PropC),
            ScheduleSpec::Constant { eps } => {
                ExplorationSchedule::constant(horizon, *eps).context("schedule.constant.eps")?
            }
            ScheduleSpec::Custom { eps } => {
                if eps.len() != horizon {
                    bail!(
                        "schedule.custom.eps: has {} entries, the horizon is {horizon}",
                        eps.len()
                    );
                }
                ExplorationSchedule::epsilon_greedy(eps.clone()).context("schedule.custom.eps")?
            }
            ScheduleSpec::Gaussian { sigma, eps, noise } => {
                let eps = match eps {
                    Some(e) => vec![*e; horizon],
                    None => default_schedule(horizon, ScheduleVariant::Thm2).eps().to_vec(),
                };
                ExplorationSchedule::gaussian(vec![*sigma; horizon], eps, *noise).context("schedule.gaussian")?
            }
        };
        Ok(sched)
    }
}

/// Either an explicit seed list or `count` consecutive seeds from `start`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl SeedSpec {
    pub fn expand(&self) -> Vec<u64> {
        match self {
            SeedSpec::List(v) => v.clone(),
            SeedSpec::Range { start, count } => (*start..start + count).collect(),
        }
    }
}

/// The joint value function audited by `meg_audit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum JointSpec {
    /// Every task's Q-table is 1 on `action` and 0 elsewhere.
    ConstantAction { action: usize },
    /// Uniform random Q-tables per seed, redrawn until the joint is β-suboptimal.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required by `run`; `audit` takes the kind from the command line.
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    pub env: EnvSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub beta: Option<f64>,
    pub seeds: SeedSpec,
    pub output: PathBuf,
    /// Log every this many rounds.
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Stop a seed once every task is β-optimal.
    #[serde(default)]
    pub stop_at_beta: bool,
    /// Curriculum failure probability.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Candidate-policy cap for exact MEG.
    #[serde(default = "default_cap")]
    pub cap: u64,
    /// Report unenumerable instances instead of failing.
    #[serde(default)]
    pub skip_unenumerable: bool,
    #[serde(default)]
    pub joint: Option<JointSpec>,
    /// Upper bound asserted on the MEG.
    #[serde(default)]
    pub max_alpha: Option<f64>,
    /// Assert the sparse-set lower bound at the critical layer (`sparse` envs).
    #[serde(default)]
    pub lower_bound: bool,
    /// Mirror thresholds; defaults to `[beta]`.
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
    /// Random policies per mirror instance.
    #[serde(default = "default_policies")]
    pub policies: usize,
    /// Random states per Riccati optimality check.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Random gain sets each Riccati solution must beat.
    #[serde(default = "default_policies")]
    pub random_gains: usize,
    /// Check the diverse-LQR state covariance (needs a Gaussian schedule).
    #[serde(default)]
    pub coverage: bool,
    #[serde(default = "default_slack")]
    pub slack: f64,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
}

fn default_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}

fn default_policies() -> usize {
    100
}

fn default_trials() -> usize {
    100
}

fn default_slack() -> f64 {
    1e-9
}

fn default_residual_tol() -> f64 {
    1e-6
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("{}: {}", if path.is_empty() { "." } else { &path }, e.inner())
        })
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.expand()
    }

    /// Kind-specific required fields and value ranges.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if let Some(k) = self.kind {
            if k != kind {
                bail!(
                    "kind: config declares `{}` but `{}` was requested",
                    k.name(),
                    kind.name()
                );
            }
        }
        let seeds = self.seeds();
        if seeds.is_empty() {
            bail!("seeds: must be nonempty");
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            bail!("seeds: seed {} appears more than once", w[0]);
        }
        if let Some(beta) = self.beta {
            if !(beta > 0.0 && beta.is_finite()) {
                bail!("beta: must be positive, got {beta}");
            }
        }
        if let Some(betas) = &self.betas {
            if betas.is_empty() {
                bail!("betas: must be nonempty");
            }
            if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && b.is_finite())) {
                bail!("betas[{i}]: must be positive, got {b}");
            }
        }
        if !(self.slack >= 0.0) {
            bail!("slack: must be nonnegative");
        }
        if self.eval_every == 0 {
            bail!("eval_every: must be at least 1");
        }
        self.env.check()?;
        let need_beta = || {
            self.beta
                .ok_or_else(|| anyhow::anyhow!("beta: required for kind {}", kind.name()))
        };
        match kind {
            ExperimentKind::MtrlRun | ExperimentKind::SingleTaskRun => {
                match self.rounds {
                    None => bail!("rounds: required for kind {}", kind.name()),
                    Some(0) => bail!("rounds: must be at least 1"),
                    _ => {}
                }
                need_beta()?;
                self.require_tabular_env(kind)?;
            }
            ExperimentKind::CurriculumRun => {
                match self.delta {
                    None => bail!("delta: required for kind curriculum_run"),
                    Some(d) if !(d > 0.0 && d < 1.0) => bail!("delta: must lie in (0, 1), got {d}"),
                    _ => {}
                }
                self.require_tabular_env(kind)?;
            }
            ExperimentKind::MegAudit => {
                need_beta()?;
                if self.joint.is_none() {
                    bail!("joint: required for kind meg_audit");
                }
                if self.lower_bound && !matches!(self.env, EnvSpec::Sparse { .. }) {
                    bail!("lower_bound: needs a `sparse` env");
                }
                self.require_tabular_env(kind)?;
            }
            ExperimentKind::LemmaLinear2 => {
                if matches!(self.env, EnvSpec::RandomLqr { .. }) {
                    bail!("env: lemma_linear2 needs a tabular or linear environment");
                }
            }
            ExperimentKind::LqrSuite => {
                if !matches!(self.env, EnvSpec::RandomLqr { .. } | EnvSpec::Files { .. }) {
                    bail!("env: lqr_suite needs `random_lqr` or `files`");
                }
                if self.coverage && !matches!(self.schedule, ScheduleSpec::Gaussian { .. }) {
                    bail!("schedule: coverage needs a gaussian schedule");
                }
            }
            ExperimentKind::MirrorAudit => {
                if self.betas.is_none() {
                    need_beta()?;
                }
                self.require_tabular_env(kind)?;
            }
        }
        Ok(())
    }

    fn require_tabular_env(&self, kind: ExperimentKind) -> Result<()> {
        if matches!(self.env, EnvSpec::RandomLqr { .. }) {
            bail!("env: kind {} needs a tabular environment", kind.name());
        }
        let run_kind = matches!(
            kind,
            ExperimentKind::MtrlRun | ExperimentKind::SingleTaskRun | ExperimentKind::CurriculumRun
        );
        if run_kind && self.env.is_random() {
            bail!("env: kind {} needs a fixed environment", kind.name());
        }
        Ok(())
    }

    pub fn mirror_betas(&self) -> Vec<f64> {
        self.betas.clone().unwrap_or_else(|| self.beta.into_iter().collect())
    }
}
