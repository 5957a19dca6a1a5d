//! Offline learning oracle: fitted Q-iteration over tabular and linear classes.
//!
//! Records are aggregated per `(h, s, a)` cell into a sorted multiset of
//! `(s', r)` outcomes, so the fitted values do not depend on insertion order.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linear::FeatureMap;
use crate::mdp::{Episode, QFunction, Transition};

pub const RIDGE_LAMBDA: f64 = 1e-6;

/// Value assigned to `(h, s, a)` cells with no data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnvisitedValue {
    #[default]
    Pessimistic,
    Optimistic,
}

impl UnvisitedValue {
    fn value(self) -> f64 {
        match self {
            UnvisitedValue::Pessimistic => 0.0,
            UnvisitedValue::Optimistic => 1.0,
        }
    }
}

/// Append-only transition data for one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    num_records: usize,
    num_episodes: usize,
    /// Per `(h, s, a)`: `(s', reward bits) -> count`.
    cells: Vec<BTreeMap<(usize, u64), u64>>,
    episodes: Option<Vec<Episode>>,
}

impl Dataset {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            cells: vec![BTreeMap::new(); horizon * num_states * num_actions],
            ..Self::default()
        }
    }

    /// Like [`Dataset::new`] but also keeps the raw episodes for export.
    pub fn recording(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            episodes: Some(Vec::new()),
            ..Self::new(num_states, num_actions, horizon)
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_states, self.num_actions, self.horizon)
    }

    pub fn num_records(&self) -> usize {
        self.num_records
    }

    pub fn num_episodes(&self) -> usize {
        self.num_episodes
    }

    pub fn episodes(&self) -> Option<&[Episode]> {
        self.episodes.as_deref()
    }

    pub fn push_episode(&mut self, episode: Episode) -> Result<()> {
        for t in &episode.steps {
            self.check(t)?;
        }
        for t in &episode.steps {
            self.insert(t);
        }
        self.num_episodes += 1;
        if let Some(log) = self.episodes.as_mut() {
            log.push(episode);
        }
        Ok(())
    }

    /// Adds a loose record that is not part of a logged episode.
    pub fn push_record(&mut self, record: Transition) -> Result<()> {
        self.check(&record)?;
        self.insert(&record);
        Ok(())
    }

    pub fn from_records(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        records: impl IntoIterator<Item = Transition>,
    ) -> Result<Self> {
        let mut out = Self::new(num_states, num_actions, horizon);
        for r in records {
            out.push_record(r)?;
        }
        Ok(out)
    }

    fn check(&self, t: &Transition) -> Result<()> {
        if t.h >= self.horizon {
            return Err(Error::Invalid(format!(
                "record step {} exceeds horizon {}",
                t.h + 1,
                self.horizon
            )));
        }
        if t.s >= self.num_states || t.next >= self.num_states {
            return Err(Error::Invalid(format!(
                "record state ({}, {}) out of range for {} states",
                t.s, t.next, self.num_states
            )));
        }
        if t.a >= self.num_actions {
            return Err(Error::Invalid(format!(
                "record action {} out of range for {} actions",
                t.a, self.num_actions
            )));
        }
        if !t.r.is_finite() {
            return Err(Error::Invalid(format!("non-finite reward {}", t.r)));
        }
        Ok(())
    }

    fn insert(&mut self, t: &Transition) {
        let idx = self.cell_index(t.h, t.s, t.a);
        *self.cells[idx].entry((t.next, t.r.to_bits())).or_insert(0) += 1;
        self.num_records += 1;
    }

    #[inline]
    fn cell_index(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.num_states + s) * self.num_actions + a
    }

    /// Number of records at `(h, s, a)`.
    pub fn count(&self, h: usize, s: usize, a: usize) -> u64 {
        self.cells[self.cell_index(h, s, a)].values().sum()
    }

    /// Sorted `(s', r, count)` outcomes observed at `(h, s, a)`.
    pub fn outcomes(&self, h: usize, s: usize, a: usize) -> impl Iterator<Item = (usize, f64, u64)> + '_ {
        self.cells[self.cell_index(h, s, a)]
            .iter()
            .map(|(&(next, bits), &count)| (next, f64::from_bits(bits), count))
    }
}

/// Exact minimizer of the empirical squared Bellman error over tabular `Q`,
/// computed backward in `h`. Unvisited cells take the `unvisited` default.
pub fn fqi_tabular(data: &Dataset, unvisited: UnvisitedValue) -> QFunction {
    let (n, m, horizon) = data.shape();
    let mut q = QFunction::zeros(n, m, horizon);
    let default = unvisited.value();
    for h in (0..horizon).rev() {
        let next_max: Vec<f64> = (0..n).map(|s| q.max_value(h + 1, s)).collect();
        for s in 0..n {
            for a in 0..m {
                let cell = &data.cells[data.cell_index(h, s, a)];
                let value = if cell.is_empty() {
                    default
                } else {
                    let mut total = 0u64;
                    let mut acc = 0.0;
                    for (&(next, bits), &count) in cell {
                        total += count;
                        acc += count as f64 * (f64::from_bits(bits) + next_max[next]);
                    }
                    acc / total as f64
                };
                q.set(h, s, a, value);
            }
        }
    }
    q
}

/// Per-step weights of a linear action-value function `f_h(s, a) = ⟨φ_h(s, a), w_h⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearQ {
    pub weights: Vec<DVector<f64>>,
}

impl LinearQ {
    pub fn zeros(dim: usize, horizon: usize) -> Self {
        Self {
            weights: vec![DVector::zeros(dim); horizon],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.len())
    }

    /// Largest admissible weight norm, `2√d`.
    pub fn norm_bound(&self) -> f64 {
        2.0 * (self.dim() as f64).sqrt()
    }

    pub fn value(&self, features: &FeatureMap, h: usize, s: usize, a: usize) -> f64 {
        if h >= self.weights.len() {
            return 0.0;
        }
        features.phi(h, s, a).dot(&self.weights[h])
    }

    /// The tabular `Q` this function induces on the finite carrier.
    pub fn to_qfunction(&self, features: &FeatureMap) -> QFunction {
        QFunction::from_fn(
            features.num_states(),
            features.num_actions(),
            features.horizon(),
            |h, s, a| self.value(features, h, s, a),
        )
    }
}

/// Backward ridge-regression FQI with regularizer [`RIDGE_LAMBDA`] and
/// radial projection onto the `2√d` ball.
pub fn fqi_linear(data: &Dataset, features: &FeatureMap) -> Result<LinearQ> {
    fqi_linear_with(data, features, RIDGE_LAMBDA)
}

pub fn fqi_linear_with(data: &Dataset, features: &FeatureMap, lambda: f64) -> Result<LinearQ> {
    let (n, m, horizon) = data.shape();
    if (features.num_states(), features.num_actions(), features.horizon()) != (n, m, horizon) {
        return Err(shape_err(format!(
            "feature map covers (S={}, A={}, H={}) but the dataset has (S={n}, A={m}, H={horizon})",
            features.num_states(),
            features.num_actions(),
            features.horizon()
        )));
    }
    let d = features.dim();
    let bound = 2.0 * (d as f64).sqrt();
    let mut out = LinearQ::zeros(d, horizon);
    for h in (0..horizon).rev() {
        let next_max: Vec<f64> = if h + 1 < horizon {
            (0..n)
                .map(|s| {
                    (0..m)
                        .map(|a| out.value(features, h + 1, s, a))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        } else {
            vec![0.0; n]
        };
        let mut gram = DMatrix::<f64>::identity(d, d) * lambda;
        let mut rhs = DVector::<f64>::zeros(d);
        let mut any = false;
        for s in 0..n {
            for a in 0..m {
                let cell = &data.cells[data.cell_index(h, s, a)];
                if cell.is_empty() {
                    continue;
                }
                any = true;
                let phi = features.phi(h, s, a);
                let mut count = 0u64;
                let mut target_sum = 0.0;
                for (&(next, bits), &c) in cell {
                    let y = f64::from_bits(bits) + next_max[next];
                    if !y.is_finite() {
                        return Err(Error::Invalid(format!(
                            "non-finite regression target at step {}",
                            h + 1
                        )));
                    }
                    count += c;
                    target_sum += c as f64 * y;
                }
                gram.ger(count as f64, &phi, &phi, 1.0);
                rhs.axpy(target_sum, &phi, 1.0);
            }
        }
        if !any {
            continue;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Invalid(format!("ridge system at step {} is not positive definite", h + 1)))?;
        let mut w = chol.solve(&rhs);
        let norm = w.norm();
        if norm > bound {
            w *= bound / norm;
        }
        out.weights[h] = w;
    }
    Ok(out)
}

/// Writes `task_id,episode,h,s,a,r,s_next` rows (1-indexed `h`) for recording datasets.
pub fn write_dataset_csv<W: Write>(datasets: &[Dataset], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task_id", "episode", "h", "s", "a", "r", "s_next"])?;
    for (task, data) in datasets.iter().enumerate() {
        let episodes = data
            .episodes()
            .ok_or_else(|| Error::Invalid(format!("dataset {task} does not record episodes")))?;
        for (e, ep) in episodes.iter().enumerate() {
            for t in &ep.steps {
                w.write_record(&[
                    task.to_string(),
                    e.to_string(),
                    (t.h + 1).to_string(),
                    t.s.to_string(),
                    t.a.to_string(),
                    t.r.to_string(),
                    t.next.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
