//! Exploration-gap computations, diverse task-set generators and the mirror transform.

mod generators;
mod meg;
mod mirror;

pub use generators::*;
pub use meg::*;
pub use mirror::*;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exploration::ExplorationSchedule;
use crate::mdp::TabularMdp;

/// Lower-bound check on a full sparse-reward set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparseGapCheck {
    /// First 0-indexed step carrying a β-suboptimal task; always ≥ 1.
    pub critical_layer: usize,
    /// `ε_{h'−1} ∏_{k<h'−1} (1 − ε_k)` with `h'` the critical layer.
    pub kappa: f64,
    pub alpha: f64,
    /// `√(β² κ / (2 |M| A))`.
    pub bound: f64,
    pub margin: f64,
    pub meg: MegResult,
}

/// Exact MEG of a joint on the sparse set of `base`, against the layered lower
/// bound at the first layer with a β-suboptimal task.
///
/// `tasks` must be `gen_sparse_set(base)` (index `h·S + s`).
pub fn sparse_gap_check(
    base: &TabularMdp,
    tasks: &[TabularMdp],
    f: &SuboptimalJoint,
    sched: &ExplorationSchedule,
    cap: u64,
) -> Result<SparseGapCheck> {
    let n = base.num_states();
    if tasks.len() != n * base.horizon() || !tasks.iter().all(|t| t.shares_transitions(base)) {
        return Err(Error::Invalid("expected the full sparse-reward set of the base".into()));
    }
    let beta = f.beta();
    let gaps = greedy_gaps(f.functions(), tasks)?;
    let critical = gaps
        .iter()
        .position(|&g| g > beta)
        .map(|i| i / n)
        .ok_or_else(|| Error::Invalid("joint has no β-suboptimal task".into()))?;
    if critical == 0 {
        return Err(Error::Invalid("a first-step sparse task cannot be suboptimal".into()));
    }
    let kappa = sched.survival_then_explore(critical - 1);
    let meg = meg_exact(f, tasks, sched, cap)?;
    let bound = (beta * beta * kappa / (2.0 * tasks.len() as f64 * base.num_actions() as f64)).sqrt();
    Ok(SparseGapCheck {
        critical_layer: critical,
        kappa,
        alpha: meg.alpha,
        bound,
        margin: meg.alpha - bound,
        meg,
    })
}
