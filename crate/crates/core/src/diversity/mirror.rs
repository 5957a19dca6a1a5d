//! Mirror transitions: redirect the mass of barely reachable states to an
//! absorbing dummy state so every remaining state is either unreachable or
//! reachable with probability above a threshold.

use serde::Serialize;

use super::generators::max_reach_at;
use crate::error::{Error, Result};
use crate::mdp::{markov_occupancy, MarkovPolicy, TabularMdp};

/// Output of [`mirror_transform`]. The dummy state is the last index, `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mirror {
    pub mdp: TabularMdp,
    pub dummy: usize,
    /// `(h, s)` pairs whose incoming mass was redirected, 0-indexed step of arrival.
    pub redirected: Vec<(usize, usize)>,
}

/// Builds the mirror MDP on `S + 1` states.
///
/// For each arrival step `h + 1 = 1..H−1` (0-indexed) and each state in
/// ascending order, a state whose max reach at `h + 1` under the partially
/// updated kernel is at most `beta` has its incoming mass at step `h` moved to
/// the dummy. Reach is recomputed after every redirection.
pub fn mirror_transform(base: &TabularMdp, beta: f64) -> Result<Mirror> {
    if !(beta > 0.0) {
        return Err(Error::Invalid(format!("mirror threshold must be positive, got {beta}")));
    }
    let (n, m, horizon) = (base.num_states(), base.num_actions(), base.horizon());
    let n1 = n + 1;
    let dummy = n;
    let mut p = vec![0.0; horizon * n1 * m * n1];
    let mut r = vec![0.0; horizon * n1 * m];
    for h in 0..horizon {
        for s in 0..n1 {
            for a in 0..m {
                let row = &mut p[((h * n1 + s) * m + a) * n1..((h * n1 + s) * m + a + 1) * n1];
                if s == dummy {
                    row[dummy] = 1.0;
                } else {
                    row[..n].copy_from_slice(base.transition(h, s, a));
                    r[(h * n1 + s) * m + a] = base.reward(h, s, a);
                }
            }
        }
    }
    let build = |p: &[f64]| {
        TabularMdp::from_flat(n1, m, horizon, base.initial_state(), p.to_vec(), r.clone())
            .expect("mirror shapes are consistent")
    };
    let mut current = build(&p);
    let mut redirected = Vec::new();
    for h in 0..horizon.saturating_sub(1) {
        for s in 0..n {
            if max_reach_at(&current, h + 1, s) > beta {
                continue;
            }
            let mut moved = false;
            for src in 0..n1 {
                for a in 0..m {
                    let row = ((h * n1 + src) * m + a) * n1;
                    let mass = p[row + s];
                    if mass != 0.0 {
                        p[row + dummy] += mass;
                        p[row + s] = 0.0;
                        moved = true;
                    }
                }
            }
            if moved {
                redirected.push((h + 1, s));
                current = build(&p);
            }
        }
    }
    Ok(Mirror {
        mdp: current,
        dummy,
        redirected,
    })
}

/// Extends a base policy to the mirror's state space; the dummy row is uniform.
pub fn extend_policy(pi: &MarkovPolicy) -> MarkovPolicy {
    let (n, m, horizon) = (pi.num_states(), pi.num_actions(), pi.horizon());
    let mut probs = Vec::with_capacity(horizon * (n + 1) * m);
    for h in 0..horizon {
        for s in 0..n {
            probs.extend_from_slice(pi.row(h, s));
        }
        probs.extend(std::iter::repeat(1.0 / m as f64).take(m));
    }
    MarkovPolicy::from_probs_unchecked(n + 1, m, horizon, probs)
}

/// Result of checking both mirror properties.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MirrorAudit {
    pub beta: f64,
    /// `(h, s, reach)` for non-dummy cells violating "0 or > β".
    pub reach_violations: Vec<(usize, usize, f64)>,
    /// Smallest `μ'^π_h(s) − (μ^π_h(s) − H·S·β)` over checked policies and non-dummy cells.
    pub occupancy_margin: f64,
    /// Largest `max_π μ'_h(s0) − (h−1)·S·β` (1-indexed `h`); nonpositive when the dummy bound holds.
    pub dummy_excess: f64,
}

impl MirrorAudit {
    pub fn passes(&self, slack: f64) -> bool {
        self.reach_violations.is_empty() && self.occupancy_margin >= -slack && self.dummy_excess <= slack
    }
}

/// Checks the mirror's reach dichotomy exactly and the occupancy lower bound on `policies`.
pub fn audit_mirror(base: &TabularMdp, mirror: &Mirror, beta: f64, policies: &[MarkovPolicy]) -> Result<MirrorAudit> {
    let (n, horizon) = (base.num_states(), base.horizon());
    let mut reach_violations = Vec::new();
    let mut dummy_excess = f64::NEG_INFINITY;
    for h in 0..horizon {
        for s in 0..n {
            let reach = max_reach_at(&mirror.mdp, h, s);
            if reach != 0.0 && reach <= beta {
                reach_violations.push((h, s, reach));
            }
        }
        let dummy_reach = max_reach_at(&mirror.mdp, h, mirror.dummy);
        dummy_excess = dummy_excess.max(dummy_reach - h as f64 * n as f64 * beta);
    }
    let slack = horizon as f64 * n as f64 * beta;
    let mut margin = f64::INFINITY;
    for pi in policies {
        pi.check_shape(base)?;
        let mu = markov_occupancy(base, pi);
        let mu_mirror = markov_occupancy(&mirror.mdp, &extend_policy(pi));
        for h in 0..horizon {
            for s in 0..n {
                margin = margin.min(mu_mirror.state(h, s) - (mu.state(h, s) - slack));
            }
        }
    }
    Ok(MirrorAudit {
        beta,
        reach_violations,
        occupancy_margin: margin,
        dummy_excess,
    })
}
