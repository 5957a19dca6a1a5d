//! Task-set generators and reachability.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Action that moves one state toward 0 (clamped).
pub const BACKWARD: usize = 0;
/// Action that moves one state toward `N` (clamped).
pub const FORWARD: usize = 1;

/// The hallway base MDP and its goal-indexed tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct HallwaySet {
    pub base: TabularMdp,
    /// `tasks[i - 1]` is task `i`, rewarded for stepping forward into state `i` at step `i`.
    pub tasks: Vec<TabularMdp>,
    /// The far-end task alone.
    pub single: TabularMdp,
}

/// Goal tuple `(h, s, a)` of hallway task `i ≥ 1`, 0-indexed step and state.
pub fn hallway_goal(i: usize) -> (usize, usize, usize) {
    (i - 1, i - 1, FORWARD)
}

/// Hallway with states `0..=n`, start 0, horizon `n`, deterministic forward
/// and backward moves.
///
/// Reaching state `i` takes `i` forward moves, the `i`-th of which happens at
/// step `i`; task `i` pays 1 for that move, so its optimal value is 1.
pub fn gen_hallway(n: usize) -> HallwaySet {
    assert!(n >= 1, "the hallway needs at least one step");
    let (states, actions, horizon) = (n + 1, 2, n);
    let mut p = vec![0.0; horizon * states * actions * states];
    for h in 0..horizon {
        for s in 0..states {
            let back = s.saturating_sub(1);
            let fwd = (s + 1).min(n);
            p[((h * states + s) * actions + BACKWARD) * states + back] = 1.0;
            p[((h * states + s) * actions + FORWARD) * states + fwd] = 1.0;
        }
    }
    let base = TabularMdp::from_flat(states, actions, horizon, 0, p, vec![0.0; horizon * states * actions])
        .expect("hallway shapes are consistent");
    let tasks: Vec<TabularMdp> = (1..=n)
        .map(|i| {
            let (h, s, a) = hallway_goal(i);
            let mut r = vec![0.0; horizon * states * actions];
            r[(h * states + s) * actions + a] = 1.0;
            base.with_rewards(r).expect("reward shape matches")
        })
        .collect();
    let single = tasks[n - 1].clone();
    HallwaySet { base, tasks, single }
}

/// All `S·H` sparse-reward tasks on `base`'s transitions; task `h·S + s` pays 1
/// for any action in state `s` at step `h`.
pub fn gen_sparse_set(base: &TabularMdp) -> Vec<TabularMdp> {
    let (n, m, horizon) = (base.num_states(), base.num_actions(), base.horizon());
    let mut out = Vec::with_capacity(n * horizon);
    for h in 0..horizon {
        for s in 0..n {
            let mut r = vec![0.0; horizon * n * m];
            r[(h * n + s) * m..(h * n + s + 1) * m].fill(1.0);
            out.push(base.with_rewards(r).expect("reward shape matches"));
        }
    }
    out
}

/// Index into [`gen_sparse_set`]'s output.
pub fn sparse_task_index(base: &TabularMdp, h: usize, s: usize) -> usize {
    h * base.num_states() + s
}

/// `max_π Pr_π(s_h = target)` for every `h ∈ 0..H`, by backward optimal-reach DP.
pub fn max_reach(mdp: &TabularMdp, target: usize) -> Vec<f64> {
    (0..mdp.horizon()).map(|h| max_reach_at(mdp, h, target)).collect()
}

/// `max_π Pr_π(s_h = target)` for one step.
pub fn max_reach_at(mdp: &TabularMdp, h: usize, target: usize) -> f64 {
    let n = mdp.num_states();
    let mut v: Vec<f64> = (0..n).map(|s| f64::from(s == target)).collect();
    for k in (0..h).rev() {
        v = (0..n)
            .map(|s| {
                (0..mdp.num_actions())
                    .map(|a| crate::mdp::dot(mdp.transition(k, s, a), &v))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    v[mdp.initial_state()]
}

/// Table of `max_π μ^π_h(s)` in `[h][s]` order.
pub fn max_reach_table(mdp: &TabularMdp) -> Vec<f64> {
    let n = mdp.num_states();
    let mut out = vec![0.0; mdp.horizon() * n];
    for s in 0..n {
        for (h, r) in max_reach(mdp, s).into_iter().enumerate() {
            out[h * n + s] = r;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    /// Minimum positive max-reach over steps `2..=H`; `+∞` when nothing is reachable there.
    pub b1: f64,
    /// `(h, s)` pairs (0-indexed) no policy can reach.
    pub unreachable: Vec<(usize, usize)>,
    /// `max_π μ^π_h(s)` in `[h][s]` order.
    pub reach: Vec<f64>,
}

/// The occupancy lower-bound constant: every `(s, h)` is either unreachable or
/// reachable with probability at least `b1` by some policy.
///
/// The first step is excluded since only `s1` is occupied there.
pub fn coverage_constant(base: &TabularMdp) -> Coverage {
    let n = base.num_states();
    let reach = max_reach_table(base);
    let mut b1 = f64::INFINITY;
    let mut unreachable = Vec::new();
    for h in 0..base.horizon() {
        for s in 0..n {
            let r = reach[h * n + s];
            if r > 0.0 {
                if h > 0 {
                    b1 = b1.min(r);
                }
            } else {
                unreachable.push((h, s));
            }
        }
    }
    Coverage { b1, unreachable, reach }
}

/// Random transition rows over all states, rewards uniform in `[0, 1/H)`.
pub fn random_mdp<R: Rng + ?Sized>(num_states: usize, num_actions: usize, horizon: usize, rng: &mut R) -> TabularMdp {
    let p = random_transitions(num_states, num_actions, horizon, num_states, rng);
    let r = (0..horizon * num_states * num_actions)
        .map(|_| rng.random_range(0.0..1.0) / horizon as f64)
        .collect();
    TabularMdp::from_flat(num_states, num_actions, horizon, 0, p, r).expect("shapes are consistent")
}

/// Random transitions where each row is supported on at most `support` states.
pub fn random_transitions<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    support: usize,
    rng: &mut R,
) -> Vec<f64> {
    let support = support.clamp(1, num_states);
    let mut p = vec![0.0; horizon * num_states * num_actions * num_states];
    for row in p.chunks_mut(num_states) {
        let mut picked: Vec<usize> = (0..num_states).collect();
        for i in 0..support {
            let j = rng.random_range(i..num_states);
            picked.swap(i, j);
        }
        let raw: Vec<f64> = (0..support)
            .map(|_| -rng.random_range(f64::EPSILON..1.0).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        for (&s, x) in picked[..support].iter().zip(raw) {
            row[s] = x / total;
        }
    }
    p
}

/// A random MDP with a single rewarded goal tuple `(h, s, a)` reachable with positive probability.
pub fn random_sparse_mdp<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rng: &mut R,
) -> (TabularMdp, (usize, usize, usize)) {
    loop {
        let support = rng.random_range(1..=num_states);
        let p = random_transitions(num_states, num_actions, horizon, support, rng);
        let base = TabularMdp::from_flat(
            num_states,
            num_actions,
            horizon,
            0,
            p,
            vec![0.0; horizon * num_states * num_actions],
        )
        .expect("shapes are consistent");
        let goal = (
            rng.random_range(0..horizon),
            rng.random_range(0..num_states),
            rng.random_range(0..num_actions),
        );
        if max_reach_at(&base, goal.0, goal.1) == 0.0 {
            continue;
        }
        let mut r = vec![0.0; horizon * num_states * num_actions];
        r[(goal.0 * num_states + goal.1) * num_actions + goal.2] = 1.0;
        return (base.with_rewards(r).expect("reward shape matches"), goal);
    }
}

/// The unique rewarded tuple of a sparse-reward MDP.
pub fn sparse_goal(mdp: &TabularMdp) -> Result<(usize, usize, usize)> {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let mut goal = None;
    for (i, &r) in mdp.rewards_flat().iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        if r != 1.0 || goal.is_some() {
            return Err(Error::Invalid(
                "reward is not sparse: expected a single tuple with reward 1".into(),
            ));
        }
        goal = Some((i / (n * m), (i / m) % n, i % m));
    }
    goal.ok_or_else(|| Error::Invalid("reward is not sparse: every reward is zero".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{evaluate_policy, optimal_values, MarkovPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hallway_shapes_and_values() {
        let one = gen_hallway(1);
        assert_eq!((one.base.num_states(), one.tasks.len()), (2, 1));
        assert_eq!(optimal_values(&one.tasks[0]).value(), 1.0);
        let hall = gen_hallway(4);
        assert!(hall.base.validate().is_empty());
        for (i, task) in hall.tasks.iter().enumerate() {
            assert!(task.validate().is_empty());
            assert_eq!(optimal_values(task).value(), 1.0);
            // i+1 forward moves then anything
            let mut acts = vec![BACKWARD; 4 * 5];
            for h in 0..=i {
                acts[h * 5 + h] = FORWARD;
            }
            let pi = MarkovPolicy::deterministic(5, 2, 4, &acts);
            assert_eq!(evaluate_policy(task, &pi).unwrap().value(), 1.0);
        }
        assert_eq!(hall.single, hall.tasks[3]);
    }

    #[test]
    fn hallway_backward_is_clamped() {
        let hall = gen_hallway(3);
        assert_eq!(hall.base.transition(0, 0, BACKWARD), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(hall.base.transition(2, 3, FORWARD), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sparse_set_count_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = random_mdp(2, 2, 2, &mut rng);
        let set = gen_sparse_set(&base);
        assert_eq!(set.len(), 4);
        // optimal value = max reach, checked against all 16 deterministic policies
        for h in 0..2 {
            for s in 0..2 {
                let task = &set[sparse_task_index(&base, h, s)];
                let mut best: f64 = 0.0;
                for code in 0..16usize {
                    let acts: Vec<usize> = (0..4).map(|k| (code >> k) & 1).collect();
                    let pi = MarkovPolicy::deterministic(2, 2, 2, &acts);
                    best = best.max(evaluate_policy(task, &pi).unwrap().value());
                }
                assert!((optimal_values(task).value() - best).abs() < 1e-15);
                assert!((max_reach_at(&base, h, s) - best).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hallway_tasks_sit_inside_the_sparse_set() {
        let hall = gen_hallway(4);
        let sparse = gen_sparse_set(&hall.base);
        // sparse task (i, step i+1) pays on arrival in state i; hallway task i pays
        // for the move into state i one step earlier, so optimal values agree
        for i in 1..4 {
            let s = &sparse[sparse_task_index(&hall.base, i, i)];
            assert!(s.shares_transitions(&hall.tasks[i - 1]));
            assert_eq!(optimal_values(s).value(), optimal_values(&hall.tasks[i - 1]).value());
        }
    }

    #[test]
    fn coverage_of_hallway_and_branch() {
        let cov = coverage_constant(&gen_hallway(5).base);
        assert_eq!(cov.b1, 1.0);
        // s1 = 0 branches to state 1 w.p. 0.3 and state 2 w.p. 0.7 under either action
        let mut p = vec![0.0; 2 * 3 * 1 * 3];
        p[..3].copy_from_slice(&[0.0, 0.3, 0.7]);
        for s in 1..3 {
            p[s * 3 + s] = 1.0;
        }
        p[9] = 1.0;
        p[13] = 1.0;
        p[17] = 1.0;
        let chain = TabularMdp::from_flat(3, 1, 2, 0, p, vec![0.0; 6]).unwrap();
        let cov = coverage_constant(&chain);
        assert!((cov.b1 - 0.3).abs() < 1e-15);
        assert_eq!(cov.unreachable, vec![(0, 1), (0, 2), (1, 0)]);
    }

    #[test]
    fn sparse_goal_detection() {
        let hall = gen_hallway(3);
        assert_eq!(sparse_goal(&hall.tasks[1]).unwrap(), hallway_goal(2));
        assert!(sparse_goal(&hall.base).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (m, goal) = random_sparse_mdp(3, 2, 3, &mut rng);
            assert_eq!(sparse_goal(&m).unwrap(), goal);
            assert!(m.validate().is_empty());
        }
    }
}
