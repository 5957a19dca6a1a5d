use mtrl_core::diversity::random_mdp;
use mtrl_core::mdp::{policy_value, sample_episode};
use mtrl_core::rng::substream;
use mtrl_core::{eps_greedy, mixture, occupancy, optimal_values, ExplorationSchedule, MarkovPolicy, TabularMdp};
use proptest::prelude::*;

/// Path-enumeration visitation: sums trajectory probabilities, no dynamic programming.
fn brute_occupancy(mdp: &TabularMdp, pi: &MarkovPolicy) -> Vec<f64> {
    let (n, m, horizon) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut mu = vec![0.0; horizon * n * m];
    fn walk(mdp: &TabularMdp, pi: &MarkovPolicy, h: usize, s: usize, p: f64, mu: &mut [f64]) {
        if h == mdp.horizon() || p == 0.0 {
            return;
        }
        let (n, m) = (mdp.num_states(), mdp.num_actions());
        for a in 0..m {
            let pa = p * pi.prob(h, s, a);
            mu[(h * n + s) * m + a] += pa;
            for (next, &q) in mdp.transition(h, s, a).iter().enumerate() {
                walk(mdp, pi, h + 1, next, pa * q, mu);
            }
        }
    }
    walk(mdp, pi, 0, mdp.initial_state(), 1.0, &mut mu);
    mu
}

/// Every deterministic Markov policy on a tiny instance.
fn all_deterministic(n: usize, m: usize, horizon: usize) -> Vec<MarkovPolicy> {
    let cells = n * horizon;
    (0..m.pow(cells as u32))
        .map(|mut code| {
            let actions: Vec<usize> = (0..cells)
                .map(|_| {
                    let a = code % m;
                    code /= m;
                    a
                })
                .collect();
            MarkovPolicy::deterministic(n, m, horizon, &actions)
        })
        .collect()
}

fn instance() -> impl Strategy<Value = (TabularMdp, MarkovPolicy, u64)> {
    (1usize..=3, 1usize..=3, 1usize..=3, any::<u64>()).prop_map(|(n, m, h, seed)| {
        let mut rng = substream(seed, 0, 0);
        let mdp = random_mdp(n, m, h, &mut rng);
        let pi = MarkovPolicy::random(n, m, h, &mut rng);
        (mdp, pi, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupancy_layers_are_distributions((mdp, pi, _) in instance()) {
        let mu = occupancy(&mdp, &pi).unwrap();
        for h in 0..mdp.horizon() {
            prop_assert!((mu.layer_sum(h) - 1.0).abs() < 1e-12);
            prop_assert!(mu.layer(h).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn occupancy_matches_path_enumeration((mdp, pi, _) in instance()) {
        let mu = occupancy(&mdp, &pi).unwrap();
        for (x, y) in mu.as_flat().iter().zip(brute_occupancy(&mdp, &pi)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn value_is_occupancy_weighted_reward((mdp, pi, _) in instance()) {
        let brute: f64 = brute_occupancy(&mdp, &pi)
            .iter()
            .zip(mdp.rewards_flat())
            .map(|(m, r)| m * r)
            .sum();
        prop_assert!((policy_value(&mdp, &pi).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn optimal_value_is_best_deterministic((mdp, _, _) in instance()) {
        let (n, m, h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
        prop_assume!(m.pow((n * h) as u32) <= 4096);
        let best = all_deterministic(n, m, h)
            .iter()
            .map(|p| policy_value(&mdp, p).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let opt = optimal_values(&mdp);
        prop_assert!((opt.value() - best).abs() < 1e-12);
        prop_assert!((policy_value(&mdp, &opt.policy).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn eps_greedy_rows_mix_toward_uniform((_, pi, _) in instance(), e in 0.0f64..=1.0) {
        let sched = ExplorationSchedule::constant(pi.horizon(), e).unwrap();
        let x = eps_greedy(&pi, &sched).unwrap();
        let m = pi.num_actions() as f64;
        for h in 0..pi.horizon() {
            for s in 0..pi.num_states() {
                let row = x.row(h, s);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (a, &p) in row.iter().enumerate() {
                    prop_assert!(p >= e / m - 1e-15);
                    prop_assert!((p - ((1.0 - e) * pi.prob(h, s, a) + e / m)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn mixture_occupancy_is_member_average((mdp, pi, seed) in instance()) {
        let mut rng = substream(seed, 0, 1);
        let other = MarkovPolicy::random(mdp.num_states(), mdp.num_actions(), mdp.horizon(), &mut rng);
        let a = brute_occupancy(&mdp, &pi);
        let b = brute_occupancy(&mdp, &other);
        let mix = occupancy(&mdp, &mixture(vec![pi, other]).unwrap()).unwrap();
        for ((x, y), z) in a.iter().zip(&b).zip(mix.as_flat()) {
            prop_assert!((0.5 * (x + y) - z).abs() < 1e-12);
        }
    }
}

#[test]
fn sampler_frequencies_match_occupancy() {
    let mut rng = substream(11, 0, 0);
    let mdp = random_mdp(3, 2, 3, &mut rng);
    let pi = MarkovPolicy::random(3, 2, 3, &mut rng);
    let mu = occupancy(&mdp, &pi).unwrap();
    let episodes = 200_000;
    let mut counts = vec![0usize; mu.as_flat().len()];
    for _ in 0..episodes {
        for t in sample_episode(&mdp, &pi, &mut rng).steps {
            counts[(t.h * 3 + t.s) * 2 + t.a] += 1;
        }
    }
    for h in 0..3 {
        let mut chi2 = 0.0;
        let mut cells = 0;
        for i in h * 6..(h + 1) * 6 {
            let expected = mu.as_flat()[i] * episodes as f64;
            if expected > 0.0 {
                chi2 += (counts[i] as f64 - expected).powi(2) / expected;
                cells += 1;
            } else {
                assert_eq!(counts[i], 0);
            }
        }
        // 0.999 quantile of χ² with at most 5 degrees of freedom
        assert!(chi2 < 20.52, "layer {h}: χ² = {chi2} over {cells} cells");
    }
}
