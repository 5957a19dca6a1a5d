//! Myopic exploration: ε-greedy and Gaussian wrappers, schedules, and
//! episode-level policy mixtures.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::lqr::GainPolicy;
use crate::mdp::{MarkovPolicy, TabularPolicy};

/// How the Gaussian explore branch produces its action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// With probability `ε_h` the action is pure noise `η ~ N(0, σ_h² I)`.
    #[default]
    Mixture,
    /// With probability `ε_h` the action is `F_h s + η`.
    Additive,
}

impl NoiseMode {
    fn is_default(&self) -> bool {
        *self == NoiseMode::Mixture
    }
}

/// Per-step exploration parameters; index `h` is the 0-indexed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExplorationSchedule {
    EpsilonGreedy {
        eps: Vec<f64>,
    },
    Gaussian {
        sigma: Vec<f64>,
        eps: Vec<f64>,
        #[serde(default, skip_serializing_if = "NoiseMode::is_default")]
        noise: NoiseMode,
    },
}

/// The two named ε-schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleVariant {
    /// `ε_h = 1/(h+1)` (1-indexed `h`).
    Thm2,
    /// `ε_h = 1/h`, so `ε_1 = 1`.
    PropC,
}

impl ExplorationSchedule {
    pub fn epsilon_greedy(eps: Vec<f64>) -> Result<Self> {
        let sched = Self::EpsilonGreedy { eps };
        sched.validate()?;
        Ok(sched)
    }

    pub fn constant(horizon: usize, eps: f64) -> Result<Self> {
        Self::epsilon_greedy(vec![eps; horizon])
    }

    pub fn gaussian(sigma: Vec<f64>, eps: Vec<f64>, noise: NoiseMode) -> Result<Self> {
        let sched = Self::Gaussian { sigma, eps, noise };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.eps();
        if eps.is_empty() {
            return Err(Error::Invalid("schedule must cover at least one step".into()));
        }
        if let Some((h, e)) = eps.iter().enumerate().find(|(_, e)| !(0.0..=1.0).contains(*e)) {
            return Err(Error::Invalid(format!("eps[{}] = {e} outside [0, 1]", h + 1)));
        }
        if let Self::Gaussian { sigma, .. } = self {
            if sigma.len() != eps.len() {
                return Err(shape_err(format!(
                    "sigma has {} entries but eps has {}",
                    sigma.len(),
                    eps.len()
                )));
            }
            if let Some((h, s)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
                return Err(Error::Invalid(format!("sigma[{}] = {s} must be positive", h + 1)));
            }
        }
        Ok(())
    }

    pub fn eps(&self) -> &[f64] {
        match self {
            Self::EpsilonGreedy { eps } | Self::Gaussian { eps, .. } => eps,
        }
    }

    pub fn horizon(&self) -> usize {
        self.eps().len()
    }

    /// `∏_{h' < h} (1 − ε_{h'})`, the probability of exploiting at every step before `h`.
    pub fn survival(&self, h: usize) -> f64 {
        self.eps()[..h].iter().map(|e| 1.0 - e).product()
    }

    /// `ε_h ∏_{h' < h} (1 − ε_{h'})`.
    pub fn survival_then_explore(&self, h: usize) -> f64 {
        self.survival(h) * self.eps()[h]
    }
}

pub fn default_schedule(horizon: usize, variant: ScheduleVariant) -> ExplorationSchedule {
    let eps = (1..=horizon)
        .map(|h| match variant {
            ScheduleVariant::Thm2 => 1.0 / (h as f64 + 1.0),
            ScheduleVariant::PropC => 1.0 / h as f64,
        })
        .collect();
    ExplorationSchedule::EpsilonGreedy { eps }
}

/// `expl(π)_h(a|s) = (1 − ε_h) π_h(a|s) + ε_h / A`.
pub fn eps_greedy(pi: &MarkovPolicy, sched: &ExplorationSchedule) -> Result<MarkovPolicy> {
    let eps = match sched {
        ExplorationSchedule::EpsilonGreedy { eps } => eps,
        ExplorationSchedule::Gaussian { .. } => {
            return Err(Error::Invalid("eps_greedy needs an epsilon_greedy schedule".into()))
        }
    };
    if eps.len() != pi.horizon() {
        return Err(shape_err(format!(
            "schedule covers {} steps but the policy has horizon {}",
            eps.len(),
            pi.horizon()
        )));
    }
    let (n, m) = (pi.num_states(), pi.num_actions());
    let uniform = 1.0 / m as f64;
    let mut probs = Vec::with_capacity(pi.probs_flat().len());
    for (h, &e) in eps.iter().enumerate() {
        for s in 0..n {
            probs.extend(pi.row(h, s).iter().map(|&p| (1.0 - e) * p + e * uniform));
        }
    }
    Ok(MarkovPolicy::from_probs_unchecked(n, m, pi.horizon(), probs))
}

/// Shape descriptor shared by all members of a mixture.
pub trait PolicyShape {
    fn shape(&self) -> (usize, usize, usize);
}

impl PolicyShape for MarkovPolicy {
    fn shape(&self) -> (usize, usize, usize) {
        (self.num_states(), self.num_actions(), self.horizon())
    }
}

/// Episode-level uniform mixture: one member is drawn before the episode starts.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture<P> {
    members: Vec<P>,
}

pub type MixturePolicy = Mixture<MarkovPolicy>;

impl<P: PolicyShape> Mixture<P> {
    pub fn new(members: Vec<P>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Invalid("a mixture needs at least one policy".into()))?
            .shape();
        if let Some(i) = members.iter().position(|p| p.shape() != first) {
            return Err(shape_err(format!(
                "mixture member {i} has shape {:?}, expected {first:?}",
                members[i].shape()
            )));
        }
        Ok(Self { members })
    }
}

impl<P> Mixture<P> {
    pub fn members(&self) -> &[P] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &P {
        if self.members.len() == 1 {
            &self.members[0]
        } else {
            &self.members[rng.random_range(0..self.members.len())]
        }
    }
}

pub fn mixture<P: PolicyShape>(policies: Vec<P>) -> Result<Mixture<P>> {
    Mixture::new(policies)
}

impl TabularPolicy for Mixture<MarkovPolicy> {
    fn members(&self) -> &[MarkovPolicy] {
        &self.members
    }
}

/// Stochastic linear policy: the gain action `F_h s` or Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianExplorer {
    gains: GainPolicy,
    sigma: Vec<f64>,
    eps: Vec<f64>,
    noise: NoiseMode,
}

pub fn gaussian_expl(gains: &GainPolicy, sched: &ExplorationSchedule) -> Result<GaussianExplorer> {
    let (sigma, eps, noise) = match sched {
        ExplorationSchedule::Gaussian { sigma, eps, noise } => (sigma, eps, *noise),
        ExplorationSchedule::EpsilonGreedy { .. } => {
            return Err(Error::Invalid("gaussian_expl needs a gaussian schedule".into()))
        }
    };
    sched.validate()?;
    if eps.len() != gains.horizon() {
        return Err(shape_err(format!(
            "schedule covers {} steps but the gains cover {}",
            eps.len(),
            gains.horizon()
        )));
    }
    Ok(GaussianExplorer {
        gains: gains.clone(),
        sigma: sigma.clone(),
        eps: eps.clone(),
        noise,
    })
}

impl GaussianExplorer {
    pub fn gains(&self) -> &GainPolicy {
        &self.gains
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    /// Draws the action at step `h`. With `ε_h = 0` no randomness is consumed.
    pub fn act<R: Rng + ?Sized>(&self, h: usize, state: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let gain_action = &self.gains.gains()[h] * state;
        let e = self.eps[h];
        if e == 0.0 {
            return gain_action;
        }
        let explore = e == 1.0 || rng.random::<f64>() < e;
        if !explore {
            return gain_action;
        }
        let sigma = self.sigma[h];
        let noise = DVector::from_fn(gain_action.len(), |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        match self.noise {
            NoiseMode::Mixture => noise,
            NoiseMode::Additive => gain_action + noise,
        }
    }
}

impl PolicyShape for GaussianExplorer {
    fn shape(&self) -> (usize, usize, usize) {
        self.gains.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::occupancy;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn greedy_a0(n: usize, m: usize, horizon: usize) -> MarkovPolicy {
        MarkovPolicy::deterministic(n, m, horizon, &vec![0; n * horizon])
    }

    #[test]
    fn eps_zero_is_identity_and_one_is_uniform() {
        let pi = greedy_a0(3, 4, 2);
        assert_eq!(
            eps_greedy(&pi, &ExplorationSchedule::constant(2, 0.0).unwrap()).unwrap(),
            pi
        );
        let u = eps_greedy(&pi, &ExplorationSchedule::constant(2, 1.0).unwrap()).unwrap();
        assert!(u.probs_flat().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn half_eps_on_two_actions() {
        let pi = greedy_a0(1, 2, 1);
        let out = eps_greedy(&pi, &ExplorationSchedule::constant(1, 0.5).unwrap()).unwrap();
        assert_eq!(out.row(0, 0), &[0.75, 0.25]);
    }

    #[test]
    fn named_schedules() {
        assert_eq!(
            default_schedule(4, ScheduleVariant::Thm2).eps(),
            &[0.5, 1.0 / 3.0, 0.25, 0.2]
        );
        assert_eq!(
            default_schedule(4, ScheduleVariant::PropC).eps(),
            &[1.0, 0.5, 1.0 / 3.0, 0.25]
        );
        let thm2 = default_schedule(4, ScheduleVariant::Thm2);
        // (1/2)(2/3)(1/4)
        assert!((thm2.survival_then_explore(2) - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn thm2_survival_telescopes() {
        let sched = default_schedule(64, ScheduleVariant::Thm2);
        for h in 1..=64 {
            // survival before 1-indexed step h
            let s = sched.survival(h - 1);
            assert!((s - 1.0 / h as f64).abs() < 1e-14 / h as f64 * 64.0, "h={h}: {s}");
        }
    }

    #[test]
    fn schedule_json_shape() {
        let s = ExplorationSchedule::constant(2, 0.5).unwrap();
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"kind":"epsilon_greedy","eps":[0.5,0.5]}"#
        );
        let g = ExplorationSchedule::gaussian(vec![1.0], vec![0.5], NoiseMode::Mixture).unwrap();
        assert_eq!(
            serde_json::to_string(&g).unwrap(),
            r#"{"kind":"gaussian","sigma":[1.0],"eps":[0.5]}"#
        );
        let back: ExplorationSchedule =
            serde_json::from_str(r#"{"kind":"gaussian","sigma":[1.0],"eps":[0.5]}"#).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(ExplorationSchedule::constant(2, 1.5).is_err());
        assert!(ExplorationSchedule::gaussian(vec![0.0], vec![0.5], NoiseMode::Mixture).is_err());
        assert!(Mixture::<MarkovPolicy>::new(vec![]).is_err());
        assert!(Mixture::new(vec![greedy_a0(2, 2, 2), greedy_a0(3, 2, 2)]).is_err());
    }

    #[test]
    fn copies_mixture_matches_member() {
        let mdp = crate::diversity::gen_hallway(3).base;
        let pi = eps_greedy(&greedy_a0(4, 2, 3), &default_schedule(3, ScheduleVariant::Thm2)).unwrap();
        let mix = Mixture::new(vec![pi.clone(); 4]).unwrap();
        let a = occupancy(&mdp, &mix).unwrap();
        let b = occupancy(&mdp, &pi).unwrap();
        for (x, y) in a.as_flat().iter().zip(b.as_flat()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gaussian_zero_eps_is_deterministic() {
        let gains = GainPolicy::new(vec![DMatrix::from_element(1, 2, 0.5); 3]).unwrap();
        let sched = ExplorationSchedule::gaussian(vec![1.0; 3], vec![0.0; 3], NoiseMode::Mixture).unwrap();
        let ex = gaussian_expl(&gains, &sched).unwrap();
        let s = DVector::from_vec(vec![1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(ex.act(1, &s, &mut rng)[0], 1.5);
    }

    #[test]
    fn gaussian_pure_noise_variance() {
        let gains = GainPolicy::new(vec![DMatrix::zeros(2, 2)]).unwrap();
        let sigma = 0.7;
        let sched = ExplorationSchedule::gaussian(vec![sigma], vec![1.0], NoiseMode::Mixture).unwrap();
        let ex = gaussian_expl(&gains, &sched).unwrap();
        let s = DVector::from_vec(vec![1.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<_> = (0..10_000).map(|_| ex.act(0, &s, &mut rng)).collect();
        for k in 0..2 {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / 10_000.0;
            let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / 9_999.0;
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "coordinate {k}: var {var}");
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for h in 0..20 {
            assert_eq!(ex.act(0, &s, &mut r1), ex.act(0, &s, &mut r2), "draw {h}");
        }
    }
}
