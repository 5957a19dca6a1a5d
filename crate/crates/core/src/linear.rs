//! Linear MDPs over a finite carrier: features `φ_h(s, a)`, measures `ν_h(s')`
//! and reward parameters `θ_h`, with `P_h(s'|s, a) = ⟨φ_h(s, a), ν_h(s')⟩`
//! and `R_h(s, a) = ⟨φ_h(s, a), θ_h⟩`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exploration::{eps_greedy, ExplorationSchedule, Mixture};
use crate::linalg;
use crate::mdp::{occupancy, optimal_values, TabularMdp, TabularPolicy};

pub const NORMALIZATION_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-9;
/// Seed of the random positive directions used by [`coverage_b1`].
pub const COVERAGE_DIRECTION_SEED: u64 = 0x0b1c_0de5;
pub const COVERAGE_RANDOM_DIRECTIONS: usize = 100;

/// Feature map `φ_h(s, a) ∈ R^d`, stored `[h][s][a][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    dim: usize,
    phi: Vec<f64>,
}

impl FeatureMap {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, dim: usize, phi: Vec<f64>) -> Result<Self> {
        let expected = horizon * num_states * num_actions * dim;
        if phi.len() != expected {
            return Err(Error::Dimension {
                tensor: "phi",
                axis: "flat",
                expected,
                found: phi.len(),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            dim,
            phi,
        })
    }

    /// `φ_h(s, a) = e_{s·A + a}`, `d = S·A`.
    pub fn one_hot(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let d = num_states * num_actions;
        let mut phi = vec![0.0; horizon * d * d];
        for h in 0..horizon {
            for k in 0..d {
                phi[(h * d + k) * d + k] = 1.0;
            }
        }
        Self {
            num_states,
            num_actions,
            horizon,
            dim: d,
            phi,
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

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn phi_slice(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = ((h * self.num_states + s) * self.num_actions + a) * self.dim;
        &self.phi[start..start + self.dim]
    }

    pub fn phi(&self, h: usize, s: usize, a: usize) -> DVector<f64> {
        DVector::from_column_slice(self.phi_slice(h, s, a))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            phi: self.phi.iter().map(|x| x * factor).collect(),
            ..self.clone()
        }
    }
}

/// Linear MDP on a finite carrier. `nu` is stored `[h][s'][k]`, `theta` `[h][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMdp {
    features: FeatureMap,
    initial_state: usize,
    nu: Vec<f64>,
    theta: Vec<f64>,
}

impl LinearMdp {
    pub fn new(features: FeatureMap, initial_state: usize, nu: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        let lm = Self::new_unchecked(features, initial_state, nu, theta)?;
        lm.check_invariants()?;
        Ok(lm)
    }

    /// Structural checks only. Normalization is left to the caller, which lets
    /// features be rescaled for coverage experiments.
    pub fn new_unchecked(features: FeatureMap, initial_state: usize, nu: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        let (n, horizon, d) = (features.num_states, features.horizon, features.dim);
        if nu.len() != horizon * n * d {
            return Err(Error::Dimension {
                tensor: "nu",
                axis: "flat",
                expected: horizon * n * d,
                found: nu.len(),
            });
        }
        if theta.len() != horizon * d {
            return Err(Error::Dimension {
                tensor: "theta",
                axis: "flat",
                expected: horizon * d,
                found: theta.len(),
            });
        }
        if initial_state >= n {
            return Err(Error::Invalid(format!("initial state {initial_state} out of range")));
        }
        Ok(Self {
            features,
            initial_state,
            nu,
            theta,
        })
    }

    pub fn check_invariants(&self) -> Result<()> {
        let f = &self.features;
        let (n, m, horizon, d) = (f.num_states, f.num_actions, f.horizon, f.dim);
        let root_d = (d as f64).sqrt();
        if self
            .features
            .phi
            .iter()
            .chain(&self.nu)
            .any(|x| !(*x >= 0.0) || !x.is_finite())
        {
            return Err(Error::Invalid(
                "features and measures must be finite and nonnegative".into(),
            ));
        }
        for h in 0..horizon {
            let theta = self.theta(h);
            if norm(theta) > root_d + NORMALIZATION_TOL {
                return Err(Error::Invalid(format!("‖θ_{}‖ exceeds √d", h + 1)));
            }
            let mut nu_total = vec![0.0; d];
            for s in 0..n {
                let nu = self.nu(h, s);
                if norm(nu) > root_d + NORMALIZATION_TOL {
                    return Err(Error::Invalid(format!("‖ν_{}({s})‖ exceeds √d", h + 1)));
                }
                for (t, x) in nu_total.iter_mut().zip(nu) {
                    *t += x;
                }
            }
            for s in 0..n {
                for a in 0..m {
                    let phi = f.phi_slice(h, s, a);
                    if norm(phi) > 1.0 + NORMALIZATION_TOL {
                        return Err(Error::Invalid(format!("‖φ_{}({s},{a})‖ exceeds 1", h + 1)));
                    }
                    let mass = dot(phi, &nu_total);
                    if (mass - 1.0).abs() > NORMALIZATION_TOL {
                        return Err(Error::Invalid(format!(
                            "transitions at ({},{s},{a}) sum to {mass}, not 1",
                            h + 1
                        )));
                    }
                    let r = dot(phi, theta);
                    if !(-NORMALIZATION_TOL..=1.0 + NORMALIZATION_TOL).contains(&r) {
                        return Err(Error::Invalid(format!(
                            "reward {r} at ({},{s},{a}) outside [0,1]",
                            h + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn dim(&self) -> usize {
        self.features.dim
    }

    pub fn horizon(&self) -> usize {
        self.features.horizon
    }

    pub fn nu(&self, h: usize, s: usize) -> &[f64] {
        let d = self.features.dim;
        let start = (h * self.features.num_states + s) * d;
        &self.nu[start..start + d]
    }

    pub fn theta(&self, h: usize) -> &[f64] {
        let d = self.features.dim;
        &self.theta[h * d..(h + 1) * d]
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new_unchecked(self.features.clone(), self.initial_state, self.nu.clone(), theta)
    }

    /// Scales `φ` by `factor` and `ν`, `θ` by `1/factor`: the same MDP with rescaled features.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Invalid(format!("feature scale must be positive, got {factor}")));
        }
        Self::new_unchecked(
            self.features.scaled(factor),
            self.initial_state,
            self.nu.iter().map(|x| x / factor).collect(),
            self.theta.iter().map(|x| x / factor).collect(),
        )
    }

    pub fn with_features(&self, features: FeatureMap) -> Result<Self> {
        if features.num_states != self.features.num_states
            || features.num_actions != self.features.num_actions
            || features.horizon != self.features.horizon
            || features.dim != self.features.dim
        {
            return Err(shape_err("replacement feature map has a different shape"));
        }
        Self::new_unchecked(features, self.initial_state, self.nu.clone(), self.theta.clone())
    }

    pub fn to_file(&self) -> LinearMdpFile {
        let f = &self.features;
        let (n, m, horizon, d) = (f.num_states, f.num_actions, f.horizon, f.dim);
        LinearMdpFile {
            dim: d,
            initial_state: self.initial_state,
            phi: (0..horizon)
                .map(|h| {
                    (0..n)
                        .map(|s| (0..m).map(|a| f.phi_slice(h, s, a).to_vec()).collect())
                        .collect()
                })
                .collect(),
            nu: (0..horizon)
                .map(|h| (0..n).map(|s| self.nu(h, s).to_vec()).collect())
                .collect(),
            theta: (0..horizon).map(|h| self.theta(h).to_vec()).collect(),
        }
    }

    pub fn from_file(file: &LinearMdpFile) -> Result<Self> {
        let horizon = file.phi.len();
        let n = file.phi.first().map_or(0, Vec::len);
        let m = file.phi.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let d = file.dim;
        let mut phi = Vec::with_capacity(horizon * n * m * d);
        for layer in &file.phi {
            if layer.len() != n {
                return Err(shape_err("phi: ragged state axis"));
            }
            for row in layer {
                if row.len() != m {
                    return Err(shape_err("phi: ragged action axis"));
                }
                for v in row {
                    if v.len() != d {
                        return Err(shape_err("phi: feature length differs from d"));
                    }
                    phi.extend_from_slice(v);
                }
            }
        }
        let nu: Vec<f64> = file.nu.iter().flatten().flatten().copied().collect();
        let theta: Vec<f64> = file.theta.iter().flatten().copied().collect();
        Self::new(FeatureMap::new(n, m, horizon, d, phi)?, file.initial_state, nu, theta)
    }
}

/// JSON form: `{"d", "phi":[h][s][a][k], "nu":[h][s][k], "theta":[h][k]}` plus optional `s1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMdpFile {
    #[serde(rename = "d")]
    pub dim: usize,
    #[serde(rename = "s1", default)]
    pub initial_state: usize,
    pub phi: Vec<Vec<Vec<Vec<f64>>>>,
    pub nu: Vec<Vec<Vec<f64>>>,
    pub theta: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Realizes `⟨φ, ν⟩` transitions and `⟨φ, θ⟩` rewards as a tabular MDP.
pub fn to_tabular(lm: &LinearMdp) -> Result<TabularMdp> {
    lm.check_invariants()?;
    Ok(to_tabular_unchecked(lm))
}

pub(crate) fn to_tabular_unchecked(lm: &LinearMdp) -> TabularMdp {
    let f = &lm.features;
    let (n, m, horizon) = (f.num_states, f.num_actions, f.horizon);
    let mut p = Vec::with_capacity(horizon * n * m * n);
    let mut r = Vec::with_capacity(horizon * n * m);
    for h in 0..horizon {
        for s in 0..n {
            for a in 0..m {
                let phi = f.phi_slice(h, s, a);
                p.extend((0..n).map(|next| dot(phi, lm.nu(h, next))));
                r.push(dot(phi, lm.theta(h)));
            }
        }
    }
    TabularMdp::from_flat(n, m, horizon, lm.initial_state, p, r).expect("shapes follow the feature map")
}

/// One-hot embedding of a tabular MDP, `d = S·A`.
pub fn embed_tabular(mdp: &TabularMdp) -> LinearMdp {
    let (n, m, horizon) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let d = n * m;
    let mut nu = vec![0.0; horizon * n * d];
    let mut theta = vec![0.0; horizon * d];
    for h in 0..horizon {
        for s in 0..n {
            for a in 0..m {
                let k = s * m + a;
                for (next, &p) in mdp.transition(h, s, a).iter().enumerate() {
                    nu[(h * n + next) * d + k] = p;
                }
                theta[h * d + k] = mdp.reward(h, s, a);
            }
        }
    }
    LinearMdp {
        features: FeatureMap::one_hot(n, m, horizon),
        initial_state: mdp.initial_state(),
        nu,
        theta,
    }
}

/// `Φ_h^π = E_π[φ_h φ_hᵀ]` at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix {
    pub matrix: DMatrix<f64>,
    /// 0-indexed step.
    pub step: usize,
}

impl CovarianceMatrix {
    pub fn min_eigenvalue(&self) -> Result<f64> {
        min_eigenvalue(self)
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        linalg::symmetric_eigenvalues(&self.matrix)
    }

    /// Principal submatrix on the given coordinates.
    pub fn restricted(&self, coords: &[usize]) -> Self {
        let k = coords.len();
        Self {
            matrix: DMatrix::from_fn(k, k, |i, j| self.matrix[(coords[i], coords[j])]),
            step: self.step,
        }
    }
}

pub fn feature_covariance(lm: &LinearMdp, pi: &impl TabularPolicy, h: usize) -> Result<CovarianceMatrix> {
    let tab = to_tabular_unchecked(lm);
    let mu = occupancy(&tab, pi)?;
    let f = &lm.features;
    let d = f.dim;
    if h >= f.horizon {
        return Err(Error::Invalid(format!("step {} beyond horizon {}", h + 1, f.horizon)));
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for s in 0..f.num_states {
        for a in 0..f.num_actions {
            let w = mu.get(h, s, a);
            if w == 0.0 {
                continue;
            }
            let phi = f.phi(h, s, a);
            cov.ger(w, &phi, &phi, 1.0);
        }
    }
    Ok(CovarianceMatrix {
        matrix: linalg::symmetrize(&cov),
        step: h,
    })
}

pub fn min_eigenvalue(c: &CovarianceMatrix) -> Result<f64> {
    linalg::min_eigenvalue(&c.matrix)
}

/// The `d·H` basis-reward tasks: task `h·d + i` has `θ_h = e_i` and zero elsewhere.
pub fn gen_diverse_linear(dynamics: &LinearMdp) -> Vec<LinearMdp> {
    let (d, horizon) = (dynamics.dim(), dynamics.horizon());
    let mut out = Vec::with_capacity(d * horizon);
    for h in 0..horizon {
        for i in 0..d {
            let mut theta = vec![0.0; horizon * d];
            theta[h * d + i] = 1.0;
            out.push(dynamics.with_theta(theta).expect("shape preserved"));
        }
    }
    out
}

/// `max_π E_π[vᵀφ_h(s_h, a_h)]` by backward DP with terminal linear reward.
pub fn max_feature_projection(lm: &LinearMdp, h: usize, direction: &[f64]) -> f64 {
    let tab = to_tabular_unchecked(lm);
    let f = &lm.features;
    let (n, m) = (f.num_states, f.num_actions);
    let mut v: Vec<f64> = (0..n)
        .map(|s| {
            (0..m)
                .map(|a| dot(direction, f.phi_slice(h, s, a)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    for k in (0..h).rev() {
        v = (0..n)
            .map(|s| {
                (0..m)
                    .map(|a| dot(tab.transition(k, s, a), &v))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    v[lm.initial_state]
}

/// Coverage certificate over a finite direction test set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageCertificate {
    /// 0-indexed step.
    pub step: usize,
    /// Minimum over all tested directions in `R^d`; zero when a coordinate is never activated.
    pub b1: f64,
    pub basis_min: f64,
    pub random_min: f64,
    /// Coordinates some policy activates at this step.
    pub active: Vec<usize>,
    /// Same minimum, restricted to directions supported on `active`.
    pub active_b1: f64,
    pub active_basis_min: f64,
    pub active_random_min: f64,
    /// True when `b1 == 0`, i.e. the coverage assumption fails on the full space.
    pub flagged: bool,
}

fn random_positive_directions(support: &[usize], d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut v = vec![0.0; d];
            for &k in support {
                v[k] = rng.random_range(1e-3..1.0);
            }
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            v
        })
        .collect()
}

/// Certifies `max_π E_π[νᵀφ_h] ≥ b1` over the `d` basis vectors and
/// [`COVERAGE_RANDOM_DIRECTIONS`] seeded random positive unit vectors.
pub fn coverage_b1(lm: &LinearMdp, h: usize) -> CoverageCertificate {
    let d = lm.dim();
    let basis: Vec<f64> = (0..d)
        .map(|k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            max_feature_projection(lm, h, &e)
        })
        .collect();
    let active: Vec<usize> = (0..d).filter(|&k| basis[k] > 0.0).collect();
    let all: Vec<usize> = (0..d).collect();
    let min_over = |dirs: &[Vec<f64>]| {
        dirs.iter()
            .map(|v| max_feature_projection(lm, h, v))
            .fold(f64::INFINITY, f64::min)
    };
    let random_min = min_over(&random_positive_directions(
        &all,
        d,
        COVERAGE_RANDOM_DIRECTIONS,
        COVERAGE_DIRECTION_SEED,
    ));
    let active_random_min = if active.is_empty() {
        0.0
    } else {
        min_over(&random_positive_directions(
            &active,
            d,
            COVERAGE_RANDOM_DIRECTIONS,
            COVERAGE_DIRECTION_SEED,
        ))
    };
    let basis_min = basis.iter().copied().fold(f64::INFINITY, f64::min);
    let active_basis_min = active.iter().map(|&k| basis[k]).fold(f64::INFINITY, f64::min);
    let active_basis_min = if active.is_empty() { 0.0 } else { active_basis_min };
    let b1 = basis_min.min(random_min);
    CoverageCertificate {
        step: h,
        b1,
        basis_min,
        random_min,
        active_b1: active_basis_min.min(active_random_min),
        active,
        active_basis_min,
        active_random_min,
        flagged: b1 <= 0.0,
    }
}

/// Both sides of the minimum-eigenvalue lemma at one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaCheck {
    /// 0-indexed step `h`; the covariance is taken at `h + 1`.
    pub step: usize,
    /// `λ_min(Φ_{h+1}^{π̃})` restricted to the coordinates active at `h + 1`.
    pub lhs: f64,
    /// `ε_h ∏_{h'<h} (1 − ε_{h'}) b1² / (2 d A)`.
    pub rhs: f64,
    pub margin: f64,
    pub b1: f64,
    /// Basis tasks whose reward coordinate is unreachable at step `h`; left out of the mixture.
    pub degenerate_tasks: Vec<usize>,
    /// Ascending spectrum of the restricted covariance.
    pub eigenvalues: Vec<f64>,
}

impl LemmaCheck {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs >= self.rhs - slack
    }
}

/// Forms `π̃ = Mixture({expl(π_i)})` from the exact optimal policies of the
/// step-`h` basis tasks and compares `λ_min(Φ_{h+1}^{π̃})` with the bound.
///
/// The eigenvalue is taken on the principal submatrix of coordinates some
/// policy activates at step `h + 1`; on a finite carrier the others are
/// identically zero.
pub fn check_lemma_linear2(dynamics: &LinearMdp, h: usize, sched: &ExplorationSchedule, b1: f64) -> Result<LemmaCheck> {
    let (d, horizon) = (dynamics.dim(), dynamics.horizon());
    if h + 1 >= horizon {
        return Err(Error::Invalid(format!(
            "the lemma needs step h+1 ≤ H (h = {}, H = {horizon})",
            h + 1
        )));
    }
    if sched.horizon() != horizon {
        return Err(shape_err("schedule length differs from the horizon"));
    }
    let mut members = Vec::with_capacity(d);
    let mut degenerate = Vec::new();
    for i in 0..d {
        let mut theta = vec![0.0; horizon * d];
        theta[h * d + i] = 1.0;
        let task = to_tabular_unchecked(&dynamics.with_theta(theta)?);
        let opt = optimal_values(&task);
        if opt.value() <= 0.0 {
            degenerate.push(i);
            continue;
        }
        members.push(eps_greedy(&opt.policy, sched)?);
    }
    if members.is_empty() {
        return Err(Error::Invalid(format!(
            "every basis task at step {} is degenerate",
            h + 1
        )));
    }
    let mixture = Mixture::new(members)?;
    let cov = feature_covariance(dynamics, &mixture, h + 1)?;
    let active: Vec<usize> = (0..d)
        .filter(|&k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            max_feature_projection(dynamics, h + 1, &e) > 0.0
        })
        .collect();
    let eigenvalues = cov.restricted(&active).eigenvalues()?;
    let lhs = eigenvalues.first().copied().unwrap_or(f64::INFINITY);
    let rhs = sched.survival_then_explore(h) * b1 * b1 / (2.0 * d as f64 * dynamics.features.num_actions as f64);
    Ok(LemmaCheck {
        step: h,
        lhs,
        rhs,
        margin: lhs - rhs,
        b1,
        degenerate_tasks: degenerate,
        eigenvalues,
    })
}

/// A random latent-factor linear MDP: features on the simplex, each measure
/// coordinate a distribution over next states, rewards at most `1/H` per step.
pub fn random_linear_mdp<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    dim: usize,
    rng: &mut R,
) -> LinearMdp {
    let mut phi = Vec::with_capacity(horizon * num_states * num_actions * dim);
    for _ in 0..horizon * num_states * num_actions {
        phi.extend(random_simplex(dim, rng));
    }
    let mut nu = vec![0.0; horizon * num_states * dim];
    for h in 0..horizon {
        for k in 0..dim {
            for (s, p) in random_simplex(num_states, rng).into_iter().enumerate() {
                nu[(h * num_states + s) * dim + k] = p;
            }
        }
    }
    let theta = (0..horizon * dim)
        .map(|_| rng.random_range(0.0..1.0) / horizon as f64)
        .collect();
    LinearMdp {
        features: FeatureMap {
            num_states,
            num_actions,
            horizon,
            dim,
            phi,
        },
        initial_state: 0,
        nu,
        theta,
    }
}

fn random_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.random_range(f64::EPSILON..1.0).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Sorted eigenvalues of `Φ_h^π` for each step, as CSV rows `policy,h,index,eigenvalue`.
pub fn write_spectrum_csv<W: std::io::Write>(rows: &[(String, usize, Vec<f64>)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "h", "index", "eigenvalue"])?;
    for (policy, h, eig) in rows {
        for (i, e) in eig.iter().enumerate() {
            w.write_record(&[policy.clone(), (h + 1).to_string(), i.to_string(), format!("{e:e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diversity::{gen_hallway, gen_sparse_set};
    use crate::exploration::{default_schedule, ScheduleVariant};
    use crate::mdp::{evaluate_policy, MarkovPolicy};

    #[test]
    fn one_hot_round_trip_on_hallway() {
        let hall = gen_hallway(4);
        for task in hall.tasks.iter() {
            let lm = embed_tabular(task);
            assert_eq!(&to_tabular(&lm).unwrap(), task);
            for h in 0..4 {
                for s in 0..5 {
                    for a in 0..2 {
                        assert_eq!(lm.theta(h)[s * 2 + a], task.reward(h, s, a));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_theta_gives_zero_rewards() {
        let lm = embed_tabular(&gen_hallway(3).tasks[0]);
        let zero = lm.with_theta(vec![0.0; 3 * lm.dim()]).unwrap();
        assert!(to_tabular(&zero).unwrap().rewards_flat().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn deterministic_path_covariance_is_rank_one() {
        let hall = gen_hallway(3);
        let lm = embed_tabular(&hall.base);
        let fwd = MarkovPolicy::deterministic(4, 2, 3, &[1; 12]);
        let cov = feature_covariance(&lm, &fwd, 1).unwrap();
        // visited pair at step 2 is (state 1, forward) = coordinate 3
        let mut expected = DMatrix::zeros(8, 8);
        expected[(3, 3)] = 1.0;
        assert_eq!(cov.matrix, expected);
    }

    #[test]
    fn one_hot_covariance_is_diagonal_occupancy() {
        let hall = gen_hallway(3);
        let lm = embed_tabular(&hall.base);
        let pi = MarkovPolicy::uniform(4, 2, 3);
        let mu = occupancy(&hall.base, &pi).unwrap();
        let cov = feature_covariance(&lm, &pi, 2).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i == j { mu.get(2, i / 2, i % 2) } else { 0.0 };
                assert_eq!(cov.matrix[(i, j)], expected);
            }
        }
    }

    #[test]
    fn basis_task_count_and_validity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lm = random_linear_mdp(3, 2, 2, 2, &mut rng);
        let tasks = gen_diverse_linear(&lm);
        assert_eq!(tasks.len(), 4);
        for t in &tasks {
            assert!(to_tabular(t).unwrap().validate().is_valid());
        }
    }

    #[test]
    fn one_hot_basis_tasks_are_sparse_state_action_rewards() {
        let hall = gen_hallway(3);
        let tasks = gen_diverse_linear(&embed_tabular(&hall.base));
        let sparse = gen_sparse_set(&hall.base);
        // basis task (i = s·A + a, h) rewards exactly (s, a) at step h; summing over
        // actions recovers the state-level sparse task (s, h)
        for h in 0..3 {
            for s in 0..4 {
                let summed: Vec<f64> = (0..2).map(|a| to_tabular(&tasks[h * 8 + s * 2 + a]).unwrap()).fold(
                    vec![0.0; 3 * 4 * 2],
                    |mut acc, t| {
                        acc.iter_mut().zip(t.rewards_flat()).for_each(|(x, r)| *x += r);
                        acc
                    },
                );
                assert_eq!(summed.as_slice(), sparse[h * 4 + s].rewards_flat());
            }
        }
    }

    #[test]
    fn coverage_on_hallway_and_inactive_coordinate() {
        let hall = gen_hallway(4);
        let lm = embed_tabular(&hall.base);
        let cert = coverage_b1(&lm, 2);
        assert_eq!(cert.active_basis_min, 1.0);
        assert!(cert.flagged, "states beyond the reach of step 3 are never activated");
        assert_eq!(cert.b1, 0.0);
        let half = lm.rescaled(0.5).unwrap();
        assert_eq!(to_tabular_unchecked(&half), hall.base);
        let cert_half = coverage_b1(&half, 2);
        assert_eq!(cert_half.active_b1, 0.5 * cert.active_b1);
        assert_eq!(cert_half.active_random_min, 0.5 * cert.active_random_min);
    }

    #[test]
    fn hallway_lemma_at_first_step_has_positive_margin() {
        let hall = gen_hallway(4);
        let lm = embed_tabular(&hall.base);
        let sched = default_schedule(4, ScheduleVariant::Thm2);
        let b1 = coverage_b1(&lm, 1).active_b1;
        let check = check_lemma_linear2(&lm, 0, &sched, b1).unwrap();
        assert!(check.margin > 0.0, "{check:?}");
        assert!((check.lhs - 1.0 / 12.0).abs() < 1e-12);
        let lazy = ExplorationSchedule::constant(4, 0.0).unwrap();
        let vacuous = check_lemma_linear2(&lm, 0, &lazy, b1).unwrap();
        assert_eq!(vacuous.rhs, 0.0);
    }

    #[test]
    fn linear_values_are_realizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lm = random_linear_mdp(4, 3, 3, 3, &mut rng);
        let tab = to_tabular(&lm).unwrap();
        let pi = MarkovPolicy::uniform(4, 3, 3);
        let eval = evaluate_policy(&tab, &pi).unwrap();
        let f = lm.features();
        for h in 0..3 {
            let rows = 4 * 3;
            let x = DMatrix::from_fn(rows, 3, |r, k| f.phi_slice(h, r / 3, r % 3)[k]);
            let y = DVector::from_fn(rows, |r, _| eval.q.get(h, r / 3, r % 3));
            let w = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
            let resid = (&x * &w - &y).amax();
            assert!(resid <= 1e-8, "residual {resid}");
            assert!(w.norm() <= 2.0 * 3f64.sqrt());
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lm = random_linear_mdp(2, 2, 2, 3, &mut rng);
        let text = serde_json::to_string(&lm.to_file()).unwrap();
        let back = LinearMdp::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, lm);
    }
}
