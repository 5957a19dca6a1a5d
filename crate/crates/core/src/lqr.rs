//! Finite-horizon LQR with deterministic dynamics `s_{h+1} = A_h s_h + B_h a_h`
//! and rewards `sᵀR^s_h s + aᵀR^a_h a`, solved as a maximization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exploration::{gaussian_expl, ExplorationSchedule, GaussianExplorer, Mixture, NoiseMode, PolicyShape};
use crate::linalg;

/// `R^a_h` must have every eigenvalue at or below this.
pub const NEG_DEF_TOL: f64 = 1e-9;
pub const RICCATI_SYMMETRY_TOL: f64 = 1e-10;
pub const B3_DIRECTION_SEED: u64 = 0x00b3_d1e5;
pub const B3_RANDOM_DIRECTIONS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct LqrSystem {
    ds: usize,
    da: usize,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    rs: Vec<DMatrix<f64>>,
    ra: Vec<DMatrix<f64>>,
    s1: DVector<f64>,
}

impl LqrSystem {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        rs: Vec<DMatrix<f64>>,
        ra: Vec<DMatrix<f64>>,
        s1: DVector<f64>,
    ) -> Result<Self> {
        let horizon = a.len();
        if horizon == 0 {
            return Err(Error::Invalid("LQR horizon must be positive".into()));
        }
        let ds = s1.len();
        let da = b[0].ncols();
        for (name, list, rows, cols) in [
            ("B", &b, ds, da),
            ("Rs", &rs, ds, ds),
            ("Ra", &ra, da, da),
            ("A", &a, ds, ds),
        ] {
            if list.len() != horizon {
                return Err(shape_err(format!(
                    "{name} covers {} steps, A covers {horizon}",
                    list.len()
                )));
            }
            for (h, m) in list.iter().enumerate() {
                if m.shape() != (rows, cols) {
                    return Err(shape_err(format!(
                        "{name}[{}] is {}x{}, expected {rows}x{cols}",
                        h + 1,
                        m.nrows(),
                        m.ncols()
                    )));
                }
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Invalid(format!("{name}[{}] has a non-finite entry", h + 1)));
                }
            }
        }
        for (h, m) in rs.iter().enumerate() {
            if linalg::asymmetry(m) > linalg::SYMMETRY_TOL {
                return Err(Error::Invalid(format!("Rs[{}] is not symmetric", h + 1)));
            }
        }
        for (h, m) in ra.iter().enumerate() {
            let top = linalg::max_eigenvalue(m)?;
            if top > -NEG_DEF_TOL {
                return Err(Error::Invalid(format!(
                    "Ra[{}] must be negative definite (largest eigenvalue {top:e})",
                    h + 1
                )));
            }
        }
        Ok(Self {
            ds,
            da,
            a,
            b,
            rs,
            ra,
            s1,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.ds
    }

    pub fn action_dim(&self) -> usize {
        self.da
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self, h: usize) -> &DMatrix<f64> {
        &self.a[h]
    }

    pub fn b(&self, h: usize) -> &DMatrix<f64> {
        &self.b[h]
    }

    pub fn rs(&self, h: usize) -> &DMatrix<f64> {
        &self.rs[h]
    }

    pub fn ra(&self, h: usize) -> &DMatrix<f64> {
        &self.ra[h]
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.s1
    }

    pub fn with_initial_state(&self, s1: DVector<f64>) -> Result<Self> {
        if s1.len() != self.ds {
            return Err(shape_err("initial state length differs from d_s"));
        }
        Ok(Self { s1, ..self.clone() })
    }

    pub fn reward(&self, h: usize, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        (s.transpose() * &self.rs[h] * s)[(0, 0)] + (a.transpose() * &self.ra[h] * a)[(0, 0)]
    }

    pub fn step(&self, h: usize, s: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        &self.a[h] * s + &self.b[h] * a
    }

    pub fn to_file(&self) -> LqrFile {
        let nest = |ms: &[DMatrix<f64>]| -> Vec<Vec<Vec<f64>>> {
            ms.iter()
                .map(|m| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
                .collect()
        };
        LqrFile {
            ds: self.ds,
            da: self.da,
            a: nest(&self.a),
            b: nest(&self.b),
            rs: nest(&self.rs),
            ra: nest(&self.ra),
            s1: self.s1.iter().copied().collect(),
        }
    }

    pub fn from_file(file: &LqrFile) -> Result<Self> {
        let unnest = |name: &str, ms: &[Vec<Vec<f64>>], rows: usize, cols: usize| -> Result<Vec<DMatrix<f64>>> {
            ms.iter()
                .enumerate()
                .map(|(h, m)| {
                    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
                        return Err(shape_err(format!("{name}[{}] must be {rows}x{cols}", h + 1)));
                    }
                    Ok(DMatrix::from_fn(rows, cols, |i, j| m[i][j]))
                })
                .collect()
        };
        if file.s1.len() != file.ds {
            return Err(shape_err("s1 length differs from ds"));
        }
        Self::new(
            unnest("A", &file.a, file.ds, file.ds)?,
            unnest("B", &file.b, file.ds, file.da)?,
            unnest("Rs", &file.rs, file.ds, file.ds)?,
            unnest("Ra", &file.ra, file.da, file.da)?,
            DVector::from_vec(file.s1.clone()),
        )
    }
}

/// JSON form `{"ds", "da", "A":[h][i][j], "B", "Rs", "Ra", "s1"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrFile {
    pub ds: usize,
    pub da: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "Rs")]
    pub rs: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "Ra")]
    pub ra: Vec<Vec<Vec<f64>>>,
    pub s1: Vec<f64>,
}

/// Per-step linear feedback `a_h = F_h s_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainPolicy {
    gains: Vec<DMatrix<f64>>,
}

impl GainPolicy {
    pub fn new(gains: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = gains.first() else {
            return Err(Error::Invalid("gain policy needs at least one step".into()));
        };
        let shape = first.shape();
        if let Some(h) = gains.iter().position(|g| g.shape() != shape) {
            return Err(shape_err(format!("gain {} has a different shape from gain 1", h + 1)));
        }
        Ok(Self { gains })
    }

    pub fn zeros(ds: usize, da: usize, horizon: usize) -> Self {
        Self {
            gains: vec![DMatrix::zeros(da, ds); horizon],
        }
    }

    pub fn random<R: Rng + ?Sized>(ds: usize, da: usize, horizon: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            gains: (0..horizon)
                .map(|_| DMatrix::from_fn(da, ds, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        }
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    fn check(&self, sys: &LqrSystem) -> Result<()> {
        if self.shape() != (sys.ds, sys.da, sys.horizon()) {
            return Err(shape_err(format!(
                "gains have shape {:?}, system has (d_s, d_a, H) = {:?}",
                self.shape(),
                (sys.ds, sys.da, sys.horizon())
            )));
        }
        Ok(())
    }
}

impl PolicyShape for GainPolicy {
    /// `(d_s, d_a, H)`.
    fn shape(&self) -> (usize, usize, usize) {
        (self.gains[0].ncols(), self.gains[0].nrows(), self.gains.len())
    }
}

/// Cost-to-go matrices `P[0..=H]` (`P[H] = 0`) and optimal gains.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub p: Vec<DMatrix<f64>>,
    pub gains: GainPolicy,
}

impl RiccatiSolution {
    /// `V*_h(s) = sᵀ P_h s`.
    pub fn value_at(&self, h: usize, s: &DVector<f64>) -> f64 {
        (s.transpose() * &self.p[h] * s)[(0, 0)]
    }
}

pub fn riccati(sys: &LqrSystem) -> Result<RiccatiSolution> {
    let horizon = sys.horizon();
    let mut p = vec![DMatrix::zeros(sys.ds, sys.ds); horizon + 1];
    let mut gains = vec![DMatrix::zeros(sys.da, sys.ds); horizon];
    for h in (0..horizon).rev() {
        let (a, b) = (&sys.a[h], &sys.b[h]);
        let next = &p[h + 1];
        let k = linalg::symmetrize(&(&sys.ra[h] + b.transpose() * next * b));
        let top = linalg::max_eigenvalue(&k)?;
        let ill = Error::IllPosed {
            step: h + 1,
            eigenvalue: top,
        };
        if top > -NEG_DEF_TOL {
            return Err(ill);
        }
        let chol = (-&k).cholesky().ok_or(ill)?;
        let f = chol.solve(&(b.transpose() * next * a));
        let ph = &sys.rs[h] + a.transpose() * next * a + a.transpose() * next * b * &f;
        p[h] = linalg::symmetrize(&ph);
        gains[h] = f;
    }
    Ok(RiccatiSolution {
        p,
        gains: GainPolicy { gains },
    })
}

/// Return of the deterministic closed loop `a_h = F_h s_h` from `s1`, by
/// backward quadratic propagation.
pub fn lqr_value(sys: &LqrSystem, gains: &GainPolicy, s1: &DVector<f64>) -> Result<f64> {
    gains.check(sys)?;
    let mut p = DMatrix::zeros(sys.ds, sys.ds);
    for h in (0..sys.horizon()).rev() {
        let f = &gains.gains[h];
        let closed = &sys.a[h] + &sys.b[h] * f;
        p = &sys.rs[h] + f.transpose() * &sys.ra[h] * f + closed.transpose() * &p * &closed;
    }
    Ok((s1.transpose() * p * s1)[(0, 0)])
}

/// A deterministic closed-loop trajectory: `states[0..=H]`, `actions[0..H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub total_reward: f64,
}

pub fn rollout(sys: &LqrSystem, gains: &GainPolicy, s1: &DVector<f64>) -> Result<Rollout> {
    gains.check(sys)?;
    let mut states = vec![s1.clone()];
    let mut actions = Vec::with_capacity(sys.horizon());
    let mut total = 0.0;
    for h in 0..sys.horizon() {
        let s = &states[h];
        let a = &gains.gains[h] * s;
        total += sys.reward(h, s, &a);
        let next = sys.step(h, s, &a);
        actions.push(a);
        states.push(next);
    }
    Ok(Rollout {
        states,
        actions,
        total_reward: total,
    })
}

/// `d_s · H` tasks on shared dynamics; task `h·d_s + i` has `R^s_h = e_i e_iᵀ`,
/// zero state reward elsewhere, and `R^a ≡ −I`.
pub fn gen_diverse_lqr(a: &[DMatrix<f64>], b: &[DMatrix<f64>], s1: &DVector<f64>) -> Result<Vec<LqrSystem>> {
    let horizon = a.len();
    let ds = s1.len();
    let da = b.first().map_or(0, |m| m.ncols());
    let mut tasks = Vec::with_capacity(ds * horizon);
    for h in 0..horizon {
        for i in 0..ds {
            let rs = (0..horizon)
                .map(|k| {
                    let mut m = DMatrix::zeros(ds, ds);
                    if k == h {
                        m[(i, i)] = 1.0;
                    }
                    m
                })
                .collect();
            tasks.push(LqrSystem::new(
                a.to_vec(),
                b.to_vec(),
                rs,
                vec![-DMatrix::identity(da, da); horizon],
                s1.clone(),
            )?);
        }
    }
    Ok(tasks)
}

/// Exact second moment `E[s_h s_hᵀ]` (0-indexed `h ∈ 0..=H`) under an
/// episode-level mixture of Gaussian-explored gain policies.
///
/// Mixture noise: `(1−ε)(A+BF)M(A+BF)ᵀ + ε(AMAᵀ + σ²BBᵀ)`;
/// additive noise: `(A+BF)M(A+BF)ᵀ + εσ²BBᵀ`.
pub fn state_covariance(sys: &LqrSystem, policy: &Mixture<GaussianExplorer>, h: usize) -> Result<DMatrix<f64>> {
    if h > sys.horizon() {
        return Err(Error::Invalid(format!(
            "state index {h} beyond horizon {}",
            sys.horizon()
        )));
    }
    let s1 = &sys.s1;
    let mut total = DMatrix::zeros(sys.ds, sys.ds);
    for member in policy.members() {
        member.gains().check(sys)?;
        let mut m = s1 * s1.transpose();
        for k in 0..h {
            let (a, b) = (&sys.a[k], &sys.b[k]);
            let closed = a + b * &member.gains().gains()[k];
            let (eps, sigma) = (member.eps()[k], member.sigma()[k]);
            let noise = b * b.transpose() * (sigma * sigma);
            let exploit = &closed * &m * closed.transpose();
            m = match member.noise() {
                NoiseMode::Mixture => exploit * (1.0 - eps) + (a * &m * a.transpose() + noise) * eps,
                NoiseMode::Additive => exploit + noise * eps,
            };
        }
        total += m;
    }
    Ok(linalg::symmetrize(&(total / policy.len() as f64)))
}

/// Both sides of the diverse-LQR covariance check at one state index.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LqrCoverageCheck {
    /// 0-indexed state index `k ≥ 1`.
    pub step: usize,
    pub lambda_min: f64,
    /// `ε_{k−1} σ_{k−1}² λ_min(B_{k−1} B_{k−1}ᵀ)`, implied by the explore branch alone.
    pub noise_floor: f64,
    pub eigenvalues: Vec<f64>,
}

/// `λ_min(E s_k s_kᵀ)` under the mixture of Gaussian-explored optimal policies
/// of the `d_s` diverse tasks rewarding coordinate `i` of `s_k`.
pub fn diverse_lqr_coverage(sys: &LqrSystem, sched: &ExplorationSchedule, k: usize) -> Result<LqrCoverageCheck> {
    let horizon = sys.horizon();
    if k == 0 || k >= horizon {
        return Err(Error::Invalid(format!("state index {k} must lie in 1..H-1")));
    }
    let tasks = gen_diverse_lqr(&sys.a, &sys.b, &sys.s1)?;
    let members = (0..sys.ds)
        .map(|i| {
            let sol = riccati(&tasks[k * sys.ds + i])?;
            gaussian_expl(&sol.gains, sched)
        })
        .collect::<Result<Vec<_>>>()?;
    let mixture = Mixture::new(members)?;
    let cov = state_covariance(sys, &mixture, k)?;
    let eigenvalues = linalg::symmetric_eigenvalues(&cov)?;
    let b = &sys.b[k - 1];
    let (eps, sigma) = match sched {
        ExplorationSchedule::Gaussian { eps, sigma, .. } => (eps[k - 1], sigma[k - 1]),
        ExplorationSchedule::EpsilonGreedy { .. } => unreachable!("gaussian_expl accepted the schedule"),
    };
    let noise_floor = eps * sigma * sigma * linalg::min_eigenvalue(&(b * b.transpose()))?.max(0.0);
    Ok(LqrCoverageCheck {
        step: k,
        lambda_min: eigenvalues[0],
        noise_floor,
        eigenvalues,
    })
}

/// One row of the `b₃` table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct B3Entry {
    /// 0-indexed state index.
    pub step: usize,
    pub direction: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LqrRegularity {
    pub b3: f64,
    pub b3_table: Vec<B3Entry>,
    pub b4: f64,
    pub b5: f64,
}

/// `max_{‖a_k‖≤1} νᵀ s_h` in closed form: `νᵀΦ(h,0)s1 + Σ_{k<h} ‖B_kᵀΦ(h,k+1)ᵀν‖`,
/// where `Φ(h,k) = A_{h−1}⋯A_k`.
pub fn max_directional_reach(sys: &LqrSystem, h: usize, nu: &DVector<f64>) -> f64 {
    // back-propagated direction: w_k = Φ(h,k)ᵀν
    let mut w = nu.clone();
    let mut total = 0.0;
    for k in (0..h).rev() {
        total += (sys.b[k].transpose() * &w).norm();
        w = sys.a[k].transpose() * w;
    }
    total + w.dot(&sys.s1)
}

/// `b₃` over the basis directions plus seeded random unit directions at every
/// state index `1..=H`, and `b₄`, `b₅` along the given policies' closed loops.
pub fn lqr_regularity(sys: &LqrSystem, policies: &[GainPolicy]) -> Result<LqrRegularity> {
    let ds = sys.ds;
    let mut directions: Vec<DVector<f64>> = (0..ds)
        .map(|i| DVector::from_fn(ds, |j, _| f64::from(i == j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(B3_DIRECTION_SEED);
    for _ in 0..B3_RANDOM_DIRECTIONS {
        let v = DVector::from_fn(ds, |_, _| rng.sample::<f64, _>(StandardNormal));
        directions.push(v.normalize());
    }
    let mut table = Vec::new();
    for h in 1..=sys.horizon() {
        for nu in &directions {
            table.push(B3Entry {
                step: h,
                direction: nu.iter().copied().collect(),
                value: max_directional_reach(sys, h, nu),
            });
        }
    }
    let b3 = table.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
    let (mut b4, mut b5) = (0.0f64, 0.0f64);
    for pi in policies {
        let path = rollout(sys, pi, &sys.s1)?;
        b4 = path.states.iter().map(|s| s.norm()).fold(b4, f64::max);
        b5 = path.actions.iter().map(|a| a.norm()).fold(b5, f64::max);
    }
    Ok(LqrRegularity {
        b3,
        b3_table: table,
        b4,
        b5,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OptimalityResidual {
    /// Largest `|sᵀP_h s − (r_h(s, F_h s) + V_{h+1}(A s + B F_h s))|`.
    pub analytic: f64,
    /// Smallest `sᵀP_h s − max_grid(r_h(s, a) + V_{h+1}(A s + B a))`; negative means the grid won.
    pub grid: f64,
}

impl OptimalityResidual {
    pub fn passes(&self, tol: f64) -> bool {
        self.analytic <= tol && self.grid >= -tol
    }
}

/// Points per action coordinate in the optimality grid.
pub const GRID_POINTS: usize = 9;

/// Bellman-optimality check of `sol` at `trials` random unit states and steps,
/// against the analytic maximizer and a dense action grid centered on it.
pub fn riccati_optimality_check<R: Rng + ?Sized>(
    sys: &LqrSystem,
    sol: &RiccatiSolution,
    trials: usize,
    rng: &mut R,
) -> OptimalityResidual {
    let mut worst = OptimalityResidual {
        analytic: 0.0,
        grid: f64::INFINITY,
    };
    let da = sys.da;
    let grid_size = GRID_POINTS.pow(da as u32);
    for _ in 0..trials {
        let h = rng.random_range(0..sys.horizon());
        let s = DVector::from_fn(sys.ds, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = if s.norm() > 0.0 { s.normalize() } else { s };
        let target = sol.value_at(h, &s);
        let q = |a: &DVector<f64>| sys.reward(h, &s, a) + sol.value_at(h + 1, &sys.step(h, &s, a));
        let star = &sol.gains.gains[h] * &s;
        worst.analytic = worst.analytic.max((target - q(&star)).abs());
        let radius = 1.0 + star.amax();
        let mut best = f64::NEG_INFINITY;
        for idx in 0..grid_size {
            let mut rem = idx;
            let a = DVector::from_fn(da, |j, _| {
                let g = rem % GRID_POINTS;
                rem /= GRID_POINTS;
                star[j] + radius * (2.0 * g as f64 / (GRID_POINTS - 1) as f64 - 1.0)
            });
            best = best.max(q(&a));
        }
        worst.grid = worst.grid.min(target - best);
    }
    if trials == 0 {
        worst.grid = 0.0;
    }
    worst
}

/// A random system whose Riccati recursion is well posed; redraws until it is.
pub fn random_lqr_system<R: Rng + ?Sized>(ds: usize, da: usize, horizon: usize, rng: &mut R) -> LqrSystem {
    loop {
        let mut gauss = |rows: usize, cols: usize, scale: f64| {
            DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let a: Vec<_> = (0..horizon).map(|_| gauss(ds, ds, 0.6 / (ds as f64).sqrt())).collect();
        let b: Vec<_> = (0..horizon).map(|_| gauss(ds, da, 0.6 / (ds as f64).sqrt())).collect();
        let rs: Vec<_> = (0..horizon)
            .map(|_| {
                let g = gauss(ds, ds, 0.5);
                linalg::symmetrize(&(&g + g.transpose()))
            })
            .collect();
        let ra: Vec<_> = (0..horizon)
            .map(|_| {
                let g = gauss(da, da, 0.5);
                -(DMatrix::identity(da, da) + &g * g.transpose())
            })
            .collect();
        let s1 = gauss(ds, 1, 1.0).column(0).into_owned();
        if let Ok(sys) = LqrSystem::new(a, b, rs, ra, s1) {
            if riccati(&sys).is_ok() {
                return sys;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, rs: f64, ra: f64, horizon: usize) -> LqrSystem {
        let m = |x: f64| vec![DMatrix::from_element(1, 1, x); horizon];
        LqrSystem::new(m(a), m(b), m(rs), m(ra), DVector::from_element(1, 1.0)).unwrap()
    }

    #[test]
    fn terminal_step_is_state_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = random_lqr_system(3, 2, 1, &mut rng);
        let sol = riccati(&sys).unwrap();
        assert_eq!(sol.p[0], *sys.rs(0));
        assert_eq!(sol.gains.gains()[0], DMatrix::zeros(2, 3));
        assert_eq!(sol.p[1], DMatrix::zeros(3, 3));
    }

    #[test]
    fn zero_state_reward_gives_zero_solution() {
        let sys = scalar(1.0, 1.0, 0.0, -1.0, 3);
        let sol = riccati(&sys).unwrap();
        assert!(sol.p.iter().all(|p| p[(0, 0)] == 0.0));
        assert!(sol.gains.gains().iter().all(|f| f[(0, 0)] == 0.0));
    }

    #[test]
    fn scalar_two_step_hand_recursion() {
        // H = 2, A = B = 1, Rs = 1, Ra = -1:
        // P2 = 1, K1 = -1 + 1 = 0 is singular, so use Ra = -2 instead.
        // K1 = -2 + 1 = -1, F1 = -K1⁻¹·1·1·1 = 1, P1 = 1 + 1 + 1·1·1·1 = 3.
        let sys = scalar(1.0, 1.0, 1.0, -2.0, 2);
        let sol = riccati(&sys).unwrap();
        assert_eq!(sol.p[1][(0, 0)], 1.0);
        assert_eq!(sol.gains.gains()[1][(0, 0)], 0.0);
        assert_eq!(sol.gains.gains()[0][(0, 0)], 1.0);
        assert_eq!(sol.p[0][(0, 0)], 3.0);
        // check at s = 1: a = 1 gives 1 - 2 + V2(2) = -1 + 4 = 3
        let singular = LqrSystem::new(
            vec![DMatrix::from_element(1, 1, 1.0); 2],
            vec![DMatrix::from_element(1, 1, 1.0); 2],
            vec![DMatrix::from_element(1, 1, 1.0); 2],
            vec![DMatrix::from_element(1, 1, -1.0); 2],
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        assert!(matches!(riccati(&singular), Err(Error::IllPosed { step: 1, .. })));
    }

    #[test]
    fn value_matches_rollout_and_riccati() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let sys = random_lqr_system(3, 2, 4, &mut rng);
            let sol = riccati(&sys).unwrap();
            let s1 = sys.initial_state().clone();
            let v = lqr_value(&sys, &sol.gains, &s1).unwrap();
            assert!((v - sol.value_at(0, &s1)).abs() <= 1e-10 * (1.0 + v.abs()));
            let g = GainPolicy::random(3, 2, 4, 0.5, &mut rng);
            let exact = lqr_value(&sys, &g, &s1).unwrap();
            let sim = rollout(&sys, &g, &s1).unwrap().total_reward;
            assert!((exact - sim).abs() <= 1e-10 * (1.0 + exact.abs()), "{exact} vs {sim}");
            assert!(sol.value_at(0, &s1) >= exact - 1e-8);
        }
    }

    #[test]
    fn zero_gains_and_zero_rewards() {
        let sys = scalar(0.9, 1.0, 0.0, -1.0, 3);
        let g = GainPolicy::zeros(1, 1, 3);
        assert_eq!(lqr_value(&sys, &g, sys.initial_state()).unwrap(), 0.0);
    }

    #[test]
    fn pure_noise_covariance() {
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let sys = LqrSystem::new(
            vec![DMatrix::zeros(2, 2); 2],
            vec![b.clone(); 2],
            vec![DMatrix::zeros(2, 2); 2],
            vec![-DMatrix::identity(1, 1); 2],
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let sched = ExplorationSchedule::gaussian(vec![0.5, 0.5], vec![1.0, 1.0], NoiseMode::Mixture).unwrap();
        let pi = Mixture::new(vec![gaussian_expl(&GainPolicy::zeros(2, 1, 2), &sched).unwrap()]).unwrap();
        let m = state_covariance(&sys, &pi, 1).unwrap();
        assert_eq!(m, &b * b.transpose() * 0.25);
    }

    #[test]
    fn deterministic_covariance_is_outer_product_of_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_lqr_system(3, 2, 3, &mut rng);
        let g = GainPolicy::random(3, 2, 3, 0.3, &mut rng);
        let sched = ExplorationSchedule::gaussian(vec![1.0; 3], vec![0.0; 3], NoiseMode::Mixture).unwrap();
        let pi = Mixture::new(vec![gaussian_expl(&g, &sched).unwrap()]).unwrap();
        let path = rollout(&sys, &g, sys.initial_state()).unwrap();
        for h in 0..=3 {
            let m = state_covariance(&sys, &pi, h).unwrap();
            let outer = &path.states[h] * path.states[h].transpose();
            assert!((m - outer).amax() < 1e-12);
        }
    }

    #[test]
    fn covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = random_lqr_system(2, 2, 3, &mut rng);
        for noise in [NoiseMode::Mixture, NoiseMode::Additive] {
            let sched = ExplorationSchedule::gaussian(vec![0.7; 3], vec![0.4; 3], noise).unwrap();
            let members: Vec<_> = (0..2)
                .map(|_| gaussian_expl(&GainPolicy::random(2, 2, 3, 0.5, &mut rng), &sched).unwrap())
                .collect();
            let pi = Mixture::new(members).unwrap();
            let exact = state_covariance(&sys, &pi, 3).unwrap();
            let n = 100_000;
            let mut acc = DMatrix::zeros(2, 2);
            for _ in 0..n {
                let member = pi.pick(&mut rng);
                let mut s = sys.initial_state().clone();
                for h in 0..3 {
                    let a = member.act(h, &s, &mut rng);
                    s = sys.step(h, &s, &a);
                }
                acc += &s * s.transpose();
            }
            let mc = acc / n as f64;
            assert!(
                (&mc - &exact).amax() < 0.05 * (1.0 + exact.amax()),
                "{noise:?}: {mc} vs {exact}"
            );
        }
    }

    #[test]
    fn directional_reach_matches_action_grid() {
        // single action coordinate: the per-step maximization is separable, so a
        // grid over [-1, 1] at each step reproduces the closed form
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let sys = random_lqr_system(3, 1, 3, &mut rng);
            let nu = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            let h = 3;
            let mut best = 0.0;
            let mut w = nu.clone();
            let mut coeffs = Vec::new();
            for k in (0..h).rev() {
                coeffs.push((sys.b(k).transpose() * &w)[0]);
                w = sys.a(k).transpose() * w;
            }
            best += w.dot(sys.initial_state());
            for c in coeffs {
                best += (0..=2000)
                    .map(|g| c * (g as f64 / 1000.0 - 1.0))
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            let closed = max_directional_reach(&sys, h, &nu);
            assert!(
                (closed - best).abs() <= 0.02 * closed.abs().max(1e-12),
                "{closed} vs {best}"
            );
        }
    }

    #[test]
    fn autonomous_reach_without_inputs() {
        let sys = LqrSystem::new(
            vec![DMatrix::identity(2, 2) * 0.5; 2],
            vec![DMatrix::zeros(2, 1); 2],
            vec![DMatrix::zeros(2, 2); 2],
            vec![-DMatrix::identity(1, 1); 2],
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let reg = lqr_regularity(&sys, &[GainPolicy::zeros(2, 1, 2)]).unwrap();
        let e0 = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(max_directional_reach(&sys, 2, &e0), 0.25);
        assert!(reg.b3 <= 0.5);
        assert_eq!(reg.b4, 2f64.sqrt());
        assert_eq!(reg.b5, 0.0);
    }

    #[test]
    fn optimality_check_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let sys = random_lqr_system(3, 2, 4, &mut rng);
            let sol = riccati(&sys).unwrap();
            let res = riccati_optimality_check(&sys, &sol, 10, &mut rng);
            assert!(res.passes(1e-6), "{res:?}");
        }
        // a wrong P fails the grid comparison
        let sys = scalar(1.0, 1.0, 1.0, -2.0, 2);
        let mut sol = riccati(&sys).unwrap();
        sol.p[0][(0, 0)] = 2.0;
        let res = riccati_optimality_check(&sys, &sol, 4, &mut rng);
        assert!(!res.passes(1e-6));
    }

    #[test]
    fn diverse_tasks_count_and_structure() {
        let a = vec![DMatrix::identity(2, 2); 2];
        let b = vec![DMatrix::identity(2, 2) * 0.5; 2];
        let s1 = DVector::from_vec(vec![1.0, 0.0]);
        let tasks = gen_diverse_lqr(&a, &b, &s1).unwrap();
        assert_eq!(tasks.len(), 4);
        assert_eq!(tasks[3].rs(1)[(1, 1)], 1.0);
        assert_eq!(tasks[3].rs(0), &DMatrix::zeros(2, 2));
        for t in &tasks {
            riccati(t).unwrap();
        }
        // with B = I the last-step reward makes −I + BᵀPB singular at step 1
        let b = vec![DMatrix::identity(2, 2); 2];
        let tasks = gen_diverse_lqr(&a, &b, &s1).unwrap();
        assert!(matches!(riccati(&tasks[2]), Err(Error::IllPosed { step: 1, .. })));
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = random_lqr_system(2, 1, 2, &mut rng);
        let text = serde_json::to_string(&sys.to_file()).unwrap();
        assert!(text.starts_with("{\"ds\":2,\"da\":1,\"A\":"));
        let back = LqrSystem::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, sys);
    }
}
