//! The coupled system `∂t v - ∂²v = f_v + g_v`, `σ' = f_σ + g_σ` with the
//! boundary conditions at `θ(σ(t))`: direct IMEX stepping, the change of
//! variables `w = G(θ0, θ(σ)) v` onto the fixed domain of `A(θ0)`, and the
//! Picard iteration for `(w, σ)`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::error::{FkError, Result};
use crate::extension::{AlphaPair, ExtensionOps};
use crate::fk_operator::{assemble_operator, OperatorMatrix};
use crate::grid::{diff1, lp_time_norm, lq_norm, trajectory_norms, Grid, GridFunction, NormSpec, Trajectory};

/// Filtration ratio as a function of the concentration `σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaProfile {
    /// `θ_min + (θ_max - θ_min) / (1 + e^{k(σ - σ_c)})`.
    Logistic {
        theta_min: f64,
        theta_max: f64,
        steepness: f64,
        center: f64,
    },
    Constant {
        theta: f64,
    },
}

impl Default for ThetaProfile {
    fn default() -> Self {
        ThetaProfile::Logistic {
            theta_min: 0.05,
            theta_max: 0.95,
            steepness: 4.0,
            center: 1.0,
        }
    }
}

impl ThetaProfile {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThetaProfile::Logistic {
                theta_min,
                theta_max,
                steepness,
                center,
            } => {
                if !(theta_min > 0.0 && theta_min < theta_max && theta_max <= 1.0) {
                    return Err(FkError::InvalidParameter(format!(
                        "need 0 < theta_min < theta_max <= 1, got {theta_min}, {theta_max}"
                    )));
                }
                if !(steepness > 0.0 && center.is_finite()) {
                    return Err(FkError::InvalidParameter("steepness must be > 0".into()));
                }
                Ok(())
            }
            ThetaProfile::Constant { theta } => {
                if (0.0..=1.0).contains(&theta) {
                    Ok(())
                } else {
                    Err(FkError::InvalidTheta(theta))
                }
            }
        }
    }

    pub fn theta(&self, sigma: f64) -> f64 {
        match *self {
            ThetaProfile::Logistic {
                theta_min,
                theta_max,
                steepness,
                center,
            } => theta_min + (theta_max - theta_min) / (1.0 + (steepness * (sigma - center)).exp()),
            ThetaProfile::Constant { theta } => theta,
        }
    }

    pub fn dtheta(&self, sigma: f64) -> f64 {
        match *self {
            ThetaProfile::Logistic {
                theta_min,
                theta_max,
                steepness,
                center,
            } => {
                // Written with e^{-|z|} so large |z| cannot overflow.
                let z = steepness * (sigma - center);
                let e = (-z.abs()).exp();
                -(theta_max - theta_min) * steepness * e / (1.0 + e).powi(2)
            }
            ThetaProfile::Constant { .. } => 0.0,
        }
    }
}

/// Which reaction terms drive the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reaction {
    /// `f_v = -θ(σ)∂v + v(1 - v)`, `f_σ = σ(1 - σ) + θ(σ)² γ₊v`.
    #[default]
    Typical,
    /// `f_v = f_σ = 0`.
    Linear,
}

type SpaceTimeForcing = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type TimeForcing = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone, Default)]
pub struct NonlinearitySpec {
    pub reaction: Reaction,
    /// `g_v(t, x)`.
    pub forcing_v: Option<SpaceTimeForcing>,
    /// `g_σ(t)`.
    pub forcing_sigma: Option<TimeForcing>,
}

impl fmt::Debug for NonlinearitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearitySpec")
            .field("reaction", &self.reaction)
            .field("forcing_v", &self.forcing_v.is_some())
            .field("forcing_sigma", &self.forcing_sigma.is_some())
            .finish()
    }
}

impl NonlinearitySpec {
    pub fn typical() -> Self {
        Self::default()
    }

    pub fn linear() -> Self {
        NonlinearitySpec {
            reaction: Reaction::Linear,
            ..Self::default()
        }
    }

    /// Pointwise `f_v(v, ∂v, σ)`.
    pub fn f_v(&self, v: f64, dv: f64, theta: f64) -> f64 {
        match self.reaction {
            Reaction::Typical => -theta * dv + v * (1.0 - v),
            Reaction::Linear => 0.0,
        }
    }

    /// `f_σ(γ₊v, σ, θ)`.
    pub fn f_sigma(&self, trace: f64, sigma: f64, theta: f64) -> f64 {
        match self.reaction {
            Reaction::Typical => sigma * (1.0 - sigma) + theta * theta * trace,
            Reaction::Linear => 0.0,
        }
    }

    pub fn g_v(&self, t: f64, grid: Grid) -> Option<GridFunction> {
        self.forcing_v
            .as_ref()
            .map(|g| GridFunction::from_fn(grid, |x| g(t, x)))
    }

    pub fn g_sigma(&self, t: f64) -> f64 {
        self.forcing_sigma.as_ref().map_or(0.0, |g| g(t))
    }

    /// `f_v(v, ∂v, σ) + g_v(t)` at every node.
    pub fn bulk(&self, t: f64, v: &GridFunction, theta: f64) -> GridFunction {
        let dv = diff1(v);
        let mut out = v.zip_with(&dv, |a, b| self.f_v(a, b, theta));
        if let Some(g) = self.g_v(t, v.grid()) {
            out = out.add(&g);
        }
        out
    }

    /// Right-hand side of the `σ` equation.
    pub fn sigma_rhs(&self, t: f64, trace: f64, sigma: f64, theta: f64) -> f64 {
        self.f_sigma(trace, sigma, theta) + self.g_sigma(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub v: GridFunction,
    pub sigma: f64,
    /// `θ(σ)`.
    pub theta: f64,
}

impl SimState {
    pub fn new(t: f64, v: GridFunction, sigma: f64, profile: &ThetaProfile) -> Self {
        SimState {
            t,
            v,
            sigma,
            theta: profile.theta(sigma),
        }
    }
}

/// States beyond this size are reported as blow-up while norms are still finite.
pub const BLOW_UP_LEVEL: f64 = 1e100;

fn blow_up(state: &SimState, dt: f64) -> FkError {
    FkError::BlowUp {
        t: state.t + dt,
        last_good: Some(Box::new(state.clone())),
    }
}

fn crank_nicolson_rhs(op: &OperatorMatrix, x: &[f64], dt: f64) -> Vec<f64> {
    let ax = op.apply(x);
    x.iter().zip(&ax).map(|(a, b)| a + 0.5 * dt * b).collect()
}

/// One IMEX step: Heun half step for `σ`, Crank–Nicolson diffusion with
/// `A(θ(σ_mid))`, explicit reaction with one corrector pass, Heun for `σ`,
/// end values re-imposed at `θ(σ_new)`.
pub fn step_direct(state: &SimState, dt: f64, profile: &ThetaProfile, nonlin: &NonlinearitySpec) -> Result<SimState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FkError::InvalidParameter(format!("time step {dt}")));
    }
    let (t, sigma) = (state.t, state.sigma);
    let trace = state.v.trace_plus();
    let k1 = nonlin.sigma_rhs(t, trace, sigma, profile.theta(sigma));
    let s_half = sigma + 0.5 * dt * k1;
    let k2 = nonlin.sigma_rhs(t + 0.5 * dt, trace, s_half, profile.theta(s_half));
    let sigma_mid = sigma + 0.25 * dt * (k1 + k2);
    if !sigma_mid.is_finite() {
        return Err(blow_up(state, dt));
    }

    let op = assemble_operator(profile.theta(sigma_mid), state.v.grid())?;
    let solver = op.shifted_solver(1.0, 0.5 * dt)?;
    let x = OperatorMatrix::interior(&state.v);
    let base = crank_nicolson_rhs(&op, &x, dt);
    let n0 = OperatorMatrix::interior(&nonlin.bulk(t, &state.v, state.theta));

    let rhs: Vec<f64> = base.iter().zip(&n0).map(|(b, n)| b + dt * n).collect();
    let v_pred = op.reconstruct(&solver.solve(&rhs));
    let sigma_pred = sigma + dt * k1;
    let n1 = OperatorMatrix::interior(&nonlin.bulk(t + dt, &v_pred, profile.theta(sigma_pred)));
    let rhs: Vec<f64> = base
        .iter()
        .zip(n0.iter().zip(&n1))
        .map(|(b, (a, c))| b + 0.5 * dt * (a + c))
        .collect();
    let x1 = solver.solve(&rhs);

    let trace1 = op.reconstruct(&x1).trace_plus();
    let k3 = nonlin.sigma_rhs(t + dt, trace1, sigma_pred, profile.theta(sigma_pred));
    let sigma_new = sigma + 0.5 * dt * (k1 + k3);
    let theta_new = profile.theta(sigma_new);
    let v_new = assemble_operator(theta_new, state.v.grid())?.reconstruct(&x1);
    if !(v_new.is_finite() && v_new.max_abs() < BLOW_UP_LEVEL && sigma_new.abs() < BLOW_UP_LEVEL) {
        return Err(blow_up(state, dt));
    }
    Ok(SimState {
        t: t + dt,
        v: v_new,
        sigma: sigma_new,
        theta: theta_new,
    })
}

fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon > 0.0 && dt > 0.0 && horizon.is_finite()) {
        return Err(FkError::InvalidParameter(format!("horizon {horizon}, step {dt}")));
    }
    let steps = (horizon / dt).round();
    if steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 * horizon {
        return Err(FkError::InvalidParameter(format!(
            "horizon {horizon} is not a multiple of dt = {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Runs `horizon / dt` steps from `initial`, calling `observer` on every
/// state including the first.
pub fn simulate_direct_with(
    initial: SimState,
    horizon: f64,
    dt: f64,
    profile: &ThetaProfile,
    nonlin: &NonlinearitySpec,
    mut observer: impl FnMut(&SimState),
) -> Result<SimState> {
    profile.validate()?;
    let steps = step_count(horizon, dt)?;
    let t0 = initial.t;
    let mut state = initial;
    observer(&state);
    for k in 0..steps {
        let mut next = step_direct(&state, dt, profile, nonlin)?;
        // Keep sample times on the exact grid.
        next.t = t0 + (k + 1) as f64 * dt;
        state = next;
        observer(&state);
    }
    Ok(state)
}

pub fn simulate_direct(
    initial: SimState,
    horizon: f64,
    dt: f64,
    profile: &ThetaProfile,
    nonlin: &NonlinearitySpec,
) -> Result<Vec<SimState>> {
    let mut out = Vec::new();
    simulate_direct_with(initial, horizon, dt, profile, nonlin, |s| out.push(s.clone()))?;
    Ok(out)
}

/// `(ṽ, v_c)` with `v_c = (θ - θ0) E(θ0) v` and `ṽ = v - v_c`.
pub fn transform_to_tilde(state: &SimState, theta0: f64, ops: &ExtensionOps) -> Result<(GridFunction, GridFunction)> {
    let pair = AlphaPair::new(theta0, state.theta)?;
    if pair.delta().abs() >= 0.5 {
        return Err(FkError::RadiusViolation(pair.delta().abs()));
    }
    let vc = ops.extend_e(theta0, &state.v).scale(pair.delta());
    Ok((state.v.sub(&vc), vc))
}

/// How `σ'` enters the first forcing term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaRate<'a> {
    /// Centered differences of the sampled `σ`.
    FiniteDifference,
    /// `f_σ + g_σ` evaluated on the current iterate.
    OdeRhs,
    Given(&'a [f64]),
}

/// Forcing of the transformed system, sampled along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingTerms {
    /// `-θ'(σ) σ' E(θ0) G⁻¹w`.
    pub f1: Vec<GridFunction>,
    /// `G f_v(G⁻¹w, σ)`.
    pub f2: Vec<GridFunction>,
    /// `(θ - θ0) R₂(θ0) G⁻¹w`.
    pub f3: Vec<GridFunction>,
    /// `G g_v`.
    pub gw: Vec<GridFunction>,
    /// `f_σ(γ₊G⁻¹w, σ)`.
    pub f_sigma: Vec<f64>,
    /// `G⁻¹w` at each sample.
    pub v: Vec<GridFunction>,
}

impl ForcingTerms {
    pub fn total_w(&self, k: usize) -> GridFunction {
        self.f1[k].add(&self.f2[k]).add(&self.f3[k]).add(&self.gw[k])
    }
}

/// Shared inputs of the transformed problem.
#[derive(Debug, Clone)]
pub struct TransformedProblem<'a> {
    pub ops: &'a ExtensionOps,
    pub profile: &'a ThetaProfile,
    pub nonlin: &'a NonlinearitySpec,
    pub theta0: f64,
}

pub fn assemble_forcing(
    problem: &TransformedProblem,
    times: &[f64],
    w: &[GridFunction],
    sigma: &[f64],
    rate: SigmaRate,
) -> Result<ForcingTerms> {
    let k = times.len();
    if w.len() != k || sigma.len() != k || k < 2 {
        return Err(FkError::TooFewSamples(k.min(w.len()).min(sigma.len())));
    }
    let TransformedProblem {
        ops,
        profile,
        nonlin,
        theta0,
    } = *problem;
    let grid = ops.grid();
    let mut out = ForcingTerms {
        f1: Vec::with_capacity(k),
        f2: Vec::with_capacity(k),
        f3: Vec::with_capacity(k),
        gw: Vec::with_capacity(k),
        f_sigma: Vec::with_capacity(k),
        v: Vec::with_capacity(k),
    };
    let fd = match rate {
        SigmaRate::FiniteDifference => Some(crate::grid::time_derivative(sigma, times[1] - times[0])),
        _ => None,
    };
    for j in 0..k {
        let theta = profile.theta(sigma[j]);
        let pair = AlphaPair::new(theta0, theta)?;
        let v = ops.apply_g_inverse(pair, &w[j])?;
        let fs = nonlin.f_sigma(v.trace_plus(), sigma[j], theta);
        let ds = match rate {
            SigmaRate::FiniteDifference => fd.as_ref().expect("computed above")[j],
            SigmaRate::OdeRhs => fs + nonlin.g_sigma(times[j]),
            SigmaRate::Given(r) => r[j],
        };
        if !ds.is_finite() {
            return Err(FkError::NonFinite("sigma rate"));
        }
        out.f1
            .push(ops.extend_e(theta0, &v).scale(-profile.dtheta(sigma[j]) * ds));
        let dv = diff1(&v);
        let fv = v.zip_with(&dv, |a, b| nonlin.f_v(a, b, theta));
        out.f2.push(ops.apply_g(pair, &fv));
        out.f3.push(ops.remainder_r(2, theta0, &v)?.scale(pair.delta()));
        out.gw.push(match nonlin.g_v(times[j], grid) {
            Some(g) => ops.apply_g(pair, &g),
            None => GridFunction::zeros(grid),
        });
        out.f_sigma.push(fs);
        out.v.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub p: f64,
    pub q: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            horizon: 0.05,
            dt: 5e-4,
            tol: 1e-10,
            max_iter: 60,
            max_halvings: 5,
            p: 2.0,
            q: 2.0,
        }
    }
}

/// Starting iterate of the Picard map.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialGuess {
    /// `(w, σ)(t) = (v0, σ0)` for all t.
    Frozen,
    /// Given samples on the time grid (truncated after halvings).
    Trajectory { w: Vec<GridFunction>, sigma: Vec<f64> },
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// `‖w^{k+1} - w^k‖_{E_{w,1}} + ‖σ^{k+1} - σ^k‖_{E_{σ,1}}`.
    pub defects: Vec<f64>,
    /// `defects[k] / defects[k-1]`, for previous defects above 1e-14.
    pub ratios: Vec<(usize, f64)>,
    pub converged: bool,
    pub horizon: f64,
    pub halvings: usize,
    pub theta0: f64,
    #[serde(skip)]
    pub w: Trajectory,
    /// `v = G⁻¹w`.
    #[serde(skip)]
    pub trajectory: Trajectory,
}

struct PicardProblem<'a> {
    problem: TransformedProblem<'a>,
    times: Vec<f64>,
    solver: crate::fk_operator::ShiftedSolver,
    op: OperatorMatrix,
    w0: GridFunction,
    sigma0: f64,
    dt: f64,
}

impl PicardProblem<'_> {
    /// One application of the solution map.
    fn apply(&self, w: &[GridFunction], sigma: &[f64]) -> Result<(Vec<GridFunction>, Vec<f64>, ForcingTerms)> {
        let forcing = assemble_forcing(&self.problem, &self.times, w, sigma, SigmaRate::OdeRhs)?;
        let k = self.times.len();
        let dt = self.dt;
        let nonlin = self.problem.nonlin;
        let mut w_new = Vec::with_capacity(k);
        let mut s_new = Vec::with_capacity(k);
        w_new.push(self.w0.clone());
        s_new.push(self.sigma0);
        let mut f_prev = OperatorMatrix::interior(&forcing.total_w(0));
        let mut x = OperatorMatrix::interior(&self.w0);
        for j in 0..k - 1 {
            let f_next = OperatorMatrix::interior(&forcing.total_w(j + 1));
            let base = crank_nicolson_rhs(&self.op, &x, dt);
            let rhs: Vec<f64> = base
                .iter()
                .zip(f_prev.iter().zip(&f_next))
                .map(|(b, (a, c))| b + 0.5 * dt * (a + c))
                .collect();
            x = self.solver.solve(&rhs);
            w_new.push(self.op.reconstruct(&x));
            let rate = |i: usize| forcing.f_sigma[i] + nonlin.g_sigma(self.times[i]);
            s_new.push(s_new[j] + 0.5 * dt * (rate(j) + rate(j + 1)));
            f_prev = f_next;
        }
        if w_new.iter().any(|w| !w.is_finite()) || s_new.iter().any(|s| !s.is_finite()) {
            return Err(FkError::NonFinite("Picard iterate"));
        }
        Ok((w_new, s_new, forcing))
    }
}

fn trajectory(times: &[f64], states: Vec<GridFunction>, sigma: Vec<f64>) -> Trajectory {
    Trajectory {
        times: times.to_vec(),
        states,
        sigma,
    }
}

fn defect(times: &[f64], a: (&[GridFunction], &[f64]), b: (&[GridFunction], &[f64]), spec: &NormSpec) -> Result<f64> {
    let dw: Vec<GridFunction> = a.0.iter().zip(b.0).map(|(x, y)| x.sub(y)).collect();
    let ds: Vec<f64> = a.1.iter().zip(b.1).map(|(x, y)| x - y).collect();
    let n = trajectory_norms(&trajectory(times, dw, ds), spec)?;
    Ok(n.e_w1 + n.e_sigma1)
}

/// Picard iteration for `(w, σ)` with the frozen operator `A(θ(σ0))`. The
/// horizon is halved (at most `max_halvings` times) when an iterate leaves
/// the Neumann radius or the defects grow.
pub fn solve_fixed_point(
    v0: &GridFunction,
    sigma0: f64,
    cfg: &FixedPointConfig,
    ops: &ExtensionOps,
    profile: &ThetaProfile,
    nonlin: &NonlinearitySpec,
    guess: &InitialGuess,
) -> Result<FixedPointReport> {
    profile.validate()?;
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(FkError::InvalidParameter(
            "tolerance and iteration cap must be positive".into(),
        ));
    }
    let theta0 = profile.theta(sigma0);
    let grid = v0.grid();
    let op = assemble_operator(theta0, grid)?;
    let mut steps = step_count(cfg.horizon, cfg.dt)?;
    let mut halvings = 0;
    loop {
        let horizon = steps as f64 * cfg.dt;
        match picard(v0, sigma0, cfg, ops, profile, nonlin, guess, &op, theta0, steps) {
            Ok(mut report) => {
                report.halvings = halvings;
                report.horizon = horizon;
                return Ok(report);
            }
            Err(
                e @ (FkError::RadiusViolation(_)
                | FkError::NonFinite(_)
                | FkError::SeriesNotConverged(_)
                | FkError::Diverged(_)),
            ) => {
                if halvings == cfg.max_halvings || steps < 4 {
                    return Err(e);
                }
                halvings += 1;
                steps /= 2;
            }
            Err(e) => return Err(e),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn picard(
    v0: &GridFunction,
    sigma0: f64,
    cfg: &FixedPointConfig,
    ops: &ExtensionOps,
    profile: &ThetaProfile,
    nonlin: &NonlinearitySpec,
    guess: &InitialGuess,
    op: &OperatorMatrix,
    theta0: f64,
    steps: usize,
) -> Result<FixedPointReport> {
    let times: Vec<f64> = (0..=steps).map(|j| j as f64 * cfg.dt).collect();
    let spec = NormSpec::new(cfg.p, cfg.q, steps as f64 * cfg.dt)?;
    let pp = PicardProblem {
        problem: TransformedProblem {
            ops,
            profile,
            nonlin,
            theta0,
        },
        times: times.clone(),
        solver: op.shifted_solver(1.0, 0.5 * cfg.dt)?,
        op: op.clone(),
        // v_c(0) = 0, so w(0) = v0.
        w0: v0.clone(),
        sigma0,
        dt: cfg.dt,
    };
    let (mut w, mut s) = match guess {
        InitialGuess::Frozen => (vec![v0.clone(); steps + 1], vec![sigma0; steps + 1]),
        InitialGuess::Trajectory { w, sigma } => {
            if w.len() < steps + 1 || sigma.len() < steps + 1 {
                return Err(FkError::TooFewSamples(w.len().min(sigma.len())));
            }
            (w[..=steps].to_vec(), sigma[..=steps].to_vec())
        }
    };
    let mut defects = Vec::new();
    let mut ratios = Vec::new();
    for it in 1..=cfg.max_iter {
        let (w_new, s_new, _) = pp.apply(&w, &s)?;
        let d = defect(&times, (&w_new, &s_new), (&w, &s), &spec)?;
        if let Some(&prev) = defects.last() {
            if prev > 1e-14 {
                ratios.push((it, d / prev));
            }
        }
        defects.push(d);
        w = w_new;
        s = s_new;
        if d <= cfg.tol {
            let forcing = assemble_forcing(&pp.problem, &times, &w, &s, SigmaRate::OdeRhs)?;
            return Ok(FixedPointReport {
                iterations: it,
                defects,
                ratios,
                converged: true,
                horizon: 0.0,
                halvings: 0,
                theta0,
                trajectory: trajectory(&times, forcing.v, s.clone()),
                w: trajectory(&times, w, s),
            });
        }
        if !d.is_finite() || (defects.len() > 3 && d > 1e3 * defects[0]) {
            return Err(FkError::Diverged(d));
        }
    }
    Err(FkError::MaxIterations(cfg.max_iter))
}

/// `‖v_ε - v‖_{E_{w,1}} / ε` for the initial data `v0 + ε·perturbation`.
#[allow(clippy::too_many_arguments)]
pub fn continuous_dependence_probe(
    v0: &GridFunction,
    sigma0: f64,
    perturbation: &GridFunction,
    eps: f64,
    cfg: &FixedPointConfig,
    ops: &ExtensionOps,
    profile: &ThetaProfile,
    nonlin: &NonlinearitySpec,
) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(FkError::InvalidParameter(format!(
            "perturbation size {eps} outside [1e-6, 1e-2]"
        )));
    }
    if perturbation.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let base = solve_fixed_point(v0, sigma0, cfg, ops, profile, nonlin, &InitialGuess::Frozen)?;
    let moved = solve_fixed_point(
        &v0.axpy(eps, perturbation),
        sigma0,
        cfg,
        ops,
        profile,
        nonlin,
        &InitialGuess::Frozen,
    )?;
    let k = base.trajectory.len().min(moved.trajectory.len());
    let times = &base.trajectory.times[..k];
    let spec = NormSpec::new(cfg.p, cfg.q, times[k - 1])?;
    let dw: Vec<GridFunction> = (0..k)
        .map(|j| moved.trajectory.states[j].sub(&base.trajectory.states[j]))
        .collect();
    let n = trajectory_norms(&trajectory(times, dw, vec![0.0; k]), &spec)?;
    Ok(n.e_w1 / eps)
}

/// Measured sizes entering the growth assumption on the reaction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionProbe {
    /// `δ(T) = T^{1 - 1/p}`.
    pub delta: f64,
    /// `‖v‖_{E_{v,1}}`.
    pub nu: f64,
    /// `‖σ‖_{E_{σ,1}}`.
    pub s: f64,
    /// `‖f_v(v, σ)‖_{E_{v,0}}`.
    pub f_v_norm: f64,
    /// `‖f_σ(v, σ)‖_{L^p}`.
    pub f_sigma_norm: f64,
}

impl AssumptionProbe {
    /// `(δ + ν + s)(ν + s)`, the scale both bounds are taken against.
    pub fn scale(&self) -> f64 {
        (self.delta + self.nu + self.s) * (self.nu + self.s)
    }

    pub fn ratio_v(&self) -> f64 {
        self.f_v_norm / self.scale()
    }

    pub fn ratio_sigma(&self) -> f64 {
        self.f_sigma_norm / self.scale()
    }
}

pub fn assumption_probe(
    traj: &Trajectory,
    spec: &NormSpec,
    profile: &ThetaProfile,
    nonlin: &NonlinearitySpec,
) -> Result<AssumptionProbe> {
    let norms = trajectory_norms(traj, spec)?;
    let dt = traj.dt();
    let keep = traj.len().min((spec.horizon / dt).round() as usize + 1);
    let mut fv = Vec::with_capacity(keep);
    let mut fs = Vec::with_capacity(keep);
    for j in 0..keep {
        let v = &traj.states[j];
        let theta = profile.theta(traj.sigma[j]);
        let dv = diff1(v);
        fv.push(lq_norm(&v.zip_with(&dv, |a, b| nonlin.f_v(a, b, theta)), spec.q)?);
        fs.push(nonlin.f_sigma(v.trace_plus(), traj.sigma[j], theta));
    }
    Ok(AssumptionProbe {
        delta: spec.horizon.powf(1.0 - 1.0 / spec.p),
        nu: norms.e_w1,
        s: norms.e_sigma1,
        f_v_norm: lp_time_norm(&fv, spec.p, dt)?,
        f_sigma_norm: lp_time_norm(&fs, spec.p, dt)?,
    })
}

/// Trajectory of a direct run, for norms and comparisons.
pub fn states_to_trajectory(states: &[SimState]) -> Trajectory {
    Trajectory {
        times: states.iter().map(|s| s.t).collect(),
        states: states.iter().map(|s| s.v.clone()).collect(),
        sigma: states.iter().map(|s| s.sigma).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::PsiStar;
    use crate::fk_operator::{boundary_residuals, energy_form, make_compatible, periodic_mass};
    use crate::grid::{diff2, l2_norm, time_derivative_states};
    use crate::spectral::{continuous_eigen_oracle, EigenBasis};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;
    use std::f64::consts::PI;

    fn bump(g: Grid, amp: f64) -> GridFunction {
        GridFunction::from_fn(g, |x| amp * (1.0 + (PI * x).cos()))
    }

    fn frozen(theta: f64) -> ThetaProfile {
        ThetaProfile::Constant { theta }
    }

    #[test]
    fn logistic_profile() {
        let p = ThetaProfile::default();
        p.validate().unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=80 {
            let s = -4.0 + 0.1 * i as f64;
            let th = p.theta(s);
            assert!(th < prev && th > 0.05 && th < 0.95);
            prev = th;
            let fd = (p.theta(s + 1e-6) - p.theta(s - 1e-6)) / 2e-6;
            assert!((fd - p.dtheta(s)).abs() < 1e-8);
        }
        assert!((p.theta(1.0) - 0.5).abs() < 1e-15);
        assert!(ThetaProfile::Logistic {
            theta_min: 0.5,
            theta_max: 0.4,
            steepness: 1.0,
            center: 0.0
        }
        .validate()
        .is_err());
        assert!(p.dtheta(1e6).is_finite() && p.dtheta(-1e6).is_finite());
    }

    #[test]
    fn logistic_equilibrium_is_stationary() {
        let g = Grid::new(100).unwrap();
        let p = ThetaProfile::default();
        let s0 = SimState::new(0.0, GridFunction::zeros(g), 1.0, &p);
        let end = simulate_direct(s0, 0.1, 1e-3, &p, &NonlinearitySpec::typical()).unwrap();
        let last = end.last().unwrap();
        assert_eq!(last.sigma, 1.0);
        assert_eq!(last.v.max_abs(), 0.0);
        assert_eq!(end.len(), 101);
    }

    #[test]
    fn frozen_modal_decay() {
        let g = Grid::new(400).unwrap();
        let basis = EigenBasis::new(1.0, g).unwrap();
        let v0 = basis.operator().reconstruct(&basis.vector(0));
        let p = frozen(1.0);
        let states = simulate_direct(
            SimState::new(0.0, v0.clone(), 0.0, &p),
            0.5,
            1e-3,
            &p,
            &NonlinearitySpec::linear(),
        )
        .unwrap();
        let ratio = l2_norm(&states.last().unwrap().v) / l2_norm(&v0);
        let mu = continuous_eigen_oracle(1.0, 1).unwrap();
        assert!((ratio - (-mu * mu * 0.5).exp()).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn periodic_mass_conserved() {
        let g = Grid::new(200).unwrap();
        let p = frozen(0.0);
        let v0 = make_compatible(0.0, &GridFunction::from_fn(g, |x| (2.0 * x).exp() + x)).unwrap();
        let m0 = periodic_mass(&v0);
        let states = simulate_direct(
            SimState::new(0.0, v0, 0.0, &p),
            1.0,
            1e-2,
            &p,
            &NonlinearitySpec::linear(),
        )
        .unwrap();
        for s in &states {
            assert!((periodic_mass(&s.v) - m0).abs() <= 1e-8 * s.t.max(1.0));
        }
    }

    #[test]
    fn linear_energy_identity() {
        let g = Grid::new(200).unwrap();
        let h = g.h();
        for &theta in &[0.25, 0.5, 1.0] {
            let p = frozen(theta);
            let v0 = make_compatible(
                theta,
                &GridFunction::from_fn(g, |x| (PI * x).sin() + 0.5 * (2.0 * x).cos()),
            )
            .unwrap();
            let dt = 1e-3;
            let states = simulate_direct(
                SimState::new(0.0, v0, 0.0, &p),
                0.2,
                dt,
                &p,
                &NonlinearitySpec::linear(),
            )
            .unwrap();
            for w in states.windows(2) {
                let (a, b) = (&w[0].v, &w[1].v);
                assert!(l2_norm(b) <= l2_norm(a) * (1.0 + 1e-12));
                let mid = a.add(b).scale(0.5);
                let r = (0.5 * l2_norm(b).powi(2) - 0.5 * l2_norm(a).powi(2)) / dt + energy_form(&mid);
                assert!(r.abs() <= 10.0 * (h * h + dt * dt), "θ={theta} t={} r={r}", w[1].t);
            }
        }
    }

    #[test]
    fn constant_profile_matches_frozen_operator_bitwise() {
        let g = Grid::new(100).unwrap();
        let v0 = bump(g, 0.1);
        let nl = NonlinearitySpec::typical();
        let a = frozen(0.4);
        let b = ThetaProfile::Constant { theta: 0.4 };
        let ra = simulate_direct(SimState::new(0.0, v0.clone(), 0.3, &a), 0.05, 1e-3, &a, &nl).unwrap();
        let rb = simulate_direct(SimState::new(0.0, v0, 0.3, &b), 0.05, 1e-3, &b, &nl).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn direct_solver_second_order_in_time() {
        let g = Grid::new(100).unwrap();
        let p = ThetaProfile::default();
        let nl = NonlinearitySpec::typical();
        let run = |dt: f64| {
            let s0 = SimState::new(0.0, bump(g, 0.1), 0.5, &p);
            simulate_direct(s0, 0.1, dt, &p, &nl).unwrap().pop().unwrap()
        };
        let (a, b, c) = (run(4e-3), run(2e-3), run(1e-3));
        let e1 = a.v.sub(&c.v).max_abs();
        let e2 = b.v.sub(&c.v).max_abs();
        assert!(e1 / e2 > 3.0, "{e1} {e2}");
        assert!((a.sigma - c.sigma).abs() / (b.sigma - c.sigma).abs() > 3.0);
    }

    #[test]
    fn blow_up_carries_last_state() {
        let g = Grid::new(40).unwrap();
        let p = frozen(0.5);
        let s0 = SimState::new(0.0, GridFunction::from_fn(g, |_| 1e200), 0.0, &p);
        let nl = NonlinearitySpec::typical();
        match simulate_direct(s0.clone(), 0.1, 1e-2, &p, &nl) {
            Err(FkError::BlowUp { last_good: Some(s), .. }) => assert_eq!(s.t, 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn finite_time_blow_up_is_reported() {
        // v' = -v² from a large negative bump leaves every bound well before t = 1.
        let g = Grid::new(100).unwrap();
        let p = ThetaProfile::default();
        let v0 = GridFunction::from_fn(g, |x| -50.0 * (1.0 + (std::f64::consts::PI * x).cos()));
        let mut last = 0.0;
        let r = simulate_direct_with(
            SimState::new(0.0, v0, 0.5, &p),
            1.0,
            1e-3,
            &p,
            &NonlinearitySpec::typical(),
            |s| {
                assert!(s.v.max_abs() < BLOW_UP_LEVEL);
                last = s.t;
            },
        );
        match r {
            Err(FkError::BlowUp { t, last_good: Some(s) }) => {
                assert_eq!(s.t, last);
                assert!(t < 0.1 && (t - last - 1e-3).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tilde_transform() {
        let g = Grid::new(200).unwrap();
        let h = g.h();
        let ops = ExtensionOps::new(PsiStar::default(), g);
        let p = frozen(0.7);
        let v = GridFunction::from_fn(g, |x| (x + 0.3).sin());
        let same = SimState::new(0.0, v.clone(), 0.0, &p);
        let (vt, vc) = transform_to_tilde(&same, 0.7, &ops).unwrap();
        assert_eq!(vc.max_abs(), 0.0);
        assert_eq!(vt, v);

        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        for _ in 0..20 {
            let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let raw = GridFunction::from_fn(g, |x| {
                c[0] + c[1] * (2.0 * x).sin() + c[2] * (PI * x).cos() + c[3] * x * x
            });
            let theta = 0.7;
            let v = make_compatible(theta, &raw).unwrap();
            let state = SimState::new(0.0, v.clone(), 0.0, &frozen(theta));
            let (vt, vc) = transform_to_tilde(&state, 0.5, &ops).unwrap();
            let (b1, b2) = boundary_residuals(0.5, &vt);
            assert!(b1.abs() <= 10.0 * h * h && b2.abs() <= 10.0 * h * h, "{b1} {b2}");
            assert!(vt.add(&vc).sub(&v).max_abs() <= 1e-12);
        }
        let far = SimState::new(0.0, v, 0.0, &frozen(0.95));
        assert!(matches!(
            transform_to_tilde(&far, 0.3, &ops),
            Err(FkError::RadiusViolation(_))
        ));
    }

    #[test]
    fn forcing_trivial_cases() {
        let g = Grid::new(100).unwrap();
        let ops = ExtensionOps::new(PsiStar::default(), g);
        let p = ThetaProfile::default();
        let nl = NonlinearitySpec::typical();
        let times: Vec<f64> = (0..5).map(|k| k as f64 * 0.01).collect();
        let w: Vec<GridFunction> = times.iter().map(|t| bump(g, 0.1 + t)).collect();
        let s0 = 0.5;
        let problem = TransformedProblem {
            ops: &ops,
            profile: &p,
            nonlin: &nl,
            theta0: p.theta(0.6),
        };
        let f = assemble_forcing(&problem, &times, &w, &[s0; 5], SigmaRate::FiniteDifference).unwrap();
        assert!(f.f1.iter().all(|x| x.max_abs() == 0.0));

        let flat = frozen(0.5);
        let problem = TransformedProblem {
            ops: &ops,
            profile: &flat,
            nonlin: &nl,
            theta0: 0.5,
        };
        let f = assemble_forcing(
            &problem,
            &times,
            &w,
            &[0.2, 0.3, 0.4, 0.5, 0.6],
            SigmaRate::FiniteDifference,
        )
        .unwrap();
        for k in 0..5 {
            assert_eq!(f.f3[k].max_abs(), 0.0);
            assert_eq!(f.f2[k], nl.bulk(times[k], &w[k], 0.5));
        }
    }

    /// `∂t ṽ - ∂²ṽ - ΣF` along a direct trajectory, interior sup norm.
    fn transformed_residual(n: usize, dt: f64) -> f64 {
        let g = Grid::new(n).unwrap();
        let ops = ExtensionOps::new(PsiStar::default(), g);
        let p = ThetaProfile::default();
        let nl = NonlinearitySpec::typical();
        let s0 = SimState::new(0.0, bump(g, 0.1), 0.5, &p);
        let states = simulate_direct(s0, 0.04, dt, &p, &nl).unwrap();
        let theta0 = p.theta(0.5);
        let wt: Vec<GridFunction> = states
            .iter()
            .map(|s| transform_to_tilde(s, theta0, &ops).unwrap().0)
            .collect();
        let sig: Vec<f64> = states.iter().map(|s| s.sigma).collect();
        let times: Vec<f64> = states.iter().map(|s| s.t).collect();
        let problem = TransformedProblem {
            ops: &ops,
            profile: &p,
            nonlin: &nl,
            theta0,
        };
        let f = assemble_forcing(&problem, &times, &wt, &sig, SigmaRate::FiniteDifference).unwrap();
        let dw = time_derivative_states(&wt, dt);
        let mut worst: f64 = 0.0;
        // Skip the initial layer: f_v(v0) does not satisfy the boundary
        // conditions, so ∂t v is not smooth at t = 0.
        for k in times.len() / 4..times.len() - 1 {
            let r = dw[k].sub(&diff2(&wt[k])).sub(&f.total_w(k));
            for i in 1..n {
                worst = worst.max(r.values()[i].abs());
            }
        }
        worst
    }

    #[test]
    fn transformed_equation_is_consistent() {
        let a = transformed_residual(50, 1e-3);
        let b = transformed_residual(100, 5e-4);
        assert!(a / b > 3.0 && b < 1e-3, "{a} {b}");
    }

    fn fp_setup(n: usize) -> (Grid, ExtensionOps, ThetaProfile, NonlinearitySpec) {
        let g = Grid::new(n).unwrap();
        (
            g,
            ExtensionOps::new(PsiStar::default(), g),
            ThetaProfile::default(),
            NonlinearitySpec::typical(),
        )
    }

    #[test]
    fn fixed_point_at_rest_converges_at_once() {
        let (g, ops, p, nl) = fp_setup(60);
        let cfg = FixedPointConfig {
            horizon: 0.02,
            dt: 1e-3,
            ..FixedPointConfig::default()
        };
        let r = solve_fixed_point(&GridFunction::zeros(g), 1.0, &cfg, &ops, &p, &nl, &InitialGuess::Frozen).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!(r.trajectory.states.iter().all(|v| v.max_abs() == 0.0));
        assert!(r.trajectory.sigma.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn fixed_point_contracts_and_matches_direct() {
        let (g, ops, p, nl) = fp_setup(100);
        let cfg = FixedPointConfig {
            horizon: 0.05,
            dt: 1e-3,
            ..FixedPointConfig::default()
        };
        let v0 = bump(g, 0.1);
        let r = solve_fixed_point(&v0, 0.5, &cfg, &ops, &p, &nl, &InitialGuess::Frozen).unwrap();
        assert!(r.converged && r.halvings == 0);
        assert!(*r.defects.last().unwrap() <= cfg.tol);
        assert!(
            r.ratios.iter().filter(|(k, _)| *k >= 2).all(|(_, q)| *q <= 0.5),
            "{:?}",
            r.ratios
        );

        let direct = simulate_direct(SimState::new(0.0, v0, 0.5, &p), 0.05, 1e-3, &p, &nl).unwrap();
        let gap = direct
            .iter()
            .zip(&r.trajectory.states)
            .map(|(d, v)| d.v.sub(v).max_abs())
            .fold(0.0, f64::max);
        assert!(gap <= 1e-3, "{gap}");

        // Reconstruction: w = v - v_c with v = G⁻¹w.
        for (k, v) in r.trajectory.states.iter().enumerate() {
            let state = SimState::new(0.0, v.clone(), r.trajectory.sigma[k], &p);
            let (wt, _) = transform_to_tilde(&state, r.theta0, &ops).unwrap();
            assert!(wt.sub(&r.w.states[k]).max_abs() <= 1e-12);
        }
    }

    #[test]
    fn fixed_point_unique_limit() {
        let (g, ops, p, nl) = fp_setup(60);
        let cfg = FixedPointConfig {
            horizon: 0.03,
            dt: 1e-3,
            ..FixedPointConfig::default()
        };
        let v0 = bump(g, 0.1);
        let a = solve_fixed_point(&v0, 0.5, &cfg, &ops, &p, &nl, &InitialGuess::Frozen).unwrap();
        let other = InitialGuess::Trajectory {
            w: (0..=30).map(|k| v0.scale(1.0 + 0.1 * k as f64)).collect(),
            sigma: (0..=30).map(|k| 0.5 - 0.01 * k as f64).collect(),
        };
        let b = solve_fixed_point(&v0, 0.5, &cfg, &ops, &p, &nl, &other).unwrap();
        let gap = a
            .trajectory
            .states
            .iter()
            .zip(&b.trajectory.states)
            .map(|(x, y)| x.sub(y).max_abs())
            .fold(0.0, f64::max);
        assert!(gap <= 1e-8, "{gap}");
    }

    #[test]
    fn fixed_point_halves_horizon_on_radius_violation() {
        let (g, ops, _, nl) = fp_setup(40);
        // A steep profile leaves the Neumann radius quickly once σ moves.
        let p = ThetaProfile::Logistic {
            theta_min: 0.01,
            theta_max: 1.0,
            steepness: 40.0,
            center: 0.5,
        };
        let cfg = FixedPointConfig {
            horizon: 0.64,
            dt: 1e-2,
            ..FixedPointConfig::default()
        };
        let r = solve_fixed_point(&bump(g, 0.1), 0.45, &cfg, &ops, &p, &nl, &InitialGuess::Frozen).unwrap();
        assert!(r.halvings >= 1 && r.converged, "{:?}", r.halvings);
        assert!(r.horizon < cfg.horizon);
    }

    #[test]
    fn continuous_dependence() {
        let (g, ops, p, nl) = fp_setup(60);
        let cfg = FixedPointConfig {
            horizon: 0.02,
            dt: 1e-3,
            ..FixedPointConfig::default()
        };
        let v0 = bump(g, 0.1);
        let pert = GridFunction::from_fn(g, |x| (1.0 + (PI * x).cos()) * (1.0 + x * x));
        let pert = make_compatible(p.theta(0.5), &pert).unwrap();
        let r3 = continuous_dependence_probe(&v0, 0.5, &pert, 1e-3, &cfg, &ops, &p, &nl).unwrap();
        let r4 = continuous_dependence_probe(&v0, 0.5, &pert, 1e-4, &cfg, &ops, &p, &nl).unwrap();
        assert!(r3 > 0.0 && ((r3 - r4) / r4).abs() <= 0.2, "{r3} {r4}");
        let zero = GridFunction::zeros(g);
        assert_eq!(
            continuous_dependence_probe(&v0, 0.5, &zero, 1e-3, &cfg, &ops, &p, &nl).unwrap(),
            0.0
        );
        assert!(continuous_dependence_probe(&v0, 0.5, &pert, 0.5, &cfg, &ops, &p, &nl).is_err());
    }

    #[test]
    fn growth_assumption_probe() {
        let g = Grid::new(100).unwrap();
        let p = ThetaProfile::default();
        let nl = NonlinearitySpec::typical();
        let run = |amp: f64, sigma0: f64| {
            let states = simulate_direct(SimState::new(0.0, bump(g, amp), sigma0, &p), 0.05, 1e-3, &p, &nl).unwrap();
            let spec = NormSpec::new(2.0, 2.0, 0.05).unwrap();
            assumption_probe(&states_to_trajectory(&states), &spec, &p, &nl).unwrap()
        };
        // C calibrated once over the corners of the data box, then held fixed.
        let corners = [(0.05, 0.3), (0.05, 0.8), (0.2, 0.3), (0.2, 0.8)];
        let (mut c_v, mut c_s) = (0.0f64, 0.0f64);
        for (amp, s0) in corners {
            let probe = run(amp, s0);
            assert!((probe.delta - 0.05f64.sqrt()).abs() < 1e-15);
            c_v = c_v.max(probe.ratio_v());
            c_s = c_s.max(probe.ratio_sigma());
        }
        for (amp, s0) in [(0.1, 0.4), (0.1, 0.5), (0.15, 0.6), (0.15, 0.4)] {
            let probe = run(amp, s0);
            assert!(
                probe.ratio_v() <= c_v && probe.ratio_sigma() <= c_s,
                "{probe:?} {c_v} {c_s}"
            );
        }
    }
}
