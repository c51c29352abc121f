//! Symmetric grid on (-1, 1), nodal functions, difference stencils and the
//! discrete space and space-time norms used as diagnostics.

use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FkError, Result};

/// Uniform grid with nodes `x_i = -1 + i h`, `h = 2/n`, `n` even.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 || !n.is_multiple_of(2) {
            return Err(FkError::InvalidGrid(n));
        }
        Ok(Grid { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        2.0 / self.n as f64
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.n + 1
    }

    /// Node coordinate, computed as `(2i - n)/n` so that the end nodes are
    /// exactly `±1` and `x(n - i) = -x(i)` bit for bit.
    pub fn x(&self, i: usize) -> f64 {
        (2.0 * i as f64 - self.n as f64) / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.x(i)).collect()
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.n {
            0.5 * self.h()
        } else {
            self.h()
        }
    }
}

/// Scalars that grid functions may carry.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Neg<Output = Self>
    + Mul<f64, Output = Self>
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    fn zero() -> Self;
    fn modulus(self) -> f64;
    fn is_finite_scalar(self) -> bool;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn is_finite_scalar(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Nodal values on a [`Grid`]; always `n + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<T = f64> {
    grid: Grid,
    values: Vec<T>,
}

pub type ComplexGridFunction = GridFunction<Complex64>;

impl<T: Scalar> GridFunction<T> {
    pub fn new(grid: Grid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FkError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(GridFunction { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        GridFunction {
            grid,
            values: vec![T::zero(); grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> T) -> Self {
        GridFunction {
            grid,
            values: (0..grid.len()).map(|i| f(grid.x(i))).collect(),
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Value at `x = +1`.
    pub fn trace_plus(&self) -> T {
        self.values[self.grid.n()]
    }

    /// Value at `x = -1`.
    pub fn trace_minus(&self) -> T {
        self.values[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        GridFunction {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        GridFunction {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|a| a * s)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.modulus()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite_scalar())
    }
}

impl GridFunction<f64> {
    pub fn to_complex(&self) -> ComplexGridFunction {
        GridFunction {
            grid: self.grid,
            values: self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

impl ComplexGridFunction {
    pub fn re(&self) -> GridFunction<f64> {
        GridFunction {
            grid: self.grid,
            values: self.values.iter().map(|v| v.re).collect(),
        }
    }

    pub fn max_imag(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.im.abs()))
    }
}

/// `u(-x)` as a node permutation.
pub fn reflect<T: Scalar>(u: &GridFunction<T>) -> GridFunction<T> {
    let mut values = u.values.clone();
    values.reverse();
    GridFunction { grid: u.grid, values }
}

/// First derivative: centered in the interior, one-sided second order at the ends.
pub fn diff1<T: Scalar>(u: &GridFunction<T>) -> GridFunction<T> {
    let n = u.grid.n();
    let inv2h = 1.0 / (2.0 * u.grid.h());
    let v = &u.values;
    let mut out = vec![T::zero(); n + 1];
    out[0] = (v[1] * 4.0 - v[0] * 3.0 - v[2]) * inv2h;
    out[n] = (v[n] * 3.0 - v[n - 1] * 4.0 + v[n - 2]) * inv2h;
    for i in 1..n {
        out[i] = (v[i + 1] - v[i - 1]) * inv2h;
    }
    GridFunction {
        grid: u.grid,
        values: out,
    }
}

/// Second derivative: 3-point centered in the interior, 4-point one-sided at the ends.
pub fn diff2<T: Scalar>(u: &GridFunction<T>) -> GridFunction<T> {
    let n = u.grid.n();
    let inv_h2 = 1.0 / (u.grid.h() * u.grid.h());
    let v = &u.values;
    let mut out = vec![T::zero(); n + 1];
    out[0] = (v[0] * 2.0 - v[1] * 5.0 + v[2] * 4.0 - v[3]) * inv_h2;
    out[n] = (v[n] * 2.0 - v[n - 1] * 5.0 + v[n - 2] * 4.0 - v[n - 3]) * inv_h2;
    for i in 1..n {
        out[i] = (v[i + 1] - v[i] * 2.0 + v[i - 1]) * inv_h2;
    }
    GridFunction {
        grid: u.grid,
        values: out,
    }
}

fn check_exponent(e: f64) -> Result<()> {
    if e.is_finite() && e > 1.0 {
        Ok(())
    } else {
        Err(FkError::InvalidExponent(e))
    }
}

/// Trapezoid `L^q` norm.
pub fn lq_norm<T: Scalar>(u: &GridFunction<T>, q: f64) -> Result<f64> {
    check_exponent(q)?;
    if !u.is_finite() {
        return Err(FkError::NonFinite("lq_norm input"));
    }
    let g = u.grid;
    let s: f64 = u
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| g.weight(i) * v.modulus().powf(q))
        .sum();
    Ok(s.powf(1.0 / q))
}

/// Trapezoid `L^2` norm without the exponent checks.
pub fn l2_norm<T: Scalar>(u: &GridFunction<T>) -> f64 {
    let g = u.grid;
    u.values
        .iter()
        .enumerate()
        .map(|(i, v)| g.weight(i) * v.modulus().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Trapezoid inner product of real grid functions.
pub fn inner(u: &GridFunction, v: &GridFunction) -> f64 {
    let g = u.grid;
    (0..g.len()).map(|i| g.weight(i) * u.values[i] * v.values[i]).sum()
}

/// Left-endpoint `L^p` norm in time: the last sample closes the interval and
/// carries no weight.
pub fn lp_time_norm(samples: &[f64], p: f64, dt: f64) -> Result<f64> {
    check_exponent(p)?;
    if samples.iter().any(|s| !s.is_finite()) || !dt.is_finite() || dt <= 0.0 {
        return Err(FkError::NonFinite("lp_time_norm input"));
    }
    let k = samples.len().saturating_sub(1);
    let s: f64 = samples[..k].iter().map(|s| dt * s.abs().powf(p)).sum();
    Ok(s.powf(1.0 / p))
}

/// Exponents and horizon of the space-time norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub p: f64,
    pub q: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl NormSpec {
    pub fn new(p: f64, q: f64, horizon: f64) -> Result<Self> {
        check_exponent(p)?;
        check_exponent(q)?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(FkError::InvalidParameter(format!("horizon {horizon}")));
        }
        Ok(NormSpec { p, q, horizon })
    }
}

/// Samples `(t_k, v_k, sigma_k)` on a uniform time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<GridFunction>,
    pub sigma: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNorms {
    pub e_w0: f64,
    pub e_w1: f64,
    pub e_sigma0: f64,
    pub e_sigma1: f64,
}

/// Time derivative of scalar samples: centered inside, one-sided second
/// order at the ends (first order when only two samples exist).
pub fn time_derivative(samples: &[f64], dt: f64) -> Vec<f64> {
    let k = samples.len();
    let mut out = vec![0.0; k];
    if k < 2 {
        return out;
    }
    if k == 2 {
        let d = (samples[1] - samples[0]) / dt;
        return vec![d, d];
    }
    out[0] = (-3.0 * samples[0] + 4.0 * samples[1] - samples[2]) / (2.0 * dt);
    out[k - 1] = (3.0 * samples[k - 1] - 4.0 * samples[k - 2] + samples[k - 3]) / (2.0 * dt);
    for i in 1..k - 1 {
        out[i] = (samples[i + 1] - samples[i - 1]) / (2.0 * dt);
    }
    out
}

/// Nodewise time derivative of a sequence of grid functions.
pub fn time_derivative_states(states: &[GridFunction], dt: f64) -> Vec<GridFunction> {
    let grid = states[0].grid;
    let mut out = vec![GridFunction::zeros(grid); states.len()];
    let mut column = vec![0.0; states.len()];
    for i in 0..grid.len() {
        for (c, s) in column.iter_mut().zip(states) {
            *c = s.values[i];
        }
        for (o, d) in out.iter_mut().zip(time_derivative(&column, dt)) {
            o.values[i] = d;
        }
    }
    out
}

/// Space-time norms of a `(w, sigma)` trajectory on `[0, T]`.
pub fn trajectory_norms(traj: &Trajectory, spec: &NormSpec) -> Result<TrajectoryNorms> {
    if traj.len() < 2 || traj.states.len() != traj.len() || traj.sigma.len() != traj.len() {
        return Err(FkError::TooFewSamples(traj.len()));
    }
    let dt = traj.dt();
    let uniform = traj
        .times
        .windows(2)
        .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1e-300));
    if !uniform || dt <= 0.0 {
        return Err(FkError::InvalidParameter("non-uniform time samples".into()));
    }
    let t0 = traj.times[0];
    let keep = traj
        .times
        .iter()
        .take_while(|&&t| t - t0 <= spec.horizon + 1e-9 * dt)
        .count()
        .max(2);
    let states = &traj.states[..keep];
    let sigma = &traj.sigma[..keep];
    let (p, q) = (spec.p, spec.q);

    let space = |fs: &[GridFunction]| -> Result<Vec<f64>> { fs.iter().map(|f| lq_norm(f, q)).collect() };
    let w_norms = space(states)?;
    let dt_norms = space(&time_derivative_states(states, dt))?;
    let d2: Vec<GridFunction> = states.iter().map(diff2).collect();
    let d2_norms = space(&d2)?;

    let e_w0 = lp_time_norm(&w_norms, p, dt)?;
    let e_w1 = lp_time_norm(&dt_norms, p, dt)? + e_w0 + lp_time_norm(&d2_norms, p, dt)?;
    let e_sigma0 = lp_time_norm(sigma, p, dt)?;
    let e_sigma1 = lp_time_norm(&time_derivative(sigma, dt), p, dt)? + e_sigma0;
    Ok(TrajectoryNorms {
        e_w0,
        e_w1,
        e_sigma0,
        e_sigma1,
    })
}
