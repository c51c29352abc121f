//! The discrete Laplacian on (-1, 1) under the FK conditions
//! `B1 = (1-θ)u(1) - u(-1) = 0`, `B2 = u'(1) - (1-θ)u'(-1) = 0`.
//!
//! The end values are eliminated: with `c = 1 - θ` the boundary conditions
//! (second-order one-sided traces) form a 2×2 system in `(u_0, u_n)` whose
//! right-hand side involves `u_1, u_2, u_{n-2}, u_{n-1}`. The reduced operator
//! acts on the `n - 1` interior values and is tridiagonal except for two
//! entries in each of the first and last rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FkError, Result};
use crate::grid::{diff1, Grid, GridFunction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub theta: f64,
}

impl BoundarySpec {
    pub fn new(theta: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&theta) {
            Ok(BoundarySpec { theta })
        } else {
            Err(FkError::InvalidTheta(theta))
        }
    }
}

/// `(B1, B2)` with one-sided second-order derivative traces.
pub fn boundary_residuals(theta: f64, u: &GridFunction) -> (f64, f64) {
    let c = 1.0 - theta;
    let du = diff1(u);
    (
        c * u.trace_plus() - u.trace_minus(),
        du.trace_plus() - c * du.trace_minus(),
    )
}

/// Reduced operator `A(θ)` on interior values.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    grid: Grid,
    theta: f64,
    /// Interior columns `[0, 1, m-2, m-1]` carrying the elimination weights.
    cols: [usize; 4],
    /// `u_0 = Σ left[k] x[cols[k]]`.
    left: [f64; 4],
    /// `u_n = Σ right[k] x[cols[k]]`.
    right: [f64; 4],
}

pub fn assemble_operator(theta: f64, grid: Grid) -> Result<OperatorMatrix> {
    BoundarySpec::new(theta)?;
    let m = grid.n() - 1;
    let c = 1.0 - theta;
    // B2 scaled by 2h: 3u_n - 4u_{n-1} + u_{n-2} + c(3u_0 - 4u_1 + u_2) = 0.
    // Unknowns (u_0, u_n): [[-1, c], [3c, 3]] (u_0, u_n) = (0, r).
    let r = [4.0 * c, -c, -1.0, 4.0];
    let det = -3.0 - 3.0 * c * c;
    if det.abs() < 1e-12 {
        return Err(FkError::SingularBoundary(det));
    }
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    for k in 0..4 {
        left[k] = -c * r[k] / det;
        right[k] = -r[k] / det;
    }
    Ok(OperatorMatrix {
        grid,
        theta,
        cols: [0, 1, m - 2, m - 1],
        left,
        right,
    })
}

impl OperatorMatrix {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Interior dimension `n - 1`.
    pub fn dim(&self) -> usize {
        self.grid.n() - 1
    }

    fn inv_h2(&self) -> f64 {
        1.0 / (self.grid.h() * self.grid.h())
    }

    /// `(u_0, u_n)` from interior values.
    pub fn end_values(&self, x: &[f64]) -> (f64, f64) {
        let mut u0 = 0.0;
        let mut un = 0.0;
        for k in 0..4 {
            u0 += self.left[k] * x[self.cols[k]];
            un += self.right[k] * x[self.cols[k]];
        }
        (u0, un)
    }

    /// Full nodal function with boundary values satisfying `B1 = B2 = 0`.
    pub fn reconstruct(&self, x: &[f64]) -> GridFunction {
        let (u0, un) = self.end_values(x);
        let mut values = Vec::with_capacity(self.grid.len());
        values.push(u0);
        values.extend_from_slice(x);
        values.push(un);
        GridFunction::new(self.grid, values).expect("interior length")
    }

    pub fn interior(u: &GridFunction) -> Vec<f64> {
        let v = u.values();
        v[1..v.len() - 1].to_vec()
    }

    /// Replace the end values of `u` by the eliminated ones.
    pub fn project(&self, u: &GridFunction) -> GridFunction {
        self.reconstruct(&Self::interior(u))
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let m = self.dim();
        let s = self.inv_h2();
        let mut y = vec![0.0; m];
        for i in 0..m {
            let lo = if i > 0 { x[i - 1] } else { 0.0 };
            let hi = if i + 1 < m { x[i + 1] } else { 0.0 };
            y[i] = (lo - 2.0 * x[i] + hi) * s;
        }
        let (u0, un) = self.end_values(x);
        y[0] += u0 * s;
        y[m - 1] += un * s;
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.dim();
        let s = self.inv_h2();
        let mut a = DMatrix::zeros(m, m);
        for i in 0..m {
            a[(i, i)] = -2.0 * s;
            if i > 0 {
                a[(i, i - 1)] = s;
            }
            if i + 1 < m {
                a[(i, i + 1)] = s;
            }
        }
        for k in 0..4 {
            a[(0, self.cols[k])] += self.left[k] * s;
            a[(m - 1, self.cols[k])] += self.right[k] * s;
        }
        a
    }

    /// Factorization of `a I - b A` for repeated O(n) solves.
    pub fn shifted_solver(&self, a: f64, b: f64) -> Result<ShiftedSolver> {
        ShiftedSolver::new(self, a, b)
    }

    /// `h Σ x_i y_i` over interior nodes.
    pub fn interior_inner(&self, x: &[f64], y: &[f64]) -> f64 {
        self.grid.h() * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Thomas factorization of a tridiagonal matrix.
#[derive(Debug, Clone)]
struct Tridiagonal {
    sub: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl Tridiagonal {
    fn factor(sub: Vec<f64>, diag: &[f64], sup: &[f64]) -> Result<Self> {
        let m = diag.len();
        let mut beta = vec![0.0; m];
        let mut gamma = vec![0.0; m];
        beta[0] = diag[0];
        for j in 1..m {
            if beta[j - 1].abs() < 1e-300 {
                return Err(FkError::LinearSolve("zero pivot in tridiagonal factorization".into()));
            }
            gamma[j] = sup[j - 1] / beta[j - 1];
            beta[j] = diag[j] - sub[j - 1] * gamma[j];
        }
        if beta[m - 1].abs() < 1e-300 {
            return Err(FkError::LinearSolve("zero pivot in tridiagonal factorization".into()));
        }
        Ok(Tridiagonal { sub, gamma, beta })
    }

    fn solve_in_place(&self, r: &mut [f64]) {
        let m = r.len();
        r[0] /= self.beta[0];
        for j in 1..m {
            r[j] = (r[j] - self.sub[j - 1] * r[j - 1]) / self.beta[j];
        }
        for j in (0..m - 1).rev() {
            r[j] -= self.gamma[j + 1] * r[j + 1];
        }
    }
}

/// Solver for `(a I - b A) x = r`: Thomas on the banded part plus a rank-2
/// Woodbury correction for the out-of-band entries of the first and last rows.
#[derive(Debug, Clone)]
pub struct ShiftedSolver {
    tri: Tridiagonal,
    /// Out-of-band entries: row 0 at columns `m-2, m-1`; row `m-1` at `0, 1`.
    v0: [f64; 2],
    v1: [f64; 2],
    z0: Vec<f64>,
    z1: Vec<f64>,
    /// Inverse of the 2×2 capacitance matrix.
    kinv: [[f64; 2]; 2],
    m: usize,
}

impl ShiftedSolver {
    fn new(op: &OperatorMatrix, a: f64, b: f64) -> Result<Self> {
        let m = op.dim();
        let s = op.inv_h2();
        let mut diag = vec![a + 2.0 * b * s; m];
        let mut sup = vec![-b * s; m - 1];
        let mut sub = vec![-b * s; m - 1];
        // Band parts of the elimination weights.
        diag[0] -= b * op.left[0] * s;
        sup[0] -= b * op.left[1] * s;
        sub[m - 2] -= b * op.right[2] * s;
        diag[m - 1] -= b * op.right[3] * s;
        let v0 = [-b * op.left[2] * s, -b * op.left[3] * s];
        let v1 = [-b * op.right[0] * s, -b * op.right[1] * s];
        let tri = Tridiagonal::factor(sub, &diag, &sup)?;
        let mut z0 = vec![0.0; m];
        z0[0] = 1.0;
        tri.solve_in_place(&mut z0);
        let mut z1 = vec![0.0; m];
        z1[m - 1] = 1.0;
        tri.solve_in_place(&mut z1);
        let dot0 = |z: &[f64]| v0[0] * z[m - 2] + v0[1] * z[m - 1];
        let dot1 = |z: &[f64]| v1[0] * z[0] + v1[1] * z[1];
        let k = [[1.0 + dot0(&z0), dot0(&z1)], [dot1(&z0), 1.0 + dot1(&z1)]];
        let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
        if det.abs() < 1e-14 {
            return Err(FkError::LinearSolve("singular capacitance matrix".into()));
        }
        let kinv = [[k[1][1] / det, -k[0][1] / det], [-k[1][0] / det, k[0][0] / det]];
        Ok(ShiftedSolver {
            tri,
            v0,
            v1,
            z0,
            z1,
            kinv,
            m,
        })
    }

    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = r.to_vec();
        self.tri.solve_in_place(&mut y);
        let w0 = self.v0[0] * y[m - 2] + self.v0[1] * y[m - 1];
        let w1 = self.v1[0] * y[0] + self.v1[1] * y[1];
        let c0 = self.kinv[0][0] * w0 + self.kinv[0][1] * w1;
        let c1 = self.kinv[1][0] * w0 + self.kinv[1][1] * w1;
        for ((yi, a), b) in y.iter_mut().zip(&self.z0).zip(&self.z1) {
            *yi -= c0 * a + c1 * b;
        }
        y
    }
}

/// Adds `a x² + b x³` to `u` so that both discrete boundary residuals vanish.
/// Unlike [`OperatorMatrix::project`], this keeps smooth data smooth.
pub fn make_compatible(theta: f64, u: &GridFunction) -> Result<GridFunction> {
    BoundarySpec::new(theta)?;
    let g = u.grid();
    let q1 = GridFunction::from_fn(g, |x| x * x);
    let q2 = GridFunction::from_fn(g, |x| x * x * x);
    let (r1, r2) = boundary_residuals(theta, u);
    let (a11, a21) = boundary_residuals(theta, &q1);
    let (a12, a22) = boundary_residuals(theta, &q2);
    let det = a11 * a22 - a12 * a21;
    if det.abs() < 1e-12 {
        return Err(FkError::SingularBoundary(det));
    }
    let a = (-r1 * a22 + r2 * a12) / det;
    let b = (-a11 * r2 + a21 * r1) / det;
    Ok(u.axpy(a, &q1).axpy(b, &q2))
}

/// `∫|u'|²` by the cell (midpoint) rule `Σ (u_{i+1} - u_i)² / h`.
pub fn energy_form(u: &GridFunction) -> f64 {
    let h = u.grid().h();
    u.values().windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / h
}

/// Quadrature of `∫u` that the θ = 0 scheme conserves exactly: the trapezoid
/// rule with the seam value `u(±1)` replaced by the mean of its two neighbours
/// across the seam. Its weights form the left null vector of `A(0)`.
pub fn periodic_mass(u: &GridFunction) -> f64 {
    let v = u.values();
    let n = v.len() - 1;
    let h = u.grid().h();
    h * (v[1..n].iter().sum::<f64>() + 0.5 * (v[1] + v[n - 1]))
}
