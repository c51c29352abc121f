//! Discrete spectra of `A(θ)`, the transcendental oracle for the continuous
//! spectrum, the Poincaré-type check and the modal semigroup.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{FkError, Result};
use crate::fk_operator::{assemble_operator, OperatorMatrix};
use crate::grid::{lq_norm, Grid, GridFunction};

/// Constant of the Poincaré-type bound `‖u‖ ≤ C (1+θ)/θ ‖u'‖` obtained by
/// bounding `u` by its value at the trace point plus `∫|u'|`: `C = |I| = 2`.
pub const POINCARE_PROOF_CONSTANT: f64 = 2.0;

/// `M(λ)` in the form `((1-θ)e^{s} - e^{-s})² + (e^{s} - (1-θ)e^{-s})²`, `s = √λ` principal.
pub fn m_function(theta: f64, lambda: Complex64) -> Complex64 {
    let c = 1.0 - theta;
    let s = lambda.sqrt();
    let (ep, em) = (s.exp(), (-s).exp());
    let a = ep * c - em;
    let b = ep - em * c;
    a * a + b * b
}

/// `M(-μ²) = 2(θ² cos²μ - (2-θ)² sin²μ)`.
pub fn m_real_form(theta: f64, mu: f64) -> f64 {
    2.0 * (theta * theta * mu.cos().powi(2) - (2.0 - theta).powi(2) * mu.sin().powi(2))
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// k-th non-negative root `μ_k` of `θ² cos²μ = (2-θ)² sin²μ`, counted with
/// multiplicity at θ = 0 (`0, π, π, 2π, 2π, …`). The continuous eigenvalue is `-μ_k²`.
pub fn continuous_eigen_oracle(theta: f64, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(FkError::InvalidParameter("mode index k must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(FkError::InvalidTheta(theta));
    }
    let odd = k % 2 == 1;
    let j = if odd { (k - 1) / 2 } else { k / 2 } as f64;
    if theta == 0.0 {
        return Ok(j * PI);
    }
    // g(jπ) = θ² > 0 and g(jπ ± π/2) = -(2-θ)² < 0.
    let g = |mu: f64| m_real_form(theta, mu);
    Ok(if odd {
        bisect(g, j * PI, j * PI + FRAC_PI_2)
    } else {
        bisect(g, j * PI - FRAC_PI_2, j * PI)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub k: usize,
    pub discrete: f64,
    pub oracle: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub theta: f64,
    pub n: usize,
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub max_imag: f64,
    pub modes: Vec<ModeComparison>,
}

/// Determinant of the boundary conditions applied to `cos(ω x_i)`, `sin(ω x_i)`.
/// These solve the interior difference equation with `λ = -(4/h²) sin²(ωh/2)`,
/// so its roots are the exact discrete eigenvalues.
fn discrete_characteristic(theta: f64, grid: Grid, omega: f64) -> f64 {
    let c = 1.0 - theta;
    let n = grid.n();
    let b = |f: &dyn Fn(f64) -> f64| {
        let u = |i: usize| f(omega * grid.x(i));
        let b1 = c * u(n) - u(0);
        let b2 = (3.0 * u(n) - 4.0 * u(n - 1) + u(n - 2)) - c * (-3.0 * u(0) + 4.0 * u(1) - u(2));
        (b1, b2)
    };
    let (c1, c2) = b(&f64::cos);
    let (s1, s2) = b(&f64::sin);
    c1 * s2 - s1 * c2
}

/// Refine a dense eigenvalue by bracketing the nearest root of the discrete
/// characteristic determinant. Falls back to the input when no sign change
/// is found (double roots, λ = 0).
fn polish(theta: f64, grid: Grid, lambda: f64) -> f64 {
    let h = grid.h();
    let arg = -lambda * h * h / 4.0;
    if lambda >= 0.0 || arg >= 1.0 {
        return lambda;
    }
    let omega = 2.0 / h * arg.sqrt().asin();
    let f = |w: f64| discrete_characteristic(theta, grid, w);
    for eps in [1e-9, 1e-7, 1e-5, 1e-4, 1e-3, 3e-3] {
        let (a, b) = (omega * (1.0 - eps), omega * (1.0 + eps));
        if f(a) * f(b) < 0.0 {
            let w = bisect(f, a, b);
            return -4.0 / (h * h) * (0.5 * w * h).sin().powi(2);
        }
    }
    lambda
}

fn schur(op: &OperatorMatrix) -> Result<Schur<f64, nalgebra::Dyn>> {
    Schur::try_new(op.to_dense(), f64::EPSILON, 10_000)
        .ok_or_else(|| FkError::Eigensolver("Schur iteration did not converge".into()))
}

/// Dense eigenvalues of `A(θ)`, leading modes refined and compared with the oracle.
pub fn discrete_spectrum(theta: f64, grid: Grid, modes: usize) -> Result<SpectrumReport> {
    let op = assemble_operator(theta, grid)?;
    let ev = schur(&op)?.complex_eigenvalues();
    let max_imag = ev.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    let mut eigenvalues: Vec<f64> = ev.iter().map(|z| z.re).collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let modes = modes.min(eigenvalues.len());
    for lam in eigenvalues.iter_mut().take(modes) {
        *lam = polish(theta, grid, *lam);
    }
    let mut used = vec![false; eigenvalues.len()];
    let mut out = Vec::with_capacity(modes);
    for k in 1..=modes {
        let oracle = -continuous_eigen_oracle(theta, k)?.powi(2);
        let (idx, _) = eigenvalues
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .min_by(|a, b| (a.1 - oracle).abs().total_cmp(&(b.1 - oracle).abs()))
            .expect("nonempty spectrum");
        used[idx] = true;
        let discrete = eigenvalues[idx];
        let rel_err = if oracle == 0.0 {
            discrete.abs()
        } else {
            ((discrete - oracle) / oracle).abs()
        };
        out.push(ModeComparison {
            k,
            discrete,
            oracle,
            rel_err,
        });
    }
    Ok(SpectrumReport {
        theta,
        n: grid.n(),
        eigenvalues,
        max_imag,
        modes: out,
    })
}

/// `u ↦ u - B1(u) (1 - x)/2`: imposes `(1-θ)u(1) = u(-1)` only.
pub fn project_b1(theta: f64, u: &GridFunction) -> GridFunction {
    let b1 = (1.0 - theta) * u.trace_plus() - u.trace_minus();
    u.axpy(b1, &GridFunction::from_fn(u.grid(), |x| 0.5 * (1.0 - x)))
}

/// `‖u'‖_q` with `u'` constant on each cell.
pub fn cell_gradient_norm(u: &GridFunction, q: f64) -> f64 {
    let h = u.grid().h();
    let s: f64 = u
        .values()
        .windows(2)
        .map(|w| h * ((w[1] - w[0]) / h).abs().powf(q))
        .sum();
    s.powf(1.0 / q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareReport {
    pub theta: f64,
    pub measured_ratio: f64,
    /// `C (1+θ)/θ`.
    pub bound: f64,
    /// Best constant `1/μ_1(θ)` for q = 2 (the minimizer of the Rayleigh
    /// quotient under the B1 constraint satisfies B2 naturally).
    pub sharp_bound: Option<f64>,
    /// Samples with `‖u'‖ = 0` but `‖u‖ ≠ 0`.
    pub violations: usize,
}

impl PoincareReport {
    pub fn holds(&self) -> bool {
        self.violations == 0 && self.measured_ratio <= self.bound
    }
}

/// Largest `‖u‖_q / ‖u'‖_q` over samples satisfying `B1(θ; u) = 0`.
pub fn poincare_check(theta: f64, samples: &[GridFunction], q: f64, constant: f64) -> Result<PoincareReport> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(FkError::InvalidTheta(theta));
    }
    let mut measured: f64 = 0.0;
    let mut violations = 0;
    for u in samples {
        let num = lq_norm(u, q)?;
        if num == 0.0 {
            continue;
        }
        let den = cell_gradient_norm(u, q);
        if den == 0.0 {
            violations += 1;
            continue;
        }
        measured = measured.max(num / den);
    }
    let sharp_bound = if q == 2.0 {
        Some(1.0 / continuous_eigen_oracle(theta, 1)?)
    } else {
        None
    };
    Ok(PoincareReport {
        theta,
        measured_ratio: measured,
        bound: constant * (1.0 + theta) / theta,
        sharp_bound,
        violations,
    })
}

/// `C` from samples at θ = 1: `max ratio · θ/(1+θ) = max ratio / 2`.
pub fn calibrate_poincare_constant(samples: &[GridFunction], q: f64) -> Result<f64> {
    Ok(poincare_check(1.0, samples, q, 1.0)?.measured_ratio / 2.0)
}

/// Eigen-decomposition `A = V Λ V⁻¹` for modal evaluation of `e^{tA}`.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    op: OperatorMatrix,
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    inverse: DMatrix<f64>,
    condition: f64,
}

const MAX_CONDITION: f64 = 1e6;

impl EigenBasis {
    pub fn new(theta: f64, grid: Grid) -> Result<Self> {
        let op = assemble_operator(theta, grid)?;
        let (q, t) = schur(&op)?.unpack();
        let m = op.dim();
        let scale = t.amax().max(1e-300);
        for i in 0..m - 1 {
            if t[(i + 1, i)].abs() > 1e-12 * scale {
                return Err(FkError::Eigensolver("complex eigenvalue pair in Schur form".into()));
            }
        }
        // Eigenvectors of the triangular factor by back substitution.
        let mut y = DMatrix::<f64>::zeros(m, m);
        let tiny = f64::EPSILON * scale;
        for k in 0..m {
            let lk = t[(k, k)];
            y[(k, k)] = 1.0;
            for j in (0..k).rev() {
                let mut s = 0.0;
                for l in j + 1..=k {
                    s += t[(j, l)] * y[(l, k)];
                }
                let mut d = t[(j, j)] - lk;
                if d.abs() < tiny {
                    d = tiny;
                }
                y[(j, k)] = -s / d;
            }
        }
        let mut v = q * y;
        for mut col in v.column_iter_mut() {
            let nrm = col.norm();
            col /= nrm;
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| t[(b, b)].total_cmp(&t[(a, a)]));
        let values: Vec<f64> = order.iter().map(|&i| t[(i, i)]).collect();
        let vectors = DMatrix::from_fn(m, m, |r, c| v[(r, order[c])]);
        let inverse = vectors
            .clone()
            .try_inverse()
            .ok_or(FkError::IllConditionedBasis(f64::INFINITY))?;
        let norm1 = |a: &DMatrix<f64>| a.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
        let condition = norm1(&vectors) * norm1(&inverse);
        if !(condition <= MAX_CONDITION) {
            return Err(FkError::IllConditionedBasis(condition));
        }
        Ok(EigenBasis {
            op,
            values,
            vectors,
            inverse,
            condition,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn operator(&self) -> &OperatorMatrix {
        &self.op
    }

    /// Interior values of the k-th eigenvector (descending eigenvalue order).
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k).iter().copied().collect()
    }

    /// Applies `h(A)` through the modal expansion of the interior values of `u0`.
    pub fn apply_fn(&self, h: impl Fn(f64) -> f64, u0: &GridFunction) -> GridFunction {
        let x = DVector::from_vec(OperatorMatrix::interior(u0));
        let mut c = &self.inverse * x;
        for (ci, &l) in c.iter_mut().zip(&self.values) {
            *ci *= h(l);
        }
        let y = &self.vectors * c;
        self.op.reconstruct(y.as_slice())
    }

    /// `e^{tA} u0`.
    pub fn evolve(&self, t: f64, u0: &GridFunction) -> Result<GridFunction> {
        if !(t >= 0.0) {
            return Err(FkError::InvalidParameter(format!("negative time {t}")));
        }
        Ok(self.apply_fn(|l| (l * t).exp(), u0))
    }
}

/// `e^{tA(θ)} u0` by modal expansion.
pub fn semigroup_eigen(theta: f64, t: f64, u0: &GridFunction) -> Result<GridFunction> {
    EigenBasis::new(theta, u0.grid())?.evolve(t, u0)
}
