//! Closed-form stationary theory of Ornstein–Uhlenbeck processes
//! `dX = −BX dt + (2D/β)^{1/2} dW`.
//!
//! With `BΞ₁ + Ξ₁Bᵀ = 2D` the stationary law at noise scale β is
//! `N(0, Ξ₁/β)`. The drift factors as `−Bx = −(A + D)Ξ₁⁻¹x` with
//! `A = BΞ₁ − D` antisymmetric, so every OU process is a Maxwell–Boltzmann
//! equilibrium with circulation `j(x) = −AΞ₁⁻¹x = (DΞ₁⁻¹ − B)x`.
//!
//! `current_coeff` stores `B − DΞ₁⁻¹`; in this crate's sign convention
//! (`J = bf − β⁻¹D∇f`) the stationary current is `J^ss = −current_coeff·x·f^ss`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{check_stable, is_symmetric, min_symmetric_eigenvalue, psd_sqrt, solve_lyapunov, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct OuStationary {
    pub beta: f64,
    pub b: Matrix,
    pub d: Matrix,
    /// Covariance `Ξ_β = Ξ₁/β`.
    pub xi: Matrix,
    /// `Ξ_β⁻¹`.
    pub precision: Matrix,
    /// `B − DΞ₁⁻¹`, independent of β.
    pub current_coeff: Matrix,
    /// `BΞ₁ − D`.
    pub a: Matrix,
    /// `(A + D)⁻¹`; `None` when `A + D` is singular.
    pub m: Option<Matrix>,
    /// `M + Mᵀ`.
    pub gamma_gram: Option<Matrix>,
    /// `Γ = M(2D)^{1/2}`.
    pub gamma: Option<Matrix>,
}

impl OuStationary {
    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    /// `Ξ₁`, the covariance at β = 1.
    pub fn xi_unit(&self) -> Matrix {
        &self.xi * self.beta
    }

    /// Stationary Gaussian density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let q = quad_form(&self.precision, x);
        let det = self.xi.determinant();
        (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(n as i32) * det).sqrt()
    }

    /// Circulation `j(x) = (DΞ₁⁻¹ − B)x`.
    pub fn circulation(&self, x: &[f64]) -> Vec<f64> {
        mat_vec(&self.current_coeff, x).into_iter().map(|v| -v).collect()
    }

    /// Stationary current `J^ss(x) = j(x) f^ss(x)`.
    pub fn current(&self, x: &[f64]) -> Vec<f64> {
        let f = self.density(x);
        self.circulation(x).into_iter().map(|v| v * f).collect()
    }

    /// `−(A + D)Ξ₁⁻¹x`, which reproduces the drift `−Bx`.
    pub fn reconstructed_drift(&self, x: &[f64]) -> Vec<f64> {
        let p1 = &self.precision / self.beta;
        let ad = &self.a + &self.d;
        mat_vec(&(ad * p1), x).into_iter().map(|v| -v).collect()
    }
}

fn quad_form(m: &Matrix, x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * m[(i, j)] * x[j];
        }
    }
    s
}

fn mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum()).collect()
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Stationary Gaussian theory of the OU process at noise scale β.
pub fn ou_stationary(b: &Matrix, d: &Matrix, beta: f64) -> Result<OuStationary> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    check_stable(b)?;
    if !is_symmetric(d, 1e-12) || min_symmetric_eigenvalue(d) <= 0.0 {
        return Err(Error::Parameter("OU diffusion must be symmetric positive definite".into()));
    }
    let xi1 = solve_lyapunov(b, d)?;
    let p1 = xi1
        .clone()
        .try_inverse()
        .map(|p| symmetrize(&p))
        .ok_or_else(|| Error::Degenerate("stationary covariance is singular".into()))?;
    let current_coeff = b - d * &p1;
    let a = b * &xi1 - d;
    let m = (&a + d).try_inverse().filter(|m| m.iter().all(|v| v.is_finite()));
    let gamma_gram = m.as_ref().map(|m| m + m.transpose());
    let gamma = match &m {
        Some(m) => Some(m * psd_sqrt(&(d * 2.0))?),
        None => None,
    };
    Ok(OuStationary {
        beta,
        b: b.clone(),
        d: d.clone(),
        xi: &xi1 / beta,
        precision: p1 * beta,
        current_coeff,
        a,
        m,
        gamma_gram,
        gamma,
    })
}

/// `J^ss ≡ 0` iff `BD = DBᵀ`.
pub fn ou_detailed_balance(b: &Matrix, d: &Matrix) -> bool {
    if b.shape() != d.shape() {
        return false;
    }
    let bd = b * d;
    (&bd - d * b.transpose()).norm() <= 1e-10 * (1.0 + bd.norm())
}

/// Residuals certifying the Maxwell–Boltzmann structure of an OU process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuCertificate {
    /// `‖sym(Ξ⁻¹(ΞBᵀ − D)Ξ⁻¹)‖_F` at β = 1; zero iff `J^ss·∇f^ss ≡ 0`.
    pub orth_residual: f64,
    /// `‖A + Aᵀ‖_F`.
    pub a_antisym_residual: f64,
    /// `‖2MDMᵀ − (M + Mᵀ)‖_F`, `None` when `M` is unavailable.
    pub gram_residual: Option<f64>,
}

impl OuCertificate {
    pub fn max_residual(&self) -> f64 {
        self.orth_residual.max(self.a_antisym_residual).max(self.gram_residual.unwrap_or(0.0))
    }
}

pub fn ou_mb_certificate(st: &OuStationary) -> OuCertificate {
    let xi1 = st.xi_unit();
    let p1 = &st.precision / st.beta;
    let inner = &p1 * (&xi1 * st.b.transpose() - &st.d) * &p1;
    let orth_residual = symmetrize(&inner).norm();
    let a_antisym_residual = (&st.a + st.a.transpose()).norm();
    let gram_residual = st.m.as_ref().map(|m| (m * &st.d * m.transpose() * 2.0 - (m + m.transpose())).norm());
    OuCertificate { orth_residual, a_antisym_residual, gram_residual }
}
