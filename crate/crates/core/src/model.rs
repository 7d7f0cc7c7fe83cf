//! Diffusion models `(b, D, β)` and the catalog of concrete systems.
//!
//! Every catalog constructor attaches analytic references where they are
//! known: the potential `φ` with `f^ss ∝ e^{−βφ}`, the circulation
//! `j = b + D∇φ`, and for phase-space models the Hamiltonian. Numerical
//! modules never require these; tests compare against them.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{check_stable, is_symmetric, min_symmetric_eigenvalue, solve_lyapunov, Matrix, RngStream};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes a vector of length `dim` into the output slice.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Writes a row-major `dim × dim` matrix into the output slice.
pub type MatrixFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A potential `φ(x)` with an optional analytic gradient.
#[derive(Clone)]
pub struct PotentialSpec {
    dim: usize,
    label: String,
    phi: ScalarFn,
    grad: Option<VectorFn>,
}

impl fmt::Debug for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PotentialSpec")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("analytic_gradient", &self.grad.is_some())
            .finish()
    }
}

impl PotentialSpec {
    pub fn new(dim: usize, label: impl Into<String>, phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { dim, label: label.into(), phi: Arc::new(phi), grad: None }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.grad.is_some()
    }

    /// Analytic gradient when available, otherwise fourth-order central
    /// differences.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match &self.grad {
            Some(g) => g(x, out),
            None => self.numeric_gradient(x, out),
        }
    }

    pub fn numeric_gradient(&self, x: &[f64], out: &mut [f64]) {
        let mut y = x.to_vec();
        for k in 0..self.dim {
            let h = 1e-4 * (1.0 + x[k].abs());
            let mut at = |d: f64| {
                y[k] = x[k] + d;
                let v = (self.phi)(&y);
                y[k] = x[k];
                v
            };
            out[k] = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        }
    }

    /// Largest discrepancy between the analytic gradient and finite
    /// differences over the probe points (zero without an analytic one).
    pub fn gradient_mismatch(&self, probes: &[Vec<f64>]) -> f64 {
        let Some(g) = &self.grad else { return 0.0 };
        let mut a = vec![0.0; self.dim];
        let mut n = vec![0.0; self.dim];
        probes
            .iter()
            .map(|x| {
                g(x, &mut a);
                self.numeric_gradient(x, &mut n);
                a.iter().zip(&n).map(|(p, q)| (p - q).abs() / (1.0 + p.abs())).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// `½ xᵀ K x`.
    pub fn quadratic(k: Matrix) -> Result<Self> {
        if !is_symmetric(&k, 1e-12) {
            return Err(Error::Parameter("quadratic form matrix must be symmetric".into()));
        }
        let n = k.nrows();
        let kg = k.clone();
        Ok(Self::new(n, "quadratic", move |x| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += x[i] * k[(i, j)] * x[j];
                }
            }
            0.5 * s
        })
        .with_gradient(move |x, out| {
            for i in 0..n {
                out[i] = (0..n).map(|j| kg[(i, j)] * x[j]).sum();
            }
        }))
    }

    /// `½|x|²`.
    pub fn isotropic(dim: usize) -> Self {
        Self::new(dim, "isotropic", |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>())
            .with_gradient(|x, out| out.copy_from_slice(x))
    }

    /// `Σ_k (¼x_k⁴ − ½x_k²)`.
    pub fn double_well(dim: usize) -> Self {
        Self::new(dim, "double_well", |x| x.iter().map(|v| 0.25 * v.powi(4) - 0.5 * v * v).sum())
            .with_gradient(|x, out| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v.powi(3) - v;
                }
            })
    }

    /// `¼|x|⁴`.
    pub fn radial_quartic(dim: usize) -> Self {
        Self::new(dim, "radial_quartic", |x| 0.25 * x.iter().map(|v| v * v).sum::<f64>().powi(2)).with_gradient(
            |x, out| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for (o, v) in out.iter_mut().zip(x) {
                    *o = r2 * v;
                }
            },
        )
    }
}

/// Analytic references a model may carry.
#[derive(Clone, Default)]
pub struct AnalyticRefs {
    /// `φ` with `f^ss ∝ e^{−βφ}`.
    pub potential: Option<PotentialSpec>,
    /// The drift is exactly `−D∇φ`.
    pub gradient_drift: bool,
    /// `j(x)` with `b = j − D∇φ`.
    pub circulation: Option<VectorFn>,
    pub hamiltonian: Option<ScalarFn>,
}

/// Which catalog constructor produced a model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    OrnsteinUhlenbeck { b: Matrix, d: Matrix },
    KleinKramers { mass: f64, kbt: f64 },
    Ao,
    Gradient,
    Custom,
}

/// Drift field, diffusion field and noise scale of `∂f/∂t = ∇·(β⁻¹D∇f − bf)`.
#[derive(Clone)]
pub struct DiffusionModel {
    dim: usize,
    beta: f64,
    pub alpha: Vec<f64>,
    label: String,
    kind: ModelKind,
    drift: VectorFn,
    diffusion: MatrixFn,
    constant_diffusion: Option<Matrix>,
    diagonal_diffusion: bool,
    refs: AnalyticRefs,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("beta", &self.beta)
            .field("kind", &self.kind)
            .finish_non_exhaustive()
    }
}

impl DiffusionModel {
    /// General model from closures. The diffusion field is checked for
    /// symmetry and positive semi-definiteness at probe points in
    /// `[-3, 3]^dim`.
    pub fn custom(
        dim: usize,
        beta: f64,
        label: impl Into<String>,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        check_beta(beta)?;
        let mut model = Self {
            dim,
            beta,
            alpha: Vec::new(),
            label: label.into(),
            kind: ModelKind::Custom,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            constant_diffusion: None,
            diagonal_diffusion: false,
            refs: AnalyticRefs::default(),
        };
        model.diagonal_diffusion = model.probe_diagonal();
        model.validate_diffusion(&probe_points(dim, 64, 3.0))?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn refs(&self) -> &AnalyticRefs {
        &self.refs
    }

    pub fn potential(&self) -> Option<&PotentialSpec> {
        self.refs.potential.as_ref()
    }

    /// The diffusion matrix is diagonal everywhere.
    pub fn has_diagonal_diffusion(&self) -> bool {
        self.diagonal_diffusion
    }

    pub fn constant_diffusion(&self) -> Option<&Matrix> {
        self.constant_diffusion.as_ref()
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, &mut out);
        out
    }

    /// Row-major diffusion matrix at `x`.
    #[inline]
    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn diffusion(&self, x: &[f64]) -> Matrix {
        let mut buf = vec![0.0; self.dim * self.dim];
        self.diffusion_into(x, &mut buf);
        Matrix::from_row_slice(self.dim, self.dim, &buf)
    }

    /// `(∇·D)_k = Σ_l ∂_l D_kl`, zero for constant diffusion.
    pub fn diffusion_divergence(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.constant_diffusion.is_some() {
            return;
        }
        let n = self.dim;
        let mut y = x.to_vec();
        let mut up = vec![0.0; n * n];
        let mut dn = vec![0.0; n * n];
        for l in 0..n {
            let h = 1e-5 * (1.0 + x[l].abs());
            y[l] = x[l] + h;
            self.diffusion_into(&y, &mut up);
            y[l] = x[l] - h;
            self.diffusion_into(&y, &mut dn);
            y[l] = x[l];
            for k in 0..n {
                out[k] += (up[k * n + l] - dn[k * n + l]) / (2.0 * h);
            }
        }
    }

    /// Circulation `j(x)` from the analytic references, if known.
    pub fn circulation(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.refs.circulation.as_ref().map(|j| {
            let mut out = vec![0.0; self.dim];
            j(x, &mut out);
            out
        })
    }

    /// Unnormalized analytic stationary density `e^{−βφ(x)}`.
    pub fn stationary_weight(&self, x: &[f64]) -> Option<f64> {
        self.potential().map(|p| (-self.beta * p.value(x)).exp())
    }

    pub fn hamiltonian(&self, x: &[f64]) -> Option<f64> {
        self.refs.hamiltonian.as_ref().map(|h| h(x))
    }

    /// Same drift and diffusion at a different noise scale. References stay
    /// valid: for models with a stationary `e^{−φ}` at β = 1 and an
    /// orthogonal circulation, the family at β is `e^{−βφ}` with the same `j`.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let mut m = self.clone();
        m.beta = beta;
        Ok(m)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_alpha(mut self, alpha: Vec<f64>) -> Self {
        self.alpha = alpha;
        self
    }

    /// Attach analytic references to a custom model.
    pub fn with_refs(mut self, refs: AnalyticRefs) -> Self {
        self.refs = refs;
        self
    }

    fn probe_diagonal(&self) -> bool {
        let n = self.dim;
        let mut buf = vec![0.0; n * n];
        probe_points(n, 32, 3.0).iter().all(|x| {
            self.diffusion_into(x, &mut buf);
            (0..n).all(|i| (0..n).all(|j| i == j || buf[i * n + j] == 0.0))
        })
    }

    /// Checks symmetry, positive semi-definiteness and finiteness of `D`
    /// and finiteness of `b` at the given points.
    pub fn validate_diffusion(&self, probes: &[Vec<f64>]) -> Result<()> {
        let n = self.dim;
        let mut b = vec![0.0; n];
        for x in probes {
            let d = self.diffusion(x);
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("diffusion is not finite at {x:?}")));
            }
            if !is_symmetric(&d, 1e-12) {
                return Err(Error::Parameter(format!("diffusion is not symmetric at {x:?}")));
            }
            let lmin = min_symmetric_eigenvalue(&d);
            if lmin < -1e-12 * (1.0 + d.norm()) {
                return Err(Error::Parameter(format!(
                    "diffusion is not positive semi-definite at {x:?} (eigenvalue {lmin:.3e})"
                )));
            }
            self.drift_into(x, &mut b);
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("drift is not finite at {x:?}")));
            }
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("beta must be positive, got {beta}")))
    }
}

/// Deterministic pseudo-random points in `[-r, r]^dim`.
pub fn probe_points(dim: usize, count: usize, r: f64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = RngStream::new(0x5eed_0f_90be_u64 ^ dim as u64, 0).rng();
    (0..count).map(|_| (0..dim).map(|_| rng.random_range(-r..r)).collect()).collect()
}

fn constant_matrix_fn(m: &Matrix) -> MatrixFn {
    let n = m.nrows();
    let rows: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
    Arc::new(move |_x, out| out.copy_from_slice(&rows))
}

fn is_diagonal(m: &Matrix) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

fn linear_fn(m: Matrix) -> VectorFn {
    let n = m.nrows();
    Arc::new(move |x, out| {
        for i in 0..n {
            out[i] = (0..n).map(|j| m[(i, j)] * x[j]).sum();
        }
    })
}

/// Ornstein–Uhlenbeck process `b(x) = −Bx` with constant `D`.
///
/// References: `φ = ½xᵀΞ⁻¹x` where `BΞ + ΞBᵀ = 2D`, and the circulation
/// `j = (DΞ⁻¹ − B)x`.
pub fn make_ou(b: Matrix, d: Matrix, beta: f64) -> Result<DiffusionModel> {
    check_beta(beta)?;
    check_stable(&b)?;
    let n = b.nrows();
    if d.shape() != (n, n) {
        return Err(Error::Shape(format!("D must be {n}x{n}")));
    }
    if !is_symmetric(&d, 1e-12) || min_symmetric_eigenvalue(&d) <= 0.0 {
        return Err(Error::Parameter("OU diffusion must be symmetric positive definite".into()));
    }
    let xi = solve_lyapunov(&b, &d)?;
    let precision = xi
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("stationary covariance is singular".into()))?;
    let precision = (&precision + precision.transpose()) * 0.5;
    let potential = PotentialSpec::quadratic(precision.clone())?.tap_label("ou_quadratic");
    let circ = &d * &precision - &b;
    let bd = &b * &d;
    let ou_balanced = (&bd - &d * b.transpose()).norm() <= 1e-10 * (1.0 + bd.norm());
    Ok(DiffusionModel {
        dim: n,
        beta,
        alpha: Vec::new(),
        label: "ou".into(),
        kind: ModelKind::OrnsteinUhlenbeck { b: b.clone(), d: d.clone() },
        drift: linear_fn(-b),
        diffusion: constant_matrix_fn(&d),
        diagonal_diffusion: is_diagonal(&d),
        constant_diffusion: Some(d),
        refs: AnalyticRefs {
            potential: Some(potential),
            gradient_drift: ou_balanced,
            circulation: Some(linear_fn(circ)),
            hamiltonian: None,
        },
    })
}

impl PotentialSpec {
    fn tap_label(mut self, label: &str) -> Self {
        self.label = label.into();
        self
    }
}

/// Underdamped Langevin dynamics in phase space `(x, y)` with momentum `y`:
/// `b = (y/m, −U′(x) − η(x)y/m)`, `D = k_BT·diag(0, η(x))`, β = 1.
pub fn make_klein_kramers(
    mass: f64,
    potential: PotentialSpec,
    eta: impl Fn(f64) -> f64 + Send + Sync + 'static,
    kbt: f64,
) -> Result<DiffusionModel> {
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Parameter(format!("mass must be positive, got {mass}")));
    }
    if !(kbt > 0.0 && kbt.is_finite()) {
        return Err(Error::Parameter(format!("k_BT must be positive, got {kbt}")));
    }
    if potential.dim() != 1 {
        return Err(Error::Shape("Klein–Kramers potential must be one-dimensional".into()));
    }
    let eta: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(eta);
    for x in probe_points(1, 64, 5.0) {
        let e = eta(x[0]);
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::Parameter(format!("friction must be positive, got {e} at x = {}", x[0])));
        }
    }
    let u = potential.clone();
    let eta_b = eta.clone();
    let drift: VectorFn = Arc::new(move |z, out| {
        let mut du = [0.0];
        u.gradient(&z[..1], &mut du);
        out[0] = z[1] / mass;
        out[1] = -du[0] - eta_b(z[0]) * z[1] / mass;
    });
    let eta_d = eta.clone();
    let diffusion: MatrixFn = Arc::new(move |z, out| {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = kbt * eta_d(z[0]);
    });
    let u_h = potential.clone();
    let hamiltonian: ScalarFn = Arc::new(move |z| z[1] * z[1] / (2.0 * mass) + u_h.value(&z[..1]));
    let h_phi = hamiltonian.clone();
    let u_g = potential.clone();
    let phi = PotentialSpec::new(2, "hamiltonian_over_kbt", move |z| h_phi(z) / kbt).with_gradient(move |z, out| {
        let mut du = [0.0];
        u_g.gradient(&z[..1], &mut du);
        out[0] = du[0] / kbt;
        out[1] = z[1] / (mass * kbt);
    });
    let u_j = potential;
    let circulation: VectorFn = Arc::new(move |z, out| {
        let mut du = [0.0];
        u_j.gradient(&z[..1], &mut du);
        out[0] = z[1] / mass;
        out[1] = -du[0];
    });
    let constant = eta_is_constant(&*eta).then(|| Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, kbt * eta(0.0)]));
    Ok(DiffusionModel {
        dim: 2,
        beta: 1.0,
        alpha: Vec::new(),
        label: "klein_kramers".into(),
        kind: ModelKind::KleinKramers { mass, kbt },
        drift,
        diffusion,
        constant_diffusion: constant,
        diagonal_diffusion: true,
        refs: AnalyticRefs {
            potential: Some(phi),
            gradient_drift: false,
            circulation: Some(circulation),
            hamiltonian: Some(hamiltonian),
        },
    })
}

fn eta_is_constant(eta: &(dyn Fn(f64) -> f64 + Send + Sync)) -> bool {
    let e0 = eta(0.0);
    probe_points(1, 32, 10.0).iter().all(|x| eta(x[0]) == e0)
}

/// Ao's process: `D = (G + Gᵀ)/2`, `b = −G∇φ`, β = 1, stationary `e^{−φ}`
/// and circulation `j = −½(G − Gᵀ)∇φ`.
pub fn make_ao(
    g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    potential: PotentialSpec,
) -> Result<DiffusionModel> {
    let n = potential.dim();
    let g: MatrixFn = Arc::new(g);
    let probes = probe_points(n, 64, 3.0);
    let mut buf = vec![0.0; n * n];
    let mut constant: Option<Vec<f64>> = None;
    let mut is_const = true;
    for x in &probes {
        g(x, &mut buf);
        let gm = Matrix::from_row_slice(n, n, &buf);
        if gm.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("G is not finite at {x:?}")));
        }
        let lmin = min_symmetric_eigenvalue(&gm);
        if lmin < -1e-12 * (1.0 + gm.norm()) {
            return Err(Error::Parameter(format!("symmetric part of G is indefinite at {x:?} ({lmin:.3e})")));
        }
        match &constant {
            None => constant = Some(buf.clone()),
            Some(c) => is_const &= *c == buf,
        }
    }
    let gd = g.clone();
    let pd = potential.clone();
    let drift: VectorFn = Arc::new(move |x, out| {
        let mut gm = vec![0.0; n * n];
        let mut grad = vec![0.0; n];
        gd(x, &mut gm);
        pd.gradient(x, &mut grad);
        for i in 0..n {
            out[i] = -(0..n).map(|j| gm[i * n + j] * grad[j]).sum::<f64>();
        }
    });
    let gs = g.clone();
    let diffusion: MatrixFn = Arc::new(move |x, out| {
        let mut gm = vec![0.0; n * n];
        gs(x, &mut gm);
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = 0.5 * (gm[i * n + j] + gm[j * n + i]);
            }
        }
    });
    let ga = g;
    let pc = potential.clone();
    let circulation: VectorFn = Arc::new(move |x, out| {
        let mut gm = vec![0.0; n * n];
        let mut grad = vec![0.0; n];
        ga(x, &mut gm);
        pc.gradient(x, &mut grad);
        for i in 0..n {
            out[i] = -(0..n).map(|j| 0.5 * (gm[i * n + j] - gm[j * n + i]) * grad[j]).sum::<f64>();
        }
    });
    let constant_d = if is_const {
        constant.map(|c| {
            let gm = Matrix::from_row_slice(n, n, &c);
            (&gm + gm.transpose()) * 0.5
        })
    } else {
        None
    };
    let mut model = DiffusionModel {
        dim: n,
        beta: 1.0,
        alpha: Vec::new(),
        label: "ao".into(),
        kind: ModelKind::Ao,
        drift,
        diffusion,
        diagonal_diffusion: constant_d.as_ref().is_some_and(is_diagonal),
        constant_diffusion: constant_d,
        refs: AnalyticRefs { potential: Some(potential), gradient_drift: false, circulation: Some(circulation), hamiltonian: None },
    };
    if !model.diagonal_diffusion {
        model.diagonal_diffusion = model.probe_diagonal();
    }
    let symmetric_g = {
        let mut ok = true;
        for x in &probes {
            let mut c = vec![0.0; n];
            (model.refs.circulation.as_ref().unwrap())(x, &mut c);
            ok &= c.iter().all(|v| *v == 0.0);
        }
        ok
    };
    model.refs.gradient_drift = symmetric_g;
    Ok(model)
}

/// Ao's process with a constant `G`.
pub fn make_ao_constant(g: Matrix, potential: PotentialSpec) -> Result<DiffusionModel> {
    let n = potential.dim();
    if g.shape() != (n, n) {
        return Err(Error::Shape(format!("G must be {n}x{n}")));
    }
    let rows: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| g[(i, j)]).collect();
    make_ao(move |_x, out| out.copy_from_slice(&rows), potential)
}

/// Detailed-balanced model `b = −D∇φ` with constant `D`.
pub fn make_gradient_model(potential: PotentialSpec, d: Matrix, beta: f64) -> Result<DiffusionModel> {
    check_beta(beta)?;
    let n = potential.dim();
    if d.shape() != (n, n) {
        return Err(Error::Shape(format!("D must be {n}x{n}")));
    }
    if !is_symmetric(&d, 1e-12) || min_symmetric_eigenvalue(&d) <= 0.0 {
        return Err(Error::Parameter("diffusion must be symmetric positive definite".into()));
    }
    let p = potential.clone();
    let dd = d.clone();
    let drift: VectorFn = Arc::new(move |x, out| {
        let mut grad = vec![0.0; n];
        p.gradient(x, &mut grad);
        for i in 0..n {
            out[i] = -(0..n).map(|j| dd[(i, j)] * grad[j]).sum::<f64>();
        }
    });
    Ok(DiffusionModel {
        dim: n,
        beta,
        alpha: Vec::new(),
        label: "gradient".into(),
        kind: ModelKind::Gradient,
        drift,
        diffusion: constant_matrix_fn(&d),
        diagonal_diffusion: is_diagonal(&d),
        constant_diffusion: Some(d),
        refs: AnalyticRefs {
            potential: Some(potential),
            gradient_drift: true,
            circulation: Some(Arc::new(|_x, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0))),
            hamiltonian: None,
        },
    })
}

/// Entry of the model catalog.
#[derive(Debug, Clone, Copy)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub params: &'static [(&'static str, &'static str)],
    pub reproduces: &'static str,
}

pub const CATALOG: &[CatalogEntry] = &[
    CatalogEntry {
        name: "ou",
        params: &[
            ("B", "n×n matrix, eigenvalues with positive real part; drift b(x) = −Bx"),
            ("D", "n×n symmetric positive definite diffusion matrix"),
            ("beta", "positive noise scale (default 1)"),
        ],
        reproduces: "Ornstein–Uhlenbeck process: Gaussian stationary law, linear circulation, M-form SDE",
    },
    CatalogEntry {
        name: "klein_kramers",
        params: &[
            ("m", "positive mass"),
            ("U", "one-dimensional potential: harmonic (k), double_well, or quartic"),
            ("eta", "positive constant friction"),
            ("kBT", "positive thermal energy"),
        ],
        reproduces: "Klein–Kramers phase-space dynamics with Maxwell–Boltzmann stationary law and Hamiltonian circulation",
    },
    CatalogEntry {
        name: "ao",
        params: &[
            ("G", "n×n constant matrix with positive semi-definite symmetric part"),
            ("phi", "potential: isotropic, quadratic (K), double_well, or radial_quartic"),
        ],
        reproduces: "Ao's process: D = (G+Gᵀ)/2, b = −G∇φ, stationary e^{−φ} with circulation ½(G−Gᵀ)∇f^ss",
    },
    CatalogEntry {
        name: "gradient",
        params: &[
            ("phi", "potential: isotropic, quadratic (K), double_well, or radial_quartic"),
            ("D", "n×n symmetric positive definite diffusion matrix"),
            ("beta", "positive noise scale (default 1)"),
        ],
        reproduces: "detailed-balanced diffusion b = −D∇φ with stationary Z⁻¹e^{−βφ}",
    },
];
