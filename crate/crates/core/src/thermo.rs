//! Free energy, entropy and entropy production of grid densities.
//!
//! Currents are evaluated by grid differencing,
//! `J = b f − β⁻¹∇·(D f)`, with the central stencil of
//! [`grid_gradient`](crate::numerics::grid_gradient). Two dissipation
//! measures are reported side by side:
//!
//! * `ep_overdamped = ∫ J·(D⁻¹b − β⁻¹∇ln f)`, with housekeeping input
//!   `E_in = ∫ J·(D⁻¹b − β⁻¹∇ln f^ss)` so that `dF/dt = E_in − e_p`;
//!   the stationary force `D⁻¹b − β⁻¹∇ln f^ss` is evaluated as
//!   `D⁻¹J^ss/f^ss` from the face fluxes of the fitted operator, so it
//!   vanishes identically for detailed-balanced models;
//! * `ep_nonadiabatic = ∫ f ∇μ·D∇μ` with `μ = β⁻¹ln(f/f^ss)`, which equals
//!   `−dF/dt` whenever the stationary state is a Maxwell–Boltzmann
//!   equilibrium.
//!
//! For singular diffusion the first pair is undefined; `ep_overdamped`
//! then falls back to the quadratic form and `E_in` is reported as missing.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fpe::assemble_operator;
use crate::model::DiffusionModel;
use crate::numerics::{compensated_sum, grid_gradient, min_symmetric_eigenvalue, CurrentField, Grid, GridField};

fn integrate(values: impl IntoIterator<Item = f64>, grid: &Grid) -> f64 {
    compensated_sum(values) * grid.cell_volume()
}

fn check_same(a: &GridField, b: &GridField) -> Result<()> {
    if a.grid.same_shape(&b.grid) {
        Ok(())
    } else {
        Err(Error::Shape("fields live on different grids".into()))
    }
}

/// `β⁻¹∫ f ln(f/f^ss)` with `0·ln 0 = 0`.
pub fn free_energy(f: &GridField, fss: &GridField, beta: f64) -> Result<f64> {
    check_same(f, fss)?;
    let mut terms = Vec::with_capacity(f.values.len());
    for (&p, &q) in f.values.iter().zip(&fss.values) {
        if p > 0.0 {
            if !(q > 0.0) {
                return Err(Error::Domain("f is positive where the stationary density vanishes".into()));
            }
            terms.push(p * (p / q).ln());
        }
    }
    Ok(integrate(terms, &f.grid) / beta)
}

/// Gibbs–Shannon entropy `−∫ f ln f` with `0·ln 0 = 0`.
pub fn entropy(f: &GridField) -> f64 {
    -integrate(f.values.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()), &f.grid)
}

/// `μ = φ + β⁻¹ln f`; cells with `f = 0` hold NaN.
pub fn chemical_potential(f: &GridField, phi: &GridField, beta: f64) -> Result<GridField> {
    check_same(f, phi)?;
    let values = f
        .values
        .iter()
        .zip(&phi.values)
        .map(|(&p, &u)| if p > 0.0 { u + p.ln() / beta } else { f64::NAN })
        .collect();
    Ok(GridField { grid: f.grid.clone(), values })
}

/// Drift and diffusion sampled at cell centres.
#[derive(Debug, Clone)]
pub struct CellCoefficients {
    pub grid: Grid,
    pub beta: f64,
    dim: usize,
    /// `b` per cell, cell-major.
    pub drift: Vec<f64>,
    /// Row-major `D` per cell.
    pub diffusion: Vec<f64>,
    /// `D⁻¹b` per cell; `None` when `D` is singular somewhere.
    pub dinv_drift: Option<Vec<f64>>,
}

impl CellCoefficients {
    pub fn new(model: &DiffusionModel, grid: &Grid) -> Result<Self> {
        let n = model.dim();
        if grid.dim() != n {
            return Err(Error::Shape(format!("model has dimension {n} but grid has {}", grid.dim())));
        }
        let cells = grid.len();
        let mut drift = vec![0.0; cells * n];
        let mut diffusion = vec![0.0; cells * n * n];
        let mut x = vec![0.0; n];
        for c in 0..cells {
            grid.center_into(c, &mut x);
            model.drift_into(&x, &mut drift[c * n..(c + 1) * n]);
            model.diffusion_into(&x, &mut diffusion[c * n * n..(c + 1) * n * n]);
        }
        let mut dinv = vec![0.0; cells * n];
        let mut regular = true;
        for c in 0..cells {
            let d = DMatrix::from_row_slice(n, n, &diffusion[c * n * n..(c + 1) * n * n]);
            let scale = d.amax().max(f64::MIN_POSITIVE);
            if min_symmetric_eigenvalue(&d) <= 1e-12 * scale {
                regular = false;
                break;
            }
            let b = nalgebra::DVector::from_column_slice(&drift[c * n..(c + 1) * n]);
            match d.cholesky() {
                Some(ch) => dinv[c * n..(c + 1) * n].copy_from_slice(ch.solve(&b).as_slice()),
                None => {
                    regular = false;
                    break;
                }
            }
        }
        Ok(Self { grid: grid.clone(), beta: model.beta(), dim: n, drift, diffusion, dinv_drift: regular.then_some(dinv) })
    }

    pub fn is_singular(&self) -> bool {
        self.dinv_drift.is_none()
    }

    fn d(&self, cell: usize, k: usize, l: usize) -> f64 {
        self.diffusion[(cell * self.dim + k) * self.dim + l]
    }

    /// `J = b f − β⁻¹∇·(D f)`.
    pub fn current(&self, f: &GridField) -> Result<CurrentField> {
        if !f.grid.same_shape(&self.grid) {
            return Err(Error::Shape("density is not on the coefficient grid".into()));
        }
        let n = self.dim;
        let cells = self.grid.len();
        let mut j = CurrentField::zeros(&self.grid);
        for c in 0..cells {
            for k in 0..n {
                j.values[c * n + k] = self.drift[c * n + k] * f.values[c];
            }
        }
        for k in 0..n {
            for l in 0..n {
                let dkl: Vec<f64> = (0..cells).map(|c| self.d(c, k, l) * f.values[c]).collect();
                if dkl.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let g = grid_gradient(&GridField { grid: self.grid.clone(), values: dkl });
                for c in 0..cells {
                    j.values[c * n + k] -= g.values[c * n + l] / self.beta;
                }
            }
        }
        Ok(j)
    }

    /// `∫ f ∇u·D∇u`.
    fn quadratic_form(&self, f: &GridField, u: &GridField) -> f64 {
        let n = self.dim;
        let g = grid_gradient(u);
        let terms = (0..self.grid.len()).map(|c| {
            let gu = &g.values[c * n..(c + 1) * n];
            let mut s = 0.0;
            for k in 0..n {
                for l in 0..n {
                    s += gu[k] * self.d(c, k, l) * gu[l];
                }
            }
            f.values[c] * s
        });
        integrate(terms, &self.grid)
    }

    /// `∫ J·(D⁻¹b − β⁻¹∇ln g)`; `None` for singular diffusion.
    fn current_against(&self, j: &CurrentField, g: &GridField) -> Option<f64> {
        let dinv = self.dinv_drift.as_ref()?;
        let n = self.dim;
        let grad = grid_gradient(&log_field(g).ok()?);
        let terms = (0..self.grid.len()).map(|c| {
            (0..n).map(|k| j.values[c * n + k] * (dinv[c * n + k] - grad.values[c * n + k] / self.beta)).sum::<f64>()
        });
        Some(integrate(terms, &self.grid))
    }

    /// `D⁻¹J^ss/f^ss` per cell from the operator face fluxes of `fss`;
    /// `None` for singular diffusion.
    pub fn stationary_force(&self, model: &DiffusionModel, fss: &GridField) -> Result<Option<Vec<f64>>> {
        if self.is_singular() {
            return Ok(None);
        }
        log_field(fss)?;
        let n = self.dim;
        let jss = assemble_operator(model, &self.grid)?.current(fss);
        let mut out = vec![0.0; self.grid.len() * n];
        for c in 0..self.grid.len() {
            let d = DMatrix::from_row_slice(n, n, &self.diffusion[c * n * n..(c + 1) * n * n]);
            let j = nalgebra::DVector::from_iterator(n, jss.at(c).iter().map(|v| v / fss.values[c]));
            let x = d.cholesky().ok_or_else(|| Error::Numerical("diffusion lost definiteness".into()))?.solve(&j);
            out[c * n..(c + 1) * n].copy_from_slice(x.as_slice());
        }
        Ok(Some(out))
    }

    /// `∫ J·X` for a per-cell force `X`.
    fn work(&self, j: &CurrentField, force: &[f64]) -> f64 {
        integrate(j.values.iter().zip(force).map(|(a, b)| a * b), &self.grid)
    }
}

fn log_field(f: &GridField) -> Result<GridField> {
    if f.values.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(Error::Domain("density has zero or non-finite cells; its logarithm is undefined".into()));
    }
    Ok(f.map(f64::ln))
}

/// Which formula produced an entropy production value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EpRoute {
    /// `∫ J·(D⁻¹b − β⁻¹∇ln f)`.
    CurrentForce,
    /// `∫ f ∇μ·D∇μ`, used when `D` is singular.
    QuadraticForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyProduction {
    pub value: f64,
    pub route: EpRoute,
}

/// Entropy production rate of `f`.
///
/// Singular diffusion needs `fss` (or an analytic potential on the model)
/// for the quadratic-form route.
pub fn entropy_production_rate(
    f: &GridField,
    model: &DiffusionModel,
    fss: Option<&GridField>,
) -> Result<EntropyProduction> {
    let coeffs = CellCoefficients::new(model, &f.grid)?;
    entropy_production_with(&coeffs, f, fss, model)
}

fn entropy_production_with(
    coeffs: &CellCoefficients,
    f: &GridField,
    fss: Option<&GridField>,
    model: &DiffusionModel,
) -> Result<EntropyProduction> {
    log_field(f)?;
    if !coeffs.is_singular() {
        let j = coeffs.current(f)?;
        let value = coeffs.current_against(&j, f).expect("regular diffusion");
        return Ok(EntropyProduction { value, route: EpRoute::CurrentForce });
    }
    let stationary = match fss {
        Some(s) => s.clone(),
        None => {
            let p = model
                .potential()
                .ok_or_else(|| Error::Domain("singular diffusion needs a stationary density".into()))?;
            f.grid.sample(|x| (-model.beta() * p.value(x)).exp()).normalized()?
        }
    };
    let value = nonadiabatic_with(coeffs, f, &stationary)?;
    Ok(EntropyProduction { value, route: EpRoute::QuadraticForm })
}

/// `E_in = ∫ J·(D⁻¹b − β⁻¹∇ln f^ss)`; domain error for singular diffusion.
pub fn housekeeping_input_rate(f: &GridField, fss: &GridField, model: &DiffusionModel) -> Result<f64> {
    check_same(f, fss)?;
    let coeffs = CellCoefficients::new(model, &f.grid)?;
    if coeffs.is_singular() {
        return Err(Error::Domain("housekeeping input is undefined for singular diffusion".into()));
    }
    let force = coeffs.stationary_force(model, fss)?.expect("regular diffusion");
    Ok(coeffs.work(&coeffs.current(f)?, &force))
}

/// `∫ f ∇μ·D∇μ` with `μ = β⁻¹ln(f/f^ss)`.
pub fn nonadiabatic_entropy_production(f: &GridField, fss: &GridField, model: &DiffusionModel) -> Result<f64> {
    check_same(f, fss)?;
    let coeffs = CellCoefficients::new(model, &f.grid)?;
    nonadiabatic_with(&coeffs, f, fss)
}

fn nonadiabatic_with(coeffs: &CellCoefficients, f: &GridField, fss: &GridField) -> Result<f64> {
    let lf = log_field(f)?;
    let ls = log_field(fss)?;
    let beta = coeffs.beta;
    let mu = GridField {
        grid: f.grid.clone(),
        values: lf.values.iter().zip(&ls.values).map(|(a, b)| (a - b) / beta).collect(),
    };
    Ok(coeffs.quadratic_form(f, &mu))
}

/// Time series of the free-energy ledger.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ThermoLedger {
    pub times: Vec<f64>,
    pub free_energy: Vec<f64>,
    pub entropy: Vec<f64>,
    pub ep_overdamped: Vec<f64>,
    pub ep_route: Vec<EpRoute>,
    pub ep_nonadiabatic: Vec<f64>,
    /// Missing for singular diffusion.
    pub e_in: Vec<Option<f64>>,
    /// `⟨φ⟩` with `φ = −β⁻¹ln f^ss`.
    pub phi_mean: Vec<f64>,
    pub dphi_dt: Vec<f64>,
    pub df_dt: Vec<f64>,
    pub ds_dt: Vec<f64>,
    /// `|dF/dt − (E_in − e_p)|`; missing when `E_in` is.
    pub balance_residual: Vec<Option<f64>>,
    /// `dS/dt − (e_p + β d⟨φ⟩/dt)`, exactly as the entropy balance is stated.
    pub entropy_balance_residual: Vec<f64>,
}

/// Centered differences, one-sided second-order at the ends.
pub fn time_derivative(values: &[f64], dt: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dt)
            } else if i == n - 1 {
                (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * dt)
            } else {
                (values[i + 1] - values[i - 1]) / (2.0 * dt)
            }
        })
        .collect()
}

/// Ledger of uniformly spaced snapshots `t_k = t0 + k·dt`.
pub fn ledger(snapshots: &[GridField], t0: f64, dt: f64, model: &DiffusionModel, fss: &GridField) -> Result<ThermoLedger> {
    if snapshots.len() < 3 {
        return Err(Error::InsufficientData(format!("ledger needs at least 3 snapshots, got {}", snapshots.len())));
    }
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("snapshot spacing must be positive, got {dt}")));
    }
    for s in snapshots {
        check_same(s, fss)?;
    }
    let beta = model.beta();
    let coeffs = CellCoefficients::new(model, &fss.grid)?;
    let phi = log_field(fss)?.map(|v| -v / beta);
    let force = coeffs.stationary_force(model, fss)?;
    let mut out = ThermoLedger::default();
    for (k, f) in snapshots.iter().enumerate() {
        out.times.push(t0 + k as f64 * dt);
        out.free_energy.push(free_energy(f, fss, beta)?);
        out.entropy.push(entropy(f));
        let ep = entropy_production_with(&coeffs, f, Some(fss), model)?;
        out.ep_overdamped.push(ep.value);
        out.ep_route.push(ep.route);
        out.ep_nonadiabatic.push(nonadiabatic_with(&coeffs, f, fss)?);
        let e_in = match &force {
            Some(x) => Some(coeffs.work(&coeffs.current(f)?, x)),
            None => None,
        };
        out.e_in.push(e_in);
        out.phi_mean.push(integrate(f.values.iter().zip(&phi.values).map(|(p, u)| p * u), &f.grid));
    }
    out.df_dt = time_derivative(&out.free_energy, dt);
    out.ds_dt = time_derivative(&out.entropy, dt);
    out.dphi_dt = time_derivative(&out.phi_mean, dt);
    for k in 0..snapshots.len() {
        out.balance_residual
            .push(out.e_in[k].map(|e| (out.df_dt[k] - (e - out.ep_overdamped[k])).abs()));
        out.entropy_balance_residual.push(out.ds_dt[k] - (out.ep_overdamped[k] + beta * out.dphi_dt[k]));
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| x.to_string())
}

impl ThermoLedger {
    pub const CSV_COLUMNS: [&'static str; 11] = [
        "t",
        "F",
        "S",
        "ep_overdamped",
        "ep_nonadiabatic",
        "E_in",
        "dphi_dt",
        "balance_residual",
        "dF_dt",
        "dS_dt",
        "entropy_balance_residual",
    ];

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_COLUMNS.join(","))?;
        for k in 0..self.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.times[k],
                self.free_energy[k],
                self.entropy[k],
                self.ep_overdamped[k],
                self.ep_nonadiabatic[k],
                opt(self.e_in[k]),
                self.dphi_dt[k],
                opt(self.balance_residual[k]),
                self.df_dt[k],
                self.ds_dt[k],
                self.entropy_balance_residual[k],
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_gradient_model, make_ou, PotentialSpec};
    use crate::numerics::Matrix;
    use std::f64::consts::PI;

    fn normal(grid: &Grid, m: f64, v: f64) -> GridField {
        grid.sample(|x| (-(x[0] - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
    }

    fn line() -> Grid {
        Grid::new(&[(-8.0, 8.0)], &[400]).unwrap()
    }

    #[test]
    fn free_energy_examples() {
        let g = line();
        let fss = normal(&g, 0.0, 1.0);
        let f = normal(&g, 1.0, 2.0);
        assert_eq!(free_energy(&fss, &fss, 1.0).unwrap(), 0.0);
        assert!((free_energy(&f, &fss, 1.0).unwrap() - (1.0 - 0.5 * 2f64.ln())).abs() < 1e-4);
        assert!((free_energy(&f, &fss, 2.0).unwrap() - 0.5 * (1.0 - 0.5 * 2f64.ln())).abs() < 1e-4);
        let mut hole = fss.clone();
        hole.values[10] = 0.0;
        assert!(matches!(free_energy(&f, &hole, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn entropy_examples() {
        let unit = Grid::new(&[(0.0, 1.0)], &[50]).unwrap();
        assert!(entropy(&unit.sample(|_| 1.0)).abs() < 1e-15);
        let g = line();
        assert!((entropy(&normal(&g, 0.0, 1.0)) - 0.5 * (2.0 * PI * 1f64.exp()).ln()).abs() < 1e-4);
        let wide = Grid::new(&[(-16.0, 16.0)], &[800]).unwrap();
        assert!((entropy(&normal(&wide, 0.0, 4.0)) - 0.5 * (8.0 * PI * 1f64.exp()).ln()).abs() < 1e-4);
    }

    #[test]
    fn chemical_potential_examples() {
        let g = line();
        let phi = g.sample(|x| 0.5 * x[0] * x[0]);
        let f = normal(&g, 1.0, 1.0);
        let mu = chemical_potential(&f, &phi, 1.0).unwrap();
        for c in 0..g.len() {
            let x = g.center(c)[0];
            assert!((mu.values[c] - (x - 0.5 - 0.5 * (2.0 * PI).ln())).abs() < 1e-10);
        }
        let z: f64 = (2.0 * PI).sqrt();
        let flat = chemical_potential(&normal(&g, 0.0, 1.0), &phi, 1.0).unwrap();
        assert!(flat.values.iter().all(|m| (m + z.ln()).abs() < 1e-12));
        let cold = chemical_potential(&f, &phi, 1e12).unwrap();
        assert!(cold.values.iter().zip(&phi.values).all(|(m, p)| (m - p).abs() < 1e-9));
    }

    #[test]
    fn ou_entropy_production() {
        let g = line();
        let model = make_ou(Matrix::identity(1, 1), Matrix::identity(1, 1), 1.0).unwrap();
        let f = normal(&g, 1.0, 2.0);
        let ep = entropy_production_rate(&f, &model, None).unwrap();
        assert_eq!(ep.route, EpRoute::CurrentForce);
        assert!((ep.value / 1.5 - 1.0).abs() < 0.01, "{}", ep.value);
        let fss = normal(&g, 0.0, 1.0);
        assert!(entropy_production_rate(&fss, &model, None).unwrap().value.abs() < 1e-8);
        assert!(housekeeping_input_rate(&f, &fss, &model).unwrap().abs() < 1e-8);
        let na = nonadiabatic_entropy_production(&f, &fss, &model).unwrap();
        assert!((na / ep.value - 1.0).abs() < 1e-6, "{na} vs {}", ep.value);
    }

    #[test]
    fn gradient_model_has_no_housekeeping_input() {
        let g = Grid::new(&[(-3.0, 3.0)], &[300]).unwrap();
        let model = make_gradient_model(PotentialSpec::double_well(1), Matrix::identity(1, 1), 2.0).unwrap();
        let fss = g.sample(|x| (-2.0 * PotentialSpec::double_well(1).value(x)).exp()).normalized().unwrap();
        for k in 0..20 {
            let m = -1.0 + 0.1 * k as f64;
            let f = g.sample(|x| (-(x[0] - m).powi(2)).exp() + 0.01).normalized().unwrap();
            assert!(housekeeping_input_rate(&f, &fss, &model).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn ledger_needs_three_snapshots() {
        let g = line();
        let model = make_ou(Matrix::identity(1, 1), Matrix::identity(1, 1), 1.0).unwrap();
        let fss = normal(&g, 0.0, 1.0);
        let snaps = vec![fss.clone(), fss.clone()];
        assert!(matches!(ledger(&snaps, 0.0, 0.1, &model, &fss), Err(Error::InsufficientData(_))));
        let snaps = vec![fss.clone(); 4];
        let l = ledger(&snaps, 0.0, 0.1, &model, &fss).unwrap();
        assert!(l.df_dt.iter().chain(&l.ep_overdamped).all(|v| v.abs() < 1e-8));
        let mut csv = Vec::new();
        l.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,F,S,ep_overdamped,ep_nonadiabatic,E_in,dphi_dt,balance_residual"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn time_derivative_is_exact_for_quadratics() {
        let v: Vec<f64> = (0..6).map(|k| (0.1 * k as f64).powi(2)).collect();
        let d = time_derivative(&v, 0.1);
        for (k, dk) in d.iter().enumerate() {
            assert!((dk - 0.2 * k as f64).abs() < 1e-12);
        }
    }
}
