//! Drift decomposition `b = j − D∇φ` and the Maxwell–Boltzmann test.
//!
//! From a stationary pair `(f^ss, J^ss)` the potential is
//! `φ = −β⁻¹ln f^ss` (shifted to min 0) and the circulation `j = J^ss/f^ss`.
//! The stationary state is a Maxwell–Boltzmann equilibrium when `∇·j = 0`
//! and `j·∇φ = 0`; detailed balance is the special case `j = 0`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpe::{assemble_operator, stationary_density};
use crate::model::DiffusionModel;
use crate::numerics::{compensated_sum, grid_gradient, CurrentField, Grid, GridField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    DetailedBalance,
    MBEquilibrium,
    DrivenNESS,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DetailedBalance => "DetailedBalance",
            Self::MBEquilibrium => "MBEquilibrium",
            Self::DrivenNESS => "DrivenNESS",
        })
    }
}

/// Classification thresholds. All residuals they bound are dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Bound on `‖j‖/‖b‖` for detailed balance.
    pub j: f64,
    /// Bound on the relative divergence of `j`.
    pub div: f64,
    /// Bound on the relative orthogonality residual.
    pub orth: f64,
    /// Cells with `f^ss` below this fraction of its maximum are ignored,
    /// as are the two outermost layers of cells.
    pub support: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { j: 1e-6, div: 1e-6, orth: 1e-4, support: 1e-8 }
    }
}

impl Thresholds {
    /// Looser bounds for fields that carry discretization error.
    pub fn grid() -> Self {
        Self { j: 1e-6, div: 1e-2, orth: 1e-2, support: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct DriftDecomposition {
    pub beta: f64,
    /// `φ = −β⁻¹ln f^ss − min`.
    pub phi: GridField,
    pub j: CurrentField,
    /// `max |∇·j| / max ‖∇b‖_F`.
    pub div_j_norm: f64,
    /// `‖j·∇φ‖ / ‖|b||∇φ|‖` in `L²(f^ss)`.
    pub orth_norm: f64,
    /// `max |j·∇φ| / max |b||∇φ|`.
    pub orth_max: f64,
    /// `‖j‖ / ‖b‖` in `L²(f^ss)`.
    pub j_norm: f64,
    /// `‖j − D∇φ − b‖ / ‖b‖` in `L²(f^ss)`.
    pub reconstruction_residual: f64,
    pub thresholds: Thresholds,
    pub classification: Classification,
}

/// Decomposition from a stationary density and current on a grid.
pub fn decompose(model: &DiffusionModel, fss: &GridField, jss: &CurrentField, thresholds: Thresholds) -> Result<DriftDecomposition> {
    if !fss.grid.same_shape(&jss.grid) || fss.grid.dim() != model.dim() {
        return Err(Error::Shape("stationary density, current and model disagree in shape".into()));
    }
    if fss.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("stationary density must be strictly positive".into()));
    }
    let beta = model.beta();
    let phi = fss.map(|v| -v.ln() / beta);
    let mut j = jss.clone();
    for c in 0..fss.grid.len() {
        for v in j.at_mut(c) {
            *v /= fss.values[c];
        }
    }
    Ok(assess(model, phi, j, fss, thresholds))
}

/// Decomposition from the model's analytic potential and circulation,
/// sampled on `grid`.
pub fn decompose_analytic(model: &DiffusionModel, grid: &Grid, thresholds: Thresholds) -> Result<DriftDecomposition> {
    let p = model.potential().ok_or_else(|| Error::Input(format!("model '{}' has no analytic potential", model.label())))?;
    let circ = model
        .refs()
        .circulation
        .clone()
        .ok_or_else(|| Error::Input(format!("model '{}' has no analytic circulation", model.label())))?;
    let beta = model.beta();
    let phi = grid.sample(|x| p.value(x));
    let weight = grid.sample(|x| (-beta * p.value(x)).exp()).normalized()?;
    let j = grid.sample_vector(|x, out| circ(x, out));
    Ok(assess(model, phi, j, &weight, thresholds))
}

fn assess(model: &DiffusionModel, phi: GridField, j: CurrentField, weight: &GridField, thresholds: Thresholds) -> DriftDecomposition {
    let grid = phi.grid.clone();
    let n = grid.dim();
    let cells = grid.len();
    let shift = phi.min();
    let phi = phi.map(|v| v - shift);
    let fmax = weight.max();
    let supported: Vec<bool> = weight.values.iter().map(|v| *v >= thresholds.support * fmax).collect();

    let grad_phi = grid_gradient(&phi);
    let jac: Vec<CurrentField> = (0..n).map(|k| grid_gradient(&j.component(k))).collect();
    let drift = grid.sample_vector(|x, out| model.drift_into(x, out));
    let drift_jac: Vec<CurrentField> = (0..n).map(|k| grid_gradient(&drift.component(k))).collect();

    let mut div_max = 0.0f64;
    let mut jac_max = 0.0f64;
    let (mut orth_num, mut orth_den) = (Vec::new(), Vec::new());
    let (mut orth_pt, mut orth_scale) = (0.0f64, 0.0f64);
    let (mut jj, mut bb, mut rec) = (Vec::new(), Vec::new(), Vec::new());
    let mut x = vec![0.0; n];
    let mut dbuf = vec![0.0; n * n];
    for c in 0..cells {
        // stencils touching a boundary cell see the no-flux closure
        if !supported[c] || depth(&grid, c) < 2 {
            continue;
        }
        let w = weight.values[c];
        let jc = j.at(c);
        let gp = grad_phi.at(c);
        let b = drift.at(c);
        let dot: f64 = jc.iter().zip(gp).map(|(a, b)| a * b).sum();
        let jn2 = jc.iter().map(|v| v * v).sum::<f64>();
        let bn2 = b.iter().map(|v| v * v).sum::<f64>();
        let gn2 = gp.iter().map(|v| v * v).sum::<f64>();
        orth_num.push(w * dot * dot);
        orth_den.push(w * bn2 * gn2);
        orth_pt = orth_pt.max(dot.abs());
        orth_scale = orth_scale.max((bn2 * gn2).sqrt());
        jj.push(w * jn2);
        bb.push(w * bn2);

        let div: f64 = (0..n).map(|k| jac[k].at(c)[k]).sum();
        let fro: f64 = (0..n).map(|k| drift_jac[k].at(c).iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        div_max = div_max.max(div.abs());
        jac_max = jac_max.max(fro);

        grid.center_into(c, &mut x);
        model.diffusion_into(&x, &mut dbuf);
        let r: f64 = (0..n)
            .map(|k| {
                let dg: f64 = (0..n).map(|l| dbuf[k * n + l] * gp[l]).sum();
                (jc[k] - dg - b[k]).powi(2)
            })
            .sum();
        rec.push(w * r);
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let bnorm = compensated_sum(bb).sqrt();
    let j_norm = ratio(compensated_sum(jj).sqrt(), bnorm);
    let div_j_norm = ratio(div_max, jac_max);
    let orth_norm = ratio(compensated_sum(orth_num).sqrt(), compensated_sum(orth_den).sqrt());
    let orth_max = ratio(orth_pt, orth_scale);
    let reconstruction_residual = ratio(compensated_sum(rec).sqrt(), bnorm);
    let classification = if j_norm <= thresholds.j {
        Classification::DetailedBalance
    } else if div_j_norm <= thresholds.div && orth_norm <= thresholds.orth && orth_max <= thresholds.orth {
        Classification::MBEquilibrium
    } else {
        Classification::DrivenNESS
    };
    DriftDecomposition {
        beta: model.beta(),
        phi,
        j,
        div_j_norm,
        orth_norm,
        orth_max,
        j_norm,
        reconstruction_residual,
        thresholds,
        classification,
    }
}

fn depth(grid: &Grid, c: usize) -> usize {
    (0..grid.dim())
        .map(|k| {
            let i = grid.axis_index(c, k);
            i.min(grid.counts()[k] - 1 - i)
        })
        .min()
        .unwrap_or(0)
}

impl DriftDecomposition {
    /// Classification, residual table and thresholds as CSV-like text.
    pub fn write_report<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "classification,{}", self.classification)?;
        writeln!(out, "quantity,value,threshold")?;
        writeln!(out, "j_norm,{},{}", self.j_norm, self.thresholds.j)?;
        writeln!(out, "div_j_norm,{},{}", self.div_j_norm, self.thresholds.div)?;
        writeln!(out, "orth_norm,{},{}", self.orth_norm, self.thresholds.orth)?;
        writeln!(out, "orth_max,{},{}", self.orth_max, self.thresholds.orth)?;
        writeln!(out, "reconstruction_residual,{},", self.reconstruction_residual)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaFamilyEntry {
    pub beta: f64,
    /// `∫|f_β − (f₁)^β/Z|`.
    pub l1_error: f64,
    /// `‖j_β − j₁‖/‖j₁‖` in `L²(f_β)`, relative to `‖b‖` under detailed balance.
    pub j_discrepancy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaFamilyReport {
    pub entries: Vec<BetaFamilyEntry>,
    pub max_l1_error: f64,
    pub max_j_discrepancy: f64,
}

/// Compares grid stationary states at each β with the tilted family
/// `(f₁^ss)^β / Z(β)` and the circulation `j` with its β = 1 value.
pub fn beta_family_check(model: &DiffusionModel, fss1: &GridField, betas: &[f64]) -> Result<BetaFamilyReport> {
    let grid = fss1.grid.clone();
    let unit = model.with_beta(1.0)?;
    let op1 = assemble_operator(&unit, &grid)?;
    let j1 = op1.current(fss1);
    let d1 = decompose(&unit, fss1, &j1, Thresholds::grid())?;
    if d1.classification == Classification::DrivenNESS {
        return Err(Error::Domain(format!(
            "the β-family relation requires a Maxwell–Boltzmann stationary state at β = 1 \
             (div {:.2e}, orth {:.2e}/{:.2e})",
            d1.div_j_norm, d1.orth_norm, d1.orth_max
        )));
    }
    let balanced = d1.classification == Classification::DetailedBalance;
    let drift = grid.sample_vector(|x, out| unit.drift_into(x, out));
    let mut entries = Vec::new();
    for &beta in betas {
        let mb = model.with_beta(beta)?;
        let (fb, jb) = if beta == 1.0 {
            (fss1.clone(), j1.clone())
        } else {
            let st = stationary_density(&assemble_operator(&mb, &grid)?)?;
            (st.density, st.current)
        };
        let tilted = fss1.map(|v| v.powf(beta)).normalized()?;
        let l1_error = compensated_sum(fb.values.iter().zip(&tilted.values).map(|(a, b)| (a - b).abs())) * grid.cell_volume();
        let fmax = fb.max();
        let (mut num, mut den) = (Vec::new(), Vec::new());
        for c in 0..grid.len() {
            if fb.values[c] < 1e-6 * fmax {
                continue;
            }
            let w = fb.values[c];
            for k in 0..grid.dim() {
                let a = jb.at(c)[k] / fb.values[c];
                let b = d1.j.at(c)[k];
                let r = if balanced { drift.at(c)[k] } else { b };
                num.push(w * (a - b).powi(2));
                den.push(w * r * r);
            }
        }
        let den = compensated_sum(den);
        let j_discrepancy = if den > 0.0 { (compensated_sum(num) / den).sqrt() } else { 0.0 };
        entries.push(BetaFamilyEntry { beta, l1_error, j_discrepancy });
    }
    let max_l1_error = entries.iter().map(|e| e.l1_error).fold(0.0, f64::max);
    let max_j_discrepancy = entries.iter().map(|e| e.j_discrepancy).fold(0.0, f64::max);
    Ok(BetaFamilyReport { entries, max_l1_error, max_j_discrepancy })
}

/// Trajectory of `ẋ = j(x)` with conservation diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct FlowResult {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `max |φ(x(t)) − φ(x₀)|`.
    pub phi_drift: f64,
    /// `max |∇·j|` along the path.
    pub divergence_max: f64,
    /// Set when the path left the domain; integration stops there.
    pub exit_time: Option<f64>,
}

/// Classical RK4 for `ẋ = j(x)`. `j` returns `None` outside its domain.
/// Every `record_every`-th state is kept.
pub fn integrate_flow(
    j: impl Fn(&[f64], &mut [f64]) -> bool,
    phi: impl Fn(&[f64]) -> Option<f64>,
    divergence: impl Fn(&[f64]) -> Option<f64>,
    x0: &[f64],
    dt: f64,
    t_final: f64,
    record_every: usize,
) -> Result<FlowResult> {
    if !(dt > 0.0 && t_final >= 0.0) {
        return Err(Error::Parameter("conservative flow needs dt > 0 and t_final ≥ 0".into()));
    }
    let n = x0.len();
    let phi0 = phi(x0).ok_or_else(|| Error::Domain("starting point lies outside the domain".into()))?;
    let steps = (t_final / dt).round() as usize;
    let record_every = record_every.max(1);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut y = vec![0.0; n];
    let mut out = FlowResult {
        times: vec![0.0],
        states: vec![x.clone()],
        phi_drift: 0.0,
        divergence_max: divergence(x0).unwrap_or(0.0).abs(),
        exit_time: None,
    };
    for s in 1..=steps {
        let mut inside = j(&x, &mut k1);
        for i in 0..n {
            y[i] = x[i] + 0.5 * dt * k1[i];
        }
        inside &= j(&y, &mut k2);
        for i in 0..n {
            y[i] = x[i] + 0.5 * dt * k2[i];
        }
        inside &= j(&y, &mut k3);
        for i in 0..n {
            y[i] = x[i] + dt * k3[i];
        }
        inside &= j(&y, &mut k4);
        let t = s as f64 * dt;
        if inside {
            for i in 0..n {
                y[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        match (inside, phi(&y)) {
            (true, Some(p)) => {
                x.copy_from_slice(&y);
                out.phi_drift = out.phi_drift.max((p - phi0).abs());
                if let Some(d) = divergence(&x) {
                    out.divergence_max = out.divergence_max.max(d.abs());
                }
            }
            _ => {
                out.exit_time = Some(t);
                out.times.push(t - dt);
                out.states.push(x.clone());
                return Ok(out);
            }
        }
        if s % record_every == 0 || s == steps {
            out.times.push(t);
            out.states.push(x.clone());
        }
    }
    Ok(out)
}

/// `ẋ = j(x)` with `j` and `φ` interpolated from the decomposition.
pub fn conservative_flow(decomp: &DriftDecomposition, x0: &[f64], dt: f64, t_final: f64) -> Result<FlowResult> {
    if !decomp.phi.grid.contains(x0) {
        return Err(Error::Domain("starting point lies outside the grid".into()));
    }
    let n = decomp.phi.grid.dim();
    let jac: Vec<CurrentField> = (0..n).map(|k| grid_gradient(&decomp.j.component(k))).collect();
    let div = GridField {
        grid: decomp.phi.grid.clone(),
        values: (0..decomp.phi.grid.len()).map(|c| (0..n).map(|k| jac[k].at(c)[k]).sum()).collect(),
    };
    integrate_flow(
        |x, out| match decomp.j.interpolate(x) {
            Some(v) => {
                out.copy_from_slice(&v);
                true
            }
            None => false,
        },
        |x| decomp.phi.interpolate(x),
        |x| div.interpolate(x),
        x0,
        dt,
        t_final,
        100,
    )
}

/// `ẋ = j(x)` with the model's analytic circulation and potential.
pub fn conservative_flow_analytic(model: &DiffusionModel, x0: &[f64], dt: f64, t_final: f64) -> Result<FlowResult> {
    let p = model.potential().ok_or_else(|| Error::Input(format!("model '{}' has no analytic potential", model.label())))?;
    let circ = model
        .refs()
        .circulation
        .clone()
        .ok_or_else(|| Error::Input(format!("model '{}' has no analytic circulation", model.label())))?;
    let n = model.dim();
    let divergence = |x: &[f64]| {
        let mut y = x.to_vec();
        let (mut up, mut dn) = (vec![0.0; n], vec![0.0; n]);
        let mut s = 0.0;
        for k in 0..n {
            let h = 1e-5 * (1.0 + x[k].abs());
            y[k] = x[k] + h;
            circ(&y, &mut up);
            y[k] = x[k] - h;
            circ(&y, &mut dn);
            y[k] = x[k];
            s += (up[k] - dn[k]) / (2.0 * h);
        }
        Some(s)
    };
    integrate_flow(
        |x, out| {
            circ(x, out);
            out.iter().all(|v| v.is_finite())
        },
        |x| Some(p.value(x)),
        divergence,
        x0,
        dt,
        t_final,
        100,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SegmentKind {
    /// `φ` increases: work done on the system.
    Driven,
    /// `φ` decreases spontaneously.
    Dissipative,
    /// Along a level set of `φ`.
    Conservative,
}

#[derive(Debug, Clone, Serialize)]
pub struct Segment {
    /// Index range of loop vertices `[start, end]`.
    pub start: usize,
    pub end: usize,
    pub dphi: f64,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleReport {
    /// One entry per polyline edge.
    pub edges: Vec<Segment>,
    /// Maximal runs of edges with the same kind, joined cyclically.
    pub steps: Vec<Segment>,
    /// `Σ Δφ` over the closed loop.
    pub total: f64,
}

impl CycleReport {
    pub fn count(&self, kind: SegmentKind) -> usize {
        self.steps.iter().filter(|s| s.kind == kind).count()
    }
}

/// Classifies the edges of a closed polyline by the change of `φ`.
pub fn four_step_cycle_report(decomp: &DriftDecomposition, polyline: &[Vec<f64>], tol: f64) -> Result<CycleReport> {
    cycle_report(|x| decomp.phi.interpolate(x), polyline, tol)
}

/// As [`four_step_cycle_report`] for any potential.
pub fn cycle_report(phi: impl Fn(&[f64]) -> Option<f64>, polyline: &[Vec<f64>], tol: f64) -> Result<CycleReport> {
    if polyline.len() < 3 {
        return Err(Error::Input("a loop needs at least three vertices".into()));
    }
    if polyline.first() != polyline.last() {
        return Err(Error::Input("loop is not closed: first and last vertices differ".into()));
    }
    let values: Vec<f64> = polyline
        .iter()
        .map(|x| phi(x).ok_or_else(|| Error::Domain(format!("loop vertex {x:?} lies outside the potential's domain"))))
        .collect::<Result<_>>()?;
    let kind = |d: f64| {
        if d > tol {
            SegmentKind::Driven
        } else if d < -tol {
            SegmentKind::Dissipative
        } else {
            SegmentKind::Conservative
        }
    };
    let edges: Vec<Segment> = values
        .windows(2)
        .enumerate()
        .map(|(i, w)| Segment { start: i, end: i + 1, dphi: w[1] - w[0], kind: kind(w[1] - w[0]) })
        .collect();
    let total = compensated_sum(edges.iter().map(|e| e.dphi));

    // rotate so that the first edge starts a run
    let m = edges.len();
    let first = (0..m).find(|&i| edges[i].kind != edges[(i + m - 1) % m].kind).unwrap_or(0);
    let mut steps: Vec<Segment> = Vec::new();
    for r in 0..m {
        let e = &edges[(first + r) % m];
        match steps.last_mut() {
            Some(s) if s.kind == e.kind => {
                s.end = e.end;
                s.dphi += e.dphi;
            }
            _ => steps.push(e.clone()),
        }
    }
    Ok(CycleReport { edges, steps, total })
}
