//! Finite-volume Fokker–Planck operator on a rectangular grid.
//!
//! Each interior face carries a flux `F = Σ_m w_m f_m` approximating
//! `b_k f − β⁻¹ Σ_l D_kl ∂_l f` in the direction of increasing axis `k`.
//! The normal part is Scharfetter–Gummel fitted: with `ε = β⁻¹D_kk` and
//! Péclet number `z`,
//!
//! ```text
//! F = (ε/h) [B(−z) f_lo − B(z) f_hi],   B(z) = z / (eᶻ − 1)
//! ```
//!
//! For models whose drift is exactly `−D∇φ` the Péclet number is taken as
//! `−β(φ_hi − φ_lo)`, which makes `e^{−βφ}` an exact discrete steady state
//! with zero flux on every face. Otherwise `z = b_k h / ε` at the face
//! centre. Faces with `ε = 0` carry a pure advective flux, reconstructed
//! with the third-order upwind-biased stencil `(−f_{i−1} + 5f_i + 2f_{i+1})/6`. Off-diagonal
//! diffusion adds averaged central differences of the transverse
//! derivatives. Boundary faces carry no flux.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::DiffusionModel;
use crate::numerics::{min_symmetric_eigenvalue, BandLu, CurrentField, Grid, GridField, SparseMatrix, TripletBuilder};

/// `z / (eᶻ − 1)`, continuous at 0.
#[inline]
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else if z > 700.0 {
        z * (-z).exp()
    } else {
        z / z.exp_m1()
    }
}

/// Interior faces of a grid with their flux stencils.
#[derive(Debug, Clone)]
struct Faces {
    lo: Vec<usize>,
    hi: Vec<usize>,
    axis: Vec<usize>,
    ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Faces {
    fn len(&self) -> usize {
        self.lo.len()
    }

    fn flux(&self, face: usize, f: &[f64]) -> f64 {
        (self.ptr[face]..self.ptr[face + 1]).map(|k| self.weights[k] * f[self.cols[k]]).sum()
    }
}

/// Assembled generator `L` with `df/dt = L f` on cell densities.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub matrix: SparseMatrix,
    pub grid: Grid,
    pub beta: f64,
    /// Always `"no-flux"`.
    pub boundary: &'static str,
    /// Faces whose diffusion vanished and were treated as pure advection.
    pub upwind_faces: usize,
    faces: Faces,
}

/// Sign and size of one face flux contribution, precomputed per face.
struct FaceStencil {
    entries: Vec<(usize, f64)>,
    upwind: bool,
}

pub fn assemble_operator(model: &DiffusionModel, grid: &Grid) -> Result<DiscreteOperator> {
    let n = model.dim();
    if grid.dim() != n {
        return Err(Error::Shape(format!("model has dimension {n} but grid has {}", grid.dim())));
    }
    check_diffusion_on_grid(model, grid)?;
    let beta = model.beta();
    let potential = model.potential().filter(|_| model.refs().gradient_drift).cloned();

    let mut face_list = Vec::new();
    for cell in 0..grid.len() {
        for k in 0..n {
            if let Some(up) = grid.neighbor(cell, k, true) {
                face_list.push((cell, up, k));
            }
        }
    }

    let stencils: Vec<FaceStencil> = face_list
        .par_iter()
        .map(|&(lo, hi, k)| {
            let mut x = grid.center(lo);
            let h = grid.spacing()[k];
            x[k] += 0.5 * h;
            let mut dbuf = vec![0.0; n * n];
            let mut b = vec![0.0; n];
            model.diffusion_into(&x, &mut dbuf);
            let eps = dbuf[k * n + k] / beta;
            let scale = dbuf.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            let mut entries = Vec::with_capacity(2);
            let mut upwind = false;
            if eps > 1e-14 * scale / beta {
                let z = match &potential {
                    Some(p) => -beta * (p.value(&grid.center(hi)) - p.value(&grid.center(lo))),
                    None => {
                        model.drift_into(&x, &mut b);
                        b[k] * h / eps
                    }
                };
                entries.push((lo, eps / h * bernoulli(-z)));
                entries.push((hi, -eps / h * bernoulli(z)));
            } else {
                upwind = true;
                model.drift_into(&x, &mut b);
                let v = b[k];
                // third-order upwind-biased reconstruction where the
                // far upstream cell exists, first-order next to walls
                let far = if v >= 0.0 { grid.neighbor(lo, k, false) } else { grid.neighbor(hi, k, true) };
                match far {
                    Some(u) if v >= 0.0 => {
                        entries.extend([(u, -v / 6.0), (lo, 5.0 * v / 6.0), (hi, v / 3.0)]);
                    }
                    Some(u) => {
                        entries.extend([(lo, v / 3.0), (hi, 5.0 * v / 6.0), (u, -v / 6.0)]);
                    }
                    None => entries.extend([(lo, v.max(0.0)), (hi, v.min(0.0))]),
                }
            }
            for l in (0..n).filter(|&l| l != k) {
                let c = -dbuf[k * n + l] / beta;
                if c == 0.0 {
                    continue;
                }
                // ∂_l f at the face: mean of the transverse differences in both cells
                for cell in [lo, hi] {
                    let (plus, pw) = match grid.neighbor(cell, l, true) {
                        Some(p) => (p, 1.0),
                        None => (cell, 0.0),
                    };
                    let (minus, mw) = match grid.neighbor(cell, l, false) {
                        Some(m) => (m, 1.0),
                        None => (cell, 0.0),
                    };
                    let span = (pw + mw) * grid.spacing()[l];
                    entries.push((plus, 0.5 * c / span));
                    entries.push((minus, -0.5 * c / span));
                }
            }
            FaceStencil { entries, upwind }
        })
        .collect();

    let mut faces = Faces {
        lo: Vec::with_capacity(face_list.len()),
        hi: Vec::with_capacity(face_list.len()),
        axis: Vec::with_capacity(face_list.len()),
        ptr: vec![0],
        cols: Vec::new(),
        weights: Vec::new(),
    };
    let mut upwind_faces = 0;
    let mut t = TripletBuilder::new(grid.len());
    for (&(lo, hi, k), st) in face_list.iter().zip(&stencils) {
        upwind_faces += st.upwind as usize;
        let inv_h = 1.0 / grid.spacing()[k];
        for &(c, w) in &st.entries {
            if w != 0.0 {
                t.add(lo, c, -w * inv_h);
                t.add(hi, c, w * inv_h);
                faces.cols.push(c);
                faces.weights.push(w);
            }
        }
        faces.lo.push(lo);
        faces.hi.push(hi);
        faces.axis.push(k);
        faces.ptr.push(faces.cols.len());
    }
    Ok(DiscreteOperator { matrix: t.build(), grid: grid.clone(), beta, boundary: "no-flux", upwind_faces, faces })
}

fn check_diffusion_on_grid(model: &DiffusionModel, grid: &Grid) -> Result<()> {
    let n = model.dim();
    let diagonal = model.has_diagonal_diffusion();
    (0..grid.len()).into_par_iter().try_for_each(|cell| {
        let x = grid.center(cell);
        let d = model.diffusion(&x);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("diffusion is not finite at {x:?}")));
        }
        let bad = if diagonal {
            (0..n).any(|k| d[(k, k)] < 0.0)
        } else {
            min_symmetric_eigenvalue(&d) < -1e-12 * (1.0 + d.norm())
        };
        if bad {
            return Err(Error::Parameter(format!("diffusion is not positive semi-definite at {x:?}")));
        }
        Ok(())
    })
}

impl DiscreteOperator {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.len() == 0
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.matrix.matvec(f)
    }

    /// Flux through every interior face, in face order.
    pub fn face_fluxes(&self, f: &GridField) -> Vec<f64> {
        (0..self.faces.len()).map(|i| self.faces.flux(i, &f.values)).collect()
    }

    /// Cell-centred current: per axis, the mean of the two bounding face
    /// fluxes (boundary faces contribute zero).
    pub fn current(&self, f: &GridField) -> CurrentField {
        let n = self.grid.dim();
        let mut j = CurrentField::zeros(&self.grid);
        for (face, flux) in self.face_fluxes(f).into_iter().enumerate() {
            let k = self.faces.axis[face];
            j.values[self.faces.lo[face] * n + k] += 0.5 * flux;
            j.values[self.faces.hi[face] * n + k] += 0.5 * flux;
        }
        j
    }

    /// Discrete divergence of the face fluxes, `−(L f)` per cell.
    pub fn flux_divergence(&self, f: &GridField) -> GridField {
        let mut div = vec![0.0; self.len()];
        for (face, flux) in self.face_fluxes(f).into_iter().enumerate() {
            let inv_h = 1.0 / self.grid.spacing()[self.faces.axis[face]];
            div[self.faces.lo[face]] += flux * inv_h;
            div[self.faces.hi[face]] -= flux * inv_h;
        }
        GridField { grid: self.grid.clone(), values: div }
    }

    /// Largest `|Σ_i L_ij|` over columns relative to the largest entry.
    pub fn mass_defect(&self) -> f64 {
        let scale = self.matrix.max_abs().max(f64::MIN_POSITIVE);
        self.matrix.column_sums().iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale
    }

    /// Number of closed communicating classes of the rate graph.
    pub fn closed_classes(&self) -> usize {
        closed_class_count(&self.matrix)
    }
}

/// Counts strongly connected components with no edges leaving them,
/// where `L_ij > 0` is an edge `j → i`.
fn closed_class_count(l: &SparseMatrix) -> usize {
    let n = l.dim();
    let lt = l.transpose();
    // successors of j: rows i with L_ij > 0, i.e. row j of Lᵀ
    let succ = |j: usize| lt.row(j).filter(move |&(i, v)| i != j && v > 0.0).map(|(i, _)| i);
    let pred = |i: usize| l.row(i).filter(move |&(j, v)| j != i && v > 0.0).map(|(j, _)| j);

    // Kosaraju, iterative
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![(s, succ(s).collect::<Vec<_>>().into_iter())];
        while let Some((v, it)) = stack.last_mut() {
            match it.next() {
                Some(w) if !seen[w] => {
                    seen[w] = true;
                    let next = succ(w).collect::<Vec<_>>().into_iter();
                    stack.push((w, next));
                }
                Some(_) => {}
                None => {
                    order.push(*v);
                    stack.pop();
                }
            }
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for &s in order.iter().rev() {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = count;
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            for w in pred(v) {
                if comp[w] == usize::MAX {
                    comp[w] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }
    let mut leaves = vec![true; count];
    for j in 0..n {
        for i in succ(j) {
            if comp[i] != comp[j] {
                leaves[comp[j]] = false;
            }
        }
    }
    leaves.iter().filter(|&&b| b).count()
}

/// Diagnostics of one implicit-Euler run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvolveDiagnostics {
    /// Per step: `|∫f − 1|` before renormalization.
    pub mass_drift: Vec<f64>,
    /// Per step: mass removed by clipping negative values.
    pub clipped_mass: Vec<f64>,
    /// Cells below −1e−12 over the whole run.
    pub clipped_cells: usize,
}

/// Implicit Euler propagator `(I − dt·L) f_{k+1} = f_k` with a single
/// factorization.
#[derive(Debug, Clone)]
pub struct Evolver {
    lu: BandLu,
    grid: Grid,
    pub dt: f64,
    pub diagnostics: EvolveDiagnostics,
}

impl Evolver {
    pub fn new(op: &DiscreteOperator, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
        }
        let system = op.matrix.linear_combination(-dt, &op.matrix, 0.0).shifted(1.0);
        let lu = BandLu::factor(&system)
            .map_err(|e| Error::Numerical(format!("implicit Euler system (dt = {dt}): {e}")))?;
        Ok(Self { lu, grid: op.grid.clone(), dt, diagnostics: EvolveDiagnostics::default() })
    }

    pub fn step(&mut self, f: &mut GridField) -> Result<()> {
        self.lu.solve_in_place(&mut f.values);
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite density after implicit Euler step".into()));
        }
        let mass = f.integrate();
        let cell = self.grid.cell_volume();
        let mut clipped = 0.0;
        for v in f.values.iter_mut() {
            if *v < 0.0 {
                if *v < -1e-12 {
                    self.diagnostics.clipped_cells += 1;
                }
                clipped -= *v * cell;
                *v = 0.0;
            }
        }
        let total = f.integrate();
        if !(total > 0.0) {
            return Err(Error::Numerical("density vanished during evolution".into()));
        }
        f.values.iter_mut().for_each(|v| *v /= total);
        self.diagnostics.mass_drift.push((mass - 1.0).abs());
        self.diagnostics.clipped_mass.push(clipped);
        Ok(())
    }
}

/// `steps` implicit-Euler steps from `f0`; the result starts with `f0`.
pub fn evolve(op: &DiscreteOperator, f0: &GridField, dt: f64, steps: usize) -> Result<(Vec<GridField>, EvolveDiagnostics)> {
    evolve_strided(op, f0, dt, steps, 1)
}

/// As [`evolve`], keeping every `stride`-th iterate.
pub fn evolve_strided(
    op: &DiscreteOperator,
    f0: &GridField,
    dt: f64,
    steps: usize,
    stride: usize,
) -> Result<(Vec<GridField>, EvolveDiagnostics)> {
    if !f0.grid.same_shape(&op.grid) {
        return Err(Error::Shape("initial density is not on the operator grid".into()));
    }
    check_density(f0)?;
    let stride = stride.max(1);
    let mut ev = Evolver::new(op, dt)?;
    let mut f = f0.clone();
    let mut out = vec![f.clone()];
    for k in 1..=steps {
        ev.step(&mut f)?;
        if k % stride == 0 {
            out.push(f.clone());
        }
    }
    Ok((out, ev.diagnostics))
}

fn check_density(f: &GridField) -> Result<()> {
    if f.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain("density must be finite and non-negative".into()));
    }
    let mass = f.integrate();
    if (mass - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!("density integrates to {mass}, not 1")));
    }
    Ok(())
}

/// Stationary density and current.
#[derive(Debug, Clone)]
pub struct Stationary {
    pub density: GridField,
    pub current: CurrentField,
    /// `max |∇·J|` over cells.
    pub divergence_max: f64,
    pub iterations: usize,
}

/// Null vector of `L` by shifted inverse iteration, normalized to a
/// density, and its face-flux current.
pub fn stationary_density(op: &DiscreteOperator) -> Result<Stationary> {
    stationary_density_from(op, None)
}

/// As [`stationary_density`], starting from `guess` (for instance the
/// analytic `e^{−βφ}` of a gradient model).
pub fn stationary_density_from(op: &DiscreteOperator, guess: Option<&GridField>) -> Result<Stationary> {
    let classes = op.closed_classes();
    if classes != 1 {
        return Err(Error::Reducible(format!("{classes} closed classes: stationary density is not unique")));
    }
    let n = op.len();
    let scale = op.matrix.max_abs();
    let shift = 1e-6 * scale;
    let lu = BandLu::factor(&op.matrix.shifted(-shift))?;
    let mut x: Vec<f64> = match guess {
        Some(g) if g.grid.same_shape(&op.grid) => g.values.clone(),
        _ => vec![1.0; n],
    };
    let mut iterations = 0;
    let mut prev_residual = f64::INFINITY;
    for it in 1..=200 {
        iterations = it;
        lu.solve_in_place(&mut x);
        let s: f64 = x.iter().sum();
        if !(s.is_finite() && s != 0.0) {
            return Err(Error::Numerical("inverse iteration broke down".into()));
        }
        x.iter_mut().for_each(|v| *v /= s);
        let r = op.apply(&x);
        let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let residual = r.iter().fold(0.0f64, |m, v| m.max(v.abs())) / (scale * xmax);
        if residual < 1e-15 || (it > 3 && residual >= 0.5 * prev_residual) {
            break;
        }
        prev_residual = residual;
    }
    let mut density = GridField { grid: op.grid.clone(), values: x };
    let mass = density.integrate();
    density.values.iter_mut().for_each(|v| *v /= mass);
    let current = op.current(&density);
    let divergence_max = op.flux_divergence(&density).values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Stationary { density, current, divergence_max, iterations })
}

/// `L = L_S + L_A` in the inner product weighted by `W = diag(w / f^ss)`.
#[derive(Debug, Clone)]
pub struct OperatorSplit {
    pub ls: SparseMatrix,
    pub la: SparseMatrix,
    /// `‖W L_S − (W L_S)ᵀ‖_F / ‖W L‖_F`.
    pub sym_residual: f64,
    /// `‖W L_A + (W L_A)ᵀ‖_F / ‖W L‖_F`.
    pub antisym_residual: f64,
    /// `‖L − L_S − L_A‖_F / ‖L‖_F`.
    pub recomposition_residual: f64,
    pub la_norm: f64,
    pub l_norm: f64,
}

impl OperatorSplit {
    /// `‖L_A‖_F / ‖L‖_F`, zero exactly when the discrete dynamics is reversible.
    pub fn asymmetry_ratio(&self) -> f64 {
        self.la_norm / self.l_norm
    }
}

pub fn weighted_adjoint_split(op: &DiscreteOperator, fss: &GridField) -> Result<OperatorSplit> {
    if !fss.grid.same_shape(&op.grid) {
        return Err(Error::Shape("stationary density is not on the operator grid".into()));
    }
    if fss.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("weighted split needs a strictly positive stationary density".into()));
    }
    let w = op.grid.cell_volume();
    let weight: Vec<f64> = fss.values.iter().map(|f| w / f).collect();
    let inv_weight: Vec<f64> = weight.iter().map(|v| 1.0 / v).collect();
    let l = &op.matrix;
    let adjoint = l.transpose().scale(&inv_weight, &weight);
    let ls = l.linear_combination(0.5, &adjoint, 0.5);
    let la = l.linear_combination(0.5, &adjoint, -0.5);

    let ones = vec![1.0; l.dim()];
    let wl_norm = l.scale(&weight, &ones).frobenius_norm();
    let wls = ls.scale(&weight, &ones);
    let wla = la.scale(&weight, &ones);
    let sym_residual = wls.linear_combination(1.0, &wls.transpose(), -1.0).frobenius_norm() / wl_norm;
    let antisym_residual = wla.linear_combination(1.0, &wla.transpose(), 1.0).frobenius_norm() / wl_norm;
    let l_norm = l.frobenius_norm();
    let recomposition_residual = ls.linear_combination(1.0, &la, 1.0).linear_combination(1.0, l, -1.0).frobenius_norm() / l_norm;
    let la_norm = la.frobenius_norm();
    Ok(OperatorSplit { ls, la, sym_residual, antisym_residual, recomposition_residual, la_norm, l_norm })
}

/// One CSV row per cell: coordinates `x0..`, `f`, then `J0..` when a
/// current is given.
pub fn write_snapshot_csv<W: Write>(mut out: W, f: &GridField, current: Option<&CurrentField>) -> std::io::Result<()> {
    let n = f.grid.dim();
    let mut header: Vec<String> = (0..n).map(|k| format!("x{k}")).collect();
    header.push("f".into());
    if current.is_some() {
        header.extend((0..n).map(|k| format!("J{k}")));
    }
    writeln!(out, "{}", header.join(","))?;
    let mut x = vec![0.0; n];
    for cell in 0..f.grid.len() {
        f.grid.center_into(cell, &mut x);
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.push(f.values[cell].to_string());
        if let Some(j) = current {
            row.extend(j.at(cell).iter().map(|v| v.to_string()));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
