//! Euler–Maruyama ensembles and the driven pendulum energy ledger.
//!
//! Paths step as `X ← X + b(X)dt + (2dt/β)^{1/2} σ(X) ξ` with `σσᵀ = D`
//! the PSD square root, so degenerate (e.g. velocity-only) noise is fine.
//! Path `p` draws from `RngStream::new(seed, p)`; statistics are reduced
//! in path order, so results do not depend on the thread count.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DiffusionModel;
use crate::numerics::{compensated_sum, grid_gradient, psd_sqrt, CurrentField, Grid, GridField, Matrix, RngStream};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    Point(Vec<f64>),
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

impl InitialCondition {
    fn dim(&self) -> usize {
        match self {
            Self::Point(x) => x.len(),
            Self::Gaussian { mean, .. } => mean.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_paths: usize,
    pub dt: f64,
    pub t_final: f64,
    pub initial: InitialCondition,
    pub seed: u64,
    /// Times at which statistics are taken; empty means `[t_final]`.
    /// Each is rounded to the nearest step.
    #[serde(default)]
    pub record_times: Vec<f64>,
}

impl EnsembleSpec {
    pub fn new(n_paths: usize, dt: f64, t_final: f64, initial: InitialCondition, seed: u64) -> Self {
        Self { n_paths, dt, t_final, initial, seed, record_times: Vec::new() }
    }

    pub fn with_record_times(mut self, times: Vec<f64>) -> Self {
        self.record_times = times;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::Parameter("n_paths must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.t_final >= self.dt) {
            return Err(Error::Parameter(format!("need 0 < dt ≤ t_final, got dt={} t_final={}", self.dt, self.t_final)));
        }
        if let Some(t) = self.record_times.iter().find(|t| !(**t >= 0.0 && **t <= self.t_final * (1.0 + 1e-12))) {
            return Err(Error::Parameter(format!("record time {t} lies outside [0, t_final]")));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    fn record_steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = if self.record_times.is_empty() {
            vec![self.steps()]
        } else {
            self.record_times.iter().map(|t| (t / self.dt).round() as usize).collect()
        };
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Ensemble positions at the recorded times.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub dim: usize,
    pub n_paths: usize,
    pub times: Vec<f64>,
    /// `samples[t]` holds `n_paths × dim` values, path-major.
    pub samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    /// Unbiased sample covariance, row-major.
    pub covariance: Vec<Vec<f64>>,
    /// Standard errors of the mean.
    pub mean_se: Vec<Vec<f64>>,
    /// Standard errors of the covariance entries under a Gaussian approximation.
    pub covariance_se: Vec<Vec<f64>>,
}

/// Runs the ensemble and returns positions at the recorded times.
pub fn simulate(model: &DiffusionModel, spec: &EnsembleSpec) -> Result<Ensemble> {
    spec.validate()?;
    let n = model.dim();
    if spec.initial.dim() != n {
        return Err(Error::Shape(format!("initial condition has dimension {} but model has {n}", spec.initial.dim())));
    }
    let init_factor = match &spec.initial {
        InitialCondition::Gaussian { cov, .. } => {
            let rows = cov.iter().flatten().copied().collect::<Vec<_>>();
            if rows.len() != n * n {
                return Err(Error::Shape("initial covariance must be n×n".into()));
            }
            Some(psd_sqrt(&Matrix::from_row_slice(n, n, &rows))?)
        }
        InitialCondition::Point(_) => None,
    };
    let noise = NoiseFactor::new(model)?;
    let scale = (2.0 * spec.dt / model.beta()).sqrt();
    let steps = spec.steps();
    let record = spec.record_steps();

    let paths: Vec<Result<Vec<f64>>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = RngStream::new(spec.seed, p as u64).rng();
            let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
            let mut x = match (&spec.initial, &init_factor) {
                (InitialCondition::Gaussian { mean, .. }, Some(s)) => {
                    let z: Vec<f64> = (0..n).map(|_| normal()).collect();
                    (0..n).map(|i| mean[i] + (0..n).map(|k| s[(i, k)] * z[k]).sum::<f64>()).collect()
                }
                (InitialCondition::Point(x0), _) => x0.clone(),
                _ => unreachable!(),
            };
            let mut out = Vec::with_capacity(record.len() * n);
            let mut b = vec![0.0; n];
            let mut z = vec![0.0; n];
            let mut sigma = vec![0.0; n * n];
            let mut next = 0;
            for s in 0..=steps {
                while next < record.len() && record[next] == s {
                    out.extend_from_slice(&x);
                    next += 1;
                }
                if s == steps {
                    break;
                }
                model.drift_into(&x, &mut b);
                for v in z.iter_mut() {
                    *v = normal();
                }
                let sig = noise.at(model, &x, &mut sigma)?;
                for i in 0..n {
                    let kick: f64 = (0..n).map(|k| sig[i * n + k] * z[k]).sum();
                    x[i] += b[i] * spec.dt + scale * kick;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { path: p, step: s + 1 });
                }
            }
            Ok(out)
        })
        .collect();

    let mut samples = vec![Vec::with_capacity(spec.n_paths * n); record.len()];
    for path in paths {
        let path = path?;
        for (t, chunk) in path.chunks_exact(n).enumerate() {
            samples[t].extend_from_slice(chunk);
        }
    }
    Ok(Ensemble {
        dim: n,
        n_paths: spec.n_paths,
        times: record.iter().map(|&s| s as f64 * spec.dt).collect(),
        samples,
    })
}

/// `σ` with `σσᵀ = D`, cached when `D` is constant.
enum NoiseFactor {
    Constant(Vec<f64>),
    Diagonal,
    General,
}

impl NoiseFactor {
    fn new(model: &DiffusionModel) -> Result<Self> {
        if let Some(d) = model.constant_diffusion() {
            let s = psd_sqrt(d)?;
            let n = model.dim();
            return Ok(Self::Constant((0..n * n).map(|i| s[(i / n, i % n)]).collect()));
        }
        Ok(if model.has_diagonal_diffusion() { Self::Diagonal } else { Self::General })
    }

    fn at<'a>(&'a self, model: &DiffusionModel, x: &[f64], buf: &'a mut [f64]) -> Result<&'a [f64]> {
        let n = model.dim();
        match self {
            Self::Constant(s) => Ok(s),
            Self::Diagonal => {
                model.diffusion_into(x, buf);
                for i in 0..n {
                    for k in 0..n {
                        buf[i * n + k] = if i == k { buf[i * n + i].max(0.0).sqrt() } else { 0.0 };
                    }
                }
                Ok(buf)
            }
            Self::General => {
                model.diffusion_into(x, buf);
                let s = psd_sqrt(&Matrix::from_row_slice(n, n, buf))?;
                for i in 0..n * n {
                    buf[i] = s[(i / n, i % n)];
                }
                Ok(buf)
            }
        }
    }
}

impl Ensemble {
    pub fn snapshot(&self, t: usize) -> &[f64] {
        &self.samples[t]
    }

    /// Means and covariances in path order.
    pub fn stats(&self) -> EnsembleStats {
        let n = self.dim;
        let np = self.n_paths as f64;
        let mut out = EnsembleStats {
            times: self.times.clone(),
            mean: Vec::new(),
            covariance: Vec::new(),
            mean_se: Vec::new(),
            covariance_se: Vec::new(),
        };
        for s in &self.samples {
            let mean: Vec<f64> = (0..n).map(|i| compensated_sum(s.iter().skip(i).step_by(n).copied()) / np).collect();
            let mut cov = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let c = compensated_sum(s.chunks_exact(n).map(|x| (x[i] - mean[i]) * (x[j] - mean[j])))
                        / (np - 1.0).max(1.0);
                    cov[i * n + j] = c;
                    cov[j * n + i] = c;
                }
            }
            out.mean_se.push((0..n).map(|i| (cov[i * n + i] / np).sqrt()).collect());
            // Var(Ŝ_ij) ≈ (S_ij² + S_ii S_jj)/(N − 1) for Gaussian data
            out.covariance_se.push(
                (0..n * n)
                    .map(|k| {
                        let (i, j) = (k / n, k % n);
                        ((cov[k] * cov[k] + cov[i * n + i] * cov[j * n + j]) / (np - 1.0).max(1.0)).sqrt()
                    })
                    .collect(),
            );
            out.mean.push(mean);
            out.covariance.push(cov);
        }
        out
    }
}

/// Normalized histogram of a snapshot. Samples outside the grid are
/// counted in the returned fraction and excluded from the density.
pub fn histogram(samples: &[f64], grid: &Grid) -> (GridField, f64) {
    let counts = cell_counts(samples, grid);
    let total = (samples.len() / grid.dim()) as f64;
    let inside: usize = counts.iter().sum();
    let vol = grid.cell_volume();
    let values = counts.iter().map(|&c| c as f64 / (total * vol)).collect();
    (GridField { grid: grid.clone(), values }, 1.0 - inside as f64 / total)
}

fn cell_counts(samples: &[f64], grid: &Grid) -> Vec<usize> {
    let mut counts = vec![0usize; grid.len()];
    for x in samples.chunks_exact(grid.dim()) {
        if let Some(c) = grid.locate(x) {
            counts[c] += 1;
        }
    }
    counts
}

/// Expected-size bound `Σ_c (p_c(1 − p_c)/N)^{1/2}` on the L¹ distance of
/// an `N`-sample histogram from the density `f` it samples.
pub fn histogram_l1_bound(f: &GridField, n_samples: usize) -> f64 {
    let vol = f.grid.cell_volume();
    let n = n_samples as f64;
    compensated_sum(f.values.iter().map(|v| {
        let p = (v * vol).clamp(0.0, 1.0);
        (p * (1.0 - p) / n).sqrt()
    }))
}

/// `∫|f − g|` by grid quadrature.
pub fn l1_distance(f: &GridField, g: &GridField) -> f64 {
    compensated_sum(f.values.iter().zip(&g.values).map(|(a, b)| (a - b).abs())) * f.grid.cell_volume()
}

/// Flux-identity current estimate with per-cell standard errors.
#[derive(Debug, Clone)]
pub struct CurrentEstimate {
    /// `NaN` in cells without samples.
    pub current: CurrentField,
    pub std_error: CurrentField,
    pub counts: Vec<usize>,
    pub density: GridField,
}

impl CurrentEstimate {
    pub fn is_missing(&self, cell: usize) -> bool {
        self.counts[cell] == 0
    }
}

/// `Ĵ = b f̂ − β⁻¹∇·(D f̂)` from one snapshot: the advective part averages
/// `b` over the samples in each cell, the diffusive part differences
/// `D f̂` on the histogram.
///
/// The estimator is a sample mean of a per-sample contribution, so its
/// standard error follows from per-cell sums of `b` and `b²`.
pub fn estimate_current(samples: &[f64], grid: &Grid, model: &DiffusionModel) -> Result<CurrentEstimate> {
    let n = grid.dim();
    if model.dim() != n || samples.len() % n != 0 {
        return Err(Error::Shape("samples, grid and model disagree in dimension".into()));
    }
    let total = samples.len() / n;
    if total == 0 {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let cells = grid.len();
    let mut counts = vec![0usize; cells];
    let mut s1 = vec![0.0; cells * n];
    let mut s2 = vec![0.0; cells * n];
    let mut b = vec![0.0; n];
    for x in samples.chunks_exact(n) {
        if let Some(c) = grid.locate(x) {
            counts[c] += 1;
            model.drift_into(x, &mut b);
            for k in 0..n {
                s1[c * n + k] += b[k];
                s2[c * n + k] += b[k] * b[k];
            }
        }
    }
    let np = total as f64;
    let vol = grid.cell_volume();
    let beta = model.beta();
    let diff: Vec<f64> = (0..cells)
        .flat_map(|c| {
            let mut d = vec![0.0; n * n];
            model.diffusion_into(&grid.center(c), &mut d);
            d
        })
        .collect();

    let mut current = CurrentField::zeros(grid);
    let mut se = CurrentField::zeros(grid);
    let mut coeffs: Vec<(usize, f64)> = Vec::new();
    for c in 0..cells {
        if counts[c] == 0 {
            current.at_mut(c).fill(f64::NAN);
            se.at_mut(c).fill(f64::NAN);
            continue;
        }
        for k in 0..n {
            // Ĵ_k(c) = (S1_k(c) + Σ_m a_m count_m) / (N vol)
            coeffs.clear();
            for l in 0..n {
                let up = grid.neighbor(c, l, true);
                let dn = grid.neighbor(c, l, false);
                let span = grid.spacing()[l] * (up.is_some() as usize + dn.is_some() as usize) as f64;
                let m_up = up.unwrap_or(c);
                let m_dn = dn.unwrap_or(c);
                coeffs.push((m_up, -diff[m_up * n * n + k * n + l] / (beta * span)));
                coeffs.push((m_dn, diff[m_dn * n * n + k * n + l] / (beta * span)));
            }
            let a_self: f64 = coeffs.iter().filter(|(m, _)| *m == c).map(|(_, a)| a).sum();
            let mut first = s1[c * n + k] + a_self * counts[c] as f64;
            let mut second = s2[c * n + k] + 2.0 * a_self * s1[c * n + k] + a_self * a_self * counts[c] as f64;
            for &(m, a) in coeffs.iter().filter(|(m, _)| *m != c) {
                first += a * counts[m] as f64;
                second += a * a * counts[m] as f64;
            }
            let mean = first / (np * vol);
            let var = (second / (np * vol * vol) - mean * mean).max(0.0);
            current.at_mut(c)[k] = mean;
            se.at_mut(c)[k] = (var / np).sqrt();
        }
    }
    let density = GridField { grid: grid.clone(), values: counts.iter().map(|&c| c as f64 / (np * vol)).collect() };
    Ok(CurrentEstimate { current, std_error: se, counts, density })
}

/// Differenced-histogram current without error bars, for comparison with
/// grid solutions: `b f̂ − β⁻¹∇·(D f̂)` with `b` at cell centres.
pub fn histogram_current(density: &GridField, model: &DiffusionModel) -> CurrentField {
    let grid = &density.grid;
    let n = grid.dim();
    let mut out = grid.sample_vector(|x, o| model.drift_into(x, o));
    let mut d = vec![0.0; n * n];
    let mut cols: Vec<GridField> = vec![GridField::constant(grid, 0.0); n * n];
    for c in 0..grid.len() {
        model.diffusion_into(&grid.center(c), &mut d);
        for (i, col) in cols.iter_mut().enumerate() {
            col.values[c] = d[i] * density.values[c];
        }
        for v in out.at_mut(c) {
            *v *= density.values[c];
        }
    }
    for k in 0..n {
        for l in 0..n {
            let g = grid_gradient(&cols[k * n + l]);
            for c in 0..grid.len() {
                out.at_mut(c)[k] -= g.at(c)[l] / model.beta();
            }
        }
    }
    out
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"DTSNAP01";

/// Binary snapshot: the 8-byte magic `DTSNAP01`, then `dim` and `n_paths`
/// as little-endian u64, the time as little-endian f64, then `n_paths`
/// rows of `dim` little-endian f64.
pub fn write_snapshot_binary<W: Write>(mut out: W, time: f64, dim: usize, samples: &[f64]) -> std::io::Result<()> {
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&(dim as u64).to_le_bytes())?;
    out.write_all(&((samples.len() / dim.max(1)) as u64).to_le_bytes())?;
    out.write_all(&time.to_le_bytes())?;
    for v in samples {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Inverse of [`write_snapshot_binary`]: `(time, dim, samples)`.
pub fn read_snapshot_binary<R: Read>(mut input: R) -> Result<(f64, usize, Vec<f64>)> {
    let io = |e: std::io::Error| Error::Input(format!("snapshot read failed: {e}"));
    let mut head = [0u8; 32];
    input.read_exact(&mut head).map_err(io)?;
    if &head[..8] != SNAPSHOT_MAGIC {
        return Err(Error::Input("not a snapshot file (bad magic)".into()));
    }
    let word = |i: usize| <[u8; 8]>::try_from(&head[i..i + 8]).unwrap();
    let dim = u64::from_le_bytes(word(8)) as usize;
    let rows = u64::from_le_bytes(word(16)) as usize;
    let time = f64::from_le_bytes(word(24));
    let mut body = vec![0u8; dim * rows * 8];
    input.read_exact(&mut body).map_err(io)?;
    let samples = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((time, dim, samples))
}

impl EnsembleStats {
    /// Columns `t, mean_i…, cov_ij…` (row-major covariance).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.mean.first().map_or(0, Vec::len);
        let mut head = vec!["t".to_string()];
        head.extend((0..n).map(|i| format!("mean_{i}")));
        head.extend((0..n * n).map(|k| format!("cov_{}{}", k / n, k % n)));
        writeln!(out, "{}", head.join(","))?;
        for (t, (m, c)) in self.times.iter().zip(self.mean.iter().zip(&self.covariance)) {
            let row: Vec<String> = std::iter::once(*t).chain(m.iter().copied()).chain(c.iter().copied()).map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Parameters of `m ẍ = −k sin x − η ẋ + ξ(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumSpec {
    pub mass: f64,
    pub stiffness: f64,
    pub eta: f64,
    pub x0: f64,
    pub v0: f64,
    pub dt: f64,
    pub t_final: f64,
    /// Optional additive white-noise amplitude on top of the drive.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Keep every `record_every`-th step.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    100
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PendulumLedger {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// `H = ½mv² + k(1 − cos x)`.
    pub energy: Vec<f64>,
    /// `∫ ẋ ξ dt`.
    pub input: Vec<f64>,
    /// `∫ η ẋ² dt`.
    pub dissipation: Vec<f64>,
    /// `|H(t) − H(0) − input + dissipation|`.
    pub residual: Vec<f64>,
    /// `input(T)/T` and `dissipation(T)/T`.
    pub mean_input_rate: f64,
    pub mean_dissipation_rate: f64,
}

impl PendulumLedger {
    pub const CSV_COLUMNS: [&'static str; 7] = ["t", "x", "v", "H", "input", "dissipation", "residual"];

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_COLUMNS.join(","))?;
        for i in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.times[i], self.x[i], self.v[i], self.energy[i], self.input[i], self.dissipation[i], self.residual[i]
            )?;
        }
        Ok(())
    }
}

/// Integrates the pendulum with the discrete-gradient midpoint rule
///
/// ```text
/// x' = x + dt v̄,   m(v' − v) = dt (−Ṽ(x, x') − η v̄ + ξ),   v̄ = (v + v')/2
/// ```
///
/// where `Ṽ = (V(x') − V(x))/(x' − x)`. Per step this gives
/// `ΔH = dt ξ v̄ − dt η v̄²` exactly, so the ledger closes to round-off
/// and `H` is conserved without drive or damping.
pub fn driven_pendulum_ledger(spec: &PendulumSpec, drive: impl Fn(f64) -> f64) -> Result<PendulumLedger> {
    let PendulumSpec { mass: m, stiffness: k, eta, dt, .. } = *spec;
    if !(m > 0.0 && k > 0.0 && eta >= 0.0) {
        return Err(Error::Parameter("pendulum needs m > 0, k > 0, η ≥ 0".into()));
    }
    if !(dt > 0.0 && spec.t_final >= dt) {
        return Err(Error::Parameter("pendulum needs 0 < dt ≤ t_final".into()));
    }
    let steps = (spec.t_final / dt).round() as usize;
    let every = spec.record_every.max(1);
    let energy = |x: f64, v: f64| 0.5 * m * v * v + k * (1.0 - x.cos());
    // (V(b) − V(a))/(b − a) without cancellation
    let slope = |a: f64, b: f64| {
        let h = 0.5 * (b - a);
        let sinc = if h.abs() < 1e-8 { 1.0 - h * h / 6.0 } else { h.sin() / h };
        k * (0.5 * (a + b)).sin() * sinc
    };
    let mut normals = RngStream::new(spec.seed, 0).normals();
    let (mut x, mut v) = (spec.x0, spec.v0);
    let h0 = energy(x, v);
    let (mut input, mut diss) = (Vec::with_capacity(steps / every + 2), Vec::with_capacity(steps / every + 2));
    let (mut acc_in, mut acc_diss) = (0.0f64, 0.0f64);
    let mut led = PendulumLedger::default();
    let mut push = |led: &mut PendulumLedger, t: f64, x: f64, v: f64, i: f64, d: f64| {
        let h = energy(x, v);
        led.times.push(t);
        led.x.push(x);
        led.v.push(v);
        led.energy.push(h);
        led.residual.push((h - h0 - i + d).abs());
        input.push(i);
        diss.push(d);
    };
    push(&mut led, 0.0, x, v, 0.0, 0.0);
    for s in 0..steps {
        let t_mid = (s as f64 + 0.5) * dt;
        let mut xi = drive(t_mid);
        if spec.noise != 0.0 {
            xi += spec.noise * normals.next().unwrap() / dt.sqrt();
        }
        let mut u = v;
        for _ in 0..50 {
            let next = (2.0 * m * v - dt * slope(x, x + dt * u) + dt * xi) / (2.0 * m + dt * eta);
            let done = (next - u).abs() <= 1e-15 * (1.0 + u.abs());
            u = next;
            if done {
                break;
            }
        }
        x += dt * u;
        v = 2.0 * u - v;
        acc_in += dt * xi * u;
        acc_diss += dt * eta * u * u;
        if !(x.is_finite() && v.is_finite()) {
            return Err(Error::Divergence { path: 0, step: s + 1 });
        }
        if (s + 1) % every == 0 || s + 1 == steps {
            push(&mut led, (s + 1) as f64 * dt, x, v, acc_in, acc_diss);
        }
    }
    led.input = input;
    led.dissipation = diss;
    let t = steps as f64 * dt;
    led.mean_input_rate = acc_in / t;
    led.mean_dissipation_rate = acc_diss / t;
    Ok(led)
}
