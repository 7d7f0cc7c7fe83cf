//! Boltzmann entropy of sublevel sets, temperature and generalized force,
//! and the Carnot iso-curves of a power-law family.
//!
//! `σ_B(h, α) = ln Vol{x : φ(x, α) ≤ h}`, `θ = (∂σ_B/∂h)_α⁻¹` and
//! `F_α = −(∂h/∂α)_σ = θ (∂σ_B/∂α)_h`, so that `dh = θ dσ_B − F_α dα`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::PotentialSpec;
use crate::numerics::{compensated_sum, Grid, Matrix, RngStream};
use rand::Rng;

const BLOCK: usize = 1 << 16;
/// Fraction of a box side treated as its boundary layer.
const LAYER: f64 = 0.01;
/// Largest tolerated share of sublevel samples in the boundary layer.
const MAX_BOUNDARY_MASS: f64 = 1e-3;

/// Axis-aligned sampling box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SamplerBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Shape("box bounds must be non-empty and of equal length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::Parameter("box needs lo < hi on every axis".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    fn in_layer(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).any(|(v, (a, b))| {
            let w = LAYER * (b - a);
            *v < a + w || *v > b - w
        })
    }
}

/// Uniform samples of `φ` over a box, in block order.
struct BoxSamples {
    phi: Vec<f64>,
    /// `φ` at the samples lying in the boundary layer.
    layer_phi: Vec<f64>,
}

fn sample_box(phi: &(dyn Fn(&[f64]) -> f64 + Sync), bx: &SamplerBox, n_samples: usize, seed: u64, stream: u64) -> BoxSamples {
    let blocks = n_samples.div_ceil(BLOCK);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::new(seed, (stream << 32) | b as u64).rng();
            let count = BLOCK.min(n_samples - b * BLOCK);
            let mut x = vec![0.0; bx.dim()];
            let mut vals = Vec::with_capacity(count);
            let mut layer = Vec::new();
            for _ in 0..count {
                for (k, v) in x.iter_mut().enumerate() {
                    *v = rng.random_range(bx.lo[k]..bx.hi[k]);
                }
                let p = phi(&x);
                if bx.in_layer(&x) {
                    layer.push(p);
                }
                vals.push(p);
            }
            (vals, layer)
        })
        .collect();
    let mut out = BoxSamples { phi: Vec::with_capacity(n_samples), layer_phi: Vec::new() };
    for (v, l) in parts {
        out.phi.extend(v);
        out.layer_phi.extend(l);
    }
    out
}

/// `σ_B(h)` at one parameter value.
#[derive(Debug, Clone, Serialize)]
pub struct SigmaColumn {
    pub h: Vec<f64>,
    /// `None` where the sublevel set is empty.
    pub sigma: Vec<Option<f64>>,
    pub sigma_se: Vec<Option<f64>>,
    /// Share of the `φ ≤ max h` samples found in the box's boundary layer.
    pub boundary_mass: f64,
}

/// Monte Carlo `σ_B(h) = ln(Vol(box) · fraction{φ ≤ h})` with binomial
/// standard errors `((1 − p)/(N p))^{1/2}`.
pub fn boltzmann_entropy(
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    h_grid: &[f64],
    bx: &SamplerBox,
    n_samples: usize,
    seed: u64,
) -> Result<SigmaColumn> {
    mc_column(phi, h_grid, bx, n_samples, seed, 0)
}

fn mc_column(
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    h_grid: &[f64],
    bx: &SamplerBox,
    n_samples: usize,
    seed: u64,
    stream: u64,
) -> Result<SigmaColumn> {
    if n_samples < 10_000 {
        return Err(Error::Parameter(format!("need at least 1e4 samples, got {n_samples}")));
    }
    check_increasing(h_grid)?;
    let s = sample_box(phi, bx, n_samples, seed, stream);
    let mut sorted = s.phi;
    sorted.sort_unstable_by(f64::total_cmp);
    let h_max = *h_grid.last().unwrap();
    let inside = sorted.partition_point(|v| *v <= h_max);
    let layer = s.layer_phi.iter().filter(|v| **v <= h_max).count();
    let boundary_mass = if inside > 0 { layer as f64 / inside as f64 } else { 0.0 };
    if boundary_mass > MAX_BOUNDARY_MASS {
        return Err(Error::Coverage(format!(
            "{:.3}% of the sublevel set {{φ ≤ {h_max}}} lies in the box boundary layer; enlarge the box",
            100.0 * boundary_mass
        )));
    }
    let n = n_samples as f64;
    let vol = bx.volume();
    let (mut sigma, mut sigma_se) = (Vec::new(), Vec::new());
    for &h in h_grid {
        let k = sorted.partition_point(|v| *v <= h);
        if k == 0 {
            sigma.push(None);
            sigma_se.push(None);
        } else {
            let p = k as f64 / n;
            sigma.push(Some((vol * p).ln()));
            sigma_se.push(Some(((1.0 - p) / (n * p)).sqrt()));
        }
    }
    Ok(SigmaColumn { h: h_grid.to_vec(), sigma, sigma_se, boundary_mass })
}

fn check_increasing(xs: &[f64]) -> Result<()> {
    if xs.is_empty() || xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("grid must be non-empty and strictly increasing".into()));
    }
    Ok(())
}

/// `ln V_n` for the unit ball in `n` dimensions.
pub fn ln_unit_ball_volume(n: usize) -> f64 {
    0.5 * n as f64 * std::f64::consts::PI.ln() - ln_gamma(0.5 * n as f64 + 1.0)
}

/// `σ_B` of `φ = ½xᵀΞ⁻¹x`: `(n/2)ln h + ½ln det Ξ + (n/2)ln 2 + ln V_n`.
pub fn gaussian_sigma_analytic(xi: &Matrix, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("σ_B of a Gaussian needs h > 0, got {h}")));
    }
    let det = xi.determinant();
    if !(det > 0.0) {
        return Err(Error::Parameter("Ξ must be positive definite".into()));
    }
    let n = xi.nrows() as f64;
    Ok(0.5 * n * h.ln() + 0.5 * det.ln() + 0.5 * n * 2f64.ln() + ln_unit_ball_volume(xi.nrows()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMethod {
    MonteCarloVolume,
    GridQuadrature,
    GaussianAnalytic,
    /// A formula supplied by the caller.
    ClosedForm,
}

/// `σ_B` on an `(α, h)` table, indexed `[α][h]`.
#[derive(Debug, Clone, Serialize)]
pub struct SigmaTable {
    pub h_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub sigma: Vec<Vec<Option<f64>>>,
    /// Zero for deterministic methods.
    pub sigma_se: Vec<Vec<Option<f64>>>,
    pub method: SigmaMethod,
    pub dsigma_dh: Vec<Vec<Option<f64>>>,
    pub dsigma_dalpha: Vec<Vec<Option<f64>>>,
    pub theta: Vec<Vec<Option<f64>>>,
    /// `θ (∂σ_B/∂α)_h`.
    pub f_alpha: Vec<Vec<Option<f64>>>,
    /// `−(∂h/∂α)_σ` from inverting `σ_B(·, α)` at neighbouring α.
    pub f_alpha_iso: Vec<Vec<Option<f64>>>,
}

impl SigmaTable {
    fn empty(h_grid: &[f64], alpha_grid: &[f64], method: SigmaMethod) -> Result<Self> {
        check_increasing(h_grid)?;
        check_increasing(alpha_grid)?;
        let blank = vec![vec![None; h_grid.len()]; alpha_grid.len()];
        Ok(Self {
            h_grid: h_grid.to_vec(),
            alpha_grid: alpha_grid.to_vec(),
            sigma: blank.clone(),
            sigma_se: blank.clone(),
            method,
            dsigma_dh: blank.clone(),
            dsigma_dalpha: blank.clone(),
            theta: blank.clone(),
            f_alpha: blank.clone(),
            f_alpha_iso: blank,
        })
    }

    /// Table from a closed-form `σ(h, α)`; `None` marks undefined entries.
    pub fn from_fn(h_grid: &[f64], alpha_grid: &[f64], method: SigmaMethod, sigma: impl Fn(f64, f64) -> Option<f64>) -> Result<Self> {
        let mut t = Self::empty(h_grid, alpha_grid, method)?;
        for (ia, &a) in alpha_grid.iter().enumerate() {
            for (ih, &h) in h_grid.iter().enumerate() {
                t.sigma[ia][ih] = sigma(h, a);
                t.sigma_se[ia][ih] = t.sigma[ia][ih].map(|_| 0.0);
            }
        }
        Ok(t)
    }

    /// `φ = ½xᵀΞ(α)⁻¹x`.
    pub fn gaussian(h_grid: &[f64], alpha_grid: &[f64], xi: impl Fn(f64) -> Matrix) -> Result<Self> {
        let mut t = Self::empty(h_grid, alpha_grid, SigmaMethod::GaussianAnalytic)?;
        for (ia, &a) in alpha_grid.iter().enumerate() {
            let x = xi(a);
            for (ih, &h) in h_grid.iter().enumerate() {
                if h > 0.0 {
                    t.sigma[ia][ih] = Some(gaussian_sigma_analytic(&x, h)?);
                    t.sigma_se[ia][ih] = Some(0.0);
                }
            }
        }
        Ok(t)
    }

    /// Monte Carlo volumes with an independent stream per α.
    pub fn monte_carlo(
        h_grid: &[f64],
        alpha_grid: &[f64],
        family: impl Fn(&[f64], f64) -> f64 + Sync,
        bx: impl Fn(f64) -> SamplerBox,
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut t = Self::empty(h_grid, alpha_grid, SigmaMethod::MonteCarloVolume)?;
        for (ia, &a) in alpha_grid.iter().enumerate() {
            let phi = |x: &[f64]| family(x, a);
            let col = mc_column(&phi, h_grid, &bx(a), n_samples, seed, ia as u64 + 1)?;
            t.sigma[ia] = col.sigma;
            t.sigma_se[ia] = col.sigma_se;
        }
        Ok(t)
    }

    /// Volumes by counting grid cells whose centre satisfies `φ ≤ h`.
    pub fn grid_quadrature(h_grid: &[f64], alpha_grid: &[f64], family: impl Fn(&[f64], f64) -> f64 + Sync, grid: &Grid) -> Result<Self> {
        let mut t = Self::empty(h_grid, alpha_grid, SigmaMethod::GridQuadrature)?;
        for (ia, &a) in alpha_grid.iter().enumerate() {
            let mut vals: Vec<f64> = (0..grid.len()).into_par_iter().map(|c| family(&grid.center(c), a)).collect();
            vals.sort_unstable_by(f64::total_cmp);
            for (ih, &h) in h_grid.iter().enumerate() {
                let k = vals.partition_point(|v| *v <= h);
                if k > 0 {
                    t.sigma[ia][ih] = Some((k as f64 * grid.cell_volume()).ln());
                    t.sigma_se[ia][ih] = Some(0.0);
                }
            }
        }
        Ok(t)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "alpha,h,sigma,sigma_se,theta,F_alpha,F_alpha_iso")?;
        let s = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
        for (ia, a) in self.alpha_grid.iter().enumerate() {
            for (ih, h) in self.h_grid.iter().enumerate() {
                writeln!(
                    out,
                    "{a},{h},{},{},{},{},{}",
                    s(self.sigma[ia][ih]),
                    s(self.sigma_se[ia][ih]),
                    s(self.theta[ia][ih]),
                    s(self.f_alpha[ia][ih]),
                    s(self.f_alpha_iso[ia][ih])
                )?;
            }
        }
        Ok(())
    }
}

/// Derivative of tabulated values: centered inside, second-order one-sided
/// at the ends, `None` wherever a stencil value is missing.
fn derivative(xs: &[f64], ys: &[Option<f64>]) -> Vec<Option<f64>> {
    let n = xs.len();
    (0..n)
        .map(|i| {
            let (a, b, c) = if n < 3 {
                return None;
            } else if i == 0 {
                (0, 1, 2)
            } else if i == n - 1 {
                (n - 3, n - 2, n - 1)
            } else {
                (i - 1, i, i + 1)
            };
            let (ya, yb, yc) = (ys[a]?, ys[b]?, ys[c]?);
            // derivative at xs[i] of the parabola through the three points
            let (xa, xb, xc, x) = (xs[a], xs[b], xs[c], xs[i]);
            let la = (2.0 * x - xb - xc) / ((xa - xb) * (xa - xc));
            let lb = (2.0 * x - xa - xc) / ((xb - xa) * (xb - xc));
            let lc = (2.0 * x - xa - xb) / ((xc - xa) * (xc - xb));
            Some(la * ya + lb * yb + lc * yc)
        })
        .collect()
}

/// `∂σ/∂h`, differenced against `ln h` when every level is positive:
/// exact for the `σ ∝ ln h` families and second order otherwise.
fn dsigma_dh(h: &[f64], sigma: &[Option<f64>]) -> Vec<Option<f64>> {
    if h.iter().all(|v| *v > 0.0) {
        let lh: Vec<f64> = h.iter().map(|v| v.ln()).collect();
        derivative(&lh, sigma).into_iter().zip(h).map(|(d, h)| d.map(|d| d / h)).collect()
    } else {
        derivative(h, sigma)
    }
}

/// Fills `θ`, `F_α` (both routes) and the partial derivatives.
pub fn theta_and_force(table: &mut SigmaTable) -> Result<()> {
    let (nh, na) = (table.h_grid.len(), table.alpha_grid.len());
    if nh < 3 || na < 3 {
        return Err(Error::InsufficientData("θ and F_α need at least 3 h-points and 3 α-points".into()));
    }
    for ia in 0..na {
        let col = &table.sigma[ia];
        for ih in 1..nh {
            if let (Some(a), Some(b)) = (col[ih - 1], col[ih]) {
                let se = |v: Option<f64>| v.unwrap_or(0.0);
                let noise = (se(table.sigma_se[ia][ih - 1]).powi(2) + se(table.sigma_se[ia][ih]).powi(2)).sqrt();
                if b < a - 2.0 * noise {
                    return Err(Error::Numerical(format!(
                        "σ_B decreases in h at α = {}, h = {} beyond its noise",
                        table.alpha_grid[ia], table.h_grid[ih]
                    )));
                }
            }
        }
        table.dsigma_dh[ia] = dsigma_dh(&table.h_grid, col);
    }
    for ih in 0..nh {
        let row: Vec<Option<f64>> = (0..na).map(|ia| table.sigma[ia][ih]).collect();
        for (ia, d) in derivative(&table.alpha_grid, &row).into_iter().enumerate() {
            table.dsigma_dalpha[ia][ih] = d;
        }
    }
    for ia in 0..na {
        for ih in 0..nh {
            let theta = table.dsigma_dh[ia][ih].filter(|d| *d > 0.0).map(|d| 1.0 / d);
            table.theta[ia][ih] = theta;
            table.f_alpha[ia][ih] = match (theta, table.dsigma_dalpha[ia][ih]) {
                (Some(t), Some(d)) => Some(t * d),
                _ => None,
            };
        }
    }
    // iso-σ route: h(σ*, α) by interpolating σ against ln h at each α
    for ia in 0..na {
        for ih in 0..nh {
            let Some(target) = table.sigma[ia][ih] else { continue };
            let h_at: Vec<Option<f64>> = (0..na).map(|ja| invert_sigma(&table.h_grid, &table.sigma[ja], target)).collect();
            table.f_alpha_iso[ia][ih] = derivative(&table.alpha_grid, &h_at)[ia].map(|d| -d);
        }
    }
    Ok(())
}

/// `h` with `σ(h) = target`, interpolating `σ` linearly in `ln h`.
fn invert_sigma(h: &[f64], sigma: &[Option<f64>], target: f64) -> Option<f64> {
    for i in 1..h.len() {
        let (a, b) = (sigma[i - 1]?, sigma[i]?);
        if a <= target && target <= b && b > a && h[i - 1] > 0.0 {
            let s = (target - a) / (b - a);
            return Some((h[i - 1].ln() + s * (h[i].ln() - h[i - 1].ln())).exp());
        }
    }
    None
}

#[derive(Debug, Clone, Serialize)]
pub struct MaxwellReport {
    /// `max |F_α/θ − (∂σ_B/∂α)_h|` with `F_α` from the triple product.
    pub identity_residual: f64,
    /// Per interior entry `F_α^iso/θ − (∂σ_B/∂α)_h`, indexed `[α][h]`.
    pub residual: Vec<Vec<Option<f64>>>,
    /// Standard error of each residual, propagated from `sigma_se`.
    pub residual_se: Vec<Vec<Option<f64>>>,
    pub max_residual: f64,
    /// `max |residual| / se` over entries with a positive `se`.
    pub max_z: f64,
}

/// Compares the force from inverting `σ_B` at fixed entropy with the
/// `(∂σ_B/∂α)_h` it should equal. Standard errors are propagated by a
/// finite-difference Jacobian, treating table entries as independent.
pub fn maxwell_check(table: &SigmaTable) -> Result<MaxwellReport> {
    let (nh, na) = (table.h_grid.len(), table.alpha_grid.len());
    let mut identity_residual = 0.0f64;
    let mut residual = vec![vec![None; nh]; na];
    let mut residual_se = vec![vec![None; nh]; na];
    let (mut max_residual, mut max_z) = (0.0f64, 0.0f64);
    let r_at = |t: &SigmaTable, ia: usize, ih: usize| -> Option<f64> {
        Some(t.f_alpha_iso[ia][ih]? / t.theta[ia][ih]? - t.dsigma_dalpha[ia][ih]?)
    };
    for ia in 1..na.saturating_sub(1) {
        for ih in 1..nh.saturating_sub(1) {
            if let (Some(f), Some(t), Some(d)) = (table.f_alpha[ia][ih], table.theta[ia][ih], table.dsigma_dalpha[ia][ih]) {
                identity_residual = identity_residual.max((f / t - d).abs());
            }
            let Some(r) = r_at(table, ia, ih) else { continue };
            residual[ia][ih] = Some(r);
            max_residual = max_residual.max(r.abs());
            // entries that can enter the residual: the α-neighbourhood of every h
            let mut var = 0.0;
            for ja in ia - 1..=ia + 1 {
                for jh in 0..nh {
                    let se = table.sigma_se[ja][jh].unwrap_or(0.0);
                    if se == 0.0 {
                        continue;
                    }
                    let eps = 1e-3 * se;
                    let mut t = table.clone();
                    t.sigma[ja][jh] = t.sigma[ja][jh].map(|v| v + eps);
                    theta_and_force(&mut t)?;
                    if let Some(r2) = r_at(&t, ia, ih) {
                        var += ((r2 - r) / eps * se).powi(2);
                    }
                }
            }
            let se = var.sqrt();
            residual_se[ia][ih] = Some(se);
            if se > 0.0 {
                max_z = max_z.max(r.abs() / se);
            }
        }
    }
    Ok(MaxwellReport { identity_residual, residual, residual_se, max_residual, max_z })
}

/// Largest relative mismatch of `Δh ≈ θ̄Δσ_B − F̄_αΔα` along the table
/// diagonals `(h_i, α_j) → (h_{i+1}, α_{j+1})`, with `θ̄`, `F̄_α` the
/// averages of the two endpoints.
pub fn first_law_residual(table: &SigmaTable) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for ia in 0..table.alpha_grid.len().saturating_sub(1) {
        for ih in 0..table.h_grid.len().saturating_sub(1) {
            let get = |a: usize, h: usize| Some((table.sigma[a][h]?, table.theta[a][h]?, table.f_alpha[a][h]?));
            let (Some((s0, t0, f0)), Some((s1, t1, f1))) = (get(ia, ih), get(ia + 1, ih + 1)) else { continue };
            let dh = table.h_grid[ih + 1] - table.h_grid[ih];
            let da = table.alpha_grid[ia + 1] - table.alpha_grid[ia];
            let pred = 0.5 * (t0 + t1) * (s1 - s0) - 0.5 * (f0 + f1) * da;
            let r = (pred - dh).abs() / dh.abs();
            worst = Some(worst.map_or(r, |w: f64| w.max(r)));
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize)]
pub struct VirialReport {
    pub h: f64,
    pub shell_width: f64,
    pub shell_samples: usize,
    /// Shell averages of `x_k ∂_kφ`.
    pub theta_k: Vec<f64>,
    pub theta_k_se: Vec<f64>,
    /// `Δh / Δσ_B` from the volumes below and above the shell.
    pub theta_vol: f64,
    pub theta_vol_se: f64,
    /// Largest `|θ̂_k − θ̂_l| / SE` over coordinate pairs.
    pub max_pairwise_z: f64,
}

/// Shell estimates of `θ` over `{h < φ ≤ h + Δh}` by rejection from a box.
pub fn virial_check(phi: &PotentialSpec, h: f64, shell_width: f64, bx: &SamplerBox, n_samples: usize, seed: u64) -> Result<VirialReport> {
    let n = phi.dim();
    if bx.dim() != n {
        return Err(Error::Shape("box and potential disagree in dimension".into()));
    }
    if !(shell_width > 0.0) {
        return Err(Error::Parameter("shell width must be positive".into()));
    }
    let blocks = n_samples.div_ceil(BLOCK);
    // per block: inside count, shell count, Σ x_k∂_kφ, Σ (x_k∂_kφ)², Σ products
    let parts: Vec<(usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, usize)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::new(seed, b as u64).rng();
            let count = BLOCK.min(n_samples - b * BLOCK);
            let mut x = vec![0.0; n];
            let mut g = vec![0.0; n];
            let (mut below, mut shell, mut layer) = (0, 0, 0);
            let (mut s1, mut s2, mut cross) = (vec![0.0; n], vec![0.0; n], vec![0.0; n * n]);
            for _ in 0..count {
                for (k, v) in x.iter_mut().enumerate() {
                    *v = rng.random_range(bx.lo[k]..bx.hi[k]);
                }
                let p = phi.value(&x);
                if p <= h {
                    below += 1;
                } else if p <= h + shell_width {
                    shell += 1;
                    layer += bx.in_layer(&x) as usize;
                    phi.gradient(&x, &mut g);
                    let w: Vec<f64> = (0..n).map(|k| x[k] * g[k]).collect();
                    for k in 0..n {
                        s1[k] += w[k];
                        s2[k] += w[k] * w[k];
                        for l in 0..n {
                            cross[k * n + l] += w[k] * w[l];
                        }
                    }
                }
            }
            (below, shell, s1, s2, cross, layer)
        })
        .collect();
    let (mut below, mut shell, mut layer) = (0usize, 0usize, 0usize);
    let (mut s1, mut s2, mut cross) = (vec![0.0; n], vec![0.0; n], vec![0.0; n * n]);
    for (b, s, p1, p2, c, l) in parts {
        below += b;
        shell += s;
        layer += l;
        for k in 0..n {
            s1[k] += p1[k];
            s2[k] += p2[k];
        }
        for (a, v) in cross.iter_mut().zip(c) {
            *a += v;
        }
    }
    if shell < 2 || below == 0 {
        return Err(Error::Sampling(format!("shell ({h}, {}] holds {shell} samples and {below} lie below it", h + shell_width)));
    }
    if layer as f64 > MAX_BOUNDARY_MASS * shell as f64 {
        return Err(Error::Coverage("the shell reaches the box boundary; enlarge the box".into()));
    }
    let m = shell as f64;
    let theta_k: Vec<f64> = s1.iter().map(|s| s / m).collect();
    let var = |k: usize, l: usize| (cross[k * n + l] - m * theta_k[k] * theta_k[l]) / (m - 1.0);
    let theta_k_se: Vec<f64> = (0..n).map(|k| (s2[k] / m - theta_k[k].powi(2)).max(0.0).sqrt() / (m - 1.0).sqrt()).collect();
    let mut max_pairwise_z = 0.0f64;
    for k in 0..n {
        for l in k + 1..n {
            // θ̂_k and θ̂_l share the shell samples
            let v = (var(k, k) + var(l, l) - 2.0 * var(k, l)) / m;
            if v > 0.0 {
                max_pairwise_z = max_pairwise_z.max((theta_k[k] - theta_k[l]).abs() / v.sqrt());
            }
        }
    }
    let ratio = (below + shell) as f64 / below as f64;
    let dsigma = ratio.ln();
    let theta_vol = shell_width / dsigma;
    // Var(ln(1 + S/B)) ≈ S/(B(B + S)) for nested binomial counts
    let dsigma_se = (shell as f64 / (below as f64 * (below + shell) as f64)).sqrt();
    Ok(VirialReport {
        h,
        shell_width,
        shell_samples: shell,
        theta_k,
        theta_k_se,
        theta_vol,
        theta_vol_se: theta_vol * dsigma_se / dsigma,
        max_pairwise_z,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionReport {
    pub beta: f64,
    /// `∫ e^{−βφ}` by tensor midpoint quadrature over the box.
    pub z_direct: f64,
    pub log_z: f64,
    /// `∫ e^{−βh + σ_B}(∂σ_B/∂h) dh` from a Monte Carlo σ_B column.
    pub z_sigma: f64,
    /// `β ∫ e^{−βh + σ_B} dh`.
    pub z_beta_route: f64,
    /// `|Z − Z'|/Z`.
    pub route_rel_diff: f64,
    /// `∫ e^{−βh+σ_B}(∂σ_B/∂h) dh / ∫ e^{−βh+σ_B} dh`.
    pub beta_hat: f64,
    /// `|β − β̂|/β`.
    pub beta_identity_residual: f64,
    /// Highest level whose sublevel set lies inside the box.
    pub h_cap: f64,
}

/// Canonical partition function directly and through `σ_B`.
pub fn canonical_partition(
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    beta: f64,
    bx: &SamplerBox,
    n_samples: usize,
    seed: u64,
) -> Result<PartitionReport> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    let (z_direct, phi_min_q) = midpoint_quadrature(phi, beta, bx);
    let s = sample_box(phi, bx, n_samples, seed, 0);
    let phi_min = s.phi.iter().copied().fold(phi_min_q, f64::min);
    let h_cap = s.layer_phi.iter().copied().fold(f64::INFINITY, f64::min);
    if !h_cap.is_finite() || (-beta * (h_cap - phi_min)).exp() > 1e-4 {
        return Err(Error::Coverage(format!(
            "e^(−βφ) is not negligible on the box boundary (β(φ_boundary − φ_min) = {:.2})",
            beta * (h_cap - phi_min)
        )));
    }
    let nh = 2000;
    let dh = (h_cap - phi_min) / nh as f64;
    let h_grid: Vec<f64> = (1..=nh).map(|i| phi_min + i as f64 * dh).collect();
    let mut sorted = s.phi;
    sorted.sort_unstable_by(f64::total_cmp);
    let n = n_samples as f64;
    let sigma: Vec<Option<f64>> = h_grid
        .iter()
        .map(|&h| {
            let k = sorted.partition_point(|v| *v <= h);
            (k > 0).then(|| (bx.volume() * k as f64 / n).ln())
        })
        .collect();
    let dsig = dsigma_dh(&h_grid, &sigma);
    let first = sigma.iter().position(Option::is_some).ok_or_else(|| Error::Sampling("no samples below h_cap".into()))?;
    // mass below the first tabulated level, weighted at its midpoint
    let h0 = h_grid[first];
    let v0 = sigma[first].unwrap().exp();
    let w0 = (-beta * 0.5 * (phi_min + h0)).exp();
    let trap = |f: &dyn Fn(usize) -> Option<f64>| -> f64 {
        compensated_sum((first..nh - 1).map(|i| match (f(i), f(i + 1)) {
            (Some(a), Some(b)) => 0.5 * (a + b) * dh,
            _ => 0.0,
        }))
    };
    let density = |i: usize| sigma[i].map(|s| (-beta * h_grid[i] + s).exp());
    let with_slope = |i: usize| Some(density(i)? * dsig[i]?);
    let z_sigma = v0 * w0 + trap(&with_slope);
    let plain = 0.5 * v0 * (h0 - phi_min) * w0 + trap(&density);
    let z_beta_route = beta * plain;
    let beta_hat = z_sigma / plain;
    Ok(PartitionReport {
        beta,
        z_direct,
        log_z: z_direct.ln(),
        z_sigma,
        z_beta_route,
        route_rel_diff: (z_direct - z_sigma).abs() / z_direct,
        beta_hat,
        beta_identity_residual: (beta - beta_hat).abs() / beta,
        h_cap,
    })
}

/// Tensor midpoint rule for `∫ e^{−βφ}`; also returns the smallest `φ` seen.
fn midpoint_quadrature(phi: &(dyn Fn(&[f64]) -> f64 + Sync), beta: f64, bx: &SamplerBox) -> (f64, f64) {
    let n = bx.dim();
    let m = ((4e6f64).powf(1.0 / n as f64).floor() as usize).clamp(16, 100_000);
    let widths: Vec<f64> = (0..n).map(|k| (bx.hi[k] - bx.lo[k]) / m as f64).collect();
    let cell: f64 = widths.iter().product();
    let total = m.pow(n as u32);
    let chunks: Vec<(f64, f64)> = (0..total.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut x = vec![0.0; n];
            let mut vals = Vec::with_capacity(BLOCK);
            let mut lo = f64::INFINITY;
            for idx in b * BLOCK..((b + 1) * BLOCK).min(total) {
                let mut r = idx;
                for k in 0..n {
                    x[k] = bx.lo[k] + (r % m) as f64 * widths[k] + 0.5 * widths[k];
                    r /= m;
                }
                let p = phi(&x);
                lo = lo.min(p);
                vals.push((-beta * p).exp());
            }
            (compensated_sum(vals), lo)
        })
        .collect();
    let min = chunks.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    (compensated_sum(chunks.into_iter().map(|c| c.0)) * cell, min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianCanonical {
    pub free_energy: f64,
    pub mean_h: f64,
    pub canonical_entropy: f64,
    pub sigma_at_mean_h: f64,
    /// `canonical_entropy − sigma_at_mean_h`.
    pub stirling_gap: f64,
}

impl GaussianCanonical {
    pub fn relative_gap(&self) -> f64 {
        self.stirling_gap / self.canonical_entropy.abs()
    }
}

/// Canonical quantities of `φ = ½xᵀΞ⁻¹x` at inverse temperature β.
pub fn gaussian_canonical_summary(xi: &Matrix, beta: f64) -> Result<GaussianCanonical> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    let n = xi.nrows() as f64;
    let ln_det = xi.determinant().ln();
    let free_energy = -(0.5 * n * (2.0 * std::f64::consts::PI / beta).ln() + 0.5 * ln_det) / beta;
    let mean_h = n / (2.0 * beta);
    let canonical_entropy = 0.5 * n * mean_h.ln() + 0.5 * ln_det + 0.5 * n + 0.5 * n * (4.0 * std::f64::consts::PI / n).ln();
    let sigma_at_mean_h = gaussian_sigma_analytic(xi, mean_h)?;
    Ok(GaussianCanonical { free_energy, mean_h, canonical_entropy, sigma_at_mean_h, stirling_gap: canonical_entropy - sigma_at_mean_h })
}

/// Power-law family `σ_B = μ ln h + ν ln α` and its cycle bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarnotSpec {
    pub mu: f64,
    pub nu: f64,
    pub theta_hot: f64,
    pub theta_cold: f64,
    pub sigma_low: f64,
    pub sigma_high: f64,
}

impl CarnotSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.nu > 0.0) {
            return Err(Error::Parameter("μ and ν must be positive".into()));
        }
        if !(self.theta_hot > self.theta_cold && self.theta_cold > 0.0) {
            return Err(Error::Parameter("need θ_hot > θ_cold > 0".into()));
        }
        if !(self.sigma_high > self.sigma_low) {
            return Err(Error::Parameter("need σ_high > σ_low".into()));
        }
        Ok(())
    }

    /// `(α, F_α)` where the iso-θ and iso-σ_B curves cross:
    /// `α = (e^{σ/μ}/(μθ))^{μ/ν}`, `F_α = νθ/α`.
    pub fn corner(&self, theta: f64, sigma: f64) -> (f64, f64) {
        let alpha = ((sigma / self.mu).exp() / (self.mu * theta)).powf(self.mu / self.nu);
        (alpha, self.nu * theta / alpha)
    }

    /// `F_α` on the iso-θ curve `αF_α = νθ`.
    pub fn iso_theta(&self, theta: f64, alpha: f64) -> f64 {
        self.nu * theta / alpha
    }

    /// `F_α` on the iso-σ_B curve `α^{1+ν/μ}F_α = (ν/μ)e^{σ/μ}`.
    pub fn iso_sigma(&self, sigma: f64, alpha: f64) -> f64 {
        self.nu / self.mu * (sigma / self.mu).exp() * alpha.powf(-(1.0 + self.nu / self.mu))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BranchKind {
    IsoTheta,
    IsoSigma,
}

#[derive(Debug, Clone, Serialize)]
pub struct CarnotBranch {
    pub label: String,
    pub kind: BranchKind,
    /// The θ or σ_B held fixed.
    pub level: f64,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CarnotCorner {
    pub theta: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub f_alpha: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CarnotCurves {
    pub spec: CarnotSpec,
    pub branches: Vec<CarnotBranch>,
    pub corners: Vec<CarnotCorner>,
}

/// The two iso-θ and two iso-σ_B branches between their corners, sampled
/// geometrically in α.
pub fn carnot_curves(spec: &CarnotSpec, n_points: usize) -> Result<CarnotCurves> {
    spec.validate()?;
    if n_points < 2 {
        return Err(Error::Parameter("each branch needs at least 2 points".into()));
    }
    let mut corners = Vec::new();
    for (theta, sigma) in [
        (spec.theta_hot, spec.sigma_low),
        (spec.theta_hot, spec.sigma_high),
        (spec.theta_cold, spec.sigma_high),
        (spec.theta_cold, spec.sigma_low),
    ] {
        let (alpha, f_alpha) = spec.corner(theta, sigma);
        if !(alpha.is_finite() && f_alpha.is_finite() && alpha > 0.0 && f_alpha > 0.0) {
            return Err(Error::Parameter(format!("iso-curves θ={theta}, σ_B={sigma} do not meet in the positive quadrant")));
        }
        corners.push(CarnotCorner { theta, sigma, alpha, f_alpha });
    }
    let span = |a: f64, b: f64| -> Vec<f64> {
        let (la, lb) = (a.ln(), b.ln());
        (0..n_points).map(|i| (la + (lb - la) * i as f64 / (n_points - 1) as f64).exp()).collect()
    };
    let mut branches = Vec::new();
    for (i, label) in ["hot isotherm", "high adiabat", "cold isotherm", "low adiabat"].iter().enumerate() {
        let (a, b) = (&corners[i], &corners[(i + 1) % 4]);
        let (kind, level) = if i % 2 == 0 { (BranchKind::IsoTheta, a.theta) } else { (BranchKind::IsoSigma, a.sigma) };
        let mut points: Vec<(f64, f64)> = span(a.alpha, b.alpha)
            .into_iter()
            .map(|al| match kind {
                BranchKind::IsoTheta => (al, spec.iso_theta(level, al)),
                BranchKind::IsoSigma => (al, spec.iso_sigma(level, al)),
            })
            .collect();
        // pin the ends to the closed-form corners
        points[0] = (a.alpha, a.f_alpha);
        *points.last_mut().unwrap() = (b.alpha, b.f_alpha);
        branches.push(CarnotBranch { label: label.to_string(), kind, level, points });
    }
    Ok(CarnotCurves { spec: *spec, branches, corners })
}

impl CarnotCurves {
    /// Largest relative violation of each branch's defining equation.
    pub fn max_defect(&self) -> f64 {
        let s = &self.spec;
        self.branches
            .iter()
            .flat_map(|b| {
                b.points.iter().map(move |&(a, f)| match b.kind {
                    BranchKind::IsoTheta => (a * f - s.nu * b.level).abs() / (s.nu * b.level),
                    BranchKind::IsoSigma => {
                        let rhs = s.nu / s.mu * (b.level / s.mu).exp();
                        (a.powf(1.0 + s.nu / s.mu) * f - rhs).abs() / rhs
                    }
                })
            })
            .fold(0.0, f64::max)
    }

    /// Columns `branch,alpha,F_alpha`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "branch,alpha,F_alpha")?;
        for b in &self.branches {
            for (a, f) in &b.points {
                writeln!(out, "{},{a},{f}", b.label)?;
            }
        }
        Ok(())
    }
}
