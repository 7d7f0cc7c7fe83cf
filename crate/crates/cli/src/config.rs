use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use difftherm::helmholtz::CarnotSpec;
use difftherm::mb::Thresholds;
use difftherm::model::{make_ao_constant, make_gradient_model, make_klein_kramers, make_ou};
use difftherm::numerics::matrix_from_rows;
use difftherm::sde::InitialCondition;
use difftherm::{DiffusionModel, Grid, Matrix, PotentialSpec};
use serde::{Deserialize, Serialize};

pub const OUTPUT_ENV: &str = "DIFFTHERM_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Stationary,
    Decompose,
    Ledger,
    Helmholtz,
    Carnot,
    Pendulum,
    OuAnalytic,
    Ensemble,
}

impl Analysis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stationary => "stationary",
            Self::Decompose => "decompose",
            Self::Ledger => "ledger",
            Self::Helmholtz => "helmholtz",
            Self::Carnot => "carnot",
            Self::Pendulum => "pendulum",
            Self::OuAnalytic => "ou_analytic",
            Self::Ensemble => "ensemble",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<ModelConfig>,
    pub grid: Option<GridConfig>,
    pub analyses: Vec<Analysis>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    pub ledger: Option<LedgerConfig>,
    pub helmholtz: Option<HelmholtzConfig>,
    pub carnot: Option<CarnotConfig>,
    pub pendulum: Option<PendulumConfig>,
    pub ensemble: Option<EnsembleConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("difftherm-out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Ou {
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
        #[serde(rename = "D")]
        d: Option<Vec<Vec<f64>>>,
        beta: Option<f64>,
    },
    KleinKramers {
        m: f64,
        #[serde(rename = "U")]
        u: PotentialConfig,
        eta: f64,
        #[serde(rename = "kBT")]
        kbt: f64,
    },
    Ao {
        #[serde(rename = "G")]
        g: Vec<Vec<f64>>,
        phi: PotentialConfig,
    },
    Gradient {
        phi: PotentialConfig,
        #[serde(rename = "D")]
        d: Option<Vec<Vec<f64>>>,
        beta: Option<f64>,
        dim: Option<usize>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    Isotropic,
    Harmonic { k: f64 },
    Quadratic {
        #[serde(rename = "K")]
        k: Vec<Vec<f64>>,
    },
    DoubleWell,
    #[serde(alias = "quartic")]
    RadialQuartic,
}

impl PotentialConfig {
    fn dim(&self) -> Option<usize> {
        match self {
            Self::Quadratic { k } => Some(k.len()),
            _ => None,
        }
    }

    pub fn build(&self, dim: usize) -> Result<PotentialSpec> {
        Ok(match self {
            Self::Isotropic => PotentialSpec::isotropic(dim),
            Self::Harmonic { k } => PotentialSpec::quadratic(Matrix::identity(dim, dim) * *k)?,
            Self::Quadratic { k } => {
                if k.len() != dim {
                    bail!("phi.K is {}x{}, model dimension is {dim}", k.len(), k.len());
                }
                PotentialSpec::quadratic(matrix(k, "phi.K")?)?
            }
            Self::DoubleWell => PotentialSpec::double_well(dim),
            Self::RadialQuartic => PotentialSpec::radial_quartic(dim),
        })
    }

    /// Precision matrix when the potential is quadratic.
    pub fn precision(&self, dim: usize) -> Option<Matrix> {
        match self {
            Self::Isotropic => Some(Matrix::identity(dim, dim)),
            Self::Harmonic { k } => Some(Matrix::identity(dim, dim) * *k),
            Self::Quadratic { k } => matrix(k, "K").ok(),
            _ => None,
        }
    }
}

pub fn matrix(rows: &[Vec<f64>], key: &str) -> Result<Matrix> {
    matrix_from_rows(rows).with_context(|| format!("key '{key}'"))
}

impl ModelConfig {
    pub fn build(&self) -> Result<DiffusionModel> {
        Ok(match self {
            Self::Ou { b, d, beta } => {
                let b = matrix(b, "model.B")?;
                let n = b.nrows();
                let d = d.as_deref().map(|d| matrix(d, "model.D")).transpose()?.unwrap_or_else(|| Matrix::identity(n, n));
                make_ou(b, d, beta.unwrap_or(1.0))?
            }
            Self::KleinKramers { m, u, eta, kbt } => {
                let eta = *eta;
                make_klein_kramers(*m, u.build(1)?, move |_| eta, *kbt)?
            }
            Self::Ao { g, phi } => {
                let g = matrix(g, "model.G")?;
                let n = g.nrows();
                make_ao_constant(g, phi.build(n)?)?
            }
            Self::Gradient { phi, d, beta, dim } => {
                let n = d.as_ref().map(Vec::len).or(phi.dim()).or(*dim).context("gradient model needs 'dim', 'D' or a quadratic 'phi'")?;
                let d = d.as_deref().map(|d| matrix(d, "model.D")).transpose()?.unwrap_or_else(|| Matrix::identity(n, n));
                make_gradient_model(phi.build(n)?, d, beta.unwrap_or(1.0))?
            }
        })
    }

    pub fn catalog_name(&self) -> &'static str {
        match self {
            Self::Ou { .. } => "ou",
            Self::KleinKramers { .. } => "klein_kramers",
            Self::Ao { .. } => "ao",
            Self::Gradient { .. } => "gradient",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        if self.lo.len() != self.hi.len() || self.lo.len() != self.counts.len() {
            bail!("grid.lo, grid.hi and grid.counts must have the same length");
        }
        let bounds: Vec<(f64, f64)> = self.lo.iter().copied().zip(self.hi.iter().copied()).collect();
        Ok(Grid::new(&bounds, &self.counts)?)
    }
}

/// Tolerances applied by the invariant checks; every value is echoed in the summary.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// `max |∇·J^ss|` of the discrete stationary solution.
    pub stationary_divergence: f64,
    /// Classification thresholds for grid fields; unset keys keep the grid preset.
    #[serde(deserialize_with = "grid_thresholds")]
    pub decompose: Thresholds,
    /// Classification thresholds for analytic fields; unset keys keep the strict preset.
    #[serde(deserialize_with = "analytic_thresholds")]
    pub decompose_analytic: Thresholds,
    /// `‖j − D∇φ − b‖/‖b‖` of the reconstructed drift.
    pub reconstruction: f64,
    /// Allowed rise of F between snapshots.
    pub free_energy_rise: f64,
    /// `|dF/dt − (E_in − e_p)| / e_p`.
    pub balance: f64,
    /// Allowed negative excursion of E_in and e_p.
    pub sign: f64,
    pub ou_lyapunov: f64,
    pub ou_certificate: f64,
    pub maxwell_identity: f64,
    /// Maxwell residual in units of its propagated SE (Monte Carlo tables).
    pub maxwell_z: f64,
    /// Maxwell residual for deterministic tables.
    pub maxwell_abs: f64,
    pub first_law: f64,
    pub carnot_defect: f64,
    /// Ledger residual per unit time.
    pub pendulum_residual_rate: f64,
    /// `|⟨ηẋ²⟩ − ⟨ẋξ⟩| / |⟨ẋξ⟩|`, checked only when the drive is on.
    pub pendulum_balance: f64,
    /// Histogram L¹ error in units of the binomial bound.
    pub histogram_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            stationary_divergence: 1e-8,
            decompose: Thresholds::grid(),
            decompose_analytic: Thresholds::default(),
            reconstruction: 5e-2,
            free_energy_rise: 0.0,
            balance: 1e-2,
            sign: 1e-8,
            ou_lyapunov: 1e-12,
            ou_certificate: 1e-10,
            maxwell_identity: 1e-10,
            maxwell_z: 5.0,
            maxwell_abs: 1e-2,
            first_law: 2e-2,
            carnot_defect: 1e-12,
            pendulum_residual_rate: 1e-5,
            pendulum_balance: 0.05,
            histogram_factor: 3.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdOverrides {
    j: Option<f64>,
    div: Option<f64>,
    orth: Option<f64>,
    support: Option<f64>,
}

impl ThresholdOverrides {
    fn over(self, base: Thresholds) -> Thresholds {
        Thresholds {
            j: self.j.unwrap_or(base.j),
            div: self.div.unwrap_or(base.div),
            orth: self.orth.unwrap_or(base.orth),
            support: self.support.unwrap_or(base.support),
        }
    }
}

fn grid_thresholds<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Thresholds, D::Error> {
    Ok(ThresholdOverrides::deserialize(d)?.over(Thresholds::grid()))
}

fn analytic_thresholds<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Thresholds, D::Error> {
    Ok(ThresholdOverrides::deserialize(d)?.over(Thresholds::default()))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    /// Use the model's closed-form potential and circulation instead of the grid solution.
    #[serde(default)]
    pub analytic: bool,
    /// Expected classification; a mismatch fails the run.
    pub expect: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerConfig {
    pub initial: InitialCondition,
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    MonteCarlo,
    GridQuadrature,
    Gaussian,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Range {
    pub fn points(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![self.lo];
        }
        (0..self.n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64).collect()
    }
}

/// Family `φ_α(x) = φ(x₀/√α, x₁, …)` built from the model potential.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelmholtzConfig {
    pub method: SigmaSource,
    pub h: Range,
    pub alpha: Range,
    /// Half-width of the sampling box at α = 1; coordinate 0 scales with √α.
    #[serde(default = "default_box")]
    pub box_half_width: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_box() -> f64 {
    4.0
}

fn default_samples() -> usize {
    1_000_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarnotConfig {
    pub mu: f64,
    pub nu: f64,
    pub theta_hot: f64,
    pub theta_cold: f64,
    #[serde(default)]
    pub sigma_low: f64,
    #[serde(default = "unit")]
    pub sigma_high: f64,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn unit() -> f64 {
    1.0
}

fn default_points() -> usize {
    200
}

impl CarnotConfig {
    pub fn spec(&self) -> CarnotSpec {
        CarnotSpec {
            mu: self.mu,
            nu: self.nu,
            theta_hot: self.theta_hot,
            theta_cold: self.theta_cold,
            sigma_low: self.sigma_low,
            sigma_high: self.sigma_high,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumConfig {
    #[serde(default = "unit")]
    pub mass: f64,
    #[serde(default = "unit")]
    pub stiffness: f64,
    pub eta: f64,
    pub x0: f64,
    #[serde(default)]
    pub v0: f64,
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_record")]
    pub record_every: usize,
    /// `ξ(t) = amplitude·cos(omega·t)`.
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub omega: f64,
}

fn default_record() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub t_final: f64,
    pub initial: InitialCondition,
    #[serde(default)]
    pub record_times: Vec<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("config parse error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    fn validate(&self) -> Result<()> {
        if self.analyses.is_empty() {
            bail!("'analyses' must list at least one analysis");
        }
        for a in &self.analyses {
            let needs = |ok: bool, what: &str| {
                if ok {
                    Ok(())
                } else {
                    Err(anyhow::anyhow!("analysis '{}' needs {what}", a.name()))
                }
            };
            match a {
                Analysis::Stationary | Analysis::Decompose => {
                    needs(self.model.is_some(), "a [model] section")?;
                    needs(self.grid.is_some(), "a [grid] section")?;
                }
                Analysis::Ledger => {
                    needs(self.model.is_some() && self.grid.is_some(), "[model] and [grid] sections")?;
                    needs(self.ledger.is_some(), "a [ledger] section")?;
                }
                Analysis::Helmholtz => {
                    needs(self.model.is_some(), "a [model] section with a potential")?;
                    needs(self.helmholtz.is_some(), "a [helmholtz] section")?;
                }
                Analysis::Carnot => needs(self.carnot.is_some(), "a [carnot] section")?,
                Analysis::Pendulum => needs(self.pendulum.is_some(), "a [pendulum] section")?,
                Analysis::OuAnalytic => needs(matches!(self.model, Some(ModelConfig::Ou { .. })), "an 'ou' model")?,
                Analysis::Ensemble => {
                    needs(self.model.is_some(), "a [model] section")?;
                    needs(self.ensemble.is_some(), "an [ensemble] section")?;
                }
            }
        }
        if let Some(expect) = &self.decompose.expect {
            if !["DetailedBalance", "MBEquilibrium", "DrivenNESS"].contains(&expect.as_str()) {
                bail!("decompose.expect must be DetailedBalance, MBEquilibrium or DrivenNESS, got '{expect}'");
            }
        }
        Ok(())
    }

    /// Output directory: the environment override if set, else `output_dir`
    /// resolved against the directory holding the config file.
    pub fn output_dir(&self, config_path: &Path) -> PathBuf {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(dir);
        }
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        config_path.parent().unwrap_or(Path::new(".")).join(&self.output_dir)
    }
}
