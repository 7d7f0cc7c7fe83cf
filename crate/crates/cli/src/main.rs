//! Config-driven batch front end.
//!
//! Exit status: 0 when every invariant check passed, 1 when a check failed,
//! 2 on configuration or analysis errors.

mod analyses;
mod config;
mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use difftherm::model::CATALOG;
use serde_json::json;

use crate::analyses::Context;
use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "difftherm", version, about = "Batch experiments on diffusion models from TOML configs")]
struct Cli {
    /// Print the config schema and the CSV column layout of every artifact, then exit.
    #[arg(long)]
    schema: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the analyses listed in a config file.
    Run {
        config: PathBuf,
        /// Override the output directory (also settable with DIFFTHERM_OUTPUT_DIR).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// List catalog models and their parameters.
    ListModels,
    /// Print the version.
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.schema {
        // a closed pipe (`| head`) is not an error
        let _ = std::io::stdout().lock().write_all(SCHEMA.as_bytes());
        return ExitCode::SUCCESS;
    }
    match cli.command {
        Some(Command::Run { config, output_dir }) => match run(&config, output_dir) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
        Some(Command::ListModels) => {
            let _ = list_models(&mut std::io::stdout().lock());
            ExitCode::SUCCESS
        }
        Some(Command::Version) => {
            println!("difftherm {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        None => {
            eprintln!("no command given; try `difftherm --help`");
            ExitCode::from(2)
        }
    }
}

fn list_models(out: &mut impl Write) -> std::io::Result<()> {
    for e in CATALOG {
        writeln!(out, "{}", e.name)?;
        writeln!(out, "  reproduces: {}", e.reproduces)?;
        for (k, v) in e.params {
            writeln!(out, "  {k}: {v}")?;
        }
    }
    Ok(())
}

fn run(path: &Path, override_dir: Option<PathBuf>) -> Result<bool> {
    let cfg = ExperimentConfig::load(path)?;
    let out = override_dir.unwrap_or_else(|| cfg.output_dir(path));
    std::fs::create_dir_all(&out).with_context(|| format!("output directory {} is not writable", out.display()))?;

    let mut ctx = Context::new(&cfg, &out)?;
    let mut reports = Vec::new();
    for &a in &cfg.analyses {
        let r = ctx.run(a)?;
        println!("{} {}", if r.pass() { "PASS" } else { "FAIL" }, r.name);
        for c in r.checks.iter().filter(|c| !c.pass) {
            println!("  {}: {} ({})", c.name, c.value, c.limit);
        }
        reports.push(r);
    }
    let pass = reports.iter().all(|r| r.pass());
    let classification = reports.iter().find_map(|r| r.values.get("classification").cloned());
    let generated = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let summary = json!({
        "metadata": { "version": env!("CARGO_PKG_VERSION"), "generated_unix": generated },
        "model": cfg.model.as_ref().map(|m| m.catalog_name()),
        "model_label": ctx.model_label(),
        "seed": cfg.seed,
        "tolerances": cfg.tolerances,
        "classification": classification,
        "analyses": reports,
        "pass": pass,
    });
    let file = out.join("summary.json");
    std::fs::write(&file, serde_json::to_string_pretty(&summary)? + "\n").with_context(|| format!("cannot write {}", file.display()))?;
    println!("summary: {}", file.display());
    Ok(pass)
}

const SCHEMA: &str = r#"# difftherm experiment config (TOML)

seed = 7                     # integer, default 0; seeds every random stream
output_dir = "out"           # relative to the config file; DIFFTHERM_OUTPUT_DIR or --output-dir override it
analyses = ["stationary", "decompose", "ledger", "helmholtz", "carnot", "pendulum", "ou_analytic", "ensemble"]

[model]                      # one of the catalog models (see `difftherm list-models`)
name = "ou"                  # ou | klein_kramers | ao | gradient
B = [[1.0, 2.0], [-2.0, 1.0]]
D = [[1.0, 0.0], [0.0, 1.0]] # optional, default identity
beta = 1.0                   # optional, default 1
# klein_kramers: m, eta, kBT, U = { kind = "harmonic", k = 1.0 }
# ao:            G, phi = { kind = "isotropic" }
# gradient:      phi = { kind = "double_well" }, dim or D, beta
# potential kinds: isotropic | harmonic (k) | quadratic (K) | double_well | radial_quartic

[grid]                       # needed by stationary, decompose, ledger; optional for ensemble
lo = [-7.0, -7.0]
hi = [7.0, 7.0]
counts = [201, 201]

[decompose]
analytic = false             # classify the closed-form fields instead of the grid solution
expect = "MBEquilibrium"     # optional; a mismatch fails the run

[ledger]
initial = { gaussian = { mean = [1.0], cov = [[2.0]] } }
dt = 1e-3
steps = 2000
stride = 20

[helmholtz]                  # family phi_a(x) = phi(x0/sqrt(a), x1, ...) from the model potential
method = "monte_carlo"       # monte_carlo | grid_quadrature | gaussian
h = { lo = 0.5, hi = 1.5, n = 11 }
alpha = { lo = 0.8, hi = 1.2, n = 5 }
box_half_width = 4.0
samples = 1000000

[carnot]
mu = 1.0
nu = 0.5
theta_hot = 2.0
theta_cold = 1.0
sigma_low = 0.0
sigma_high = 1.0
points = 200

[pendulum]                   # m x'' = -k sin x - eta x' + amplitude cos(omega t)
mass = 1.0
stiffness = 1.0
eta = 0.1
x0 = 1.0
v0 = 0.0
dt = 1e-3
t_final = 100.0
amplitude = 0.5
omega = 0.9
record_every = 100

[ensemble]
n_paths = 100000
dt = 1e-3
t_final = 1.0
initial = { gaussian = { mean = [1.0], cov = [[0.5]] } }   # or { point = [1.0] }

[tolerances]                 # every key optional; resolved values are echoed in summary.json
stationary_divergence = 1e-8
decompose = { j = 1e-6, div = 1e-2, orth = 1e-2, support = 1e-6 }
decompose_analytic = { j = 1e-6, div = 1e-6, orth = 1e-4, support = 1e-8 }
reconstruction = 5e-2
free_energy_rise = 0.0
balance = 1e-2
sign = 1e-8
ou_lyapunov = 1e-12
ou_certificate = 1e-10
maxwell_identity = 1e-10
maxwell_z = 5.0
maxwell_abs = 1e-2
first_law = 2e-2
carnot_defect = 1e-12
pendulum_residual_rate = 1e-5
pendulum_balance = 0.05
histogram_factor = 3.0

# Artifacts (CSV columns)
stationary.csv            x0..x{n-1}, f, J0..J{n-1}
decomposition.csv         classification row, then quantity,value,threshold
decomposition_fields.csv  x0..x{n-1}, phi, j0..j{n-1}
ledger.csv                t, F, S, ep_overdamped, ep_nonadiabatic, E_in, dphi_dt, balance_residual, dF_dt, dS_dt, entropy_balance_residual
sigma_table.csv           alpha, h, sigma, sigma_se, theta, F_alpha, F_alpha_iso
carnot.csv                branch, alpha, F_alpha
carnot_corners.csv        theta, sigma, alpha, F_alpha
pendulum.csv              t, x, v, H, input, dissipation, residual
ensemble_stats.csv        t, mean_i, cov_ij
ensemble_final.bin        "DTSNAP01", u64 dim, u64 n_paths, f64 time, then n_paths*dim little-endian f64
ou_analytic.json          covariance, precision, current_coeff, A, M, Gamma, certificate
summary.json              metadata, model, seed, tolerances, classification, analyses[{name, files, values, checks}], pass
"#;
