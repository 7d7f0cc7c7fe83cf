use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _, Result};
use difftherm::fpe::{assemble_operator, evolve, evolve_strided, stationary_density, write_snapshot_csv, DiscreteOperator, Stationary};
use difftherm::helmholtz::{carnot_curves, first_law_residual, maxwell_check, theta_and_force, SamplerBox, SigmaTable};
use difftherm::mb::{decompose, decompose_analytic, DriftDecomposition};
use difftherm::numerics::lyapunov_residual;
use difftherm::ou::{ou_mb_certificate, ou_stationary};
use difftherm::sde::{
    driven_pendulum_ledger, histogram, histogram_l1_bound, l1_distance, simulate, write_snapshot_binary, EnsembleSpec,
    InitialCondition, PendulumSpec,
};
use difftherm::thermo::ledger;
use difftherm::{DiffusionModel, Grid, GridField, Matrix};
use serde_json::json;

use crate::config::{matrix, Analysis, ExperimentConfig, ModelConfig, PotentialConfig, SigmaSource};
use crate::report::AnalysisReport;

pub struct Context<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    model: Option<DiffusionModel>,
    grid: Option<Grid>,
    operator: Option<DiscreteOperator>,
    stationary: Option<Stationary>,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a ExperimentConfig, out: &Path) -> Result<Self> {
        let model = cfg.model.as_ref().map(ModelConfig::build).transpose().context("model")?;
        let grid = cfg.grid.as_ref().map(|g| g.build()).transpose().context("grid")?;
        if let (Some(m), Some(g)) = (&model, &grid) {
            if m.dim() != g.dim() {
                return Err(anyhow!("grid has dimension {} but model '{}' has dimension {}", g.dim(), m.label(), m.dim()));
            }
        }
        Ok(Self { cfg, out: out.to_path_buf(), model, grid, operator: None, stationary: None })
    }

    pub fn model_label(&self) -> Option<&str> {
        self.model.as_ref().map(|m| m.label())
    }

    pub fn run(&mut self, a: Analysis) -> Result<AnalysisReport> {
        let mut r = AnalysisReport::new(a.name());
        match a {
            Analysis::Stationary => self.stationary_report(&mut r),
            Analysis::Decompose => self.decompose(&mut r),
            Analysis::Ledger => self.ledger(&mut r),
            Analysis::Helmholtz => self.helmholtz(&mut r),
            Analysis::Carnot => self.carnot(&mut r),
            Analysis::Pendulum => self.pendulum(&mut r),
            Analysis::OuAnalytic => self.ou_analytic(&mut r),
            Analysis::Ensemble => self.ensemble(&mut r),
        }
        .with_context(|| format!("analysis '{}'", a.name()))?;
        Ok(r)
    }

    fn create(&self, r: &mut AnalysisReport, name: &str) -> Result<BufWriter<File>> {
        r.file(name);
        let path = self.out.join(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?))
    }

    fn model(&self) -> Result<&DiffusionModel> {
        self.model.as_ref().ok_or_else(|| anyhow!("no [model] section"))
    }

    fn grid(&self) -> Result<&Grid> {
        self.grid.as_ref().ok_or_else(|| anyhow!("no [grid] section"))
    }

    fn operator(&mut self) -> Result<&DiscreteOperator> {
        if self.operator.is_none() {
            self.operator = Some(assemble_operator(self.model()?, self.grid()?)?);
        }
        Ok(self.operator.as_ref().unwrap())
    }

    fn solve(&mut self) -> Result<&Stationary> {
        if self.stationary.is_none() {
            let st = stationary_density(self.operator()?)?;
            self.stationary = Some(st);
        }
        Ok(self.stationary.as_ref().unwrap())
    }

    fn stationary_report(&mut self, r: &mut AnalysisReport) -> Result<()> {
        let tol = self.cfg.tolerances.stationary_divergence;
        let mass_defect = self.operator()?.mass_defect();
        let st = self.solve()?;
        let (div, iterations, mass) = (st.divergence_max, st.iterations, st.density.integrate());
        let mut w = self.create(r, "stationary.csv")?;
        let st = self.stationary.as_ref().unwrap();
        write_snapshot_csv(&mut w, &st.density, Some(&st.current))?;
        w.flush()?;
        r.value("iterations", iterations);
        r.value("mass", mass);
        r.value("operator_mass_defect", mass_defect);
        r.at_most("max |div J^ss|", div, tol);
        r.at_most("|mass − 1|", (mass - 1.0).abs(), 1e-10);
        Ok(())
    }

    fn decompose(&mut self, r: &mut AnalysisReport) -> Result<()> {
        let tol = &self.cfg.tolerances;
        let d: DriftDecomposition = if self.cfg.decompose.analytic {
            decompose_analytic(self.model()?, self.grid()?, tol.decompose_analytic)?
        } else {
            self.solve()?;
            let st = self.stationary.as_ref().unwrap();
            decompose(self.model()?, &st.density, &st.current, tol.decompose)?
        };
        let mut w = self.create(r, "decomposition.csv")?;
        d.write_report(&mut w)?;
        w.flush()?;
        let mut w = self.create(r, "decomposition_fields.csv")?;
        write_fields(&mut w, &d.phi, &d.j)?;
        w.flush()?;
        r.value("classification", d.classification.to_string());
        r.value("source", if self.cfg.decompose.analytic { "analytic" } else { "grid" });
        r.value("j_norm", d.j_norm);
        r.value("div_j_norm", d.div_j_norm);
        r.value("orth_norm", d.orth_norm);
        r.value("orth_max", d.orth_max);
        r.value("reconstruction_residual", d.reconstruction_residual);
        r.value("thresholds", d.thresholds);
        r.at_most("reconstruction residual", d.reconstruction_residual, tol.reconstruction);
        if let Some(expect) = &self.cfg.decompose.expect {
            r.holds("expected classification", d.classification.to_string() == *expect, format!("expected {expect}, got {}", d.classification));
        }
        Ok(())
    }

    fn ledger(&mut self, r: &mut AnalysisReport) -> Result<()> {
        let lc = self.cfg.ledger.clone().ok_or_else(|| anyhow!("no [ledger] section"))?;
        let tol = self.cfg.tolerances.clone();
        let f0 = initial_density(self.grid()?, &lc.initial)?;
        self.solve()?;
        let op = self.operator.as_ref().unwrap();
        let fss = &self.stationary.as_ref().unwrap().density;
        let (snaps, diag) = evolve_strided(op, &f0, lc.dt, lc.steps, lc.stride)?;
        let l = ledger(&snaps, 0.0, lc.dt * lc.stride as f64, self.model()?, fss)?;
        let mut w = self.create(r, "ledger.csv")?;
        l.write_csv(&mut w)?;
        w.flush()?;

        let rise = l.free_energy.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
        let balance = (0..l.len())
            .filter_map(|k| Some(l.balance_residual[k]? / l.ep_overdamped[k].abs().max(f64::MIN_POSITIVE)))
            .fold(0.0, f64::max);
        let min_ep = l.ep_overdamped.iter().copied().fold(f64::INFINITY, f64::min);
        let min_e_in = l.e_in.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        r.value("snapshots", l.len());
        r.value("free_energy_initial", l.free_energy[0]);
        r.value("free_energy_final", *l.free_energy.last().unwrap());
        r.value("ep_initial", l.ep_overdamped[0]);
        r.value("clipped_mass", diag.clipped_mass.iter().sum::<f64>());
        r.at_most("max F(t+Δ) − F(t)", rise, tol.free_energy_rise);
        if l.e_in.iter().all(Option::is_some) {
            r.at_most("max |dF/dt − (E_in − e_p)| / e_p", balance, tol.balance);
            r.at_least("min E_in", min_e_in, -tol.sign);
        }
        r.at_least("min e_p", min_ep, -tol.sign);
        Ok(())
    }

    fn helmholtz(&mut self, r: &mut AnalysisReport) -> Result<()> {
        let hc = self.cfg.helmholtz.clone().ok_or_else(|| anyhow!("no [helmholtz] section"))?;
        let tol = self.cfg.tolerances.clone();
        let model = self.model()?;
        let potential = model.potential().ok_or_else(|| anyhow!("model '{}' has no potential", model.label()))?.clone();
        let n = potential.dim();
        let (h, a) = (hc.h.points(), hc.alpha.points());
        let family = move |x: &[f64], al: f64| {
            let mut y = x.to_vec();
            y[0] /= al.sqrt();
            potential.value(&y)
        };
        let mut table = match hc.method {
            SigmaSource::MonteCarlo => {
                let w = hc.box_half_width;
                let bx = move |al: f64| {
                    let mut hi = vec![w; n];
                    hi[0] *= al.sqrt();
                    SamplerBox::new(hi.iter().map(|v| -v).collect(), hi).expect("positive box")
                };
                SigmaTable::monte_carlo(&h, &a, family, bx, hc.samples, self.cfg.seed)?
            }
            SigmaSource::GridQuadrature => {
                let amax = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let per_axis = (hc.samples as f64).powf(1.0 / n as f64).round().max(2.0) as usize;
                let mut bounds = vec![(-hc.box_half_width, hc.box_half_width); n];
                bounds[0].1 *= amax.sqrt();
                bounds[0].0 = -bounds[0].1;
                let grid = Grid::new(&bounds, &vec![per_axis; n])?;
                SigmaTable::grid_quadrature(&h, &a, family, &grid)?
            }
            SigmaSource::Gaussian => {
                let k = self.quadratic_precision().ok_or_else(|| anyhow!("method 'gaussian' needs a quadratic potential"))?;
                let xi = k.try_inverse().ok_or_else(|| anyhow!("potential precision is singular"))?;
                SigmaTable::gaussian(&h, &a, |al| {
                    let mut s = Matrix::identity(n, n);
                    s[(0, 0)] = al.sqrt();
                    &s * &xi * &s
                })?
            }
        };
        theta_and_force(&mut table)?;
        let mut w = self.create(r, "sigma_table.csv")?;
        table.write_csv(&mut w)?;
        w.flush()?;
        let m = maxwell_check(&table)?;
        r.value("method", format!("{:?}", table.method));
        r.value("maxwell_max_residual", m.max_residual);
        r.at_most("Maxwell identity residual", m.identity_residual, tol.maxwell_identity);
        if hc.method == SigmaSource::MonteCarlo {
            r.at_most("Maxwell residual / SE", m.max_z, tol.maxwell_z);
        } else {
            r.at_most("Maxwell residual", m.max_residual, tol.maxwell_abs);
            if let Some(fl) = first_law_residual(&table) {
                r.at_most("first-law closure", fl, tol.first_law);
            }
        }
        Ok(())
    }

    /// Precision of the model potential when it is quadratic.
    fn quadratic_precision(&self) -> Option<Matrix> {
        match self.cfg.model.as_ref()? {
            ModelConfig::Ou { b, d, .. } => {
                let b = matrix(b, "B").ok()?;
                let n = b.nrows();
                let d = d.as_deref().map(|d| matrix(d, "D")).transpose().ok()?.unwrap_or_else(|| Matrix::identity(n, n));
                Some(ou_stationary(&b, &d, 1.0).ok()?.precision)
            }
            ModelConfig::Ao { phi, g } => phi.precision(g.len()),
            ModelConfig::Gradient { phi, .. } => phi.precision(self.model.as_ref()?.dim()),
            ModelConfig::KleinKramers { m, u, kbt, .. } => {
                let k = match u {
                    PotentialConfig::Harmonic { k } => *k,
                    PotentialConfig::Isotropic => 1.0,
                    PotentialConfig::Quadratic { k } => k.first()?.first().copied()?,
                    _ => return None,
                };
                let mut p = Matrix::zeros(2, 2);
                p[(0, 0)] = k / kbt;
                p[(1, 1)] = 1.0 / (m * kbt);
                Some(p)
            }
        }
    }

    fn carnot(&mut self, r: &mut AnalysisReport) -> Result<()> {
        let cc = self.cfg.carnot.clone().ok_or_else(|| anyhow!("no [carnot] section"))?;
        let curves = carnot_curves(&cc.spec(), cc.points)?;
        let mut w = self.create(r, "carnot.csv")?;
        curves.write_csv(&mut w)?;
        w.flush()?;
        let mut w = self.create(r, "carnot_corners.csv")?;
        writeln!(w, "theta,sigma,alpha,F_alpha")?;
        for c in &curves.corners {
            writeln!(w, "{},{},{},{}", c.theta, c.sigma, c.alpha, c.f_alpha)?;
        }
        w.flush()?;
        r.value("branches", curves.branches.iter().map(|b| b.label.clone()).collect::<Vec<_>>());
        r.value("corners", &curves.corners);
        r.at_most("max polyline defect", curves.max_defect(), self.cfg.tolerances.carnot_defect);
        Ok(())
    }

    fn pendulum(&mut self, r: &mut AnalysisReport) -> Result<()> {
        let pc = self.cfg.pendulum.clone().ok_or_else(|| anyhow!("no [pendulum] section"))?;
        let tol = &self.cfg.tolerances;
        let spec = PendulumSpec {
            mass: pc.mass,
            stiffness: pc.stiffness,
            eta: pc.eta,
            x0: pc.x0,
            v0: pc.v0,
            dt: pc.dt,
            t_final: pc.t_final,
            noise: pc.noise,
            seed: self.cfg.seed,
            record_every: pc.record_every,
        };
        let (amp, omega) = (pc.amplitude, pc.omega);
        let l = driven_pendulum_ledger(&spec, move |t| amp * (omega * t).cos())?;
        let mut w = self.create(r, "pendulum.csv")?;
        l.write_csv(&mut w)?;
        w.flush()?;
        let rate = l.times.iter().zip(&l.residual).map(|(t, res)| res / t.max(spec.dt)).fold(0.0, f64::max);
        let drift = l.energy.iter().map(|e| (e - l.energy[0]).abs()).fold(0.0, f64::max);
        r.value("mean_input_rate", l.mean_input_rate);
        r.value("mean_dissipation_rate", l.mean_dissipation_rate);
        r.value("max_energy_change", drift);
        r.at_most("max ledger residual / t", rate, tol.pendulum_residual_rate);
        if amp != 0.0 && pc.eta > 0.0 {
            let rel = (l.mean_dissipation_rate - l.mean_input_rate).abs() / l.mean_input_rate.abs();
            r.at_most("|⟨ηẋ²⟩ − ⟨ẋξ⟩| / ⟨ẋξ⟩", rel, tol.pendulum_balance);
        }
        Ok(())
    }

    fn ou_analytic(&mut self, r: &mut AnalysisReport) -> Result<()> {
        let Some(ModelConfig::Ou { b, d, beta }) = &self.cfg.model else {
            return Err(anyhow!("ou_analytic needs an 'ou' model"));
        };
        let tol = &self.cfg.tolerances;
        let b = matrix(b, "model.B")?;
        let n = b.nrows();
        let d = d.as_deref().map(|d| matrix(d, "model.D")).transpose()?.unwrap_or_else(|| Matrix::identity(n, n));
        let st = ou_stationary(&b, &d, beta.unwrap_or(1.0))?;
        let cert = ou_mb_certificate(&st);
        let lyap = lyapunov_residual(&b, &d, &st.xi_unit()) / (1.0 + d.norm());
        let rows = |m: &Matrix| (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>();
        let doc = json!({
            "beta": st.beta,
            "covariance": rows(&st.xi),
            "precision": rows(&st.precision),
            "current_coeff": rows(&st.current_coeff),
            "A": rows(&st.a),
            "M": st.m.as_ref().map(rows),
            "Gamma": st.gamma.as_ref().map(rows),
            "certificate": cert,
        });
        let mut w = self.create(r, "ou_analytic.json")?;
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w)?;
        w.flush()?;
        r.value("certificate", cert);
        r.at_most("Lyapunov residual / (1+|D|_F)", lyap, tol.ou_lyapunov);
        r.at_most("MB certificate residual", cert.max_residual(), tol.ou_certificate);
        Ok(())
    }

    fn ensemble(&mut self, r: &mut AnalysisReport) -> Result<()> {
        let ec = self.cfg.ensemble.clone().ok_or_else(|| anyhow!("no [ensemble] section"))?;
        let spec = EnsembleSpec::new(ec.n_paths, ec.dt, ec.t_final, ec.initial.clone(), self.cfg.seed).with_record_times(ec.record_times.clone());
        let e = simulate(self.model()?, &spec)?;
        let stats = e.stats();
        let mut w = self.create(r, "ensemble_stats.csv")?;
        stats.write_csv(&mut w)?;
        w.flush()?;
        let last = e.times.len() - 1;
        let mut w = self.create(r, "ensemble_final.bin")?;
        write_snapshot_binary(&mut w, e.times[last], e.dim, e.snapshot(last))?;
        w.flush()?;
        r.value("times", &e.times);
        r.value("final_mean", &stats.mean[last]);
        r.value("final_covariance", &stats.covariance[last]);
        let finite = e.samples.iter().all(|s| s.iter().all(|v| v.is_finite()));
        r.holds("all paths finite", finite, format!("{} paths", e.n_paths));

        // compare the final histogram with the grid evolution of the same initial law
        if self.grid.is_some() && matches!(ec.initial, InitialCondition::Gaussian { .. }) {
            let grid = self.grid()?.clone();
            let f0 = initial_density(&grid, &ec.initial)?;
            let steps = (e.times[last] / ec.dt).round() as usize;
            let (snaps, _) = evolve(self.operator()?, &f0, ec.dt, steps)?;
            let f1 = snaps.last().unwrap();
            let (h, outside) = histogram(e.snapshot(last), &grid);
            let ratio = l1_distance(&h, f1) / histogram_l1_bound(f1, e.n_paths);
            r.value("outside_fraction", outside);
            r.at_most("histogram L1 / binomial bound", ratio, self.cfg.tolerances.histogram_factor);
        }
        Ok(())
    }
}

fn initial_density(grid: &Grid, init: &InitialCondition) -> Result<GridField> {
    let InitialCondition::Gaussian { mean, cov } = init else {
        return Err(anyhow!("grid evolution needs a gaussian initial condition"));
    };
    if mean.len() != grid.dim() {
        return Err(anyhow!("initial mean has dimension {}, grid has {}", mean.len(), grid.dim()));
    }
    let p = matrix(cov, "initial.gaussian.cov")?.try_inverse().ok_or_else(|| anyhow!("initial covariance is singular"))?;
    let f = grid.sample(|x| {
        let dx: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for i in 0..dx.len() {
            for j in 0..dx.len() {
                q += dx[i] * p[(i, j)] * dx[j];
            }
        }
        (-0.5 * q).exp()
    });
    Ok(f.normalized()?)
}

fn write_fields<W: Write>(mut w: W, phi: &GridField, j: &difftherm::CurrentField) -> std::io::Result<()> {
    let n = phi.grid.dim();
    let mut head: Vec<String> = (0..n).map(|k| format!("x{k}")).collect();
    head.push("phi".into());
    head.extend((0..n).map(|k| format!("j{k}")));
    writeln!(w, "{}", head.join(","))?;
    for c in 0..phi.grid.len() {
        let mut row: Vec<String> = phi.grid.center(c).iter().map(f64::to_string).collect();
        row.push(phi.values[c].to_string());
        row.extend(j.at(c).iter().map(f64::to_string));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
