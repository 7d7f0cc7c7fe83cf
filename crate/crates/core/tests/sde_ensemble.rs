use difftherm::fpe::{assemble_operator, evolve};
use difftherm::model::{make_klein_kramers, make_ou, PotentialSpec};
use difftherm::numerics::matrix_from_rows;
use difftherm::sde::{
    driven_pendulum_ledger, estimate_current, histogram, histogram_l1_bound, l1_distance, simulate, EnsembleSpec,
    InitialCondition, PendulumSpec,
};
use difftherm::{Grid, Matrix};

fn m(rows: &[&[f64]]) -> Matrix {
    matrix_from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    dot / (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

#[test]
fn histogram_matches_grid_evolution() {
    let model = make_ou(Matrix::identity(1, 1), Matrix::identity(1, 1), 1.0).unwrap();
    let grid = Grid::cube(1, -6.0, 6.0, 200).unwrap();
    let (m0, v0) = (1.0, 0.5);
    let f0 = grid.sample(|x| (-(x[0] - m0).powi(2) / (2.0 * v0)).exp()).normalized().unwrap();
    let op = assemble_operator(&model, &grid).unwrap();
    let (snaps, _) = evolve(&op, &f0, 1e-3, 1000).unwrap();
    let f1 = snaps.last().unwrap();

    let spec = EnsembleSpec::new(100_000, 1e-3, 1.0, InitialCondition::Gaussian { mean: vec![m0], cov: vec![vec![v0]] }, 2024);
    let e = simulate(&model, &spec).unwrap();
    let (h, outside) = histogram(e.snapshot(0), &grid);
    let err = l1_distance(&h, f1);
    let bound = histogram_l1_bound(f1, spec.n_paths);
    println!("L1 {err:.4e} bound {bound:.4e} outside {outside}");
    assert!(err <= 3.0 * bound);

    let again = simulate(&model, &spec).unwrap();
    let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(e.snapshot(0)), bits(again.snapshot(0)));
}

#[test]
fn weak_order_one_in_dt() {
    // stiff drift and weak noise so the bias dominates the sampling error
    let model = make_ou(m(&[&[10.0]]), m(&[&[0.01]]), 1.0).unwrap();
    let exact = (-1.0f64).exp();
    let errs: Vec<f64> = [4e-3, 2e-3, 1e-3]
        .iter()
        .map(|&dt| {
            let spec = EnsembleSpec::new(100_000, dt, 0.1, InitialCondition::Point(vec![1.0]), 5);
            (simulate(&model, &spec).unwrap().stats().mean[0][0] - exact).abs()
        })
        .collect();
    println!("weak errors {errs:?}");
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn rotating_ou_stationary_covariance_and_circulation_sign() {
    let model = make_ou(m(&[&[1.0, 2.0], &[-2.0, 1.0]]), Matrix::identity(2, 2), 1.0).unwrap();
    let tau = 0.25;
    let spec = EnsembleSpec::new(
        100_000,
        1e-3,
        5.0 + tau,
        InitialCondition::Gaussian { mean: vec![0.0, 0.0], cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]] },
        11,
    )
    .with_record_times(vec![5.0, 5.0 + tau]);
    let e = simulate(&model, &spec).unwrap();
    let st = e.stats();
    for k in 0..4 {
        let want = if k % 3 == 0 { 1.0 } else { 0.0 };
        assert!((st.covariance[0][k] - want).abs() <= 3.0 * st.covariance_se[0][k], "cov[{k}] {}", st.covariance[0][k]);
    }
    // ⟨y(t+τ)x(t)⟩ − ⟨x(t+τ)y(t)⟩ = 2e^{−τ}sin 2τ for counter-clockwise circulation
    let (a, b) = (e.snapshot(0), e.snapshot(1));
    let terms: Vec<f64> = a.chunks(2).zip(b.chunks(2)).map(|(p, q)| q[1] * p[0] - q[0] * p[1]).collect();
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let se = (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let want = 2.0 * (-tau).exp() * (2.0 * tau).sin();
    println!("asymmetry {mean:.4} ± {se:.4} want {want:.4}");
    assert!(mean > 5.0 * se);
    assert!((mean - want).abs() <= 3.0 * se);
}

#[test]
fn current_estimates() {
    let grid = Grid::cube(2, -3.0, 3.0, 20).unwrap();
    let gauss = |cov: [[f64; 2]; 2]| InitialCondition::Gaussian { mean: vec![0.0, 0.0], cov: cov.iter().map(|r| r.to_vec()).collect() };

    // detailed balance: Ξ = B⁻¹ for symmetric B and D = I
    let b = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
    let xi = b.clone().try_inverse().unwrap();
    let model = make_ou(b, Matrix::identity(2, 2), 1.0).unwrap();
    let spec = EnsembleSpec::new(100_000, 1e-2, 0.5, gauss([[xi[(0, 0)], xi[(0, 1)]], [xi[(1, 0)], xi[(1, 1)]]]), 1);
    let e = simulate(&model, &spec).unwrap();
    let est = estimate_current(e.snapshot(0), &grid, &model).unwrap();
    let (mut ok, mut total) = (0, 0);
    for c in (0..grid.len()).filter(|&c| !est.is_missing(c)) {
        for k in 0..2 {
            total += 1;
            ok += (est.current.at(c)[k].abs() <= 3.0 * est.std_error.at(c)[k]) as usize;
        }
    }
    println!("detailed balance: {ok}/{total} within 3 SE");
    assert!(ok as f64 >= 0.95 * total as f64);
    assert!(est.current.at(0).iter().all(|v| v.is_nan()) == est.is_missing(0));

    let identity = gauss([[1.0, 0.0], [0.0, 1.0]]);
    let rot = make_ou(m(&[&[1.0, 2.0], &[-2.0, 1.0]]), Matrix::identity(2, 2), 1.0).unwrap();
    let kk = make_klein_kramers(1.0, PotentialSpec::isotropic(1), |_| 1.0, 1.0).unwrap();
    // j(x) for each model: rotating OU (−2y, 2x), harmonic Klein–Kramers (y, −x)
    let cases: [(&str, _, fn(&[f64]) -> [f64; 2]); 2] =
        [("rotating", rot, |x| [-2.0 * x[1], 2.0 * x[0]]), ("klein-kramers", kk, |x| [x[1], -x[0]])];
    for (name, model, j) in cases {
        let spec = EnsembleSpec::new(200_000, 1e-2, 0.5, identity.clone(), 2);
        let e = simulate(&model, &spec).unwrap();
        let est = estimate_current(e.snapshot(0), &grid, &model).unwrap();
        let (mut got, mut want) = (Vec::new(), Vec::new());
        for c in (0..grid.len()).filter(|&c| est.counts[c] >= 100) {
            let x = grid.center(c);
            let f = (-0.5 * (x[0] * x[0] + x[1] * x[1])).exp() / (2.0 * std::f64::consts::PI);
            got.extend_from_slice(est.current.at(c));
            want.extend(j(&x).iter().map(|v| v * f));
        }
        let cos = cosine(&got, &want);
        println!("{name}: cosine {cos:.4} over {} cells", got.len() / 2);
        assert!(cos >= 0.9, "{name}");
    }
}

#[test]
fn pendulum_long_run_balance() {
    let spec = PendulumSpec { mass: 1.0, stiffness: 1.0, eta: 0.1, x0: 1.0, v0: 0.0, dt: 1e-3, t_final: 2000.0, noise: 0.0, seed: 0, record_every: 1000 };
    let l = driven_pendulum_ledger(&spec, |t| 0.5 * (0.9 * t).cos()).unwrap();
    let rel = (l.mean_dissipation_rate - l.mean_input_rate).abs() / l.mean_input_rate.abs();
    println!("⟨ηẋ²⟩ {:.5} ⟨ẋξ⟩ {:.5} rel {rel:.2e}", l.mean_dissipation_rate, l.mean_input_rate);
    assert!(rel <= 0.05);
    assert!(l.times.iter().zip(&l.residual).all(|(t, r)| *r <= 1e-5 * t.max(spec.dt)));
}
