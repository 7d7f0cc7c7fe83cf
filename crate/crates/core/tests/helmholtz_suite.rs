use difftherm::helmholtz::{
    boltzmann_entropy, canonical_partition, carnot_curves, first_law_residual, gaussian_canonical_summary,
    gaussian_sigma_analytic, maxwell_check, theta_and_force, virial_check, CarnotSpec, SamplerBox, SigmaTable,
};
use difftherm::model::PotentialSpec;
use difftherm::Matrix;
use nalgebra::DVector;

fn diag(v: &[f64]) -> Matrix {
    Matrix::from_diagonal(&DVector::from_vec(v.to_vec()))
}

fn steps(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[test]
fn monte_carlo_sigma_matches_closed_form() {
    for n in 1..=4 {
        let phi = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let bx = SamplerBox::cube(n, 1.05 * 2f64.sqrt()).unwrap();
        let col = boltzmann_entropy(&phi, &[1.0], &bx, 1_000_000, 100 + n as u64).unwrap();
        let (s, se) = (col.sigma[0].unwrap(), col.sigma_se[0].unwrap());
        let want = gaussian_sigma_analytic(&Matrix::identity(n, n), 1.0).unwrap();
        println!("n={n}: {s:.5} ± {se:.1e} vs {want:.5}");
        assert!((s - want).abs() <= 3.0 * se);
    }
}

#[test]
fn temperature_and_ideal_gas_law() {
    let h = steps(0.5, 3.0, 51);
    for n in [1usize, 2, 3] {
        let mut t = SigmaTable::gaussian(&h, &[0.9, 1.0, 1.1], |a| Matrix::identity(n, n) * a).unwrap();
        theta_and_force(&mut t).unwrap();
        for (ih, hv) in h.iter().enumerate() {
            let th = t.theta[1][ih].unwrap();
            assert!((th - 2.0 * hv / n as f64).abs() <= 0.01 * th);
        }
    }
    let a = steps(0.5, 2.0, 31);
    let mut t = SigmaTable::gaussian(&h, &a, |al| diag(&[al, 1.0])).unwrap();
    theta_and_force(&mut t).unwrap();
    for ia in 0..a.len() {
        for ih in 0..h.len() {
            let th = t.theta[ia][ih].unwrap();
            let af = a[ia] * t.f_alpha[ia][ih].unwrap();
            assert!((af - th / 2.0).abs() <= 0.01 * th / 2.0);
        }
    }
    let m = maxwell_check(&t).unwrap();
    assert!(m.identity_residual <= 1e-10);
    let fl = first_law_residual(&t).unwrap();
    println!("first-law closure {fl:.2e}, iso-route maxwell {:.2e}", m.max_residual);
    assert!(fl <= 0.02);
}

#[test]
fn maxwell_relation_on_monte_carlo_table() {
    let h = steps(0.5, 1.5, 11);
    let a = steps(0.8, 1.2, 5);
    let family = |x: &[f64], al: f64| 0.5 * (x[0] * x[0] / al + x[1] * x[1]);
    let bx = |al: f64| {
        let (w0, w1) = (1.05 * (3.0 * al).sqrt(), 1.05 * 3f64.sqrt());
        SamplerBox::new(vec![-w0, -w1], vec![w0, w1]).unwrap()
    };
    let mut t = SigmaTable::monte_carlo(&h, &a, family, bx, 1_000_000, 9).unwrap();
    theta_and_force(&mut t).unwrap();
    let m = maxwell_check(&t).unwrap();
    println!("maxwell max residual {:.2e}, max z {:.2}", m.max_residual, m.max_z);
    assert!(m.max_z <= 5.0);
    assert!(m.identity_residual <= 1e-12);
}

#[test]
fn virial_theorem_per_coordinate() {
    let aniso = PotentialSpec::quadratic(diag(&[0.25, 1.0])).unwrap();
    let bx = SamplerBox::new(vec![-3.2, -1.6], vec![3.2, 1.6]).unwrap();
    let r = virial_check(&aniso, 1.0, 0.02, &bx, 2_000_000, 5).unwrap();
    println!("{r:?}");
    assert!(r.max_pairwise_z <= 3.0);
    for k in 0..2 {
        let se = (r.theta_k_se[k].powi(2) + r.theta_vol_se.powi(2)).sqrt();
        assert!((r.theta_k[k] - r.theta_vol).abs() <= 3.0 * se);
    }

    let iso = PotentialSpec::isotropic(2);
    let r = virial_check(&iso, 1.0, 0.02, &SamplerBox::cube(2, 1.6).unwrap(), 1_000_000, 6).unwrap();
    for k in 0..2 {
        assert!((r.theta_k[k] - 1.01).abs() <= 3.0 * r.theta_k_se[k]);
    }

    let one = PotentialSpec::isotropic(1);
    let r = virial_check(&one, 0.5, 0.01, &SamplerBox::cube(1, 1.2).unwrap(), 1_000_000, 7).unwrap();
    assert!((r.theta_k[0] - 2.0 * 0.505).abs() <= 3.0 * r.theta_k_se[0]);
}

#[test]
fn partition_function_routes() {
    let phi1 = |x: &[f64]| 0.5 * x[0] * x[0];
    let r = canonical_partition(&phi1, 1.0, &SamplerBox::cube(1, 8.0).unwrap(), 1_000_000, 1).unwrap();
    assert!((r.z_direct - (2.0 * std::f64::consts::PI).sqrt()).abs() <= 1e-9);
    assert!(r.route_rel_diff <= 0.01);

    let phi2 = |x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1]);
    let r = canonical_partition(&phi2, 2.0, &SamplerBox::cube(2, 5.0).unwrap(), 4_000_000, 2).unwrap();
    println!("{r:?}");
    assert!((r.z_direct - std::f64::consts::PI).abs() <= 1e-9);
    assert!(r.route_rel_diff <= 0.01);
    assert!(r.beta_identity_residual <= 0.01);

    let dw = PotentialSpec::double_well(2);
    let r = canonical_partition(&|x: &[f64]| dw.value(x), 1.0, &SamplerBox::cube(2, 4.0).unwrap(), 4_000_000, 3).unwrap();
    println!("double well {r:?}");
    assert!(r.route_rel_diff <= 0.01);
}

#[test]
fn stirling_gap_decays_like_half_log_n() {
    // gap = ½ln(πn) + 1/(6n) + …: relative size ≈ 2.9% at n = 64
    for n in [8usize, 64, 512] {
        let s = gaussian_canonical_summary(&Matrix::identity(n, n), 1.0).unwrap();
        let asym = 0.5 * (std::f64::consts::PI * n as f64).ln();
        println!("n={n}: gap {:.4} ({:.2}%), ½ln(πn) {asym:.4}", s.stirling_gap, 100.0 * s.relative_gap());
        assert!((s.stirling_gap - asym).abs() <= 0.2 / n as f64);
    }
}

#[test]
fn carnot_corners_and_curves() {
    let spec = CarnotSpec { mu: 1.0, nu: 0.5, theta_hot: 2.0, theta_cold: 1.0, sigma_low: 0.0, sigma_high: 1.0 };
    let c = carnot_curves(&spec, 200).unwrap();
    let hot_low = &c.corners[0];
    assert_eq!((hot_low.theta, hot_low.sigma), (2.0, 0.0));
    assert_eq!((hot_low.alpha, hot_low.f_alpha), (0.25, 4.0));
    assert!(c.max_defect() <= 1e-12);
    let mut csv = Vec::new();
    c.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 4 * 200);
}
