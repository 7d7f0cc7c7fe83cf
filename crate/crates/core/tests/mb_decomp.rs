use difftherm::fpe::{assemble_operator, stationary_density};
use difftherm::mb::{
    beta_family_check, conservative_flow, conservative_flow_analytic, decompose, decompose_analytic,
    four_step_cycle_report, Classification, DriftDecomposition, SegmentKind, Thresholds,
};
use difftherm::model::{make_ao_constant, make_gradient_model, make_klein_kramers, make_ou, PotentialSpec};
use difftherm::numerics::matrix_from_rows;
use difftherm::{DiffusionModel, Grid, Matrix};

fn m(rows: &[&[f64]]) -> Matrix {
    matrix_from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rotating() -> DiffusionModel {
    make_ou(m(&[&[1.0, 2.0], &[-2.0, 1.0]]), Matrix::identity(2, 2), 1.0).unwrap()
}

fn grid_decomposition(model: &DiffusionModel, grid: &Grid) -> DriftDecomposition {
    let st = stationary_density(&assemble_operator(model, grid).unwrap()).unwrap();
    decompose(model, &st.density, &st.current, Thresholds::grid()).unwrap()
}

fn show(name: &str, d: &DriftDecomposition) {
    println!(
        "{name}: {} j {:.2e} div {:.2e} orth {:.2e}/{:.2e} rec {:.2e}",
        d.classification, d.j_norm, d.div_j_norm, d.orth_norm, d.orth_max, d.reconstruction_residual
    );
}

#[test]
fn grid_truth_table() {
    // walls far below the support threshold, so no-flux closure does not bend j
    let grid = Grid::cube(2, -7.0, 7.0, 201).unwrap();
    let dw = make_gradient_model(PotentialSpec::double_well(2), Matrix::identity(2, 2), 1.0).unwrap();
    let d = grid_decomposition(&dw, &Grid::cube(2, -2.5, 2.5, 81).unwrap());
    show("double well", &d);
    assert_eq!(d.classification, Classification::DetailedBalance);

    let kk = make_klein_kramers(1.0, PotentialSpec::isotropic(1), |_| 1.0, 1.0).unwrap();
    let ao = make_ao_constant(m(&[&[1.0, 1.0], &[-1.0, 1.0]]), PotentialSpec::isotropic(2)).unwrap();
    for (name, model) in [("rotating", rotating()), ("klein-kramers", kk), ("ao", ao)] {
        let d = grid_decomposition(&model, &grid);
        show(name, &d);
        assert_eq!(d.classification, Classification::MBEquilibrium, "{name}");
        assert!(d.div_j_norm <= 1e-2 && d.orth_norm <= 1e-2 && d.orth_max <= 1e-2, "{name}");
    }
}

#[test]
fn every_ou_stationary_state_is_mb() {
    // B = [[1,−1],[0,1]] is non-normal with BD ≠ DBᵀ, but its stationary
    // current is still tangent to the Gaussian level sets.
    let model = make_ou(m(&[&[1.0, -1.0], &[0.0, 1.0]]), Matrix::identity(2, 2), 1.0).unwrap();
    let a = decompose_analytic(&model, &Grid::cube(2, -5.0, 5.0, 81).unwrap(), Thresholds::default()).unwrap();
    show("non-normal analytic", &a);
    assert_eq!(a.classification, Classification::MBEquilibrium);
    let g = grid_decomposition(&model, &Grid::cube(2, -9.0, 9.0, 161).unwrap());
    show("non-normal grid", &g);
    assert_eq!(g.classification, Classification::MBEquilibrium);
}

#[test]
fn driven_field_is_flagged() {
    // a limit-cycle ring with rotation and a constant sideways push; the
    // circulation crosses the level sets of its own stationary density
    let model = DiffusionModel::custom(
        2,
        1.0,
        "tilted ring",
        |x: &[f64], out: &mut [f64]| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            out[0] = -x[0] * (r2 - 1.0) - 2.0 * x[1] + 3.0;
            out[1] = -x[1] * (r2 - 1.0) + 2.0 * x[0];
        },
        |_: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&[0.5, 0.0, 0.0, 0.5]);
        },
    )
    .unwrap();
    let d = grid_decomposition(&model, &Grid::cube(2, -2.5, 2.5, 81).unwrap());
    show("tilted ring", &d);
    assert_eq!(d.classification, Classification::DrivenNESS);
    assert!(d.orth_norm >= 10.0 * Thresholds::default().orth);
}

#[test]
fn beta_family() {
    let dw = make_gradient_model(PotentialSpec::double_well(1), Matrix::identity(1, 1), 1.0).unwrap();
    let grid = Grid::cube(1, -3.0, 3.0, 400).unwrap();
    let f1 = stationary_density(&assemble_operator(&dw, &grid).unwrap()).unwrap().density;
    let r = beta_family_check(&dw, &f1, &[1.0, 2.0, 4.0]).unwrap();
    println!("double well {:?}", r.entries);
    assert_eq!(r.entries[0].l1_error, 0.0);
    assert!(r.max_l1_error <= 1e-3);

    let ou = rotating();
    let grid = Grid::cube(2, -9.0, 9.0, 181).unwrap();
    let f1 = stationary_density(&assemble_operator(&ou, &grid).unwrap()).unwrap().density;
    let r = beta_family_check(&ou, &f1, &[0.5, 2.0]).unwrap();
    println!("rotating {:?}", r.entries);
    assert!(r.max_j_discrepancy <= 0.01);
}

#[test]
fn flows() {
    let r = conservative_flow_analytic(&rotating(), &[1.0, 0.0], 1e-3, 100.0).unwrap();
    println!("rotating drift {:e}", r.phi_drift);
    assert!(r.phi_drift <= 1e-8 && r.exit_time.is_none());
    let kk = make_klein_kramers(1.0, PotentialSpec::isotropic(1), |_| 1.0, 1.0).unwrap();
    let r = conservative_flow_analytic(&kk, &[1.0, 0.0], 1e-3, 100.0).unwrap();
    println!("kk drift {:e}", r.phi_drift);
    assert!(r.phi_drift <= 1e-8);

    // grid-interpolated j conserves φ to discretization accuracy
    let d = grid_decomposition(&rotating(), &Grid::cube(2, -5.0, 5.0, 101).unwrap());
    let r = conservative_flow(&d, &[1.0, 0.0], 1e-2, 10.0).unwrap();
    println!("grid drift {:e}", r.phi_drift);
    assert!(r.phi_drift <= 0.02);
}

#[test]
fn four_step_cycle() {
    let grid = Grid::cube(2, -5.0, 5.0, 161).unwrap();
    let d = decompose_analytic(&rotating(), &grid, Thresholds::default()).unwrap();
    // two φ-levels and two angles: iso-φ arcs joined by radial legs
    let (r_in, r_out) = (1.0f64, 2.0f64);
    let (a0, a1) = (0.3f64, 1.7f64);
    let arc = |r: f64, from: f64, to: f64| -> Vec<Vec<f64>> {
        (0..=40).map(|k| from + (to - from) * k as f64 / 40.0).map(|a| vec![r * a.cos(), r * a.sin()]).collect()
    };
    let mut loop_ = arc(r_in, a0, a1);
    loop_.extend(arc(r_out, a1, a0));
    loop_.push(loop_[0].clone());
    let r = four_step_cycle_report(&d, &loop_, 5e-3).unwrap();
    let kinds: Vec<_> = r.steps.iter().map(|s| s.kind).collect();
    println!("{kinds:?} total {:e}", r.total);
    assert_eq!(r.count(SegmentKind::Conservative), 2);
    assert_eq!(r.count(SegmentKind::Driven), 1);
    assert_eq!(r.count(SegmentKind::Dissipative), 1);
    assert!(r.total.abs() <= 1e-8);
}
