//! Dense linear algebra helpers built on nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense real matrix.
pub type Matrix = DMatrix<f64>;

/// Largest problem size accepted by [`solve_lyapunov`].
pub const LYAPUNOV_MAX_DIM: usize = 32;

/// Builds a matrix from nested rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Shape("matrix rows must be non-empty and of equal length".into()));
    }
    let m = Matrix::from_fn(r, c, |i, j| rows[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("matrix entries must be finite".into()));
    }
    Ok(m)
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn require_square(m: &Matrix, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

/// Smallest real part over the spectrum of `b`.
pub fn min_real_eigenvalue(b: &Matrix) -> f64 {
    b.complex_eigenvalues().iter().map(|z| z.re).fold(f64::INFINITY, f64::min)
}

/// Every eigenvalue of `b` has strictly positive real part, so `x' = -Bx`
/// is asymptotically stable.
pub fn check_stable(b: &Matrix) -> Result<()> {
    require_square(b, "B")?;
    let m = min_real_eigenvalue(b);
    if m > 0.0 {
        Ok(())
    } else {
        Err(Error::NotStable { min_real_part: m })
    }
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.nrows() == m.ncols() && (m - m.transpose()).norm() <= tol * (1.0 + m.norm())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &Matrix) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Solves `B Ξ + Ξ Bᵀ = 2D` by vectorization.
///
/// With column-major `vec`, `vec(BΞ) = (I⊗B) vec Ξ` and
/// `vec(ΞBᵀ) = (B⊗I) vec Ξ`, giving an `n² × n²` dense system. One step of
/// iterative refinement is applied before symmetrizing.
pub fn solve_lyapunov(b: &Matrix, d: &Matrix) -> Result<Matrix> {
    let n = require_square(b, "B")?;
    if d.shape() != (n, n) {
        return Err(Error::Shape(format!("D must be {n}x{n}, got {}x{}", d.nrows(), d.ncols())));
    }
    if n > LYAPUNOV_MAX_DIM {
        return Err(Error::Shape(format!("Lyapunov solve limited to n <= {LYAPUNOV_MAX_DIM}, got {n}")));
    }
    if !is_symmetric(d, 1e-12) {
        return Err(Error::Parameter("D must be symmetric".into()));
    }
    check_stable(b)?;

    let nn = n * n;
    let mut k = Matrix::zeros(nn, nn);
    for col in 0..n {
        for row in 0..n {
            let r = col * n + row;
            // (I ⊗ B): Σ_m B[row, m] Ξ[m, col]
            for m in 0..n {
                k[(r, col * n + m)] += b[(row, m)];
            }
            // (B ⊗ I): Σ_m Ξ[row, m] B[col, m]
            for m in 0..n {
                k[(r, m * n + row)] += b[(col, m)];
            }
        }
    }
    let rhs = nalgebra::DVector::from_iterator(nn, (d * 2.0).iter().copied());
    let lu = k.clone().lu();
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("Kronecker system for the Lyapunov equation is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("Lyapunov solve produced non-finite entries".into()));
    }
    let r = &rhs - &k * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let xi = Matrix::from_column_slice(n, n, x.as_slice());
    Ok((&xi + xi.transpose()) * 0.5)
}

/// Frobenius norm of `BΞ + ΞBᵀ − 2D`.
pub fn lyapunov_residual(b: &Matrix, d: &Matrix, xi: &Matrix) -> f64 {
    (b * xi + xi * b.transpose() - d * 2.0).norm()
}

/// `(M + Mᵀ)/2` and `(M − Mᵀ)/2`.
pub fn sym_antisym_split(m: &Matrix) -> Result<(Matrix, Matrix)> {
    require_square(m, "M")?;
    let t = m.transpose();
    Ok(((m + &t) * 0.5, (m - &t) * 0.5))
}

/// Symmetric square root `σ` with `σσᵀ = D` for a positive semi-definite
/// `D`; negative eigenvalues from round-off are clipped to zero.
pub fn psd_sqrt(d: &Matrix) -> Result<Matrix> {
    require_square(d, "D")?;
    let sym = (d + d.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = 1.0 + d.norm();
    if let Some(&lmin) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if lmin < -1e-10 * scale {
            return Err(Error::Parameter(format!("matrix is not positive semi-definite (eigenvalue {lmin:.3e})")));
        }
    }
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * Matrix::from_diagonal(&sqrt_vals) * q.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        matrix_from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn lyapunov_identity() {
        let i2 = Matrix::identity(2, 2);
        let xi = solve_lyapunov(&i2, &i2).unwrap();
        assert_abs_diff_eq!(xi, i2, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_rotating() {
        let b = m(&[&[1.0, 2.0], &[-2.0, 1.0]]);
        let xi = solve_lyapunov(&b, &Matrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(xi, Matrix::identity(2, 2), epsilon = 1e-13);
    }

    #[test]
    fn lyapunov_detailed_balance() {
        let b = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let xi = solve_lyapunov(&b, &Matrix::identity(2, 2)).unwrap();
        let expect = m(&[&[2.0 / 3.0, -1.0 / 3.0], &[-1.0 / 3.0, 2.0 / 3.0]]);
        assert_abs_diff_eq!(xi, expect, epsilon = 1e-13);
    }

    #[test]
    fn lyapunov_errors() {
        let unstable = m(&[&[-1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            solve_lyapunov(&unstable, &Matrix::identity(2, 2)),
            Err(Error::NotStable { .. })
        ));
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(solve_lyapunov(&rect, &Matrix::identity(2, 2)), Err(Error::Shape(_))));
    }

    fn random_case(seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=8);
        let mut b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let shift = 0.2 - min_real_eigenvalue(&b);
        if shift > 0.0 {
            b += Matrix::identity(n, n) * shift;
        }
        let c = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (b, &c * c.transpose())
    }

    #[test]
    fn lyapunov_random_residuals() {
        for seed in 0..100 {
            let (b, d) = random_case(seed);
            let xi = solve_lyapunov(&b, &d).unwrap();
            let res = lyapunov_residual(&b, &d, &xi);
            assert!(res <= 1e-12 * (1.0 + d.norm()), "seed {seed}: residual {res:e}");
            assert!((&xi - xi.transpose()).norm() <= 1e-13);
            assert!(min_symmetric_eigenvalue(&xi) >= -1e-12);
        }
    }

    #[test]
    fn split_examples() {
        let (s, a) = sym_antisym_split(&Matrix::identity(2, 2)).unwrap();
        assert_eq!(s, Matrix::identity(2, 2));
        assert_eq!(a, Matrix::zeros(2, 2));
        let rot = m(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let (s, a) = sym_antisym_split(&rot).unwrap();
        assert_eq!(s, Matrix::zeros(2, 2));
        assert_eq!(a, rot);
        let (s, a) = sym_antisym_split(&m(&[&[1.0, 2.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(s, m(&[&[1.0, 1.0], &[1.0, 1.0]]));
        assert_eq!(a, m(&[&[0.0, 1.0], &[-1.0, 0.0]]));
        assert!(sym_antisym_split(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn psd_sqrt_of_degenerate_matrix() {
        let d = m(&[&[0.0, 0.0], &[0.0, 0.3]]);
        let s = psd_sqrt(&d).unwrap();
        assert_abs_diff_eq!(&s * s.transpose(), d, epsilon = 1e-14);
        assert!(psd_sqrt(&m(&[&[1.0, 0.0], &[0.0, -1.0]])).is_err());
    }

    proptest! {
        #[test]
        fn split_recomposes(vals in proptest::collection::vec(-10.0f64..10.0, 9)) {
            let mm = Matrix::from_row_slice(3, 3, &vals);
            let (s, a) = sym_antisym_split(&mm).unwrap();
            prop_assert!((&s + &a - &mm).amax() <= 1e-14);
            prop_assert_eq!(s.transpose(), s.clone());
            prop_assert_eq!(a.transpose(), -a.clone());
        }
    }
}
