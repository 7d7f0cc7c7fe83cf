//! Shared numerical kernels: grids and quadrature, stencils, dense and
//! banded linear algebra, and reproducible random streams.

mod grid;
mod linalg;
mod rng;
mod sparse;

pub(crate) use grid::compensated_sum;
pub use grid::{grid_divergence, grid_gradient, grid_integrate, CurrentField, Grid, GridField};
pub use linalg::{
    check_stable, is_symmetric, lyapunov_residual, matrix_from_rows, matrix_to_rows, min_real_eigenvalue,
    min_symmetric_eigenvalue, psd_sqrt, solve_lyapunov, sym_antisym_split, Matrix, LYAPUNOV_MAX_DIM,
};
pub use rng::RngStream;
pub use sparse::{BandLu, SparseMatrix, TripletBuilder};
