//! Uniform rectangular grids with cell-centred samples and midpoint quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lo, hi]` split into equal cells along every axis.
///
/// Cells are addressed by a flat index with axis 0 varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    counts: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(bounds: &[(f64, f64)], counts: &[usize]) -> Result<Self> {
        if bounds.is_empty() || bounds.len() != counts.len() {
            return Err(Error::Shape(format!(
                "grid needs one count per axis ({} bounds, {} counts)",
                bounds.len(),
                counts.len()
            )));
        }
        let mut lo = Vec::with_capacity(bounds.len());
        let mut hi = Vec::with_capacity(bounds.len());
        let mut spacing = Vec::with_capacity(bounds.len());
        let mut strides = Vec::with_capacity(bounds.len());
        let mut stride = 1usize;
        for (axis, (&(a, b), &n)) in bounds.iter().zip(counts).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::Parameter(format!("axis {axis}: need lo < hi, got [{a}, {b}]")));
            }
            if n < 3 {
                return Err(Error::Parameter(format!("axis {axis}: need at least 3 cells, got {n}")));
            }
            lo.push(a);
            hi.push(b);
            spacing.push((b - a) / n as f64);
            strides.push(stride);
            stride *= n;
        }
        Ok(Self { lo, hi, counts: counts.to_vec(), spacing, strides })
    }

    /// Same interval and resolution on every axis.
    pub fn cube(dim: usize, lo: f64, hi: f64, count: usize) -> Result<Self> {
        Self::new(&vec![(lo, hi); dim], &vec![count; dim])
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Quadrature weight of a single cell (product of spacings).
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Lebesgue volume of the whole box.
    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// Coordinate of cell centre `i` along `axis`.
    #[inline]
    pub fn axis_center(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i as f64 + 0.5) * self.spacing[axis]
    }

    /// Index of cell `idx` along `axis`.
    #[inline]
    pub fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.counts[axis]
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        (0..self.dim()).map(|a| self.axis_index(idx, a)).collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn center_into(&self, idx: usize, out: &mut [f64]) {
        for (axis, o) in out.iter_mut().enumerate() {
            *o = self.axis_center(axis, self.axis_index(idx, axis));
        }
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.center_into(idx, &mut x);
        x
    }

    /// Neighbouring cell one step up (`+1`) or down (`-1`) along `axis`.
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, up: bool) -> Option<usize> {
        let i = self.axis_index(idx, axis);
        if up {
            (i + 1 < self.counts[axis]).then(|| idx + self.strides[axis])
        } else {
            (i > 0).then(|| idx - self.strides[axis])
        }
    }

    /// Cell containing `x`, if inside the box.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for axis in 0..self.dim() {
            let t = (x[axis] - self.lo[axis]) / self.spacing[axis];
            if !(t >= 0.0) || t >= self.counts[axis] as f64 {
                return None;
            }
            idx += (t as usize).min(self.counts[axis] - 1) * self.strides[axis];
        }
        Some(idx)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(a, &v)| v >= self.lo[a] && v <= self.hi[a])
    }

    /// True when the cell touches the boundary of the box.
    pub fn is_boundary_cell(&self, idx: usize) -> bool {
        (0..self.dim()).any(|a| {
            let i = self.axis_index(idx, a);
            i == 0 || i + 1 == self.counts[a]
        })
    }

    /// Evaluate a scalar function at every cell centre.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> GridField {
        let mut x = vec![0.0; self.dim()];
        let values = (0..self.len())
            .map(|i| {
                self.center_into(i, &mut x);
                f(&x)
            })
            .collect();
        GridField { grid: self.clone(), values }
    }

    /// Evaluate a vector function at every cell centre.
    pub fn sample_vector(&self, f: impl Fn(&[f64], &mut [f64])) -> CurrentField {
        let n = self.dim();
        let mut x = vec![0.0; n];
        let mut values = vec![0.0; self.len() * n];
        for (i, chunk) in values.chunks_mut(n).enumerate() {
            self.center_into(i, &mut x);
            f(&x, chunk);
        }
        CurrentField { grid: self.clone(), values }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.counts == other.counts && self.lo == other.lo && self.hi == other.hi
    }
}

/// Scalar field sampled at cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values but grid has {} cells",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        Self { grid: grid.clone(), values: vec![c; grid.len()] }
    }

    /// Midpoint-rule integral.
    pub fn integrate(&self) -> f64 {
        weighted_sum(&self.values, &self.grid)
    }

    /// Rescales so that the integral equals one.
    pub fn normalized(mut self) -> Result<Self> {
        let mass = self.integrate();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Domain(format!("cannot normalize field with mass {mass}")));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(self)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Multilinear interpolation between cell centres; points between the
    /// outermost centres and the box edge are clamped to the nearest centre.
    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        interpolate_components(&self.grid, x, 1, &self.values).map(|v| v[0])
    }
}

/// Vector field with `dim` components per cell, stored cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl CurrentField {
    pub fn zeros(grid: &Grid) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.len() * grid.dim()] }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    #[inline]
    pub fn at(&self, cell: usize) -> &[f64] {
        let n = self.dim();
        &self.values[cell * n..(cell + 1) * n]
    }

    #[inline]
    pub fn at_mut(&mut self, cell: usize) -> &mut [f64] {
        let n = self.dim();
        &mut self.values[cell * n..(cell + 1) * n]
    }

    /// Single component as a scalar field.
    pub fn component(&self, k: usize) -> GridField {
        let n = self.dim();
        GridField {
            grid: self.grid.clone(),
            values: self.values.iter().skip(k).step_by(n).copied().collect(),
        }
    }

    pub fn interpolate(&self, x: &[f64]) -> Option<Vec<f64>> {
        interpolate_components(&self.grid, x, self.dim(), &self.values)
    }
}

fn interpolate_components(grid: &Grid, x: &[f64], ncomp: usize, values: &[f64]) -> Option<Vec<f64>> {
    if x.len() != grid.dim() || !grid.contains(x) {
        return None;
    }
    let dim = grid.dim();
    let mut base = vec![0usize; dim];
    let mut frac = vec![0.0; dim];
    for a in 0..dim {
        let t = ((x[a] - grid.lo[a]) / grid.spacing[a] - 0.5).clamp(0.0, (grid.counts[a] - 1) as f64);
        let i = (t.floor() as usize).min(grid.counts[a] - 2);
        base[a] = i;
        frac[a] = t - i as f64;
    }
    let mut out = vec![0.0; ncomp];
    for corner in 0..(1usize << dim) {
        let mut w = 1.0;
        let mut idx = 0;
        for a in 0..dim {
            let up = (corner >> a) & 1 == 1;
            w *= if up { frac[a] } else { 1.0 - frac[a] };
            idx += (base[a] + up as usize) * grid.strides[a];
        }
        if w != 0.0 {
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * values[idx * ncomp + c];
            }
        }
    }
    Some(out)
}

/// Neumaier-compensated sum in index order.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn weighted_sum(values: &[f64], grid: &Grid) -> f64 {
    compensated_sum(values.iter().copied()) * grid.volume() / grid.len() as f64
}

/// Midpoint-rule integral of `field` over `grid`.
pub fn grid_integrate(field: &GridField, grid: &Grid) -> Result<f64> {
    if !field.grid.same_shape(grid) || field.values.len() != grid.len() {
        return Err(Error::Shape("field is not sampled on the given grid".into()));
    }
    Ok(weighted_sum(&field.values, grid))
}

/// Central differences in the interior, first-order one-sided differences
/// in boundary cells.
pub fn grid_gradient(field: &GridField) -> CurrentField {
    let grid = &field.grid;
    let n = grid.dim();
    let mut out = CurrentField::zeros(grid);
    for idx in 0..grid.len() {
        for axis in 0..n {
            let h = grid.spacing[axis];
            let up = grid.neighbor(idx, axis, true);
            let down = grid.neighbor(idx, axis, false);
            let d = match (down, up) {
                (Some(dn), Some(u)) => (field.values[u] - field.values[dn]) / (2.0 * h),
                (None, Some(u)) => (field.values[u] - field.values[idx]) / h,
                (Some(dn), None) => (field.values[idx] - field.values[dn]) / h,
                (None, None) => unreachable!("grid axes have at least 3 cells"),
            };
            out.values[idx * n + axis] = d;
        }
    }
    out
}

/// Divergence with the same stencil as [`grid_gradient`].
pub fn grid_divergence(field: &CurrentField) -> GridField {
    let grid = &field.grid;
    let n = grid.dim();
    let mut values = vec![0.0; grid.len()];
    for axis in 0..n {
        let comp = field.component(axis);
        let h = grid.spacing[axis];
        for (idx, v) in values.iter_mut().enumerate() {
            let up = grid.neighbor(idx, axis, true);
            let down = grid.neighbor(idx, axis, false);
            *v += match (down, up) {
                (Some(dn), Some(u)) => (comp.values[u] - comp.values[dn]) / (2.0 * h),
                (None, Some(u)) => (comp.values[u] - comp.values[idx]) / h,
                (Some(dn), None) => (comp.values[idx] - comp.values[dn]) / h,
                (None, None) => unreachable!(),
            };
        }
    }
    GridField { grid: grid.clone(), values }
}
