//! Compressed sparse rows and a banded LU factorization with partial pivoting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Square sparse matrix in CSR layout with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    n: usize,
    rows: Vec<BTreeMap<usize, f64>>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, rows: vec![BTreeMap::new(); n] }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        *self.rows[row].entry(col).or_insert(0.0) += value;
    }

    pub fn build(self) -> SparseMatrix {
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in self.rows {
            for (c, v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix { n: self.n, row_ptr, col_idx, values }
    }
}

impl SparseMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut b = TripletBuilder::new(self.n);
        for (i, j, v) in self.triplets() {
            b.add(j, i, v);
        }
        b.build()
    }

    /// `diag(left) · self · diag(right)`.
    pub fn scale(&self, left: &[f64], right: &[f64]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.values[k] *= left[i] * right[self.col_idx[k]];
            }
        }
        out
    }

    /// `a·self + b·other`.
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Self {
        let mut t = TripletBuilder::new(self.n);
        for (i, j, v) in self.triplets() {
            t.add(i, j, a * v);
        }
        for (i, j, v) in other.triplets() {
            t.add(i, j, b * v);
        }
        t.build()
    }

    /// `self + shift·I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut t = TripletBuilder::new(self.n);
        for (i, j, v) in self.triplets() {
            t.add(i, j, v);
        }
        for i in 0..self.n {
            t.add(i, i, shift);
        }
        t.build()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for (_, j, v) in self.triplets() {
            s[j] += v;
        }
        s
    }

    /// Lower and upper bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        self.triplets().fold((0, 0), |(kl, ku), (i, j, _)| {
            if i > j {
                (kl.max(i - j), ku)
            } else {
                (kl, ku.max(j - i))
            }
        })
    }

    pub fn to_dense(&self) -> crate::numerics::Matrix {
        let mut m = crate::numerics::Matrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }
}

/// LU factors of a banded matrix, LAPACK `gbtrf` style.
///
/// Row `i` keeps columns `[i - kl, i + kl + ku]`; the extra `kl`
/// super-diagonals hold fill-in from row interchanges.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let n = a.dim();
        let (kl, ku) = a.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut data = vec![0.0; n * width];
        for (i, j, v) in a.triplets() {
            data[i * width + j + kl - i] = v;
        }
        let mut lu = Self { n, kl, ku, width, data, pivots: vec![0; n] };
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        lu.eliminate(scale)?;
        Ok(lu)
    }

    #[inline]
    fn pos(&self, i: usize, j: usize) -> usize {
        i * self.width + j + self.kl - i
    }

    fn eliminate(&mut self, scale: f64) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.pos(k, k)].abs();
            for i in k + 1..=last {
                let v = self.data[self.pos(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > scale * 1e-300) || !best.is_finite() {
                return Err(Error::Numerical(format!("zero pivot in banded LU at column {k}")));
            }
            self.pivots[k] = p;
            let jend = (k + kl + ku + 1).min(n);
            if p != k {
                for j in k..jend {
                    let (a, b) = (self.pos(k, j), self.pos(p, j));
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.pos(k, k)];
            let len = jend - (k + 1);
            for i in k + 1..=last {
                let ik = self.pos(i, k);
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                if l == 0.0 || len == 0 {
                    continue;
                }
                let src = self.pos(k, k + 1);
                let dst = self.pos(i, k + 1);
                // rows k and i are disjoint ranges since i > k
                let (head, tail) = self.data.split_at_mut(dst);
                let srow = &head[src..src + len];
                for (d, s) in tail[..len].iter_mut().zip(srow) {
                    *d -= l * s;
                }
            }
        }
        Ok(())
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    b[i] -= self.data[self.pos(i, k)] * bk;
                }
            }
        }
        for i in (0..n).rev() {
            let jend = (i + kl + ku + 1).min(n);
            let start = self.pos(i, i);
            let row = &self.data[start..start + (jend - i)];
            let mut s = b[i];
            for (a, x) in row[1..].iter().zip(&b[i + 1..jend]) {
                s -= a * x;
            }
            b[i] = s / row[0];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded(n: usize, kl: usize, ku: usize, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TripletBuilder::new(n);
        for i in 0..n {
            t.add(i, i, rng.random_range(0.01..0.1));
            for j in i.saturating_sub(kl)..(i + ku + 1).min(n) {
                if rng.random_bool(0.7) {
                    t.add(i, j, rng.random_range(-1.0..1.0));
                }
            }
        }
        t.build()
    }

    #[test]
    fn band_lu_matches_dense_solve() {
        for (seed, (n, kl, ku)) in [(30, 2, 3), (50, 5, 1), (17, 0, 4), (40, 7, 7)].into_iter().enumerate() {
            let a = random_banded(n, kl, ku, seed as u64);
            let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let x = BandLu::factor(&a).unwrap().solve(&b);
            let r = a.matvec(&x);
            let err = r.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "residual {err:e}");
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut t = TripletBuilder::new(3);
        t.add(0, 0, 1.0);
        t.add(1, 1, 1.0);
        assert!(BandLu::factor(&t.build()).is_err());
    }

    #[test]
    fn transpose_and_scale() {
        let a = random_banded(6, 1, 2, 9);
        let at = a.transpose();
        for (i, j, v) in a.triplets() {
            assert_eq!(at.get(j, i), v);
        }
        let s = a.scale(&[2.0; 6], &[0.5; 6]);
        for (i, j, v) in a.triplets() {
            assert_eq!(s.get(i, j), v);
        }
    }
}
