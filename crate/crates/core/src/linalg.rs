//! Dense symmetric and compressed sparse matrices, the linear-operator
//! abstraction, and text export for matrices and vectors.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("invalid matrix/vector file: {0}")]
    InvalidFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(y: &mut [f64], alpha: f64) {
    for yi in y {
        *yi *= alpha;
    }
}

/// Abstract symmetric linear action v -> Mv.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply_into(&self, x: &[f64], y: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply_into(x, &mut y);
        y
    }
}

/// Identity, useful as a trivial preconditioner.
pub struct IdentityOperator(pub usize);

impl LinearOperator for IdentityOperator {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> LinearOperator for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        (self.1)(x, y)
    }
}

/// Dense symmetric matrix, packed lower triangle (row-major).
#[derive(Debug, Clone)]
pub struct DenseSymMatrix {
    pub n: usize,
    /// entries[i*(i+1)/2 + j] = A_ij for j <= i
    pub entries: Vec<f64>,
}

impl DenseSymMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseSymMatrix { n, entries: vec![0.0; n * (n + 1) / 2] }
    }

    #[inline]
    fn idx(i: usize, j: usize) -> usize {
        debug_assert!(j <= i);
        i * (i + 1) / 2 + j
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j <= i { (i, j) } else { (j, i) };
        self.entries[Self::idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if j <= i { (i, j) } else { (j, i) };
        self.entries[Self::idx(i, j)] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if j <= i { (i, j) } else { (j, i) };
        self.entries[Self::idx(i, j)] += v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.entries[Self::idx(i, i)]).collect()
    }

    /// In-place Cholesky on a copy; returns the pivots. Fails on the first
    /// non-positive pivot.
    pub fn cholesky_pivots(&self) -> Result<Vec<f64>, LinalgError> {
        let n = self.n;
        let mut l = self.entries.clone();
        let mut pivots = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = l[Self::idx(i, j)];
                for k in 0..j {
                    sum -= l[Self::idx(i, k)] * l[Self::idx(j, k)];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(LinalgError::NotPositiveDefinite { row: i, pivot: sum });
                    }
                    pivots.push(sum);
                    l[Self::idx(i, j)] = sum.sqrt();
                } else {
                    l[Self::idx(i, j)] = sum / l[Self::idx(j, j)];
                }
            }
        }
        Ok(pivots)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max over |A_ij - A_ji|; zero by construction for packed storage but
    /// kept for blocks assembled into full scratch buffers in tests.
    pub fn to_full(&self) -> Vec<f64> {
        let mut full = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                full[i * self.n + j] = self.get(i, j);
            }
        }
        full
    }
}

impl LinearOperator for DenseSymMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let n = self.n;
        // lower-triangle pass (rows) and transposed pass (columns), each
        // parallel over the output index
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let row = &self.entries[Self::idx(i, 0)..=Self::idx(i, i)];
            let mut sum = 0.0;
            for (j, a) in row.iter().enumerate() {
                sum += a * x[j];
            }
            // strict upper part: A_ji for j > i lives in rows j
            for j in (i + 1)..n {
                sum += self.entries[Self::idx(j, i)] * x[j];
            }
            *yi = sum;
        });
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CompressedMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CompressedMatrix {
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            row.dedup_by(|a, b| {
                if a.0 == b.0 {
                    b.1 += a.1;
                    true
                } else {
                    false
                }
            });
            for (j, v) in row {
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CompressedMatrix { n_rows, n_cols, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        for i in 0..self.n_rows {
            let mut sum = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                sum += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = sum;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows);
        let mut y = vec![0.0; self.n_cols];
        for i in 0..self.n_rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[k]] += self.values[k] * xi;
            }
        }
        y
    }

    /// Dense product (for tests and explicit-matrix checks).
    pub fn compose(&self, rhs: &CompressedMatrix) -> CompressedMatrix {
        assert_eq!(self.n_cols, rhs.n_rows);
        let mut triplets = Vec::new();
        for i in 0..self.n_rows {
            let mut acc: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let mid = self.col_idx[k];
                let v = self.values[k];
                for k2 in rhs.row_ptr[mid]..rhs.row_ptr[mid + 1] {
                    *acc.entry(rhs.col_idx[k2]).or_default() += v * rhs.values[k2];
                }
            }
            for (j, v) in acc {
                triplets.push((i, j, v));
            }
        }
        CompressedMatrix::from_triplets(self.n_rows, rhs.n_cols, &triplets)
    }
}

impl LinearOperator for CompressedMatrix {
    fn dim(&self) -> usize {
        self.n_rows
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.matvec_into(x, y)
    }
}

// ---------------------------------------------------------------------------
// text export (CSV with one-line header, 17 significant digits)
// ---------------------------------------------------------------------------

pub fn write_vector_csv(v: &[f64]) -> String {
    let mut out = String::from("index,value\n");
    for (i, x) in v.iter().enumerate() {
        out.push_str(&format!("{i},{x:.16e}\n"));
    }
    out
}

pub fn read_vector_csv(text: &str) -> Result<Vec<f64>, LinalgError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let _i = it.next();
        let v = it
            .next()
            .ok_or_else(|| LinalgError::InvalidFile(format!("line {ln}: missing value")))?;
        out.push(
            v.trim()
                .parse()
                .map_err(|_| LinalgError::InvalidFile(format!("line {ln}: bad value")))?,
        );
    }
    Ok(out)
}

pub fn write_dense_csv(a: &DenseSymMatrix) -> String {
    let mut out = String::from("row,col,value\n");
    for i in 0..a.n {
        for j in 0..=i {
            out.push_str(&format!("{i},{j},{:.16e}\n", a.get(i, j)));
        }
    }
    out
}

pub fn read_dense_csv(text: &str) -> Result<DenseSymMatrix, LinalgError> {
    let mut entries = Vec::new();
    let mut n = 0usize;
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let bad = |what: &str| LinalgError::InvalidFile(format!("line {ln}: {what}"));
        let i: usize = it.next().ok_or_else(|| bad("missing row"))?.trim().parse().map_err(|_| bad("bad row"))?;
        let j: usize = it.next().ok_or_else(|| bad("missing col"))?.trim().parse().map_err(|_| bad("bad col"))?;
        let v: f64 = it.next().ok_or_else(|| bad("missing value"))?.trim().parse().map_err(|_| bad("bad value"))?;
        n = n.max(i + 1).max(j + 1);
        entries.push((i, j, v));
    }
    let mut a = DenseSymMatrix::zeros(n);
    for (i, j, v) in entries {
        a.set(i, j, v);
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matvec_and_cholesky() {
        let mut a = DenseSymMatrix::zeros(3);
        a.set(0, 0, 4.0);
        a.set(1, 1, 5.0);
        a.set(2, 2, 6.0);
        a.set(1, 0, 1.0);
        a.set(2, 0, 0.5);
        a.set(2, 1, 2.0);
        let y = a.apply(&[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![4.0 + 2.0 + 1.5, 1.0 + 10.0 + 6.0, 0.5 + 4.0 + 18.0]);
        assert!(a.cholesky_pivots().unwrap().iter().all(|&p| p > 0.0));

        let mut ind = DenseSymMatrix::zeros(2);
        ind.set(0, 0, 1.0);
        ind.set(1, 1, -1.0);
        assert!(ind.cholesky_pivots().is_err());
    }

    #[test]
    fn csr_roundtrip_ops() {
        let p = CompressedMatrix::from_triplets(2, 3, &[(0, 1, 2.0), (1, 0, 1.0), (1, 2, 3.0), (0, 1, 0.5)]);
        assert_eq!(p.nnz(), 3);
        assert_eq!(p.matvec(&[1.0, 1.0, 1.0]), vec![2.5, 4.0]);
        assert_eq!(p.matvec_transpose(&[1.0, 1.0]), vec![1.0, 2.5, 3.0]);
        let i3 = CompressedMatrix::identity(3);
        let same = p.compose(&i3);
        assert_eq!(same.matvec(&[1.0, 2.0, 3.0]), p.matvec(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn csv_roundtrips_are_bit_exact() {
        let v = vec![1.0 / 3.0, -2.5e-17, 7.0];
        let text = write_vector_csv(&v);
        assert_eq!(read_vector_csv(&text).unwrap(), v);

        let mut a = DenseSymMatrix::zeros(2);
        a.set(0, 0, std::f64::consts::PI);
        a.set(1, 0, -1.0 / 7.0);
        a.set(1, 1, 1e-300);
        let text = write_dense_csv(&a);
        let b = read_dense_csv(&text).unwrap();
        assert_eq!(a.entries, b.entries);
    }
}
