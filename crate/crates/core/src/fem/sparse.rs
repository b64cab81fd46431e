//! Symmetric sparse matrices on a fixed pattern and an envelope LDLᵀ solver.

use std::sync::Arc;

use crate::error::{Result, SqpError};
use crate::exec;

/// CSR sparsity pattern of a square matrix with a structural diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    diag_pos: Vec<usize>,
}

impl Pattern {
    /// Builds the pattern from (row, col) pairs. Diagonal entries are always
    /// included; duplicates are merged.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Arc<Self> {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (i, j) in pairs {
            rows[i].push(j);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut diag_pos = Vec::with_capacity(n);
        row_ptr.push(0);
        for (i, mut r) in rows.into_iter().enumerate() {
            r.sort_unstable();
            r.dedup();
            let base = col_idx.len();
            diag_pos.push(base + r.binary_search(&i).expect("diagonal present"));
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        Arc::new(Self {
            n,
            row_ptr,
            col_idx,
            diag_pos,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Storage position of entry `(i, j)`.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi].binary_search(&j).ok().map(|k| lo + k)
    }

    pub fn row(&self, i: usize) -> (&[usize], std::ops::Range<usize>) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], r)
    }
}

/// Square sparse matrix with values on a shared [`Pattern`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: &Arc<Pattern>) -> Self {
        Self {
            pattern: Arc::clone(pattern),
            values: vec![0.0; pattern.nnz()],
        }
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn size(&self) -> usize {
        self.pattern.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn add_at_position(&mut self, pos: usize, v: f64) {
        self.values[pos] += v;
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (i, &x) in d.iter().enumerate() {
            self.values[self.pattern.diag_pos[i]] += x;
        }
    }

    /// `self += a * other` (same pattern required).
    pub fn axpy(&mut self, a: f64, other: &SparseMatrix) {
        debug_assert!(Arc::ptr_eq(&self.pattern, &other.pattern) || self.pattern == other.pattern);
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|x| *x *= a);
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.pattern;
        exec::map_indexed(p.n, |i| {
            let (cols, r) = p.row(i);
            cols.iter().zip(&self.values[r]).map(|(&j, a)| a * x[j]).sum()
        })
    }

    /// Replaces rows and columns flagged in `fixed` by identity rows.
    pub fn constrain(&mut self, fixed: &[bool]) {
        let p = Arc::clone(&self.pattern);
        for i in 0..p.n {
            let (cols, r) = p.row(i);
            for (k, &j) in r.zip(cols) {
                if fixed[i] || fixed[j] {
                    self.values[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// Largest `|a_ij − a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let p = &self.pattern;
        let mut worst = 0.0f64;
        for i in 0..p.n {
            let (cols, r) = p.row(i);
            for (k, &j) in r.zip(cols) {
                worst = worst.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Envelope (skyline) `LDLᵀ` factorization of a symmetric matrix.
///
/// No pivoting is performed; the factorization fails on a vanishing pivot,
/// which cannot happen for the positive definite and quasi-definite systems
/// assembled here.
#[derive(Debug, Clone)]
pub struct EnvelopeLdl {
    n: usize,
    first: Vec<usize>,
    start: Vec<usize>,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

impl EnvelopeLdl {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let p = a.pattern();
        let n = p.n;
        let mut first = vec![0; n];
        for (i, f) in first.iter_mut().enumerate() {
            let (cols, _) = p.row(i);
            *f = cols[0].min(i);
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + (i - first[i]));
        }
        let mut lower = vec![0.0; start[n]];
        let mut diag = vec![0.0; n];
        let scale = a
            .values()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for i in 0..n {
            let fi = first[i];
            let (cols, r) = p.row(i);
            let row_base = start[i];
            for (&j, &v) in cols.iter().zip(&a.values()[r]) {
                if j < i {
                    lower[row_base + (j - fi)] = v;
                } else if j == i {
                    diag[i] = v;
                }
            }
            // lower[row_base + k - fi] holds g_k = L_ik D_k while sweeping
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut s = lower[row_base + (j - fi)];
                let ri = &lower[row_base + (lo - fi)..row_base + (j - fi)];
                let rj = &lower[start[j] + (lo - fj)..start[j] + (j - fj)];
                s -= ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>();
                lower[row_base + (j - fi)] = s;
            }
            let mut d = diag[i];
            for j in fi..i {
                let g = lower[row_base + (j - fi)];
                let l = g / diag[j];
                d -= g * l;
                lower[row_base + (j - fi)] = l;
            }
            if !(d.abs() > 1e-14 * scale) || !d.is_finite() {
                return Err(SqpError::LinearAlgebra(format!(
                    "zero pivot {d:.3e} at row {i} of {n}"
                )));
            }
            diag[i] = d;
        }
        Ok(Self {
            n,
            first,
            start,
            lower,
            diag,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Number of negative pivots (the inertia's negative count).
    pub fn negative_pivots(&self) -> usize {
        self.diag.iter().filter(|d| **d < 0.0).count()
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.lower[self.start[i]..self.start[i + 1]];
            let s: f64 = row.iter().zip(&x[fi..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in 0..n {
            x[i] /= self.diag[i];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let xi = x[i];
            let row = &self.lower[self.start[i]..self.start[i + 1]];
            for (l, v) in row.iter().zip(&mut x[fi..i]) {
                *v -= l * xi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
