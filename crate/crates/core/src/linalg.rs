//! Dense real linear algebra: a row-major matrix type plus the handful of
//! factorizations the rest of the crate needs (thin SVD by one-sided Jacobi,
//! symmetric eigendecomposition by cyclic Jacobi, pseudoinverse, best rank-k).
//!
//! Factorizations are deterministic: identical input bits give identical
//! output bits. Column signs are fixed by making the largest-magnitude entry
//! of every left singular vector (resp. eigenvector) positive.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweep limit for the Jacobi iterations.
pub const MAX_SWEEPS: usize = 10_000;

/// Default relative cutoff for [`pinv`].
pub const DEFAULT_RCOND: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row: Vec<String> = self.row(i).iter().take(8).map(|v| format!("{v:>10.4e}")).collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Build from row-major data. Rejects wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidDims("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Self::from_vec_unchecked(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        Ok(())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let (m, n) = (self.rows, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_vec_unchecked(m, n, out))
    }

    /// `selfᵀ * other` without forming the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                context: "t_matmul",
                expected: self.rows,
                got: other.rows,
            });
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_vec_unchecked(m, n, out))
    }

    /// `self * otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                context: "matmul_t",
                expected: self.cols,
                got: other.cols,
            });
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out[i * n + j] = dot(a, other.row(j));
            }
        }
        Ok(Self::from_vec_unchecked(m, n, out))
    }

    pub fn mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "mat_vec",
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn fro_norm(&self) -> f64 {
        fro_norm_sq(self).sqrt()
    }

    /// Columns `0..k`.
    pub fn first_columns(&self, k: usize) -> Self {
        Self::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(idx.len(), self.cols, data)
    }

    /// `(A + Aᵀ)/2`.
    pub fn symmetrize(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Sum of squared entries.
pub fn fro_norm_sq(a: &DenseMatrix) -> f64 {
    a.data().iter().map(|v| v * v).sum()
}

/// Thin singular value decomposition `A = U diag(S) Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × r`, orthonormal columns.
    pub u: DenseMatrix,
    /// Length `r = min(m, n)`, nonincreasing.
    pub s: Vec<f64>,
    /// `n × r`, orthonormal columns.
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let us = DenseMatrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul_t(&self.v).expect("svd factors are conformant")
    }

    /// Number of singular values above `rcond * s[0]`.
    pub fn numerical_rank(&self, rcond: f64) -> usize {
        match self.s.first() {
            Some(&s0) if s0 > 0.0 => self.s.iter().take_while(|&&s| s > rcond * s0).count(),
            _ => 0,
        }
    }
}

/// Column-major scratch copy used by the Jacobi sweeps.
fn columns_of(a: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..a.cols()).map(|j| a.column(j)).collect()
}

fn from_columns(rows: usize, cols: &[Vec<f64>]) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Flip `col` so that its largest-magnitude entry (first on ties) is positive.
/// Returns whether a flip happened.
fn canonical_sign(col: &mut [f64]) -> bool {
    let mut best = 0usize;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    if col.get(best).is_some_and(|&v| v < 0.0) {
        col.iter_mut().for_each(|v| *v = -*v);
        true
    } else {
        false
    }
}

/// Extend `cols` (orthonormal) until it holds `target` orthonormal vectors,
/// drawing candidates from the standard basis.
fn complete_orthonormal(cols: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut e = 0;
    while cols.len() < target && e < dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for c in cols.iter() {
                let p = dot(&cand, c);
                cand.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm2(&cand);
        if n > 1e-8 {
            cand.iter_mut().for_each(|x| *x /= n);
            cols.push(cand);
        }
    }
}

/// One-sided Jacobi on a tall matrix (`rows >= cols`).
fn svd_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut w = columns_of(a);
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m.max(1) as f64);
    // Columns below this squared norm are roundoff from a rank deficiency;
    // rotating them against each other never settles.
    let fro_sq: f64 = w.iter().map(|c| dot(c, c)).sum();
    let negligible = tol * tol * fro_sq;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&w[p], &w[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (wp, wq) = split_pair(&mut w, p, q);
                rotate(wp, wq, c, s);
                let (vp, vq) = split_pair(&mut v, p, q);
                rotate(vp, vq, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::IterationLimitExceeded(MAX_SWEEPS));
    }

    let mut order: Vec<(f64, usize)> = w.iter().enumerate().map(|(j, c)| (norm2(c), j)).collect();
    // Stable descending sort; ties keep column order.
    order.sort_by(|x, y| y.0.total_cmp(&x.0));

    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut zero_cols = Vec::new();
    for &(sigma, j) in &order {
        let sigma = if sigma * sigma <= negligible { 0.0 } else { sigma };
        s.push(sigma);
        v_cols.push(v[j].clone());
        if sigma > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / sigma).collect());
        } else {
            zero_cols.push(u_cols.len());
            u_cols.push(Vec::new());
        }
    }
    if !zero_cols.is_empty() {
        let mut basis: Vec<Vec<f64>> = u_cols.iter().filter(|c| !c.is_empty()).cloned().collect();
        let have = basis.len();
        complete_orthonormal(&mut basis, m, n);
        for (slot, extra) in zero_cols.into_iter().zip(basis.into_iter().skip(have)) {
            u_cols[slot] = extra;
        }
    }
    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if canonical_sign(uc) {
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SvdResult {
        u: from_columns(m, &u_cols),
        s,
        v: from_columns(n, &v_cols),
    })
}

fn split_pair<T>(v: &mut [T], p: usize, q: usize) -> (&mut T, &mut T) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd"));
    }
    if a.rows() >= a.cols() {
        return svd_tall(a);
    }
    let t = svd_tall(&a.transpose())?;
    // Swap roles, then re-impose the sign convention on the new U.
    let mut u_cols = columns_of(&t.v);
    let mut v_cols = columns_of(&t.u);
    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if canonical_sign(uc) {
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SvdResult {
        u: from_columns(a.rows(), &u_cols),
        s: t.s,
        v: from_columns(a.cols(), &v_cols),
    })
}

/// Largest singular value.
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64> {
    Ok(svd(a)?.s.first().copied().unwrap_or(0.0))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in nonincreasing order and the matching eigenvectors
/// as columns. The input is symmetrized as `(A + Aᵀ)/2` after checking that
/// its asymmetry is at most `1e-8` (relative to `max(1, max|A|)`).
pub fn sym_eig(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("sym_eig"));
    }
    let n = rows;
    let asym = a.max_abs_diff(&a.transpose());
    if asym > 1e-8 * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let mut m = a.symmetrize();
    let mut v = DenseMatrix::identity(n);
    let total = fro_norm_sq(&m);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= (f64::EPSILON * f64::EPSILON) * total || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::IterationLimitExceeded(MAX_SWEEPS));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vec_cols: Vec<Vec<f64>> = order.iter().map(|&i| v.column(i)).collect();
    for c in vec_cols.iter_mut() {
        canonical_sign(c);
    }
    Ok((values, from_columns(n, &vec_cols)))
}

/// Moore-Penrose pseudoinverse; singular values at or below `rcond * s[0]`
/// are treated as zero.
pub fn pinv(a: &DenseMatrix, rcond: f64) -> Result<DenseMatrix> {
    let f = svd(a)?;
    let cutoff = rcond * f.s.first().copied().unwrap_or(0.0);
    let r = f.s.len();
    let inv: Vec<f64> =
        f.s.iter()
            .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 })
            .collect();
    // V diag(inv) Uᵀ
    let vs = DenseMatrix::from_fn(f.v.rows(), r, |i, j| f.v[(i, j)] * inv[j]);
    vs.matmul_t(&f.u)
}

/// Eckart-Young optimal rank-`k` approximation.
pub fn best_rank_k(a: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let (rows, cols) = a.shape();
    if k == 0 || k > rows.min(cols) {
        return Err(Error::InvalidRank { k, rows, cols });
    }
    let f = svd(a)?;
    Ok(truncated_product(&f, k))
}

/// `U_k diag(S_k) V_kᵀ` from an existing factorization.
pub fn truncated_product(f: &SvdResult, k: usize) -> DenseMatrix {
    let k = k.min(f.s.len());
    let us = DenseMatrix::from_fn(f.u.rows(), k, |i, j| f.u[(i, j)] * f.s[j]);
    us.matmul_t(&f.v.first_columns(k)).expect("conformant")
}

/// `‖A − A_k‖_F² = Σ_{i>k} σᵢ²`.
pub fn rank_k_residual(a: &DenseMatrix, k: usize) -> Result<f64> {
    let f = svd(a)?;
    Ok(f.s.iter().skip(k).map(|s| s * s).sum())
}

/// Orthonormal basis of the column space of `a` by Gram-Schmidt with column
/// pivoting. Columns whose residual norm falls below `tol * max column norm`
/// are treated as dependent. Returns an `m × p` matrix with `p = rank`.
pub fn column_space_basis(a: &DenseMatrix, tol: f64) -> DenseMatrix {
    let m = a.rows();
    let mut work = columns_of(a);
    let scale = work.iter().map(|c| norm2(c)).fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if scale == 0.0 {
        return DenseMatrix::zeros(m, 0);
    }
    while let Some((idx, best)) = work
        .iter()
        .enumerate()
        .map(|(j, c)| (j, norm2(c)))
        .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
    {
        if best <= tol * scale {
            break;
        }
        let mut q = work.swap_remove(idx);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&q, b);
                q.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nq = norm2(&q);
        q.iter_mut().for_each(|x| *x /= nq);
        for c in work.iter_mut() {
            let p = dot(c, &q);
            c.iter_mut().zip(&q).for_each(|(x, y)| *x -= p * y);
        }
        basis.push(q);
    }
    from_columns(m, &basis)
}

/// Orthogonal projector `Q Qᵀ` onto the column space of `a`.
pub fn column_projector(a: &DenseMatrix, tol: f64) -> DenseMatrix {
    let q = column_space_basis(a, tol);
    q.matmul_t(&q).expect("conformant")
}

/// Thin QR by modified Gram-Schmidt with one reorthogonalization pass.
/// Returns `Q` (`m × n`, orthonormal columns) for a full-column-rank input.
pub fn thin_q(a: &DenseMatrix) -> Result<DenseMatrix> {
    let (m, n) = a.shape();
    if n > m {
        return Err(Error::InvalidDims(format!("thin_q needs rows >= cols, got {m}x{n}")));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut c = a.column(j);
        for _ in 0..2 {
            for b in &q {
                let p = dot(&c, b);
                c.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nc = norm2(&c);
        if nc <= 1e-14 {
            return Err(Error::InvalidRank { k: j, rows: m, cols: n });
        }
        c.iter_mut().for_each(|x| *x /= nc);
        q.push(c);
    }
    Ok(from_columns(m, &q))
}
