//! Learned sketches for low-rank approximation.
//!
//! For a sketch `B ∈ R^{ℓ×n}` and data `X ∈ R^{n×d}`, `B_k(X)` is the best
//! rank-`k` approximation of `X` whose rows lie in the row space of `BX`:
//! with `V` an orthonormal basis of that row space, `B_k(X) = [XV]_k Vᵀ`.
//! Its residual satisfies `‖X − B_k(X)‖_F² = ‖X‖_F² − Σ_{i≤k} σᵢ(XV)²`,
//! which is what training differentiates. The gradient reaches `B` through
//! the SVD of `S = BX` ([`svd_backward`]).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::butterfly::TruncatedButterfly;
use crate::error::{Error, Result};
use crate::fjlt::sample_fjlt;
use crate::grad::{minimize, Objective, TrainConfig, TrainTrace};
use crate::linalg::{dot, fro_norm_sq, rank_k_residual, svd, truncated_product, DenseMatrix, SvdResult};
use crate::rng::{normal, rademacher, sample_subset, Rng, RngExt};

/// Relative cutoff for the numerical rank of `BX`.
pub const SKETCH_RCOND: f64 = 1e-10;

/// Relative spectral gap (in squared singular values) below which gradients
/// are treated as undefined.
pub const GAP_MIN_REL: f64 = 1e-6;

/// Relative residual below which a parameter direction counts as preserving
/// `rowspace(BX)`.
const GAUGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SketchKind {
    LearnedButterfly(TruncatedButterfly),
    /// `positions[c]` lists the `N` rows holding column `c`'s nonzeros;
    /// `values[c * N + t]` is the value at `positions[c][t]`.
    LearnedSparse {
        positions: Vec<Vec<usize>>,
        values: Vec<f64>,
    },
    /// One `±1` per column at `rows[c]`.
    RandomCountSketch {
        rows: Vec<usize>,
        signs: Vec<f64>,
    },
    /// I.i.d. `N(0, 1/ℓ)` entries.
    Gaussian(DenseMatrix),
    /// Any explicit dense sketch.
    Dense(DenseMatrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchMatrix {
    kind: SketchKind,
    ell: usize,
    n: usize,
}

impl SketchMatrix {
    pub fn new(kind: SketchKind, ell: usize, n: usize) -> Result<Self> {
        match &kind {
            SketchKind::LearnedButterfly(b) => {
                if b.ell() != ell || b.n_in() != n {
                    return Err(Error::ShapeMismatch {
                        expected: ell * n,
                        got: b.ell() * b.n_in(),
                    });
                }
            }
            SketchKind::LearnedSparse { positions, values } => {
                let per = positions.first().map_or(0, Vec::len);
                if positions.len() != n || values.len() != n * per || per == 0 || per > ell {
                    return Err(Error::InvalidDims(format!(
                        "sparse sketch needs {n} columns with the same 1..={ell} nonzeros each"
                    )));
                }
                for col in positions {
                    let mut sorted = col.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    if col.len() != per || sorted.len() != per || sorted.last().is_some_and(|&r| r >= ell) {
                        return Err(Error::InvalidDims(format!("bad sparse column positions {col:?}")));
                    }
                }
            }
            SketchKind::RandomCountSketch { rows, signs } => {
                if rows.len() != n || signs.len() != n || rows.iter().any(|&r| r >= ell) {
                    return Err(Error::InvalidDims("bad CountSketch layout".into()));
                }
            }
            SketchKind::Gaussian(m) | SketchKind::Dense(m) => {
                if m.shape() != (ell, n) {
                    return Err(Error::ShapeMismatch {
                        expected: ell * n,
                        got: m.rows() * m.cols(),
                    });
                }
            }
        }
        Ok(Self { kind, ell, n })
    }

    pub fn dense(m: DenseMatrix) -> Self {
        let (ell, n) = m.shape();
        Self {
            kind: SketchKind::Dense(m),
            ell,
            n,
        }
    }

    pub fn kind(&self) -> &SketchKind {
        &self.kind
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            SketchKind::LearnedButterfly(_) => "butterfly",
            SketchKind::LearnedSparse { .. } => "sparse",
            SketchKind::RandomCountSketch { .. } => "countsketch",
            SketchKind::Gaussian(_) => "gaussian",
            SketchKind::Dense(_) => "dense",
        }
    }

    pub fn materialize(&self) -> DenseMatrix {
        match &self.kind {
            SketchKind::LearnedButterfly(b) => b.materialize(),
            SketchKind::LearnedSparse { positions, values } => {
                let mut m = DenseMatrix::zeros(self.ell, self.n);
                let per = positions.first().map_or(0, Vec::len);
                for (c, rows) in positions.iter().enumerate() {
                    for (t, &r) in rows.iter().enumerate() {
                        m[(r, c)] = values[c * per + t];
                    }
                }
                m
            }
            SketchKind::RandomCountSketch { rows, signs } => {
                let mut m = DenseMatrix::zeros(self.ell, self.n);
                for (c, (&r, &s)) in rows.iter().zip(signs).enumerate() {
                    m[(r, c)] = s;
                }
                m
            }
            SketchKind::Gaussian(m) | SketchKind::Dense(m) => m.clone(),
        }
    }

    /// `B·X`.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.n {
            return Err(Error::DimensionMismatch {
                context: "sketch apply",
                expected: self.n,
                got: x.rows(),
            });
        }
        match &self.kind {
            SketchKind::LearnedButterfly(b) => b.apply_matrix(x),
            SketchKind::Gaussian(m) | SketchKind::Dense(m) => m.matmul(x),
            SketchKind::LearnedSparse { .. } | SketchKind::RandomCountSketch { .. } => {
                let mut out = DenseMatrix::zeros(self.ell, x.cols());
                for (r, c, v) in self.nonzeros() {
                    out.row_mut(r).iter_mut().zip(x.row(c)).for_each(|(o, xi)| *o += v * xi);
                }
                Ok(out)
            }
        }
    }

    /// `(row, col, value)` triples of sparse kinds, column by column.
    pub fn nonzeros(&self) -> Vec<(usize, usize, f64)> {
        match &self.kind {
            SketchKind::LearnedSparse { positions, values } => {
                let per = positions.first().map_or(0, Vec::len);
                positions
                    .iter()
                    .enumerate()
                    .flat_map(|(c, rows)| rows.iter().enumerate().map(move |(t, &r)| (r, c, values[c * per + t])))
                    .collect()
            }
            SketchKind::RandomCountSketch { rows, signs } => rows
                .iter()
                .zip(signs)
                .enumerate()
                .map(|(c, (&r, &s))| (r, c, s))
                .collect(),
            _ => {
                let m = self.materialize();
                (0..self.n)
                    .flat_map(|c| (0..self.ell).map(move |r| (r, c)))
                    .filter(|&(r, c)| m[(r, c)] != 0.0)
                    .map(|(r, c)| (r, c, m[(r, c)]))
                    .collect()
            }
        }
    }

    /// Trainable values: gadget weights or sparse nonzero values.
    pub fn trainable(&self) -> Option<&[f64]> {
        match &self.kind {
            SketchKind::LearnedButterfly(b) => Some(b.net().weights()),
            SketchKind::LearnedSparse { values, .. } => Some(values),
            _ => None,
        }
    }

    /// Trainable coordinates the loss cannot depend on because they only
    /// change `B` by an invertible left factor, which preserves the row
    /// space of `BX`: gadgets whose reachable outputs are all kept, and
    /// sparse values alone in their row. Their gradient is identically zero.
    pub fn gauge_params(&self) -> Vec<usize> {
        match &self.kind {
            SketchKind::LearnedButterfly(b) => {
                let n_pow2 = b.n_pow2();
                let depth = b.net().depth();
                let mut kept = vec![false; n_pow2];
                b.kept().iter().for_each(|&r| kept[r] = true);
                let mut out = Vec::new();
                for layer in 0..depth {
                    let low = (1usize << layer) - 1;
                    for g in 0..n_pow2 / 2 {
                        let (j1, _) = crate::butterfly::gadget_pair(layer, g);
                        // Later layers flip bits above `layer`; the low bits stay.
                        let all_kept = (0..n_pow2).filter(|x| x & low == j1 & low).all(|x| kept[x]);
                        if all_kept {
                            let base = layer * 2 * n_pow2 + 4 * g;
                            out.extend(base..base + 4);
                        }
                    }
                }
                out
            }
            SketchKind::LearnedSparse { positions, .. } => {
                let per = positions.first().map_or(0, Vec::len);
                let mut count = vec![0usize; self.ell];
                positions.iter().flatten().for_each(|&r| count[r] += 1);
                positions
                    .iter()
                    .enumerate()
                    .flat_map(|(c, rows)| rows.iter().enumerate().map(move |(t, &r)| (c * per + t, r)))
                    .filter(|&(_, r)| count[r] == 1)
                    .map(|(i, _)| i)
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    /// Trainable coordinates not in [`gauge_params`](Self::gauge_params).
    pub fn identifiable_params(&self) -> Vec<usize> {
        let gauge: std::collections::BTreeSet<usize> = self.gauge_params().into_iter().collect();
        (0..self.trainable().map_or(0, <[f64]>::len))
            .filter(|i| !gauge.contains(i))
            .collect()
    }

    fn set_trainable(&mut self, params: &[f64]) -> Result<()> {
        let dst: &mut [f64] = match &mut self.kind {
            SketchKind::LearnedButterfly(b) => b.net_mut().weights_mut(),
            SketchKind::LearnedSparse { values, .. } => values,
            _ => {
                return Err(Error::InvalidDims(format!(
                    "{} sketches have no trainable values",
                    self.label()
                )))
            }
        };
        if dst.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: dst.len(),
                got: params.len(),
            });
        }
        dst.copy_from_slice(params);
        Ok(())
    }

    /// COO text: header `ell,n`, then one `row,col,value` line per nonzero.
    pub fn to_coo(&self) -> String {
        let mut s = format!("{},{}\n", self.ell, self.n);
        for (r, c, v) in self.nonzeros() {
            let _ = writeln!(s, "{r},{c},{v:?}");
        }
        s
    }

    /// Parse COO text into a `LearnedSparse` sketch; every column must hold
    /// the same number of nonzeros.
    pub fn from_coo(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedFile("empty COO file".into()))?;
        let parse_usize = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::MalformedFile(format!("bad integer {t:?}")))
        };
        let head: Vec<&str> = header.split(',').collect();
        let [ell, n] = head[..] else {
            return Err(Error::MalformedFile(format!("bad COO header {header:?}")));
        };
        let (ell, n) = (parse_usize(ell)?, parse_usize(n)?);
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for line in lines {
            let parts: Vec<&str> = line.split(',').collect();
            let [r, c, v] = parts[..] else {
                return Err(Error::MalformedFile(format!("bad COO line {line:?}")));
            };
            let (r, c) = (parse_usize(r)?, parse_usize(c)?);
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::MalformedFile(format!("bad value in {line:?}")))?;
            if r >= ell || c >= n {
                return Err(Error::DimMismatch(format!("entry ({r},{c}) outside {ell}x{n}")));
            }
            cols[c].push((r, v));
        }
        let positions = cols.iter().map(|col| col.iter().map(|e| e.0).collect()).collect();
        let values = cols.iter().flat_map(|col| col.iter().map(|e| e.1)).collect();
        Self::new(SketchKind::LearnedSparse { positions, values }, ell, n)
            .map_err(|e| Error::MalformedFile(e.to_string()))
    }

    /// Butterfly sketches use the butterfly binary format, the rest COO text.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match &self.kind {
            SketchKind::LearnedButterfly(b) => b.save(path),
            _ => Ok(std::fs::write(path, self.to_coo())?),
        }
    }
}

/// Baseline sketch families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RandomCountSketch,
    Gaussian,
}

pub fn sample_baseline(kind: BaselineKind, ell: usize, n: usize, rng: &mut Rng) -> Result<SketchMatrix> {
    if ell == 0 || ell > n {
        return Err(Error::InvalidDims(format!(
            "baseline sketch needs 1 <= ell <= n, got {ell}x{n}"
        )));
    }
    match kind {
        BaselineKind::RandomCountSketch => {
            let rows = (0..n).map(|_| rng.random_range(0..ell)).collect();
            let signs = (0..n).map(|_| rademacher(rng)).collect();
            SketchMatrix::new(SketchKind::RandomCountSketch { rows, signs }, ell, n)
        }
        BaselineKind::Gaussian => {
            let sd = 1.0 / (ell as f64).sqrt();
            let m = DenseMatrix::from_fn(ell, n, |_, _| sd * normal(rng));
            SketchMatrix::new(SketchKind::Gaussian(m), ell, n)
        }
    }
}

/// Sparse sketch with `per_col` distinct random rows per column and random
/// `±1/√per_col` values (a CountSketch when `per_col = 1`).
pub fn sample_sparse(ell: usize, n: usize, per_col: usize, rng: &mut Rng) -> Result<SketchMatrix> {
    if per_col == 0 || per_col > ell {
        return Err(Error::InvalidDims(format!(
            "need 1 <= N <= ell = {ell}, got N = {per_col}"
        )));
    }
    let mag = 1.0 / (per_col as f64).sqrt();
    let positions: Vec<Vec<usize>> = (0..n).map(|_| sample_subset(rng, ell, per_col)).collect();
    let values = (0..n * per_col).map(|_| mag * rademacher(rng)).collect();
    SketchMatrix::new(SketchKind::LearnedSparse { positions, values }, ell, n)
}

fn check_k(b: &SketchMatrix, x: &DenseMatrix, k: usize) -> Result<()> {
    if k == 0 || k > b.ell() || k > x.rows().min(x.cols()) {
        return Err(Error::InvalidRank {
            k,
            rows: b.ell(),
            cols: x.cols(),
        });
    }
    Ok(())
}

/// Orthonormal basis `V` (`d×r`) of the row space of `S`.
fn row_basis(f: &SvdResult) -> (usize, DenseMatrix) {
    let r = f.numerical_rank(SKETCH_RCOND);
    (r, f.v.first_columns(r))
}

/// `B_k(X) = [XV]_k Vᵀ`.
pub fn sketch_rank_k(b: &SketchMatrix, x: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    check_k(b, x, k)?;
    let (_, v) = row_basis(&svd(&b.apply(x)?)?);
    let z = x.matmul(&v)?;
    truncated_product(&svd(&z)?, k).matmul_t(&v)
}

/// `‖X − B_k(X)‖_F²` via the singular values of `XV`.
pub fn sketch_residual(b: &SketchMatrix, x: &DenseMatrix, k: usize) -> Result<f64> {
    check_k(b, x, k)?;
    let (_, v) = row_basis(&svd(&b.apply(x)?)?);
    let s = svd(&x.matmul(&v)?)?.s;
    let captured: f64 = s.iter().take(k).map(|v| v * v).sum();
    Ok((fro_norm_sq(x) - captured).max(0.0))
}

/// `mean ‖X − B_k(X)‖² − mean ‖X − X_k‖²` over the test set.
pub fn err_metric(b: &SketchMatrix, testset: &[DenseMatrix], k: usize) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut total = 0.0;
    for x in testset {
        total += sketch_residual(b, x, k)? - rank_k_residual(x, k)?;
    }
    Ok(total / testset.len() as f64)
}

/// Gradient with respect to `S` of a loss that depends on `S` only through
/// the right singular vectors `V` (the first `rank` columns of `f.v`), given
/// `∂L/∂V`.
///
/// `∂L/∂S = U[Σ(F∘(VᵀV̄ − V̄ᵀV))]Vᵀ + UΣ⁻¹V̄ᵀ(I − VVᵀ)` with
/// `F_ij = 1/(σⱼ² − σᵢ²)`. Denominators are clamped to `gap_min` in
/// magnitude; when a clamped pair actually carries gradient the call fails
/// with `DegenerateSpectrum`.
pub fn svd_backward_factored(f: &SvdResult, rank: usize, dl_dv: &DenseMatrix, gap_min: f64) -> Result<DenseMatrix> {
    let r = rank.min(f.s.len());
    let (m, d) = (f.u.rows(), f.v.rows());
    if dl_dv.shape() != (d, r) {
        return Err(Error::ShapeMismatch {
            expected: d * r,
            got: dl_dv.rows() * dl_dv.cols(),
        });
    }
    let u = f.u.first_columns(r);
    let v = f.v.first_columns(r);
    let s = &f.s[..r];
    let vt_vbar = v.t_matmul(dl_dv)?;
    let coupling_scale = vt_vbar.max_abs();
    let mut inner = DenseMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            if i == j {
                continue;
            }
            let k_ij = vt_vbar[(i, j)] - vt_vbar[(j, i)];
            let gap = s[j] * s[j] - s[i] * s[i];
            if gap.abs() < gap_min {
                if k_ij.abs() > 1e-8 * coupling_scale.max(f64::MIN_POSITIVE) {
                    return Err(Error::DegenerateSpectrum {
                        gap: gap.abs(),
                        threshold: gap_min,
                    });
                }
                continue;
            }
            inner[(i, j)] = s[i] * k_ij / gap;
        }
    }
    // (I − VVᵀ)V̄ Σ⁻¹, transposed into place below.
    let v_perp = dl_dv.sub(&v.matmul(&vt_vbar)?)?;
    let scaled = DenseMatrix::from_fn(d, r, |i, j| v_perp[(i, j)] / s[j]);
    let mut out = u.matmul(&inner)?.matmul_t(&v)?;
    let tail = u.matmul_t(&scaled)?;
    for i in 0..m {
        for (o, t) in out.row_mut(i).iter_mut().zip(tail.row(i)) {
            *o += t;
        }
    }
    Ok(out)
}

/// [`svd_backward_factored`] with the SVD computed here, full numerical
/// rank, and `gap_min = GAP_MIN_REL · σ₁²`.
pub fn svd_backward(s_mat: &DenseMatrix, dl_dv: &DenseMatrix) -> Result<DenseMatrix> {
    let f = svd(s_mat)?;
    let rank = f.numerical_rank(SKETCH_RCOND);
    let gap_min = GAP_MIN_REL * f.s.first().map_or(0.0, |s| s * s);
    svd_backward_factored(&f, rank, dl_dv, gap_min)
}

/// `‖X − B_k(X)‖_F²` and its gradient with respect to the dense sketch
/// `S = BX`. Returns `None` for the gradient when the rank-`k` truncation is
/// degenerate (`σ_k² − σ_{k+1}²` of `XV` below the gap threshold).
pub fn residual_and_grad_s(s_mat: &DenseMatrix, x: &DenseMatrix, k: usize) -> Result<(f64, Option<DenseMatrix>)> {
    let fs = svd(s_mat)?;
    let (r, v) = row_basis(&fs);
    let z = x.matmul(&v)?;
    let fz = svd(&z)?;
    let captured: f64 = fz.s.iter().take(k).map(|v| v * v).sum();
    let loss = fro_norm_sq(x) - captured;
    let s1 = fz.s.first().copied().unwrap_or(0.0);
    let gap_min = GAP_MIN_REL * s1 * s1;
    if k < fz.s.len() && fz.s[k - 1].powi(2) - fz.s[k].powi(2) < gap_min {
        return Ok((loss, None));
    }
    // ∂L/∂Z = −2 Z_k, ∂L/∂V = Xᵀ ∂L/∂Z.
    let z_k = truncated_product(&fz, k);
    let dl_dv = x.t_matmul(&z_k)?.scale(-2.0);
    let s_top = fs.s.first().copied().unwrap_or(0.0);
    match svd_backward_factored(&fs, r, &dl_dv, GAP_MIN_REL * s_top * s_top) {
        Ok(g) => Ok((loss, Some(g))),
        Err(Error::DegenerateSpectrum { .. }) => Ok((loss, None)),
        Err(e) => Err(e),
    }
}

/// Training objective `Σᵢ ‖Xᵢ − B_k(Xᵢ)‖_F²` over the trainable values of `B`.
pub struct SketchObjective<'a> {
    pub sketch: SketchMatrix,
    pub trainset: &'a [DenseMatrix],
    pub k: usize,
    /// Number of degenerate matrices skipped in the last gradient evaluation.
    pub skipped: usize,
}

impl SketchObjective<'_> {
    fn check(&self) -> Result<()> {
        if self.trainset.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        for x in self.trainset {
            check_k(&self.sketch, x, self.k)?;
        }
        Ok(())
    }

    /// Trainable coordinates with zero gradient on this training set because
    /// they fix every `rowspace(BXᵢ)` to first order: the rows of
    /// `(∂B/∂p) Xᵢ` already lie in `rowspace(BXᵢ)`. A superset of
    /// [`SketchMatrix::gauge_params`]; the extra coordinates depend on the
    /// data (for instance when `d < n`).
    pub fn gauge_params(&self) -> Result<Vec<usize>> {
        let values = self
            .sketch
            .trainable()
            .ok_or_else(|| Error::InvalidDims(format!("{} sketches are not trainable", self.sketch.label())))?
            .to_vec();
        let base = self.sketch.materialize();
        let bases: Vec<DenseMatrix> = self
            .trainset
            .iter()
            .map(|x| Ok(row_basis(&svd(&base.matmul(x)?)?).1))
            .collect::<Result<_>>()?;
        let mut probe = self.sketch.clone();
        let mut out = Vec::new();
        for p in 0..values.len() {
            // B is affine in each single coordinate, so a unit step gives ∂B/∂p exactly.
            let mut bumped = values.clone();
            bumped[p] += 1.0;
            probe.set_trainable(&bumped)?;
            let e = probe.materialize().sub(&base)?;
            let mut fixed = true;
            for (x, v) in self.trainset.iter().zip(&bases) {
                let q = e.matmul(x)?;
                let resid = q.sub(&q.matmul(v)?.matmul_t(v)?)?.fro_norm();
                if resid > GAUGE_TOL * e.fro_norm() * x.fro_norm() {
                    fixed = false;
                    break;
                }
            }
            if fixed {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Trainable coordinates not in [`gauge_params`](Self::gauge_params).
    pub fn identifiable_params(&self) -> Result<Vec<usize>> {
        let gauge: std::collections::BTreeSet<usize> = self.gauge_params()?.into_iter().collect();
        Ok((0..self.dim()).filter(|i| !gauge.contains(i)).collect())
    }
}

impl Objective for SketchObjective<'_> {
    fn dim(&self) -> usize {
        self.sketch.trainable().map_or(0, <[f64]>::len)
    }

    fn loss_and_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.sketch.set_trainable(params)?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        self.skipped = 0;
        for x in self.trainset {
            let (s_mat, tape) = match &self.sketch.kind {
                SketchKind::LearnedButterfly(b) => {
                    let (s, tape) = b.forward_taped(x)?;
                    (s, Some(tape))
                }
                _ => (self.sketch.apply(x)?, None),
            };
            let (l, g_s) = residual_and_grad_s(&s_mat, x, self.k)?;
            loss += l;
            let Some(g_s) = g_s else {
                self.skipped += 1;
                continue;
            };
            match (&self.sketch.kind, tape) {
                (SketchKind::LearnedButterfly(b), Some(tape)) => {
                    let (gw, _) = b.backward(&tape, &g_s)?;
                    grad.iter_mut().zip(&gw).for_each(|(a, g)| *a += g);
                }
                (SketchKind::LearnedSparse { positions, .. }, _) => {
                    let per = positions[0].len();
                    for (c, rows) in positions.iter().enumerate() {
                        for (t, &r) in rows.iter().enumerate() {
                            grad[c * per + t] += dot(g_s.row(r), x.row(c));
                        }
                    }
                }
                _ => unreachable!("non-trainable sketches are rejected in train_sketch"),
            }
        }
        if self.skipped > 0 {
            log::warn!(
                "skipped {} of {} training matrices with a degenerate spectrum",
                self.skipped,
                self.trainset.len()
            );
        }
        Ok((loss, grad))
    }

    fn loss(&mut self, params: &[f64]) -> Result<f64> {
        self.sketch.set_trainable(params)?;
        self.trainset
            .iter()
            .map(|x| sketch_residual(&self.sketch, x, self.k))
            .sum()
    }
}

/// What to learn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableKind {
    /// Truncated butterfly initialized as an FJLT sample.
    Butterfly,
    /// `N` nonzeros per column at random frozen rows, initialized like a
    /// CountSketch.
    Sparse { per_col: usize },
}

/// Initial sketch for `kind`.
pub fn init_sketch(kind: TrainableKind, ell: usize, n: usize, rng: &mut Rng) -> Result<SketchMatrix> {
    match kind {
        TrainableKind::Butterfly => SketchMatrix::new(SketchKind::LearnedButterfly(sample_fjlt(n, ell, rng)?), ell, n),
        TrainableKind::Sparse { per_col } => sample_sparse(ell, n, per_col, rng),
    }
}

/// Learn a sketch by descent on `Σᵢ ‖Xᵢ − B_k(Xᵢ)‖_F²`, starting from
/// [`init_sketch`].
pub fn train_sketch(
    trainset: &[DenseMatrix],
    kind: TrainableKind,
    ell: usize,
    k: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(SketchMatrix, TrainTrace)> {
    let n = trainset.first().ok_or(Error::EmptyTestSet)?.rows();
    let init = init_sketch(kind, ell, n, rng)?;
    train_sketch_from(init, trainset, k, cfg)
}

pub fn train_sketch_from(
    init: SketchMatrix,
    trainset: &[DenseMatrix],
    k: usize,
    cfg: &TrainConfig,
) -> Result<(SketchMatrix, TrainTrace)> {
    let x0 = init
        .trainable()
        .ok_or_else(|| Error::InvalidDims(format!("{} sketches are not trainable", init.label())))?
        .to_vec();
    let mut obj = SketchObjective {
        sketch: init,
        trainset,
        k,
        skipped: 0,
    };
    obj.check()?;
    let (best, trace) = minimize(&mut obj, &x0, cfg)?;
    obj.sketch.set_trainable(&best)?;
    Ok((obj.sketch, trace))
}
