//! Synthetic data generators and matrix file formats.
//!
//! Two on-disk formats are supported:
//!
//! * CSV: a header line `rows,cols`, then one line per row of comma-separated
//!   values. Values are written in shortest round-trip form, so a save/load
//!   cycle is exact.
//! * DMAT1: the 5-byte magic `DMAT1`, `rows` and `cols` as little-endian
//!   `u64`, then `rows·cols` little-endian `f64` values in row-major order.
//!
//! [`load_matrix`] detects the format from the magic bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, thin_q, DenseMatrix};
use crate::rng::{normal, permutation, Rng};

pub const DMAT_MAGIC: &[u8; 5] = b"DMAT1";

/// Standard deviation of the combination coefficients (variance 0.01).
const COEFF_STD: f64 = 0.1;

/// `n×r` matrix with orthonormal columns, from the QR of a Gaussian matrix.
pub fn random_orthonormal(n: usize, r: usize, rng: &mut Rng) -> Result<DenseMatrix> {
    let g = DenseMatrix::from_fn(n, r, |_, _| normal(rng));
    thin_q(&g)
}

/// `n×d` matrix of rank exactly `r`: each column is a random combination of
/// `r` orthonormal vectors in `R^n`, with i.i.d. `N(0, 0.01)` coefficients.
pub fn gaussian_rank_r(n: usize, d: usize, r: usize, rng: &mut Rng) -> Result<DenseMatrix> {
    if r == 0 || r > n.min(d) {
        return Err(Error::InvalidRank { k: r, rows: n, cols: d });
    }
    let basis = random_orthonormal(n, r, rng)?;
    let coeffs = DenseMatrix::from_fn(r, d, |_, _| COEFF_STD * normal(rng));
    basis.matmul(&coeffs)
}

/// Rows of `x` reordered so that row `i` of the result is row `perm[i]` of `x`.
pub fn apply_row_permutation(x: &DenseMatrix, perm: &[usize]) -> Result<DenseMatrix> {
    if perm.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            context: "row permutation",
            expected: x.rows(),
            got: perm.len(),
        });
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidIndexSet(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(x.select_rows(perm))
}

/// Uniformly random row permutation of `x`; also returns the permutation.
pub fn permute_rows_tracked(x: &DenseMatrix, rng: &mut Rng) -> (DenseMatrix, Vec<usize>) {
    let perm = permutation(rng, x.rows());
    (x.select_rows(&perm), perm)
}

pub fn permute_rows(x: &DenseMatrix, rng: &mut Rng) -> DenseMatrix {
    permute_rows_tracked(x, rng).0
}

/// Scale every matrix so its largest singular value is 1.
pub fn normalize_top_singular(set: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
    set.iter()
        .map(|x| {
            let s1 = svd(x)?.s.first().copied().unwrap_or(0.0);
            if s1 == 0.0 {
                return Err(Error::ZeroMatrix);
            }
            Ok(x.scale(1.0 / s1))
        })
        .collect()
}

/// A family of related near-low-rank matrices (stand-in for a dataset of
/// similar images): every member shares one `rank`-dimensional column space,
/// with decaying spectrum and additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    pub count: usize,
    /// Noise entry standard deviation relative to the signal scale.
    pub noise: f64,
}

/// Draw `spec.count` members, each normalized to `σ₁ = 1`.
pub fn near_low_rank_family(spec: &FamilySpec, rng: &mut Rng) -> Result<Vec<DenseMatrix>> {
    if spec.rank == 0 || spec.rank > spec.n.min(spec.d) {
        return Err(Error::InvalidRank {
            k: spec.rank,
            rows: spec.n,
            cols: spec.d,
        });
    }
    let basis = random_orthonormal(spec.n, spec.rank, rng)?;
    let members: Vec<DenseMatrix> = (0..spec.count)
        .map(|_| {
            let coeffs = DenseMatrix::from_fn(spec.rank, spec.d, |i, _| normal(rng) / (1.0 + i as f64));
            let noise = DenseMatrix::from_fn(spec.n, spec.d, |_, _| spec.noise * normal(rng) / (spec.n as f64).sqrt());
            basis.matmul(&coeffs)?.add(&noise)
        })
        .collect::<Result<_>>()?;
    normalize_top_singular(&members)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Dmat,
}

impl MatrixFormat {
    /// `.dmat` / `.bin` select the binary format; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("dmat" | "bin") => MatrixFormat::Dmat,
            _ => MatrixFormat::Csv,
        }
    }
}

pub fn to_csv_string(m: &DenseMatrix) -> String {
    let mut s = format!("{},{}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn from_csv_str(text: &str) -> Result<DenseMatrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedFile("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedFile(format!("bad header {header:?}, expected \"rows,cols\"")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::MalformedFile(format!(
            "bad header {header:?}, expected \"rows,cols\""
        )));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (lineno, line) in lines.enumerate() {
        let before = data.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::MalformedFile(format!("line {}: cannot parse {tok:?}", lineno + 2)))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::DimMismatch(format!(
                "line {} has {} values, header says {cols}",
                lineno + 2,
                data.len() - before
            )));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(Error::DimMismatch(format!("{seen_rows} data rows, header says {rows}")));
    }
    DenseMatrix::new(rows, cols, data)
}

pub fn to_dmat_bytes(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + 8 * m.data().len());
    out.extend_from_slice(DMAT_MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_dmat_bytes(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 21 || &bytes[..5] != DMAT_MAGIC {
        return Err(Error::MalformedFile("missing DMAT1 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")) as usize;
    let body = &bytes[21..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::MalformedFile(format!("dimensions {rows}x{cols} overflow")))?;
    if body.len() != expected {
        return Err(Error::DimMismatch(format!(
            "{rows}x{cols} needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DenseMatrix::new(rows, cols, data)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DenseMatrix, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Csv => to_csv_string(m).into_bytes(),
        MatrixFormat::Dmat => to_dmat_bytes(m),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load either format, chosen by the file's leading bytes.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(DMAT_MAGIC) {
        return from_dmat_bytes(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::MalformedFile("not UTF-8 text or DMAT1".into()))?;
    from_csv_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::fro_norm_sq;
    use crate::rng::rng_from_seed;

    #[test]
    fn rank_r_has_exact_rank() {
        let mut rng = rng_from_seed(1);
        for &(n, d, r) in &[(32, 20, 1), (64, 64, 8), (16, 40, 16)] {
            let x = gaussian_rank_r(n, d, r, &mut rng).unwrap();
            let s = svd(&x).unwrap().s;
            assert!(s[r - 1] > 1e-6 * s[0]);
            if r < s.len() {
                assert!(s[r] <= 1e-10 * s[0], "({n},{d},{r}) tail {}", s[r] / s[0]);
            }
        }
        assert!(matches!(
            gaussian_rank_r(4, 3, 4, &mut rng),
            Err(Error::InvalidRank { .. })
        ));
    }

    #[test]
    fn rank_one_columns_are_parallel() {
        let mut rng = rng_from_seed(2);
        let x = gaussian_rank_r(10, 6, 1, &mut rng).unwrap();
        let c0 = x.column(0);
        let n0 = crate::linalg::norm2(&c0);
        for j in 1..6 {
            let c = x.column(j);
            let cos = crate::linalg::dot(&c0, &c).abs() / (n0 * crate::linalg::norm2(&c));
            assert!((cos - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn coefficient_variance() {
        // With an orthonormal basis Q, the coefficients are Qᵀ X.
        let mut rng = rng_from_seed(3);
        let (n, d, r) = (200, 500, 20);
        let x = gaussian_rank_r(n, d, r, &mut rng).unwrap();
        let var = fro_norm_sq(&x) / (r * d) as f64;
        assert!((var - 0.01).abs() <= 0.003, "{var}");
    }

    #[test]
    fn permutation_preserves_norm_and_spectrum() {
        let mut rng = rng_from_seed(4);
        let x = gaussian_rank_r(12, 7, 3, &mut rng).unwrap();
        let (p, perm) = permute_rows_tracked(&x, &mut rng);
        assert_eq!(fro_norm_sq(&p).to_bits(), fro_norm_sq(&x.select_rows(&perm)).to_bits());
        assert!((fro_norm_sq(&p) - fro_norm_sq(&x)).abs() <= 1e-15);
        let (s1, s2) = (svd(&x).unwrap().s, svd(&p).unwrap().s);
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() <= 1e-10);
        }
        let id: Vec<usize> = (0..12).collect();
        assert_eq!(apply_row_permutation(&x, &id).unwrap(), x);
    }

    #[test]
    fn permutations_compose() {
        let mut rng = rng_from_seed(5);
        let x = DenseMatrix::from_fn(9, 2, |i, j| (10 * i + j) as f64);
        let (a, pa) = permute_rows_tracked(&x, &mut rng);
        let (b, pb) = permute_rows_tracked(&a, &mut rng);
        let composed: Vec<usize> = pb.iter().map(|&i| pa[i]).collect();
        assert_eq!(b, apply_row_permutation(&x, &composed).unwrap());
    }

    #[test]
    fn normalization() {
        let d = DenseMatrix::from_diag(&[2.0, 1.0]);
        let out = normalize_top_singular(&[d]).unwrap();
        assert_eq!(out[0], DenseMatrix::from_diag(&[1.0, 0.5]));
        assert_eq!(normalize_top_singular(&out).unwrap(), out);
        assert!(matches!(
            normalize_top_singular(&[DenseMatrix::zeros(2, 2)]),
            Err(Error::ZeroMatrix)
        ));
        let mut rng = rng_from_seed(6);
        let set: Vec<_> = (0..5).map(|_| gaussian_rank_r(8, 6, 3, &mut rng).unwrap()).collect();
        for m in normalize_top_singular(&set).unwrap() {
            assert!((svd(&m).unwrap().s[0] - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn family_members_are_normalized() {
        let mut rng = rng_from_seed(7);
        let spec = FamilySpec {
            n: 20,
            d: 15,
            rank: 4,
            count: 3,
            noise: 0.01,
        };
        let fam = near_low_rank_family(&spec, &mut rng).unwrap();
        assert_eq!(fam.len(), 3);
        for m in &fam {
            let s = svd(m).unwrap().s;
            assert!((s[0] - 1.0).abs() <= 1e-10);
            assert!(s[4] < 0.1 * s[3]);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = rng_from_seed(8);
        let m = DenseMatrix::from_fn(5, 3, |_, _| normal(&mut rng) * 1e-7);
        let back = from_csv_str(&to_csv_string(&m)).unwrap();
        assert_eq!(back, m);
        assert!(to_csv_string(&m).starts_with("5,3\n"));
    }

    #[test]
    fn dmat_round_trip_is_exact() {
        let mut rng = rng_from_seed(9);
        let m = DenseMatrix::from_fn(1000, 64, |_, _| normal(&mut rng));
        let bytes = to_dmat_bytes(&m);
        assert_eq!(bytes.len(), 21 + 8 * 64_000);
        assert_eq!(from_dmat_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(from_csv_str(""), Err(Error::MalformedFile(_))));
        assert!(matches!(from_csv_str("2\n1\n"), Err(Error::MalformedFile(_))));
        assert!(matches!(from_csv_str("2,2\n1,2\n3\n"), Err(Error::DimMismatch(_))));
        assert!(matches!(from_csv_str("2,2\n1,2\n"), Err(Error::DimMismatch(_))));
        assert!(matches!(from_csv_str("1,2\n1,x\n"), Err(Error::MalformedFile(_))));
        assert!(matches!(from_dmat_bytes(b""), Err(Error::MalformedFile(_))));
        let mut bytes = to_dmat_bytes(&DenseMatrix::identity(2));
        bytes.pop();
        assert!(matches!(from_dmat_bytes(&bytes), Err(Error::DimMismatch(_))));
    }
}
