//! Replacement of a dense layer `W ∈ R^{n₂×n₁}` by the sandwich
//! `J₂ᵀ · W̃ · J₁`: a truncated butterfly down to `k₁` dimensions, a small
//! dense `k₂×k₁` core, and a transposed truncated butterfly back up to `n₂`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::butterfly::{next_power_of_two, TruncatedButterfly};
use crate::datagen::{load_matrix, save_matrix, MatrixFormat};
use crate::error::{Error, Result};
use crate::fjlt::sample_fjlt;
use crate::grad::{Chain, LinearOp, Module};
use crate::linalg::DenseMatrix;
use crate::rng::{Rng, RngExt};

pub const J1_NAME: &str = "J1";
pub const CORE_NAME: &str = "W_tilde";
pub const J2_NAME: &str = "J2";

#[derive(Debug, Clone, PartialEq)]
pub struct ButterflySandwich {
    j1: TruncatedButterfly,
    w_tilde: DenseMatrix,
    j2: TruncatedButterfly,
}

/// `⌈log₂ n⌉`, at least 1.
pub fn default_k(n: usize) -> usize {
    next_power_of_two(n).trailing_zeros().max(1) as usize
}

fn check_k(k: usize, n: usize, which: &'static str) -> Result<()> {
    let n_pow2 = next_power_of_two(n);
    if k == 0 || k > n_pow2 {
        return Err(Error::DimensionMismatch {
            context: which,
            expected: n_pow2,
            got: k,
        });
    }
    Ok(())
}

/// Sandwich initialized from a reference `W`: `J₁, J₂` are FJLT samples and
/// `W̃ = J₂ W J₁ᵀ`, so the sandwich equals `(J₂ᵀJ₂) W (J₁ᵀJ₁)`.
pub fn sandwich_from_fjlt(w: &DenseMatrix, k1: usize, k2: usize, rng: &mut Rng) -> Result<ButterflySandwich> {
    let (n2, n1) = w.shape();
    check_k(k1, n1, "sandwich k1")?;
    check_k(k2, n2, "sandwich k2")?;
    let j1 = sample_fjlt(n1, k1, rng)?;
    let j2 = sample_fjlt(n2, k2, rng)?;
    let w_tilde = j2.apply_matrix(w)?.matmul_t(&j1.materialize())?;
    ButterflySandwich::new(j1, w_tilde, j2)
}

/// Sandwich for training from scratch: FJLT butterflies and a core with
/// entries uniform on `[-1/√k₁, 1/√k₁]`.
pub fn sandwich_fresh(n1: usize, n2: usize, k1: usize, k2: usize, rng: &mut Rng) -> Result<ButterflySandwich> {
    check_k(k1, n1, "sandwich k1")?;
    check_k(k2, n2, "sandwich k2")?;
    let j1 = sample_fjlt(n1, k1, rng)?;
    let j2 = sample_fjlt(n2, k2, rng)?;
    let bound = 1.0 / (k1 as f64).sqrt();
    let w_tilde = DenseMatrix::from_fn(k2, k1, |_, _| rng.random_range(-bound..=bound));
    ButterflySandwich::new(j1, w_tilde, j2)
}

impl ButterflySandwich {
    pub fn new(j1: TruncatedButterfly, w_tilde: DenseMatrix, j2: TruncatedButterfly) -> Result<Self> {
        if w_tilde.cols() != j1.ell() {
            return Err(Error::DimensionMismatch {
                context: "sandwich core columns vs J1 outputs",
                expected: j1.ell(),
                got: w_tilde.cols(),
            });
        }
        if w_tilde.rows() != j2.ell() {
            return Err(Error::DimensionMismatch {
                context: "sandwich core rows vs J2 outputs",
                expected: j2.ell(),
                got: w_tilde.rows(),
            });
        }
        Ok(Self { j1, w_tilde, j2 })
    }

    pub fn j1(&self) -> &TruncatedButterfly {
        &self.j1
    }

    pub fn w_tilde(&self) -> &DenseMatrix {
        &self.w_tilde
    }

    pub fn j2(&self) -> &TruncatedButterfly {
        &self.j2
    }

    pub fn in_dim(&self) -> usize {
        self.j1.n_in()
    }

    pub fn out_dim(&self) -> usize {
        self.j2.n_in()
    }

    /// `J₂ᵀ(W̃(J₁x))`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.j1.apply(x)?;
        let v = self.w_tilde.mat_vec(&u)?;
        self.j2.apply_adjoint(&v)
    }

    /// Column-wise [`apply`](Self::apply).
    pub fn apply_matrix(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let u = self.j1.apply_matrix(x)?;
        self.j2.apply_adjoint_matrix(&self.w_tilde.matmul(&u)?)
    }

    pub fn materialize(&self) -> Result<DenseMatrix> {
        self.j2
            .materialize()
            .t_matmul(&self.w_tilde)?
            .matmul(&self.j1.materialize())
    }

    /// `k₁k₂` plus the effective weights of both butterflies.
    pub fn param_count(&self) -> usize {
        self.w_tilde.data().len() + self.j1.effective_weight_count() + self.j2.effective_weight_count()
    }

    /// The sandwich as a trainable chain `J1 → W_tilde → J2ᵀ`.
    pub fn to_chain(&self) -> Result<Chain> {
        Chain::new(vec![
            Module::new(J1_NAME, LinearOp::Butterfly(self.j1.clone())),
            Module::new(CORE_NAME, LinearOp::Dense(self.w_tilde.clone())),
            Module::new(J2_NAME, LinearOp::ButterflyTransposed(self.j2.clone())),
        ])
    }

    /// Inverse of [`to_chain`](Self::to_chain).
    pub fn from_chain(chain: &Chain) -> Result<Self> {
        match chain.modules() {
            [Module {
                op: LinearOp::Butterfly(j1),
                ..
            }, Module {
                op: LinearOp::Dense(w), ..
            }, Module {
                op: LinearOp::ButterflyTransposed(j2),
                ..
            }] => Self::new(j1.clone(), w.clone(), j2.clone()),
            _ => Err(Error::InvalidDims("chain is not a butterfly sandwich".into())),
        }
    }

    /// Write `j1.bfly`, `j2.bfly`, `w_tilde.dmat` and `manifest.json` into `dir`.
    pub fn save_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = BundleManifest::default();
        self.j1.save(dir.join(&manifest.j1))?;
        self.j2.save(dir.join(&manifest.j2))?;
        save_matrix(dir.join(&manifest.w_tilde), &self.w_tilde, MatrixFormat::Dmat)?;
        let manifest = BundleManifest {
            n1: self.in_dim(),
            n2: self.out_dim(),
            k1: self.j1.ell(),
            k2: self.j2.ell(),
            ..manifest
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: BundleManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let s = Self::new(
            TruncatedButterfly::load(dir.join(&manifest.j1))?,
            load_matrix(dir.join(&manifest.w_tilde))?,
            TruncatedButterfly::load(dir.join(&manifest.j2))?,
        )?;
        if (s.in_dim(), s.out_dim(), s.j1.ell(), s.j2.ell()) != (manifest.n1, manifest.n2, manifest.k1, manifest.k2) {
            return Err(Error::MalformedFile(
                "bundle files disagree with manifest dimensions".into(),
            ));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    n1: usize,
    n2: usize,
    k1: usize,
    k2: usize,
    j1: String,
    w_tilde: String,
    j2: String,
}

impl Default for BundleManifest {
    fn default() -> Self {
        Self {
            format: "butterfly-sandwich/1".into(),
            n1: 0,
            n2: 0,
            k1: 0,
            k2: 0,
            j1: "j1.bfly".into(),
            w_tilde: "w_tilde.dmat".into(),
            j2: "j2.bfly".into(),
        }
    }
}
