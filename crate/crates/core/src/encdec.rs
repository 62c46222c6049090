//! Encoder-decoder butterfly networks `Ȳ = D·E·B·X`.
//!
//! `B ∈ R^{ℓ×n}` is a truncated butterfly, `E ∈ R^{k×ℓ}` and `D ∈ R^{m×k}`
//! are dense. With `X̃ = BX` and `B` held fixed, the critical points in
//! `(D, E)` of `‖DEX̃ − Y‖_F²` are described by the spectrum of
//!
//! ```text
//! Σ(B) = Y X̃ᵀ (X̃X̃ᵀ)⁻¹ X̃ Yᵀ
//! ```
//!
//! (some statements of this formula drop the `B` inside the inverse; the
//! form above is the one consistent with the derivation and is the one used
//! here). At a critical point the loss equals `tr(YYᵀ) − Σ_{i∈I} λᵢ(Σ)` for
//! an index set `I` with `|I| ≤ k`, and `I = [k]` at local minima.
//!
//! Only `k ≤ ℓ` and dimensional compatibility are enforced; the stricter
//! chain `k ≤ ℓ ≤ m ≤ n` is not needed by anything below and would exclude
//! autoencoders with `m = n > ℓ`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::butterfly::TruncatedButterfly;
use crate::error::{Error, Result};
use crate::fjlt::sample_fjlt;
use crate::grad::{inf_norm, train, Chain, LinearOp, Module, TrainConfig, TrainTrace};
use crate::linalg::{column_projector, fro_norm_sq, pinv, svd, sym_eig, DenseMatrix, DEFAULT_RCOND};
use crate::rng::{Rng, RngExt};

pub const B_NAME: &str = "B";
pub const E_NAME: &str = "E";
pub const D_NAME: &str = "D";

/// Eigenvalues below this fraction of `λ₁` count as zero.
const POSITIVE_EIG_REL: f64 = 1e-9;

/// Minimum relative gap between distinct positive eigenvalues.
pub const DEGENERATE_GAP_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EncDecButterfly {
    pub d: DenseMatrix,
    pub e: DenseMatrix,
    pub b: TruncatedButterfly,
}

/// Uniform entries on `[-1/√fan_in, 1/√fan_in]`.
fn uniform_init(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    let bound = 1.0 / (cols.max(1) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

impl EncDecButterfly {
    pub fn new(d: DenseMatrix, e: DenseMatrix, b: TruncatedButterfly) -> Result<Self> {
        if e.cols() != b.ell() {
            return Err(Error::DimensionMismatch {
                context: "encoder columns vs butterfly outputs",
                expected: b.ell(),
                got: e.cols(),
            });
        }
        if d.cols() != e.rows() {
            return Err(Error::DimensionMismatch {
                context: "decoder columns vs encoder rows",
                expected: e.rows(),
                got: d.cols(),
            });
        }
        if e.rows() > b.ell() {
            return Err(Error::InvalidDims(format!(
                "need k <= ell, got k = {}, ell = {}",
                e.rows(),
                b.ell()
            )));
        }
        Ok(Self { d, e, b })
    }

    /// `B` from the FJLT distribution over `R^n`, `D ∈ R^{m×k}` and
    /// `E ∈ R^{k×ℓ}` uniform in `±1/√fan_in`.
    pub fn init(n: usize, m: usize, k: usize, ell: usize, rng: &mut Rng) -> Result<Self> {
        let b = sample_fjlt(n, ell, rng)?;
        let e = uniform_init(k, ell, rng);
        let d = uniform_init(m, k, rng);
        Self::new(d, e, b)
    }

    pub fn k(&self) -> usize {
        self.e.rows()
    }

    pub fn ell(&self) -> usize {
        self.b.ell()
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.d.matmul(&self.e.matmul(&self.b.apply_matrix(x)?)?)
    }

    /// Modules `B → E → D`.
    pub fn to_chain(&self) -> Result<Chain> {
        Chain::new(vec![
            Module::new(B_NAME, LinearOp::Butterfly(self.b.clone())),
            Module::new(E_NAME, LinearOp::Dense(self.e.clone())),
            Module::new(D_NAME, LinearOp::Dense(self.d.clone())),
        ])
    }

    pub fn from_chain(chain: &Chain) -> Result<Self> {
        match chain.modules() {
            [Module {
                op: LinearOp::Butterfly(b),
                ..
            }, Module {
                op: LinearOp::Dense(e), ..
            }, Module {
                op: LinearOp::Dense(d), ..
            }] => Self::new(d.clone(), e.clone(), b.clone()),
            _ => Err(Error::InvalidDims("chain is not an encoder-decoder butterfly".into())),
        }
    }
}

fn check_data(model: &EncDecButterfly, x: &DenseMatrix, y: &DenseMatrix) -> Result<()> {
    if x.rows() != model.b.n_in() {
        return Err(Error::DimensionMismatch {
            context: "data rows vs butterfly inputs",
            expected: model.b.n_in(),
            got: x.rows(),
        });
    }
    if y.shape() != (model.d.rows(), x.cols()) {
        return Err(Error::DimensionMismatch {
            context: "target shape",
            expected: model.d.rows() * x.cols(),
            got: y.rows() * y.cols(),
        });
    }
    Ok(())
}

/// `‖DEBX − Y‖_F²`.
pub fn encdec_loss(model: &EncDecButterfly, x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    check_data(model, x, y)?;
    Ok(fro_norm_sq(&model.apply(x)?.sub(y)?))
}

/// `∇D = 2 r (EX̃)ᵀ`, `∇E = 2 Dᵀ r X̃ᵀ` with `r = DEX̃ − Y`.
pub fn grad_de_analytic(
    model: &EncDecButterfly,
    x: &DenseMatrix,
    y: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    check_data(model, x, y)?;
    let xt = model.b.apply_matrix(x)?;
    grad_de_sketched(&model.d, &model.e, &xt, y)
}

fn grad_de_sketched(
    d: &DenseMatrix,
    e: &DenseMatrix,
    xt: &DenseMatrix,
    y: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let ex = e.matmul(xt)?;
    let r = d.matmul(&ex)?.sub(y)?;
    let gd = r.matmul_t(&ex)?.scale(2.0);
    let ge = d.t_matmul(&r)?.matmul_t(xt)?.scale(2.0);
    Ok((gd, ge))
}

fn sigma_from_sketch(xt: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    let gram = xt.matmul_t(xt)?;
    let yx = y.matmul_t(xt)?;
    yx.matmul(&pinv(&gram, DEFAULT_RCOND)?)?
        .matmul_t(&yx)
        .map(|s| s.symmetrize())
}

/// `Σ(B) = Y X̃ᵀ (X̃X̃ᵀ)⁻¹ X̃ Yᵀ`; fails with `RankDeficientSketch` when
/// `X̃X̃ᵀ` is singular to working precision.
pub fn sigma_of_b(b: &TruncatedButterfly, x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    let xt = b.apply_matrix(x)?;
    let s = svd(&xt.matmul_t(&xt)?)?.s;
    let (top, bottom) = (s[0], *s.last().unwrap_or(&0.0));
    if !(bottom >= DEFAULT_RCOND * top) || top == 0.0 {
        return Err(Error::RankDeficientSketch {
            rank: s.iter().filter(|&&v| v >= DEFAULT_RCOND * top && top > 0.0).count(),
            ell: b.ell(),
            ratio: if top > 0.0 { bottom / top } else { 0.0 },
        });
    }
    sigma_of_b_pinv(b, x, y)
}

/// [`sigma_of_b`] with the inverse replaced by a pseudo-inverse, which is
/// the right object when `rank(BX) < ℓ`: `Σ = Y P Yᵀ` with `P` the projector
/// onto the row space of `BX`.
pub fn sigma_of_b_pinv(b: &TruncatedButterfly, x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != b.n_in() || y.cols() != x.cols() {
        return Err(Error::DimensionMismatch {
            context: "sigma_of_b data",
            expected: b.n_in(),
            got: x.rows(),
        });
    }
    sigma_from_sketch(&b.apply_matrix(x)?, y)
}

/// `tr(YYᵀ) − Σ_{i∈I} λᵢ(Σ)` with eigenvalues in nonincreasing order.
pub fn theorem_loss(sigma: &DenseMatrix, index_set: &[usize], y: &DenseMatrix) -> Result<f64> {
    let (lambda, _) = sym_eig(sigma)?;
    theorem_loss_from_eigs(&lambda, index_set, fro_norm_sq(y))
}

fn theorem_loss_from_eigs(lambda: &[f64], index_set: &[usize], trace_yy: f64) -> Result<f64> {
    let mut seen = BTreeSet::new();
    for &i in index_set {
        if i >= lambda.len() || !seen.insert(i) {
            return Err(Error::InvalidIndexSet(format!(
                "{index_set:?} is not a set of distinct indices below {}",
                lambda.len()
            )));
        }
    }
    Ok(trace_yy - index_set.iter().map(|&i| lambda[i]).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointReport {
    pub loss: f64,
    pub trace_yy: f64,
    /// Eigenvalues of `Σ(B)`, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// `‖P_D uᵢ‖²` for each eigenvector `uᵢ`.
    pub energies: Vec<f64>,
    /// Identified `I`, zero-based and ascending.
    pub index_set: Vec<usize>,
    pub theorem_loss: f64,
    pub loss_gap: f64,
    pub claim1_residual: f64,
    pub claim2_residual: f64,
    pub sigma_fro: f64,
    pub grad_inf_norm: f64,
    pub rank_d: usize,
    /// Rank of `BX`; below `ℓ` the pseudo-inverse form of `Σ` is used.
    pub sketch_rank: usize,
    pub loss_matches: bool,
    pub commutes: bool,
    pub is_local_min_candidate: bool,
}

/// Relative tolerance for the loss identity.
pub const LOSS_TOL_REL: f64 = 1e-4;
/// Relative tolerance for the commutator residual.
pub const COMMUTATOR_TOL_REL: f64 = 1e-6;

/// Check the critical-point structure at `(D, E)` for fixed `B`.
///
/// Requires `max(‖∇D‖∞, ‖∇E‖∞) ≤ tol`. `I` is found by projecting the
/// eigenvectors of `Σ` onto the column space of `D`: at an exact critical
/// point those energies are 0 or 1. Among eigenvectors with positive
/// eigenvalue, the `rank(D)` highest energies are kept, minus any below 0.5.
pub fn verify_critical_point(
    model: &EncDecButterfly,
    x: &DenseMatrix,
    y: &DenseMatrix,
    tol: f64,
) -> Result<CriticalPointReport> {
    check_data(model, x, y)?;
    let xt = model.b.apply_matrix(x)?;
    let (gd, ge) = grad_de_sketched(&model.d, &model.e, &xt, y)?;
    let grad = inf_norm(gd.data()).max(inf_norm(ge.data()));
    if !(grad <= tol) {
        return Err(Error::NotAtCriticalPoint { grad, tol });
    }
    let sketch_rank = svd(&xt)?.numerical_rank(1e-10);
    let sigma = sigma_from_sketch(&xt, y)?;
    let (lambda, u) = sym_eig(&sigma)?;
    let trace_yy = fro_norm_sq(y);
    let lambda1 = lambda.first().copied().unwrap_or(0.0).max(0.0);
    let positive: Vec<usize> = (0..lambda.len())
        .filter(|&i| lambda[i] > POSITIVE_EIG_REL * lambda1 && lambda1 > 0.0)
        .collect();
    for w in positive.windows(2) {
        let gap = lambda[w[0]] - lambda[w[1]];
        if gap < DEGENERATE_GAP_REL * lambda1 {
            return Err(Error::DegenerateSpectrum {
                gap,
                threshold: DEGENERATE_GAP_REL * lambda1,
            });
        }
    }

    let p_d = column_projector(&model.d, 1e-8);
    let rank_d = p_d.trace().round() as usize;
    let pu = p_d.matmul(&u)?;
    let energies: Vec<f64> = (0..u.cols())
        .map(|j| pu.column(j).iter().map(|v| v * v).sum())
        .collect();
    let mut ranked = positive.clone();
    ranked.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
    let mut index_set: Vec<usize> = ranked
        .into_iter()
        .take(rank_d)
        .filter(|&i| energies[i] >= 0.5)
        .collect();
    index_set.sort_unstable();

    let loss = fro_norm_sq(&model.d.matmul(&model.e.matmul(&xt)?)?.sub(y)?);
    let theorem = theorem_loss_from_eigs(&lambda, &index_set, trace_yy)?;

    // DE agrees with P_D Y X̃ᵀ (X̃X̃ᵀ)⁺ on the column space of X̃.
    let gram = xt.matmul_t(&xt)?;
    let gram_pinv = pinv(&gram, DEFAULT_RCOND)?;
    let pi = gram.matmul(&gram_pinv)?;
    let target = p_d.matmul(&y.matmul_t(&xt)?)?.matmul(&gram_pinv)?;
    let claim1 = model.d.matmul(&model.e)?.matmul(&pi)?.sub(&target)?.fro_norm();
    let claim2 = p_d.matmul(&sigma)?.sub(&sigma.matmul(&p_d)?)?.fro_norm();
    let sigma_fro = sigma.fro_norm();

    let loss_gap = (loss - theorem).abs();
    let k = model.k();
    Ok(CriticalPointReport {
        loss,
        trace_yy,
        eigenvalues: lambda,
        energies,
        is_local_min_candidate: index_set == (0..k).collect::<Vec<_>>(),
        index_set,
        theorem_loss: theorem,
        loss_gap,
        claim1_residual: claim1,
        claim2_residual: claim2,
        sigma_fro,
        grad_inf_norm: grad,
        rank_d,
        sketch_rank,
        loss_matches: loss_gap <= LOSS_TOL_REL * trace_yy,
        commutes: claim2 <= COMMUTATOR_TOL_REL * sigma_fro,
    })
}

/// Sketch width `⌈k log₂k + k/ε⌉` under which phase one is within `(1+ε)`
/// of the best rank-`k` loss with probability at least 1/2.
pub fn prop2_ell(k: usize, eps: f64) -> usize {
    let k = k as f64;
    (k * k.log2() + k / eps).ceil() as usize
}

/// Default gradient target for a critical point: `1e-9·(1 + tr(YYᵀ))`.
pub fn critical_tol(y: &DenseMatrix) -> f64 {
    1e-9 * (1.0 + fro_norm_sq(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolishConfig {
    pub max_iters: usize,
    /// Stop once `max(‖∇D‖∞, ‖∇E‖∞)` is at or below this.
    pub grad_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolishTrace {
    pub iters: usize,
    pub converged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub grad_inf_norm: f64,
}

/// Alternating exact least-squares updates of `E` and `D` with `B` fixed.
///
/// `E ← D⁺ Y X̃⁺` and `D ← Y (EX̃)⁺` each minimize the loss over one factor,
/// so the loss never increases. The factors are rebalanced at the end
/// (`D = U√S`, `E = √S Vᵀ` from the SVD of `DE`), which leaves `DE` and the
/// loss unchanged.
pub fn polish_de(
    model: &mut EncDecButterfly,
    x: &DenseMatrix,
    y: &DenseMatrix,
    cfg: &PolishConfig,
) -> Result<PolishTrace> {
    check_data(model, x, y)?;
    let xt = model.b.apply_matrix(x)?;
    let xt_pinv = pinv(&xt, DEFAULT_RCOND)?;
    let y_xt_pinv = y.matmul(&xt_pinv)?;
    let loss_of =
        |d: &DenseMatrix, e: &DenseMatrix| -> Result<f64> { Ok(fro_norm_sq(&d.matmul(&e.matmul(&xt)?)?.sub(y)?)) };
    let grad_of = |d: &DenseMatrix, e: &DenseMatrix| -> Result<f64> {
        let (gd, ge) = grad_de_sketched(d, e, &xt, y)?;
        Ok(inf_norm(gd.data()).max(inf_norm(ge.data())))
    };
    let initial_loss = loss_of(&model.d, &model.e)?;
    let mut grad = grad_of(&model.d, &model.e)?;
    let mut iters = 0;
    while grad > cfg.grad_tol && iters < cfg.max_iters {
        let e_new = pinv(&model.d, DEFAULT_RCOND)?.matmul(&y_xt_pinv)?;
        let ex = e_new.matmul(&xt)?;
        let d_new = y.matmul(&pinv(&ex, DEFAULT_RCOND)?)?;
        let (d_bal, e_bal) = balance(&d_new, &e_new)?;
        model.d = d_bal;
        model.e = e_bal;
        grad = grad_of(&model.d, &model.e)?;
        iters += 1;
    }
    let final_loss = loss_of(&model.d, &model.e)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: iters,
            loss: final_loss,
        });
    }
    Ok(PolishTrace {
        iters,
        converged: grad <= cfg.grad_tol,
        initial_loss,
        final_loss,
        grad_inf_norm: grad,
    })
}

/// Equal-norm factorization of `DE` keeping the inner dimension `k`.
fn balance(d: &DenseMatrix, e: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let k = d.cols();
    let f = svd(&d.matmul(e)?)?;
    let root: Vec<f64> = f.s.iter().take(k).map(|s| s.sqrt()).collect();
    let dd = DenseMatrix::from_fn(
        d.rows(),
        k,
        |i, j| if j < root.len() { f.u[(i, j)] * root[j] } else { 0.0 },
    );
    let ee = DenseMatrix::from_fn(
        k,
        e.cols(),
        |i, j| if i < root.len() { root[i] * f.v[(j, i)] } else { 0.0 },
    );
    Ok((dd, ee))
}

/// Train `(D, E)` with `B` frozen: `cfg` descent, then an optional ALS
/// polish.
pub fn train_de(
    model: &mut EncDecButterfly,
    x: &DenseMatrix,
    y: &DenseMatrix,
    cfg: &TrainConfig,
    polish: Option<&PolishConfig>,
) -> Result<(TrainTrace, Option<PolishTrace>)> {
    check_data(model, x, y)?;
    let mut chain = model.to_chain()?;
    let cfg = TrainConfig {
        freeze: [B_NAME.to_string()].into_iter().collect(),
        ..cfg.clone()
    };
    let trace = train(&mut chain, x, y, &cfg)?;
    *model = EncDecButterfly::from_chain(&chain)?;
    let polished = polish.map(|p| polish_de(model, x, y, p)).transpose()?;
    Ok((trace, polished))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseConfig {
    pub phase1: TrainConfig,
    #[serde(default)]
    pub polish: Option<PolishConfig>,
    pub phase2: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TwoPhaseResult {
    pub phase1_model: EncDecButterfly,
    pub phase1: TrainTrace,
    pub polish: Option<PolishTrace>,
    pub phase1_loss: f64,
    pub model: EncDecButterfly,
    pub phase2: TrainTrace,
    pub phase2_loss: f64,
}

/// Phase 1: sample `B` from the FJLT distribution and train `D, E` only.
/// Phase 2: unfreeze `B` and continue from the phase-1 point. The best
/// iterate is kept, so phase 2 never ends above phase 1.
pub fn two_phase_train(
    x: &DenseMatrix,
    y: &DenseMatrix,
    k: usize,
    ell: usize,
    cfg: &TwoPhaseConfig,
    rng: &mut Rng,
) -> Result<TwoPhaseResult> {
    if k == 0 || k > ell {
        return Err(Error::InvalidDims(format!(
            "need 1 <= k <= ell, got k = {k}, ell = {ell}"
        )));
    }
    let mut model = EncDecButterfly::init(x.rows(), y.rows(), k, ell, rng)?;
    let (phase1, polish) = train_de(&mut model, x, y, &cfg.phase1, cfg.polish.as_ref())?;
    let phase1_loss = encdec_loss(&model, x, y)?;
    let phase1_model = model.clone();

    let mut chain = model.to_chain()?;
    let phase2_cfg = TrainConfig {
        freeze: BTreeSet::new(),
        ..cfg.phase2.clone()
    };
    let phase2 = train(&mut chain, x, y, &phase2_cfg)?;
    let model = EncDecButterfly::from_chain(&chain)?;
    let phase2_loss = encdec_loss(&model, x, y)?;
    Ok(TwoPhaseResult {
        phase1_model,
        phase1,
        polish,
        phase1_loss,
        model,
        phase2,
        phase2_loss,
    })
}
