//! Browser bindings for the interactive demo page in `www/`.
//!
//! Each export takes plain numbers and returns a JSON string. The `*_json`
//! functions hold the logic and run natively too, so they are tested without
//! a browser.

use butterfly_core::butterfly::{next_power_of_two, ButterflyNetwork, TruncatedButterfly};
use butterfly_core::datagen::gaussian_rank_r;
use butterfly_core::encdec::{prop2_ell, two_phase_train, PolishConfig, TwoPhaseConfig};
use butterfly_core::fjlt::{estimate_failure_rate, estimate_norm_failure_rate, sample_fjlt};
use butterfly_core::grad::{OptimizerKind, TrainConfig};
use butterfly_core::linalg::{fro_norm_sq, rank_k_residual};
use butterfly_core::rng::{derive_seed, rng_from_seed, stream_tag};
use butterfly_core::sketch::{sketch_residual, SketchKind, SketchMatrix};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest input dimension the page accepts, to keep the tab responsive.
pub const MAX_N: usize = 256;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn check_n(n: usize) -> Result<(), String> {
    if n == 0 || n > MAX_N {
        return Err(format!("n must lie in 1..={MAX_N}, got {n}"));
    }
    Ok(())
}

#[derive(Serialize)]
struct MatrixView {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    effective_weights: usize,
}

/// Dense view of a truncated butterfly. `kind` is `"fjlt"`, `"hadamard"` or
/// `"random"`.
pub fn butterfly_matrix_json(kind: &str, n: usize, ell: usize, seed: u64) -> Result<String, String> {
    check_n(n)?;
    let mut rng = rng_from_seed(seed);
    let n_pow2 = next_power_of_two(n);
    let b = match kind {
        "fjlt" => sample_fjlt(n, ell, &mut rng).map_err(err)?,
        "hadamard" => {
            let net = ButterflyNetwork::new_hadamard(n_pow2).map_err(err)?;
            TruncatedButterfly::with_random_outputs(net, n, ell, 1.0, &mut rng).map_err(err)?
        }
        "random" => {
            let net = ButterflyNetwork::new_random(n_pow2, &mut rng).map_err(err)?;
            TruncatedButterfly::with_random_outputs(net, n, ell, 1.0, &mut rng).map_err(err)?
        }
        other => return Err(format!("unknown butterfly kind {other:?}")),
    };
    let m = b.materialize();
    let view = MatrixView {
        rows: m.rows(),
        cols: m.cols(),
        effective_weights: b.effective_weight_count(),
        data: m.into_data(),
    };
    serde_json::to_string(&view).map_err(err)
}

#[derive(Serialize)]
struct JlPoint {
    ell: usize,
    failure_rate: f64,
    norm_failure_rate: f64,
}

/// JL failure rates for `ell = 1, 2, 4, …, n′`.
pub fn jl_curve_json(n: usize, eps: f64, trials: usize, seed: u64) -> Result<String, String> {
    check_n(n)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(format!("eps must lie in (0, 1), got {eps}"));
    }
    let mut points = Vec::new();
    let mut ell = 1;
    while ell <= next_power_of_two(n) {
        let mut rng = rng_from_seed(derive_seed(seed, stream_tag(&format!("ell={ell}"))));
        let failure_rate = estimate_failure_rate(n, ell, eps, trials, &mut rng).map_err(err)?;
        let norm_failure_rate = estimate_norm_failure_rate(n, ell, eps, trials, &mut rng).map_err(err)?;
        points.push(JlPoint {
            ell,
            failure_rate,
            norm_failure_rate,
        });
        ell *= 2;
    }
    serde_json::to_string(&points).map_err(err)
}

#[derive(Serialize)]
struct SweepPoint {
    k: usize,
    ell: usize,
    butterfly_loss: f64,
    pca_loss: f64,
    fjlt_pca_loss: f64,
}

#[derive(Serialize)]
struct Sweep {
    trace_xx: f64,
    points: Vec<SweepPoint>,
}

/// Encoder-decoder butterfly k-sweep on rank-`rank` data of size `n×n`.
pub fn autoencode_sweep_json(n: usize, rank: usize, steps: usize, seed: u64) -> Result<String, String> {
    check_n(n)?;
    let x = gaussian_rank_r(n, n, rank, &mut rng_from_seed(derive_seed(seed, stream_tag("data")))).map_err(err)?;
    let adam = |lr: f64| TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: lr,
        max_steps: steps,
        ..TrainConfig::default()
    };
    let cfg = TwoPhaseConfig {
        phase1: adam(1e-2),
        polish: Some(PolishConfig {
            max_iters: 200,
            grad_tol: 1e-9 * (1.0 + fro_norm_sq(&x)),
        }),
        phase2: adam(1e-3),
    };
    let mut points = Vec::new();
    let mut k = 1;
    while k <= n {
        let ell = prop2_ell(k, 0.5).clamp(k, next_power_of_two(n));
        let mut rng = rng_from_seed(derive_seed(seed, stream_tag(&format!("k={k}"))));
        let r = two_phase_train(&x, &x, k, ell, &cfg, &mut rng).map_err(err)?;
        let sketch = SketchMatrix::new(SketchKind::LearnedButterfly(r.phase1_model.b.clone()), ell, n).map_err(err)?;
        points.push(SweepPoint {
            k,
            ell,
            butterfly_loss: r.phase2_loss,
            pca_loss: rank_k_residual(&x, k).map_err(err)?,
            fjlt_pca_loss: sketch_residual(&sketch, &x, k).map_err(err)?,
        });
        k *= 2;
    }
    serde_json::to_string(&Sweep {
        trace_xx: fro_norm_sq(&x),
        points,
    })
    .map_err(err)
}

// Seeds are u32 on the JS side so they stay plain numbers rather than BigInt.
fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn butterfly_matrix(kind: &str, n: usize, ell: usize, seed: u32) -> Result<String, JsValue> {
    js(butterfly_matrix_json(kind, n, ell, seed.into()))
}

#[wasm_bindgen]
pub fn jl_curve(n: usize, eps: f64, trials: usize, seed: u32) -> Result<String, JsValue> {
    js(jl_curve_json(n, eps, trials, seed.into()))
}

#[wasm_bindgen]
pub fn autoencode_sweep(n: usize, rank: usize, steps: usize, seed: u32) -> Result<String, JsValue> {
    js(autoencode_sweep_json(n, rank, steps, seed.into()))
}
