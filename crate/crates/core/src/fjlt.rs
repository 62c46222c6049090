//! The fast Johnson-Lindenstrauss transform realized as a truncated butterfly,
//! plus the Monte-Carlo estimators used to study it.
//!
//! A sample is `J = √(n′/ℓ) · S · H · D`: `D` a random ±1 diagonal, `H` the
//! normalized Walsh-Hadamard butterfly and `S` a uniformly random selection of
//! `ℓ` rows. `D` is folded into the layer-0 gadgets (gadget column `j` is
//! multiplied by the sign of input `j`), so `J` is exactly a
//! [`TruncatedButterfly`] and can seed trainable layers directly. The scale
//! makes `E[JᵀJ] = I`; every entry of the materialized `J` is `±1/√ℓ`.

use serde::{Deserialize, Serialize};

use crate::butterfly::{gadget_pair, next_power_of_two, ButterflyNetwork, TruncatedButterfly};
use crate::error::{Error, Result};
use crate::linalg::{norm2, spectral_norm, DenseMatrix};
use crate::rng::{derive_seed, rademacher, rng_from_seed, unit_vector, Rng, RngExt};

/// Minimum trial count accepted by the estimators.
pub const MIN_TRIALS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FjltSpec {
    pub n: usize,
    pub ell: usize,
    pub seed: u64,
}

impl FjltSpec {
    pub fn validate(&self) -> Result<()> {
        let n_pow2 = next_power_of_two(self.n);
        if self.n == 0 || self.ell == 0 || self.ell > n_pow2 {
            return Err(Error::InvalidDims(format!(
                "FJLT needs n >= 1 and 1 <= ell <= {n_pow2}, got n = {}, ell = {}",
                self.n, self.ell
            )));
        }
        Ok(())
    }

    /// Draw the sample determined by `seed`.
    pub fn sample(&self) -> Result<TruncatedButterfly> {
        sample_fjlt(self.n, self.ell, &mut rng_from_seed(self.seed))
    }
}

/// Draw `J ∈ R^{ℓ×n}` from the FJLT distribution.
pub fn sample_fjlt(n: usize, ell: usize, rng: &mut Rng) -> Result<TruncatedButterfly> {
    FjltSpec { n, ell, seed: 0 }.validate()?;
    let n_pow2 = next_power_of_two(n);
    let mut net = ButterflyNetwork::new_hadamard(n_pow2)?;
    let signs: Vec<f64> = (0..n_pow2).map(|_| rademacher(rng)).collect();
    if n_pow2 > 1 {
        let layer0 = net.layer_weights_mut(0);
        for g in 0..n_pow2 / 2 {
            let (j1, j2) = gadget_pair(0, g);
            layer0[4 * g] *= signs[j1];
            layer0[4 * g + 2] *= signs[j1];
            layer0[4 * g + 1] *= signs[j2];
            layer0[4 * g + 3] *= signs[j2];
        }
    }
    let scale = (n_pow2 as f64 / ell as f64).sqrt();
    let mut b = TruncatedButterfly::with_random_outputs(net, n, ell, scale, rng)?;
    if n_pow2 == 1 {
        // A depth-0 network has no gadget to carry the sign.
        b.set_scale(scale * signs[0]);
    }
    Ok(b)
}

fn check_unit(x: &[f64]) -> Result<()> {
    let norm = norm2(x);
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::NotUnitVector(norm));
    }
    Ok(())
}

/// `‖x − JᵀJx‖₂` for a unit vector `x`.
pub fn jl_distortion(j: &TruncatedButterfly, x: &[f64]) -> Result<f64> {
    check_unit(x)?;
    let back = j.apply_adjoint(&j.apply(x)?)?;
    Ok(x.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `|‖Jx‖² − 1|` for a unit vector `x` (the norm-preservation form of the JL
/// property).
pub fn norm_distortion(j: &TruncatedButterfly, x: &[f64]) -> Result<f64> {
    check_unit(x)?;
    let y = j.apply(x)?;
    Ok((y.iter().map(|v| v * v).sum::<f64>() - 1.0).abs())
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidDims(format!(
            "need at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    Ok(())
}

/// Per-trial generators: one draw from `rng` fixes a base seed, trial `t`
/// uses the derived stream `t`. Trials can therefore be evaluated in any
/// order (or in parallel) with identical results.
fn trial_rngs(rng: &mut Rng, trials: usize) -> impl Iterator<Item = Rng> {
    let base: u64 = rng.random();
    (0..trials).map(move |t| rng_from_seed(derive_seed(base, t as u64)))
}

fn failure_fraction(
    n: usize,
    ell: usize,
    trials: usize,
    rng: &mut Rng,
    mut failed: impl FnMut(&TruncatedButterfly, &[f64]) -> Result<bool>,
) -> Result<f64> {
    check_trials(trials)?;
    let mut failures = 0usize;
    for mut trial in trial_rngs(rng, trials) {
        let j = sample_fjlt(n, ell, &mut trial)?;
        let x = unit_vector(&mut trial, n);
        if failed(&j, &x)? {
            failures += 1;
        }
    }
    Ok(failures as f64 / trials as f64)
}

/// Fraction of trials (fresh `J`, fresh uniform unit `x`) with
/// `jl_distortion(J, x) > eps`.
pub fn estimate_failure_rate(n: usize, ell: usize, eps: f64, trials: usize, rng: &mut Rng) -> Result<f64> {
    failure_fraction(n, ell, trials, rng, |j, x| Ok(jl_distortion(j, x)? > eps))
}

/// Fraction of trials with `norm_distortion(J, x) > eps`.
pub fn estimate_norm_failure_rate(n: usize, ell: usize, eps: f64, trials: usize, rng: &mut Rng) -> Result<f64> {
    failure_fraction(n, ell, trials, rng, |j, x| Ok(norm_distortion(j, x)? > eps))
}

/// `W′ = (J₂ᵀJ₂) W (J₁ᵀJ₁)`, kept in factored form.
#[derive(Debug, Clone)]
pub struct ApproxOperator {
    w: DenseMatrix,
    j1: TruncatedButterfly,
    j2: TruncatedButterfly,
}

/// Build the operator for `W ∈ R^{n₂×n₁}`, `J₁ ∈ R^{k₁×n₁}`, `J₂ ∈ R^{k₂×n₂}`.
pub fn approx_operator(w: &DenseMatrix, j1: &TruncatedButterfly, j2: &TruncatedButterfly) -> Result<ApproxOperator> {
    if j1.n_in() != w.cols() {
        return Err(Error::DimensionMismatch {
            context: "approx_operator J1",
            expected: w.cols(),
            got: j1.n_in(),
        });
    }
    if j2.n_in() != w.rows() {
        return Err(Error::DimensionMismatch {
            context: "approx_operator J2",
            expected: w.rows(),
            got: j2.n_in(),
        });
    }
    Ok(ApproxOperator {
        w: w.clone(),
        j1: j1.clone(),
        j2: j2.clone(),
    })
}

impl ApproxOperator {
    /// `x ↦ J₂ᵀ(J₂(W(J₁ᵀ(J₁x))))`, never forming a dense `J`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.j1.apply_adjoint(&self.j1.apply(x)?)?;
        let v = self.w.mat_vec(&u)?;
        self.j2.apply_adjoint(&self.j2.apply(&v)?)
    }

    pub fn materialize(&self) -> Result<DenseMatrix> {
        let m1 = self.j1.materialize();
        let m2 = self.j2.materialize();
        let p1 = m1.t_matmul(&m1)?;
        let p2 = m2.t_matmul(&m2)?;
        p2.matmul(&self.w)?.matmul(&p1)
    }

    pub fn w(&self) -> &DenseMatrix {
        &self.w
    }
}

/// Fraction of trials (fresh `J₁`, `J₂`, unit `x`) where
/// `‖W′x − Wx‖ ≤ 3·eps·‖W‖₂`.
pub fn prop1_success_rate(
    w: &DenseMatrix,
    eps: f64,
    k1: usize,
    k2: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_trials(trials)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidDims(format!("eps = {eps} must lie in (0, 1)")));
    }
    let bound = 3.0 * eps * spectral_norm(w)?;
    let (n2, n1) = w.shape();
    let mut successes = 0usize;
    for mut trial in trial_rngs(rng, trials) {
        let j1 = sample_fjlt(n1, k1, &mut trial)?;
        let j2 = sample_fjlt(n2, k2, &mut trial)?;
        let x = unit_vector(&mut trial, n1);
        let op = approx_operator(w, &j1, &j2)?;
        let approx = op.apply(&x)?;
        let exact = w.mat_vec(&x)?;
        let err = approx
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if err <= bound {
            successes += 1;
        }
    }
    Ok(successes as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal;

    #[test]
    fn full_transform_is_orthogonal() {
        let mut rng = rng_from_seed(1);
        let j = sample_fjlt(16, 16, &mut rng).unwrap();
        let m = j.materialize();
        assert!(m.t_matmul(&m).unwrap().max_abs_diff(&DenseMatrix::identity(16)) < 1e-12);
        let x = unit_vector(&mut rng, 16);
        assert!(jl_distortion(&j, &x).unwrap() < 1e-10);
    }

    #[test]
    fn entries_have_constant_magnitude() {
        let mut rng = rng_from_seed(2);
        for (n, ell) in [(8usize, 4usize), (64, 16), (13, 5)] {
            let j = sample_fjlt(n, ell, &mut rng).unwrap();
            let target = 1.0 / (ell as f64).sqrt();
            assert!(j.materialize().data().iter().all(|v| (v.abs() - target).abs() <= 1e-12));
        }
    }

    #[test]
    fn expected_gram_is_identity() {
        // Monte-Carlo: average MᵀM over many draws.
        let mut rng = rng_from_seed(3);
        let mut acc = DenseMatrix::zeros(16, 16);
        let draws = 2000;
        for _ in 0..draws {
            let m = sample_fjlt(16, 4, &mut rng).unwrap().materialize();
            acc = acc.add(&m.t_matmul(&m).unwrap()).unwrap();
        }
        let mean = acc.scale(1.0 / draws as f64);
        assert!(mean.max_abs_diff(&DenseMatrix::identity(16)) <= 0.05);
    }

    #[test]
    fn isometry_in_expectation() {
        let mut rng = rng_from_seed(4);
        let x = unit_vector(&mut rng, 64);
        let samples = 5000;
        let mean: f64 = (0..samples)
            .map(|_| {
                let j = sample_fjlt(64, 16, &mut rng).unwrap();
                j.apply(&x).unwrap().iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            / samples as f64;
        assert!((0.95..=1.05).contains(&mean), "mean {mean}");
    }

    #[test]
    fn distortion_matches_dense_oracle() {
        let mut rng = rng_from_seed(5);
        let j = sample_fjlt(32, 8, &mut rng).unwrap();
        let m = j.materialize();
        let x = unit_vector(&mut rng, 32);
        let mtm_x = m.t_matmul(&m).unwrap().mat_vec(&x).unwrap();
        let oracle = x.iter().zip(&mtm_x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((jl_distortion(&j, &x).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn distortion_single_row_identity_by_hand() {
        // J = √n′ e₀ᵀ, x = e₀ → JᵀJx = n′ e₀, distortion n′ − 1.
        let n = 8;
        let j = TruncatedButterfly::new(
            ButterflyNetwork::new_identity(n).unwrap(),
            n,
            vec![0],
            (n as f64).sqrt(),
        )
        .unwrap();
        let mut x = vec![0.0; n];
        x[0] = 1.0;
        assert!((jl_distortion(&j, &x).unwrap() - (n as f64 - 1.0)).abs() < 1e-12);
        assert!(matches!(jl_distortion(&j, &[1.0; 8]), Err(Error::NotUnitVector(_))));
    }

    #[test]
    fn failure_rate_bounds() {
        let mut rng = rng_from_seed(6);
        assert_eq!(estimate_failure_rate(32, 32, 1e-6, 100, &mut rng).unwrap(), 0.0);
        let r = estimate_failure_rate(32, 2, 0.1, 100, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert!(estimate_failure_rate(32, 2, 0.1, 10, &mut rng).is_err());
    }

    #[test]
    fn approx_operator_cases() {
        let mut rng = rng_from_seed(7);
        let w = DenseMatrix::from_fn(12, 10, |_, _| normal(&mut rng));
        let j1 = sample_fjlt(10, 16, &mut rng).unwrap();
        let j2 = sample_fjlt(12, 16, &mut rng).unwrap();
        let op = approx_operator(&w, &j1, &j2).unwrap();
        assert!(op.materialize().unwrap().max_abs_diff(&w) < 1e-12);

        let j1 = sample_fjlt(10, 4, &mut rng).unwrap();
        let j2 = sample_fjlt(12, 5, &mut rng).unwrap();
        let op = approx_operator(&w, &j1, &j2).unwrap();
        let dense = op.materialize().unwrap();
        let x: Vec<f64> = (0..10).map(|_| normal(&mut rng)).collect();
        let a = op.apply(&x).unwrap();
        let b = dense.mat_vec(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= 1e-10));

        let zero = approx_operator(&DenseMatrix::zeros(12, 10), &j1, &j2).unwrap();
        assert!(zero.apply(&x).unwrap().iter().all(|&v| v == 0.0));
        assert!(approx_operator(&w, &j2, &j1).is_err());
    }

    #[test]
    fn prop1_full_rank_always_succeeds() {
        let mut rng = rng_from_seed(8);
        let w = DenseMatrix::from_fn(16, 16, |_, _| normal(&mut rng));
        assert_eq!(prop1_success_rate(&w, 0.1, 16, 16, 100, &mut rng).unwrap(), 1.0);
        let r = prop1_success_rate(&w, 0.99, 1, 1, 100, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
}
