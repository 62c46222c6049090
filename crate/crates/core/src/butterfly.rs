//! Butterfly networks and their truncations.
//!
//! A butterfly network on `n′ = 2^p` coordinates is a stack of `p` sparse
//! layers. Layer `i` couples every index pair `(j₁, j₂)` whose zero-based
//! binary representations differ only in bit `i`, through a trainable 2×2
//! gadget `[[a, b], [c, d]]`:
//!
//! ```text
//! out[j₁] = a·in[j₁] + b·in[j₂]
//! out[j₂] = c·in[j₁] + d·in[j₂]
//! ```
//!
//! Orientation: layer 0 (bit 0) is applied first to the input, layer `p−1`
//! produces the output. All indices in this crate are zero-based.
//!
//! Storage: one flat `Vec<f64>` with `2·n′` weights per layer; inside a layer,
//! gadgets are ordered by their low index `j₁` and each gadget stores
//! `[a, b, c, d]`. This flat order is also the parameter order used by the
//! gradient engine and by the `BFLY1` file format.
//!
//! A [`TruncatedButterfly`] keeps a frozen subset of output rows, multiplies
//! by a scale, and (when the logical input width `n` is not a power of two)
//! treats inputs `n..n′` as zero, so it acts as an `ℓ × n` matrix.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::{normal, sample_subset, Rng};

pub const BFLY_MAGIC: &[u8; 5] = b"BFLY1";

pub fn is_power_of_two(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

/// Smallest power of two `>= n` (and `>= 1`).
pub fn next_power_of_two(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Index pairs coupled by layer `layer` of an `n_pow2`-wide network, ordered
/// by low index.
pub fn layer_connectivity(n_pow2: usize, layer: usize) -> Result<Vec<(usize, usize)>> {
    if !is_power_of_two(n_pow2) {
        return Err(Error::NotPowerOfTwo(n_pow2));
    }
    let depth = n_pow2.trailing_zeros() as usize;
    if layer >= depth {
        return Err(Error::InvalidLayer { layer, depth });
    }
    Ok((0..n_pow2 / 2).map(|g| gadget_pair(layer, g)).collect())
}

/// The `(j₁, j₂)` pair of gadget `g` in layer `layer`.
#[inline]
pub fn gadget_pair(layer: usize, g: usize) -> (usize, usize) {
    let stride = 1usize << layer;
    let j1 = ((g >> layer) << (layer + 1)) | (g & (stride - 1));
    (j1, j1 | stride)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ButterflyNetwork {
    n_pow2: usize,
    depth: usize,
    weights: Vec<f64>,
}

impl ButterflyNetwork {
    fn with_gadget(n_pow2: usize, gadget: [f64; 4]) -> Result<Self> {
        if !is_power_of_two(n_pow2) {
            return Err(Error::NotPowerOfTwo(n_pow2));
        }
        let depth = n_pow2.trailing_zeros() as usize;
        let weights = gadget.repeat(depth * n_pow2 / 2);
        Ok(Self { n_pow2, depth, weights })
    }

    /// Every gadget is the 2×2 identity.
    pub fn new_identity(n_pow2: usize) -> Result<Self> {
        Self::with_gadget(n_pow2, [1.0, 0.0, 0.0, 1.0])
    }

    /// Every gadget is `[[1, 1], [1, −1]]/√2`. The product is the normalized
    /// Walsh-Hadamard matrix in natural (Sylvester) order,
    /// `H[i][j] = (−1)^popcount(i & j) / √n′`, which is symmetric and orthogonal.
    pub fn new_hadamard(n_pow2: usize) -> Result<Self> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self::with_gadget(n_pow2, [h, h, h, -h])
    }

    /// Gadget weights drawn i.i.d. from `N(0, 1/2)`.
    pub fn new_random(n_pow2: usize, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::new_identity(n_pow2)?;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        net.weights.iter_mut().for_each(|w| *w = s * normal(rng));
        Ok(net)
    }

    pub fn from_weights(n_pow2: usize, weights: Vec<f64>) -> Result<Self> {
        let mut net = Self::new_identity(n_pow2)?;
        if weights.len() != net.weights.len() {
            return Err(Error::LengthMismatch {
                expected: net.weights.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("ButterflyNetwork::from_weights"));
        }
        net.weights = weights;
        Ok(net)
    }

    pub fn n_pow2(&self) -> usize {
        self.n_pow2
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        let w = 2 * self.n_pow2;
        &self.weights[layer * w..(layer + 1) * w]
    }

    pub fn layer_weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let w = 2 * self.n_pow2;
        &mut self.weights[layer * w..(layer + 1) * w]
    }

    pub fn gadget(&self, layer: usize, g: usize) -> [f64; 4] {
        let lw = self.layer_weights(layer);
        [lw[4 * g], lw[4 * g + 1], lw[4 * g + 2], lw[4 * g + 3]]
    }

    /// Dense `n′ × n′` matrix of a single layer.
    pub fn layer_matrix(&self, layer: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n_pow2, self.n_pow2);
        for g in 0..self.n_pow2 / 2 {
            let (j1, j2) = gadget_pair(layer, g);
            let [a, b, c, d] = self.gadget(layer, g);
            m[(j1, j1)] = a;
            m[(j1, j2)] = b;
            m[(j2, j1)] = c;
            m[(j2, j2)] = d;
        }
        m
    }

    /// Apply one layer in place to a row-major `n′ × width` buffer (each gadget
    /// mixes two rows).
    pub(crate) fn apply_layer(&self, layer: usize, buf: &mut [f64], width: usize) {
        let lw = self.layer_weights(layer);
        for g in 0..self.n_pow2 / 2 {
            let (j1, j2) = gadget_pair(layer, g);
            let (a, b, c, d) = (lw[4 * g], lw[4 * g + 1], lw[4 * g + 2], lw[4 * g + 3]);
            let (lo, hi) = buf.split_at_mut(j2 * width);
            let r1 = &mut lo[j1 * width..(j1 + 1) * width];
            let r2 = &mut hi[..width];
            for (x1, x2) in r1.iter_mut().zip(r2.iter_mut()) {
                let (u, v) = (*x1, *x2);
                *x1 = a * u + b * v;
                *x2 = c * u + d * v;
            }
        }
    }

    /// Apply the transpose of one layer in place.
    pub(crate) fn apply_layer_transposed(&self, layer: usize, buf: &mut [f64], width: usize) {
        let lw = self.layer_weights(layer);
        for g in 0..self.n_pow2 / 2 {
            let (j1, j2) = gadget_pair(layer, g);
            let (a, b, c, d) = (lw[4 * g], lw[4 * g + 1], lw[4 * g + 2], lw[4 * g + 3]);
            let (lo, hi) = buf.split_at_mut(j2 * width);
            let r1 = &mut lo[j1 * width..(j1 + 1) * width];
            let r2 = &mut hi[..width];
            for (x1, x2) in r1.iter_mut().zip(r2.iter_mut()) {
                let (u, v) = (*x1, *x2);
                *x1 = a * u + c * v;
                *x2 = b * u + d * v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedButterfly {
    net: ButterflyNetwork,
    n_in: usize,
    kept: Vec<usize>,
    scale: f64,
}

/// Per-layer inputs recorded during a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct ButterflyTape {
    width: usize,
    /// `acts[i]` is the `n′ × width` buffer fed into the i-th applied layer.
    acts: Vec<Vec<f64>>,
}

impl TruncatedButterfly {
    pub fn new(net: ButterflyNetwork, n_in: usize, kept: Vec<usize>, scale: f64) -> Result<Self> {
        let n = net.n_pow2();
        if n_in == 0 || n_in > n {
            return Err(Error::InvalidDims(format!("n_in = {n_in} must be in 1..={n}")));
        }
        if kept.is_empty() {
            return Err(Error::InvalidDims("kept output set is empty".into()));
        }
        if !kept.windows(2).all(|w| w[0] < w[1]) || *kept.last().unwrap() >= n {
            return Err(Error::InvalidDims(format!(
                "kept indices must be strictly increasing within 0..{n}"
            )));
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("TruncatedButterfly scale"));
        }
        Ok(Self { net, n_in, kept, scale })
    }

    /// Untruncated network: all outputs kept, `n = n′`, scale 1.
    pub fn full(net: ButterflyNetwork) -> Self {
        let n = net.n_pow2();
        Self {
            net,
            n_in: n,
            kept: (0..n).collect(),
            scale: 1.0,
        }
    }

    /// Network on `next_power_of_two(n_in)` coordinates with `ell` output rows
    /// sampled uniformly without replacement.
    pub fn with_random_outputs(
        net: ButterflyNetwork,
        n_in: usize,
        ell: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if ell == 0 || ell > net.n_pow2() {
            return Err(Error::InvalidDims(format!(
                "ell = {ell} must be in 1..={}",
                net.n_pow2()
            )));
        }
        let kept = sample_subset(rng, net.n_pow2(), ell);
        Self::new(net, n_in, kept, scale)
    }

    pub fn net(&self) -> &ButterflyNetwork {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut ButterflyNetwork {
        &mut self.net
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_pow2(&self) -> usize {
        self.net.n_pow2()
    }

    pub fn ell(&self) -> usize {
        self.kept.len()
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    pub fn num_weights(&self) -> usize {
        self.net.weights().len()
    }

    fn padded(&self, x: &DenseMatrix) -> Vec<f64> {
        let mut buf = vec![0.0; self.n_pow2() * x.cols()];
        buf[..x.data().len()].copy_from_slice(x.data());
        buf
    }

    fn select(&self, buf: &[f64], width: usize) -> DenseMatrix {
        let mut out = Vec::with_capacity(self.ell() * width);
        for &k in &self.kept {
            out.extend(buf[k * width..(k + 1) * width].iter().map(|v| v * self.scale));
        }
        DenseMatrix::from_vec_unchecked(self.ell(), width, out)
    }

    fn scatter(&self, y: &DenseMatrix) -> Vec<f64> {
        let width = y.cols();
        let mut buf = vec![0.0; self.n_pow2() * width];
        for (r, &k) in self.kept.iter().enumerate() {
            for (dst, src) in buf[k * width..(k + 1) * width].iter_mut().zip(y.row(r)) {
                *dst = self.scale * src;
            }
        }
        buf
    }

    fn check_rows(&self, got: usize, expected: usize, context: &'static str) -> Result<()> {
        if got != expected {
            return Err(Error::DimensionMismatch { context, expected, got });
        }
        Ok(())
    }

    /// `B · X` for an `n × d` matrix `X` (each column transformed).
    pub fn apply_matrix(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_rows(x.rows(), self.n_in, "butterfly apply")?;
        let width = x.cols();
        let mut buf = self.padded(x);
        for layer in 0..self.net.depth() {
            self.net.apply_layer(layer, &mut buf, width);
        }
        Ok(self.select(&buf, width))
    }

    /// `Bᵀ · Y` for an `ℓ × d` matrix `Y`, computed layer by layer.
    pub fn apply_adjoint_matrix(&self, y: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_rows(y.rows(), self.ell(), "butterfly adjoint")?;
        let width = y.cols();
        let mut buf = self.scatter(y);
        for layer in (0..self.net.depth()).rev() {
            self.net.apply_layer_transposed(layer, &mut buf, width);
        }
        buf.truncate(self.n_in * width);
        Ok(DenseMatrix::from_vec_unchecked(self.n_in, width, buf))
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply_matrix(&DenseMatrix::column_vector(x))?.into_data())
    }

    pub fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply_adjoint_matrix(&DenseMatrix::column_vector(y))?.into_data())
    }

    /// Explicit `ℓ × n` matrix.
    pub fn materialize(&self) -> DenseMatrix {
        let n = self.n_in;
        // Transform the identity: column j of the result is B e_j.
        let eye = DenseMatrix::identity(n);
        self.apply_matrix(&eye).expect("identity has n_in rows")
    }

    /// Forward pass that records the input of every layer.
    pub fn forward_taped(&self, x: &DenseMatrix) -> Result<(DenseMatrix, ButterflyTape)> {
        self.check_rows(x.rows(), self.n_in, "butterfly forward")?;
        let width = x.cols();
        let mut buf = self.padded(x);
        let mut acts = Vec::with_capacity(self.net.depth());
        for layer in 0..self.net.depth() {
            acts.push(buf.clone());
            self.net.apply_layer(layer, &mut buf, width);
        }
        Ok((self.select(&buf, width), ButterflyTape { width, acts }))
    }

    /// Given `G = ∂L/∂(B·X)` (`ℓ × d`), returns `(∂L/∂weights, ∂L/∂X)`.
    pub fn backward(&self, tape: &ButterflyTape, grad_out: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
        let width = tape.width;
        self.check_rows(grad_out.rows(), self.ell(), "butterfly backward")?;
        self.check_rows(grad_out.cols(), width, "butterfly backward width")?;
        let n = self.n_pow2();
        let mut grad_w = vec![0.0; self.num_weights()];
        let mut g = self.scatter(grad_out);
        for layer in (0..self.net.depth()).rev() {
            let a = &tape.acts[layer];
            let lw = self.net.layer_weights(layer);
            let gw = &mut grad_w[layer * 2 * n..(layer + 1) * 2 * n];
            for gi in 0..n / 2 {
                let (j1, j2) = gadget_pair(layer, gi);
                let a1 = &a[j1 * width..(j1 + 1) * width];
                let a2 = &a[j2 * width..(j2 + 1) * width];
                let (lo, hi) = g.split_at_mut(j2 * width);
                let g1 = &mut lo[j1 * width..(j1 + 1) * width];
                let g2 = &mut hi[..width];
                let (mut da, mut db, mut dc, mut dd) = (0.0, 0.0, 0.0, 0.0);
                for t in 0..width {
                    da += g1[t] * a1[t];
                    db += g1[t] * a2[t];
                    dc += g2[t] * a1[t];
                    dd += g2[t] * a2[t];
                }
                gw[4 * gi] += da;
                gw[4 * gi + 1] += db;
                gw[4 * gi + 2] += dc;
                gw[4 * gi + 3] += dd;
                let (wa, wb, wc, wd) = (lw[4 * gi], lw[4 * gi + 1], lw[4 * gi + 2], lw[4 * gi + 3]);
                for (x1, x2) in g1.iter_mut().zip(g2.iter_mut()) {
                    let (u, v) = (*x1, *x2);
                    *x1 = wa * u + wc * v;
                    *x2 = wb * u + wd * v;
                }
            }
        }
        g.truncate(self.n_in * width);
        Ok((grad_w, DenseMatrix::from_vec_unchecked(self.n_in, width, g)))
    }

    /// Forward pass of `Bᵀ · Y` recording per-layer inputs.
    pub fn adjoint_forward_taped(&self, y: &DenseMatrix) -> Result<(DenseMatrix, ButterflyTape)> {
        self.check_rows(y.rows(), self.ell(), "butterfly adjoint forward")?;
        let width = y.cols();
        let mut buf = self.scatter(y);
        let depth = self.net.depth();
        let mut acts = vec![Vec::new(); depth];
        for layer in (0..depth).rev() {
            acts[layer] = buf.clone();
            self.net.apply_layer_transposed(layer, &mut buf, width);
        }
        buf.truncate(self.n_in * width);
        Ok((
            DenseMatrix::from_vec_unchecked(self.n_in, width, buf),
            ButterflyTape { width, acts },
        ))
    }

    /// Given `G = ∂L/∂(Bᵀ·Y)` (`n × d`), returns `(∂L/∂weights, ∂L/∂Y)`.
    pub fn adjoint_backward(&self, tape: &ButterflyTape, grad_out: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
        let width = tape.width;
        self.check_rows(grad_out.rows(), self.n_in, "butterfly adjoint backward")?;
        self.check_rows(grad_out.cols(), width, "butterfly adjoint backward width")?;
        let n = self.n_pow2();
        let mut grad_w = vec![0.0; self.num_weights()];
        let mut g = vec![0.0; n * width];
        g[..grad_out.data().len()].copy_from_slice(grad_out.data());
        for layer in 0..self.net.depth() {
            let a = &tape.acts[layer];
            let lw = self.net.layer_weights(layer);
            let gw = &mut grad_w[layer * 2 * n..(layer + 1) * 2 * n];
            for gi in 0..n / 2 {
                let (j1, j2) = gadget_pair(layer, gi);
                let a1 = &a[j1 * width..(j1 + 1) * width];
                let a2 = &a[j2 * width..(j2 + 1) * width];
                let (lo, hi) = g.split_at_mut(j2 * width);
                let g1 = &mut lo[j1 * width..(j1 + 1) * width];
                let g2 = &mut hi[..width];
                // transposed gadget: out1 = a·in1 + c·in2, out2 = b·in1 + d·in2
                let (mut da, mut db, mut dc, mut dd) = (0.0, 0.0, 0.0, 0.0);
                for t in 0..width {
                    da += g1[t] * a1[t];
                    dc += g1[t] * a2[t];
                    db += g2[t] * a1[t];
                    dd += g2[t] * a2[t];
                }
                gw[4 * gi] += da;
                gw[4 * gi + 1] += db;
                gw[4 * gi + 2] += dc;
                gw[4 * gi + 3] += dd;
                let (wa, wb, wc, wd) = (lw[4 * gi], lw[4 * gi + 1], lw[4 * gi + 2], lw[4 * gi + 3]);
                for (x1, x2) in g1.iter_mut().zip(g2.iter_mut()) {
                    let (u, v) = (*x1, *x2);
                    *x1 = wa * u + wb * v;
                    *x2 = wc * u + wd * v;
                }
            }
        }
        let mut out = Vec::with_capacity(self.ell() * width);
        for &k in &self.kept {
            out.extend(g[k * width..(k + 1) * width].iter().map(|v| v * self.scale));
        }
        Ok((grad_w, DenseMatrix::from_vec_unchecked(self.ell(), width, out)))
    }

    /// Which weight slots lie on some path from a live input (`0..n_in`) to a
    /// kept output; indexed like [`ButterflyNetwork::weights`].
    pub fn effective_weight_mask(&self) -> Vec<bool> {
        let n = self.n_pow2();
        let depth = self.net.depth();
        // forward[i][j]: node j at level i reachable from an input.
        let mut forward = vec![vec![false; n]; depth + 1];
        forward[0][..self.n_in].iter_mut().for_each(|v| *v = true);
        for i in 0..depth {
            for j in 0..n {
                if forward[i][j] {
                    forward[i + 1][j] = true;
                    forward[i + 1][j ^ (1 << i)] = true;
                }
            }
        }
        // backward[i][j]: node j at level i reaches a kept output.
        let mut backward = vec![vec![false; n]; depth + 1];
        for &k in &self.kept {
            backward[depth][k] = true;
        }
        for i in (0..depth).rev() {
            for j in 0..n {
                backward[i][j] = backward[i + 1][j] || backward[i + 1][j ^ (1 << i)];
            }
        }
        let mut mask = vec![false; self.num_weights()];
        for layer in 0..depth {
            for g in 0..n / 2 {
                let (j1, j2) = gadget_pair(layer, g);
                let (src, dst) = (&forward[layer], &backward[layer + 1]);
                // slots: a = j1→j1, b = j2→j1, c = j1→j2, d = j2→j2
                let edges = [(j1, j1), (j2, j1), (j1, j2), (j2, j2)];
                for (slot, &(from, to)) in edges.iter().enumerate() {
                    mask[layer * 2 * n + 4 * g + slot] = src[from] && dst[to];
                }
            }
        }
        mask
    }

    /// Number of weights on some input → kept-output path.
    pub fn effective_weight_count(&self) -> usize {
        self.effective_weight_mask().into_iter().filter(|&m| m).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.ell() + 8 * self.num_weights());
        out.extend_from_slice(BFLY_MAGIC);
        for v in [self.n_pow2(), self.n_in, self.net.depth(), self.ell()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &k in &self.kept {
            out.extend_from_slice(&(k as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.scale.to_le_bytes());
        for w in self.net.weights() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 5];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::MalformedFile("truncated BFLY1 header".into()))?;
        if &magic != BFLY_MAGIC {
            return Err(Error::MalformedFile("bad magic, expected BFLY1".into()));
        }
        let read_u32 = |cur: &mut &[u8]| -> Result<usize> {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b)
                .map_err(|_| Error::MalformedFile("truncated BFLY1 body".into()))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let n_pow2 = read_u32(&mut cur)?;
        let n_in = read_u32(&mut cur)?;
        let depth = read_u32(&mut cur)?;
        let ell = read_u32(&mut cur)?;
        if !is_power_of_two(n_pow2) || depth != n_pow2.trailing_zeros() as usize {
            return Err(Error::MalformedFile(format!(
                "inconsistent n′ = {n_pow2}, depth = {depth}"
            )));
        }
        if ell > n_pow2 {
            return Err(Error::MalformedFile(format!("ell = {ell} exceeds n′ = {n_pow2}")));
        }
        let kept = (0..ell).map(|_| read_u32(&mut cur)).collect::<Result<Vec<_>>>()?;
        let read_f64 = |cur: &mut &[u8]| -> Result<f64> {
            let mut b = [0u8; 8];
            cur.read_exact(&mut b)
                .map_err(|_| Error::MalformedFile("truncated BFLY1 weights".into()))?;
            Ok(f64::from_le_bytes(b))
        };
        let scale = read_f64(&mut cur)?;
        let count = depth * 2 * n_pow2;
        let weights = (0..count).map(|_| read_f64(&mut cur)).collect::<Result<Vec<_>>>()?;
        if !cur.is_empty() {
            return Err(Error::MalformedFile(format!("{} trailing bytes", cur.len())));
        }
        let net = ButterflyNetwork::from_weights(n_pow2, weights)?;
        Self::new(net, n_in, kept, scale).map_err(|e| Error::MalformedFile(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(s)?;
        let net = ButterflyNetwork::from_weights(raw.net.n_pow2, raw.net.weights)?;
        Self::new(net, raw.n_in, raw.kept, raw.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_truncated(n_in: usize, ell: usize, seed: u64) -> TruncatedButterfly {
        let mut rng = rng_from_seed(seed);
        let n = next_power_of_two(n_in);
        let net = ButterflyNetwork::new_random(n, &mut rng).unwrap();
        TruncatedButterfly::with_random_outputs(net, n_in, ell, 1.3, &mut rng).unwrap()
    }

    #[test]
    fn connectivity_small() {
        assert_eq!(layer_connectivity(4, 0).unwrap(), vec![(0, 1), (2, 3)]);
        assert_eq!(layer_connectivity(4, 1).unwrap(), vec![(0, 2), (1, 3)]);
        assert!(matches!(layer_connectivity(4, 2), Err(Error::InvalidLayer { .. })));
        assert!(matches!(layer_connectivity(6, 0), Err(Error::NotPowerOfTwo(6))));
    }

    #[test]
    fn connectivity_partitions_by_bit_rule() {
        for n in [2usize, 4, 8, 16, 32] {
            let depth = n.trailing_zeros() as usize;
            for i in 0..depth {
                let pairs = layer_connectivity(n, i).unwrap();
                assert_eq!(pairs.len(), n / 2);
                let mut seen = vec![false; n];
                for &(a, b) in &pairs {
                    assert_eq!(a ^ b, 1 << i);
                    assert!(!seen[a] && !seen[b]);
                    seen[a] = true;
                    seen[b] = true;
                }
                assert!(seen.iter().all(|&s| s));
                // Brute force: every bit-i pair appears.
                let brute = (0..n).filter(|&j| j & (1 << i) == 0).count();
                assert_eq!(brute, pairs.len());
            }
        }
    }

    #[test]
    fn identity_network() {
        let b = TruncatedButterfly::full(ButterflyNetwork::new_identity(4).unwrap());
        assert_eq!(b.apply(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            b.apply_adjoint(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(b.materialize(), DenseMatrix::identity(4));
        let sel = TruncatedButterfly::new(ButterflyNetwork::new_identity(4).unwrap(), 4, vec![0], 1.0).unwrap();
        assert_eq!(sel.apply(&[7.0, 1.0, 2.0, 3.0]).unwrap(), vec![7.0]);
        let rows = TruncatedButterfly::new(ButterflyNetwork::new_identity(4).unwrap(), 4, vec![1, 3], 1.0).unwrap();
        assert_eq!(rows.materialize(), DenseMatrix::identity(4).select_rows(&[1, 3]));
    }

    fn hadamard_oracle(n: usize) -> DenseMatrix {
        // Sylvester recursion H_{2m} = [[H, H], [H, -H]], normalized at the end.
        let mut h = DenseMatrix::identity(1);
        while h.rows() < n {
            let m = h.rows();
            h = DenseMatrix::from_fn(2 * m, 2 * m, |i, j| {
                let v = h[(i % m, j % m)];
                if i >= m && j >= m {
                    -v
                } else {
                    v
                }
            });
        }
        h.scale(1.0 / (n as f64).sqrt())
    }

    #[test]
    fn hadamard_network() {
        let b2 = TruncatedButterfly::full(ButterflyNetwork::new_hadamard(2).unwrap());
        let y = b2.apply(&[1.0, 0.0]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((y[0] - h).abs() < 1e-15 && (y[1] - h).abs() < 1e-15);

        let b8 = TruncatedButterfly::full(ButterflyNetwork::new_hadamard(8).unwrap()).materialize();
        let gram = b8.matmul_t(&b8).unwrap();
        assert!(gram.max_abs_diff(&DenseMatrix::identity(8)) <= 1e-12);

        let b4 = TruncatedButterfly::full(ButterflyNetwork::new_hadamard(4).unwrap());
        let y = b4.apply(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        let expect = [2.0, 0.0, 0.0, 0.0];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
        for n in [2usize, 4, 8, 16, 32] {
            let m = TruncatedButterfly::full(ButterflyNetwork::new_hadamard(n).unwrap()).materialize();
            assert!(m.max_abs_diff(&hadamard_oracle(n)) < 1e-13);
        }
        let m4 = b4.materialize();
        assert!(m4.data().iter().all(|v| (v.abs() - 0.5).abs() < 1e-15));
    }

    #[test]
    fn apply_matches_materialize() {
        let mut rng = rng_from_seed(99);
        for (case, n_in) in [3usize, 8, 13, 16].into_iter().enumerate() {
            let b = random_truncated(n_in, 3.min(n_in), case as u64);
            let m = b.materialize();
            assert_eq!(m.shape(), (b.ell(), n_in));
            for _ in 0..20 {
                let x: Vec<f64> = (0..n_in).map(|_| normal(&mut rng)).collect();
                let y = b.apply(&x).unwrap();
                let y_ref = m.mat_vec(&x).unwrap();
                for (a, b) in y.iter().zip(&y_ref) {
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn materialize_equals_layer_product() {
        let b = random_truncated(16, 16, 4);
        let mut prod = DenseMatrix::identity(16);
        for layer in 0..4 {
            prod = b.net().layer_matrix(layer).matmul(&prod).unwrap();
        }
        let prod = prod.scale(b.scale()).select_rows(b.kept());
        assert!(b.materialize().max_abs_diff(&prod) < 1e-12);
    }

    #[test]
    fn adjoint_matches_transpose() {
        let mut rng = rng_from_seed(5);
        let b = random_truncated(11, 5, 8);
        let mt = b.materialize().transpose();
        for _ in 0..10 {
            let y: Vec<f64> = (0..5).map(|_| normal(&mut rng)).collect();
            let x = b.apply_adjoint(&y).unwrap();
            let x_ref = mt.mat_vec(&y).unwrap();
            for (a, b) in x.iter().zip(&x_ref) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let b = random_truncated(8, 4, 1);
        assert!(matches!(b.apply(&[1.0; 7]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(
            b.apply_adjoint(&[1.0; 5]),
            Err(Error::DimensionMismatch { .. })
        ));
        let net = ButterflyNetwork::new_identity(8).unwrap();
        assert!(TruncatedButterfly::new(net.clone(), 8, vec![], 1.0).is_err());
        assert!(TruncatedButterfly::new(net.clone(), 8, vec![3, 2], 1.0).is_err());
        assert!(TruncatedButterfly::new(net.clone(), 8, vec![8], 1.0).is_err());
        assert!(TruncatedButterfly::new(net, 9, vec![1], 1.0).is_err());
        assert!(matches!(
            ButterflyNetwork::new_hadamard(12),
            Err(Error::NotPowerOfTwo(12))
        ));
    }

    #[test]
    fn effective_weights_small_cases() {
        let full = TruncatedButterfly::full(ButterflyNetwork::new_identity(16).unwrap());
        assert_eq!(full.effective_weight_count(), 128);
        let one = TruncatedButterfly::new(ButterflyNetwork::new_identity(16).unwrap(), 16, vec![5], 1.0).unwrap();
        assert_eq!(one.effective_weight_count(), 30);
        for ell in [2usize, 4, 8, 16] {
            let mut rng = rng_from_seed(ell as u64);
            let b = TruncatedButterfly::with_random_outputs(
                ButterflyNetwork::new_identity(16).unwrap(),
                16,
                ell,
                1.0,
                &mut rng,
            )
            .unwrap();
            let bound = 2 * 16 * ell.trailing_zeros() as usize + 6 * 16;
            assert!(b.effective_weight_count() <= bound);
        }
    }

    #[test]
    fn effective_mask_matches_gradient_support() {
        // Weights off every input→output path get zero gradient.
        let b = random_truncated(5, 2, 3);
        let mut rng = rng_from_seed(1);
        let x = DenseMatrix::from_fn(5, 3, |_, _| normal(&mut rng));
        let (_, tape) = b.forward_taped(&x).unwrap();
        let g = DenseMatrix::from_fn(2, 3, |_, _| normal(&mut rng));
        let (gw, _) = b.backward(&tape, &g).unwrap();
        for (m, v) in b.effective_weight_mask().iter().zip(&gw) {
            if !m {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn binary_and_json_round_trip() {
        let b = random_truncated(13, 6, 21);
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..5], BFLY_MAGIC);
        assert_eq!(TruncatedButterfly::from_bytes(&bytes).unwrap(), b);
        assert_eq!(TruncatedButterfly::from_json(&b.to_json().unwrap()).unwrap(), b);
        assert!(TruncatedButterfly::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TruncatedButterfly::from_bytes(b"BFLY2").is_err());
    }
}
