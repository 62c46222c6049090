//! Reverse-mode gradients for chains of linear modules, finite-difference
//! checking, and the SGD / Adam optimizers.
//!
//! A [`Chain`] is a list of named linear modules applied in order to the
//! columns of an input matrix: `Ŷ = M_last ⋯ M_1 · X`. Modules are dense
//! matrices, truncated butterflies, or transposed truncated butterflies.
//! Loss convention: `L = ‖Ŷ − Y‖_F²` (no ½ factor), so `∂L/∂Ŷ = 2(Ŷ − Y)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::butterfly::{ButterflyTape, TruncatedButterfly};
use crate::error::{Error, Result};
use crate::linalg::{fro_norm_sq, DenseMatrix};
use crate::rng::{sample_subset, Rng};

#[derive(Debug, Clone, PartialEq)]
pub enum LinearOp {
    Dense(DenseMatrix),
    Butterfly(TruncatedButterfly),
    /// Applies `Bᵀ`.
    ButterflyTransposed(TruncatedButterfly),
}

impl LinearOp {
    pub fn in_dim(&self) -> usize {
        match self {
            LinearOp::Dense(w) => w.cols(),
            LinearOp::Butterfly(b) => b.n_in(),
            LinearOp::ButterflyTransposed(b) => b.ell(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LinearOp::Dense(w) => w.rows(),
            LinearOp::Butterfly(b) => b.ell(),
            LinearOp::ButterflyTransposed(b) => b.n_in(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            LinearOp::Dense(w) => w.data().len(),
            LinearOp::Butterfly(b) | LinearOp::ButterflyTransposed(b) => b.num_weights(),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            LinearOp::Dense(w) => w.data(),
            LinearOp::Butterfly(b) | LinearOp::ButterflyTransposed(b) => b.net().weights(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            LinearOp::Dense(w) => w.data_mut(),
            LinearOp::Butterfly(b) | LinearOp::ButterflyTransposed(b) => b.net_mut().weights_mut(),
        }
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            LinearOp::Dense(w) => w.matmul(x),
            LinearOp::Butterfly(b) => b.apply_matrix(x),
            LinearOp::ButterflyTransposed(b) => b.apply_adjoint_matrix(x),
        }
    }

    pub fn materialize(&self) -> DenseMatrix {
        match self {
            LinearOp::Dense(w) => w.clone(),
            LinearOp::Butterfly(b) => b.materialize(),
            LinearOp::ButterflyTransposed(b) => b.materialize().transpose(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub name: String,
    pub op: LinearOp,
}

impl Module {
    pub fn new(name: impl Into<String>, op: LinearOp) -> Self {
        Self { name: name.into(), op }
    }
}

/// Ordered composition of linear modules; `modules[0]` touches the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    modules: Vec<Module>,
    version: u64,
}

impl Chain {
    pub fn new(modules: Vec<Module>) -> Result<Self> {
        for pair in modules.windows(2) {
            if pair[0].op.out_dim() != pair[1].op.in_dim() {
                return Err(Error::DimensionMismatch {
                    context: "chain composition",
                    expected: pair[0].op.out_dim(),
                    got: pair[1].op.in_dim(),
                });
            }
        }
        let mut names = BTreeSet::new();
        if !modules.iter().all(|m| names.insert(m.name.clone())) {
            return Err(Error::InvalidDims("duplicate module names in chain".into()));
        }
        Ok(Self { modules, version: 0 })
    }

    pub fn modules(&self) -> &[Module] {
        &self.modules
    }

    pub fn module(&self, name: &str) -> Option<&Module> {
        self.modules.iter().find(|m| m.name == name)
    }

    /// Mutable access to a module's operator; invalidates outstanding caches.
    pub fn op_mut(&mut self, name: &str) -> Option<&mut LinearOp> {
        self.version += 1;
        self.modules.iter_mut().find(|m| m.name == name).map(|m| &mut m.op)
    }

    pub fn into_modules(self) -> Vec<Module> {
        self.modules
    }

    pub fn in_dim(&self) -> usize {
        self.modules.first().map_or(0, |m| m.op.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.modules.last().map_or(0, |m| m.op.out_dim())
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut cur = x.clone();
        for m in &self.modules {
            cur = m.op.apply(&cur)?;
        }
        Ok(cur)
    }

    /// Dense end-to-end matrix (product of materialized modules).
    pub fn materialize(&self) -> Result<DenseMatrix> {
        let mut acc = DenseMatrix::identity(self.in_dim());
        for m in &self.modules {
            acc = m.op.materialize().matmul(&acc)?;
        }
        Ok(acc)
    }

    /// Layout of the trainable parameters, skipping modules named in `freeze`.
    pub fn layout(&self, freeze: &BTreeSet<String>) -> Arc<ParamLayout> {
        let mut ranges = Vec::with_capacity(self.modules.len());
        let mut total = 0;
        for m in &self.modules {
            if freeze.contains(&m.name) {
                ranges.push(None);
            } else {
                let len = m.op.num_params();
                ranges.push(Some(total..total + len));
                total += len;
            }
        }
        let shapes = self
            .modules
            .iter()
            .map(|m| match &m.op {
                LinearOp::Dense(w) => ModuleShape::Dense { cols: w.cols() },
                LinearOp::Butterfly(b) | LinearOp::ButterflyTransposed(b) => {
                    ModuleShape::Butterfly { n_pow2: b.n_pow2() }
                }
            })
            .collect();
        Arc::new(ParamLayout { ranges, shapes, total })
    }

    pub fn params(&self, layout: &Arc<ParamLayout>) -> ParamVector {
        let mut values = vec![0.0; layout.total];
        for (m, range) in self.modules.iter().zip(&layout.ranges) {
            if let Some(r) = range {
                values[r.clone()].copy_from_slice(m.op.params());
            }
        }
        ParamVector {
            values,
            layout: Arc::clone(layout),
        }
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        self.set_flat(&params.layout, &params.values)
    }

    pub fn set_flat(&mut self, layout: &ParamLayout, values: &[f64]) -> Result<()> {
        if values.len() != layout.total || layout.ranges.len() != self.modules.len() {
            return Err(Error::ShapeMismatch {
                expected: layout.total,
                got: values.len(),
            });
        }
        self.version += 1;
        for (m, range) in self.modules.iter_mut().zip(&layout.ranges) {
            if let Some(r) = range {
                m.op.params_mut().copy_from_slice(&values[r.clone()]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ModuleShape {
    Dense { cols: usize },
    Butterfly { n_pow2: usize },
}

/// Where one flat parameter lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamIndex {
    Dense {
        module: usize,
        row: usize,
        col: usize,
    },
    Gadget {
        module: usize,
        layer: usize,
        gadget: usize,
        slot: usize,
    },
}

/// Bijection between flat parameter positions and module coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    ranges: Vec<Option<std::ops::Range<usize>>>,
    shapes: Vec<ModuleShape>,
    total: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn module_range(&self, module: usize) -> Option<std::ops::Range<usize>> {
        self.ranges.get(module).cloned().flatten()
    }

    pub fn index_of(&self, flat: usize) -> Option<ParamIndex> {
        let (module, range) = self
            .ranges
            .iter()
            .enumerate()
            .find_map(|(i, r)| r.as_ref().filter(|r| r.contains(&flat)).map(|r| (i, r.clone())))?;
        let off = flat - range.start;
        Some(match self.shapes[module] {
            ModuleShape::Dense { cols } => ParamIndex::Dense {
                module,
                row: off / cols,
                col: off % cols,
            },
            ModuleShape::Butterfly { n_pow2 } => ParamIndex::Gadget {
                module,
                layer: off / (2 * n_pow2),
                gadget: (off % (2 * n_pow2)) / 4,
                slot: off % 4,
            },
        })
    }

    pub fn flat_of(&self, idx: ParamIndex) -> Option<usize> {
        match idx {
            ParamIndex::Dense { module, row, col } => {
                let r = self.module_range(module)?;
                let ModuleShape::Dense { cols } = self.shapes[module] else {
                    return None;
                };
                let off = row * cols + col;
                (col < cols && off < r.len()).then_some(r.start + off)
            }
            ParamIndex::Gadget {
                module,
                layer,
                gadget,
                slot,
            } => {
                let r = self.module_range(module)?;
                let ModuleShape::Butterfly { n_pow2 } = self.shapes[module] else {
                    return None;
                };
                let off = layer * 2 * n_pow2 + gadget * 4 + slot;
                (slot < 4 && gadget < n_pow2 / 2 && off < r.len()).then_some(r.start + off)
            }
        }
    }
}

/// Flat view over trainable weights (or their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn inf_norm(&self) -> f64 {
        inf_norm(&self.values)
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone)]
enum ModuleCache {
    Dense(DenseMatrix),
    Butterfly(ButterflyTape),
}

/// Activations recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    entries: Vec<ModuleCache>,
}

pub fn forward(chain: &Chain, x: &DenseMatrix) -> Result<(DenseMatrix, Cache)> {
    if x.rows() != chain.in_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward",
            expected: chain.in_dim(),
            got: x.rows(),
        });
    }
    let mut entries = Vec::with_capacity(chain.modules.len());
    let mut cur = x.clone();
    for m in &chain.modules {
        cur = match &m.op {
            LinearOp::Dense(w) => {
                let out = w.matmul(&cur)?;
                entries.push(ModuleCache::Dense(cur));
                out
            }
            LinearOp::Butterfly(b) => {
                let (out, tape) = b.forward_taped(&cur)?;
                entries.push(ModuleCache::Butterfly(tape));
                out
            }
            LinearOp::ButterflyTransposed(b) => {
                let (out, tape) = b.adjoint_forward_taped(&cur)?;
                entries.push(ModuleCache::Butterfly(tape));
                out
            }
        };
    }
    Ok((
        cur,
        Cache {
            version: chain.version,
            entries,
        },
    ))
}

/// Gradients of `L` with respect to every trainable parameter in `layout`,
/// given `∂L/∂Ŷ`. Also returns `∂L/∂X`.
pub fn backward_with_input(
    chain: &Chain,
    cache: &Cache,
    dl_dy: &DenseMatrix,
    layout: &Arc<ParamLayout>,
) -> Result<(ParamVector, DenseMatrix)> {
    if cache.version != chain.version || cache.entries.len() != chain.modules.len() {
        return Err(Error::StaleCache);
    }
    if layout.ranges.len() != chain.modules.len() {
        return Err(Error::ShapeMismatch {
            expected: chain.modules.len(),
            got: layout.ranges.len(),
        });
    }
    let mut grads = vec![0.0; layout.total];
    let mut g = dl_dy.clone();
    for (idx, (m, entry)) in chain.modules.iter().zip(&cache.entries).enumerate().rev() {
        let range = layout.ranges[idx].clone();
        g = match (&m.op, entry) {
            (LinearOp::Dense(w), ModuleCache::Dense(input)) => {
                if let Some(r) = range {
                    let gw = g.matmul_t(input)?;
                    grads[r].copy_from_slice(gw.data());
                }
                w.t_matmul(&g)?
            }
            (LinearOp::Butterfly(b), ModuleCache::Butterfly(tape)) => {
                let (gw, gx) = b.backward(tape, &g)?;
                if let Some(r) = range {
                    grads[r].copy_from_slice(&gw);
                }
                gx
            }
            (LinearOp::ButterflyTransposed(b), ModuleCache::Butterfly(tape)) => {
                let (gw, gx) = b.adjoint_backward(tape, &g)?;
                if let Some(r) = range {
                    grads[r].copy_from_slice(&gw);
                }
                gx
            }
            _ => return Err(Error::StaleCache),
        };
    }
    Ok((
        ParamVector {
            values: grads,
            layout: Arc::clone(layout),
        },
        g,
    ))
}

pub fn backward(chain: &Chain, cache: &Cache, dl_dy: &DenseMatrix, layout: &Arc<ParamLayout>) -> Result<ParamVector> {
    Ok(backward_with_input(chain, cache, dl_dy, layout)?.0)
}

/// `‖Ŷ − Y‖_F²` and its gradient `2(Ŷ − Y)`.
pub fn squared_loss(y_hat: &DenseMatrix, y: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let r = y_hat.sub(y)?;
    Ok((fro_norm_sq(&r), r.scale(2.0)))
}

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    fn loss_and_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn loss(&mut self, params: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(params)?.0)
    }
}

/// Squared loss of a chain on fixed data, over the trainable parameters in
/// `layout`.
pub struct ChainObjective<'a> {
    pub chain: &'a mut Chain,
    pub layout: Arc<ParamLayout>,
    pub x: &'a DenseMatrix,
    pub y: &'a DenseMatrix,
}

impl Objective for ChainObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.total
    }

    fn loss_and_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.chain.set_flat(&self.layout, params)?;
        let (y_hat, cache) = forward(self.chain, self.x)?;
        let (loss, dl) = squared_loss(&y_hat, self.y)?;
        let g = backward(self.chain, &cache, &dl, &self.layout)?;
        Ok((loss, g.values))
    }

    fn loss(&mut self, params: &[f64]) -> Result<f64> {
        self.chain.set_flat(&self.layout, params)?;
        Ok(fro_norm_sq(&self.chain.apply(self.x)?.sub(self.y)?))
    }
}

/// Central-difference check of `obj` at `params` on up to `sample` randomly
/// chosen coordinates. Returns the largest `|g_fd − g| / max(1e-8, |g_fd|)`.
pub fn fd_check_objective(
    obj: &mut dyn Objective,
    params: &[f64],
    h: f64,
    sample: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let all: Vec<usize> = (0..params.len()).collect();
    fd_check_indices(obj, params, h, &all, sample, rng)
}

/// [`fd_check_objective`] drawing the sampled coordinates from `candidates`.
pub fn fd_check_indices(
    obj: &mut dyn Objective,
    params: &[f64],
    h: f64,
    candidates: &[usize],
    sample: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if !(h > 1e-8 && h < 1e-3) {
        return Err(Error::InvalidDims(format!(
            "finite-difference step {h} outside (1e-8, 1e-3)"
        )));
    }
    if let Some(&bad) = candidates.iter().find(|&&i| i >= params.len()) {
        return Err(Error::InvalidIndexSet(format!(
            "parameter {bad} out of range {}",
            params.len()
        )));
    }
    let (_, grad) = obj.loss_and_grad(params)?;
    let picks: Vec<usize> = sample_subset(rng, candidates.len(), sample.min(candidates.len()))
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in picks {
        probe[i] = params[i] + h;
        let up = obj.loss(&probe)?;
        probe[i] = params[i] - h;
        let down = obj.loss(&probe)?;
        probe[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(1e-8));
    }
    // Leave the objective evaluated at the original point.
    obj.loss(params)?;
    Ok(worst)
}

/// Finite-difference check of a chain under the squared loss, on a random
/// 64-parameter subsample of the unfrozen weights.
pub fn fd_check(
    chain: &mut Chain,
    x: &DenseMatrix,
    y: &DenseMatrix,
    freeze: &BTreeSet<String>,
    h: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let layout = chain.layout(freeze);
    let params = chain.params(&layout).values;
    let mut obj = ChainObjective { chain, layout, x, y };
    fd_check_objective(&mut obj, &params, h, 64, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub max_steps: usize,
    #[serde(default)]
    pub grad_tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub freeze: BTreeSet<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-2,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            max_steps: 1000,
            grad_tol: 0.0,
            seed: 0,
            freeze: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidDims(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidDims(format!(
                "grad_tol must be >= 0, got {}",
                self.grad_tol
            )));
        }
        Ok(())
    }

    pub fn with_freeze<I: IntoIterator<Item = S>, S: Into<String>>(mut self, names: I) -> Self {
        self.freeze = names.into_iter().map(Into::into).collect();
        self
    }
}

/// Optimizer moments.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One SGD or bias-corrected Adam update, in place.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
        }
        OptimizerKind::Adam => {
            if state.m.len() != params.len() {
                *state = OptimizerState::new(params.len());
            }
            state.t += 1;
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let c1 = 1.0 - b1.powi(state.t as i32);
            let c2 = 1.0 - b2.powi(state.t as i32);
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
    Ok(())
}

pub fn optimizer_step_params(
    state: &mut OptimizerState,
    params: &mut ParamVector,
    grads: &ParamVector,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.layout != grads.layout {
        return Err(Error::ShapeMismatch {
            expected: params.layout.total,
            got: grads.layout.total,
        });
    }
    optimizer_step(state, &mut params.values, &grads.values, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_inf_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradTol,
    MaxSteps,
}

/// Loss history of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub stop: StopReason,
    /// Step whose parameters were kept (the lowest loss seen).
    pub best_step: usize,
    pub best_loss: f64,
    pub final_grad_norm: f64,
}

impl TrainTrace {
    pub fn initial_loss(&self) -> f64 {
        self.rows.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.best_loss
    }

    /// `step,loss,grad_inf_norm` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,grad_inf_norm\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.grad_inf_norm);
        }
        s
    }
}

/// Full-batch descent on `obj` from `x0`. Stops at `max_steps` or when
/// `‖∇‖∞ ≤ grad_tol`; returns the lowest-loss iterate seen.
pub fn minimize(obj: &mut dyn Objective, x0: &[f64], cfg: &TrainConfig) -> Result<(Vec<f64>, TrainTrace)> {
    cfg.validate()?;
    if x0.len() != obj.dim() {
        return Err(Error::ShapeMismatch {
            expected: obj.dim(),
            got: x0.len(),
        });
    }
    let mut params = x0.to_vec();
    let mut state = OptimizerState::new(params.len());
    let mut rows = Vec::new();
    let mut best = (f64::INFINITY, params.clone(), 0usize, f64::INFINITY);
    let mut step = 0usize;
    let stop = loop {
        let (loss, grad) = obj.loss_and_grad(&params)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let gnorm = inf_norm(&grad);
        rows.push(TraceRow {
            step,
            loss,
            grad_inf_norm: gnorm,
        });
        if loss < best.0 {
            best = (loss, params.clone(), step, gnorm);
        }
        if gnorm <= cfg.grad_tol {
            break StopReason::GradTol;
        }
        if step >= cfg.max_steps {
            break StopReason::MaxSteps;
        }
        optimizer_step(&mut state, &mut params, &grad, cfg)?;
        step += 1;
    };
    let (best_loss, best_params, best_step, best_grad) = best;
    // Leave the objective at the returned point.
    obj.loss(&best_params)?;
    Ok((
        best_params,
        TrainTrace {
            rows,
            stop,
            best_step,
            best_loss,
            final_grad_norm: best_grad,
        },
    ))
}

/// Train the unfrozen modules of `chain` on `‖chain(X) − Y‖_F²`.
pub fn train(chain: &mut Chain, x: &DenseMatrix, y: &DenseMatrix, cfg: &TrainConfig) -> Result<TrainTrace> {
    let layout = chain.layout(&cfg.freeze);
    let x0 = chain.params(&layout).values;
    let mut obj = ChainObjective {
        chain,
        layout: Arc::clone(&layout),
        x,
        y,
    };
    let (best, trace) = minimize(&mut obj, &x0, cfg)?;
    chain.set_flat(&layout, &best)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::butterfly::ButterflyNetwork;
    use crate::linalg::{pinv, DEFAULT_RCOND};
    use crate::rng::{normal, rng_from_seed};

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| normal(rng))
    }

    fn random_butterfly(n_in: usize, ell: usize, rng: &mut Rng) -> TruncatedButterfly {
        let n = crate::butterfly::next_power_of_two(n_in);
        let net = ButterflyNetwork::new_random(n, rng).unwrap();
        TruncatedButterfly::with_random_outputs(net, n_in, ell, 0.9, rng).unwrap()
    }

    fn mixed_chain(rng: &mut Rng) -> Chain {
        Chain::new(vec![
            Module::new("B", LinearOp::Butterfly(random_butterfly(12, 6, rng))),
            Module::new("W", LinearOp::Dense(random(5, 6, rng))),
            Module::new("Bt", LinearOp::ButterflyTransposed(random_butterfly(7, 5, rng))),
        ])
        .unwrap()
    }

    #[test]
    fn identity_and_dense_forward() {
        let mut rng = rng_from_seed(1);
        let x = random(4, 3, &mut rng);
        let id = Chain::new(vec![Module::new(
            "I",
            LinearOp::Butterfly(TruncatedButterfly::full(ButterflyNetwork::new_identity(4).unwrap())),
        )])
        .unwrap();
        assert_eq!(forward(&id, &x).unwrap().0, x);
        let w = random(2, 4, &mut rng);
        let dense = Chain::new(vec![Module::new("W", LinearOp::Dense(w.clone()))]).unwrap();
        assert_eq!(forward(&dense, &x).unwrap().0, w.matmul(&x).unwrap());
    }

    #[test]
    fn mixed_forward_matches_materialized() {
        let mut rng = rng_from_seed(2);
        let chain = mixed_chain(&mut rng);
        let x = random(12, 4, &mut rng);
        let y = forward(&chain, &x).unwrap().0;
        let y_ref = chain.materialize().unwrap().matmul(&x).unwrap();
        assert!(y.max_abs_diff(&y_ref) < 1e-10);
    }

    #[test]
    fn dense_gradient_textbook() {
        // L = ‖Wx − y‖² → ∇W = 2(Wx − y)xᵀ
        let mut rng = rng_from_seed(3);
        let w = random(3, 4, &mut rng);
        let x = random(4, 1, &mut rng);
        let y = random(3, 1, &mut rng);
        let chain = Chain::new(vec![Module::new("W", LinearOp::Dense(w.clone()))]).unwrap();
        let layout = chain.layout(&BTreeSet::new());
        let (y_hat, cache) = forward(&chain, &x).unwrap();
        let (_, dl) = squared_loss(&y_hat, &y).unwrap();
        let g = backward(&chain, &cache, &dl, &layout).unwrap();
        let expect = w.matmul(&x).unwrap().sub(&y).unwrap().matmul_t(&x).unwrap().scale(2.0);
        for (a, b) in g.values.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_modules_are_absent() {
        let mut rng = rng_from_seed(4);
        let chain = mixed_chain(&mut rng);
        let all = chain.layout(&BTreeSet::new());
        let frozen = chain.layout(&["W".to_string()].into_iter().collect());
        assert_eq!(all.len() - frozen.len(), 30);
        assert!(frozen.module_range(1).is_none());
    }

    #[test]
    fn layout_is_bijection() {
        let mut rng = rng_from_seed(5);
        let chain = mixed_chain(&mut rng);
        let layout = chain.layout(&["B".to_string()].into_iter().collect());
        for flat in 0..layout.len() {
            let idx = layout.index_of(flat).unwrap();
            assert_eq!(layout.flat_of(idx), Some(flat));
        }
        assert!(layout.index_of(layout.len()).is_none());
        assert_eq!(
            layout.flat_of(ParamIndex::Gadget {
                module: 0,
                layer: 0,
                gadget: 0,
                slot: 0
            }),
            None
        );
    }

    #[test]
    fn stale_cache_detected() {
        let mut rng = rng_from_seed(6);
        let mut chain = mixed_chain(&mut rng);
        let x = random(12, 2, &mut rng);
        let layout = chain.layout(&BTreeSet::new());
        let (y, cache) = forward(&chain, &x).unwrap();
        let params = chain.params(&layout);
        chain.set_params(&params).unwrap();
        assert!(matches!(backward(&chain, &cache, &y, &layout), Err(Error::StaleCache)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(7);
        for _ in 0..5 {
            let mut chain = mixed_chain(&mut rng);
            let x = random(12, 3, &mut rng);
            let y = random(7, 3, &mut rng);
            let err = fd_check(&mut chain, &x, &y, &BTreeSet::new(), 1e-5, &mut rng).unwrap();
            assert!(err <= 1e-5, "fd error {err}");
        }
    }

    #[test]
    fn fd_check_least_squares_and_zero_loss() {
        let mut rng = rng_from_seed(8);
        let w = random(3, 5, &mut rng);
        let x = random(5, 8, &mut rng);
        let y = random(3, 8, &mut rng);
        let mut chain = Chain::new(vec![Module::new("W", LinearOp::Dense(w.clone()))]).unwrap();
        assert!(fd_check(&mut chain, &x, &y, &BTreeSet::new(), 1e-5, &mut rng).unwrap() <= 1e-6);
        let y0 = w.matmul(&x).unwrap();
        let err = fd_check(&mut chain, &x, &y0, &BTreeSet::new(), 1e-5, &mut rng).unwrap();
        assert!(err.is_finite() && err < 1e-2, "{err}");
    }

    #[test]
    fn sgd_single_step() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut theta = [1.0];
        optimizer_step(&mut OptimizerState::new(1), &mut theta, &[1.0], &cfg).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-15);
        assert!(matches!(
            optimizer_step(&mut OptimizerState::new(1), &mut theta, &[1.0, 2.0], &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adam_first_step_is_sign_sized() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut theta = [1.0, -2.0];
        optimizer_step(&mut OptimizerState::new(2), &mut theta, &[3.0, -0.5], &cfg).unwrap();
        assert!((theta[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((theta[1] - (-2.0 + 0.01)).abs() < 1e-8);
    }

    fn least_squares_problem(rng: &mut Rng) -> (Chain, DenseMatrix, DenseMatrix) {
        let x = random(4, 20, rng);
        let y = random(2, 20, rng);
        let chain = Chain::new(vec![Module::new("W", LinearOp::Dense(DenseMatrix::zeros(2, 4)))]).unwrap();
        (chain, x, y)
    }

    #[test]
    fn adam_converges_on_least_squares() {
        let mut rng = rng_from_seed(9);
        let (mut chain, x, y) = least_squares_problem(&mut rng);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_steps: 5000,
            grad_tol: 1e-6,
            ..Default::default()
        };
        let trace = train(&mut chain, &x, &y, &cfg).unwrap();
        assert_eq!(trace.stop, StopReason::GradTol);
        // normal-equations oracle
        let w_star = y.matmul(&pinv(&x, DEFAULT_RCOND).unwrap()).unwrap();
        let best = fro_norm_sq(&w_star.matmul(&x).unwrap().sub(&y).unwrap());
        assert!((trace.final_loss() - best).abs() <= 1e-6);
    }

    #[test]
    fn sgd_trace_is_monotone_on_quadratic() {
        let mut rng = rng_from_seed(10);
        let (mut chain, x, y) = least_squares_problem(&mut rng);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            max_steps: 200,
            ..Default::default()
        };
        let trace = train(&mut chain, &x, &y, &cfg).unwrap();
        assert!(trace.rows.windows(2).all(|w| w[1].loss <= w[0].loss));
        assert!(trace.to_csv().starts_with("step,loss,grad_inf_norm\n0,"));
    }

    #[test]
    fn optimal_start_stops_immediately() {
        let mut rng = rng_from_seed(11);
        let x = random(3, 6, &mut rng);
        let w = random(2, 3, &mut rng);
        let y = w.matmul(&x).unwrap();
        let mut chain = Chain::new(vec![Module::new("W", LinearOp::Dense(w))]).unwrap();
        let cfg = TrainConfig {
            grad_tol: 1e-12,
            ..Default::default()
        };
        let trace = train(&mut chain, &x, &y, &cfg).unwrap();
        assert_eq!(trace.rows.len(), 1);
    }

    #[test]
    fn freezing_keeps_weights_bit_identical() {
        let mut rng = rng_from_seed(12);
        let mut chain = mixed_chain(&mut rng);
        let before = chain.module("B").unwrap().clone();
        let x = random(12, 5, &mut rng);
        let y = random(7, 5, &mut rng);
        let cfg = TrainConfig {
            max_steps: 20,
            ..Default::default()
        }
        .with_freeze(["B"]);
        train(&mut chain, &x, &y, &cfg).unwrap();
        assert_eq!(chain.module("B").unwrap(), &before);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = rng_from_seed(13);
            let mut chain = mixed_chain(&mut rng);
            let x = random(12, 5, &mut rng);
            let y = random(7, 5, &mut rng);
            let cfg = TrainConfig {
                max_steps: 30,
                ..Default::default()
            };
            train(&mut chain, &x, &y, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let x = DenseMatrix::from_fn(2, 2, |i, j| if i == j { 1e200 } else { 0.0 });
        let y = DenseMatrix::zeros(2, 2);
        let mut chain = Chain::new(vec![Module::new(
            "W",
            LinearOp::Dense(DenseMatrix::identity(2).scale(1e200)),
        )])
        .unwrap();
        let err = train(&mut chain, &x, &y, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }));
    }
}
