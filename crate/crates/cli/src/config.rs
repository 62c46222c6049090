//! Experiment configuration files.
//!
//! A config is a JSON object whose `"experiment"` field selects the schema.
//! Every other field is optional and falls back to the defaults below.
//! Unknown fields are rejected.

use butterfly_core::butterfly::next_power_of_two;
use butterfly_core::datagen::MatrixFormat;
use butterfly_core::fjlt::MIN_TRIALS;
use butterfly_core::grad::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentConfig {
    JlCheck(JlCheckConfig),
    Prop1(Prop1Config),
    Autoencode(AutoencodeConfig),
    TwoPhase(TwoPhaseConfig),
    VerifyCritical(VerifyCriticalConfig),
    SketchTrain(SketchTrainConfig),
    GenData(GenDataConfig),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::JlCheck(_) => "jl_check",
            ExperimentConfig::Prop1(_) => "prop1",
            ExperimentConfig::Autoencode(_) => "autoencode",
            ExperimentConfig::TwoPhase(_) => "two_phase",
            ExperimentConfig::VerifyCritical(_) => "verify_critical",
            ExperimentConfig::SketchTrain(_) => "sketch_train",
            ExperimentConfig::GenData(_) => "gen_data",
        }
    }

    /// Default config for an experiment name.
    pub fn default_for(name: &str) -> Result<Self, CliError> {
        serde_json::from_value(serde_json::json!({ "experiment": name }))
            .map_err(|e| CliError::Config(format!("unknown experiment {name:?}: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::JlCheck(c) => c.seed,
            ExperimentConfig::Prop1(c) => c.seed,
            ExperimentConfig::Autoencode(c) => c.seed,
            ExperimentConfig::TwoPhase(c) => c.seed,
            ExperimentConfig::VerifyCritical(c) => c.seed,
            ExperimentConfig::SketchTrain(c) => c.seed,
            ExperimentConfig::GenData(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::JlCheck(c) => c.seed = seed,
            ExperimentConfig::Prop1(c) => c.seed = seed,
            ExperimentConfig::Autoencode(c) => c.seed = seed,
            ExperimentConfig::TwoPhase(c) => c.seed = seed,
            ExperimentConfig::VerifyCritical(c) => c.seed = seed,
            ExperimentConfig::SketchTrain(c) => c.seed = seed,
            ExperimentConfig::GenData(c) => c.seed = seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            ExperimentConfig::JlCheck(c) => c.validate(),
            ExperimentConfig::Prop1(c) => c.validate(),
            ExperimentConfig::Autoencode(c) => c.validate(),
            ExperimentConfig::TwoPhase(c) => c.validate(),
            ExperimentConfig::VerifyCritical(c) => c.validate(),
            ExperimentConfig::SketchTrain(c) => c.validate(),
            ExperimentConfig::GenData(c) => c.validate(),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_eps(eps: f64) -> Result<(), CliError> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(bad(format!("eps must lie in (0, 1), got {eps}")))
    }
}

fn check_train(name: &str, t: &TrainConfig) -> Result<(), CliError> {
    t.validate().map_err(|e| bad(format!("{name}: {e}")))
}

fn check_seeds(seeds: &[u64]) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(bad("seeds must not be empty"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(bad("seeds must be distinct"));
    }
    Ok(())
}

fn adam(learning_rate: f64, max_steps: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate,
        max_steps,
        ..TrainConfig::default()
    }
}

/// ALS refinement of `D, E` after phase one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolishSettings {
    pub enabled: bool,
    pub max_iters: usize,
    /// Defaults to `1e-9·(1 + tr(YYᵀ))`.
    pub grad_tol: Option<f64>,
}

impl Default for PolishSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            max_iters: 20_000,
            grad_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JlCheckConfig {
    pub seed: u64,
    pub n: usize,
    pub eps: f64,
    pub ells: Vec<usize>,
    pub trials: usize,
}

impl Default for JlCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 256,
            eps: 0.5,
            ells: vec![8, 16, 32, 64],
            trials: 2000,
        }
    }
}

impl JlCheckConfig {
    fn validate(&self) -> Result<(), CliError> {
        check_eps(self.eps)?;
        if self.trials < MIN_TRIALS {
            return Err(bad(format!("trials must be >= {MIN_TRIALS}")));
        }
        if self.n == 0 || self.ells.is_empty() {
            return Err(bad("need n >= 1 and a nonempty ells list"));
        }
        let cap = next_power_of_two(self.n);
        if let Some(e) = self.ells.iter().find(|&&e| e == 0 || e > cap) {
            return Err(bad(format!("ell = {e} outside 1..={cap}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Config {
    pub seed: u64,
    pub n1: usize,
    pub n2: usize,
    pub eps: f64,
    /// Used for both `k₁` and `k₂`.
    pub ks: Vec<usize>,
    pub trials: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            seed: 0,
            n1: 128,
            n2: 128,
            eps: 0.5,
            ks: vec![8, 16, 32, 64, 128],
            trials: 1000,
        }
    }
}

impl Prop1Config {
    fn validate(&self) -> Result<(), CliError> {
        check_eps(self.eps)?;
        if self.trials < MIN_TRIALS {
            return Err(bad(format!("trials must be >= {MIN_TRIALS}")));
        }
        if self.n1 == 0 || self.n2 == 0 || self.ks.is_empty() {
            return Err(bad("need n1, n2 >= 1 and a nonempty ks list"));
        }
        let cap = next_power_of_two(self.n1).min(next_power_of_two(self.n2));
        if let Some(k) = self.ks.iter().find(|&&k| k == 0 || k > cap) {
            return Err(bad(format!("k = {k} outside 1..={cap}")));
        }
        Ok(())
    }
}

/// Where the data matrix comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    /// CSV or DMAT1 file to load instead of generating.
    pub path: Option<String>,
}

impl DataSource {
    fn with(n: usize, d: usize, rank: usize) -> Self {
        Self { n, d, rank, path: None }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.path.is_none() && (self.rank == 0 || self.rank > self.n.min(self.d)) {
            return Err(bad(format!(
                "data rank {} must lie in 1..=min(n, d) = {}",
                self.rank,
                self.n.min(self.d)
            )));
        }
        Ok(())
    }
}

impl Default for DataSource {
    fn default() -> Self {
        Self::with(64, 64, 8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencodeConfig {
    pub seed: u64,
    pub data: DataSource,
    pub ks: Vec<usize>,
    /// Width rule `ℓ = ⌈k log₂k + k/ε⌉`, clamped to `[k, n′]`.
    pub eps: f64,
    /// Fixed `ℓ` overriding the rule.
    pub ell: Option<usize>,
    pub phase1: TrainConfig,
    pub polish: PolishSettings,
    pub phase2: TrainConfig,
}

impl Default for AutoencodeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            ks: vec![1, 2, 4, 8],
            eps: 0.5,
            ell: None,
            phase1: adam(1e-2, 2000),
            polish: PolishSettings {
                max_iters: 5000,
                ..PolishSettings::default()
            },
            phase2: adam(1e-3, 2000),
        }
    }
}

impl AutoencodeConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        check_eps(self.eps)?;
        check_train("phase1", &self.phase1)?;
        check_train("phase2", &self.phase2)?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(bad("ks must be a nonempty list of positive ranks"));
        }
        if let Some(ell) = self.ell {
            if let Some(k) = self.ks.iter().find(|&&k| k > ell) {
                return Err(bad(format!("k = {k} exceeds ell = {ell}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoPhaseConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub k: usize,
    pub eps: f64,
    pub ell: Option<usize>,
    pub phase1: TrainConfig,
    pub polish: PolishSettings,
    pub phase2: TrainConfig,
}

impl Default for TwoPhaseConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: (0..20).collect(),
            data: DataSource::default(),
            k: 4,
            eps: 0.5,
            ell: None,
            phase1: adam(1e-2, 2000),
            polish: PolishSettings {
                max_iters: 5000,
                ..PolishSettings::default()
            },
            phase2: adam(1e-3, 500),
        }
    }
}

impl TwoPhaseConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        check_seeds(&self.seeds)?;
        check_eps(self.eps)?;
        check_train("phase1", &self.phase1)?;
        check_train("phase2", &self.phase2)?;
        if self.k == 0 || self.ell.is_some_and(|ell| ell < self.k) {
            return Err(bad("need 1 <= k <= ell"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyCriticalConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub k: usize,
    pub ell: usize,
    pub train: TrainConfig,
    pub polish: PolishSettings,
    /// Defaults to `1e-9·(1 + tr(YYᵀ))`.
    pub grad_tol: Option<f64>,
}

impl Default for VerifyCriticalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: (0..20).collect(),
            data: DataSource::default(),
            k: 4,
            ell: 12,
            train: adam(1e-2, 2000),
            polish: PolishSettings {
                max_iters: 50_000,
                ..PolishSettings::default()
            },
            grad_tol: None,
        }
    }
}

impl VerifyCriticalConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        check_seeds(&self.seeds)?;
        check_train("train", &self.train)?;
        if self.k == 0 || self.k > self.ell {
            return Err(bad("need 1 <= k <= ell"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketchTrainConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    pub noise: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub ell: usize,
    pub k: usize,
    /// Nonzeros per column of the learned sparse sketch.
    pub sparse_per_col: usize,
    /// Nonzeros per column of the "dense learned" sparse sketch (`ℓ` if unset).
    pub dense_per_col: Option<usize>,
    pub train: TrainConfig,
}

impl Default for SketchTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: (0..10).collect(),
            n: 64,
            d: 48,
            rank: 8,
            noise: 0.05,
            train_count: 60,
            test_count: 20,
            ell: 10,
            k: 10,
            sparse_per_col: 1,
            dense_per_col: None,
            train: adam(1e-2, 500),
        }
    }
}

impl SketchTrainConfig {
    pub fn dense_per_col(&self) -> usize {
        self.dense_per_col.unwrap_or(self.ell)
    }

    fn validate(&self) -> Result<(), CliError> {
        check_seeds(&self.seeds)?;
        check_train("train", &self.train)?;
        if self.rank == 0 || self.rank > self.n.min(self.d) {
            return Err(bad("rank must lie in 1..=min(n, d)"));
        }
        if self.k == 0 || self.k > self.ell || self.ell > self.n || self.k > self.d {
            return Err(bad("need 1 <= k <= ell <= n and k <= d"));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(bad("train_count and test_count must be positive"));
        }
        for per in [self.sparse_per_col, self.dense_per_col()] {
            if per == 0 || per > self.ell {
                return Err(bad(format!("nonzeros per column {per} outside 1..={}", self.ell)));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(bad("noise must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    /// Exact rank `r`, `N(0, 0.01)` coefficients.
    RankR,
    /// Related near-low-rank matrices with a shared column space.
    Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub kind: GenKind,
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    pub count: usize,
    pub noise: f64,
    pub permute_rows: bool,
    pub normalize: bool,
    pub format: MatrixFormat,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kind: GenKind::RankR,
            n: 64,
            d: 64,
            rank: 8,
            count: 1,
            noise: 0.0,
            permute_rows: false,
            normalize: false,
            format: MatrixFormat::Csv,
        }
    }
}

impl GenDataConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.rank == 0 || self.rank > self.n.min(self.d) {
            return Err(bad("rank must lie in 1..=min(n, d)"));
        }
        if self.count == 0 {
            return Err(bad("count must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(bad("noise must be >= 0"));
        }
        Ok(())
    }
}
