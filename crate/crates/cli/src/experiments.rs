//! Experiment implementations.

use std::fmt::Write as _;

use butterfly_core::butterfly::next_power_of_two;
use butterfly_core::datagen::{
    gaussian_rank_r, load_matrix, near_low_rank_family, normalize_top_singular, permute_rows, to_csv_string,
    to_dmat_bytes, FamilySpec, MatrixFormat,
};
use butterfly_core::encdec::{
    critical_tol, prop2_ell, train_de, two_phase_train, verify_critical_point, CriticalPointReport, EncDecButterfly,
    PolishConfig, PolishTrace, TwoPhaseConfig as CoreTwoPhase,
};
use butterfly_core::fjlt::{estimate_failure_rate, estimate_norm_failure_rate, prop1_success_rate};
use butterfly_core::grad::TrainTrace;
use butterfly_core::linalg::{fro_norm_sq, rank_k_residual, spectral_norm, svd};
use butterfly_core::rng::{derive_seed, normal, rng_from_seed, stream_tag, Rng};
use butterfly_core::sketch::{
    err_metric, sample_baseline, sketch_residual, train_sketch, BaselineKind, SketchKind, SketchMatrix, TrainableKind,
};
use butterfly_core::{DenseMatrix, Error};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{
    AutoencodeConfig, DataSource, ExperimentConfig, GenDataConfig, GenKind, JlCheckConfig, PolishSettings, Prop1Config,
    SketchTrainConfig, TwoPhaseConfig, VerifyCriticalConfig,
};
use crate::{CliError, RunOutput};

fn sub_rng(seed: u64, label: &str) -> Rng {
    rng_from_seed(derive_seed(seed, stream_tag(label)))
}

fn replica_seed(base: u64, s: u64) -> u64 {
    derive_seed(base, s)
}

fn load_or_generate(src: &DataSource, seed: u64) -> Result<DenseMatrix, CliError> {
    match &src.path {
        Some(path) => load_matrix(path).map_err(|e| CliError::Config(format!("cannot load data from {path}: {e}"))),
        None => Ok(gaussian_rank_r(src.n, src.d, src.rank, &mut sub_rng(seed, "data"))?),
    }
}

fn polish_config(p: &PolishSettings, y: &DenseMatrix) -> Option<PolishConfig> {
    p.enabled.then(|| PolishConfig {
        max_iters: p.max_iters,
        grad_tol: p.grad_tol.unwrap_or_else(|| critical_tol(y)),
    })
}

/// `ℓ` for rank `k` on inputs of dimension `n`: the override, or
/// `⌈k log₂k + k/ε⌉` clamped to `[k, n′]`.
pub fn sweep_ell(k: usize, n: usize, eps: f64, ell: Option<usize>) -> usize {
    ell.unwrap_or_else(|| prop2_ell(k, eps).clamp(k, next_power_of_two(n).max(k)))
}

fn check_k_fits(k: usize, ell: usize, x: &DenseMatrix) -> Result<(), CliError> {
    let n_pow2 = next_power_of_two(x.rows());
    if k > x.rows().min(x.cols()) || ell > n_pow2 {
        return Err(CliError::Config(format!(
            "k = {k}, ell = {ell} do not fit data of shape {}x{} (ell <= {n_pow2}, k <= min(n, d))",
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

/// Run `cfg` on the current rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    log::info!("running {} (seed {})", cfg.name(), cfg.seed());
    let mut out = match cfg {
        ExperimentConfig::JlCheck(c) => jl_check(c)?,
        ExperimentConfig::Prop1(c) => prop1(c)?,
        ExperimentConfig::Autoencode(c) => autoencode(c)?,
        ExperimentConfig::TwoPhase(c) => two_phase(c)?,
        ExperimentConfig::VerifyCritical(c) => verify_critical(c)?,
        ExperimentConfig::SketchTrain(c) => sketch_train(c)?,
        ExperimentConfig::GenData(c) => gen_data(c)?,
    };
    if let serde_json::Value::Object(map) = &mut out.summary {
        map.insert("experiment".into(), json!(cfg.name()));
        map.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    }
    Ok(out)
}

/// The resolved plan for `cfg`, without computing anything.
pub fn plan(cfg: &ExperimentConfig) -> Result<serde_json::Value, CliError> {
    cfg.validate()?;
    let detail = match cfg {
        ExperimentConfig::JlCheck(c) => json!({
            "n_pow2": next_power_of_two(c.n),
            "jobs": c.ells.len(),
            "trials_total": c.ells.len() * c.trials,
        }),
        ExperimentConfig::Prop1(c) => json!({
            "jobs": c.ks.len(),
            "trials_total": c.ks.len() * c.trials,
        }),
        ExperimentConfig::Autoencode(c) => json!({
            "jobs": c.ks.iter().map(|&k| json!({"k": k, "ell": sweep_ell(k, c.data.n, c.eps, c.ell)})).collect::<Vec<_>>(),
            "outputs": ["summary.json", "trace_sweep.csv", "trace_k<k>_phase1.csv", "trace_k<k>_phase2.csv"],
        }),
        ExperimentConfig::TwoPhase(c) => json!({
            "ell": sweep_ell(c.k, c.data.n, c.eps, c.ell),
            "replicas": c.seeds.len(),
            "replica_seeds": c.seeds.iter().map(|&s| replica_seed(c.seed, s)).collect::<Vec<_>>(),
        }),
        ExperimentConfig::VerifyCritical(c) => json!({
            "replicas": c.seeds.len(),
            "replica_seeds": c.seeds.iter().map(|&s| replica_seed(c.seed, s)).collect::<Vec<_>>(),
        }),
        ExperimentConfig::SketchTrain(c) => json!({
            "replicas": c.seeds.len(),
            "methods": SKETCH_METHODS,
            "dense_per_col": c.dense_per_col(),
        }),
        ExperimentConfig::GenData(c) => json!({
            "files": (0..c.count).map(|i| matrix_file_name(i, c.format)).collect::<Vec<_>>(),
        }),
    };
    Ok(json!({
        "experiment": cfg.name(),
        "config": cfg,
        "plan": detail,
    }))
}

#[derive(Debug, Serialize)]
struct JlRow {
    ell: usize,
    failure_rate: f64,
    norm_failure_rate: f64,
}

fn jl_check(c: &JlCheckConfig) -> Result<RunOutput, CliError> {
    let rows: Vec<JlRow> = c
        .ells
        .par_iter()
        .map(|&ell| {
            let label = format!("ell={ell}");
            let failure_rate = estimate_failure_rate(c.n, ell, c.eps, c.trials, &mut sub_rng(c.seed, &label))?;
            let norm_failure_rate = estimate_norm_failure_rate(
                c.n,
                ell,
                c.eps,
                c.trials,
                &mut sub_rng(c.seed, &format!("norm/{label}")),
            )?;
            Ok(JlRow {
                ell,
                failure_rate,
                norm_failure_rate,
            })
        })
        .collect::<Result<_, Error>>()?;
    let monotone = rows.windows(2).all(|w| w[1].failure_rate <= w[0].failure_rate);
    let norm_monotone = rows
        .windows(2)
        .all(|w| w[1].norm_failure_rate <= w[0].norm_failure_rate);
    let mut csv = String::from("ell,failure_rate,norm_failure_rate\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.ell, r.failure_rate, r.norm_failure_rate);
    }
    let mut out = RunOutput::new(json!({
        "rows": rows,
        "monotone_nonincreasing": monotone,
        "norm_monotone_nonincreasing": norm_monotone,
    }));
    out.push_file("trace_jl.csv", csv);
    Ok(out)
}

/// Gaussian `n₂×n₁` matrix scaled to spectral norm 1.
pub fn unit_spectral_matrix(n2: usize, n1: usize, rng: &mut Rng) -> Result<DenseMatrix, Error> {
    let w = DenseMatrix::from_fn(n2, n1, |_, _| normal(rng));
    let s = spectral_norm(&w)?;
    Ok(w.scale(1.0 / s))
}

fn prop1(c: &Prop1Config) -> Result<RunOutput, CliError> {
    let w = unit_spectral_matrix(c.n2, c.n1, &mut sub_rng(c.seed, "w"))?;
    let rows: Vec<(usize, f64)> =
        c.ks.par_iter()
            .map(|&k| {
                let rate = prop1_success_rate(&w, c.eps, k, k, c.trials, &mut sub_rng(c.seed, &format!("k={k}")))?;
                Ok((k, rate))
            })
            .collect::<Result<_, Error>>()?;
    let mut csv = String::from("k,success_rate\n");
    for (k, r) in &rows {
        let _ = writeln!(csv, "{k},{r}");
    }
    let mut out = RunOutput::new(json!({
        "rows": rows.iter().map(|(k, r)| json!({"k": k, "success_rate": r})).collect::<Vec<_>>(),
        "monotone_nondecreasing": rows.windows(2).all(|w| w[1].1 >= w[0].1),
    }));
    out.push_file("trace_prop1.csv", csv);
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    k: usize,
    ell: usize,
    butterfly_loss: f64,
    phase1_loss: f64,
    pca_loss: f64,
    fjlt_pca_loss: f64,
    trace_xx: f64,
    polish: Option<PolishTrace>,
}

fn autoencode(c: &AutoencodeConfig) -> Result<RunOutput, CliError> {
    let x = load_or_generate(&c.data, c.seed)?;
    let trace_xx = fro_norm_sq(&x);
    let polish = polish_config(&c.polish, &x);
    let core_cfg = CoreTwoPhase {
        phase1: c.phase1.clone(),
        polish,
        phase2: c.phase2.clone(),
    };
    for &k in &c.ks {
        check_k_fits(k, sweep_ell(k, x.rows(), c.eps, c.ell), &x)?;
    }
    let results: Vec<(SweepRow, TrainTrace, TrainTrace)> =
        c.ks.par_iter()
            .map(|&k| {
                let ell = sweep_ell(k, x.rows(), c.eps, c.ell);
                let mut rng = sub_rng(c.seed, &format!("k={k}"));
                let r = two_phase_train(&x, &x, k, ell, &core_cfg, &mut rng)?;
                let sketch = SketchMatrix::new(SketchKind::LearnedButterfly(r.phase1_model.b.clone()), ell, x.rows())?;
                log::info!("autoencode k={k} ell={ell}: loss {:.6e}", r.phase2_loss);
                let row = SweepRow {
                    k,
                    ell,
                    butterfly_loss: r.phase2_loss,
                    phase1_loss: r.phase1_loss,
                    pca_loss: rank_k_residual(&x, k)?,
                    fjlt_pca_loss: sketch_residual(&sketch, &x, k)?,
                    trace_xx,
                    polish: r.polish,
                };
                Ok((row, r.phase1, r.phase2))
            })
            .collect::<Result<_, Error>>()?;

    let mut csv = String::from("k,ell,butterfly_loss,pca_loss,fjlt_pca_loss,phase1_loss\n");
    let mut files = Vec::new();
    for (row, p1, p2) in &results {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            row.k, row.ell, row.butterfly_loss, row.pca_loss, row.fjlt_pca_loss, row.phase1_loss
        );
        files.push((format!("trace_k{}_phase1.csv", row.k), p1.to_csv()));
        files.push((format!("trace_k{}_phase2.csv", row.k), p2.to_csv()));
    }
    let rows: Vec<&SweepRow> = results.iter().map(|r| &r.0).collect();
    let mut out = RunOutput::new(json!({ "trace_xx": trace_xx, "rows": rows }));
    out.push_file("trace_sweep.csv", csv);
    for (name, body) in files {
        out.push_file(name, body);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct TwoPhaseRow {
    seed: u64,
    replica_seed: u64,
    delta_k: f64,
    phase1_loss: f64,
    phase2_loss: f64,
    phase1_within_bound: bool,
    phase2_not_worse: bool,
    polish: Option<PolishTrace>,
}

fn two_phase(c: &TwoPhaseConfig) -> Result<RunOutput, CliError> {
    let results: Vec<(TwoPhaseRow, TrainTrace, TrainTrace)> = c
        .seeds
        .par_iter()
        .map(|&s| {
            let rs = replica_seed(c.seed, s);
            let x = load_or_generate(&c.data, rs)?;
            let ell = sweep_ell(c.k, x.rows(), c.eps, c.ell);
            check_k_fits(c.k, ell, &x)?;
            let core_cfg = CoreTwoPhase {
                phase1: c.phase1.clone(),
                polish: polish_config(&c.polish, &x),
                phase2: c.phase2.clone(),
            };
            let r = two_phase_train(&x, &x, c.k, ell, &core_cfg, &mut sub_rng(rs, "model"))?;
            let delta_k = rank_k_residual(&x, c.k)?;
            log::info!(
                "two_phase seed {s}: phase1 {:.6e} phase2 {:.6e}",
                r.phase1_loss,
                r.phase2_loss
            );
            Ok((
                TwoPhaseRow {
                    seed: s,
                    replica_seed: rs,
                    delta_k,
                    phase1_loss: r.phase1_loss,
                    phase2_loss: r.phase2_loss,
                    phase1_within_bound: r.phase1_loss <= (1.0 + c.eps) * delta_k,
                    phase2_not_worse: r.phase2_loss <= r.phase1_loss,
                    polish: r.polish,
                },
                r.phase1,
                r.phase2,
            ))
        })
        .collect::<Result<_, CliError>>()?;

    let n = results.len() as f64;
    let within = results.iter().filter(|r| r.0.phase1_within_bound).count();
    let monotone = results.iter().all(|r| r.0.phase2_not_worse);
    let mut csv = String::from("seed,delta_k,phase1_loss,phase2_loss\n");
    for (row, _, _) in &results {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.seed, row.delta_k, row.phase1_loss, row.phase2_loss
        );
    }
    let rows: Vec<&TwoPhaseRow> = results.iter().map(|r| &r.0).collect();
    let mut out = RunOutput::new(json!({
        "ell": rows.first().map(|_| sweep_ell(c.k, c.data.n, c.eps, c.ell)),
        "rows": rows,
        "fraction_within_bound": within as f64 / n,
        "phase2_monotone_all": monotone,
    }));
    out.push_file("trace_two_phase.csv", csv);
    for (row, p1, p2) in &results {
        out.push_file(format!("trace_seed{}_phase1.csv", row.seed), p1.to_csv());
        out.push_file(format!("trace_seed{}_phase2.csv", row.seed), p2.to_csv());
    }
    Ok(out)
}

/// Per-replica outcome of a critical-point check.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum CriticalOutcome {
    /// Loss identity, commutator and `I = [k]` all hold.
    Pass {
        report: Box<CriticalPointReport>,
    },
    /// Reached the gradient tolerance but a check failed.
    Fail {
        report: Box<CriticalPointReport>,
    },
    Degenerate {
        gap: f64,
        threshold: f64,
    },
    NotConverged {
        grad: f64,
        tol: f64,
    },
}

impl CriticalOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            CriticalOutcome::Pass { .. } => "pass",
            CriticalOutcome::Fail { .. } => "fail",
            CriticalOutcome::Degenerate { .. } => "degenerate",
            CriticalOutcome::NotConverged { .. } => "not_converged",
        }
    }
}

#[derive(Debug, Serialize)]
struct CriticalRow {
    seed: u64,
    replica_seed: u64,
    train_steps: usize,
    polish_iters: Option<usize>,
    #[serde(flatten)]
    outcome: CriticalOutcome,
}

fn critical_replica(c: &VerifyCriticalConfig, s: u64) -> Result<(CriticalRow, TrainTrace), CliError> {
    let rs = replica_seed(c.seed, s);
    let x = load_or_generate(&c.data, rs)?;
    check_k_fits(c.k, c.ell, &x)?;
    let tol = c.grad_tol.unwrap_or_else(|| critical_tol(&x));
    let mut rng = sub_rng(rs, "model");
    let mut model = EncDecButterfly::init(x.rows(), x.rows(), c.k, c.ell, &mut rng)?;
    let polish = polish_config(&c.polish, &x).map(|p| PolishConfig { grad_tol: tol, ..p });
    let (trace, polished) = train_de(&mut model, &x, &x, &c.train, polish.as_ref())?;
    let outcome = match verify_critical_point(&model, &x, &x, tol) {
        Ok(report) => {
            let ok = report.loss_matches && report.commutes && report.is_local_min_candidate;
            let report = Box::new(report);
            if ok {
                CriticalOutcome::Pass { report }
            } else {
                CriticalOutcome::Fail { report }
            }
        }
        Err(Error::DegenerateSpectrum { gap, threshold }) => CriticalOutcome::Degenerate { gap, threshold },
        Err(Error::NotAtCriticalPoint { grad, tol }) => CriticalOutcome::NotConverged { grad, tol },
        Err(e) => return Err(e.into()),
    };
    log::info!("verify_critical seed {s}: {}", outcome.label());
    Ok((
        CriticalRow {
            seed: s,
            replica_seed: rs,
            train_steps: trace.rows.len(),
            polish_iters: polished.map(|p| p.iters),
            outcome,
        },
        trace,
    ))
}

fn verify_critical(c: &VerifyCriticalConfig) -> Result<RunOutput, CliError> {
    let results: Vec<(CriticalRow, TrainTrace)> = c
        .seeds
        .par_iter()
        .map(|&s| critical_replica(c, s))
        .collect::<Result<_, _>>()?;
    let count = |label: &str| results.iter().filter(|r| r.0.outcome.label() == label).count();
    let mut out = RunOutput::new(json!({
        "pass": count("pass"),
        "fail": count("fail"),
        "degenerate": count("degenerate"),
        "not_converged": count("not_converged"),
        "rows": results.iter().map(|r| &r.0).collect::<Vec<_>>(),
    }));
    for (row, trace) in &results {
        out.push_file(format!("trace_seed{}.csv", row.seed), trace.to_csv());
    }
    Ok(out)
}

/// Method names in report order.
pub const SKETCH_METHODS: [&str; 5] = [
    "learned_butterfly",
    "learned_sparse",
    "learned_dense",
    "countsketch",
    "gaussian",
];

#[derive(Debug, Clone, Serialize)]
pub struct SketchErrs {
    pub learned_butterfly: f64,
    pub learned_sparse: f64,
    pub learned_dense: f64,
    pub countsketch: f64,
    pub gaussian: f64,
}

#[derive(Debug, Serialize)]
struct SketchRow {
    seed: u64,
    replica_seed: u64,
    err: SketchErrs,
    butterfly_lt_sparse_lt_countsketch: bool,
    butterfly_lt_dense: bool,
}

/// Train sets and test sets for one replica of `c`.
pub fn sketch_data(c: &SketchTrainConfig, rs: u64) -> Result<(Vec<DenseMatrix>, Vec<DenseMatrix>), Error> {
    let spec = FamilySpec {
        n: c.n,
        d: c.d,
        rank: c.rank,
        count: c.train_count + c.test_count,
        noise: c.noise,
    };
    let mut all = near_low_rank_family(&spec, &mut sub_rng(rs, "data"))?;
    let test = all.split_off(c.train_count);
    Ok((all, test))
}

fn sketch_replica(c: &SketchTrainConfig, s: u64) -> Result<(SketchRow, Vec<(String, String)>), Error> {
    let rs = replica_seed(c.seed, s);
    let (train, test) = sketch_data(c, rs)?;
    let learn = |kind: TrainableKind, label: &str| -> Result<(f64, TrainTrace), Error> {
        let (sketch, trace) = train_sketch(&train, kind, c.ell, c.k, &c.train, &mut sub_rng(rs, label))?;
        Ok((err_metric(&sketch, &test, c.k)?, trace))
    };
    let (bf, bf_trace) = learn(TrainableKind::Butterfly, "learned_butterfly")?;
    let (sp, sp_trace) = learn(
        TrainableKind::Sparse {
            per_col: c.sparse_per_col,
        },
        "learned_sparse",
    )?;
    let (de, de_trace) = learn(
        TrainableKind::Sparse {
            per_col: c.dense_per_col(),
        },
        "learned_dense",
    )?;
    let baseline = |kind: BaselineKind, label: &str| -> Result<f64, Error> {
        err_metric(&sample_baseline(kind, c.ell, c.n, &mut sub_rng(rs, label))?, &test, c.k)
    };
    let err = SketchErrs {
        learned_butterfly: bf,
        learned_sparse: sp,
        learned_dense: de,
        countsketch: baseline(BaselineKind::RandomCountSketch, "countsketch")?,
        gaussian: baseline(BaselineKind::Gaussian, "gaussian")?,
    };
    log::info!("sketch_train seed {s}: {err:?}");
    let traces = vec![
        (format!("trace_seed{s}_learned_butterfly.csv"), bf_trace.to_csv()),
        (format!("trace_seed{s}_learned_sparse.csv"), sp_trace.to_csv()),
        (format!("trace_seed{s}_learned_dense.csv"), de_trace.to_csv()),
    ];
    Ok((
        SketchRow {
            seed: s,
            replica_seed: rs,
            butterfly_lt_sparse_lt_countsketch: err.learned_butterfly < err.learned_sparse
                && err.learned_sparse < err.countsketch,
            butterfly_lt_dense: err.learned_butterfly < err.learned_dense,
            err,
        },
        traces,
    ))
}

fn sketch_train(c: &SketchTrainConfig) -> Result<RunOutput, CliError> {
    let results: Vec<(SketchRow, Vec<(String, String)>)> = c
        .seeds
        .par_iter()
        .map(|&s| sketch_replica(c, s))
        .collect::<Result<_, _>>()?;
    let n = results.len() as f64;
    let mean = |f: fn(&SketchErrs) -> f64| results.iter().map(|r| f(&r.0.err)).sum::<f64>() / n;
    let mean_err = SketchErrs {
        learned_butterfly: mean(|e| e.learned_butterfly),
        learned_sparse: mean(|e| e.learned_sparse),
        learned_dense: mean(|e| e.learned_dense),
        countsketch: mean(|e| e.countsketch),
        gaussian: mean(|e| e.gaussian),
    };
    let mut csv = String::from("seed,k,ell,learned_butterfly,learned_sparse,learned_dense,countsketch,gaussian\n");
    for (row, _) in &results {
        let e = &row.err;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.seed, c.k, c.ell, e.learned_butterfly, e.learned_sparse, e.learned_dense, e.countsketch, e.gaussian
        );
    }
    let mut out = RunOutput::new(json!({
        "k": c.k,
        "ell": c.ell,
        "mean_err": mean_err,
        "ordering_count": results.iter().filter(|r| r.0.butterfly_lt_sparse_lt_countsketch).count(),
        "butterfly_beats_dense_count": results.iter().filter(|r| r.0.butterfly_lt_dense).count(),
        "rows": results.iter().map(|r| &r.0).collect::<Vec<_>>(),
    }));
    out.push_file("trace_err.csv", csv);
    for (_, traces) in results {
        for (name, body) in traces {
            out.push_file(name, body);
        }
    }
    Ok(out)
}

fn matrix_file_name(i: usize, format: MatrixFormat) -> String {
    match format {
        MatrixFormat::Csv => format!("matrix_{i}.csv"),
        MatrixFormat::Dmat => format!("matrix_{i}.dmat"),
    }
}

fn gen_data(c: &GenDataConfig) -> Result<RunOutput, CliError> {
    let mut rng = sub_rng(c.seed, "data");
    let mut mats = match c.kind {
        GenKind::RankR => (0..c.count)
            .map(|_| gaussian_rank_r(c.n, c.d, c.rank, &mut rng))
            .collect::<Result<Vec<_>, _>>()?,
        GenKind::Family => near_low_rank_family(
            &FamilySpec {
                n: c.n,
                d: c.d,
                rank: c.rank,
                count: c.count,
                noise: c.noise,
            },
            &mut rng,
        )?,
    };
    if c.permute_rows {
        let mut prng = sub_rng(c.seed, "permute");
        mats = mats.iter().map(|m| permute_rows(m, &mut prng)).collect();
    }
    if c.normalize {
        mats = normalize_top_singular(&mats)?;
    }
    let mut entries = Vec::new();
    let mut files = Vec::new();
    for (i, m) in mats.iter().enumerate() {
        let name = matrix_file_name(i, c.format);
        let bytes = match c.format {
            MatrixFormat::Csv => to_csv_string(m).into_bytes(),
            MatrixFormat::Dmat => to_dmat_bytes(m),
        };
        let s = svd(m)?.s;
        entries.push(json!({
            "file": name,
            "rows": m.rows(),
            "cols": m.cols(),
            "sigma1": s.first().copied().unwrap_or(0.0),
            "fro_norm_sq": fro_norm_sq(m),
        }));
        files.push((name, bytes));
    }
    let mut out = RunOutput::new(json!({ "matrices": entries }));
    for (name, bytes) in files {
        out.push_file(name, bytes);
    }
    Ok(out)
}
