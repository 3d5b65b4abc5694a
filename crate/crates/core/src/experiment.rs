//! End-to-end runs: data, training, evaluation, sweeps and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::datagen::{gen_seismic, gen_seismic_ood, gen_toy, gen_toy_ood, Dataset, Split};
use crate::error::Result;
use crate::eval::{self, QualityMetrics, RiskEstimate};
use crate::linops::LinearOperator;
use crate::nets::Net;
use crate::par::{self, Execution};
use crate::schemes::{self, SchemeKind, TrainOutcome};
use crate::tensor::Tensor;
use crate::unroll::{Solver, Variant};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = concat!("jitterlu ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

pub fn make_splits(spec: &DatasetSpec, seed: u64) -> Result<Splits> {
    match spec {
        DatasetSpec::Toy {
            n_train,
            n_test,
            noise_variance,
            noise_convention,
            ood_bias,
            n_ood,
        } => {
            let (train, test) = gen_toy(*n_train, *n_test, *noise_variance, *noise_convention, seed)?;
            let ood = gen_toy_ood(*ood_bias, *n_ood, *noise_variance, *noise_convention, seed)?;
            Ok(Splits { train, test, ood })
        }
        DatasetSpec::Seismic {
            n_train,
            n_test,
            n_ood,
            ood_layer_magnitude,
            ood_layer_time,
            seismic,
        } => Ok(Splits {
            train: gen_seismic(seismic, *n_train, Split::Train, seed)?,
            test: gen_seismic(seismic, *n_test, Split::Test, seed)?,
            ood: gen_seismic_ood(seismic, *n_ood, *ood_layer_magnitude, *ood_layer_time, seed)?,
        }),
    }
}

/// Freshly initialized solver for `seed`.
pub fn build_solver(cfg: &ExperimentConfig, seed: u64) -> Result<Solver> {
    let op = LinearOperator::from_spec(&cfg.operator_spec())?;
    Solver::new(Arc::new(op), Net::build(&cfg.net, seed)?, cfg.solver.clone())
}

/// Zeroes every wall-clock field so reports are reproducible byte for byte.
pub fn scrub_timing(outcome: &mut TrainOutcome) {
    outcome.items_per_second = 0.0;
    outcome.history.iter_mut().for_each(|h| h.wall_seconds = 0.0);
}

pub fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    exec: Execution,
    deterministic: bool,
) -> Result<(Solver, TrainOutcome)> {
    let mut solver = build_solver(cfg, seed)?;
    let mut outcome = schemes::train(&cfg.scheme, &mut solver, train, seed, exec)?;
    if deterministic {
        scrub_timing(&mut outcome);
    }
    Ok((solver, outcome))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub mean: f64,
    pub stderr: f64,
}

impl From<&RiskEstimate> for RiskSummary {
    fn from(r: &RiskEstimate) -> Self {
        Self {
            mean: r.mean,
            stderr: r.stderr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub peak: f64,
}

impl From<&QualityMetrics> for QualitySummary {
    fn from(q: &QualityMetrics) -> Self {
        Self {
            mse: q.mean_mse,
            psnr: q.mean_psnr,
            ssim: q.mean_ssim,
            peak: q.peak,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub code_version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub scheme: String,
    pub clean: RiskSummary,
    pub worst_case: RiskSummary,
    pub average_case: Option<RiskSummary>,
    pub generalization: Option<RiskSummary>,
    pub ood: RiskSummary,
    /// Image-quality metrics; absent when the ground truth has no dynamic
    /// range (the toy task), where PSNR is undefined.
    pub id_quality: Option<QualitySummary>,
    pub attacked_quality: Option<QualitySummary>,
    pub ood_quality: Option<QualitySummary>,
}

fn quality_of(solver: &Solver, data: &Dataset, y: &Tensor, exec: Execution) -> Result<Option<QualitySummary>> {
    let peak = eval::dynamic_range(&data.x);
    if !(peak > 0.0) {
        return Ok(None);
    }
    let xhat = solver.reconstruct_batch(y, exec)?;
    let q = eval::quality(&xhat, &data.x, &data.header.signal_shape, peak)?;
    Ok(Some((&q).into()))
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    solver: &Solver,
    splits: &Splits,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    let test = &splits.test;
    let w = &cfg.eval.worst_case;
    let clean = eval::clean_risk(solver, test, exec)?;
    let (worst, e) = eval::worst_case_risk(solver, test, w.epsilon, w.steps, w.step_size, exec)?;
    let average = match &cfg.eval.average_case {
        Some(a) => Some(eval::avg_case_risk(solver, test, a.magnitude, a.sampling, a.draws, seed, exec)?),
        None => None,
    };
    let generalization = match &cfg.eval.shift {
        Some(s) => Some(eval::generalization_risk(solver, test, &s.shift, s.draws, seed, exec)?),
        None => None,
    };
    let ood = eval::clean_risk(solver, &splits.ood, exec)?;
    let attacked_y = Tensor::new(
        test.y.shape().to_vec(),
        test.y.data().iter().zip(e.data()).map(|(a, b)| a + b).collect(),
    )?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        code_version: CODE_VERSION.to_string(),
        config: cfg.echo(),
        seed,
        scheme: cfg.scheme.kind.name().to_string(),
        clean: (&clean).into(),
        worst_case: (&worst).into(),
        average_case: average.as_ref().map(Into::into),
        generalization: generalization.as_ref().map(Into::into),
        ood: (&ood).into(),
        id_quality: quality_of(solver, test, &test.y, exec)?,
        attacked_quality: quality_of(solver, test, &attacked_y, exec)?,
        ood_quality: quality_of(solver, &splits.ood, &splits.ood.y, exec)?,
    })
}

/// Jitter scheme matching the solver variant, with a constant variance.
pub fn jitter_kind(variant: Variant, variance: f64) -> SchemeKind {
    match variant {
        Variant::Gd => SchemeKind::SgdJitter {
            variance,
            schedule: None,
        },
        Variant::Pgd => SchemeKind::SpgdJitter {
            variance,
            schedule: None,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Per-iteration jitter variance `σ²_w`.
    pub sigma: f64,
    pub epsilon: f64,
    pub risk: f64,
    pub seed: u64,
}

/// Trains one jittered solver per (seed, variance) cell and records its
/// worst-case risk. Cells form an ordered work queue of `eval.workers`.
pub fn sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<SweepRow>> {
    let splits = cfg
        .seeds
        .iter()
        .map(|s| make_splits(&cfg.dataset, *s))
        .collect::<Result<Vec<_>>>()?;
    let grid = &cfg.eval.sweep_variances;
    let cells = cfg.seeds.len() * grid.len();
    let w = &cfg.eval.worst_case;
    let inner = if cfg.eval.workers > 1 { Execution::Sequential } else { exec };
    let rows = par::map_with_workers(cfg.eval.workers, cells, |c| -> Result<SweepRow> {
        let (si, vi) = (c / grid.len(), c % grid.len());
        let seed = cfg.seeds[si];
        let mut cell = cfg.clone();
        cell.scheme.kind = jitter_kind(cfg.solver.variant, grid[vi]);
        let (solver, _) = train_seed(&cell, seed, &splits[si].train, inner, true)?;
        let (risk, _) = eval::worst_case_risk(&solver, &splits[si].test, w.epsilon, w.steps, w.step_size, inner)?;
        Ok(SweepRow {
            sigma: grid[vi],
            epsilon: w.epsilon,
            risk: risk.mean,
            seed,
        })
    });
    rows.into_iter().collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("sigma,epsilon,risk,seed\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.sigma, r.epsilon, r.risk, r.seed);
    }
    s
}

pub fn history_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("epoch,mean_loss,wall_seconds\n");
    for h in &outcome.history {
        let _ = writeln!(s, "{},{},{}", h.epoch, h.mean_loss, h.wall_seconds);
    }
    s
}

fn id(r: &EvalReport) -> Option<&QualitySummary> {
    r.id_quality.as_ref()
}

fn at(r: &EvalReport) -> Option<&QualitySummary> {
    r.attacked_quality.as_ref()
}

fn od(r: &EvalReport) -> Option<&QualitySummary> {
    r.ood_quality.as_ref()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Scheme × {ID, attack, OOD} table averaged over seeds, plus the per-run
/// robustness/accuracy scatter data.
pub fn report_tables(reports: &[EvalReport]) -> (String, String) {
    let mut schemes: Vec<&str> = Vec::new();
    for r in reports {
        if !schemes.contains(&r.scheme.as_str()) {
            schemes.push(&r.scheme);
        }
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mut table = String::from(
        "scheme,runs,id_psnr,id_ssim,attack_psnr,attack_ssim,ood_psnr,ood_ssim,clean_risk,worst_case_risk,ood_risk,generalization_risk\n",
    );
    for s in &schemes {
        let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.scheme == *s).collect();
        let q = |f: fn(&EvalReport) -> Option<&QualitySummary>, psnr: bool| {
            mean(
                rs.iter()
                    .filter_map(|r| f(r).and_then(|q| if psnr { Some(q.psnr) } else { q.ssim }))
                    .collect(),
            )
        };
        let _ = writeln!(
            table,
            "{s},{},{},{},{},{},{},{},{},{},{},{}",
            rs.len(),
            opt(q(id, true)),
            opt(q(id, false)),
            opt(q(at, true)),
            opt(q(at, false)),
            opt(q(od, true)),
            opt(q(od, false)),
            opt(mean(rs.iter().map(|r| r.clean.mean).collect())),
            opt(mean(rs.iter().map(|r| r.worst_case.mean).collect())),
            opt(mean(rs.iter().map(|r| r.ood.mean).collect())),
            opt(mean(rs.iter().filter_map(|r| r.generalization.as_ref().map(|g| g.mean)).collect())),
        );
    }
    let mut scatter = String::from("scheme,seed,clean_risk,worst_case_risk,id_psnr,attack_psnr\n");
    for r in reports {
        let _ = writeln!(
            scatter,
            "{},{},{},{},{},{}",
            r.scheme,
            r.seed,
            r.clean.mean,
            r.worst_case.mean,
            opt(r.id_quality.as_ref().map(|q| q.psnr)),
            opt(r.attacked_quality.as_ref().map(|q| q.psnr)),
        );
    }
    (table, scatter)
}

/// `output_dir/<run_id>`, with `run_id` defaulting to
/// `<unix seconds>-<first 12 hex digits of the config hash>`.
pub fn run_dir(cfg: &ExperimentConfig, run_id: Option<&str>) -> PathBuf {
    let id = match run_id {
        Some(id) => id.to_string(),
        None => {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format!("{secs}-{}", &cfg.hash()[..12])
        }
    };
    cfg.output_dir.join(id)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
