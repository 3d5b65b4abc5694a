//! End-to-end acceptance: one PASS/FAIL line per criterion.
//!
//! The harness exits non-zero only when a criterion cannot be evaluated at
//! all (an error or panic). A criterion that runs and misses its threshold
//! is reported as FAIL and left at that, so the printed table is the record.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use jitterlu::bench::{bench_training_speed, BenchConfig};
use jitterlu::checkpoint::Checkpoint;
use jitterlu::config::ExperimentConfig;
use jitterlu::datagen::Dataset;
use jitterlu::experiment::{self, build_solver, evaluate, make_splits, train_seed, EvalReport};
use jitterlu::schemes::SchemeKind;
use jitterlu::theory::{
    convergence_suite, identity_suite, lipschitz_suite, variance_matching_suite, CheckRecord,
};
use jitterlu::{Execution, Result};

const IDENTITY_SEEDS: u64 = 20;
const IDENTITY_KS: [usize; 3] = [1, 2, 10];
const IDENTITY_ETAS: [f64; 3] = [0.1, 0.5, 1.0];
const IDENTITY_BUDGET: Duration = Duration::from_secs(60);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const LIPSCHITZ_PROBES: usize = 1000;
const CONVERGENCE_KS: [usize; 2] = [10, 100];
const CONVERGENCE_VARIANCES: [f64; 2] = [0.0, 1e-3];
const CONVERGENCE_TRIALS: usize = 200;
const CONVERGENCE_BUDGET: Duration = Duration::from_secs(120);
const TOY_BUDGET: Duration = Duration::from_secs(15 * 60);
/// Worst-case risk of MSE over that of a robust scheme.
const TOY_ROBUST_FACTOR: f64 = 1.2;
const TOY_SGD_VARIANCE: f64 = 0.01;
const TOY_INPUT_VARIANCE: f64 = 0.01;
const SEISMIC_BUDGET: Duration = Duration::from_secs(60 * 60);
const SEISMIC_SGD_VARIANCE: f64 = 0.1;
/// Allowed ID PSNR loss of SGD jittering against MSE, in dB.
const SEISMIC_ID_SLACK_DB: f64 = 0.5;
const MAJORITY: usize = 2;
/// Jitter throughput must be at least this fraction of MSE throughput.
const SPEED_JITTER_RATIO: f64 = 0.9;
const SPEED_AT_SLOWDOWN: f64 = 5.0;
/// Interleaved measurement windows per scheme and their minimum length;
/// single windows on a shared core vary by ±15%.
const SPEED_WINDOWS: usize = 12;
const SPEED_WINDOW_SECONDS: f64 = 1.0;
const SEED: u64 = 0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str, overrides: &[&str]) -> Result<ExperimentConfig> {
    let sets: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(&configs().join(name), &sets)
}

fn within(start: Instant, budget: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t <= budget, format!("{:.1}s of {}s", t.as_secs_f64(), budget.as_secs()))
}

fn summarize(records: &[CheckRecord]) -> (bool, String) {
    let failed: Vec<&str> = records.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = records
        .iter()
        .map(|r| if r.tolerance > 0.0 { r.observed / r.tolerance } else { r.observed })
        .fold(0.0, f64::max);
    (
        failed.is_empty(),
        format!(
            "{}/{} checks, worst observed/tolerance {worst:.2e}{}",
            records.len() - failed.len(),
            records.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

fn identities() -> Result<Outcome> {
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..IDENTITY_SEEDS).collect();
    let records = identity_suite(&seeds, &IDENTITY_KS, &IDENTITY_ETAS)?;
    let (ok, detail) = summarize(&records);
    let (fast, time) = within(t0, IDENTITY_BUDGET);
    Ok(Outcome {
        passed: ok && fast,
        detail: format!("{detail}; {time}"),
    })
}

fn gradchecks() -> Result<Outcome> {
    let t0 = Instant::now();
    let checks = common::all_gradchecks()?;
    let bad: Vec<&str> = checks
        .iter()
        .filter(|(_, e)| !(*e < common::GRAD_TOL))
        .map(|(n, _)| n.as_str())
        .collect();
    let worst = checks.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let (fast, time) = within(t0, GRADCHECK_BUDGET);
    Ok(Outcome {
        passed: bad.is_empty() && fast,
        detail: format!(
            "{} checks, worst relative error {worst:.2e} (limit {:.0e}){}; {time}",
            checks.len(),
            common::GRAD_TOL,
            if bad.is_empty() { String::new() } else { format!(", failed: {bad:?}") }
        ),
    })
}

fn variance_matching() -> Result<Outcome> {
    let (passed, detail) = summarize(&variance_matching_suite());
    Ok(Outcome { passed, detail })
}

fn lipschitz() -> Result<Outcome> {
    let (passed, detail) = summarize(&lipschitz_suite(LIPSCHITZ_PROBES, SEED)?);
    Ok(Outcome {
        passed,
        detail: format!("{LIPSCHITZ_PROBES} probes per net; {detail}"),
    })
}

fn convergence() -> Result<Outcome> {
    let t0 = Instant::now();
    let certs = convergence_suite(&CONVERGENCE_KS, &CONVERGENCE_VARIANCES, CONVERGENCE_TRIALS, SEED)?;
    let failed: Vec<&str> = certs.iter().filter(|(_, c)| !c.passed).map(|(n, _)| n.as_str()).collect();
    let tightest = certs
        .iter()
        .map(|(_, c)| (c.lhs - 3.0 * c.lhs_stderr) / c.rhs)
        .fold(f64::NEG_INFINITY, f64::max);
    let (fast, time) = within(t0, CONVERGENCE_BUDGET);
    Ok(Outcome {
        passed: failed.is_empty() && fast,
        detail: format!(
            "{} certificates, max (lhs−3SE)/rhs {tightest:.3}{}; {time}",
            certs.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    })
}

fn toy_kinds(cfg: &ExperimentConfig) -> Vec<SchemeKind> {
    let w = cfg.eval.worst_case.clone();
    vec![
        SchemeKind::Mse,
        SchemeKind::Adversarial {
            epsilon: w.epsilon,
            attack_steps: w.steps,
            attack_step_size: w.step_size,
        },
        SchemeKind::SgdJitter {
            variance: TOY_SGD_VARIANCE,
            schedule: None,
        },
    ]
}

/// Trains every scheme on one seed and evaluates it.
fn run_schemes(cfg: &ExperimentConfig, seed: u64, kinds: &[SchemeKind]) -> Result<Vec<EvalReport>> {
    let splits = make_splits(&cfg.dataset, seed)?;
    kinds
        .iter()
        .map(|kind| {
            let mut c = cfg.clone();
            c.scheme.kind = kind.clone();
            let (solver, _) = train_seed(&c, seed, &splits.train, Execution::Parallel, true)?;
            evaluate(&c, &solver, &splits, seed, Execution::Parallel)
        })
        .collect()
}

fn toy() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = load("toy.toml", &[])?;
    let kinds = toy_kinds(&cfg);
    let (mut robust, mut general) = (0, 0);
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let r = run_schemes(&cfg, seed, &kinds)?;
        let (mse, at, sgd) = (&r[0], &r[1], &r[2]);
        let f_sgd = mse.worst_case.mean / sgd.worst_case.mean;
        let f_at = mse.worst_case.mean / at.worst_case.mean;
        robust += usize::from(f_sgd >= TOY_ROBUST_FACTOR && f_at >= TOY_ROBUST_FACTOR);
        let g = |r: &EvalReport| r.generalization.as_ref().map_or(f64::NAN, |g| g.mean);
        general += usize::from(g(sgd) < g(mse) && g(sgd) < g(at));
        lines.push(format!(
            "seed {seed}: worst-case MSE/SGD {f_sgd:.3} MSE/AT {f_at:.3}; generalization mse {:.3e} at {:.3e} sgd {:.3e}",
            g(mse),
            g(at),
            g(sgd)
        ));
    }
    let degenerate = degeneracy(&cfg)?;
    let (fast, time) = within(t0, TOY_BUDGET);
    let a = robust >= MAJORITY;
    let b = general >= MAJORITY;
    Ok(Outcome {
        passed: a && b && degenerate && fast,
        detail: format!(
            "(a) {} {robust}/3 seeds with both factors ≥ {TOY_ROBUST_FACTOR}; (b) {} SGD lowest generalization on {general}/3; (c) {} degeneracy; {time}\n    {}",
            verdict(a),
            verdict(b),
            verdict(degenerate),
            lines.join("\n    ")
        ),
    })
}

/// Zero-strength AT, input and SGD jittering reproduce MSE weights exactly.
fn degeneracy(cfg: &ExperimentConfig) -> Result<bool> {
    let seed = cfg.seeds[0];
    let splits = make_splits(&cfg.dataset, seed)?;
    let weights = |kind: SchemeKind| -> Result<Vec<jitterlu::Tensor>> {
        let mut c = cfg.clone();
        c.scheme.kind = kind;
        let (s, _) = train_seed(&c, seed, &splits.train, Execution::Parallel, true)?;
        Ok(s.net.params().to_vec())
    };
    let reference = weights(SchemeKind::Mse)?;
    let w = &cfg.eval.worst_case;
    for kind in [
        SchemeKind::Adversarial {
            epsilon: 0.0,
            attack_steps: w.steps,
            attack_step_size: w.step_size,
        },
        SchemeKind::InputJitter { variance: 0.0 },
        SchemeKind::SgdJitter {
            variance: 0.0,
            schedule: None,
        },
    ] {
        if weights(kind)? != reference {
            return Ok(false);
        }
    }
    Ok(true)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn seismic() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = load("seismic.toml", &[])?;
    let w = cfg.eval.worst_case.clone();
    let kinds = [
        SchemeKind::Mse,
        SchemeKind::Adversarial {
            epsilon: w.epsilon,
            attack_steps: w.steps,
            attack_step_size: w.step_size,
        },
        SchemeKind::SgdJitter {
            variance: SEISMIC_SGD_VARIANCE,
            schedule: None,
        },
    ];
    let (mut a, mut b, mut c) = (0, 0, 0);
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let r = run_schemes(&cfg, seed, &kinds)?;
        let psnr = |r: &EvalReport, which: fn(&EvalReport) -> &Option<experiment::QualitySummary>| {
            which(r).as_ref().map_or(f64::NAN, |q| q.psnr)
        };
        let id = |r: &EvalReport| psnr(r, |r| &r.id_quality);
        let att = |r: &EvalReport| psnr(r, |r| &r.attacked_quality);
        let ood = |r: &EvalReport| psnr(r, |r| &r.ood_quality);
        let (mse, at, sgd) = (&r[0], &r[1], &r[2]);
        a += usize::from(id(sgd) >= id(mse) - SEISMIC_ID_SLACK_DB);
        b += usize::from(att(at) > att(mse));
        c += usize::from(ood(sgd) > ood(at));
        lines.push(format!(
            "seed {seed}: ID mse {:.2} at {:.2} sgd {:.2}; attacked mse {:.2} at {:.2} sgd {:.2}; OOD mse {:.2} at {:.2} sgd {:.2} dB",
            id(mse),
            id(at),
            id(sgd),
            att(mse),
            att(at),
            att(sgd),
            ood(mse),
            ood(at),
            ood(sgd)
        ));
    }
    let (fast, time) = within(t0, SEISMIC_BUDGET);
    let (pa, pb, pc) = (a >= MAJORITY, b >= MAJORITY, c >= MAJORITY);
    Ok(Outcome {
        passed: pa && pb && pc && fast,
        detail: format!(
            "(a) {} {a}/3 SGD ID within {SEISMIC_ID_SLACK_DB} dB of MSE; (b) {} {b}/3 AT attacked above MSE; (c) {} {c}/3 SGD OOD above AT; {time}\n    {}",
            verdict(pa),
            verdict(pb),
            verdict(pc),
            lines.join("\n    ")
        ),
    })
}

fn sweep() -> Result<Outcome> {
    let cfg = load("toy.toml", &["eval.sweep_variances=[0.0, 1e-3, 1e-2, 1e-1]"])?;
    let rows = experiment::sweep(&cfg, Execution::Parallel)?;
    let mut nonzero = 0;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let best = rows
            .iter()
            .filter(|r| r.seed == seed)
            .min_by(|a, b| a.risk.total_cmp(&b.risk))
            .expect("grid is non-empty");
        nonzero += usize::from(best.sigma > 0.0);
        lines.push(format!("seed {seed}: argmin σ² = {} (risk {:.3e})", best.sigma, best.risk));
    }
    Ok(Outcome {
        passed: nonzero >= MAJORITY,
        detail: format!("{nonzero}/3 seeds with nonzero argmin; {}", lines.join("; ")),
    })
}

fn speed() -> Result<Outcome> {
    let cfg = load("toy.toml", &[])?;
    let splits = make_splits(&cfg.dataset, SEED)?;
    let template = build_solver(&cfg, SEED)?;
    let w = &cfg.eval.worst_case;
    let kinds = [
        SchemeKind::Mse,
        SchemeKind::InputJitter {
            variance: TOY_INPUT_VARIANCE,
        },
        SchemeKind::SgdJitter {
            variance: TOY_SGD_VARIANCE,
            schedule: None,
        },
        SchemeKind::Adversarial {
            epsilon: w.epsilon,
            attack_steps: w.steps,
            attack_step_size: w.step_size,
        },
    ];
    let bench = BenchConfig {
        batch_size: cfg.scheme.batch_size,
        learning_rate: cfg.scheme.learning_rate,
        windows: SPEED_WINDOWS,
        window_seconds: SPEED_WINDOW_SECONDS,
        ..BenchConfig::default()
    };
    let speeds = bench_training_speed(&template, &splits.train, &kinds, &bench, SEED, Execution::Parallel)?;
    let mse = speeds[0].mean_items_per_second;
    let input = speeds[1].mean_items_per_second / mse;
    let sgd = speeds[2].mean_items_per_second / mse;
    let slowdown = mse / speeds[3].mean_items_per_second;
    let jitter_ok = input >= SPEED_JITTER_RATIO && sgd >= SPEED_JITTER_RATIO;
    let at_ok = slowdown >= SPEED_AT_SLOWDOWN;
    Ok(Outcome {
        passed: jitter_ok && at_ok,
        detail: format!(
            "MSE {mse:.0} items/s; input jitter {input:.3}× and SGD jitter {sgd:.3}× of MSE (need ≥ {SPEED_JITTER_RATIO}); AT {slowdown:.1}× slower (need ≥ {SPEED_AT_SLOWDOWN})"
        ),
    })
}

fn infrastructure() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut failures = Vec::new();
    for name in ["toy.toml", "seismic.toml"] {
        let cfg = load(name, &[])?;
        let splits = make_splits(&cfg.dataset, SEED)?;
        for (split, d) in [("train", &splits.train), ("test", &splits.test), ("ood", &splits.ood)] {
            let path = dir.path().join(format!("{name}.{split}.bin"));
            d.save(&path)?;
            if Dataset::load(&path)? != *d {
                failures.push(format!("dataset {name}/{split}"));
            }
        }
    }
    let cfg = load("toy.toml", &["scheme.epochs=20"])?;
    let splits = make_splits(&cfg.dataset, SEED)?;
    let report = || -> Result<(Vec<u8>, Vec<u8>)> {
        let (solver, outcome) = train_seed(&cfg, SEED, &splits.train, Execution::Parallel, true)?;
        let r = evaluate(&cfg, &solver, &splits, SEED, Execution::Parallel)?;
        let ckpt = Checkpoint::from_net(&solver.net, cfg.echo(), SEED, outcome.history);
        Ok((serde_json::to_vec_pretty(&r)?, ckpt.to_bytes()?))
    };
    let (r1, c1) = report()?;
    let (r2, c2) = report()?;
    if r1 != r2 {
        failures.push("deterministic report".into());
    }
    if c1 != c2 {
        failures.push("deterministic checkpoint".into());
    }
    let path = dir.path().join("model.ckpt");
    let ckpt = Checkpoint::from_bytes(&c1)?;
    ckpt.save(&path)?;
    let back = Checkpoint::load(&path)?;
    if back != ckpt || back.to_bytes()? != c1 {
        failures.push("checkpoint round trip".into());
    }
    let mut fresh = build_solver(&cfg, SEED + 1)?;
    back.load_into(&mut fresh.net)?;
    if fresh.net.params() != ckpt.params.as_slice() {
        failures.push("checkpoint restore".into());
    }
    Ok(Outcome {
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            "datasets (6 splits), checkpoint and reports bit-exact".into()
        } else {
            format!("failed: {failures:?}")
        },
    })
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("exact identities", identities),
        ("autodiff certification", gradchecks),
        ("variance matching", variance_matching),
        ("Lipschitz bound", lipschitz),
        ("convergence bound", convergence),
        ("toy reproduction", toy),
        ("desk-scale seismic", seismic),
        ("jitter-variance sweep", sweep),
        ("training speed", speed),
        ("infrastructure", infrastructure),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let (mut passed, mut errors, mut ran) = (0, 0, 0);
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        match run() {
            Ok(o) => {
                passed += usize::from(o.passed);
                println!(
                    "criterion {id:>2} {}: {name}: {} [{:.1}s]",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.detail,
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(e) => {
                errors += 1;
                println!("criterion {id:>2} ERROR: {name}: {e}");
            }
        }
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if errors > 0 {
        std::process::exit(1);
    }
}
