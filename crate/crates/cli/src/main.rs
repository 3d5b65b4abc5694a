use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use jitterlu::bench::{bench_training_speed, BenchConfig};
use jitterlu::checkpoint::Checkpoint;
use jitterlu::config::ExperimentConfig;
use jitterlu::datagen::Dataset;
use jitterlu::experiment::{self, Splits, CODE_VERSION, REPORT_SCHEMA_VERSION};
use jitterlu::schemes::SchemeKind;
use jitterlu::{eval, theory, Error, Execution, Result};

#[derive(Parser)]
#[command(name = "jitterlu", version, about = "Train and evaluate loop-unrolled inverse-problem solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `--set solver.eta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory name under `output_dir` (default: timestamp + config hash).
    #[arg(long)]
    run_id: Option<String>,
    /// Zero all timing fields so outputs are byte-reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Disable data-parallel execution.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test/ood datasets for every seed.
    Datagen(Common),
    /// Train one solver per seed and save checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Load datasets written by `datagen` from this run directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also evaluate every trained solver.
        #[arg(long)]
        evaluate: bool,
    },
    /// Evaluate a checkpoint on the test and OOD splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data seed (default: the checkpoint's seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Worst-case attack on every test sample of a checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Worst-case risk over the jitter-variance grid.
    Sweep(Common),
    /// Numerical checks of the trajectory algebra and bounds.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write `verify.json` (default: print only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training throughput of MSE, AT, input and SGD/SPGD jittering.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        windows: usize,
        #[arg(long, default_value_t = 0.5)]
        window_seconds: f64,
        #[arg(long, default_value_t = 10)]
        warmup_batches: usize,
    },
    /// Aggregate `eval*.json` reports under run directories into tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    code_version: &'a str,
    config: Option<serde_json::Value>,
    #[serde(flatten)]
    body: T,
}

fn envelope<T: Serialize>(config: Option<&ExperimentConfig>, body: T) -> Envelope<'static, T> {
    Envelope {
        schema_version: REPORT_SCHEMA_VERSION,
        code_version: CODE_VERSION,
        config: config.map(ExperimentConfig::echo),
        body,
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    dir: PathBuf,
    exec: Execution,
    deterministic: bool,
}

fn setup(c: &Common) -> Result<Ctx> {
    let cfg = ExperimentConfig::load(&c.config, &c.set)?;
    let dir = experiment::run_dir(&cfg, c.run_id.as_deref());
    std::fs::create_dir_all(&dir)?;
    experiment::write_json(&dir.join("config.json"), &cfg.echo())?;
    let exec = if c.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    Ok(Ctx {
        cfg,
        dir,
        exec,
        deterministic: c.deterministic,
    })
}

fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed{seed}"))
}

fn splits(cfg: &ExperimentConfig, data: Option<&Path>, seed: u64) -> Result<Splits> {
    match data {
        None => experiment::make_splits(&cfg.dataset, seed),
        Some(d) => {
            let d = seed_dir(d, seed);
            Ok(Splits {
                train: Dataset::load(&d.join("train.bin"))?,
                test: Dataset::load(&d.join("test.bin"))?,
                ood: Dataset::load(&d.join("ood.bin"))?,
            })
        }
    }
}

fn solver_from(cfg: &ExperimentConfig, ckpt: &Path) -> Result<(jitterlu::Solver, u64)> {
    let c = Checkpoint::load(ckpt)?;
    let mut solver = experiment::build_solver(cfg, c.header.seed)?;
    c.load_into(&mut solver.net)?;
    Ok((solver, c.header.seed))
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    scheme: String,
    final_loss: Option<f64>,
    items_per_second: f64,
    optimizer_steps: u64,
    checkpoint: String,
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Datagen(c) => {
            let ctx = setup(&c)?;
            for &seed in &ctx.cfg.seeds {
                let s = experiment::make_splits(&ctx.cfg.dataset, seed)?;
                let d = seed_dir(&ctx.dir, seed);
                std::fs::create_dir_all(&d)?;
                s.train.save(&d.join("train.bin"))?;
                s.test.save(&d.join("test.bin"))?;
                s.ood.save(&d.join("ood.bin"))?;
            }
            Ok(ctx.dir)
        }
        Command::Train {
            common,
            data,
            evaluate,
        } => {
            let ctx = setup(&common)?;
            let mut runs = Vec::new();
            for &seed in &ctx.cfg.seeds {
                let s = splits(&ctx.cfg, data.as_deref(), seed)?;
                let (solver, outcome) =
                    experiment::train_seed(&ctx.cfg, seed, &s.train, ctx.exec, ctx.deterministic)?;
                let d = seed_dir(&ctx.dir, seed);
                std::fs::create_dir_all(&d)?;
                let ckpt = d.join("model.ckpt");
                Checkpoint::from_net(&solver.net, ctx.cfg.echo(), seed, outcome.history.clone()).save(&ckpt)?;
                std::fs::write(d.join("loss.csv"), experiment::history_csv(&outcome))?;
                if evaluate {
                    let r = experiment::evaluate(&ctx.cfg, &solver, &s, seed, ctx.exec)?;
                    experiment::write_json(&d.join("eval.json"), &r)?;
                }
                runs.push(TrainSummary {
                    seed,
                    scheme: ctx.cfg.scheme.kind.name().to_string(),
                    final_loss: outcome.history.last().map(|h| h.mean_loss),
                    items_per_second: outcome.items_per_second,
                    optimizer_steps: outcome.optimizer_steps,
                    checkpoint: format!("seed{seed}/model.ckpt"),
                });
            }
            experiment::write_json(
                &ctx.dir.join("train.json"),
                &envelope(Some(&ctx.cfg), serde_json::json!({ "runs": runs })),
            )?;
            Ok(ctx.dir)
        }
        Command::Eval {
            common,
            checkpoint,
            seed,
            data,
        } => {
            let ctx = setup(&common)?;
            let (solver, ck_seed) = solver_from(&ctx.cfg, &checkpoint)?;
            let seed = seed.unwrap_or(ck_seed);
            let s = splits(&ctx.cfg, data.as_deref(), seed)?;
            let r = experiment::evaluate(&ctx.cfg, &solver, &s, seed, ctx.exec)?;
            experiment::write_json(&ctx.dir.join("eval.json"), &r)?;
            Ok(ctx.dir)
        }
        Command::Attack {
            common,
            checkpoint,
            seed,
            data,
        } => {
            let ctx = setup(&common)?;
            let (solver, ck_seed) = solver_from(&ctx.cfg, &checkpoint)?;
            let seed = seed.unwrap_or(ck_seed);
            let s = splits(&ctx.cfg, data.as_deref(), seed)?;
            let w = &ctx.cfg.eval.worst_case;
            let clean = eval::clean_risk(&solver, &s.test, ctx.exec)?;
            let (worst, e) = eval::worst_case_risk(&solver, &s.test, w.epsilon, w.steps, w.step_size, ctx.exec)?;
            let m = solver.measurement_dim();
            let mut csv = String::from("sample,clean_loss,attacked_loss,e_norm\n");
            for i in 0..s.test.len() {
                let en = jitterlu::tensor::norm(&e.data()[i * m..(i + 1) * m]);
                csv.push_str(&format!(
                    "{i},{},{},{en}\n",
                    clean.per_sample[i], worst.per_sample[i]
                ));
            }
            std::fs::write(ctx.dir.join("attack.csv"), csv)?;
            experiment::write_json(
                &ctx.dir.join("attack.json"),
                &envelope(
                    Some(&ctx.cfg),
                    serde_json::json!({
                        "seed": seed,
                        "epsilon": w.epsilon,
                        "steps": w.steps,
                        "step_size": w.step_size,
                        "clean_risk": clean.mean,
                        "worst_case_risk": worst.mean,
                        "worst_case_stderr": worst.stderr,
                    }),
                ),
            )?;
            Ok(ctx.dir)
        }
        Command::Sweep(c) => {
            let ctx = setup(&c)?;
            let rows = experiment::sweep(&ctx.cfg, ctx.exec)?;
            std::fs::write(ctx.dir.join("sweep.csv"), experiment::sweep_csv(&rows))?;
            Ok(ctx.dir)
        }
        Command::Verify { seed, out } => {
            let checks = theory::verify_all(seed)?;
            let passed = checks.iter().all(|c| c.passed);
            let report = envelope(None, serde_json::json!({ "passed": passed, "checks": checks }));
            let text = serde_json::to_string_pretty(&report)? + "\n";
            let dir = match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("verify.json"), &text)?;
                    dir
                }
                None => {
                    print!("{text}");
                    PathBuf::new()
                }
            };
            if !passed {
                return Err(Error::InvalidArgument("verification checks failed".into()));
            }
            Ok(dir)
        }
        Command::Bench {
            common,
            windows,
            window_seconds,
            warmup_batches,
        } => {
            let ctx = setup(&common)?;
            let seed = ctx.cfg.seeds[0];
            let s = experiment::make_splits(&ctx.cfg.dataset, seed)?;
            let template = experiment::build_solver(&ctx.cfg, seed)?;
            let kinds = bench_kinds(&ctx.cfg);
            let bc = BenchConfig {
                warmup_batches,
                windows,
                window_seconds,
                batch_size: ctx.cfg.scheme.batch_size,
                learning_rate: ctx.cfg.scheme.learning_rate,
            };
            let speeds = bench_training_speed(&template, &s.train, &kinds, &bc, seed, ctx.exec)?;
            experiment::write_json(
                &ctx.dir.join("bench.json"),
                &envelope(Some(&ctx.cfg), serde_json::json!({ "bench": bc, "schemes": speeds })),
            )?;
            Ok(ctx.dir)
        }
        Command::Report { runs, out } => {
            let mut reports = Vec::new();
            for r in &runs {
                collect_reports(r, &mut reports)?;
            }
            if reports.is_empty() {
                return Err(Error::MissingFile(runs[0].join("eval.json")));
            }
            std::fs::create_dir_all(&out)?;
            let (table, scatter) = experiment::report_tables(&reports);
            std::fs::write(out.join("table.csv"), table)?;
            std::fs::write(out.join("scatter.csv"), scatter)?;
            Ok(out)
        }
    }
}

/// MSE, AT (with the eval attack config), input jitter and the jitter
/// scheme of the configured variant, at the configured variances.
fn bench_kinds(cfg: &ExperimentConfig) -> Vec<SchemeKind> {
    let w = &cfg.eval.worst_case;
    let variance = match &cfg.scheme.kind {
        SchemeKind::SgdJitter { variance, .. } | SchemeKind::SpgdJitter { variance, .. } if *variance > 0.0 => {
            *variance
        }
        _ => 0.01,
    };
    vec![
        SchemeKind::Mse,
        SchemeKind::Adversarial {
            epsilon: w.epsilon,
            attack_steps: w.steps,
            attack_step_size: w.step_size,
        },
        SchemeKind::InputJitter { variance },
        experiment::jitter_kind(cfg.solver.variant, variance),
    ]
}

fn collect_reports(dir: &Path, out: &mut Vec<experiment::EvalReport>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| Error::MissingFile(dir.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "eval.json") {
            let text = std::fs::read_to_string(&p)?;
            out.push(serde_json::from_str(&text)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            if !dir.as_os_str().is_empty() {
                println!("{}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
