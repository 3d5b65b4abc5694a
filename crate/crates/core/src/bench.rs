//! Steady-state training throughput per scheme.
//!
//! Every scheme trains its own copy of the same initial solver on the same
//! batch sequence. After a warmup, measurement windows are interleaved
//! across schemes (rotating the start scheme every window) so slow drifts in
//! machine load hit all schemes alike.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, Result};
use crate::par::Execution;
use crate::schemes::{epoch_order, scheme_step, Adam, BatchContext, SchemeKind};
use crate::unroll::Solver;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup_batches: usize,
    pub windows: usize,
    /// Minimum wall time of one measurement window per scheme.
    pub window_seconds: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup_batches: 10,
            windows: 5,
            window_seconds: 0.5,
            batch_size: 256,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpeed {
    pub scheme: String,
    pub mean_items_per_second: f64,
    pub std_items_per_second: f64,
    pub windows: Vec<f64>,
    pub measured_batches: usize,
}

struct Runner<'a> {
    kind: &'a SchemeKind,
    solver: Solver,
    adam: Adam,
    step: usize,
}

fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let (epoch, b) = (step / per_epoch, step % per_epoch);
    let order = epoch_order(n, seed, epoch);
    order[b * batch..((b + 1) * batch).min(n)].to_vec()
}

impl Runner<'_> {
    fn batch(&mut self, data: &Dataset, cfg: &BenchConfig, seed: u64, exec: Execution) -> Result<usize> {
        let idx = batch_indices(data.len(), cfg.batch_size, seed, self.step);
        let (x, y) = data.gather(&idx);
        let ctx = BatchContext {
            seed,
            epoch: self.step,
            indices: &idx,
            exec,
        };
        let out = scheme_step(self.kind, &self.solver, &x, &y, ctx)?;
        self.adam.update(self.solver.net.params_mut(), &out.grads)?;
        self.step += 1;
        Ok(idx.len())
    }
}

pub fn bench_training_speed(
    template: &Solver,
    data: &Dataset,
    kinds: &[SchemeKind],
    cfg: &BenchConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<SchemeSpeed>> {
    if kinds.is_empty() || cfg.windows == 0 || cfg.batch_size == 0 || data.is_empty() {
        return Err(invalid("bench needs schemes, windows ≥ 1, batch size ≥ 1 and data"));
    }
    for k in kinds {
        k.validate(template.cfg.k)?;
    }
    let mut runners: Vec<Runner> = kinds
        .iter()
        .map(|kind| Runner {
            kind,
            solver: template.clone(),
            adam: Adam::new(template.net.params(), cfg.learning_rate),
            step: 0,
        })
        .collect();
    for r in &mut runners {
        for _ in 0..cfg.warmup_batches {
            r.batch(data, cfg, seed, exec)?;
        }
    }
    let budget = Duration::from_secs_f64(cfg.window_seconds.max(0.0));
    let mut windows = vec![Vec::with_capacity(cfg.windows); runners.len()];
    let mut batches = vec![0usize; runners.len()];
    for w in 0..cfg.windows {
        for j in 0..runners.len() {
            let s = (w + j) % runners.len();
            let t0 = Instant::now();
            let mut items = 0;
            loop {
                items += runners[s].batch(data, cfg, seed, exec)?;
                batches[s] += 1;
                if t0.elapsed() >= budget {
                    break;
                }
            }
            windows[s].push(items as f64 / t0.elapsed().as_secs_f64());
        }
    }
    Ok(runners
        .iter()
        .zip(windows)
        .zip(batches)
        .map(|((r, w), b)| {
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = if w.len() > 1 {
                w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            SchemeSpeed {
                scheme: r.kind.name().to_string(),
                mean_items_per_second: mean,
                std_items_per_second: var.sqrt(),
                windows: w,
                measured_batches: b,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_epochs() {
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(10, 4, 1, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 4, 1, 2).len(), 2);
    }
}
