//! Experiment configuration: TOML files with dotted-path overrides.
//!
//! Every section rejects unknown keys. Overrides are `path.to.key=value`
//! where `value` is parsed as a TOML value (falling back to a bare string),
//! so whole tables can be replaced with inline-table syntax, e.g.
//! `scheme.kind={kind="sgd_jitter",variance=0.01}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{NoiseConvention, SeismicSpec};
use crate::error::{Error, Result};
use crate::eval::{Sampling, Shift};
use crate::linops::OperatorSpec;
use crate::nets::{NetRole, NetSpec};
use crate::schemes::{SchemeKind, TrainingScheme};
use crate::unroll::{UnrollConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Toy,
    Seismic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Toy {
        n_train: usize,
        n_test: usize,
        noise_variance: f64,
        #[serde(default)]
        noise_convention: NoiseConvention,
        /// Ground truth of the shifted split.
        ood_bias: [f64; 2],
        n_ood: usize,
    },
    Seismic {
        n_train: usize,
        n_test: usize,
        n_ood: usize,
        ood_layer_magnitude: f64,
        ood_layer_time: usize,
        #[serde(default)]
        seismic: SeismicSpec,
    },
}

impl DatasetSpec {
    pub fn operator_spec(&self) -> OperatorSpec {
        match self {
            DatasetSpec::Toy { .. } => OperatorSpec::Identity { dim: 2 },
            DatasetSpec::Seismic { seismic, .. } => seismic.operator_spec(),
        }
    }

    pub fn signal_dim(&self) -> usize {
        match self {
            DatasetSpec::Toy { .. } => 2,
            DatasetSpec::Seismic { seismic, .. } => seismic.signal_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorstCaseSpec {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AverageCaseSpec {
    pub magnitude: f64,
    pub sampling: Sampling,
    #[serde(default = "crate::eval::default_draws")]
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub shift: Shift,
    #[serde(default = "one")]
    pub draws: usize,
}

fn one() -> usize {
    1
}

fn default_sweep() -> Vec<f64> {
    vec![0.0, 1e-3, 1e-2, 1e-1]
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub worst_case: WorstCaseSpec,
    #[serde(default)]
    pub average_case: Option<AverageCaseSpec>,
    /// Generalization shift on the test split; omitted when `None`.
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
    /// Jitter variances visited by `sweep`.
    #[serde(default = "default_sweep")]
    pub sweep_variances: Vec<f64>,
    /// Concurrent sweep cells.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Derived from the dataset when omitted; must agree with it otherwise.
    #[serde(default)]
    pub operator: Option<OperatorSpec>,
    pub solver: UnrollConfig,
    pub net: NetSpec,
    pub scheme: TrainingScheme,
    pub dataset: DatasetSpec,
    pub eval: EvalSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses a TOML override value, treating unparsable text as a string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a parsed document, creating missing tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override key `{path}` has an empty segment")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and checks consistency.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.scheme.kind.validate(self.solver.k)?;
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        if self.scheme.batch_size == 0 || !(self.scheme.learning_rate > 0.0) {
            return Err(config_err("scheme needs batch_size ≥ 1 and learning_rate > 0"));
        }
        match (self.task, &self.dataset) {
            (Task::Toy, DatasetSpec::Toy { .. }) | (Task::Seismic, DatasetSpec::Seismic { .. }) => {}
            _ => return Err(config_err("task and dataset kind disagree")),
        }
        if let DatasetSpec::Seismic { seismic, .. } = &self.dataset {
            seismic.validate()?;
        }
        if let Some(op) = &self.operator {
            if *op != self.dataset.operator_spec() {
                return Err(config_err("operator does not match the dataset's forward model"));
            }
        }
        let role = self.net.role;
        match (self.solver.variant, role) {
            (Variant::Gd, NetRole::Gradient) | (Variant::Pgd, NetRole::Proximal) => {}
            _ => return Err(config_err("PGD solvers need a proximal net and GD solvers a gradient net")),
        }
        match (&self.scheme.kind, self.solver.variant) {
            (SchemeKind::SpgdJitter { .. }, Variant::Gd) => {
                return Err(config_err("spgd_jitter needs a PGD solver"))
            }
            (SchemeKind::SgdJitter { .. }, Variant::Pgd) => {
                return Err(config_err("sgd_jitter needs a GD solver"))
            }
            _ => {}
        }
        let n = self.dataset.signal_dim();
        let arch_dim = match &self.net.architecture {
            crate::nets::Architecture::Mlp { widths, .. } => {
                if widths.first() != widths.last() {
                    return Err(config_err("MLP input and output widths must agree"));
                }
                widths.first().copied()
            }
            crate::nets::Architecture::Linear { dim } => Some(*dim),
            crate::nets::Architecture::Dncnn1d { trace_len, .. } => {
                if *trace_len == 0 || !n.is_multiple_of(*trace_len) {
                    return Err(config_err("DnCNN trace length must divide the signal dimension"));
                }
                None
            }
        };
        if arch_dim.is_some_and(|d| d != n) {
            return Err(config_err(format!(
                "net dimension {} does not match signal dimension {n}",
                arch_dim.unwrap_or(0)
            )));
        }
        let w = &self.eval.worst_case;
        if !(w.epsilon >= 0.0) || !(w.step_size > 0.0) {
            return Err(config_err("worst-case eval needs ε ≥ 0 and step_size > 0"));
        }
        if self.eval.workers == 0 {
            return Err(config_err("eval.workers must be ≥ 1"));
        }
        Ok(())
    }

    /// Effective operator (explicit or derived).
    pub fn operator_spec(&self) -> OperatorSpec {
        self.operator.clone().unwrap_or_else(|| self.dataset.operator_spec())
    }

    /// Canonical JSON echo of the effective configuration.
    pub fn echo(&self) -> serde_json::Value {
        let mut cfg = self.clone();
        cfg.operator = Some(self.operator_spec());
        serde_json::to_value(&cfg).expect("config serializes")
    }

    /// SHA-256 of the canonical echo, as lowercase hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.echo()).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
