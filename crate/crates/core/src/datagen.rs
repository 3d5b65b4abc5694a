//! Synthetic datasets `y = A x + z` for the 2-D toy denoising task and the
//! sparse-reflectivity deconvolution task.
//!
//! Sample `i` of a split is generated from its own random stream
//! `(seed, DATA, split, i)`, so regeneration is bit-identical and
//! independent of execution order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linops::{LinearOperator, OperatorSpec};
use crate::rng::{self, purpose};
use crate::tape::RowOperator;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Ood => 2,
        }
    }
}

/// How a noise variance `σ²` is spread over the `n` coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// `E‖z‖² = σ²`, i.e. per-coordinate variance `σ²/n`.
    #[default]
    TotalEnergy,
    /// Per-coordinate variance `σ²`.
    PerCoordinate,
}

impl NoiseConvention {
    pub fn coordinate_std(self, variance: f64, n: usize) -> f64 {
        match self {
            NoiseConvention::TotalEnergy => (variance / n as f64).sqrt(),
            NoiseConvention::PerCoordinate => variance.sqrt(),
        }
    }
}

/// Self-describing metadata stored with every dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: u32,
    pub split: Split,
    pub seed: u64,
    pub samples: usize,
    pub signal_dim: usize,
    pub measurement_dim: usize,
    /// Per-sample layout of the signal, e.g. `[traces, trace_len]`.
    pub signal_shape: Vec<usize>,
    pub noise_variance: f64,
    pub noise_convention: NoiseConvention,
    pub operator: OperatorSpec,
    /// Generator parameters, echoed for provenance.
    pub generator: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    /// Ground truths, `[N×n]`.
    pub x: Tensor,
    /// Measurements, `[N×m]`.
    pub y: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.header.samples
    }

    pub fn is_empty(&self) -> bool {
        self.header.samples == 0
    }

    pub fn signal_dim(&self) -> usize {
        self.header.signal_dim
    }

    pub fn measurement_dim(&self) -> usize {
        self.header.measurement_dim
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        self.y.row(i)
    }

    /// Gathers the rows `idx` into `([k×n], [k×m])` tensors.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (n, m) = (self.signal_dim(), self.measurement_dim());
        let mut x = Vec::with_capacity(idx.len() * n);
        let mut y = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
            y.extend_from_slice(self.y_row(i));
        }
        (
            Tensor::matrix(idx.len(), n, x).expect("gather shape"),
            Tensor::matrix(idx.len(), m, y).expect("gather shape"),
        )
    }

    pub fn operator(&self) -> Result<LinearOperator> {
        LinearOperator::from_spec(&self.header.operator)
    }

    /// Writes one JSON header line followed by the little-endian `f64`
    /// payload of `x` then `y`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for v in self.x.data().iter().chain(self.y.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: DatasetHeader = serde_json::from_str(line.trim_end())?;
        if header.format != DATASET_FORMAT {
            return Err(Error::CorruptPayload(format!(
                "dataset format {} is not supported",
                header.format
            )));
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        let nx = header.samples * header.signal_dim;
        let ny = header.samples * header.measurement_dim;
        if payload.len() != 8 * (nx + ny) {
            return Err(Error::CorruptPayload(format!(
                "expected {} payload bytes, found {}",
                8 * (nx + ny),
                payload.len()
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let x = Tensor::matrix(header.samples, header.signal_dim, values[..nx].to_vec())?;
        let y = Tensor::matrix(header.samples, header.measurement_dim, values[nx..].to_vec())?;
        Ok(Self { header, x, y })
    }
}

/// Builds `y = A x + z` for the given ground truths.
#[allow(clippy::too_many_arguments)]
fn measure(
    op: &LinearOperator,
    xs: Vec<f64>,
    split: Split,
    seed: u64,
    variance: f64,
    convention: NoiseConvention,
    signal_shape: Vec<usize>,
    generator: serde_json::Value,
) -> Result<Dataset> {
    if !(variance >= 0.0) {
        return Err(invalid("noise variance must be ≥ 0"));
    }
    let (n, m) = (op.domain_dim(), op.range_dim());
    let samples = xs.len() / n;
    let std = convention.coordinate_std(variance, m);
    let mut ys = vec![0.0; samples * m];
    for i in 0..samples {
        let yr = &mut ys[i * m..(i + 1) * m];
        op.apply_row(&xs[i * n..(i + 1) * n], yr);
        if variance > 0.0 {
            let mut r = rng::stream(seed, &[purpose::NOISE, split.tag(), i as u64]);
            yr.iter_mut().for_each(|v| *v += std * rng::normal(&mut r));
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT,
            split,
            seed,
            samples,
            signal_dim: n,
            measurement_dim: m,
            signal_shape,
            noise_variance: variance,
            noise_convention: convention,
            operator: op.spec().clone(),
            generator,
        },
        x: Tensor::matrix(samples, n, xs)?,
        y: Tensor::matrix(samples, m, ys)?,
    })
}

/// Toy denoising: every ground truth is `(0, 0)`, `y = x + z`.
pub fn gen_toy(
    n_train: usize,
    n_test: usize,
    variance: f64,
    convention: NoiseConvention,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(invalid("toy dataset needs at least one train and one test sample"));
    }
    let op = LinearOperator::identity(2);
    let gen = serde_json::json!({"task": "toy", "ground_truth": [0.0, 0.0]});
    Ok((
        measure(&op, vec![0.0; 2 * n_train], Split::Train, seed, variance, convention, vec![2], gen.clone())?,
        measure(&op, vec![0.0; 2 * n_test], Split::Test, seed, variance, convention, vec![2], gen)?,
    ))
}

/// Toy OOD split: every ground truth equals `bias`.
pub fn gen_toy_ood(
    bias: [f64; 2],
    n: usize,
    variance: f64,
    convention: NoiseConvention,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("toy ood dataset needs at least one sample"));
    }
    let op = LinearOperator::identity(2);
    let xs: Vec<f64> = (0..n).flat_map(|_| bias).collect();
    let gen = serde_json::json!({"task": "toy", "ground_truth": bias});
    measure(&op, xs, Split::Ood, seed, variance, convention, vec![2], gen)
}

/// Parameters of the synthetic reflectivity sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeismicSpec {
    pub traces: usize,
    pub trace_len: usize,
    /// Probability of a spike in each (trace, time) cell.
    pub sparsity: f64,
    /// Spike magnitudes are uniform in `[amp_min, amp_max]` with random sign.
    pub amp_min: f64,
    pub amp_max: f64,
    pub peak_frequency: f64,
    pub dt: f64,
    pub half_width: usize,
    /// `E‖z‖²` (or per-coordinate variance, per `noise_convention`).
    pub noise_variance: f64,
    #[serde(default)]
    pub noise_convention: NoiseConvention,
}

impl Default for SeismicSpec {
    fn default() -> Self {
        Self {
            traces: 32,
            trace_len: 64,
            sparsity: 0.05,
            amp_min: 0.3,
            amp_max: 1.0,
            peak_frequency: 25.0,
            dt: 0.004,
            half_width: 12,
            noise_variance: 0.05 * 0.05 * 2048.0,
            noise_convention: NoiseConvention::TotalEnergy,
        }
    }
}

impl SeismicSpec {
    pub fn operator_spec(&self) -> OperatorSpec {
        OperatorSpec::Ricker {
            peak_frequency: self.peak_frequency,
            dt: self.dt,
            half_width: self.half_width,
            traces: self.traces,
            trace_len: self.trace_len,
        }
    }

    pub fn signal_dim(&self) -> usize {
        self.traces * self.trace_len
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(invalid("sparsity must lie in (0, 1)"));
        }
        if !(0.0 <= self.amp_min && self.amp_min <= self.amp_max) {
            return Err(invalid("amplitude range must satisfy 0 ≤ amp_min ≤ amp_max"));
        }
        if self.trace_len <= 2 * self.half_width + 1 {
            return Err(invalid("trace length must exceed the wavelet length"));
        }
        Ok(())
    }

    fn reflectivity(&self, seed: u64, split: Split, i: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, &[purpose::DATA, split.tag(), i as u64]);
        (0..self.signal_dim())
            .map(|_| {
                if rng::bernoulli(&mut r, self.sparsity) {
                    let a = if self.amp_max > self.amp_min {
                        rng::uniform(&mut r, self.amp_min, self.amp_max)
                    } else {
                        self.amp_min
                    };
                    if rng::bernoulli(&mut r, 0.5) {
                        a
                    } else {
                        -a
                    }
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn generator(&self, layer: Option<(f64, usize)>) -> serde_json::Value {
        let mut v = serde_json::json!({"task": "seismic", "spec": self});
        if let Some((magnitude, time)) = layer {
            v["layer"] = serde_json::json!({"magnitude": magnitude, "time": time});
        }
        v
    }
}

/// Sparse-spike reflectivity sections convolved per trace with a Ricker
/// wavelet, plus noise.
pub fn gen_seismic(spec: &SeismicSpec, n: usize, split: Split, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let op = LinearOperator::from_spec(&spec.operator_spec())?;
    let xs: Vec<f64> = (0..n).flat_map(|i| spec.reflectivity(seed, split, i)).collect();
    measure(
        &op,
        xs,
        split,
        seed,
        spec.noise_variance,
        spec.noise_convention,
        vec![spec.traces, spec.trace_len],
        spec.generator(None),
    )
}

/// Sections of the same family with an added constant horizontal layer of
/// `magnitude` at time index `layer_time` on every trace.
pub fn gen_seismic_ood(
    spec: &SeismicSpec,
    n: usize,
    layer_magnitude: f64,
    layer_time: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if layer_time >= spec.trace_len {
        return Err(invalid(format!(
            "layer time {layer_time} outside trace length {}",
            spec.trace_len
        )));
    }
    let op = LinearOperator::from_spec(&spec.operator_spec())?;
    let xs: Vec<f64> = (0..n)
        .flat_map(|i| {
            let mut x = spec.reflectivity(seed, Split::Ood, i);
            for t in 0..spec.traces {
                x[t * spec.trace_len + layer_time] += layer_magnitude;
            }
            x
        })
        .collect();
    measure(
        &op,
        xs,
        Split::Ood,
        seed,
        spec.noise_variance,
        spec.noise_convention,
        vec![spec.traces, spec.trace_len],
        spec.generator(Some((layer_magnitude, layer_time))),
    )
}
