//! Learned gradient and proximal networks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, purpose};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// What the network stands in for inside the unrolled solver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    /// `f_θ(x)`, the learned gradient of the regularizer.
    #[default]
    Gradient,
    /// `prox_θ(u)`, returning the next iterate. Implemented as `u + body(u)`
    /// so that a zero body is the identity map.
    Proximal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected net; `widths` lists every layer width including input
    /// and output, e.g. `[2, 32, 32, 2]`.
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
    },
    /// 1-D DnCNN-style stack applied to every trace of length `trace_len`:
    /// conv(1→C), `depth − 2` × conv(C→C), conv(C→1), activation between.
    Dncnn1d {
        depth: usize,
        channels: usize,
        kernel: usize,
        activation: Activation,
        trace_len: usize,
    },
    /// Affine map `x ↦ W x + b` on `ℝ^dim`.
    Linear { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub role: NetRole,
    /// Initialize the final layer to zero, so the net starts as the zero map
    /// (gradient role) or the identity (proximal role).
    #[serde(default)]
    pub zero_last: bool,
}

impl NetSpec {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            role: NetRole::Gradient,
            zero_last: false,
        }
    }

    pub fn with_role(mut self, role: NetRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_zero_last(mut self, zero_last: bool) -> Self {
        self.zero_last = zero_last;
        self
    }
}

/// Network parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    spec: NetSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

struct Layer {
    name: String,
    weight_shape: Vec<usize>,
    bias_len: usize,
    fan_in: usize,
    fan_out: usize,
}

fn layers(arch: &Architecture) -> Result<Vec<Layer>> {
    match arch {
        Architecture::Mlp { widths, .. } => {
            if widths.len() < 2 {
                return Err(invalid("mlp needs at least input and output widths"));
            }
            if widths.contains(&0) {
                return Err(invalid("mlp layer widths must be ≥ 1"));
            }
            Ok(widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| Layer {
                    name: format!("layer{i}"),
                    weight_shape: vec![w[1], w[0]],
                    bias_len: w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                })
                .collect())
        }
        Architecture::Dncnn1d {
            depth,
            channels,
            kernel,
            trace_len,
            ..
        } => {
            if *depth < 2 || *channels == 0 || *trace_len == 0 {
                return Err(invalid("dncnn needs depth ≥ 2, channels ≥ 1, trace_len ≥ 1"));
            }
            if kernel % 2 == 0 {
                return Err(invalid("dncnn kernel length must be odd"));
            }
            Ok((0..*depth)
                .map(|i| {
                    let c_in = if i == 0 { 1 } else { *channels };
                    let c_out = if i + 1 == *depth { 1 } else { *channels };
                    Layer {
                        name: format!("conv{i}"),
                        weight_shape: vec![c_out, c_in, *kernel],
                        bias_len: c_out,
                        fan_in: c_in * kernel,
                        fan_out: c_out * kernel,
                    }
                })
                .collect())
        }
        Architecture::Linear { dim } => {
            if *dim == 0 {
                return Err(invalid("linear net needs dim ≥ 1"));
            }
            Ok(vec![Layer {
                name: "linear".into(),
                weight_shape: vec![*dim, *dim],
                bias_len: *dim,
                fan_in: *dim,
                fan_out: *dim,
            }])
        }
    }
}

impl Architecture {
    pub fn param_count(&self) -> Result<usize> {
        Ok(layers(self)?
            .iter()
            .map(|l| l.weight_shape.iter().product::<usize>() + l.bias_len)
            .sum())
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            Architecture::Mlp { activation, .. } | Architecture::Dncnn1d { activation, .. } => {
                Some(*activation)
            }
            Architecture::Linear { .. } => None,
        }
    }
}

impl Net {
    /// Deterministic initialization: Glorot-uniform for tanh layers, He-normal
    /// for relu layers, zero biases.
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self> {
        let layers = layers(&spec.architecture)?;
        let relu = spec.architecture.activation() == Some(Activation::Relu);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            let numel: usize = l.weight_shape.iter().product();
            let mut w = vec![0.0; numel];
            if !(spec.zero_last && i == last) {
                let mut r = rng::stream(seed, &[purpose::INIT, i as u64]);
                if relu {
                    rng::fill_normal(&mut r, (2.0 / l.fan_in as f64).sqrt(), &mut w);
                } else {
                    let a = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
                    w.iter_mut().for_each(|v| *v = rng::uniform(&mut r, -a, a));
                }
            }
            names.push(format!("{}.weight", l.name));
            params.push(Tensor::new(l.weight_shape.clone(), w)?);
            names.push(format!("{}.bias", l.name));
            params.push(Tensor::zeros(&[l.bias_len]));
        }
        Ok(Self {
            spec: spec.clone(),
            names,
            params,
        })
    }

    /// Linear net `x ↦ W x + b` with the given weights.
    pub fn linear(weight: Tensor, bias: Tensor, role: NetRole) -> Result<Self> {
        let dim = bias.numel();
        let spec = NetSpec::new(Architecture::Linear { dim }).with_role(role);
        let mut net = Self::build(&spec, 0)?;
        net.set_params(vec![weight, bias])?;
        Ok(net)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn role(&self) -> NetRole {
        self.spec.role
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces all parameters, checking names/shapes against the architecture.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            let idx = params.len().min(self.params.len());
            let tensor = self
                .names
                .get(idx)
                .cloned()
                .unwrap_or_else(|| format!("#{idx}"));
            return Err(Error::ArchitectureMismatch {
                tensor,
                reason: format!(
                    "expected {} tensors, got {}",
                    self.params.len(),
                    params.len()
                ),
            });
        }
        for ((name, old), new) in self.names.iter().zip(&self.params).zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::ArchitectureMismatch {
                    tensor: name.clone(),
                    reason: format!("expected shape {:?}, got {:?}", old.shape(), new.shape()),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Flattened parameter vector in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    /// Input dimension if the architecture fixes one.
    pub fn input_dim(&self) -> Option<usize> {
        match &self.spec.architecture {
            Architecture::Mlp { widths, .. } => widths.first().copied(),
            Architecture::Linear { dim } => Some(*dim),
            Architecture::Dncnn1d { .. } => None,
        }
    }

    /// Pushes the parameters as leaves; `trainable` controls whether they
    /// receive gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    /// Records the network on `tape`. `x` is `[B×n]` or `[n]`; the result has
    /// the same shape.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (rows, n) = match shape.as_slice() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "net input must be a vector or a batch of rows".into(),
                })
            }
        };
        let h = if shape.len() == 1 {
            tape.reshape(x, &[1, n])?
        } else {
            x
        };
        let body = match &self.spec.architecture {
            Architecture::Mlp {
                widths, activation, ..
            } => {
                if n != widths[0] {
                    return Err(Error::ShapeMismatch {
                        op: "mlp forward",
                        left: shape.clone(),
                        right: vec![widths[0]],
                    });
                }
                let depth = widths.len() - 1;
                let mut h = h;
                for l in 0..depth {
                    h = tape.linear(h, params[2 * l], params[2 * l + 1])?;
                    if l + 1 < depth {
                        h = activate(tape, h, *activation);
                    }
                }
                h
            }
            Architecture::Linear { dim } => {
                if n != *dim {
                    return Err(Error::ShapeMismatch {
                        op: "linear forward",
                        left: shape.clone(),
                        right: vec![*dim],
                    });
                }
                tape.linear(h, params[0], params[1])?
            }
            Architecture::Dncnn1d {
                depth,
                activation,
                trace_len,
                ..
            } => {
                if n % trace_len != 0 {
                    return Err(Error::ShapeMismatch {
                        op: "dncnn forward",
                        left: shape.clone(),
                        right: vec![*trace_len],
                    });
                }
                let traces = rows * n / trace_len;
                let mut h = tape.reshape(h, &[traces, 1, *trace_len])?;
                for l in 0..*depth {
                    h = tape.conv1d(h, params[2 * l], Some(params[2 * l + 1]))?;
                    if l + 1 < *depth {
                        h = activate(tape, h, *activation);
                    }
                }
                tape.reshape(h, &[rows, n])?
            }
        };
        let out = match self.spec.role {
            NetRole::Gradient => body,
            NetRole::Proximal => tape.add(h, body)?,
        };
        if shape.len() == 1 {
            tape.reshape(out, &[n])
        } else {
            Ok(out)
        }
    }

    /// Evaluates the net outside of any training graph.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv)?;
        Ok(tape.value(out).clone())
    }

    /// `Jᵀu` at `x` for a single input vector.
    pub fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let xv = tape.param(Tensor::vector(x.to_vec()));
        let out = self.forward(&mut tape, &params, xv)?;
        let uv = tape.constant(Tensor::vector(u.to_vec()));
        let prod = tape.mul(out, uv)?;
        let loss = tape.sum(prod);
        let mut grads = tape.backward(loss)?;
        Ok(grads.take(xv))
    }

    /// Lower estimate of the Lipschitz constant of the net on inputs of
    /// dimension `dim`, probing around points drawn from `N(0, scale²I)`.
    ///
    /// Each probe contributes the secant ratio along a random direction and
    /// along a direction refined by power iteration on `JᵀJ` (Jacobian-vector
    /// products by central differences, vector-Jacobian products by reverse
    /// mode). Probe `i` depends only on `(seed, i)`, so the estimate never
    /// decreases as `probes` grows.
    pub fn lipschitz_estimate(&self, dim: usize, probes: usize, scale: f64, seed: u64) -> Result<f64> {
        const POWER_STEPS: usize = 8;
        let h = 1e-5 * scale.max(1e-3);
        let f = |x: &[f64]| -> Result<Vec<f64>> {
            Ok(self.eval(&Tensor::vector(x.to_vec()))?.into_data())
        };
        let secant = |x: &[f64], d: &[f64], fx: &[f64]| -> Result<f64> {
            let xd: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b).collect();
            let fd = f(&xd)?;
            let num: f64 = fd
                .iter()
                .zip(fx)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok(num / norm(d))
        };
        let mut best = 0.0f64;
        for i in 0..probes {
            let mut r = rng::stream(seed, &[purpose::PROBE, i as u64]);
            let mut x = vec![0.0; dim];
            rng::fill_normal(&mut r, scale, &mut x);
            let fx = f(&x)?;

            let mut d = vec![0.0; dim];
            rng::fill_normal(&mut r, h, &mut d);
            best = best.max(secant(&x, &d, &fx)?);

            let mut v = vec![0.0; dim];
            rng::fill_normal(&mut r, 1.0, &mut v);
            for _ in 0..POWER_STEPS {
                let nv = norm(&v);
                if nv == 0.0 {
                    break;
                }
                v.iter_mut().for_each(|a| *a /= nv);
                let plus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
                let minus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
                let (fp, fm) = (f(&plus)?, f(&minus)?);
                let jv: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                v = self.vjp(&x, &jv)?;
            }
            let nv = norm(&v);
            if nv > 0.0 {
                let d: Vec<f64> = v.iter().map(|a| h * a / nv).collect();
                best = best.max(secant(&x, &d, &fx)?);
            }
        }
        Ok(best)
    }

    /// Quadratic potential `r(x) = ½xᵀWx + bᵀx` for linear nets, whose
    /// gradient is the net itself when `W` is symmetric.
    pub fn potential(&self, x: &[f64]) -> Option<f64> {
        match &self.spec.architecture {
            Architecture::Linear { dim } if self.spec.role == NetRole::Gradient => {
                let w = self.params[0].data();
                let b = self.params[1].data();
                let wx: Vec<f64> = (0..*dim).map(|i| dot(&w[i * dim..(i + 1) * dim], x)).collect();
                Some(0.5 * dot(x, &wx) + dot(b, x))
            }
            _ => None,
        }
    }
}

fn activate(tape: &mut Tape, h: Var, activation: Activation) -> Var {
    match activation {
        Activation::Tanh => tape.tanh(h),
        Activation::Relu => tape.relu(h),
    }
}
