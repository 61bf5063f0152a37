//! Classifier architectures, flat parameter vectors, likelihood and prior.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// conv(6@5x5, pad 2) - pool 2 - conv(16@5x5) - pool 2 - fc120 - fc84 - fcK.
    LeNet5,
    Mlp,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::LeNet5 => "lenet5",
            Architecture::Mlp => "mlp",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet5" => Ok(Architecture::LeNet5),
            "mlp" => Ok(Architecture::Mlp),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { in_c: usize, out_c: usize, kernel: usize, pad: usize },
    MaxPool(usize),
    Flatten,
    Dense { inputs: usize, outputs: usize },
    Relu,
    Dropout(f64),
}

/// Immutable description of a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Per-sample input shape, e.g. `[1, 28, 28]` or `[2]`.
    pub input_shape: Vec<usize>,
    /// Hidden widths of the MLP; ignored for LeNet-5.
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Dropout rate after every hidden fully connected layer.
    pub dropout: f64,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp,
            input_shape: vec![input_dim],
            hidden: hidden.to_vec(),
            classes,
            dropout: 0.0,
        }
    }

    pub fn lenet5(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::LeNet5,
            input_shape: vec![channels, height, width],
            hidden: Vec::new(),
            classes,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.arch == Architecture::LeNet5 {
            let s = &self.input_shape;
            if s.len() != 3 || (s[1] / 2) < 5 || (s[2] / 2) < 5 {
                return Err(Error::Config(format!("lenet5 needs [C, H, W] of at least 10x10, got {s:?}")));
            }
        }
        Ok(())
    }

    /// The layer sequence this spec expands to.
    pub fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        let dropout = |layers: &mut Vec<Layer>| {
            if self.dropout > 0.0 {
                layers.push(Layer::Dropout(self.dropout));
            }
        };
        match self.arch {
            Architecture::Mlp => {
                layers.push(Layer::Flatten);
                let mut width = self.input_len();
                for &h in &self.hidden {
                    layers.push(Layer::Dense { inputs: width, outputs: h });
                    layers.push(Layer::Relu);
                    dropout(&mut layers);
                    width = h;
                }
                layers.push(Layer::Dense { inputs: width, outputs: self.classes });
            }
            Architecture::LeNet5 => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                layers.extend([
                    Layer::Conv { in_c: c, out_c: 6, kernel: 5, pad: 2 },
                    Layer::Relu,
                    Layer::MaxPool(2),
                    Layer::Conv { in_c: 6, out_c: 16, kernel: 5, pad: 0 },
                    Layer::Relu,
                    Layer::MaxPool(2),
                    Layer::Flatten,
                ]);
                let flat = 16 * ((h / 2 - 4) / 2) * ((w / 2 - 4) / 2);
                layers.push(Layer::Dense { inputs: flat, outputs: 120 });
                layers.push(Layer::Relu);
                dropout(&mut layers);
                layers.push(Layer::Dense { inputs: 120, outputs: 84 });
                layers.push(Layer::Relu);
                dropout(&mut layers);
                layers.push(Layer::Dense { inputs: 84, outputs: self.classes });
            }
        }
        layers
    }

    pub fn layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, fan: (usize, usize)| {
            let len = shape.iter().product::<usize>();
            entries.push(LayoutEntry { name, offset, shape, fan });
            offset += len;
        };
        for (i, layer) in self.layers().iter().enumerate() {
            match *layer {
                Layer::Conv { in_c, out_c, kernel, .. } => {
                    let fan = (in_c * kernel * kernel, out_c * kernel * kernel);
                    push(format!("conv{i}.weight"), vec![out_c, in_c, kernel, kernel], fan);
                    push(format!("conv{i}.bias"), vec![out_c], (0, 0));
                }
                Layer::Dense { inputs, outputs } => {
                    push(format!("dense{i}.weight"), vec![inputs, outputs], (inputs, outputs));
                    push(format!("dense{i}.bias"), vec![outputs], (0, 0));
                }
                _ => {}
            }
        }
        ParamLayout { entries, len: offset }
    }

    /// Widths of the activations that dropout masks apply to, in order.
    pub fn dropout_widths(&self) -> Vec<usize> {
        let mut widths = Vec::new();
        let mut last = 0;
        for layer in self.layers() {
            match layer {
                Layer::Dense { outputs, .. } => last = outputs,
                Layer::Dropout(_) => widths.push(last),
                _ => {}
            }
        }
        widths
    }

    /// Compact textual descriptor, e.g. `mlp;784;256;10;0` (arch; input shape;
    /// hidden widths; classes; dropout). Round-trips through [`ModelSpec::from_descriptor`].
    pub fn descriptor(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        format!(
            "{};{};{};{};{}",
            self.arch,
            join(&self.input_shape),
            join(&self.hidden),
            self.classes,
            self.dropout
        )
    }

    pub fn from_descriptor(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed model descriptor `{s}`"));
        let parts: Vec<&str> = s.split(';').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let dims = |p: &str| -> Result<Vec<usize>> {
            if p.is_empty() {
                return Ok(Vec::new());
            }
            p.split('x').map(|d| d.parse().map_err(|_| bad())).collect()
        };
        let spec = Self {
            arch: parts[0].parse()?,
            input_shape: dims(parts[1])?,
            hidden: dims(parts[2])?,
            classes: parts[3].parse().map_err(|_| bad())?,
            dropout: parts[4].parse().map_err(|_| bad())?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform fan-in/fan-out initialisation; biases start at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector {
        let layout = self.layout();
        let mut values = vec![0.0; layout.len];
        for e in &layout.entries {
            let (fan_in, fan_out) = e.fan;
            if fan_in == 0 {
                continue;
            }
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for v in &mut values[e.offset..e.offset + e.len()] {
                *v = dist.sample(rng);
            }
        }
        ParameterVector(values)
    }

    fn check_params(&self, theta: &[f64]) -> Result<ParamLayout> {
        let layout = self.layout();
        if theta.len() != layout.len {
            return Err(Error::Layout {
                expected: layout.len,
                found: theta.len(),
            });
        }
        Ok(layout)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() < 2 || s[1..].iter().product::<usize>() != self.input_len() {
            return Err(Error::Tensor(crate::error::TensorError::Shape {
                op: "input",
                detail: format!("expected [batch, {:?}], got {s:?}", self.input_shape),
            }));
        }
        Ok(s[0])
    }

    /// Records the network on `tape` and returns the logits node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        masks: Option<&DropoutMasks>,
    ) -> Result<Var> {
        let batch = tape.value(x).shape()[0];
        let mut h = x;
        if self.arch == Architecture::LeNet5 {
            let mut shape = vec![batch];
            shape.extend(&self.input_shape);
            h = tape.reshape(h, &shape)?;
        }
        let mut p = params.iter();
        let mut mask_idx = 0;
        for layer in self.layers() {
            h = match layer {
                Layer::Conv { pad, .. } => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    tape.conv2d(h, w, b, pad)?
                }
                Layer::MaxPool(size) => tape.max_pool2d(h, size)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::Dense { .. } => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    let z = tape.matmul(h, w)?;
                    tape.add_row(z, b)?
                }
                Layer::Relu => tape.relu(h),
                Layer::Dropout(_) => {
                    let Some(m) = masks else { continue };
                    let mask = m.masks.get(mask_idx).ok_or_else(|| {
                        Error::Argument(format!("missing dropout mask {mask_idx}"))
                    })?;
                    mask_idx += 1;
                    tape.mask(h, mask)?
                }
            };
        }
        Ok(h)
    }

    /// Splits `theta` into per-layer leaves on `tape`.
    pub fn param_leaves(&self, tape: &mut Tape, theta: &[f64]) -> Result<Vec<Var>> {
        let layout = self.check_params(theta)?;
        Ok(layout
            .unflatten(theta)
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    fan: (usize, usize),
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps slices of a flat parameter vector to layer tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<LayoutEntry>,
    pub len: usize,
}

impl ParamLayout {
    pub fn unflatten(&self, theta: &[f64]) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| {
                Tensor::new(e.shape.clone(), theta[e.offset..e.offset + e.len()].to_vec())
                    .expect("layout entry shape")
            })
            .collect()
    }

    pub fn flatten(&self, tensors: &[Tensor]) -> Result<ParameterVector> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Layout {
                expected: self.entries.len(),
                found: tensors.len(),
            });
        }
        let mut out = Vec::with_capacity(self.len);
        for (e, t) in self.entries.iter().zip(tensors) {
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Layout {
                    expected: e.len(),
                    found: t.len(),
                });
            }
            out.extend_from_slice(t.data());
        }
        Ok(ParameterVector(out))
    }
}

/// Flattened network weights; the unit of posterior sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Inverted-dropout masks: entries are 0 or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub masks: Vec<Tensor>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(spec: &ModelSpec, batch: usize, rng: &mut R) -> Self {
        let keep = 1.0 - spec.dropout;
        let bern = Bernoulli::new(keep).expect("keep probability in (0, 1]");
        let masks = spec
            .dropout_widths()
            .into_iter()
            .map(|w| {
                let data = (0..batch * w)
                    .map(|_| if bern.sample(rng) { 1.0 / keep } else { 0.0 })
                    .collect();
                Tensor::new(vec![batch, w], data).expect("mask shape")
            })
            .collect();
        Self { masks }
    }
}

/// Isotropic Gaussian prior over the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub mean: f64,
    pub variance: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { mean: 0.0, variance: 1.0 }
    }
}

impl PriorSpec {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("prior variance must be positive, got {variance}")));
        }
        Ok(Self { mean: 0.0, variance })
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        let sq: f64 = theta.iter().map(|t| (t - self.mean).powi(2)).sum();
        let d = theta.len() as f64;
        -sq / (2.0 * self.variance) - 0.5 * d * (2.0 * std::f64::consts::PI * self.variance).ln()
    }

    /// Adds `grad log p(theta) = -(theta - mean) / variance` into `grad`.
    pub fn add_grad(&self, theta: &[f64], grad: &mut [f64]) {
        for (g, t) in grad.iter_mut().zip(theta) {
            *g -= (t - self.mean) / self.variance;
        }
    }
}

/// Softmax class probabilities, `batch x K`.
pub fn predict(
    spec: &ModelSpec,
    theta: &ParameterVector,
    x: &Tensor,
    masks: Option<&DropoutMasks>,
) -> Result<Tensor> {
    spec.check_params(&theta.0)?;
    spec.check_input(x)?;
    let mut tape = Tape::new();
    let layout = spec.layout();
    let params: Vec<Var> = layout
        .unflatten(&theta.0)
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let input = tape.constant(x.clone());
    let logits = spec.forward(&mut tape, &params, input, masks)?;
    let logp = tape.log_softmax(logits)?;
    let mut probs = tape.value(logp).clone();
    probs.data_mut().iter_mut().for_each(|v| *v = v.exp());
    Ok(probs)
}

fn check_labels(spec: &ModelSpec, labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= spec.classes) {
        Some(&label) => Err(Error::Label {
            label,
            classes: spec.classes,
        }),
        None => Ok(()),
    }
}

/// `sum_i log p(y_i | x_i, theta)` over a minibatch.
pub fn log_likelihood(
    spec: &ModelSpec,
    theta: &ParameterVector,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    check_labels(spec, labels)?;
    spec.check_params(&theta.0)?;
    spec.check_input(x)?;
    let mut tape = Tape::new();
    let params: Vec<Var> = spec
        .layout()
        .unflatten(&theta.0)
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let input = tape.constant(x.clone());
    let logits = spec.forward(&mut tape, &params, input, None)?;
    let lp = tape.log_softmax(logits)?;
    let total = tape.pick_sum(lp, labels)?;
    Ok(tape.value(total).item().expect("scalar"))
}

/// Log-likelihood of a minibatch and its gradient with respect to `theta`,
/// added into `grad`. Dropout is active when `masks` is given.
pub fn log_likelihood_grad(
    spec: &ModelSpec,
    theta: &[f64],
    x: &Tensor,
    labels: &[usize],
    masks: Option<&DropoutMasks>,
    grad: &mut [f64],
) -> Result<f64> {
    check_labels(spec, labels)?;
    spec.check_input(x)?;
    let layout = spec.check_params(theta)?;
    let mut tape = Tape::new();
    let params = spec.param_leaves(&mut tape, theta)?;
    let input = tape.constant(x.clone());
    let logits = spec.forward(&mut tape, &params, input, masks)?;
    let lp = tape.log_softmax(logits)?;
    let total = tape.pick_sum(lp, labels)?;
    tape.backward(total)?;
    for (entry, var) in layout.entries.iter().zip(&params) {
        let g = tape.grad(*var);
        for (dst, src) in grad[entry.offset..entry.offset + entry.len()].iter_mut().zip(g.data()) {
            *dst += src;
        }
    }
    Ok(tape.value(total).item().expect("scalar"))
}
