//! A minimal feed-forward network (dense, 2-D convolution, element-wise
//! activations, flatten, softmax cross-entropy head) with per-sample
//! backpropagation.
//!
//! Every trainable layer exposes its weight as a matrix:
//!
//! - dense `m → n`: `W` is `m × n` and `y = Wᵀx + b` (rows are input units);
//! - conv `m → n` with a `k × k` kernel: the kernel `n × m × k × k` is kept
//!   flattened as `W̃` (`n × m·k²`) and each output pixel is `W̃ · patch + b`
//!   (rows are output channels).
//!
//! Per-sample weight gradients are returned in factored form, `Σ_p a_p b_pᵀ`
//! with one term per output position (a single term for dense layers), which
//! is what makes per-sample clipping affordable on a CPU.

pub mod checkpoint;
mod conv;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
use conv::ConvGeometry;
pub use conv::{flatten_conv_weight, unflatten_conv_weight, Tensor4};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Activation {
        function: Activation,
    },
    Flatten,
    SoftmaxCrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Flat {
        size: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat { size } => size,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

/// Weight and bias of one trainable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    name: String,
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    params: Option<Params>,
}

impl Layer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    pub fn params(&self) -> Option<&Params> {
        self.params.as_ref()
    }

    pub fn is_trainable(&self) -> bool {
        self.params.is_some()
    }

    /// Width of one input unit in weight-matrix columns: `k²` for conv
    /// (columns group by input channel), 1 for dense.
    pub fn kernel_area(&self) -> usize {
        match self.spec {
            LayerSpec::Conv2d { kernel, .. } => kernel * kernel,
            _ => 1,
        }
    }

    fn geometry(&self) -> Option<ConvGeometry> {
        match (self.spec, self.input) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Shape::Image { height, width, .. },
            ) => Some(ConvGeometry {
                channels: in_channels,
                height,
                width,
                kernel,
                stride,
                padding,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
}

/// Per-sample weight gradients of one layer, `G_s = Σ_p left_s[p]ᵀ right_s[p]`.
#[derive(Clone, Debug)]
pub enum SampleFactors {
    /// One rank-one term per sample: `G_s = left.row(s) ⊗ right.row(s)`.
    Outer { left: Matrix, right: Matrix },
    /// `G_s = left[s]ᵀ · right[s]`, one row per output position.
    Unfolded {
        left: Vec<Matrix>,
        right: Vec<Matrix>,
    },
}

impl SampleFactors {
    pub fn batch_size(&self) -> usize {
        match self {
            SampleFactors::Outer { left, .. } => left.rows(),
            SampleFactors::Unfolded { left, .. } => left.len(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            SampleFactors::Outer { left, right } => (left.cols(), right.cols()),
            SampleFactors::Unfolded { left, right } => (left[0].cols(), right[0].cols()),
        }
    }

    /// Materialised gradient of sample `s`.
    pub fn sample(&self, s: usize) -> Matrix {
        match self {
            SampleFactors::Outer { left, right } => {
                let mut g = Matrix::zeros(left.cols(), right.cols());
                g.add_outer(left.row(s), right.row(s), 1.0);
                g
            }
            SampleFactors::Unfolded { left, right } => left[s]
                .t_matmul(&right[s])
                .expect("factor shapes fixed by backward"),
        }
    }

    /// Gradient of the summed loss over the batch, computed by one batched
    /// contraction rather than by adding materialised samples.
    pub fn sum(&self) -> Matrix {
        match self {
            SampleFactors::Outer { left, right } => left
                .t_matmul(right)
                .expect("factor shapes fixed by backward"),
            SampleFactors::Unfolded { left, right } => {
                let (m, n) = self.shape();
                let mut acc = Matrix::zeros(m, n);
                for (l, r) in left.iter().zip(right) {
                    acc.add_scaled(&l.t_matmul(r).expect("shapes"), 1.0)
                        .expect("shapes");
                }
                acc
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    /// Index of the layer inside the network.
    pub layer: usize,
    pub weight: SampleFactors,
    /// `batch × outputs`, row `s` is the bias gradient of sample `s`.
    pub bias: Matrix,
}

#[derive(Clone, Debug)]
pub struct PerSampleGrads {
    pub batch: usize,
    /// One entry per trainable layer, in network order.
    pub layers: Vec<LayerGrads>,
    /// Cross-entropy loss of each sample.
    pub losses: Vec<f64>,
}

impl PerSampleGrads {
    /// Materialised per-sample gradients, `[sample][layer] -> (weight, bias)`.
    pub fn materialize(&self, s: usize) -> Vec<(Matrix, Vec<f64>)> {
        self.layers
            .iter()
            .map(|g| (g.weight.sample(s), g.bias.row(s).to_vec()))
            .collect()
    }

    /// Gradient of the summed batch loss, per trainable layer.
    pub fn summed(&self) -> Vec<(Matrix, Vec<f64>)> {
        self.layers
            .iter()
            .map(|g| {
                let ones = vec![1.0; self.batch];
                (g.weight.sum(), g.bias.t_mul_vec(&ones))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
enum Cache {
    Dense { input: Matrix },
    Conv { patches: Vec<Matrix> },
    Activation { output: Matrix },
    Passthrough,
}

/// Logits plus everything backpropagation needs.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Matrix,
    caches: Vec<Cache>,
}

impl Network {
    /// Builds and initialises a network. Dense weights are drawn from
    /// `U(-1/√m, 1/√m)`, conv kernels from `N(0, 2/(m·k²))`, biases start at 0.
    pub fn new(input: Shape, specs: &[LayerSpec], rng: &mut RngState) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        let (mut n_dense, mut n_conv) = (0, 0);
        for (idx, spec) in specs.iter().enumerate() {
            let (output, name, params) = match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let Shape::Flat { size } = shape else {
                        return Err(Error::Config(format!(
                            "layer {idx}: dense layer needs a flat input, got {shape:?}"
                        )));
                    };
                    if size != inputs {
                        return Err(Error::Config(format!(
                            "layer {idx}: dense expects {inputs} inputs, previous layer gives {size}"
                        )));
                    }
                    n_dense += 1;
                    let bound = 1.0 / (inputs as f64).sqrt();
                    let weight = Matrix::from_fn(inputs, outputs, |_, _| {
                        bound * (2.0 * rng.uniform() - 1.0)
                    });
                    (
                        Shape::Flat { size: outputs },
                        format!("fc{n_dense}"),
                        Some(Params {
                            weight,
                            bias: vec![0.0; outputs],
                        }),
                    )
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Shape::Image {
                        channels,
                        height,
                        width,
                    } = shape
                    else {
                        return Err(Error::Config(format!(
                            "layer {idx}: conv2d needs an image input, got {shape:?}"
                        )));
                    };
                    if channels != in_channels || kernel == 0 || stride == 0 {
                        return Err(Error::Config(format!(
                            "layer {idx}: conv2d expects {in_channels} channels (kernel {kernel}, stride {stride}), input has {channels}"
                        )));
                    }
                    if height + 2 * padding < kernel || width + 2 * padding < kernel {
                        return Err(Error::Config(format!(
                            "layer {idx}: kernel {kernel} larger than padded {height}x{width} input"
                        )));
                    }
                    let geo = ConvGeometry {
                        channels,
                        height,
                        width,
                        kernel,
                        stride,
                        padding,
                    };
                    n_conv += 1;
                    let std = (2.0 / geo.patch_len() as f64).sqrt();
                    let weight = Matrix::from_fn(out_channels, geo.patch_len(), |_, _| {
                        std * rng.standard_normal()
                    });
                    (
                        Shape::Image {
                            channels: out_channels,
                            height: geo.out_height(),
                            width: geo.out_width(),
                        },
                        format!("conv{n_conv}"),
                        Some(Params {
                            weight,
                            bias: vec![0.0; out_channels],
                        }),
                    )
                }
                LayerSpec::Activation { function } => {
                    let name = match function {
                        Activation::Relu => "relu",
                        Activation::Tanh => "tanh",
                    };
                    (shape, format!("{name}{idx}"), None)
                }
                LayerSpec::Flatten => (
                    Shape::Flat { size: shape.size() },
                    format!("flatten{idx}"),
                    None,
                ),
                LayerSpec::SoftmaxCrossEntropy => {
                    if idx + 1 != specs.len() {
                        return Err(Error::Config(
                            "softmax cross-entropy head must be the last layer".into(),
                        ));
                    }
                    if !matches!(shape, Shape::Flat { .. }) {
                        return Err(Error::Config("loss head needs flat logits".into()));
                    }
                    (shape, "head".to_string(), None)
                }
            };
            layers.push(Layer {
                name,
                spec: *spec,
                input: shape,
                output,
                params,
            });
            shape = output;
        }
        if !matches!(specs.last(), Some(LayerSpec::SoftmaxCrossEntropy)) {
            return Err(Error::Config(
                "network must end with a softmax cross-entropy head".into(),
            ));
        }
        if !layers.iter().any(Layer::is_trainable) {
            return Err(Error::Config("network has no trainable layer".into()));
        }
        Ok(Self { input, layers })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output.size())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Indices of layers that carry parameters, in network order.
    pub fn trainable_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_trainable())
            .collect()
    }

    /// Index of the classification layer (the last trainable one).
    pub fn head_layer(&self) -> usize {
        *self
            .trainable_layers()
            .last()
            .expect("constructor guarantees a trainable layer")
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn params(&self, layer: usize) -> &Params {
        self.layers[layer]
            .params
            .as_ref()
            .expect("params requested for a parameter-free layer")
    }

    pub fn params_mut(&mut self, layer: usize) -> &mut Params {
        self.layers[layer]
            .params
            .as_mut()
            .expect("params requested for a parameter-free layer")
    }

    pub(crate) fn set_params(&mut self, layer: usize, params: Params) -> Result<()> {
        let slot = self.layers[layer]
            .params
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} has no parameters")))?;
        if slot.weight.shape() != params.weight.shape() || slot.bias.len() != params.bias.len() {
            return Err(Error::shape(
                "set_params",
                format!(
                    "layer {layer}: expected {:?}+{}, got {:?}+{}",
                    slot.weight.shape(),
                    slot.bias.len(),
                    params.weight.shape(),
                    params.bias.len()
                ),
            ));
        }
        *slot = params;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .all(|p| p.weight.is_finite() && p.bias.iter().all(|b| b.is_finite()))
    }

    /// Forward pass over a `batch × input_size` matrix.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        if x.cols() != self.input.size() {
            return Err(Error::shape(
                "forward",
                format!(
                    "network takes {} features per sample, batch has {}",
                    self.input.size(),
                    x.cols()
                ),
            ));
        }
        let batch = x.rows();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            match layer.spec {
                LayerSpec::Dense { .. } => {
                    let p = layer.params.as_ref().expect("dense has params");
                    let mut y = h.matmul(&p.weight)?;
                    for s in 0..batch {
                        for (v, b) in y.row_mut(s).iter_mut().zip(&p.bias) {
                            *v += b;
                        }
                    }
                    caches.push(Cache::Dense { input: h });
                    h = y;
                }
                LayerSpec::Conv2d { .. } => {
                    let p = layer.params.as_ref().expect("conv has params");
                    let geo = layer.geometry().expect("conv geometry");
                    let positions = geo.positions();
                    let mut y = Matrix::zeros(batch, layer.output.size());
                    let mut patches = Vec::with_capacity(batch);
                    for s in 0..batch {
                        let cols = geo.im2col(h.row(s));
                        let out = cols.matmul_t(&p.weight)?;
                        let row = y.row_mut(s);
                        for pos in 0..positions {
                            for (o, &b) in p.bias.iter().enumerate() {
                                row[o * positions + pos] = out.get(pos, o) + b;
                            }
                        }
                        patches.push(cols);
                    }
                    caches.push(Cache::Conv { patches });
                    h = y;
                }
                LayerSpec::Activation { function } => {
                    h = match function {
                        Activation::Relu => h.map(|v| v.max(0.0)),
                        Activation::Tanh => h.map(f64::tanh),
                    };
                    caches.push(Cache::Activation { output: h.clone() });
                }
                LayerSpec::Flatten | LayerSpec::SoftmaxCrossEntropy => {
                    caches.push(Cache::Passthrough)
                }
            }
        }
        Ok(ForwardPass { logits: h, caches })
    }

    /// Per-sample cross-entropy losses.
    pub fn losses(&self, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        let pass = self.forward(x)?;
        check_labels(&pass.logits, labels)?;
        Ok((0..x.rows())
            .map(|s| softmax_xent(pass.logits.row(s), labels[s]).0)
            .collect())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let pass = self.forward(x)?;
        Ok((0..x.rows()).map(|s| argmax(pass.logits.row(s))).collect())
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if x.rows() == 0 {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / x.rows() as f64)
    }

    /// `(mean loss, accuracy)` from one forward pass.
    pub fn evaluate(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
        if x.rows() == 0 {
            return Ok((0.0, 0.0));
        }
        let pass = self.forward(x)?;
        check_labels(&pass.logits, labels)?;
        let (mut loss, mut hits) = (0.0, 0usize);
        for (s, &y) in labels.iter().enumerate() {
            let z = pass.logits.row(s);
            loss += softmax_xent(z, y).0;
            hits += usize::from(argmax(z) == y);
        }
        let n = x.rows() as f64;
        Ok((loss / n, hits as f64 / n))
    }

    /// Backpropagates the per-sample losses of a cached forward pass.
    pub fn backward(&self, pass: &ForwardPass, labels: &[usize]) -> Result<PerSampleGrads> {
        check_labels(&pass.logits, labels)?;
        let batch = pass.logits.rows();
        let mut losses = Vec::with_capacity(batch);
        let mut delta = Matrix::zeros(batch, pass.logits.cols());
        for s in 0..batch {
            let (loss, grad) = softmax_xent(pass.logits.row(s), labels[s]);
            losses.push(loss);
            delta.row_mut(s).copy_from_slice(&grad);
        }

        let first_trainable = self.trainable_layers()[0];
        let mut grads = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let needs_input_grad = idx > first_trainable;
            match (&layer.spec, &pass.caches[idx]) {
                (LayerSpec::Dense { .. }, Cache::Dense { input }) => {
                    let p = layer.params.as_ref().expect("dense has params");
                    let next = if needs_input_grad {
                        Some(delta.matmul_t(&p.weight)?)
                    } else {
                        None
                    };
                    grads.push(LayerGrads {
                        layer: idx,
                        weight: SampleFactors::Outer {
                            left: input.clone(),
                            right: delta.clone(),
                        },
                        bias: delta,
                    });
                    delta = next.unwrap_or_else(|| Matrix::zeros(0, 0));
                }
                (LayerSpec::Conv2d { out_channels, .. }, Cache::Conv { patches }) => {
                    let p = layer.params.as_ref().expect("conv has params");
                    let geo = layer.geometry().expect("conv geometry");
                    let positions = geo.positions();
                    let n = *out_channels;
                    let mut lefts = Vec::with_capacity(batch);
                    let mut bias = Matrix::zeros(batch, n);
                    let mut next =
                        needs_input_grad.then(|| Matrix::zeros(batch, layer.input.size()));
                    for s in 0..batch {
                        let row = delta.row(s);
                        let d = Matrix::from_fn(positions, n, |pos, o| row[o * positions + pos]);
                        for o in 0..n {
                            bias.set(s, o, (0..positions).map(|pos| d.get(pos, o)).sum());
                        }
                        if let Some(next) = next.as_mut() {
                            let dpatch = d.matmul(&p.weight)?;
                            geo.col2im(&dpatch, next.row_mut(s));
                        }
                        lefts.push(d);
                    }
                    grads.push(LayerGrads {
                        layer: idx,
                        weight: SampleFactors::Unfolded {
                            left: lefts,
                            right: patches.clone(),
                        },
                        bias,
                    });
                    delta = next.unwrap_or_else(|| Matrix::zeros(0, 0));
                }
                (LayerSpec::Activation { function }, Cache::Activation { output }) => {
                    if idx < first_trainable {
                        continue;
                    }
                    let d = delta.as_mut_slice();
                    for (g, &y) in d.iter_mut().zip(output.as_slice()) {
                        *g *= match function {
                            Activation::Relu => {
                                if y > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => 1.0 - y * y,
                        };
                    }
                }
                (LayerSpec::Flatten | LayerSpec::SoftmaxCrossEntropy, Cache::Passthrough) => {}
                _ => unreachable!("cache kind always matches layer kind"),
            }
        }
        grads.reverse();
        Ok(PerSampleGrads {
            batch,
            layers: grads,
            losses,
        })
    }

    pub fn per_sample_gradients(&self, x: &Matrix, labels: &[usize]) -> Result<PerSampleGrads> {
        let pass = self.forward(x)?;
        self.backward(&pass, labels)
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "labels",
            format!("{} labels for {} samples", labels.len(), logits.rows()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Loss `logsumexp(z) − z_y` and its gradient `softmax(z) − e_y`.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Named network families used by the experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Dense layers with the given hidden widths; no hidden layer gives
    /// multinomial logistic regression.
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// `3×3`, stride-2, padding-1 conv layers with the given channel counts,
    /// then a dense classifier.
    Cnn {
        channels: Vec<usize>,
        activation: Activation,
    },
}

impl Architecture {
    pub fn build(&self, input: Shape, classes: usize, rng: &mut RngState) -> Result<Network> {
        let mut specs = Vec::new();
        match self {
            Architecture::Mlp { hidden, activation } => {
                let mut width = input.size();
                if matches!(input, Shape::Image { .. }) {
                    specs.push(LayerSpec::Flatten);
                }
                for &h in hidden {
                    specs.push(LayerSpec::Dense {
                        inputs: width,
                        outputs: h,
                    });
                    specs.push(LayerSpec::Activation {
                        function: *activation,
                    });
                    width = h;
                }
                specs.push(LayerSpec::Dense {
                    inputs: width,
                    outputs: classes,
                });
            }
            Architecture::Cnn {
                channels,
                activation,
            } => {
                let Shape::Image {
                    channels: c0,
                    mut height,
                    mut width,
                } = input
                else {
                    return Err(Error::Config("cnn architecture needs image input".into()));
                };
                let mut c = c0;
                for &out in channels {
                    specs.push(LayerSpec::Conv2d {
                        in_channels: c,
                        out_channels: out,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    });
                    specs.push(LayerSpec::Activation {
                        function: *activation,
                    });
                    height = (height + 2 - 3) / 2 + 1;
                    width = (width + 2 - 3) / 2 + 1;
                    c = out;
                }
                specs.push(LayerSpec::Flatten);
                specs.push(LayerSpec::Dense {
                    inputs: c * height * width,
                    outputs: classes,
                });
            }
        }
        specs.push(LayerSpec::SoftmaxCrossEntropy);
        Network::new(input, &specs, rng)
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    /// `mlp:128-64`, `mlp:` (logistic regression), `cnn:8-16`; an optional
    /// `/tanh` suffix selects the activation.
    fn from_str(s: &str) -> Result<Self> {
        let (body, activation) = match s.split_once('/') {
            Some((b, a)) => (b, a.parse()?),
            None => (s, Activation::Relu),
        };
        let (kind, dims) = body
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("architecture `{s}` must look like mlp:128")))?;
        let dims: Vec<usize> = dims
            .split('-')
            .filter(|d| !d.is_empty())
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Config(format!("bad layer width `{d}` in `{s}`")))
            })
            .collect::<Result<_>>()?;
        match kind {
            "mlp" => Ok(Architecture::Mlp {
                hidden: dims,
                activation,
            }),
            "cnn" => Ok(Architecture::Cnn {
                channels: dims,
                activation,
            }),
            other => Err(Error::Config(format!(
                "unknown architecture kind `{other}`"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn mlp(rng: &mut RngState) -> Network {
        Network::new(
            Shape::Flat { size: 4 },
            &[
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 5,
                },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::Dense {
                    inputs: 5,
                    outputs: 3,
                },
                LayerSpec::SoftmaxCrossEntropy,
            ],
            rng,
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_layer() {
        let mut net = Network::new(
            Shape::Flat { size: 2 },
            &[
                LayerSpec::Dense {
                    inputs: 2,
                    outputs: 2,
                },
                LayerSpec::SoftmaxCrossEntropy,
            ],
            &mut RngState::new(0),
        )
        .unwrap();
        net.params_mut(0).weight = Matrix::identity(2);
        let x = Matrix::from_rows(&[&[1.0, 2.0]]).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.logits.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn scalar_kernel_doubles_image() {
        let mut net = Network::new(
            Shape::Image {
                channels: 1,
                height: 3,
                width: 3,
            },
            &[
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Flatten,
                LayerSpec::SoftmaxCrossEntropy,
            ],
            &mut RngState::new(0),
        )
        .unwrap();
        net.params_mut(0).weight = Matrix::from_rows(&[&[2.0]]).unwrap();
        let img: Vec<f64> = (0..9).map(f64::from).collect();
        let x = Matrix::from_vec(1, 9, img.clone()).unwrap();
        let out = net.forward(&x).unwrap();
        let doubled: Vec<f64> = img.iter().map(|v| 2.0 * v).collect();
        assert_eq!(out.logits.row(0), &doubled[..]);
    }

    #[test]
    fn mlp_matches_per_neuron_loop() {
        for seed in 0..5 {
            let mut rng = RngState::new(seed);
            let net = mlp(&mut rng);
            let x = gaussian_matrix(3, 4, 1.0, &mut rng).unwrap();
            let out = net.forward(&x).unwrap();
            let p1 = net.params(0);
            let p2 = net.params(2);
            for s in 0..3 {
                let mut hidden = [0.0; 5];
                for (j, h) in hidden.iter_mut().enumerate() {
                    let mut acc = p1.bias[j];
                    for i in 0..4 {
                        acc += p1.weight.get(i, j) * x.get(s, i);
                    }
                    *h = acc.tanh();
                }
                for k in 0..3 {
                    let mut acc = p2.bias[k];
                    for (j, h) in hidden.iter().enumerate() {
                        acc += p2.weight.get(j, k) * h;
                    }
                    assert!((acc - out.logits.get(s, k)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn singleton_batch_and_duplicates() {
        let mut rng = RngState::new(11);
        let net = mlp(&mut rng);
        let x = gaussian_matrix(1, 4, 1.0, &mut rng).unwrap();
        let g = net.per_sample_gradients(&x, &[2]).unwrap();
        for ((ws, bs), (wt, bt)) in g.materialize(0).iter().zip(g.summed()) {
            assert_eq!(ws.as_slice(), wt.as_slice());
            assert_eq!(bs, &bt);
        }

        let row: Vec<f64> = x.row(0).to_vec();
        let dup = Matrix::from_vec(2, 4, [row.clone(), row].concat()).unwrap();
        let g = net.per_sample_gradients(&dup, &[1, 1]).unwrap();
        let (a, b) = (g.materialize(0), g.materialize(1));
        for ((wa, ba), (wb, bb)) in a.iter().zip(&b) {
            assert_eq!(wa, wb);
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = RngState::new(0);
        let net = mlp(&mut rng);
        assert!(net.forward(&Matrix::zeros(2, 3)).is_err());
        assert!(net
            .per_sample_gradients(&Matrix::zeros(2, 4), &[0])
            .is_err());
        assert!(net
            .per_sample_gradients(&Matrix::zeros(1, 4), &[7])
            .is_err());
        let bad = Network::new(
            Shape::Flat { size: 3 },
            &[
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 2,
                },
                LayerSpec::SoftmaxCrossEntropy,
            ],
            &mut rng,
        );
        assert!(bad.is_err());
        let no_head = Network::new(
            Shape::Flat { size: 4 },
            &[LayerSpec::Dense {
                inputs: 4,
                outputs: 2,
            }],
            &mut rng,
        );
        assert!(no_head.is_err());
    }

    #[test]
    fn architecture_strings() {
        let a: Architecture = "mlp:128".parse().unwrap();
        assert_eq!(
            a,
            Architecture::Mlp {
                hidden: vec![128],
                activation: Activation::Relu
            }
        );
        let c: Architecture = "cnn:4-8/tanh".parse().unwrap();
        let net = c
            .build(
                Shape::Image {
                    channels: 1,
                    height: 8,
                    width: 8,
                },
                10,
                &mut RngState::new(0),
            )
            .unwrap();
        assert_eq!(net.trainable_layers().len(), 3);
        assert_eq!(net.classes(), 10);
        assert!("rnn:3".parse::<Architecture>().is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let t = Tensor4::new([1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(flatten_conv_weight(&t).as_slice(), &[5.0]);
        let mut rng = RngState::new(4);
        let t = Tensor4::from_fn([4, 3, 2, 2], |_| rng.standard_normal());
        let back = unflatten_conv_weight(&flatten_conv_weight(&t), 3, 2).unwrap();
        assert_eq!(back, t);
        let w = flatten_conv_weight(&t);
        assert_eq!(w.get(1, (2 * 2 + 1) * 2), t.get([1, 2, 1, 0]));
    }
}
