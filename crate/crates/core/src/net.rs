//! A small convolutional network with exact backpropagation and momentum SGD.
//!
//! Parameters are `f64`. Convolution weights are laid out
//! `[out][in][ky][kx]`, fully-connected weights `[out][in]`; inputs to a
//! fully-connected layer are the flattened channel-major activations of the
//! previous layer. The last layer is always a softmax.
//!
//! Training objective for a batch of `m` samples:
//!
//! ```text
//! L = -(1/m) sum_i ln(max(p_i[y_i], 1e-12)) + (wd/2) |weights|^2
//! ```
//!
//! Biases are not decayed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dates::BinIndex;
use crate::error::{Error, Result};
use crate::ingest::{FeatureMatrix, ImageTensor};

/// Probabilities below this are clamped inside the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn is_learnable(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. }
        )
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let bad = |m: String| Err(Error::ShapeMismatch(m));
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels != input.channels {
                    return bad(format!(
                        "conv expects {in_channels} channels, input has {}",
                        input.channels
                    ));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return bad("conv kernel, stride and channels must be positive".into());
                }
                let (h, w) = (input.height + 2 * padding, input.width + 2 * padding);
                if kernel > h || kernel > w {
                    return bad(format!("kernel {kernel} larger than padded input {h}x{w}"));
                }
                Ok(Shape::new(
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ))
            }
            LayerSpec::FullyConnected { inputs, outputs } => {
                if inputs != input.len() {
                    return bad(format!(
                        "fully connected layer expects {inputs} inputs, got {}",
                        input.len()
                    ));
                }
                if outputs == 0 {
                    return bad("fully connected layer needs at least one output".into());
                }
                Ok(Shape::new(outputs, 1, 1))
            }
            LayerSpec::MaxPool { size, stride } => {
                if size == 0 || stride == 0 {
                    return bad("pool size and stride must be positive".into());
                }
                if size > input.height || size > input.width {
                    return bad(format!(
                        "pool {size} larger than input {}x{}",
                        input.height, input.width
                    ));
                }
                Ok(Shape::new(
                    input.channels,
                    (input.height - size) / stride + 1,
                    (input.width - size) / stride + 1,
                ))
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input),
        }
    }

    fn param_counts(&self) -> (usize, usize, usize) {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                (out_channels * fan_in, out_channels, fan_in)
            }
            LayerSpec::FullyConnected { inputs, outputs } => (inputs * outputs, outputs, inputs),
            _ => (0, 0, 0),
        }
    }

    fn prefix(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "pool",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Channel-major activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    name: String,
    input: Shape,
    output: Shape,
    pub(crate) weights: Vec<f64>,
    pub(crate) biases: Vec<f64>,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Number of analysable units: channels for spatial outputs, neurons
    /// otherwise.
    pub fn n_units(&self) -> usize {
        self.output.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    input: Shape,
    layers: Vec<Layer>,
    rng_seed: u64,
}

/// Per-layer parameter-shaped buffers, used for gradients and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &MicroNet) -> Self {
        Gradients {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    /// Same order as [`MicroNet::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn matches(&self, net: &MicroNet) -> bool {
        self.weights.len() == net.layers.len()
            && self.biases.len() == net.layers.len()
            && net.layers.iter().enumerate().all(|(i, l)| {
                self.weights[i].len() == l.weights.len() && self.biases[i].len() == l.biases.len()
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub n_iterations: usize,
    /// Seed of the minibatch shuffle.
    pub seed: u64,
    /// Update only the last learnable layer.
    pub head_only: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            batch_size: 50,
            momentum: 0.9,
            weight_decay: 0.0005,
            learning_rate: 0.00001,
            n_iterations: 1000,
            seed: 0,
            head_only: false,
        }
    }
}

impl SgdConfig {
    /// A learning rate of exactly zero is accepted (it freezes the net).
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && (0.0..1.0).contains(&self.momentum)
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad sgd config {self:?}")))
        }
    }
}

/// Two conv(3x3, pad 1) + relu + 2x2 max-pool blocks, then `fc1`, `fc2`
/// (each followed by a relu) and the classification head `fc3`.
pub fn default_architecture(input: Shape, n_classes: usize) -> Vec<LayerSpec> {
    architecture(input, n_classes, 8, 16, 64, 32)
}

/// The default layout with explicit widths.
pub fn architecture(
    input: Shape,
    n_classes: usize,
    conv1: usize,
    conv2: usize,
    fc1: usize,
    fc2: usize,
) -> Vec<LayerSpec> {
    let conv = |i, o| LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let pool = LayerSpec::MaxPool { size: 2, stride: 2 };
    let flat = conv2 * (input.height / 4) * (input.width / 4);
    vec![
        conv(input.channels, conv1),
        LayerSpec::Relu,
        pool,
        conv(conv1, conv2),
        LayerSpec::Relu,
        pool,
        LayerSpec::FullyConnected {
            inputs: flat,
            outputs: fc1,
        },
        LayerSpec::Relu,
        LayerSpec::FullyConnected {
            inputs: fc1,
            outputs: fc2,
        },
        LayerSpec::Relu,
        LayerSpec::FullyConnected {
            inputs: fc2,
            outputs: n_classes,
        },
        LayerSpec::Softmax,
    ]
}

fn he_init(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (n_w, n_b, fan_in) = spec.param_counts();
    if n_w == 0 {
        return (Vec::new(), Vec::new());
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let weights = (0..n_w).map(|_| normal.sample(rng)).collect();
    (weights, vec![0.0; n_b])
}

fn build_layers(
    input: Shape,
    specs: &[LayerSpec],
) -> Result<Vec<(LayerSpec, String, Shape, Shape)>> {
    match specs.last() {
        Some(LayerSpec::Softmax) => {}
        _ => {
            return Err(Error::ShapeMismatch(
                "network must end with a softmax".into(),
            ))
        }
    }
    if specs[..specs.len() - 1].contains(&LayerSpec::Softmax) {
        return Err(Error::ShapeMismatch(
            "softmax is only allowed as the last layer".into(),
        ));
    }
    if input.is_empty() {
        return Err(Error::ShapeMismatch("empty input shape".into()));
    }
    let mut counters = [0usize; 5];
    let mut shape = input;
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let slot = match spec {
            LayerSpec::Conv { .. } => 0,
            LayerSpec::FullyConnected { .. } => 1,
            LayerSpec::Relu => 2,
            LayerSpec::MaxPool { .. } => 3,
            LayerSpec::Softmax => 4,
        };
        counters[slot] += 1;
        let name = if slot == 4 {
            "softmax".to_string()
        } else {
            format!("{}{}", spec.prefix(), counters[slot])
        };
        let next = spec.output_shape(shape)?;
        out.push((*spec, name, shape, next));
        shape = next;
    }
    Ok(out)
}

impl MicroNet {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, drawn in
    /// layer order from one ChaCha8 stream seeded with `seed`.
    pub fn init(input: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = build_layers(input, specs)?
            .into_iter()
            .map(|(spec, name, input, output)| {
                let (weights, biases) = he_init(&spec, &mut rng);
                Layer {
                    spec,
                    name,
                    input,
                    output,
                    weights,
                    biases,
                }
            })
            .collect();
        Ok(MicroNet {
            input,
            layers,
            rng_seed: seed,
        })
    }

    /// Rebuild a net from stored parameters.
    pub fn from_parts(
        input: Shape,
        specs: &[LayerSpec],
        params: Vec<(Vec<f64>, Vec<f64>)>,
        rng_seed: u64,
    ) -> Result<Self> {
        let built = build_layers(input, specs)?;
        if params.len() != built.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter groups for {} layers",
                params.len(),
                built.len()
            )));
        }
        let mut layers = Vec::with_capacity(built.len());
        for ((spec, name, input, output), (weights, biases)) in built.into_iter().zip(params) {
            let (n_w, n_b, _) = spec.param_counts();
            if weights.len() != n_w || biases.len() != n_b {
                return Err(Error::ShapeMismatch(format!(
                    "parameter count mismatch in {name}"
                )));
            }
            if let Some(index) = weights.iter().chain(&biases).position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { index });
            }
            layers.push(Layer {
                spec,
                name,
                input,
                output,
                weights,
                biases,
            });
        }
        Ok(MicroNet {
            input,
            layers,
            rng_seed,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output.len())
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Index of the last learnable layer, if it is fully connected.
    pub fn head_index(&self) -> Result<usize> {
        match self.layers.iter().rposition(|l| l.spec.is_learnable()) {
            Some(i) if matches!(self.layers[i].spec, LayerSpec::FullyConnected { .. }) => Ok(i),
            _ => Err(Error::HeadNotFC),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&values[at..at + n]);
            at += n;
            let n = l.biases.len();
            l.biases.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn check_input(&self, img: &ImageTensor) -> Result<()> {
        let s = self.input;
        if img.channels() != s.channels || img.height() != s.height || img.width() != s.width {
            return Err(Error::ShapeMismatch(format!(
                "net expects {}x{}x{} input, image is {}x{}x{}",
                s.height,
                s.width,
                s.channels,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// Output of every layer for one image; the last entry is the
    /// probability vector.
    pub fn trace(&self, img: &ImageTensor) -> Result<Vec<Vec<f64>>> {
        self.check_input(img)?;
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { img.values() } else { &outs[i - 1] };
            outs.push(layer_forward(layer, x));
        }
        Ok(outs)
    }

    /// Class probabilities, one row per image.
    pub fn forward(&self, batch: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        batch
            .par_iter()
            .map(|img| self.trace(img).map(|mut t| t.pop().unwrap_or_default()))
            .collect()
    }

    /// Inputs of the final softmax.
    pub fn logits(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let mut t = self.trace(img)?;
        t.pop();
        Ok(t.pop().unwrap_or_default())
    }

    /// Per-unit activation of a named layer for one image: the value itself
    /// for flat layers, the spatial maximum per channel otherwise.
    pub fn unit_activations(&self, img: &ImageTensor, layer: &str) -> Result<Vec<f64>> {
        let idx = self.layer_index(layer)?;
        let t = self.trace(img)?;
        Ok(channel_max(&t[idx], self.layers[idx].output))
    }

    /// `unit_activations` for a batch, as a feature matrix.
    pub fn features(&self, batch: &[ImageTensor], layer: &str) -> Result<FeatureMatrix> {
        let idx = self.layer_index(layer)?;
        let rows: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|img| {
                self.trace(img)
                    .map(|t| channel_max(&t[idx], self.layers[idx].output))
            })
            .collect::<Result<_>>()?;
        let dim = self.layers[idx].output.channels;
        let values = rows.iter().flatten().map(|&v| v as f32).collect();
        FeatureMatrix::new(batch.len(), dim, values)
    }

    /// Swap the classification head for a freshly initialised one with
    /// `n_classes` outputs. Every other parameter is kept bit-exactly.
    pub fn replace_head(&self, n_classes: usize, seed: u64) -> Result<MicroNet> {
        let head = self.head_index()?;
        let mut specs = self.specs();
        if let LayerSpec::FullyConnected { inputs, .. } = specs[head] {
            specs[head] = LayerSpec::FullyConnected {
                inputs,
                outputs: n_classes,
            };
        }
        let built = build_layers(self.input, &specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = built
            .into_iter()
            .zip(&self.layers)
            .enumerate()
            .map(|(i, ((spec, name, input, output), old))| {
                let (weights, biases) = if i == head {
                    he_init(&spec, &mut rng)
                } else {
                    (old.weights.clone(), old.biases.clone())
                };
                Layer {
                    spec,
                    name,
                    input,
                    output,
                    weights,
                    biases,
                }
            })
            .collect();
        Ok(MicroNet {
            input: self.input,
            layers,
            rng_seed: self.rng_seed,
        })
    }

    fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.weights)
            .map(|w| w * w)
            .sum()
    }
}

fn channel_max(x: &[f64], shape: Shape) -> Vec<f64> {
    let plane = shape.height * shape.width;
    x.chunks(plane)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Output positions `o` with `o * stride + k - pad` inside `[0, len)`.
fn valid_outputs(
    k: usize,
    pad: usize,
    stride: usize,
    len: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visit every convolution tap in weight order. For each output row the
/// callback gets the weight index, the offsets of the first valid output and
/// input pixels, and the number of valid outputs (inputs `stride` apart).
fn for_each_tap<F>(layer: &Layer, kernel: usize, stride: usize, padding: usize, mut f: F)
where
    F: FnMut(usize, usize, usize, usize),
{
    let (i, o) = (layer.input, layer.output);
    let mut widx = 0;
    for oc in 0..o.channels {
        for ic in 0..i.channels {
            for ky in 0..kernel {
                let (ylo, yhi) = valid_outputs(ky, padding, stride, i.height, o.height);
                for kx in 0..kernel {
                    let (xlo, xhi) = valid_outputs(kx, padding, stride, i.width, o.width);
                    if xhi > xlo {
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - padding;
                            let ix = xlo * stride + kx - padding;
                            f(
                                widx,
                                (oc * o.height + oy) * o.width + xlo,
                                (ic * i.height + iy) * i.width + ix,
                                xhi - xlo,
                            );
                        }
                    }
                    widx += 1;
                }
            }
        }
    }
}

fn layer_forward(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let (i, o) = (layer.input, layer.output);
    match layer.spec {
        LayerSpec::Conv {
            kernel,
            stride,
            padding,
            ..
        } => {
            let mut out = vec![0.0; o.len()];
            let plane = o.height * o.width;
            for oc in 0..o.channels {
                out[oc * plane..(oc + 1) * plane].fill(layer.biases[oc]);
            }
            for_each_tap(layer, kernel, stride, padding, |widx, orow, xrow, n| {
                let w = layer.weights[widx];
                let dst = &mut out[orow..orow + n];
                if stride == 1 {
                    for (d, v) in dst.iter_mut().zip(&x[xrow..xrow + n]) {
                        *d += w * v;
                    }
                } else {
                    for (k, d) in dst.iter_mut().enumerate() {
                        *d += w * x[xrow + k * stride];
                    }
                }
            });
            out
        }
        LayerSpec::FullyConnected { inputs, outputs } => (0..outputs)
            .map(|r| {
                let w = &layer.weights[r * inputs..(r + 1) * inputs];
                layer.biases[r] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect(),
        LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        LayerSpec::MaxPool { size, stride } => {
            let mut out = vec![0.0; o.len()];
            for c in 0..o.channels {
                for oy in 0..o.height {
                    for ox in 0..o.width {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..size {
                            let row = (c * i.height + oy * stride + dy) * i.width + ox * stride;
                            for v in &x[row..row + size] {
                                m = m.max(*v);
                            }
                        }
                        out[(c * o.height + oy) * o.width + ox] = m;
                    }
                }
            }
            out
        }
        LayerSpec::Softmax => softmax(x),
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Backpropagate `g` (gradient w.r.t. the layer output) through one layer,
/// accumulating parameter gradients; returns the gradient w.r.t. the input.
fn layer_backward(
    layer: &Layer,
    x: &[f64],
    g: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let (i, o) = (layer.input, layer.output);
    match layer.spec {
        LayerSpec::Conv {
            kernel,
            stride,
            padding,
            ..
        } => {
            let mut dx = vec![0.0; if need_input_grad { i.len() } else { 0 }];
            let plane = o.height * o.width;
            for oc in 0..o.channels {
                db[oc] += g[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
            }
            for_each_tap(layer, kernel, stride, padding, |widx, orow, xrow, n| {
                let w = layer.weights[widx];
                let mut acc = 0.0;
                for (k, gv) in g[orow..orow + n].iter().enumerate() {
                    acc += gv * x[xrow + k * stride];
                    if need_input_grad {
                        dx[xrow + k * stride] += gv * w;
                    }
                }
                dw[widx] += acc;
            });
            dx
        }
        LayerSpec::FullyConnected { inputs, outputs } => {
            let mut dx = vec![0.0; if need_input_grad { inputs } else { 0 }];
            for r in 0..outputs {
                let go = g[r];
                if go == 0.0 {
                    continue;
                }
                db[r] += go;
                let w = &layer.weights[r * inputs..(r + 1) * inputs];
                let dwr = &mut dw[r * inputs..(r + 1) * inputs];
                for k in 0..inputs {
                    dwr[k] += go * x[k];
                }
                if need_input_grad {
                    for k in 0..inputs {
                        dx[k] += go * w[k];
                    }
                }
            }
            dx
        }
        LayerSpec::Relu => x
            .iter()
            .zip(g)
            .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
            .collect(),
        LayerSpec::MaxPool { size, stride } => {
            let mut dx = vec![0.0; i.len()];
            for c in 0..o.channels {
                for oy in 0..o.height {
                    for ox in 0..o.width {
                        // first maximum in row-major window order
                        let mut best = (f64::NEG_INFINITY, 0);
                        for dy in 0..size {
                            let row = (c * i.height + oy * stride + dy) * i.width + ox * stride;
                            for (k, &v) in x.iter().enumerate().skip(row).take(size) {
                                if v > best.0 {
                                    best = (v, k);
                                }
                            }
                        }
                        dx[best.1] += g[(c * o.height + oy) * o.width + ox];
                    }
                }
            }
            dx
        }
        LayerSpec::Softmax => unreachable!("softmax gradient is fused with the loss"),
    }
}

/// Data loss and parameter gradients for one sample.
fn sample_gradients(
    net: &MicroNet,
    img: &ImageTensor,
    label: usize,
    stop_at: usize,
) -> Result<(f64, Gradients)> {
    let trace = net.trace(img)?;
    let n = net.layers.len();
    let probs = &trace[n - 1];
    let p = probs[label];
    let loss = -p.max(LOG_CLAMP).ln();
    let mut grads = Gradients::zeros_like(net);
    // d loss / d logits; zero in the clamped region
    let mut g: Vec<f64> = if p >= LOG_CLAMP {
        probs
            .iter()
            .enumerate()
            .map(|(k, &pk)| if k == label { pk - 1.0 } else { pk })
            .collect()
    } else {
        vec![0.0; probs.len()]
    };
    for li in (stop_at..n - 1).rev() {
        let x = if li == 0 {
            img.values()
        } else {
            &trace[li - 1]
        };
        let need = li > stop_at;
        let (dw, db) = (&mut grads.weights[li], &mut grads.biases[li]);
        g = layer_backward(&net.layers[li], x, &g, dw, db, need);
    }
    Ok((loss, grads))
}

fn check_labels(net: &MicroNet, batch: &[ImageTensor], labels: &[BinIndex]) -> Result<()> {
    if batch.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: batch.len(),
            right: labels.len(),
        });
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = net.n_classes();
    if let Some(bad) = labels.iter().find(|l| l.0 >= k) {
        return Err(Error::ShapeMismatch(format!(
            "label {} out of range for {k} classes",
            bad.0
        )));
    }
    Ok(())
}

fn batch_gradients(
    net: &MicroNet,
    batch: &[ImageTensor],
    labels: &[BinIndex],
    weight_decay: f64,
    stop_at: usize,
) -> Result<(f64, Gradients)> {
    check_labels(net, batch, labels)?;
    let parts: Vec<(f64, Gradients)> = batch
        .par_iter()
        .zip(labels)
        .map(|(img, l)| sample_gradients(net, img, l.0, stop_at))
        .collect::<Result<_>>()?;
    // summed in sample order so the result does not depend on scheduling
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let m = batch.len() as f64;
    total.scale(1.0 / m);
    loss /= m;
    if weight_decay != 0.0 {
        loss += 0.5 * weight_decay * net.weight_norm_sq();
        for (gw, layer) in total.weights.iter_mut().zip(&net.layers) {
            gw.iter_mut()
                .zip(&layer.weights)
                .for_each(|(g, w)| *g += weight_decay * w);
        }
    }
    Ok((loss, total))
}

/// Mean cross-entropy plus `(weight_decay / 2) |weights|^2`, with its exact
/// gradient.
pub fn loss_and_gradients(
    net: &MicroNet,
    batch: &[ImageTensor],
    labels: &[BinIndex],
    weight_decay: f64,
) -> Result<(f64, Gradients)> {
    batch_gradients(net, batch, labels, weight_decay, 0)
}

/// One momentum step. `grads` is the gradient of the data term; weight decay
/// is added here: `v = momentum v - lr (g + wd w)`, `w += v`. Biases get no
/// decay.
pub fn sgd_step(
    net: &mut MicroNet,
    grads: &Gradients,
    velocity: &mut Gradients,
    cfg: &SgdConfig,
) -> Result<()> {
    sgd_step_from(net, grads, velocity, cfg, 0)
}

fn sgd_step_from(
    net: &mut MicroNet,
    grads: &Gradients,
    velocity: &mut Gradients,
    cfg: &SgdConfig,
    first: usize,
) -> Result<()> {
    if !grads.matches(net) || !velocity.matches(net) {
        return Err(Error::ShapeMismatch(
            "gradient or velocity does not match the network".into(),
        ));
    }
    let (mu, lr, wd) = (cfg.momentum, cfg.learning_rate, cfg.weight_decay);
    for li in first..net.layers.len() {
        let layer = &mut net.layers[li];
        for ((w, g), v) in layer
            .weights
            .iter_mut()
            .zip(&grads.weights[li])
            .zip(&mut velocity.weights[li])
        {
            *v = mu * *v - lr * (g + wd * *w);
            *w += *v;
        }
        for ((b, g), v) in layer
            .biases
            .iter_mut()
            .zip(&grads.biases[li])
            .zip(&mut velocity.biases[li])
        {
            *v = mu * *v - lr * g;
            *b += *v;
        }
    }
    if let Some(index) = net.parameters().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { index });
    }
    Ok(())
}

/// Minibatch momentum SGD for `cfg.n_iterations` steps.
///
/// Batches are consecutive slices of a seeded permutation of the dataset
/// (ChaCha8 seeded with `cfg.seed`); when the permutation is exhausted it is
/// reshuffled and drawing continues, so a batch may straddle two epochs.
/// Returns the objective (data loss plus decay term) of every batch before
/// its step.
pub fn train(
    net: &mut MicroNet,
    images: &[ImageTensor],
    labels: &[BinIndex],
    cfg: &SgdConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_labels(net, images, labels)?;
    let first = if cfg.head_only { net.head_index()? } else { 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut velocity = Gradients::zeros_like(net);
    let mut history = Vec::with_capacity(cfg.n_iterations);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.n_iterations {
        batch.clear();
        batch_labels.clear();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(images[order[cursor]].clone());
            batch_labels.push(labels[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(net, &batch, &batch_labels, 0.0, first)?;
        history.push(loss + 0.5 * cfg.weight_decay * net.weight_norm_sq());
        sgd_step_from(net, &grads, &mut velocity, cfg, first)?;
    }
    Ok(history)
}

/// Index of the most probable class, ties to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}
