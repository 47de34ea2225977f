//! Dense multilayer perceptrons with trace-retaining forward passes and
//! hand-written reverse mode.
//!
//! Layer `l` computes `pre = input * W^T + b` and `act = sigma(pre)` over a
//! row-major batch. The last layer is always the identity, so its
//! pre-activations are the logits.

mod vjp;

pub use vjp::{Adjoint, Cotangent, VjpGraph};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" | "id" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// First derivative, given the pre-activation and the activation value.
    #[inline]
    pub fn deriv(self, pre: f64, act: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - act * act,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative. Zero for relu everywhere, including the kink.
    #[inline]
    pub fn second_deriv(self, act: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * act * (1.0 - act * act),
            Activation::Relu | Activation::Identity => 0.0,
        }
    }

    pub(crate) fn has_curvature(self) -> bool {
        matches!(self, Activation::Tanh)
    }
}

/// One fully connected layer. `weights` is `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Whether a forward pass applies dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Inverted dropout on the input of every layer after the first.
    Train { dropout: f64 },
}

/// Per-layer values retained by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// What each layer consumed, after any dropout mask. `inputs[0]` is the batch.
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) pre: Vec<Tensor>,
    pub(crate) act: Vec<Tensor>,
    /// Scaled keep-masks (`0` or `1/(1-p)`) applied to `inputs[l]`.
    pub(crate) masks: Vec<Option<Tensor>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.inputs[0]
    }

    pub fn preactivations(&self) -> &[Tensor] {
        &self.pre
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.act
    }

    pub fn logits(&self) -> &Tensor {
        self.act.last().expect("trace has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    pub fn has_dropout(&self) -> bool {
        self.masks.iter().any(Option::is_some)
    }

    pub fn num_layers(&self) -> usize {
        self.pre.len()
    }

    /// `sigma'(pre)` for layer `l`, elementwise.
    pub(crate) fn slope(&self, model: &Mlp, l: usize) -> Tensor {
        let a = model.layers[l].activation;
        let mut s = self.pre[l].clone();
        for (v, &z) in s.as_mut_slice().iter_mut().zip(self.act[l].as_slice()) {
            *v = a.deriv(*v, z);
        }
        s
    }

    fn check(&self, model: &Mlp) -> Result<()> {
        if self.pre.len() != model.layers.len() {
            return Err(Error::State(format!(
                "trace has {} layers, model has {}",
                self.pre.len(),
                model.layers.len()
            )));
        }
        for (l, (layer, pre)) in model.layers.iter().zip(&self.pre).enumerate() {
            if pre.cols() != layer.outputs() || self.inputs[l].cols() != layer.inputs() {
                return Err(Error::State(format!("trace layer {l} does not match model")));
            }
        }
        Ok(())
    }
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            weights: model.layers.iter().map(|l| Tensor::zeros(l.weights.shape())).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamGrads) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            w.axpy(alpha, o);
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in b.iter_mut().zip(o) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.iter_mut().for_each(|w| w.scale(alpha));
        self.biases.iter_mut().flatten().for_each(|b| *b *= alpha);
    }

    /// All entries, layer by layer: weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Tensor::all_finite) && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn congruent(&self, model: &Mlp) -> bool {
        self.weights.len() == model.layers.len()
            && self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(&model.layers)
                .all(|((w, b), l)| w.shape() == l.weights.shape() && b.len() == l.bias.len())
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::Dimension("a model needs at least one layer".into()))?;
        if last.activation != Activation::Identity {
            return Err(Error::Config("the final layer must be an identity (logit) layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() || layer.weights.shape().len() != 2 {
                return Err(Error::Dimension(format!("layer {l}: bias and weights disagree")));
            }
            if l > 0 && layers[l - 1].outputs() != layer.inputs() {
                return Err(Error::Dimension(format!(
                    "layer {l} expects {} inputs but layer {} emits {}",
                    layer.inputs(),
                    l - 1,
                    layers[l - 1].outputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Xavier-uniform weights, zero biases; `activations[l]` belongs to layer `l`.
    pub fn xavier(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Dimension(format!(
                "need at least an input and an output width, got {dims:?}"
            )));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::Dimension(format!(
                "{} layers but {} activations",
                dims.len() - 1,
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Dimension(format!("zero width in {dims:?}")));
        }
        let root = Stream::new(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(l, (w, &activation))| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = root.split(l as u64);
                let data = (0..fan_in * fan_out).map(|_| rng.uniform_in(-a, a)).collect();
                Dense {
                    weights: Tensor::matrix(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    /// Same hidden activation everywhere, identity output.
    pub fn xavier_uniform_hidden(dims: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let acts: Vec<_> =
            (0..n).map(|l| if l + 1 == n { Activation::Identity } else { hidden }).collect();
        Self::xavier(dims, &acts, seed)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_width()).chain(self.layers.iter().map(Dense::outputs)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Stream) -> Result<(Tensor, ForwardTrace)> {
        if x.shape().len() != 2 || x.cols() != self.input_width() {
            return Err(Error::Dimension(format!(
                "input batch {:?} does not match model width {}",
                x.shape(),
                self.input_width()
            )));
        }
        let dropout = match mode {
            Mode::Eval => 0.0,
            Mode::Train { dropout } => {
                if !(0.0..1.0).contains(&dropout) {
                    return Err(Error::Config(format!("dropout rate {dropout} outside [0,1)")));
                }
                dropout
            }
        };
        let n = self.layers.len();
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            act: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut input = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = if l > 0 && dropout > 0.0 {
                let keep = 1.0 / (1.0 - dropout);
                let mut m = Tensor::zeros(input.shape());
                for v in m.as_mut_slice() {
                    *v = if rng.uniform() >= dropout { keep } else { 0.0 };
                }
                input.mul_assign(&m);
                Some(m)
            } else {
                None
            };
            let mut pre = tensor::matmul_nt(&input, &layer.weights);
            for row in pre.as_mut_slice().chunks_mut(layer.outputs()) {
                for (p, b) in row.iter_mut().zip(&layer.bias) {
                    *p += b;
                }
            }
            let act = match layer.activation {
                Activation::Identity => pre.clone(),
                a => pre.map(|v| a.apply(v)),
            };
            trace.inputs.push(input);
            trace.pre.push(pre);
            trace.masks.push(mask);
            input = act.clone();
            trace.act.push(act);
        }
        Ok((input, trace))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        // eval mode never draws from the stream
        self.forward(x, Mode::Eval, &mut Stream::new(0))
    }

    /// Logits without keeping a trace.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_width() {
            return Err(Error::Dimension(format!(
                "input batch {:?} does not match model width {}",
                x.shape(),
                self.input_width()
            )));
        }
        let mut h = tensor::matmul_nt(x, &self.layers[0].weights);
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                h = tensor::matmul_nt(&h, &layer.weights);
            }
            for row in h.as_mut_slice().chunks_mut(layer.outputs()) {
                for (p, b) in row.iter_mut().zip(&layer.bias) {
                    *p = layer.activation.apply(*p + b);
                }
            }
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.iter_rows().map(tensor::argmax).collect())
    }

    /// Visits every parameter array together with its gradient counterpart.
    pub fn for_each_param_mut(
        &mut self,
        grads: &ParamGrads,
        mut f: impl FnMut(&mut [f64], &[f64]),
    ) {
        for ((layer, gw), gb) in self.layers.iter_mut().zip(&grads.weights).zip(&grads.biases) {
            f(layer.weights.as_mut_slice(), gw.as_slice());
            f(&mut layer.bias, gb);
        }
    }

    /// Squared Euclidean norm of all parameters, biases included.
    pub fn param_sum_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.sum_sq() + l.bias.iter().map(|b| b * b).sum::<f64>()).sum()
    }

    /// Parameters as a gradient-shaped value.
    pub fn params(&self) -> ParamGrads {
        ParamGrads {
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor, temperature: f64) -> Tensor {
    let mut p = logits.clone();
    for row in p.as_mut_slice().chunks_mut(logits.cols().max(1)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) / temperature).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], temperature: f64) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::Dimension(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Index(format!("label {bad} outside [0, {c})")));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = 0.0;
    let norm = 1.0 / (b as f64 * temperature);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let shifted: Vec<f64> = row.iter().map(|&v| (v - m) / temperature).collect();
        let log_z = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
        loss += log_z - shifted[y];
        let g = grad.row_mut(i);
        for (k, s) in shifted.iter().enumerate() {
            g[k] = (s - log_z).exp() * norm;
        }
        g[y] -= norm;
    }
    Ok((loss / b as f64, grad))
}

/// Gradient of the loss whose logit-gradient is `dlogits`, for every weight and bias.
pub fn backprop_params(model: &Mlp, trace: &ForwardTrace, dlogits: &Tensor) -> Result<ParamGrads> {
    trace.check(model)?;
    if dlogits.shape() != trace.logits().shape() {
        return Err(Error::Dimension(format!(
            "dlogits {:?} vs logits {:?}",
            dlogits.shape(),
            trace.logits().shape()
        )));
    }
    let mut grads = ParamGrads::zeros_like(model);
    let mut direct = vec![None; model.layers.len()];
    *direct.last_mut().expect("non-empty") = Some(dlogits.clone());
    propagate(model, trace, direct, &mut grads);
    Ok(grads)
}

/// Reverse pass through the forward graph.
///
/// `direct[l]` holds cotangents injected straight into the pre-activations
/// of layer `l` (logit gradients at the top, curvature terms from a
/// [`VjpGraph`] below). Parameter gradients accumulate into `grads`.
pub(crate) fn propagate(model: &Mlp, trace: &ForwardTrace, mut direct: Vec<Option<Tensor>>, grads: &mut ParamGrads) {
    let mut act_bar: Option<Tensor> = None;
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let pre_bar = match (direct[l].take(), act_bar.take()) {
            (None, None) => continue,
            (Some(d), None) => d,
            (d, Some(mut a)) => {
                if layer.activation != Activation::Identity {
                    a.mul_assign(&trace.slope(model, l));
                }
                if let Some(d) = d {
                    a.axpy(1.0, &d);
                }
                a
            }
        };
        for (g, s) in grads.biases[l].iter_mut().zip(pre_bar.col_sums()) {
            *g += s;
        }
        tensor::matmul_tn_acc(1.0, &pre_bar, &trace.inputs[l], &mut grads.weights[l]);
        if l > 0 {
            let mut below = tensor::matmul(&pre_bar, &layer.weights);
            if let Some(m) = &trace.masks[l] {
                below.mul_assign(m);
            }
            act_bar = Some(below);
        }
    }
}

/// Row `a` of the result is `V[a] * J(x_a)`: the contraction `v . z`
/// backpropagated to the input.
pub fn vjp_input(model: &Mlp, trace: &ForwardTrace, v: &Tensor) -> Result<Tensor> {
    Ok(VjpGraph::build(model, trace, Cotangent::Rows(v))?.input_grad().clone())
}

/// Central-difference Jacobian `C x I` of the logits at a single input. Test oracle.
pub fn finite_diff_jacobian(model: &Mlp, x: &[f64], h: f64) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let i_dim = model.input_width();
    if x.len() != i_dim {
        return Err(Error::Dimension(format!("input has {} entries, model wants {i_dim}", x.len())));
    }
    let c_dim = model.output_width();
    // rows 2i and 2i+1 hold x + h e_i and x - h e_i
    let mut probes = Tensor::zeros(&[2 * i_dim, i_dim]);
    for i in 0..i_dim {
        probes.row_mut(2 * i).copy_from_slice(x);
        probes.row_mut(2 * i + 1).copy_from_slice(x);
        probes.row_mut(2 * i)[i] += h;
        probes.row_mut(2 * i + 1)[i] -= h;
    }
    let out = model.logits(&probes)?;
    let mut jac = Tensor::zeros(&[c_dim, i_dim]);
    for i in 0..i_dim {
        let (plus, minus) = (out.row(2 * i), out.row(2 * i + 1));
        for c in 0..c_dim {
            jac.set(c, i, (plus[c] - minus[c]) / (2.0 * h));
        }
    }
    Ok(jac)
}
