//! Explicit feed-forward networks with the plumbing second-order methods
//! need: forward traces, cross-entropy backprop, per-example Jacobians,
//! finite-difference Hessian-vector products, and pseudo-gradient sampling.
//!
//! Biases are folded into the weight matrices: every layer input carries a
//! trailing constant-1 column, so a layer maps an augmented `d_in` vector
//! through a `d_out x d_in` matrix. Parameter vectors are flattened layer by
//! layer in forward order, column-major within each layer; every module in
//! the crate shares this one convention.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::data::LabeledDataset;

/// Hard cap on the parameter count for materialized Jacobians.
pub const JACOBIAN_PARAM_GUARD: usize = 20_000;

const GELU_COEF: f64 = 0.044_715;

/// Layer activation functions. ReLU uses subgradient 0 at exactly 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let u = c * (x + GELU_COEF * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::validation(
                "activation",
                format!("unknown activation '{other}'"),
            )),
        }
    }

    /// Stable numeric tag used by the checkpoint format.
    pub fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
            Activation::Tanh => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Gelu),
            2 => Ok(Activation::Tanh),
            3 => Ok(Activation::Identity),
            other => Err(Error::validation(
                "activation",
                format!("unknown activation tag {other}"),
            )),
        }
    }
}

/// One dense layer; the weight matrix includes the bias column.
#[derive(Debug, Clone)]
pub struct Layer {
    /// `d_out x d_in` with the last input column fed the constant 1.
    pub weight: Array2<f64>,
    pub activation: Activation,
}

/// Shape of a layer's weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub index: usize,
    pub d_out: usize,
    pub d_in: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.d_out * self.d_in
    }
}

/// A feed-forward network of dense layers with folded biases.
#[derive(Debug, Clone)]
pub struct FeedForwardNet {
    layers: Vec<Layer>,
}

impl FeedForwardNet {
    /// Builds a network, checking that consecutive widths chain: each layer's
    /// input width must equal the previous layer's output width plus the bias
    /// column.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation(
                "layers",
                "network needs at least one layer",
            ));
        }
        for l in 1..layers.len() {
            let expect = layers[l - 1].weight.nrows() + 1;
            let got = layers[l].weight.ncols();
            if got != expect {
                return Err(Error::dim(format!(
                    "layer {l} input width {got} does not chain with previous output width + bias {expect}"
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Random network with the given widths (`widths[0]` is the raw input
    /// dimension, the last entry the class count) and per-layer activations.
    /// Weights are Gaussian with a `1/sqrt(d_in)` scale.
    pub fn random(
        widths: &[usize],
        activations: &[Activation],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::validation("widths", "need input and output widths"));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::validation(
                "activations",
                format!(
                    "expected {} activations, got {}",
                    widths.len() - 1,
                    activations.len()
                ),
            ));
        }
        let mut layers = Vec::new();
        for l in 0..widths.len() - 1 {
            let d_in = widths[l] + 1;
            let d_out = widths[l + 1];
            let scale = 1.0 / (d_in as f64).sqrt();
            let mut w = Array2::<f64>::zeros((d_out, d_in));
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = scale * z;
            }
            layers.push(Layer {
                weight: w,
                activation: activations[l],
            });
        }
        Self::new(layers)
    }

    /// All-zero weights with the given widths.
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::random(widths, activations, &mut rng)?;
        for layer in net.layers.iter_mut() {
            layer.weight.fill(0.0);
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Layer {
        &mut self.layers[l]
    }

    /// Raw input dimension (before bias augmentation).
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols() - 1
    }

    /// Number of output classes.
    pub fn class_count(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .enumerate()
            .map(|(index, l)| LayerShape {
                index,
                d_out: l.weight.nrows(),
                d_in: l.weight.ncols(),
            })
            .collect()
    }

    pub fn shape_of(&self, layer: usize) -> Result<LayerShape> {
        if layer >= self.layers.len() {
            return Err(Error::validation(
                "layer",
                format!(
                    "index {layer} out of range for {} layers",
                    self.layers.len()
                ),
            ));
        }
        let w = &self.layers[layer].weight;
        Ok(LayerShape {
            index: layer,
            d_out: w.nrows(),
            d_in: w.ncols(),
        })
    }

    /// Full parameter vector in the canonical flattening.
    pub fn flatten_params(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            push_colmajor(&layer.weight, &mut out);
        }
        Array1::from(out)
    }

    /// Parameters of the selected layers, concatenated in ascending layer
    /// order with the canonical per-layer flattening.
    pub fn flatten_layers(&self, layers: &[usize]) -> Result<Array1<f64>> {
        let mut out = Vec::new();
        for &l in layers {
            if l >= self.layers.len() {
                return Err(Error::validation(
                    "layers",
                    format!("layer index {l} out of range"),
                ));
            }
            push_colmajor(&self.layers[l].weight, &mut out);
        }
        Ok(Array1::from(out))
    }

    /// Overwrites all parameters from a canonical flat vector.
    pub fn set_params(&mut self, flat: &ArrayView1<f64>) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!(
                "flat vector length {} but network has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in self.layers.iter_mut() {
            let (d_out, d_in) = layer.weight.dim();
            for j in 0..d_in {
                for i in 0..d_out {
                    layer.weight[[i, j]] = flat[offset];
                    offset += 1;
                }
            }
        }
        Ok(())
    }

    /// Forward pass; records the augmented input and preactivation of each
    /// layer along with the logits and softmax probabilities.
    pub fn forward(&self, x: &ArrayView1<f64>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "input length {} but network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut current = augment(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let s = layer.weight.dot(&current);
            let a = s.mapv(|v| layer.activation.apply(v));
            activations.push(current);
            preacts.push(s);
            current = if l + 1 < self.layers.len() {
                augment(&a.view())
            } else {
                a
            };
        }
        let logits = current;
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            activations,
            preacts,
            logits,
            probs,
        })
    }

    /// Gradient of the softmax cross-entropy loss with respect to every
    /// weight matrix.
    pub fn backward(&self, trace: &ForwardTrace, label: usize) -> Result<LayerGradients> {
        if label >= self.class_count() {
            return Err(Error::validation(
                "label",
                format!(
                    "label {label} out of range for {} classes",
                    self.class_count()
                ),
            ));
        }
        let mut dlogits = trace.probs.clone();
        dlogits[label] -= 1.0;
        let (grads, _) = self.backprop_from_output(trace, &dlogits);
        Ok(grads)
    }

    /// Samples a label from the predictive distribution and backpropagates
    /// the log-likelihood gradient to every layer's preactivations.
    pub fn sample_pseudo_gradient(
        &self,
        trace: &ForwardTrace,
        rng: &mut ChaCha8Rng,
    ) -> PseudoGradients {
        let sampled = sample_label(&trace.probs, rng);
        self.pseudo_gradient_for_label(trace, sampled)
    }

    /// Pseudo-gradient for a fixed label: `d log p(label | x) / d s_l`.
    pub fn pseudo_gradient_for_label(
        &self,
        trace: &ForwardTrace,
        label: usize,
    ) -> PseudoGradients {
        let mut dlogits = trace.probs.mapv(|p| -p);
        dlogits[label] += 1.0;
        let (_, preact_grads) = self.backprop_from_output(trace, &dlogits);
        PseudoGradients {
            preact_grads,
            sampled_label: label,
        }
    }

    /// Jacobian of the logits with respect to the full flattened parameter
    /// vector; row `r` is the gradient of logit `r`.
    pub fn per_example_jacobian(&self, x: &ArrayView1<f64>) -> Result<Array2<f64>> {
        let p = self.param_count();
        if p > JACOBIAN_PARAM_GUARD {
            return Err(Error::Size {
                what: "parameter count for materialized Jacobian".to_string(),
                got: p,
                limit: JACOBIAN_PARAM_GUARD,
            });
        }
        let trace = self.forward(x)?;
        let m = self.class_count();
        let mut jac = Array2::<f64>::zeros((m, p));
        for r in 0..m {
            let mut dlogits = Array1::<f64>::zeros(m);
            dlogits[r] = 1.0;
            let (grads, _) = self.backprop_from_output(&trace, &dlogits);
            let flat = grads.flatten();
            jac.row_mut(r).assign(&flat);
        }
        Ok(jac)
    }

    /// Per-logit weight gradients restricted to a subset of layers:
    /// `out[r][k]` is the gradient of logit `r` with respect to the weights
    /// of `layers[k]`.
    pub fn logit_gradients_for_layers(
        &self,
        trace: &ForwardTrace,
        layers: &[usize],
    ) -> Vec<Vec<Array2<f64>>> {
        let m = self.class_count();
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let mut dlogits = Array1::<f64>::zeros(m);
            dlogits[r] = 1.0;
            let (grads, _) = self.backprop_from_output(trace, &dlogits);
            out.push(layers.iter().map(|&l| grads.layers[l].clone()).collect());
        }
        out
    }

    /// Shared backward pass from an arbitrary logit cotangent. Returns the
    /// per-layer weight gradients and the per-layer preactivation gradients.
    fn backprop_from_output(
        &self,
        trace: &ForwardTrace,
        dlogits: &Array1<f64>,
    ) -> (LayerGradients, Vec<Array1<f64>>) {
        let count = self.layers.len();
        let mut weight_grads: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); count];
        let mut preact_grads: Vec<Array1<f64>> = vec![Array1::zeros(0); count];

        let mut upstream = dlogits.clone();
        for l in (0..count).rev() {
            let layer = &self.layers[l];
            let s = &trace.preacts[l];
            let ds = &upstream * &s.mapv(|v| layer.activation.derivative(v));
            weight_grads[l] = outer(&ds, &trace.activations[l]);
            if l > 0 {
                let da_aug = layer.weight.t().dot(&ds);
                // Drop the bias coordinate appended by the layer below.
                upstream = da_aug.slice(ndarray::s![..da_aug.len() - 1]).to_owned();
            }
            preact_grads[l] = ds;
        }
        (
            LayerGradients {
                layers: weight_grads,
            },
            preact_grads,
        )
    }

    /// Mean cross-entropy loss over a dataset.
    pub fn dataset_loss(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::validation("dataset", "empty dataset"));
        }
        let mut total = 0.0;
        for i in 0..data.len() {
            let (x, y) = data.example(i);
            let trace = self.forward(&x)?;
            total += cross_entropy(&trace.logits, y)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Mean cross-entropy gradient over a dataset, flattened canonically.
    pub fn dataset_gradient(&self, data: &LabeledDataset) -> Result<Array1<f64>> {
        if data.is_empty() {
            return Err(Error::validation("dataset", "empty dataset"));
        }
        let mut acc = Array1::<f64>::zeros(self.param_count());
        for i in 0..data.len() {
            let (x, y) = data.example(i);
            let trace = self.forward(&x)?;
            let grads = self.backward(&trace, y)?;
            acc += &grads.flatten();
        }
        Ok(acc / data.len() as f64)
    }

    /// Mean cross-entropy gradient over selected rows, one matrix per layer.
    pub fn batch_gradient(&self, data: &LabeledDataset, rows: &[usize]) -> Result<LayerGradients> {
        if rows.is_empty() {
            return Err(Error::validation("rows", "empty batch"));
        }
        let mut acc: Option<LayerGradients> = None;
        for &i in rows {
            let (x, y) = data.example(i);
            let trace = self.forward(&x)?;
            let grads = self.backward(&trace, y)?;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for (dst, src) in a.layers.iter_mut().zip(grads.layers.iter()) {
                        *dst += src;
                    }
                }
            }
        }
        let mut grads = acc.unwrap();
        let scale = 1.0 / rows.len() as f64;
        for g in grads.layers.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        Ok(grads)
    }

    /// Hessian-vector product of the mean dataset loss via central finite
    /// differences of the gradient: `(g(theta + h v) - g(theta - h v)) / 2h`
    /// with `h = 1e-4 / max(1, |v|)`.
    pub fn hessian_vector_product(
        &self,
        data: &LabeledDataset,
        v: &ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let p = self.param_count();
        if v.len() != p {
            return Err(Error::dim(format!(
                "vector length {} but network has {p} parameters",
                v.len()
            )));
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(Array1::zeros(p));
        }
        let h = 1e-4 / norm.max(1.0);
        let theta = self.flatten_params();

        let mut plus = self.clone();
        plus.set_params(&(&theta + &(v.to_owned() * h)).view())?;
        let g_plus = plus.dataset_gradient(data)?;

        let mut minus = self.clone();
        minus.set_params(&(&theta - &(v.to_owned() * h)).view())?;
        let g_minus = minus.dataset_gradient(data)?;

        Ok((g_plus - g_minus) / (2.0 * h))
    }

    /// Fraction of examples whose argmax logit matches the label.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::validation("dataset", "empty dataset"));
        }
        let mut hits = 0usize;
        for i in 0..data.len() {
            let (x, y) = data.example(i);
            let trace = self.forward(&x)?;
            if argmax(&trace.logits) == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Everything one forward pass records.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Augmented input of each layer (`activations[0]` is the augmented
    /// network input).
    pub activations: Vec<Array1<f64>>,
    /// Preactivations `s_l = W_l a_{l-1}`.
    pub preacts: Vec<Array1<f64>>,
    /// Output of the final layer.
    pub logits: Array1<f64>,
    /// Softmax of the logits; sums to 1 within 1e-12.
    pub probs: Array1<f64>,
}

/// Per-layer weight gradients, same shapes as the weight matrices.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub layers: Vec<Array2<f64>>,
}

impl LayerGradients {
    /// Canonical flattening over all layers.
    pub fn flatten(&self) -> Array1<f64> {
        let total: usize = self.layers.iter().map(|g| g.len()).sum();
        let mut out = Vec::with_capacity(total);
        for g in &self.layers {
            push_colmajor(g, &mut out);
        }
        Array1::from(out)
    }

    /// Canonical flattening over a subset of layers in ascending order.
    pub fn flatten_layers(&self, layers: &[usize]) -> Array1<f64> {
        let mut out = Vec::new();
        for &l in layers {
            push_colmajor(&self.layers[l], &mut out);
        }
        Array1::from(out)
    }

    pub fn zeros_like(net: &FeedForwardNet) -> Self {
        LayerGradients {
            layers: net
                .layers()
                .iter()
                .map(|l| Array2::zeros(l.weight.dim()))
                .collect(),
        }
    }
}

/// Per-layer preactivation gradients of a sampled-label log-likelihood.
#[derive(Debug, Clone)]
pub struct PseudoGradients {
    pub preact_grads: Vec<Array1<f64>>,
    pub sampled_label: usize,
}

/// Appends `[x, 1]`.
fn augment(x: &ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::<f64>::zeros(x.len() + 1);
    out.slice_mut(ndarray::s![..x.len()]).assign(x);
    out[x.len()] = 1.0;
    out
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Column-major (vec) flattening of a matrix, appended to `out`.
pub(crate) fn push_colmajor(w: &Array2<f64>, out: &mut Vec<f64>) {
    let (d_out, d_in) = w.dim();
    for j in 0..d_in {
        for i in 0..d_out {
            out.push(w[[i, j]]);
        }
    }
}

/// Column-major flattening of a single matrix.
pub fn flatten_colmajor(w: &Array2<f64>) -> Array1<f64> {
    let mut out = Vec::with_capacity(w.len());
    push_colmajor(w, &mut out);
    Array1::from(out)
}

/// Inverse of [`flatten_colmajor`] for a `d_out x d_in` matrix.
pub fn unflatten_colmajor(v: &ArrayView1<f64>, d_out: usize, d_in: usize) -> Result<Array2<f64>> {
    if v.len() != d_out * d_in {
        return Err(Error::dim(format!(
            "flat length {} does not match {d_out}x{d_in}",
            v.len()
        )));
    }
    let mut w = Array2::<f64>::zeros((d_out, d_in));
    let mut idx = 0;
    for j in 0..d_in {
        for i in 0..d_out {
            w[[i, j]] = v[idx];
            idx += 1;
        }
    }
    Ok(w)
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Cross-entropy `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::validation(
            "label",
            format!("label {label} out of range for {} logits", logits.len()),
        ));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    Ok(lse - logits[label])
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Draws a class index from a categorical distribution by inverse CDF.
pub fn sample_label(probs: &Array1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}
