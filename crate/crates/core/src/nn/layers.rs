use rand::Rng;

use super::tensor::Tensor;
use crate::error::{FeloError, Result};

/// `out[b][o] = Σ_i weights[o][i]·x[b][i] + bias[o]`.
pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ws = weights.shape();
    if ws.len() != 2 || x.shape().len() != 2 || x.cols() != ws[1] || bias.shape() != [ws[0]] {
        return Err(FeloError::config(format!(
            "dense: input {:?} incompatible with weights {:?} / bias {:?}",
            x.shape(),
            ws,
            bias.shape()
        )));
    }
    let (batch, in_dim, out_dim) = (x.rows(), ws[1], ws[0]);
    let w = weights.data();
    let b = bias.data();
    let mut out = vec![0.0; batch * out_dim];
    for r in 0..batch {
        let xr = x.row(r);
        let orow = &mut out[r * out_dim..(r + 1) * out_dim];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            *slot = dot(wr, xr) + b[o];
        }
    }
    Tensor::matrix(batch, out_dim, out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Eight independent partial sums in a fixed order, so the loop
    // vectorizes and the result still depends only on the inputs.
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln softmax` of a row, computed without forming the probabilities.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Relu,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
        }
    }

    pub fn relu(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn flatten(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            in_dim: dim,
            out_dim: dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { weight: Tensor, bias: Tensor },
    Relu { dim: usize },
    Flatten { dim: usize },
}

impl Layer {
    /// Build a layer from its spec. Dense weights are drawn uniformly from
    /// `±sqrt(6 / (in + out))`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(FeloError::config(format!("layer {spec:?} has a zero dim")));
        }
        match spec.kind {
            LayerKind::Dense => {
                let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                let data = (0..spec.in_dim * spec.out_dim)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Ok(Layer::Dense {
                    weight: Tensor::matrix(spec.out_dim, spec.in_dim, data)?,
                    bias: Tensor::zeros(&[spec.out_dim]),
                })
            }
            LayerKind::Relu | LayerKind::Flatten if spec.in_dim != spec.out_dim => Err(
                FeloError::config(format!("{:?} layer must preserve width", spec.kind)),
            ),
            LayerKind::Relu => Ok(Layer::Relu { dim: spec.in_dim }),
            LayerKind::Flatten => Ok(Layer::Flatten { dim: spec.in_dim }),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { weight, .. } => LayerSpec::dense(weight.shape()[1], weight.shape()[0]),
            Layer::Relu { dim } => LayerSpec::relu(*dim),
            Layer::Flatten { dim } => LayerSpec::flatten(*dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { weight, bias } => dense_forward(x, weight, bias),
            Layer::Relu { dim } => {
                check_width(x, *dim)?;
                Ok(relu(x))
            }
            Layer::Flatten { dim } => {
                check_width(x, *dim)?;
                x.clone().reshape(vec![x.rows(), *dim])
            }
        }
    }

    /// Given the layer input and the gradient at its output, return the
    /// gradient at its input and gradients for its parameters (weight, bias).
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match self {
            Layer::Dense { weight, .. } => {
                let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
                if grad_out.shape() != [input.rows(), out_dim] {
                    return Err(FeloError::config(format!(
                        "dense backward: grad {:?} vs expected [{}, {out_dim}]",
                        grad_out.shape(),
                        input.rows()
                    )));
                }
                let w = weight.data();
                let mut grad_in = vec![0.0; input.rows() * in_dim];
                let mut grad_w = vec![0.0; out_dim * in_dim];
                let mut grad_b = vec![0.0; out_dim];
                for r in 0..input.rows() {
                    let xr = input.row(r);
                    let gr = grad_out.row(r);
                    let gin = &mut grad_in[r * in_dim..(r + 1) * in_dim];
                    for (o, &g) in gr.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        grad_b[o] += g;
                        let wr = &w[o * in_dim..(o + 1) * in_dim];
                        let gw = &mut grad_w[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            gin[i] += g * wr[i];
                            gw[i] += g * xr[i];
                        }
                    }
                }
                Ok((
                    Tensor::matrix(input.rows(), in_dim, grad_in)?,
                    vec![
                        Tensor::matrix(out_dim, in_dim, grad_w)?,
                        Tensor::vector(grad_b),
                    ],
                ))
            }
            Layer::Relu { .. } => {
                let mut g = grad_out.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok((g, Vec::new()))
            }
            Layer::Flatten { .. } => Ok((
                grad_out.clone().reshape(input.shape().to_vec())?,
                Vec::new(),
            )),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }
}

fn check_width(x: &Tensor, dim: usize) -> Result<()> {
    if x.cols() != dim {
        return Err(FeloError::config(format!(
            "layer expects width {dim}, input has shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// A stack of layers that optionally records its activations for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
    trace: Option<Vec<Tensor>>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for pair in layers.windows(2) {
            let (a, b) = (pair[0].spec(), pair[1].spec());
            if a.out_dim != b.in_dim {
                return Err(FeloError::config(format!(
                    "layer stack mismatch: {a:?} feeds {b:?}"
                )));
            }
        }
        Ok(Sequential {
            layers,
            trace: None,
        })
    }

    pub fn from_specs<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|&s| Layer::init(s, rng))
            .collect::<Result<Vec<_>>>()?;
        Sequential::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.spec().in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec().out_dim)
    }

    /// Inference forward pass; leaves any recorded trace untouched.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Forward pass that records every layer input for a following backward.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&h)?;
            trace.push(h);
            h = next;
        }
        self.trace = Some(trace);
        Ok(h)
    }

    /// Backpropagate `grad_out` through the recorded forward pass. Returns the
    /// gradient at the stack input and parameter gradients in `params()` order.
    pub fn backward(&self, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let trace = self
            .trace
            .as_ref()
            .ok_or_else(|| FeloError::usage("backward called before forward_train"))?;
        let mut grad = grad_out.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, input) in self.layers.iter().zip(trace).rev() {
            let (g_in, pg) = layer.backward(input, &grad)?;
            per_layer.push(pg);
            grad = g_in;
        }
        per_layer.reverse();
        Ok((grad, per_layer.into_iter().flatten().collect()))
    }

    pub fn clear_trace(&mut self) {
        self.trace = None;
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Names of parameters, `"<layer>.weight"` / `"<layer>.bias"`, in `params()` order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Dense { .. } = layer {
                names.push(format!("{i}.weight"));
                names.push(format!("{i}.bias"));
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
