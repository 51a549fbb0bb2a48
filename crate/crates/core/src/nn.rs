//! Fully connected ReLU classifier with a flat parameter vector.
//!
//! Layer `l` maps `h` (length `input_dim`) to `a = W^T [h; 1]` where `W` is an
//! `(input_dim + 1) x output_dim` matrix whose last row holds the biases. The
//! flat parameter vector stores the layers from the **last** to the first,
//! each matrix column-major. With this order the parameters of the trailing
//! `r` layers always form a prefix of `theta`.

use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Rows per chunk when a dataset is pushed through the network.
pub(crate) const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative at `v`; the ReLU subgradient at 0 is taken as 0.
    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    /// Weights plus one bias per output unit.
    pub fn n_params(&self) -> usize {
        (self.input_dim + 1) * self.output_dim
    }

    /// Builds a ReLU chain with an identity output layer from layer widths,
    /// e.g. `[784, 300, 100, 40, 10]`.
    pub fn chain(widths: &[usize]) -> Result<Vec<LayerSpec>> {
        if widths.len() < 2 {
            return Err(Error::config("need at least an input and an output width"));
        }
        let last = widths.len() - 2;
        let layers: Vec<_> = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let act = if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                LayerSpec::new(w[0], w[1], act)
            })
            .collect();
        validate_layers(&layers)?;
        Ok(layers)
    }
}

pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    let Some(last) = layers.last() else {
        return Err(Error::config("model has no layers"));
    };
    for (l, spec) in layers.iter().enumerate() {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(Error::config(format!("layer {l} has a zero dimension")));
        }
    }
    for (l, pair) in layers.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return Err(Error::config(format!(
                "layer {l} outputs {} values but layer {} expects {}",
                pair[0].output_dim,
                l + 1,
                pair[1].input_dim
            )));
        }
    }
    if last.activation != Activation::Identity {
        return Err(Error::config("the output layer must use the identity activation"));
    }
    Ok(())
}

/// Layer specifications plus the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    theta: Vec<f64>,
    offsets: Vec<usize>,
}

/// Per-layer values from one forward pass of a single input.
#[derive(Clone, Debug)]
pub struct Activations {
    /// `h^(0) = x, h^(1), ..., h^(L-1)`: the input of every layer.
    pub inputs: Vec<DVector<f64>>,
    /// `a^(1), ..., a^(L)`: the pre-activation output of every layer.
    pub pre: Vec<DVector<f64>>,
}

impl Activations {
    pub fn logits(&self) -> &DVector<f64> {
        self.pre.last().expect("at least one layer")
    }
}

/// Row-per-sample version of [`Activations`].
#[derive(Clone, Debug)]
pub struct BatchActivations {
    pub inputs: Vec<DMatrix<f64>>,
    pub pre: Vec<DMatrix<f64>>,
}

impl BatchActivations {
    /// `B x M` logits, one row per sample.
    pub fn logits(&self) -> &DMatrix<f64> {
        self.pre.last().expect("at least one layer")
    }
}

/// The parameters of the trailing `r` layers, which form the prefix
/// `0..len` of `theta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrailingSubset {
    layers: usize,
    len: usize,
    first_layer: usize,
}

impl TrailingSubset {
    pub fn new(model: &Mlp, r: usize) -> Result<Self> {
        let n_layers = model.n_layers();
        if r == 0 || r > n_layers {
            return Err(Error::config(format!(
                "trailing layer count {r} must be in 1..={n_layers}"
            )));
        }
        let first_layer = n_layers - r;
        let len = model.layers[first_layer..].iter().map(LayerSpec::n_params).sum();
        Ok(Self {
            layers: r,
            len,
            first_layer,
        })
    }

    /// Every layer of the model.
    pub fn all(model: &Mlp) -> Self {
        Self::new(model, model.n_layers()).expect("model has layers")
    }

    /// Accepts an index range only if it is exactly the parameter block of
    /// some number of trailing layers.
    pub fn from_range(model: &Mlp, range: Range<usize>) -> Result<Self> {
        if range.start == 0 {
            for r in 1..=model.n_layers() {
                let s = Self::new(model, r)?;
                if s.len == range.end {
                    return Ok(s);
                }
            }
        }
        Err(Error::config(format!(
            "parameter range {range:?} is not the block of a trailing set of layers"
        )))
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> Range<usize> {
        0..self.len
    }

    /// Index of the first layer (counting from the input) in the subset.
    pub fn first_layer(&self) -> usize {
        self.first_layer
    }
}

impl Mlp {
    pub fn new(layers: Vec<LayerSpec>, theta: Vec<f64>) -> Result<Self> {
        validate_layers(&layers)?;
        let offsets = layer_offsets(&layers);
        let n: usize = layers.iter().map(LayerSpec::n_params).sum();
        if theta.len() != n {
            return Err(Error::shape(format!(
                "parameter vector has length {} but the layers need {n}",
                theta.len()
            )));
        }
        Ok(Self { layers, theta, offsets })
    }

    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        let n = layers.iter().map(LayerSpec::n_params).sum();
        Self::new(layers, vec![0.0; n])
    }

    /// Assembles the flat vector from per-layer `(input_dim + 1) x output_dim`
    /// matrices given first layer to last.
    pub fn from_matrices(layers: Vec<LayerSpec>, weights: &[DMatrix<f64>]) -> Result<Self> {
        if weights.len() != layers.len() {
            return Err(Error::shape("one weight matrix per layer is required"));
        }
        let mut model = Self::zeros(layers)?;
        for (l, w) in weights.iter().enumerate() {
            let spec = model.layers[l];
            if w.shape() != (spec.input_dim + 1, spec.output_dim) {
                return Err(Error::shape(format!(
                    "layer {l} weight matrix is {:?}, expected {:?}",
                    w.shape(),
                    (spec.input_dim + 1, spec.output_dim)
                )));
            }
            model.weights_mut(l).copy_from(w);
        }
        Ok(model)
    }

    /// Per-layer weight matrices, first layer to last.
    pub fn to_matrices(&self) -> Vec<DMatrix<f64>> {
        (0..self.n_layers()).map(|l| self.weights(l).into_owned()).collect()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    /// Index range of layer `l` (0 = first layer) inside `theta`.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        let off = self.offsets[l];
        off..off + self.layers[l].n_params()
    }

    pub fn weights(&self, l: usize) -> DMatrixView<'_, f64> {
        let spec = self.layers[l];
        DMatrixView::from_slice(&self.theta[self.layer_range(l)], spec.input_dim + 1, spec.output_dim)
    }

    pub fn weights_mut(&mut self, l: usize) -> DMatrixViewMut<'_, f64> {
        let spec = self.layers[l];
        let range = self.layer_range(l);
        DMatrixViewMut::from_slice(&mut self.theta[range], spec.input_dim + 1, spec.output_dim)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.n_inputs() {
            return Err(Error::shape(format!(
                "input has {len} features, model expects {}",
                self.n_inputs()
            )));
        }
        Ok(())
    }

    /// `g(x; theta)`.
    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.forward_cached(x)?.pre.pop().expect("at least one layer"))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Activations> {
        self.check_input(x.len())?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut h = DVector::from_column_slice(x);
        for l in 0..self.n_layers() {
            let a = self.layer_pre(l, &h);
            let next = if l + 1 < self.n_layers() {
                a.map(|v| self.layers[l].activation.apply(v))
            } else {
                DVector::zeros(0)
            };
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        Ok(Activations { inputs, pre })
    }

    fn layer_pre(&self, l: usize, h: &DVector<f64>) -> DVector<f64> {
        let w = self.weights(l);
        let n_in = self.layers[l].input_dim;
        let mut a = DVector::zeros(self.layers[l].output_dim);
        for j in 0..a.len() {
            let col = w.column(j);
            a[j] = col.rows(0, n_in).dot(h) + col[n_in];
        }
        a
    }

    /// Forward pass of `xs` (one sample per row) through layers
    /// `from_layer..`, starting from that layer's input.
    pub fn forward_batch_from(&self, from_layer: usize, xs: &DMatrix<f64>) -> Result<BatchActivations> {
        if xs.ncols() != self.layers[from_layer].input_dim {
            return Err(Error::shape(format!(
                "batch has {} columns, layer {from_layer} expects {}",
                xs.ncols(),
                self.layers[from_layer].input_dim
            )));
        }
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut h = xs.clone();
        for l in from_layer..self.n_layers() {
            let spec = self.layers[l];
            let w = self.weights(l);
            let mut a = &h * w.rows(0, spec.input_dim);
            let bias: RowDVector<f64> = w.row(spec.input_dim).into_owned();
            for mut row in a.row_iter_mut() {
                row += &bias;
            }
            let next = if l + 1 < self.n_layers() {
                a.map(|v| spec.activation.apply(v))
            } else {
                DMatrix::zeros(0, 0)
            };
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        Ok(BatchActivations { inputs, pre })
    }

    pub fn forward_batch(&self, xs: &DMatrix<f64>) -> Result<BatchActivations> {
        self.forward_batch_from(0, xs)
    }

    /// `N x M` logits of every row of `xs`.
    pub fn logits_batch(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(xs.ncols())?;
        let mut out = DMatrix::zeros(xs.nrows(), self.n_classes());
        for start in (0..xs.nrows()).step_by(EVAL_CHUNK) {
            let n = EVAL_CHUNK.min(xs.nrows() - start);
            let acts = self.forward_batch(&xs.rows(start, n).into_owned())?;
            out.rows_mut(start, n).copy_from(acts.logits());
        }
        Ok(out)
    }

    /// Gradient of `sum_n weight * (-ln f_{y_n})` for the batch, accumulated
    /// into `grad` (length `n_params`). Returns the batch's summed negative
    /// log-likelihood.
    pub(crate) fn accumulate_nll_gradient(
        &self,
        xs: &DMatrix<f64>,
        labels: &[usize],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        debug_assert_eq!(grad.len(), self.n_params());
        let acts = self.forward_batch(xs)?;
        let logits = acts.logits();
        let mut delta = DMatrix::zeros(logits.nrows(), logits.ncols());
        let mut nll = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = logits.row(i).iter().copied().collect();
            let lse = log_sum_exp(&z);
            nll += lse - z[y];
            for (m, f) in softmax_vec(&z, 1.0).into_iter().enumerate() {
                delta[(i, m)] = weight * f;
            }
            delta[(i, y)] -= weight;
        }
        self.backprop_batch(&acts, delta, 0, grad);
        Ok(nll)
    }

    /// Propagates `delta = d(objective)/d(logits)` (one row per sample) back
    /// through layers `stop_layer..`, adding parameter gradients into `grad`.
    fn backprop_batch(&self, acts: &BatchActivations, mut delta: DMatrix<f64>, stop_layer: usize, grad: &mut [f64]) {
        let base = stop_layer;
        for l in (stop_layer..self.n_layers()).rev() {
            let spec = self.layers[l];
            let h = &acts.inputs[l - base];
            let dw = h.transpose() * &delta;
            let off = self.offsets[l];
            let stride = spec.input_dim + 1;
            for j in 0..spec.output_dim {
                let col = &mut grad[off + j * stride..off + (j + 1) * stride];
                for (i, g) in col[..spec.input_dim].iter_mut().enumerate() {
                    *g += dw[(i, j)];
                }
                col[spec.input_dim] += delta.column(j).sum();
            }
            if l > stop_layer {
                let w = self.weights(l);
                let w_in = w.rows(0, spec.input_dim).transpose();
                let mut prev = &delta * w_in;
                let act = self.layers[l - 1].activation;
                let a_prev = &acts.pre[l - 1 - base];
                prev.zip_apply(a_prev, |d, a| *d *= act.derivative(a));
                delta = prev;
            }
        }
    }

    /// Jacobian of the logits with respect to the trailing-subset
    /// parameters, `n_sub x M`: column `m` is `dg_m / dtheta_r`.
    pub fn jacobian_g(&self, x: &[f64], subset: &TrailingSubset) -> Result<DMatrix<f64>> {
        let acts = self.forward_cached(x)?;
        Ok(self.jacobian_from_cache(&acts, subset))
    }

    pub fn jacobian_from_cache(&self, acts: &Activations, subset: &TrailingSubset) -> DMatrix<f64> {
        let m_classes = self.n_classes();
        let mut jac = DMatrix::zeros(subset.len(), m_classes);
        let mut delta = DMatrix::<f64>::identity(m_classes, m_classes);
        for l in (subset.first_layer()..self.n_layers()).rev() {
            let spec = self.layers[l];
            let h = &acts.inputs[l];
            fill_outer_block(&mut jac, self.offsets[l], h, &delta);
            if l > subset.first_layer() {
                let w = self.weights(l);
                let mut prev = w.rows(0, spec.input_dim) * &delta;
                let act = self.layers[l - 1].activation;
                let a = &acts.pre[l - 1];
                for (i, mut row) in prev.row_iter_mut().enumerate() {
                    row *= act.derivative(a[i]);
                }
                delta = prev;
            }
        }
        jac
    }

    /// Logits and trailing-subset Jacobians for every row of `xs`. The
    /// frozen front is evaluated in one batched pass.
    pub fn jacobians_batch(
        &self,
        xs: &DMatrix<f64>,
        subset: &TrailingSubset,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.check_input(xs.ncols())?;
        let first = subset.first_layer();
        let acts = self.forward_batch(xs)?;
        let mut jacs = Vec::with_capacity(xs.nrows());
        for i in 0..xs.nrows() {
            let sample = Activations {
                inputs: acts
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(l, h)| {
                        if l >= first {
                            h.row(i).transpose()
                        } else {
                            DVector::zeros(0)
                        }
                    })
                    .collect(),
                pre: acts
                    .pre
                    .iter()
                    .enumerate()
                    .map(|(l, a)| {
                        if l + 1 >= first {
                            a.row(i).transpose()
                        } else {
                            DVector::zeros(0)
                        }
                    })
                    .collect(),
            };
            jacs.push(self.jacobian_from_cache(&sample, subset));
        }
        Ok((acts.logits().clone(), jacs))
    }

    /// Output of the first `layer` layers (the frozen feature extractor in
    /// front of a trailing subset), one row per sample.
    pub fn features(&self, xs: &DMatrix<f64>, layer: usize) -> Result<DMatrix<f64>> {
        self.check_input(xs.ncols())?;
        if layer == 0 {
            return Ok(xs.clone());
        }
        let mut h = xs.clone();
        for l in 0..layer {
            let spec = self.layers[l];
            let w = self.weights(l);
            let mut a = &h * w.rows(0, spec.input_dim);
            let bias: RowDVector<f64> = w.row(spec.input_dim).into_owned();
            for mut row in a.row_iter_mut() {
                row += &bias;
            }
            a.apply(|v| *v = spec.activation.apply(*v));
            h = a;
        }
        Ok(h)
    }

    /// Logits computed from the frozen features `h` (input of layer
    /// `first_layer`) with the trailing parameters replaced by `theta_r`.
    pub fn trailing_logits(&self, first_layer: usize, h: &DVector<f64>, theta_r: &[f64]) -> DVector<f64> {
        let mut h = h.clone();
        for l in first_layer..self.n_layers() {
            let spec = self.layers[l];
            let range = self.layer_range(l);
            let w = DMatrixView::from_slice(&theta_r[range], spec.input_dim + 1, spec.output_dim);
            let mut a = DVector::zeros(spec.output_dim);
            for j in 0..spec.output_dim {
                let col = w.column(j);
                a[j] = col.rows(0, spec.input_dim).dot(&h) + col[spec.input_dim];
            }
            if l + 1 < self.n_layers() {
                a.apply(|v| *v = spec.activation.apply(*v));
            }
            h = a;
        }
        h
    }
}

fn layer_offsets(layers: &[LayerSpec]) -> Vec<usize> {
    let mut offsets = vec![0; layers.len()];
    let mut off = 0;
    for l in (0..layers.len()).rev() {
        offsets[l] = off;
        off += layers[l].n_params();
    }
    offsets
}

/// Writes `vec([h; 1] delta[:, m]^T)` into column `m` of `jac` starting at
/// row `offset`.
fn fill_outer_block(jac: &mut DMatrix<f64>, offset: usize, h: &DVector<f64>, delta: &DMatrix<f64>) {
    let n_in = h.len();
    let stride = n_in + 1;
    for m in 0..delta.ncols() {
        let mut col = jac.column_mut(m);
        for j in 0..delta.nrows() {
            let d = delta[(j, m)];
            let base = offset + j * stride;
            if d != 0.0 {
                for i in 0..n_in {
                    col[base + i] = h[i] * d;
                }
            }
            col[base + n_in] = d;
        }
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A probability mass function over the classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Pmf(DVector<f64>);

impl Pmf {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn new(p: DVector<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::domain("empty probability vector"));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("probabilities must be finite and non-negative"));
        }
        let s = p.sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::domain(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(p))
    }

    /// Wraps a vector known to be on the simplex, e.g. a softmax output.
    pub(crate) fn from_vector_unchecked(p: DVector<f64>) -> Self {
        Self(p)
    }

    pub fn uniform(m: usize) -> Self {
        Self(DVector::from_element(m, 1.0 / m as f64))
    }

    pub fn probs(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(self.0.as_slice())
    }

    pub fn max_prob(&self) -> f64 {
        self.0.max()
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax(z / t)` with max subtraction.
pub fn softmax(z: &[f64], t: f64) -> Result<Pmf> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("softmax input has non-finite entries"));
    }
    Ok(Pmf(DVector::from_vec(softmax_vec(z, t))))
}

pub(crate) fn softmax_vec(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = z.iter().map(|v| ((v - max) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    e
}

/// `ln softmax(z / t)` computed without forming the probabilities.
pub fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|v| v - lse).collect()
}

/// `diag(p) - p p^T`, i.e. `df_j / dg_i = f_j (delta_ij - f_i)`.
pub fn softmax_jacobian(p: &Pmf) -> DMatrix<f64> {
    let p = p.probs();
    let mut j = -(p * p.transpose());
    for i in 0..p.len() {
        j[(i, i)] += p[i];
    }
    j
}

/// `d ln f_y / dg = e_y - f`.
pub fn logit_gradient(p: &Pmf, y: usize) -> DVector<f64> {
    let mut g = -p.probs().clone();
    g[y] += 1.0;
    g
}

/// `L_N(theta) = sum_n ln f_{y_n}(x_n; theta)`, via log-sum-exp.
pub fn log_likelihood(model: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("log-likelihood of an empty dataset"));
    }
    data.check_model(model)?;
    let logits = model.logits_batch(data.inputs())?;
    let mut ll = 0.0;
    for (i, &y) in data.labels().iter().enumerate() {
        let z: Vec<f64> = logits.row(i).iter().copied().collect();
        ll += z[y] - log_sum_exp(&z);
    }
    Ok(ll)
}

/// Gradient of [`log_likelihood`] with respect to all of `theta`.
pub fn grad_loglik(model: &Mlp, data: &Dataset) -> Result<DVector<f64>> {
    if data.is_empty() {
        return Err(Error::domain("gradient over an empty dataset"));
    }
    data.check_model(model)?;
    let mut grad = vec![0.0; model.n_params()];
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let n = EVAL_CHUNK.min(data.len() - start);
        let xs = data.inputs().rows(start, n).into_owned();
        model.accumulate_nll_gradient(&xs, &data.labels()[start..start + n], -1.0, &mut grad)?;
    }
    Ok(DVector::from_vec(grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(widths: &[usize], seed: u64) -> Mlp {
        let layers = LayerSpec::chain(widths).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = layers.iter().map(LayerSpec::n_params).sum();
        let theta = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        Mlp::new(layers, theta).unwrap()
    }

    #[test]
    fn n_params_matches_layer_sum() {
        let layers = LayerSpec::chain(&[784, 300, 100, 40, 10]).unwrap();
        let model = Mlp::zeros(layers).unwrap();
        assert_eq!(model.n_params(), 785 * 300 + 301 * 100 + 101 * 40 + 41 * 10);
        let sub = TrailingSubset::new(&model, 2).unwrap();
        assert_eq!(sub.len(), 4450);
    }

    #[test]
    fn chain_rejects_mismatched_layers() {
        let layers = vec![
            LayerSpec::new(3, 4, Activation::Relu),
            LayerSpec::new(5, 2, Activation::Identity),
        ];
        assert!(matches!(Mlp::zeros(layers), Err(Error::Config(_))));
        let layers = vec![LayerSpec::new(3, 4, Activation::Relu)];
        assert!(matches!(Mlp::zeros(layers), Err(Error::Config(_))));
    }

    #[test]
    fn theta_order_is_last_layer_first() {
        let model = random_model(&[3, 4, 2], 1);
        assert_eq!(model.layer_range(1), 0..10);
        assert_eq!(model.layer_range(0), 10..26);
    }

    #[test]
    fn matrices_round_trip_bit_exactly() {
        let model = random_model(&[5, 4, 3, 2], 7);
        let back = Mlp::from_matrices(model.layers().to_vec(), &model.to_matrices()).unwrap();
        assert_eq!(back.theta(), model.theta());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let model = Mlp::zeros(LayerSpec::chain(&[4, 3]).unwrap()).unwrap();
        let g = model.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(g, DVector::zeros(3));
    }

    #[test]
    fn identity_layer_is_identity_map() {
        let layers = LayerSpec::chain(&[3, 3]).unwrap();
        let mut w = DMatrix::zeros(4, 3);
        w.view_mut((0, 0), (3, 3)).fill_with_identity();
        let model = Mlp::from_matrices(layers, &[w]).unwrap();
        let g = model.forward(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn two_layer_forward_matches_hand_computation() {
        // Layer 0: 2 -> 2 ReLU, layer 1: 2 -> 2 identity.
        let w0 = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 0.25, 2.0, 0.1, 0.0]);
        let w1 = DMatrix::from_row_slice(3, 2, &[1.0, -0.5, 2.0, 1.0, 0.0, 0.3]);
        let model = Mlp::from_matrices(LayerSpec::chain(&[2, 2, 2]).unwrap(), &[w0, w1]).unwrap();
        // x = (1, -1):
        // a1 = (0.5 - 0.25 + 0.1, -1 - 2 + 0) = (0.35, -3) -> h1 = (0.35, 0)
        // g = (0.35 * 1 + 0 * 2 + 0, 0.35 * -0.5 + 0 + 0.3) = (0.35, 0.125)
        let g = model.forward(&[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(g[0], 0.35, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.125, epsilon = 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let model = random_model(&[3, 2], 0);
        assert!(matches!(model.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_forward_matches_single() {
        let model = random_model(&[4, 6, 5, 3], 3);
        let xs = DMatrix::from_fn(7, 4, |i, j| ((i * 3 + j) as f64).sin());
        let batch = model.logits_batch(&xs).unwrap();
        for i in 0..7 {
            let x: Vec<f64> = xs.row(i).iter().copied().collect();
            let g = model.forward(&x).unwrap();
            for m in 0..3 {
                assert_abs_diff_eq!(batch[(i, m)], g[m], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 10], 1.0).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.1).abs() < 1e-15));

        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.probs()[1], 1.0 / 3.0, epsilon = 1e-15);

        let hot = softmax(&[3.0, 0.0, 0.0], 1e6).unwrap();
        assert!(hot.probs().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-4));
        let cold = softmax(&[3.0, 0.0, 0.0], 1e-6).unwrap();
        assert!(cold.probs()[0] >= 1.0 - 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[f64::NAN, 0.0], 1.0), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&[0.0, 0.0], 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_jacobian_examples() {
        let j = softmax_jacobian(&Pmf::uniform(2));
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]));
        let j = softmax_jacobian(&Pmf::from_slice(&[0.0, 1.0, 0.0]).unwrap());
        assert_eq!(j, DMatrix::zeros(3, 3));
    }

    #[test]
    fn logit_gradient_vanishes_for_confident_correct_prediction() {
        let p = Pmf::from_slice(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(logit_gradient(&p, 1), DVector::zeros(3));
        let g = logit_gradient(&Pmf::uniform(2), 0);
        assert_eq!(g.as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn relu_dead_unit_has_zero_jacobian_rows() {
        // Hidden unit 1 gets a strongly negative bias, so it is always off.
        let w0 = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 0.0, -100.0]);
        let w1 = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 0.5, 0.5]);
        let model = Mlp::from_matrices(LayerSpec::chain(&[2, 2, 2]).unwrap(), &[w0, w1]).unwrap();
        let sub = TrailingSubset::all(&model);
        let jac = model.jacobian_g(&[0.3, 0.2], &sub).unwrap();
        // Layer 0 occupies rows 6..12; column 1 of W0 is rows 9..12.
        for r in 9..12 {
            for m in 0..2 {
                assert_eq!(jac[(r, m)], 0.0);
            }
        }
        assert!(jac.rows(6, 3).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn last_layer_jacobian_is_augmented_features() {
        let model = random_model(&[3, 4, 2], 11);
        let x = [0.2, -0.4, 0.9];
        let acts = model.forward_cached(&x).unwrap();
        let h = &acts.inputs[1];
        let sub = TrailingSubset::new(&model, 1).unwrap();
        let jac = model.jacobian_g(&x, &sub).unwrap();
        assert_eq!(jac.shape(), (10, 2));
        for m in 0..2 {
            for j in 0..2 {
                for i in 0..5 {
                    let expected = if j == m {
                        if i < 4 {
                            h[i]
                        } else {
                            1.0
                        }
                    } else {
                        0.0
                    };
                    assert_eq!(jac[(j * 5 + i, m)], expected);
                }
            }
        }
    }

    #[test]
    fn trailing_subset_from_range() {
        let model = random_model(&[3, 4, 2], 0);
        assert_eq!(TrailingSubset::from_range(&model, 0..10).unwrap().layers(), 1);
        assert_eq!(TrailingSubset::from_range(&model, 0..26).unwrap().layers(), 2);
        assert!(matches!(
            TrailingSubset::from_range(&model, 10..26),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrailingSubset::from_range(&model, 0..9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_jacobian_matches_per_class_backprop() {
        // Backprop of -e_m^T g with weight -1 yields dg_m/dtheta.
        let model = random_model(&[4, 5, 3], 5);
        let x = [0.3, -0.1, 0.8, 0.5];
        let jac = model.jacobian_g(&x, &TrailingSubset::all(&model)).unwrap();
        let xs = DMatrix::from_row_slice(1, 4, &x);
        let acts = model.forward_batch(&xs).unwrap();
        for m in 0..3 {
            let mut delta = DMatrix::zeros(1, 3);
            delta[(0, m)] = 1.0;
            let mut grad = vec![0.0; model.n_params()];
            model.backprop_batch(&acts, delta, 0, &mut grad);
            for (k, g) in grad.iter().enumerate() {
                assert_abs_diff_eq!(jac[(k, m)], *g, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn batched_jacobians_match_single() {
        let model = random_model(&[4, 6, 5, 3], 9);
        let xs = DMatrix::from_fn(3, 4, |i, j| ((2 * i + j) as f64).cos());
        let sub = TrailingSubset::new(&model, 2).unwrap();
        let (logits, jacs) = model.jacobians_batch(&xs, &sub).unwrap();
        for i in 0..3 {
            let x: Vec<f64> = xs.row(i).iter().copied().collect();
            let j = model.jacobian_g(&x, &sub).unwrap();
            assert!((&jacs[i] - &j).amax() < 1e-13);
            let g = model.forward(&x).unwrap();
            assert!((logits.row(i).transpose() - g).amax() < 1e-13);
        }
    }

    #[test]
    fn trailing_logits_with_own_parameters_match_forward() {
        let model = random_model(&[4, 6, 5, 3], 2);
        let x = [0.1, 0.2, -0.3, 0.4];
        let acts = model.forward_cached(&x).unwrap();
        let sub = TrailingSubset::new(&model, 2).unwrap();
        let g = model.trailing_logits(1, &acts.inputs[1], &model.theta()[sub.range()]);
        assert!((g - acts.logits()).amax() < 1e-14);
    }
}
