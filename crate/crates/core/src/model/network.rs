//! Per-point segmenter: trunk (backbone → embedding → classifier) plus the
//! projection/prediction heads used by the temporal consistency term.
//!
//! Gradients are computed by explicit reverse-mode passes over cached
//! activations. Weight-gradient reductions run over fixed-size row chunks and
//! are summed in chunk order, so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::ProbabilityField;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{self, ExecMode, DEFAULT_CHUNK};

pub const HIDDEN_DIM: usize = 64;
pub const EMBED_DIM: usize = 32;
pub const PROJ_DIM: usize = 32;
pub const PRED_HIDDEN_DIM: usize = 16;

/// Fully connected layer, `y = x·W + b` with `W` stored `in × out`. A layer
/// without bias holds an empty `bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize, bias_len: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; bias_len],
        }
    }

    /// Glorot-uniform weights, zero biases.
    fn glorot(fan_in: usize, fan_out: usize, bias_len: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Dense {
            weight: Matrix::from_vec(fan_in, fan_out, data),
            bias: vec![0.0; bias_len],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn num_values(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.data().iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight
            .data_mut()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Backbone1,
    Backbone2,
    Embed,
    Classifier,
    Encoder1,
    Encoder2,
    Predictor1,
    Predictor2,
}

impl Layer {
    pub const ALL: [Layer; 8] = [
        Layer::Backbone1,
        Layer::Backbone2,
        Layer::Embed,
        Layer::Classifier,
        Layer::Encoder1,
        Layer::Encoder2,
        Layer::Predictor1,
        Layer::Predictor2,
    ];

    fn shape(self, features: usize, classes: usize) -> (usize, usize) {
        match self {
            Layer::Backbone1 => (features, HIDDEN_DIM),
            Layer::Backbone2 => (HIDDEN_DIM, HIDDEN_DIM),
            Layer::Embed => (HIDDEN_DIM, EMBED_DIM),
            Layer::Classifier => (EMBED_DIM, classes),
            Layer::Encoder1 => (EMBED_DIM, PROJ_DIM),
            Layer::Encoder2 => (PROJ_DIM, PROJ_DIM),
            Layer::Predictor1 => (PROJ_DIM, PRED_HIDDEN_DIM),
            Layer::Predictor2 => (PRED_HIDDEN_DIM, PROJ_DIM),
        }
    }

    /// Bias length of the layer. Head layers are bias-free: without
    /// normalization a shared bias is the cheapest way for the consistency
    /// term to collapse all outputs onto one direction.
    pub fn bias_len(self, features: usize, classes: usize) -> usize {
        if self.is_head() {
            0
        } else {
            self.shape(features, classes).1
        }
    }

    /// Layers that belong to the projection/prediction heads.
    pub fn is_head(self) -> bool {
        matches!(
            self,
            Layer::Encoder1 | Layer::Encoder2 | Layer::Predictor1 | Layer::Predictor2
        )
    }
}

/// An ordered set of layers shaped like the network. Used both for the
/// parameters themselves and for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSet {
    layers: Vec<Dense>,
}

impl LayerSet {
    pub fn zeros(features: usize, classes: usize) -> Self {
        LayerSet {
            layers: Layer::ALL
                .iter()
                .map(|l| {
                    let (i, o) = l.shape(features, classes);
                    Dense::zeros(i, o, l.bias_len(features, classes))
                })
                .collect(),
        }
    }

    pub fn layer(&self, l: Layer) -> &Dense {
        &self.layers[l as usize]
    }

    pub fn layer_mut(&mut self, l: Layer) -> &mut Dense {
        &mut self.layers[l as usize]
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(Dense::num_values).sum()
    }

    /// All values in fixed order: per layer, weights then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::values_mut)
    }

    pub fn add_assign(&mut self, other: &LayerSet) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.values_mut() {
            *v *= s;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&v| v == 0.0)
    }

    fn same_shape(&self, other: &LayerSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.rows() == b.weight.rows()
                    && a.weight.cols() == b.weight.cols()
                    && a.bias.len() == b.bias.len()
            })
    }
}

pub type Gradients = LayerSet;

/// All network parameters. The input standardization is fixed at pretraining
/// time and is not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub layers: LayerSet,
}

/// Activations of one trunk pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    x0: Matrix,
    a1: Matrix,
    h1: Matrix,
    a2: Matrix,
    h2: Matrix,
    embeddings: Matrix,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub probs: ProbabilityField,
    pub logits: Matrix,
    pub cache: TrunkCache,
}

impl Forward {
    pub fn embeddings(&self) -> &Matrix {
        &self.cache.embeddings
    }
}

fn active(m: &Matrix) -> impl Iterator<Item = bool> + '_ {
    m.data().iter().map(|&v| v > 0.0)
}

impl TrunkCache {
    /// Which rectifier units are open. A finite-difference step that changes
    /// this pattern straddles a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        active(&self.h1).chain(active(&self.h2)).collect()
    }
}

impl HeadCache {
    pub fn relu_pattern(&self) -> Vec<bool> {
        active(&self.e).chain(active(&self.p)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    input: Matrix,
    e_pre: Matrix,
    e_norm: Option<BatchNorm>,
    e: Matrix,
    proj_norm: Option<BatchNorm>,
    proj: Matrix,
    p_pre: Matrix,
    p_norm: Option<BatchNorm>,
    p: Matrix,
}

/// Per-column standardization over the rows of one batch, without learned
/// scale or shift. Keeps the head outputs from collapsing onto one vector.
#[derive(Clone, Debug)]
struct BatchNorm {
    out: Matrix,
    inv_std: Vec<f64>,
}

const NORM_EPS: f64 = 1e-5;

impl BatchNorm {
    fn forward(x: &Matrix) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        let count = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / count + NORM_EPS).sqrt())
            .collect();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (x.row(i)[k] - mean[k]) * inv_std[k];
            }
        }
        BatchNorm { out, inv_std }
    }

    /// `dx = (dy − mean(dy) − y·mean(dy ⊙ y)) / σ`, column by column.
    fn backward(&self, dy: &Matrix) -> Matrix {
        let (n, d) = (dy.rows(), dy.cols());
        let count = n.max(1) as f64;
        let mut mean_dy = vec![0.0; d];
        let mut mean_dyy = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                mean_dy[k] += dy.row(i)[k];
                mean_dyy[k] += dy.row(i)[k] * self.out.row(i)[k];
            }
        }
        mean_dy.iter_mut().for_each(|m| *m /= count);
        mean_dyy.iter_mut().for_each(|m| *m /= count);
        let mut dx = Matrix::zeros(n, d);
        for i in 0..n {
            for (k, g) in dx.row_mut(i).iter_mut().enumerate() {
                let y = self.out.row(i)[k];
                *g = (dy.row(i)[k] - mean_dy[k] - y * mean_dyy[k]) * self.inv_std[k];
            }
        }
        dx
    }
}

fn maybe_norm(x: Matrix, normalize: bool) -> (Matrix, Option<BatchNorm>) {
    if normalize {
        let bn = BatchNorm::forward(&x);
        (bn.out.clone(), Some(bn))
    } else {
        (x, None)
    }
}

fn maybe_norm_backward(dy: Matrix, norm: &Option<BatchNorm>) -> Matrix {
    match norm {
        Some(bn) => bn.backward(&dy),
        None => dy,
    }
}

#[derive(Clone, Debug)]
pub struct HeadForward {
    /// Encoder output, the stop-gradient target.
    pub proj: Matrix,
    /// Predictor output.
    pub pred: Matrix,
    pub cache: HeadCache,
}

fn affine(x: &Matrix, layer: &Dense, mode: ExecMode) -> Matrix {
    let out = layer.fan_out();
    let mut y = Matrix::zeros(x.rows(), out);
    par::fill_rows(y.data_mut(), out, mode, |i, row| {
        if layer.bias.is_empty() {
            row.fill(0.0);
        } else {
            row.copy_from_slice(&layer.bias);
        }
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (r, &w) in row.iter_mut().zip(layer.weight.row(k)) {
                *r += xv * w;
            }
        }
    });
    y
}

fn relu(a: &Matrix) -> Matrix {
    let data = a.data().iter().map(|&v| v.max(0.0)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// `dy ⊙ [pre > 0]`
fn relu_backward(dy: Matrix, pre: &Matrix) -> Matrix {
    let mut d = dy;
    for (g, &p) in d.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

/// Accumulates `xᵀ·dy` and `Σ dy` into `grad`; returns `dy·Wᵀ` when asked.
fn dense_backward(
    x: &Matrix,
    dy: &Matrix,
    layer: &Dense,
    grad: &mut Dense,
    need_dx: bool,
    mode: ExecMode,
) -> Option<Matrix> {
    let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
    let partials = par::map_ranges(x.rows(), DEFAULT_CHUNK, mode, |range| {
        let mut gw = vec![0.0; fan_in * fan_out];
        let mut gb = vec![0.0; fan_out];
        for i in range {
            let dyi = dy.row(i);
            for (b, &g) in gb.iter_mut().zip(dyi) {
                *b += g;
            }
            for (k, &xv) in x.row(i).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (w, &g) in gw[k * fan_out..(k + 1) * fan_out].iter_mut().zip(dyi) {
                    *w += xv * g;
                }
            }
        }
        (gw, gb)
    });
    for (gw, gb) in partials {
        for (a, b) in grad.weight.data_mut().iter_mut().zip(&gw) {
            *a += b;
        }
        for (a, b) in grad.bias.iter_mut().zip(&gb) {
            *a += b;
        }
    }
    need_dx.then(|| {
        let mut dx = Matrix::zeros(x.rows(), fan_in);
        par::fill_rows(dx.data_mut(), fan_in, mode, |i, row| {
            let dyi = dy.row(i);
            for (k, r) in row.iter_mut().enumerate() {
                *r = layer
                    .weight
                    .row(k)
                    .iter()
                    .zip(dyi)
                    .map(|(w, g)| w * g)
                    .sum();
            }
        });
        dx
    })
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Matrix) -> Vec<f64> {
    let c = logits.cols();
    let mut out = vec![0.0; logits.data().len()];
    for (i, row) in out.chunks_mut(c).enumerate() {
        let l = logits.row(i);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row.iter_mut().zip(l) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

impl NetworkParams {
    /// Seeded initialization with identity input standardization.
    pub fn init(features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = LayerSet {
            layers: Layer::ALL
                .iter()
                .map(|l| {
                    let (i, o) = l.shape(features, classes);
                    Dense::glorot(i, o, l.bias_len(features, classes), &mut rng)
                })
                .collect(),
        };
        NetworkParams {
            input_mean: vec![0.0; features],
            input_scale: vec![1.0; features],
            layers,
        }
    }

    /// All-zero weights and biases.
    pub fn zeros(features: usize, classes: usize) -> Self {
        NetworkParams {
            input_mean: vec![0.0; features],
            input_scale: vec![1.0; features],
            layers: LayerSet::zeros(features, classes),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.layer(Layer::Backbone1).fan_in()
    }

    pub fn classes(&self) -> usize {
        self.layers.layer(Layer::Classifier).fan_out()
    }

    pub fn layer(&self, l: Layer) -> &Dense {
        self.layers.layer(l)
    }

    pub fn zero_grads(&self) -> Gradients {
        LayerSet::zeros(self.feature_dim(), self.classes())
    }

    pub fn num_trainable(&self) -> usize {
        self.layers.num_values()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().all(|v| v.is_finite())
            && self
                .input_mean
                .iter()
                .chain(&self.input_scale)
                .all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, grads: &Gradients) -> Result<()> {
        if self.layers.same_shape(grads) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(
                "gradient shapes differ from parameters".into(),
            ))
        }
    }

    fn standardize(&self, features: &Matrix) -> Result<Matrix> {
        let f = self.feature_dim();
        if features.cols() != f {
            return Err(Error::ShapeMismatch(format!(
                "network expects {f} features, got {}",
                features.cols()
            )));
        }
        if !features.is_finite() {
            return Err(Error::ShapeMismatch("non-finite input features".into()));
        }
        let mut x0 = features.clone();
        for i in 0..x0.rows() {
            for (j, v) in x0.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.input_mean[j]) / self.input_scale[j];
            }
        }
        Ok(x0)
    }

    pub fn forward(&self, features: &Matrix, mode: ExecMode) -> Result<Forward> {
        let x0 = self.standardize(features)?;
        let a1 = affine(&x0, self.layer(Layer::Backbone1), mode);
        let h1 = relu(&a1);
        let a2 = affine(&h1, self.layer(Layer::Backbone2), mode);
        let h2 = relu(&a2);
        let embeddings = affine(&h2, self.layer(Layer::Embed), mode);
        let logits = affine(&embeddings, self.layer(Layer::Classifier), mode);
        let probs = ProbabilityField::from_raw(softmax_rows(&logits), self.classes())?;
        Ok(Forward {
            probs,
            logits,
            cache: TrunkCache {
                x0,
                a1,
                h1,
                a2,
                h2,
                embeddings,
            },
        })
    }

    /// Backpropagates `d_logits` and/or `d_embed` through the trunk, adding
    /// into `grads`.
    pub fn backward_trunk(
        &self,
        cache: &TrunkCache,
        d_logits: Option<&Matrix>,
        d_embed: Option<&Matrix>,
        grads: &mut Gradients,
        mode: ExecMode,
    ) {
        let n = cache.x0.rows();
        let mut dz = match d_logits {
            Some(dl) => dense_backward(
                &cache.embeddings,
                dl,
                self.layer(Layer::Classifier),
                grads.layer_mut(Layer::Classifier),
                true,
                mode,
            )
            .expect("dx requested"),
            None => Matrix::zeros(n, EMBED_DIM),
        };
        if let Some(de) = d_embed {
            for (a, b) in dz.data_mut().iter_mut().zip(de.data()) {
                *a += b;
            }
        }
        let dh2 = dense_backward(
            &cache.h2,
            &dz,
            self.layer(Layer::Embed),
            grads.layer_mut(Layer::Embed),
            true,
            mode,
        )
        .expect("dx requested");
        let da2 = relu_backward(dh2, &cache.a2);
        let dh1 = dense_backward(
            &cache.h1,
            &da2,
            self.layer(Layer::Backbone2),
            grads.layer_mut(Layer::Backbone2),
            true,
            mode,
        )
        .expect("dx requested");
        let da1 = relu_backward(dh1, &cache.a1);
        dense_backward(
            &cache.x0,
            &da1,
            self.layer(Layer::Backbone1),
            grads.layer_mut(Layer::Backbone1),
            false,
            mode,
        );
    }

    /// Encoder `h` and predictor `f` over embedding rows. With `normalize`,
    /// hidden and encoder outputs are standardized over the rows:
    /// `h = Linear, Norm, ReLU, Linear, Norm` and `f = Linear, Norm, ReLU, Linear`.
    pub fn forward_heads(
        &self,
        embeddings: &Matrix,
        normalize: bool,
        mode: ExecMode,
    ) -> HeadForward {
        let e_pre = affine(embeddings, self.layer(Layer::Encoder1), mode);
        let (e_in, e_norm) = maybe_norm(e_pre, normalize);
        let e = relu(&e_in);
        let (proj, proj_norm) =
            maybe_norm(affine(&e, self.layer(Layer::Encoder2), mode), normalize);
        let p_pre = affine(&proj, self.layer(Layer::Predictor1), mode);
        let (p_in, p_norm) = maybe_norm(p_pre, normalize);
        let p = relu(&p_in);
        let pred = affine(&p, self.layer(Layer::Predictor2), mode);
        HeadForward {
            proj: proj.clone(),
            pred,
            cache: HeadCache {
                input: embeddings.clone(),
                e_pre: e_in,
                e_norm,
                e,
                proj_norm,
                proj,
                p_pre: p_in,
                p_norm,
                p,
            },
        }
    }

    /// Backpropagates a gradient on the predictor output through `f` and `h`;
    /// returns the gradient on the head input.
    pub fn backward_heads(
        &self,
        cache: &HeadCache,
        d_pred: &Matrix,
        grads: &mut Gradients,
        mode: ExecMode,
    ) -> Matrix {
        let dp = dense_backward(
            &cache.p,
            d_pred,
            self.layer(Layer::Predictor2),
            grads.layer_mut(Layer::Predictor2),
            true,
            mode,
        )
        .expect("dx requested");
        let dp_pre = maybe_norm_backward(relu_backward(dp, &cache.p_pre), &cache.p_norm);
        let dproj = dense_backward(
            &cache.proj,
            &dp_pre,
            self.layer(Layer::Predictor1),
            grads.layer_mut(Layer::Predictor1),
            true,
            mode,
        )
        .expect("dx requested");
        let dproj = maybe_norm_backward(dproj, &cache.proj_norm);
        let de = dense_backward(
            &cache.e,
            &dproj,
            self.layer(Layer::Encoder2),
            grads.layer_mut(Layer::Encoder2),
            true,
            mode,
        )
        .expect("dx requested");
        let de_pre = maybe_norm_backward(relu_backward(de, &cache.e_pre), &cache.e_norm);
        dense_backward(
            &cache.input,
            &de_pre,
            self.layer(Layer::Encoder1),
            grads.layer_mut(Layer::Encoder1),
            true,
            mode,
        )
        .expect("dx requested")
    }

    /// Mutable access to trainable values in [`LayerSet::values`] order.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.values_mut()
    }
}
