use serde::{Deserialize, Serialize};

use crate::diffcore::{axpy, dot, tn_kernel, DenseMatrix, Rng};
use crate::error::{CoclError, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Smooth everywhere, so finite-difference checks never straddle a kink.
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Variance of the hidden-layer weight initializer for a given fan-in.
    pub fn init_variance(self, fan_in: usize) -> f64 {
        match self {
            Activation::Tanh => 1.0 / fan_in as f64,
            Activation::Relu => 2.0 / fan_in as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    pub num_id_classes: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// `false` gives the k-way head used by outlier exposure.
    #[serde(default = "default_true")]
    pub outlier_class: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_embed() -> usize {
    16
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_id_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: default_hidden(),
            num_id_classes,
            embed_dim: default_embed(),
            activation: Activation::default(),
            outlier_class: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_id_classes < 2 {
            return Err(CoclError::validation("need at least 2 ID classes"));
        }
        if self.embed_dim < 2 {
            return Err(CoclError::validation("embedding dimension must be at least 2"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(CoclError::validation("hidden_dims must be non-empty and positive"));
        }
        if self.input_dim == 0 {
            return Err(CoclError::validation("input_dim must be positive"));
        }
        Ok(())
    }

    /// Classifier width: k + 1 with the outlier class, k without.
    pub fn num_logits(&self) -> usize {
        self.num_id_classes + usize::from(self.outlier_class)
    }

    pub fn penultimate_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated non-empty")
    }
}

/// `y = x·W + b` with `W` stored as (in × out).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

impl Affine {
    fn init(fan_in: usize, fan_out: usize, variance: f64, rng: &mut Rng) -> Self {
        // uniform(-a, a) has variance a²/3
        let a = (3.0 * variance).sqrt();
        let w = DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-a, a));
        Self {
            w,
            b: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let n = self.fan_out();
        let mut out = DenseMatrix::zeros(x.rows(), n);
        for i in 0..x.rows() {
            let dst = out.row_mut(i);
            dst.copy_from_slice(&self.b);
            for (p, &a) in x.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, self.w.row(p), dst);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backprop(&self, x: &DenseMatrix, dy: &DenseMatrix, gw: &mut [f64], gb: &mut [f64], need_dx: bool) -> Option<DenseMatrix> {
        tn_kernel(x.data(), dy.data(), x.rows(), self.fan_in(), self.fan_out(), gw);
        for row in dy.iter_rows() {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| {
            DenseMatrix::from_fn(dy.rows(), self.fan_in(), |i, p| dot(dy.row(i), self.w.row(p)))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<Affine>,
    pub classifier: Affine,
    pub proj_hidden: Affine,
    pub proj_out: Affine,
}

/// Gradient buffers laid out exactly like [`ModelParams::tensors`].
pub type ParamGrads = Vec<Vec<f64>>;

impl ModelParams {
    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.encoder
            .iter()
            .chain([&self.classifier, &self.proj_hidden, &self.proj_out])
    }

    /// Every learnable buffer in a fixed order: for each layer (encoder layers,
    /// classifier, projection hidden, projection output) its weights then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.w.data(), l.b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .iter_mut()
            .chain([&mut self.classifier, &mut self.proj_hidden, &mut self.proj_out])
        {
            out.push(l.w.data_mut());
            out.push(l.b.as_mut_slice());
        }
        out
    }

    /// Named tensor shapes, in [`tensors`](Self::tensors) order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.push(format!("encoder.{i}.weight"));
            names.push(format!("encoder.{i}.bias"));
        }
        for head in ["classifier", "proj_hidden", "proj_out"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(CoclError::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Draws fresh parameters.
///
/// Weights are uniform with variance `1/fan_in` (tanh) or `2/fan_in` (ReLU)
/// for hidden layers, and `1/fan_in` for the linear output layers of the
/// classifier and projection head. Biases start at zero.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let act = config.activation;
    let mut encoder = Vec::with_capacity(config.hidden_dims.len());
    let mut fan_in = config.input_dim;
    for &h in &config.hidden_dims {
        encoder.push(Affine::init(fan_in, h, act.init_variance(fan_in), rng));
        fan_in = h;
    }
    let pen = config.penultimate_dim();
    let linear = |n: usize| 1.0 / n as f64;
    let classifier = Affine::init(pen, config.num_logits(), linear(pen), rng);
    let proj_hidden = Affine::init(pen, pen, act.init_variance(pen), rng);
    let proj_out = Affine::init(pen, config.embed_dim, linear(pen), rng);
    Ok(ModelParams {
        config: config.clone(),
        encoder,
        classifier,
        proj_hidden,
        proj_out,
    })
}

/// Per-row logits and unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub logits: DenseMatrix,
    pub embeddings: DenseMatrix,
}

/// Intermediate activations kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: DenseMatrix,
    hidden: Vec<DenseMatrix>,
    proj_hidden: DenseMatrix,
    embed_norms: Vec<f64>,
}

const NORM_FLOOR: f64 = 1e-12;

pub fn forward(params: &ModelParams, batch: &DenseMatrix) -> Result<ModelOutputs> {
    forward_cached(params, batch).map(|(out, _)| out)
}

pub fn forward_cached(params: &ModelParams, batch: &DenseMatrix) -> Result<(ModelOutputs, ForwardCache)> {
    let cfg = &params.config;
    if batch.cols() != cfg.input_dim {
        return Err(CoclError::shape(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            cfg.input_dim
        )));
    }
    let act = cfg.activation;
    let mut hidden = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let input = hidden.last().unwrap_or(batch);
        let mut h = layer.apply(input);
        h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        hidden.push(h);
    }
    let pen = hidden.last().expect("encoder is non-empty");
    let logits = params.classifier.apply(pen);
    let mut proj_hidden = params.proj_hidden.apply(pen);
    proj_hidden.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
    let mut embeddings = params.proj_out.apply(&proj_hidden);
    let mut embed_norms = Vec::with_capacity(batch.rows());
    for i in 0..embeddings.rows() {
        let row = embeddings.row_mut(i);
        let n = dot(row, row).sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
        embed_norms.push(n);
    }
    if !logits.all_finite() || !embeddings.all_finite() {
        return Err(CoclError::numeric("forward pass produced non-finite values"));
    }
    let cache = ForwardCache {
        inputs: batch.clone(),
        hidden,
        proj_hidden,
        embed_norms,
    };
    Ok((ModelOutputs { logits, embeddings }, cache))
}

/// Backpropagates gradients with respect to the logits and the normalized
/// embeddings into every network parameter, accumulating into `grads`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    outputs: &ModelOutputs,
    dlogits: &DenseMatrix,
    dembed: &DenseMatrix,
    grads: &mut ParamGrads,
) -> Result<()> {
    let n = cache.inputs.rows();
    if dlogits.shape() != outputs.logits.shape() || dembed.shape() != outputs.embeddings.shape() {
        return Err(CoclError::shape("gradient shapes must match forward outputs"));
    }
    let act = params.config.activation;
    let ne = params.encoder.len();
    let (enc_grads, head_grads) = grads.split_at_mut(2 * ne);
    let [gcw, gcb, gphw, gphb, gpow, gpob] = head_grads else {
        return Err(CoclError::shape("gradient buffer layout mismatch"));
    };

    let pen = cache.hidden.last().expect("non-empty");
    let mut dpen = params
        .classifier
        .backprop(pen, dlogits, gcw, gcb, true)
        .expect("requested");
    if dembed.data().iter().any(|&v| v != 0.0) {
        // d raw embedding through u -> u/|u|
        let mut draw = DenseMatrix::zeros(n, dembed.cols());
        for i in 0..n {
            let z = outputs.embeddings.row(i);
            let dz = dembed.row(i);
            let proj = dot(z, dz);
            let inv = 1.0 / cache.embed_norms[i];
            for ((d, &zj), &dzj) in draw.row_mut(i).iter_mut().zip(z).zip(dz) {
                *d = (dzj - zj * proj) * inv;
            }
        }
        let mut dph = params
            .proj_out
            .backprop(&cache.proj_hidden, &draw, gpow, gpob, true)
            .expect("requested");
        for (d, &y) in dph.data_mut().iter_mut().zip(cache.proj_hidden.data()) {
            *d *= act.grad_from_output(y);
        }
        let dpen_proj = params
            .proj_hidden
            .backprop(pen, &dph, gphw, gphb, true)
            .expect("requested");
        for (a, b) in dpen.data_mut().iter_mut().zip(dpen_proj.data()) {
            *a += b;
        }
    }

    let mut upstream = dpen;
    for l in (0..ne).rev() {
        for (d, &y) in upstream.data_mut().iter_mut().zip(cache.hidden[l].data()) {
            *d *= act.grad_from_output(y);
        }
        let input = if l == 0 { &cache.inputs } else { &cache.hidden[l - 1] };
        let (gw, rest) = enc_grads[2 * l..].split_first_mut().expect("layout");
        let gb = &mut rest[0];
        match params.encoder[l].backprop(input, &upstream, gw, gb, l > 0) {
            Some(dx) => upstream = dx,
            None => break,
        }
    }
    Ok(())
}
