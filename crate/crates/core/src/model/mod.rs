//! Encoder / decoder / classifier with the dual-input local-feature path.
//!
//! A thermal patch `x` and its masked copy `x ⊙ m` both run through one
//! shared strided-conv encoder. Each branch is followed by a 1x1 conv and a
//! global average pool; the two branch embeddings are averaged into `e`.
//! Since the 1x1 conv is linear, it is applied after pooling, which is the
//! same function with `H·W` times fewer multiplies.
//!
//! The decoder mirrors the encoder with transposed convolutions and
//! reconstructs `x` from the unmasked branch's feature map. The classifier
//! and the three attention heads read the raw embedding.

pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dml::AttentionWeights;
use layers::{relu_backward, relu_inplace, sigmoid, softmax2, Conv, ConvTranspose, Linear};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model dimensions: {0}")]
    InvalidDim(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters. Every tensor shape follows from these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub c_d: usize,
    /// Encoder output channels per layer; the last entry is `C_f`.
    pub enc_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            c_d: 64,
            enc_channels: vec![8, 16, 32],
        }
    }
}

impl ModelConfig {
    pub fn new(patch_size: usize, c_d: usize, c_f: usize) -> Self {
        Self {
            patch_size,
            c_d,
            enc_channels: vec![8, 16, c_f],
        }
    }

    pub fn c_f(&self) -> usize {
        *self.enc_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_d < 2 {
            return Err(ModelError::InvalidDim(format!("c_d={} < 2", self.c_d)));
        }
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return Err(ModelError::InvalidDim("encoder needs nonzero channels".into()));
        }
        let down = 1usize << self.enc_channels.len();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(down) {
            return Err(ModelError::InvalidDim(format!(
                "patch size {} not divisible by {down}",
                self.patch_size
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// All learnable network weights (prototypes live in [`crate::dml`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub encoder: Vec<Conv>,
    pub head: Linear,
    pub decoder: Vec<ConvTranspose>,
    pub classifier: Linear,
    /// Triplet, center and cosine attention heads, in that order.
    pub attention: [Linear; 3],
}

/// Borrowed view of one named tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

pub const ATTENTION_NAMES: [&str; 3] = ["tl", "cl", "cos"];

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut in_c = 1;
        for &c in &config.enc_channels {
            encoder.push(Conv::zeros(in_c, c));
            in_c = c;
        }
        let mut decoder = Vec::new();
        let rev: Vec<usize> = config.enc_channels.iter().rev().copied().collect();
        for (i, &c) in rev.iter().enumerate() {
            let out = rev.get(i + 1).copied().unwrap_or(1);
            decoder.push(ConvTranspose::zeros(c, out));
        }
        let c_d = config.c_d;
        Ok(Self {
            config: config.clone(),
            seed: 0,
            encoder,
            head: Linear::zeros(config.c_f(), c_d),
            decoder,
            classifier: Linear::zeros(c_d, 2),
            attention: [
                Linear::zeros(c_d, c_d),
                Linear::zeros(c_d, c_d),
                Linear::zeros(c_d, c_d),
            ],
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.config).expect("validated config");
        z.seed = self.seed;
        z
    }

    /// Named tensors in canonical order (the checkpoint order).
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push(TensorView {
                name: format!("enc.{i}.weight"),
                dims: vec![l.out_c, l.in_c, 3, 3],
                data: &l.weight,
            });
            out.push(TensorView {
                name: format!("enc.{i}.bias"),
                dims: vec![l.out_c],
                data: &l.bias,
            });
        }
        out.push(TensorView {
            name: "head.weight".into(),
            dims: vec![self.head.out_f, self.head.in_f, 1, 1],
            data: &self.head.weight,
        });
        out.push(TensorView {
            name: "head.bias".into(),
            dims: vec![self.head.out_f],
            data: &self.head.bias,
        });
        for (i, l) in self.decoder.iter().enumerate() {
            out.push(TensorView {
                name: format!("dec.{i}.weight"),
                dims: vec![l.in_c, l.out_c, 3, 3],
                data: &l.weight,
            });
            out.push(TensorView {
                name: format!("dec.{i}.bias"),
                dims: vec![l.out_c],
                data: &l.bias,
            });
        }
        out.push(TensorView {
            name: "cls.weight".into(),
            dims: vec![2, self.classifier.in_f],
            data: &self.classifier.weight,
        });
        out.push(TensorView {
            name: "cls.bias".into(),
            dims: vec![2],
            data: &self.classifier.bias,
        });
        for (name, l) in ATTENTION_NAMES.iter().zip(&self.attention) {
            out.push(TensorView {
                name: format!("att.{name}.weight"),
                dims: vec![l.out_f, l.in_f],
                data: &l.weight,
            });
            out.push(TensorView {
                name: format!("att.{name}.bias"),
                dims: vec![l.out_f],
                data: &l.bias,
            });
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        for l in &mut self.decoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        for l in &mut self.attention {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.data.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    /// In-place `self <- mu * self + other`, the heavy-ball velocity update.
    pub fn momentum_update(&mut self, mu: f64, other: &ModelParams) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.data.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d = mu * *d + v;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// In-place `w <- w - lr * g`.
    pub fn apply_sgd(&mut self, grads: &ModelParams, lr: f64) -> Result<()> {
        for t in grads.tensors() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteGradient(t.name));
            }
        }
        let src: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.data).collect();
        let src: Vec<Vec<f64>> = src.into_iter().map(<[f64]>::to_vec).collect();
        for (dst, g) in self.tensors_mut().into_iter().zip(src) {
            if dst.len() != g.len() {
                return Err(ModelError::ShapeMismatch("gradient tensor length".into()));
            }
            for (w, gv) in dst.iter_mut().zip(g) {
                *w -= lr * gv;
            }
        }
        Ok(())
    }
}

fn glorot(rng: &mut ChaCha8Rng, w: &mut [f64], fan_in: usize, fan_out: usize) {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in w {
        *v = rng.gen_range(-s..s);
    }
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(config)?;
    p.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut p.encoder {
        glorot(&mut rng, &mut l.weight, l.in_c * 9, l.out_c * 9);
    }
    let h = &mut p.head;
    glorot(&mut rng, &mut h.weight, h.in_f, h.out_f);
    for l in &mut p.decoder {
        glorot(&mut rng, &mut l.weight, l.in_c * 9, l.out_c * 9);
    }
    let c = &mut p.classifier;
    glorot(&mut rng, &mut c.weight, c.in_f, c.out_f);
    for a in &mut p.attention {
        glorot(&mut rng, &mut a.weight, a.in_f, a.out_f);
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct BranchTrace {
    /// Input to each conv layer; `acts[0]` is the branch input.
    pub acts: Vec<Vec<f64>>,
    /// Conv outputs before the rectifier.
    pub pre: Vec<Vec<f64>>,
    /// Final rectified feature map (`C_f x s x s`).
    pub features: Vec<f64>,
    pub pooled: Vec<f64>,
    pub head: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub acts: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub global: BranchTrace,
    pub masked: BranchTrace,
    pub embedding: Embedding,
    pub decoder: Option<DecoderTrace>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
    pub attention: Option<AttentionWeights>,
}

impl ForwardTrace {
    pub fn reconstruction(&self) -> Option<&[f64]> {
        self.decoder.as_ref().map(|d| d.output.as_slice())
    }
}

/// Gradients of the scalar objective with respect to the trace outputs.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub embedding: Option<Vec<f64>>,
    pub reconstruction: Option<Vec<f64>>,
    pub logits: [f64; 2],
    /// Per-head gradients with respect to the attention outputs.
    pub attention: Option<[Vec<f64>; 3]>,
}

pub fn classify(e: &Embedding, params: &ModelParams) -> Result<([f64; 2], [f64; 2])> {
    if e.0.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("classifier"));
    }
    if e.len() != params.classifier.in_f {
        return Err(ModelError::ShapeMismatch(format!(
            "embedding length {} vs {}",
            e.len(),
            params.classifier.in_f
        )));
    }
    let l = params.classifier.forward(&e.0);
    let logits = [l[0], l[1]];
    Ok((logits, softmax2(logits)))
}

/// Attention head output `sigmoid(W e + b)`, kept strictly positive.
pub fn attention_weights(e: &Embedding, params: &ModelParams) -> Result<AttentionWeights> {
    if e.0.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("attention"));
    }
    let head = |l: &Linear| -> Vec<f64> {
        l.forward(&e.0)
            .into_iter()
            .map(|z| sigmoid(z).max(f64::MIN_POSITIVE))
            .collect()
    };
    Ok(AttentionWeights {
        tl: head(&params.attention[0]),
        cl: head(&params.attention[1]),
        cos: head(&params.attention[2]),
    })
}

fn run_branch(params: &ModelParams, input: Vec<f64>) -> BranchTrace {
    let mut size = params.config.patch_size;
    let mut acts = Vec::with_capacity(params.encoder.len());
    let mut pre_all = Vec::with_capacity(params.encoder.len());
    let mut cur = input;
    for layer in &params.encoder {
        let pre = layer.forward(&cur, size);
        let mut next = pre.clone();
        relu_inplace(&mut next);
        acts.push(cur);
        pre_all.push(pre);
        cur = next;
        size /= 2;
    }
    let area = (size * size) as f64;
    let pooled: Vec<f64> = cur
        .chunks_exact(size * size)
        .map(|c| c.iter().sum::<f64>() / area)
        .collect();
    let head = params.head.forward(&pooled);
    BranchTrace {
        acts,
        pre: pre_all,
        features: cur,
        pooled,
        head,
    }
}

/// Runs both encoder branches and averages their head outputs into `e`.
pub fn encode(x: &[f64], mask: &[f64], params: &ModelParams) -> Result<(Embedding, ForwardTrace)> {
    let n = params.config.pixels();
    if x.len() != n || mask.len() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "patch {} / mask {} values, expected {n}",
            x.len(),
            mask.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("encoder input"));
    }
    let global = run_branch(params, x.to_vec());
    let masked = if mask.iter().all(|&m| m == 1.0) {
        global.clone()
    } else {
        run_branch(params, x.iter().zip(mask).map(|(a, b)| a * b).collect())
    };
    let e: Vec<f64> = global
        .head
        .iter()
        .zip(&masked.head)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteActivation("embedding"));
    }
    let embedding = Embedding(e);
    let trace = ForwardTrace {
        input: x.to_vec(),
        global,
        masked,
        embedding: embedding.clone(),
        decoder: None,
        logits: [0.0; 2],
        probs: [0.5; 2],
        attention: None,
    };
    Ok((embedding, trace))
}

/// Reconstructs the input patch from the unmasked branch's feature map.
pub fn decode(trace: &ForwardTrace, params: &ModelParams) -> Result<DecoderTrace> {
    let layers = params.encoder.len();
    let mut size = params.config.patch_size >> layers;
    let expected = params.config.c_f() * size * size;
    if trace.global.features.len() != expected {
        return Err(ModelError::ShapeMismatch(format!(
            "feature map has {} values, expected {expected}",
            trace.global.features.len()
        )));
    }
    let mut acts = Vec::with_capacity(params.decoder.len());
    let mut pre_all = Vec::with_capacity(params.decoder.len());
    let mut cur = trace.global.features.clone();
    for (i, layer) in params.decoder.iter().enumerate() {
        let pre = layer.forward(&cur, size);
        let next = if i + 1 < params.decoder.len() {
            let mut r = pre.clone();
            relu_inplace(&mut r);
            r
        } else {
            pre.clone()
        };
        acts.push(cur);
        pre_all.push(pre);
        cur = next;
        size *= 2;
    }
    Ok(DecoderTrace {
        acts,
        pre: pre_all,
        output: cur,
    })
}

/// Full forward pass: encode, optionally decode, classify and attention.
pub fn forward(
    x: &[f64],
    mask: &[f64],
    params: &ModelParams,
    with_decoder: bool,
) -> Result<ForwardTrace> {
    let (e, mut trace) = encode(x, mask, params)?;
    if with_decoder {
        trace.decoder = Some(decode(&trace, params)?);
    }
    let (logits, probs) = classify(&e, params)?;
    trace.logits = logits;
    trace.probs = probs;
    trace.attention = Some(attention_weights(&e, params)?);
    Ok(trace)
}

fn branch_backward(
    params: &ModelParams,
    branch: &BranchTrace,
    d_head: &[f64],
    extra_features: Option<&[f64]>,
    grads: &mut ModelParams,
) {
    let d_pooled = params.head.backward(&branch.pooled, d_head, &mut grads.head);
    let layers = params.encoder.len();
    let size = params.config.patch_size >> layers;
    let area = (size * size) as f64;
    let mut g: Vec<f64> = d_pooled
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d / area, size * size))
        .collect();
    if let Some(extra) = extra_features {
        for (a, b) in g.iter_mut().zip(extra) {
            *a += b;
        }
    }
    let mut size = size;
    for i in (0..layers).rev() {
        relu_backward(&branch.pre[i], &mut g);
        size *= 2;
        g = params.encoder[i].backward(&branch.acts[i], size, &g, &mut grads.encoder[i]);
    }
}

/// Exact gradients of the objective with respect to every weight.
pub fn backward(trace: &ForwardTrace, upstream: &Upstream, params: &ModelParams) -> Result<ModelParams> {
    let c_d = params.config.c_d;
    let mut grads = params.zeros_like();
    let mut de = match &upstream.embedding {
        Some(d) if d.len() != c_d => {
            return Err(ModelError::ShapeMismatch(format!("d_embedding length {}", d.len())))
        }
        Some(d) => d.clone(),
        None => vec![0.0; c_d],
    };
    let e = &trace.embedding.0;

    if upstream.logits != [0.0, 0.0] {
        let d = params
            .classifier
            .backward(e, &upstream.logits, &mut grads.classifier);
        for (a, b) in de.iter_mut().zip(d) {
            *a += b;
        }
    }

    if let Some(d_att) = &upstream.attention {
        let att = trace
            .attention
            .as_ref()
            .ok_or_else(|| ModelError::ShapeMismatch("trace lacks attention outputs".into()))?;
        for (k, (outs, d)) in [&att.tl, &att.cl, &att.cos].into_iter().zip(d_att).enumerate() {
            if d.len() != c_d {
                return Err(ModelError::ShapeMismatch(format!("d_attention length {}", d.len())));
            }
            let dz: Vec<f64> = outs.iter().zip(d).map(|(a, g)| g * a * (1.0 - a)).collect();
            let back = params.attention[k].backward(e, &dz, &mut grads.attention[k]);
            for (a, b) in de.iter_mut().zip(back) {
                *a += b;
            }
        }
    }

    let d_features = match &upstream.reconstruction {
        Some(d_rec) => {
            let dec = trace
                .decoder
                .as_ref()
                .ok_or_else(|| ModelError::ShapeMismatch("trace lacks decoder outputs".into()))?;
            if d_rec.len() != params.config.pixels() {
                return Err(ModelError::ShapeMismatch(format!("d_reconstruction length {}", d_rec.len())));
            }
            let n = params.decoder.len();
            let mut g = d_rec.clone();
            let mut size = params.config.patch_size;
            for j in (0..n).rev() {
                if j + 1 < n {
                    relu_backward(&dec.pre[j], &mut g);
                }
                size /= 2;
                g = params.decoder[j].backward(&dec.acts[j], size, &g, &mut grads.decoder[j]);
            }
            Some(g)
        }
        None => None,
    };

    let half: Vec<f64> = de.iter().map(|v| 0.5 * v).collect();
    branch_backward(params, &trace.global, &half, d_features.as_deref(), &mut grads);
    branch_backward(params, &trace.masked, &half, None, &mut grads);
    Ok(grads)
}

/// Functional SGD update.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    let mut next = params.clone();
    next.apply_sgd(grads, lr)?;
    Ok(next)
}
