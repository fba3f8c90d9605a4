//! Vitals transformer encoder, contrastive projection head, classification
//! head and the teacher's note pathway.
//!
//! Parameter names are prefixed by role so towers can be copied between
//! checkpoints: `enc.` (vitals encoder), `proj.` (projection head),
//! `head.` (classifier), `notes.` (note adapter).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::VitalsSeries;
use crate::numerics::{Bound, Graph, ParamStore, Tensor, TensorError, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// Width of one timestep: values plus missingness indicators (2c).
    pub input_channels: usize,
    pub max_timesteps: usize,
    pub pooling: Pooling,
    pub positional_encoding: bool,
    pub projection_dim: usize,
    pub projection_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 128,
            input_channels: 24,
            max_timesteps: 48,
            pooling: Pooling::Mean,
            positional_encoding: true,
            projection_dim: 32,
            projection_bias: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: String| Err(TensorError::ShapeMismatch(m));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.input_channels == 0 || self.max_timesteps == 0 || self.projection_dim == 0 {
            return bad("input_channels, max_timesteps and projection_dim must be positive".into());
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

fn uniform_fan_in(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn linear_params(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
    store.insert(format!("{name}.w"), uniform_fan_in(rng, fan_in, &[fan_in, fan_out]));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }
}

/// Vitals encoder parameters (`enc.*`).
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut Rng) -> ParamStore {
    let d = cfg.model_dim;
    let mut store = ParamStore::new();
    linear_params(&mut store, rng, "enc.in", cfg.input_channels, d, true);
    if cfg.pooling == Pooling::Cls {
        store.insert("enc.cls", uniform_fan_in(rng, d, &[d]));
    }
    for l in 0..cfg.layers {
        for part in ["q", "k", "v", "o"] {
            linear_params(&mut store, rng, &format!("enc.l{l}.{part}"), d, d, true);
        }
        linear_params(&mut store, rng, &format!("enc.l{l}.ff1"), d, cfg.ff_dim, true);
        linear_params(&mut store, rng, &format!("enc.l{l}.ff2"), cfg.ff_dim, d, true);
        for ln in ["ln1", "ln2"] {
            store.insert(format!("enc.l{l}.{ln}.g"), Tensor::full(&[d], 1.0));
            store.insert(format!("enc.l{l}.{ln}.b"), Tensor::zeros(&[d]));
        }
    }
    store
}

/// Two-layer projection head (`proj.*`) with a ReLU in between.
pub fn init_projection(cfg: &EncoderConfig, rng: &mut Rng, store: &mut ParamStore) {
    let d = cfg.model_dim;
    linear_params(store, rng, "proj.0", d, d, cfg.projection_bias);
    linear_params(store, rng, "proj.1", d, cfg.projection_dim, cfg.projection_bias);
}

/// Linear classifier (`head.*`) with `outputs` logits.
pub fn init_classifier(cfg: &EncoderConfig, outputs: usize, rng: &mut Rng, store: &mut ParamStore) {
    linear_params(store, rng, "head", cfg.model_dim, outputs, true);
}

/// Bias-free adapter from ingested note vectors to the model width. Only
/// created when the dimensions differ.
pub fn init_note_adapter(cfg: &EncoderConfig, note_dim: usize, rng: &mut Rng, store: &mut ParamStore) {
    if note_dim != cfg.model_dim {
        linear_params(store, rng, "notes", note_dim, cfg.model_dim, false);
    }
}

fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, p.var(&format!("{name}.w"))?)?;
    match p.var(&format!("{name}.b")) {
        Ok(b) => g.add(y, b),
        Err(_) => Ok(y),
    }
}

fn affine_norm(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, TensorError> {
    let axis = g.shape(x).len() - 1;
    let n = g.layer_norm(x, axis, 1e-5)?;
    let scaled = g.mul(n, p.var(&format!("{name}.g"))?)?;
    g.add(scaled, p.var(&format!("{name}.b"))?)
}

/// Fixed sinusoidal position table of shape `[steps, dim]`.
pub fn sinusoidal_table(steps: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; steps * dim];
    for t in 0..steps {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![steps, dim], data).expect("shape")
}

fn attention(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, l: usize, x: Var) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let split = |g: &mut Graph, v: Var, perm: &[usize], last: [usize; 2]| -> Result<Var, TensorError> {
        let r = g.reshape(v, &[b, t, h, dh])?;
        let r = g.permute(r, perm)?;
        g.reshape(r, &[b * h, last[0], last[1]])
    };
    let q = linear(g, p, &format!("enc.l{l}.q"), x)?;
    let k = linear(g, p, &format!("enc.l{l}.k"), x)?;
    let v = linear(g, p, &format!("enc.l{l}.v"), x)?;
    let q = split(g, q, &[0, 2, 1, 3], [t, dh])?;
    let kt = split(g, k, &[0, 2, 3, 1], [dh, t])?;
    let v = split(g, v, &[0, 2, 1, 3], [t, dh])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[b, h, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    linear(g, p, &format!("enc.l{l}.o"), ctx)
}

/// Encodes a batch `[B, T, input_channels]` into `[B, model_dim]`:
/// input projection, positional encoding, post-norm self-attention blocks,
/// then pooling.
pub fn encode(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, x: Var) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.input_channels || shape[1] == 0 || shape[1] > cfg.max_timesteps {
        return Err(TensorError::ShapeMismatch(format!(
            "encoder expects [B, T<={}, {}], got {shape:?}",
            cfg.max_timesteps, cfg.input_channels
        )));
    }
    let (b, t, d) = (shape[0], shape[1], cfg.model_dim);
    let mut h = linear(g, p, "enc.in", x)?;
    let mut steps = t;
    if cfg.pooling == Pooling::Cls {
        let zeros = g.constant(Tensor::zeros(&[b, 1, d]));
        let cls = g.add(zeros, p.var("enc.cls")?)?;
        h = g.concat(&[cls, h], 1)?;
        steps += 1;
    }
    if cfg.positional_encoding {
        let pe = g.constant(sinusoidal_table(steps, d));
        h = g.add(h, pe)?;
    }
    for l in 0..cfg.layers {
        let a = attention(g, p, cfg, l, h)?;
        let r = g.add(h, a)?;
        h = affine_norm(g, p, &format!("enc.l{l}.ln1"), r)?;
        let f = linear(g, p, &format!("enc.l{l}.ff1"), h)?;
        let f = g.gelu(f);
        let f = linear(g, p, &format!("enc.l{l}.ff2"), f)?;
        let r = g.add(h, f)?;
        h = affine_norm(g, p, &format!("enc.l{l}.ln2"), r)?;
    }
    match cfg.pooling {
        Pooling::Mean => g.mean(h, 1),
        Pooling::Cls => {
            let first = g.slice(h, 1, 0, 1)?;
            g.reshape(first, &[b, d])
        }
    }
}

/// Projection head followed by row-wise ℓ2 normalization.
pub fn project(g: &mut Graph, p: &Bound, h: Var) -> Result<Var, TensorError> {
    let z = linear(g, p, "proj.0", h)?;
    let z = g.relu(z);
    let z = linear(g, p, "proj.1", z)?;
    g.l2_normalize(z, 1)
}

pub fn classify(g: &mut Graph, p: &Bound, h: Var) -> Result<Var, TensorError> {
    linear(g, p, "head", h)
}

/// Maps note vectors `[B, note_dim]` into the model width.
pub fn note_embedding(g: &mut Graph, p: &Bound, notes: Var) -> Result<Var, TensorError> {
    match p.var("notes.w") {
        Ok(w) => g.matmul(notes, w),
        Err(_) => Ok(notes),
    }
}

/// Teacher logits: classifier over the sum of note and vitals embeddings.
pub fn teacher_logits(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, notes: Var, x: Var) -> Result<Var, TensorError> {
    let hv = encode(g, p, cfg, x)?;
    let hn = note_embedding(g, p, notes)?;
    if g.shape(hn) != g.shape(hv) {
        return Err(TensorError::ShapeMismatch(format!(
            "note embedding {:?} vs vitals embedding {:?}",
            g.shape(hn),
            g.shape(hv)
        )));
    }
    let fused = g.add(hn, hv)?;
    classify(g, p, fused)
}

pub fn student_logits(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, x: Var) -> Result<Var, TensorError> {
    let h = encode(g, p, cfg, x)?;
    classify(g, p, h)
}

/// Stacks already-normalized series into `[B, T, 2c]` with each timestep
/// laid out as `[values..., indicators...]`.
pub fn batch_input(series: &[&VitalsSeries]) -> Result<Tensor, TensorError> {
    let first = series
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch("empty batch".into()))?;
    let (t, c) = (first.horizon(), first.channels());
    let mut data = Vec::with_capacity(series.len() * t * 2 * c);
    for s in series {
        if s.horizon() != t || s.channels() != c {
            return Err(TensorError::ShapeMismatch("ragged vitals batch".into()));
        }
        for step in 0..t {
            data.extend_from_slice(s.values_at(step));
            data.extend(s.indicators_at(step).iter().map(|&m| m as f64));
        }
    }
    Tensor::new(vec![series.len(), t, 2 * c], data)
}

fn single_input(cfg: &EncoderConfig, x: &VitalsSeries) -> Result<Tensor, TensorError> {
    if 2 * x.channels() != cfg.input_channels || x.horizon() > cfg.max_timesteps {
        return Err(TensorError::ShapeMismatch(format!(
            "series {}x{} does not fit encoder input {} channels / {} steps",
            x.horizon(),
            2 * x.channels(),
            cfg.input_channels,
            cfg.max_timesteps
        )));
    }
    batch_input(&[x])
}

/// Inference-mode embedding of one series.
pub fn encode_vitals(cfg: &EncoderConfig, params: &ParamStore, x: &VitalsSeries) -> Result<Embedding, TensorError> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let input = g.constant(single_input(cfg, x)?);
    let h = encode(&mut g, &p, cfg, input)?;
    Ok(Embedding(g.value(h).data().to_vec()))
}

/// Inference-mode projection of one embedding to the unit sphere.
pub fn project_contrastive(params: &ParamStore, h: &Embedding) -> Result<Embedding, TensorError> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let input = g.constant(Tensor::new(vec![1, h.0.len()], h.0.clone())?);
    let z = project(&mut g, &p, input)?;
    Ok(Embedding(g.value(z).data().to_vec()))
}

pub fn teacher_forward(
    cfg: &EncoderConfig,
    params: &ParamStore,
    note_emb: &[f64],
    x: &VitalsSeries,
) -> Result<Vec<f64>, TensorError> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let notes = g.constant(Tensor::new(vec![1, note_emb.len()], note_emb.to_vec())?);
    let input = g.constant(single_input(cfg, x)?);
    let z = teacher_logits(&mut g, &p, cfg, notes, input)?;
    Ok(g.value(z).data().to_vec())
}

pub fn student_forward(cfg: &EncoderConfig, params: &ParamStore, x: &VitalsSeries) -> Result<Vec<f64>, TensorError> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let input = g.constant(single_input(cfg, x)?);
    let z = student_logits(&mut g, &p, cfg, input)?;
    Ok(g.value(z).data().to_vec())
}

/// Embeddings for many series, batched, in inference mode. Rows of the
/// result follow the input order.
pub fn embed_all(
    cfg: &EncoderConfig,
    params: &ParamStore,
    series: &[&VitalsSeries],
    batch: usize,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut out = Vec::with_capacity(series.len());
    for chunk in series.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let x = g.constant(batch_input(chunk)?);
        let h = encode(&mut g, &p, cfg, x)?;
        let d = cfg.model_dim;
        out.extend(g.value(h).data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}
