//! Stage 1: view augmentation, the ontology-weighted NT-Xent objective and
//! the pretraining loop.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand_distr::{Distribution, Normal};

use crate::cache::{CacheError, CohortWeightCache};
use crate::data::VitalsSeries;
use crate::encoders::{self, EncoderConfig};
use crate::numerics::{Adam, AdamConfig, Checkpoint, CheckpointMeta, Graph, ParamStore, Tensor, TensorError, Var};
use crate::rng::{self, Rng};
use crate::similarity::{WeightMatrix, WeightSpec};

#[derive(Debug, thiserror::Error)]
pub enum ContrastiveError {
    #[error("embedding row {row} has norm {norm}, expected 1")]
    NormViolation { row: usize, norm: f64 },
    #[error("weight matrix is not symmetric or leaves [0, 1]")]
    AsymmetricWeights,
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub jitter_sigma: f64,
    pub time_mask_ratio: f64,
    pub feature_mask_ratio: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.1,
            time_mask_ratio: 0.1,
            feature_mask_ratio: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite())
            || !(0.0..1.0).contains(&self.time_mask_ratio)
            || !(0.0..1.0).contains(&self.feature_mask_ratio)
        {
            return Err(ContrastiveError::InvalidConfig(format!(
                "augmentation out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Jitter, then time masking, then feature masking. Jitter touches only
/// observed values; a masked timestep loses its values and indicators; a
/// masked feature loses its values at every step.
pub fn augment(x: &VitalsSeries, cfg: &AugmentConfig, rng: &mut Rng) -> VitalsSeries {
    let (t_len, c_len) = (x.horizon(), x.channels());
    let mut out = x.clone();
    let (values, indicators) = out.parts_mut();

    if cfg.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_sigma).expect("sigma checked");
        for (v, &m) in values.iter_mut().zip(indicators.iter()) {
            if m == 1 {
                *v += noise.sample(rng);
            }
        }
    }

    let n_time = (cfg.time_mask_ratio * t_len as f64).round() as usize;
    for t in sample(rng, t_len, n_time.min(t_len)) {
        for c in 0..c_len {
            values[t * c_len + c] = 0.0;
            indicators[t * c_len + c] = 0;
        }
    }

    let n_feat = (cfg.feature_mask_ratio * c_len as f64).round() as usize;
    for c in sample(rng, c_len, n_feat.min(c_len)) {
        for t in 0..t_len {
            values[t * c_len + c] = 0.0;
        }
    }
    out
}

/// Per-anchor weights over the `2B` columns for rows laid out as
/// `[view1 of B patients; view2 of B patients]`.
fn anchor_weights(w: &WeightMatrix) -> (Tensor, Tensor) {
    let b = w.len();
    let n = 2 * b;
    let mut weights = vec![0.0; n * n];
    let mut positive = vec![0.0; n * n];
    for a in 0..n {
        let pos = (a + b) % n;
        for c in 0..n {
            weights[a * n + c] = if c == a {
                0.0
            } else if c == pos {
                positive[a * n + c] = 1.0;
                1.0
            } else {
                w.get(a % b, c % b) as f64
            };
        }
    }
    (
        Tensor::new(vec![n, n], weights).expect("shape"),
        Tensor::new(vec![n, n], positive).expect("shape"),
    )
}

fn check_weights(w: &WeightMatrix) -> Result<(), ContrastiveError> {
    let in_range = w.values().iter().all(|&v| (0.0..=1.0).contains(&v));
    if !in_range || !w.is_symmetric() {
        return Err(ContrastiveError::AsymmetricWeights);
    }
    Ok(())
}

/// Ontology-weighted NT-Xent over `e` of shape `[2B, p]`, where rows `i`
/// and `i + B` are the two views of patient `i` and `w` is the `B × B`
/// patient weight matrix. Averaged over all `2B` anchors.
pub fn ow_ntxent(g: &mut Graph, e: Var, w: &WeightMatrix, tau: f64) -> Result<Var, ContrastiveError> {
    let shape = g.shape(e).to_vec();
    if shape.len() != 2 || shape[0] != 2 * w.len() || w.is_empty() {
        return Err(
            TensorError::ShapeMismatch(format!("embeddings {shape:?} do not pair with {} patients", w.len())).into(),
        );
    }
    if !(tau > 0.0) {
        return Err(ContrastiveError::InvalidConfig(format!("temperature {tau}")));
    }
    for (row, r) in g.value(e).data().chunks(shape[1]).enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-9) {
            return Err(ContrastiveError::NormViolation { row, norm });
        }
    }
    check_weights(w)?;

    let et = g.transpose(e)?;
    let sim = g.matmul(e, et)?;
    let sim = g.scale(sim, 1.0 / tau);
    loss_from_similarity(g, sim, w)
}

/// The loss as a function of the scaled similarity matrix `[2B, 2B]`.
fn loss_from_similarity(g: &mut Graph, sim: Var, w: &WeightMatrix) -> Result<Var, ContrastiveError> {
    let (weights, positive) = anchor_weights(w);
    let lse = g.weighted_logsumexp(sim, &weights)?;
    let mask = g.constant(positive);
    let picked = g.mul(sim, mask)?;
    let pos = g.sum(picked, 1)?;
    let per_anchor = g.sub(lse, pos)?;
    Ok(g.mean_all(per_anchor))
}

/// Loss value for fixed embeddings, outside any training graph.
pub fn ow_ntxent_value(e: &[Vec<f64>], w: &WeightMatrix, tau: f64) -> Result<f64, ContrastiveError> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_rows(e)?);
    let loss = ow_ntxent(&mut g, v, w, tau)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_spec: WeightSpec,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            batch_size: 256,
            epochs: 50,
            learning_rate: 1e-4,
            weight_spec: WeightSpec::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.temperature > 0.0) || !(self.learning_rate > 0.0) {
            return Err(ContrastiveError::InvalidConfig(
                "temperature and learning_rate must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(ContrastiveError::InvalidConfig("batch_size must be at least 2".into()));
        }
        self.weight_spec
            .validate()
            .map_err(|e| ContrastiveError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Checkpoint at the epoch with the lowest mean loss.
    pub best_checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
}

/// Encoder and projection head freshly initialized from `seed`.
pub fn init_pretrain_params(enc: &EncoderConfig, seed: u64) -> ParamStore {
    let mut r = rng::stream(seed, &[rng::TAG_INIT, 1]);
    let mut params = encoders::init_encoder(enc, &mut r);
    encoders::init_projection(enc, &mut r, &mut params);
    params
}

/// One optimization step on a batch; returns the pre-update loss.
fn pretrain_step(
    params: &mut ParamStore,
    adam: &mut Adam,
    enc: &EncoderConfig,
    views: &[VitalsSeries],
    w: &WeightMatrix,
    tau: f64,
) -> Result<f64, ContrastiveError> {
    let refs: Vec<&VitalsSeries> = views.iter().collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(encoders::batch_input(&refs)?);
    let h = encoders::encode(&mut g, &bound, enc, x)?;
    let z = encoders::project(&mut g, &bound, h)?;
    let loss = ow_ntxent(&mut g, z, w, tau)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(ContrastiveError::NonFiniteLoss(adam.steps() + 1));
    }
    g.backward(loss)?;
    adam.step(params, &bound.grads(&g));
    Ok(value)
}

/// Pretrains on `series` (already normalized), where patient `i` of the
/// cohort is row `i` of `weights`. Batches are reshuffled each epoch and
/// the trailing partial batch is dropped.
pub fn pretrain(
    series: &[VitalsSeries],
    weights: &CohortWeightCache,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    aug: &AugmentConfig,
    meta: CheckpointMeta,
) -> Result<PretrainOutcome, ContrastiveError> {
    cfg.validate()?;
    aug.validate()?;
    enc.validate()?;
    let n = series.len();
    if n < 2 || weights.len() != n {
        return Err(ContrastiveError::InvalidConfig(format!(
            "need at least 2 patients with matching weights, got {n} series / {} weight rows",
            weights.len()
        )));
    }
    let batch = cfg.batch_size.min(n);
    let mut params = init_pretrain_params(enc, cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam);
    let mut trace = Vec::new();
    let mut best: Option<(f64, ParamStore, u64)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::TAG_SHUFFLE, epoch as u64]));
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for idx in order.chunks_exact(batch) {
            let make_view = |view: u64| -> Vec<VitalsSeries> {
                idx.par_iter()
                    .map(|&i| {
                        let mut r = rng::stream(aug.seed ^ cfg.seed, &[rng::TAG_AUGMENT, epoch as u64, i as u64, view]);
                        augment(&series[i], aug, &mut r)
                    })
                    .collect()
            };
            let mut views = make_view(0);
            views.extend(make_view(1));
            let w = weights.gather(idx);
            let loss = pretrain_step(&mut params, &mut adam, enc, &views, &w, cfg.temperature)?;
            trace.push(LossRecord {
                step: adam.steps(),
                epoch,
                loss,
            });
            epoch_sum += loss;
            epoch_steps += 1;
        }
        let mean = epoch_sum / epoch_steps.max(1) as f64;
        log::debug!("pretrain epoch {epoch}: mean loss {mean:.6}");
        if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
            best = Some((mean, params.clone(), adam.steps()));
        }
    }

    let with_step = |step: u64| CheckpointMeta {
        step,
        seed: cfg.seed,
        ..meta.clone()
    };
    let (best_params, best_step) = match best {
        Some((_, p, s)) => (p, s),
        None => (params.clone(), 0),
    };
    Ok(PretrainOutcome {
        final_checkpoint: Checkpoint::new(params, with_step(adam.steps())),
        best_checkpoint: Checkpoint::new(best_params, with_step(best_step)),
        trace,
    })
}

/// Delimited loss trace with a `step,epoch,loss` header.
pub fn format_trace(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for r in trace {
        out.push_str(&format!("{},{},{:.10}\n", r.step, r.epoch, r.loss));
    }
    out
}
