//! Stage 2: a teacher that sees notes and vitals, and a vitals-only student
//! trained on hard labels plus the teacher's temperature-softened outputs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{TaskKind, VitalsSeries};
use crate::encoders::{self, EncoderConfig};
use crate::metrics::evaluate;
use crate::numerics::{Adam, AdamConfig, Checkpoint, CheckpointMeta, Graph, ParamStore, Tensor, TensorError, Var};
use crate::rng::{self, Rng};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("teacher was trained for {teacher}, student data is {student}")]
    TaskMismatch { teacher: String, student: String },
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda_distill: f64,
    /// Probability of feeding the teacher the raw note; the summary is used
    /// otherwise.
    pub raw_note_prob: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            lambda_distill: 5.0,
            raw_note_prob: 0.5,
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let ok = self.temperature > 0.0
            && self.lambda_distill >= 0.0
            && (0.0..=1.0).contains(&self.raw_note_prob)
            && self.learning_rate > 0.0
            && self.batch_size > 0;
        if !ok {
            return Err(DistillError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// Normalized vitals.
    pub vitals: VitalsSeries,
    pub note_raw: Vec<f64>,
    pub note_summary: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub kind: TaskKind,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
}

fn kind_key(kind: TaskKind) -> String {
    match kind {
        TaskKind::Binary => "binary".into(),
        TaskKind::Multiclass(k) => format!("multiclass:{k}"),
    }
}

/// Raw note with probability `p`, summary otherwise.
pub fn select_note_input<'a>(ex: &'a LabeledExample, p: f64, rng: &mut Rng) -> &'a [f64] {
    if p >= 1.0 || (p > 0.0 && rng.random_bool(p)) {
        &ex.note_raw
    } else {
        &ex.note_summary
    }
}

/// Mean cross-entropy (`[B, k]` logits) or binary cross-entropy (`[B, 1]`).
pub fn hard_loss(g: &mut Graph, logits: Var, labels: &[usize], kind: TaskKind) -> Result<Var, DistillError> {
    let classes = kind.classes();
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(DistillError::LabelOutOfRange { label, classes });
    }
    let b = labels.len();
    let per_example = match kind {
        TaskKind::Binary => {
            let z = g.reshape(logits, &[b])?;
            let sp = g.softplus(z);
            let y = g.constant(Tensor::new(vec![b], labels.iter().map(|&y| y as f64).collect())?);
            let yz = g.mul(y, z)?;
            g.sub(sp, yz)?
        }
        TaskKind::Multiclass(k) => {
            let logp = g.log_softmax(logits, 1)?;
            let mut onehot = vec![0.0; b * k];
            for (i, &y) in labels.iter().enumerate() {
                onehot[i * k + y] = 1.0;
            }
            let mask = g.constant(Tensor::new(vec![b, k], onehot)?);
            let picked = g.mul(logp, mask)?;
            let s = g.sum(picked, 1)?;
            g.scale(s, -1.0)
        }
    };
    Ok(g.mean_all(per_example))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Teacher soft targets at temperature `t`: softmax rows or sigmoid.
pub fn soft_targets(teacher_logits: &Tensor, t: f64, kind: TaskKind) -> Tensor {
    let k = kind.outputs();
    let data = match kind {
        TaskKind::Binary => teacher_logits.data().iter().map(|z| sigmoid(z / t)).collect(),
        TaskKind::Multiclass(_) => teacher_logits
            .data()
            .chunks(k)
            .flat_map(|row| {
                let m = row.iter().map(|z| z / t).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|z| (z / t - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / s)
            })
            .collect(),
    };
    Tensor::new(teacher_logits.shape().to_vec(), data).expect("same shape")
}

/// Distillation term against constant teacher logits `[B, k]`:
/// KL(teacher ‖ student) for multiclass, BCE of the student's soft
/// probability against the teacher's for binary. Mean over the batch.
pub fn kd_loss(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: Var,
    t: f64,
    kind: TaskKind,
) -> Result<Var, DistillError> {
    if !(t > 0.0) {
        return Err(DistillError::InvalidConfig(format!("temperature {t}")));
    }
    if teacher_logits.shape() != g.shape(student_logits) {
        return Err(TensorError::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            teacher_logits.shape(),
            g.shape(student_logits)
        ))
        .into());
    }
    if !teacher_logits.is_finite() {
        return Err(TensorError::NonFiniteInput("teacher logits".into()).into());
    }
    let b = teacher_logits.shape()[0];
    let pt = soft_targets(teacher_logits, t, kind);
    let zs = g.scale(student_logits, 1.0 / t);
    let per_example = match kind {
        TaskKind::Binary => {
            // -[p log σ(z) + (1-p) log(1-σ(z))] = softplus(z) - p z
            let z = g.reshape(zs, &[b])?;
            let sp = g.softplus(z);
            let p = g.constant(pt.reshaped(vec![b])?);
            let pz = g.mul(p, z)?;
            g.sub(sp, pz)?
        }
        TaskKind::Multiclass(_) => {
            let neg_entropy: Vec<f64> = pt
                .data()
                .chunks(kind.outputs())
                .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum())
                .collect();
            let logq = g.log_softmax(zs, 1)?;
            let p = g.constant(pt);
            let cross = g.mul(p, logq)?;
            let cross = g.sum(cross, 1)?;
            let h = g.constant(Tensor::new(vec![b], neg_entropy)?);
            g.sub(h, cross)?
        }
    };
    Ok(g.mean_all(per_example))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    /// Digest of the note vectors the teacher consumed this epoch (empty
    /// for vitals-only training).
    pub note_input_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation AUROC.
    pub best: Checkpoint,
    pub final_checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Per-epoch log as delimited text.
pub fn format_epochs(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_auroc,note_input_hash\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.10},{:.10},{}\n",
            e.epoch, e.train_loss, e.val_auroc, e.note_input_hash
        ));
    }
    out
}

enum Objective<'a> {
    Teacher,
    Student {
        targets: &'a [Vec<f64>],
        temperature: f64,
        lambda: f64,
    },
}

fn series_refs(xs: &[LabeledExample], idx: &[usize]) -> Vec<VitalsSeries> {
    idx.iter().map(|&i| xs[i].vitals.clone()).collect()
}

fn stack(rows: &[&[f64]]) -> Result<Tensor, TensorError> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(TensorError::ShapeMismatch("ragged note batch".into()));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Outputs on `examples` in inference mode; teacher uses raw notes.
fn predict(
    enc: &EncoderConfig,
    params: &ParamStore,
    examples: &[LabeledExample],
    teacher: bool,
    batch: usize,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut out = Vec::with_capacity(examples.len());
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let series = series_refs(examples, chunk);
        let refs: Vec<&VitalsSeries> = series.iter().collect();
        let x = g.constant(encoders::batch_input(&refs)?);
        let z = if teacher {
            let notes: Vec<&[f64]> = chunk.iter().map(|&i| examples[i].note_raw.as_slice()).collect();
            let n = g.constant(stack(&notes)?);
            encoders::teacher_logits(&mut g, &p, enc, n, x)?
        } else {
            encoders::student_logits(&mut g, &p, enc, x)?
        };
        let k = g.shape(z)[1];
        out.extend(g.value(z).data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn teacher_predict(
    enc: &EncoderConfig,
    teacher: &Checkpoint,
    examples: &[LabeledExample],
) -> Result<Vec<Vec<f64>>, TensorError> {
    predict(enc, &teacher.params, examples, true, 256)
}

pub fn student_predict(
    enc: &EncoderConfig,
    student: &Checkpoint,
    examples: &[LabeledExample],
) -> Result<Vec<Vec<f64>>, TensorError> {
    predict(enc, &student.params, examples, false, 256)
}

fn val_auroc(enc: &EncoderConfig, params: &ParamStore, data: &TaskData, teacher: bool) -> f64 {
    if data.val.is_empty() {
        return f64::NAN;
    }
    let labels: Vec<usize> = data.val.iter().map(|e| e.label).collect();
    predict(enc, params, &data.val, teacher, 256)
        .ok()
        .and_then(|out| evaluate(data.kind, &out, &labels, 0, 0).ok())
        .map_or(f64::NAN, |r| r.auroc)
}

fn check_labels(data: &TaskData) -> Result<(), DistillError> {
    let classes = data.kind.classes();
    for ex in data.train.iter().chain(&data.val) {
        if ex.label >= classes {
            return Err(DistillError::LabelOutOfRange {
                label: ex.label,
                classes,
            });
        }
    }
    if data.train.is_empty() {
        return Err(DistillError::InvalidConfig("no training examples".into()));
    }
    Ok(())
}

/// Shared supervised loop. Batches come from the `(seed, epoch)` shuffle
/// stream; the last partial batch is kept.
fn train_loop(
    data: &TaskData,
    enc: &EncoderConfig,
    mut params: ParamStore,
    cfg: &DistillConfig,
    objective: Objective<'_>,
    role: &str,
    meta: &CheckpointMeta,
) -> Result<TrainOutcome, DistillError> {
    let teacher = matches!(objective, Objective::Teacher);
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, ParamStore, usize, u64)> = None;
    let n = data.train.len();
    let k = data.kind.outputs();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::TAG_SHUFFLE, epoch as u64]));
        let mut hasher = Sha256::new();
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let series = series_refs(&data.train, idx);
            let refs: Vec<&VitalsSeries> = series.iter().collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.train[i].label).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x = g.constant(encoders::batch_input(&refs)?);
            let loss = match &objective {
                Objective::Teacher => {
                    let notes: Vec<&[f64]> = idx
                        .iter()
                        .map(|&i| {
                            let mut r = rng::stream(cfg.seed, &[rng::TAG_NOTES, epoch as u64, i as u64]);
                            select_note_input(&data.train[i], cfg.raw_note_prob, &mut r)
                        })
                        .collect();
                    for v in &notes {
                        for x in *v {
                            hasher.update(x.to_le_bytes());
                        }
                    }
                    let nt = g.constant(stack(&notes)?);
                    let z = encoders::teacher_logits(&mut g, &bound, enc, nt, x)?;
                    hard_loss(&mut g, z, &labels, data.kind)?
                }
                Objective::Student {
                    targets,
                    temperature,
                    lambda,
                } => {
                    let z = encoders::student_logits(&mut g, &bound, enc, x)?;
                    let hard = hard_loss(&mut g, z, &labels, data.kind)?;
                    if *lambda == 0.0 {
                        hard
                    } else {
                        let rows: Vec<&[f64]> = idx.iter().map(|&i| targets[i].as_slice()).collect();
                        let tl = stack(&rows)?.reshaped(vec![idx.len(), k])?;
                        let kd = kd_loss(&mut g, &tl, z, *temperature, data.kind)?;
                        let kd = g.scale(kd, *lambda);
                        g.add(hard, kd)?
                    }
                }
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(DistillError::NonFiniteLoss(adam.steps() + 1));
            }
            g.backward(loss)?;
            adam.step(&mut params, &bound.grads(&g));
            step_losses.push(value);
            loss_sum += value;
            steps += 1;
        }
        let auroc = val_auroc(enc, &params, data, teacher);
        log::debug!(
            "{role} epoch {epoch}: loss {:.6} val auroc {auroc:.4}",
            loss_sum / steps as f64
        );
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_auroc: auroc,
            note_input_hash: if teacher {
                hex::encode(hasher.finalize())
            } else {
                String::new()
            },
        });
        if !auroc.is_nan() && best.as_ref().is_none_or(|(b, ..)| auroc > *b) {
            best = Some((auroc, params.clone(), epoch, adam.steps()));
        }
    }

    let checkpoint = |params: ParamStore, step: u64, epoch: Option<usize>, auroc: f64| {
        let mut m = meta.clone();
        m.step = step;
        m.seed = cfg.seed;
        m.entries.insert("role".into(), role.into());
        m.entries.insert("task_kind".into(), kind_key(data.kind));
        if let Some(e) = epoch {
            m.entries.insert("epoch".into(), e.to_string());
        }
        m.entries.insert("val_auroc".into(), format!("{auroc:.10}"));
        Checkpoint::new(params, m)
    };
    let final_auroc = epochs.last().map_or(f64::NAN, |e| e.val_auroc);
    let final_checkpoint = checkpoint(params.clone(), adam.steps(), cfg.epochs.checked_sub(1), final_auroc);
    let (best, best_epoch) = match best {
        Some((a, p, e, s)) => (checkpoint(p, s, Some(e), a), e),
        None => (final_checkpoint.clone(), cfg.epochs.saturating_sub(1)),
    };
    Ok(TrainOutcome {
        best,
        final_checkpoint,
        best_epoch,
        epochs,
        step_losses,
    })
}

fn note_dim(data: &TaskData) -> Result<usize, DistillError> {
    let d = data.train[0].note_raw.len();
    if data
        .train
        .iter()
        .chain(&data.val)
        .any(|e| e.note_raw.len() != d || e.note_summary.len() != d)
    {
        return Err(DistillError::InvalidConfig("note embeddings differ in width".into()));
    }
    Ok(d)
}

/// Fresh teacher parameters: vitals tower, note adapter and classifier.
pub fn init_teacher(enc: &EncoderConfig, kind: TaskKind, note_dim: usize, seed: u64) -> ParamStore {
    let mut r = rng::stream(seed, &[rng::TAG_INIT, 2]);
    let mut p = encoders::init_encoder(enc, &mut r);
    encoders::init_note_adapter(enc, note_dim, &mut r, &mut p);
    encoders::init_classifier(enc, kind.outputs(), &mut r, &mut p);
    p
}

/// Student parameters: encoder from `init` when given (fresh otherwise)
/// and a freshly initialized classifier.
pub fn init_student(enc: &EncoderConfig, kind: TaskKind, init: Option<&ParamStore>, seed: u64) -> ParamStore {
    let mut r = rng::stream(seed, &[rng::TAG_INIT, 3]);
    let mut p = encoders::init_encoder(enc, &mut r);
    if let Some(src) = init {
        p.copy_prefix(src, "enc.");
    }
    encoders::init_classifier(enc, kind.outputs(), &mut r, &mut p);
    p
}

pub fn train_teacher(
    data: &TaskData,
    enc: &EncoderConfig,
    cfg: &DistillConfig,
    meta: &CheckpointMeta,
) -> Result<TrainOutcome, DistillError> {
    cfg.validate()?;
    enc.validate()?;
    check_labels(data)?;
    let params = init_teacher(enc, data.kind, note_dim(data)?, cfg.seed);
    train_loop(data, enc, params, cfg, Objective::Teacher, "teacher", meta)
}

/// Student with hard labels plus `λ` times the distillation term against
/// the frozen teacher's raw-note predictions.
pub fn train_student(
    data: &TaskData,
    teacher: &Checkpoint,
    init: Option<&Checkpoint>,
    enc: &EncoderConfig,
    cfg: &DistillConfig,
    meta: &CheckpointMeta,
) -> Result<TrainOutcome, DistillError> {
    cfg.validate()?;
    enc.validate()?;
    check_labels(data)?;
    let want = kind_key(data.kind);
    let got = teacher.meta.entries.get("task_kind").cloned().unwrap_or_default();
    if got != want {
        return Err(DistillError::TaskMismatch {
            teacher: got,
            student: want,
        });
    }
    let targets = teacher_predict(enc, teacher, &data.train)?;
    let params = init_student(enc, data.kind, init.map(|c| &c.params), cfg.seed);
    let objective = Objective::Student {
        targets: &targets,
        temperature: cfg.temperature,
        lambda: cfg.lambda_distill,
    };
    train_loop(data, enc, params, cfg, objective, "student", meta)
}

/// Full fine-tuning on hard labels only.
pub fn finetune(
    data: &TaskData,
    init: Option<&Checkpoint>,
    enc: &EncoderConfig,
    cfg: &DistillConfig,
    meta: &CheckpointMeta,
) -> Result<TrainOutcome, DistillError> {
    cfg.validate()?;
    enc.validate()?;
    check_labels(data)?;
    let params = init_student(enc, data.kind, init.map(|c| &c.params), cfg.seed);
    let objective = Objective::Student {
        targets: &[],
        temperature: cfg.temperature,
        lambda: 0.0,
    };
    train_loop(data, enc, params, cfg, objective, "finetune", meta)
}

/// Parameter names grouped by role prefix, for reporting.
pub fn param_counts(params: &ParamStore) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, t) in params.iter() {
        let prefix = name.split('.').next().unwrap_or("").to_string();
        *out.entry(prefix).or_insert(0) += t.numel();
    }
    out
}
