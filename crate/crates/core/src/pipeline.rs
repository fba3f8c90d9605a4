//! End-to-end orchestration: synthesize → pretrain → probe → teach →
//! distill → evaluate, plus the report writers shared with the CLI.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cache::{CacheError, CohortWeightCache};
use crate::config::{ConfigError, RunConfig};
use crate::contrastive::{self, ContrastiveError, PretrainOutcome};
use crate::data::{self, CohortBundle, DataError, Normalizer, Split, VitalsSeries};
use crate::distill::{self, DistillError, LabeledExample, TaskData, TrainOutcome};
use crate::encoders::{self, EncoderConfig};
use crate::metrics::{evaluate, MetricReport, MetricsError};
use crate::neighbors::{neighbor_analysis, NeighborAnalysis, NeighborError};
use crate::numerics::{Checkpoint, CheckpointError, CheckpointMeta, ParamStore, TensorError};
use crate::ontology::{OntologyError, OntologyTree};
use crate::probe::{linear_probe, ProbeOutcome};
use crate::rng;
use crate::similarity::{CodeMatch, DiagnosisSet, ResolveStats, SimilarityError, WeightHistogram, WeightSpec};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing input {0}")]
    MissingInput(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingInput(_) => 2,
            PipelineError::Contrastive(ContrastiveError::NonFiniteLoss(_))
            | PipelineError::Distill(DistillError::NonFiniteLoss(_)) => 4,
            PipelineError::Contrastive(ContrastiveError::InvalidConfig(_))
            | PipelineError::Distill(DistillError::InvalidConfig(_)) => 2,
            PipelineError::Tensor(TensorError::NonFiniteInput(_))
            | PipelineError::Contrastive(ContrastiveError::Tensor(TensorError::NonFiniteInput(_)))
            | PipelineError::Distill(DistillError::Tensor(TensorError::NonFiniteInput(_))) => 4,
            PipelineError::Data(_)
            | PipelineError::Ontology(_)
            | PipelineError::Similarity(_)
            | PipelineError::Cache(_)
            | PipelineError::Checkpoint(_)
            | PipelineError::Io { .. } => 3,
            _ => 1,
        }
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    std::fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

// stage tags for deriving per-stage seeds from the global one
const STAGE_SYNTH: u64 = 1;
const STAGE_SPLIT: u64 = 2;
const STAGE_PRETRAIN: u64 = 3;
const STAGE_TEACHER: u64 = 4;
const STAGE_STUDENT: u64 = 5;
const STAGE_EVAL: u64 = 6;
const STAGE_AUGMENT: u64 = 7;

pub fn stage_seed(global: u64, stage: u64, local: u64) -> u64 {
    rng::mix(global, &[stage, local])
}

/// A cohort with its ontology, normalized vitals and resolved diagnoses.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub bundle: CohortBundle,
    pub tree: OntologyTree,
    pub normalizer: Normalizer,
    pub normalized: Vec<VitalsSeries>,
    pub sets: Vec<DiagnosisSet>,
    pub resolve_stats: ResolveStats,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Synthesizes the configured cohort and assigns splits.
pub fn synth_cohort(cfg: &RunConfig) -> Result<(CohortBundle, OntologyTree), PipelineError> {
    let mut sc = cfg.synth.clone();
    sc.seed = stage_seed(cfg.seed, STAGE_SYNTH, sc.seed);
    let (mut bundle, tree, _) = data::synthesize(&sc, None)?;
    let fractions = [cfg.split.train, cfg.split.val, cfg.split.test];
    let stratify = bundle
        .tasks
        .contains_key(&cfg.eval.task)
        .then_some(cfg.eval.task.as_str());
    data::split(&mut bundle, fractions, stage_seed(cfg.seed, STAGE_SPLIT, 0), stratify)?;
    Ok((bundle, tree))
}

pub fn prepare(bundle: CohortBundle, tree: OntologyTree) -> Prepared {
    let train = bundle.indices(Split::Train);
    let normalizer = Normalizer::fit(train.iter().map(|&i| &bundle.patients[i].vitals), bundle.channels.len());
    let normalized = bundle.patients.iter().map(|p| normalizer.apply(&p.vitals)).collect();
    let mut resolve_stats = ResolveStats::default();
    let sets = bundle
        .patients
        .iter()
        .map(|p| DiagnosisSet::resolve_lenient(&tree, p.id.clone(), &p.codes, &mut resolve_stats))
        .collect();
    if resolve_stats.dropped_codes > 0 {
        log::warn!(
            "{} diagnosis codes not in the ontology were dropped; {} patients left without codes",
            resolve_stats.dropped_codes,
            resolve_stats.emptied_patients
        );
    }
    Prepared {
        val: bundle.indices(Split::Val),
        test: bundle.indices(Split::Test),
        train,
        normalizer,
        normalized,
        sets,
        resolve_stats,
        bundle,
        tree,
    }
}

fn meta(cfg: &RunConfig, prep: &Prepared) -> CheckpointMeta {
    let mut m = CheckpointMeta {
        config_hash: cfg.hash(),
        ..CheckpointMeta::default()
    };
    m.entries.extend(prep.normalizer.to_entries());
    m
}

/// Weight cache over the training patients, in `prep.train` order.
pub fn train_weights(
    prep: &Prepared,
    spec: &WeightSpec,
    mode: CodeMatch,
    budget: usize,
) -> Result<CohortWeightCache, PipelineError> {
    let sets: Vec<DiagnosisSet> = prep.train.iter().map(|&i| prep.sets[i].clone()).collect();
    Ok(CohortWeightCache::build(&prep.tree, &sets, spec, mode, budget)?)
}

/// Histogram of off-diagonal pair weights of a cache.
pub fn cache_histogram(cache: &CohortWeightCache, bins: usize) -> Result<WeightHistogram, PipelineError> {
    Ok(WeightHistogram::from_weights(cache.packed().iter().copied(), bins)?)
}

/// Stage-1 pretraining on the training split with the given weighting.
pub fn stage1(cfg: &RunConfig, prep: &Prepared, spec: &WeightSpec) -> Result<PretrainOutcome, PipelineError> {
    let cache = train_weights(prep, spec, cfg.weights.code_match, cfg.weights.cache_budget)?;
    stage1_with_cache(cfg, prep, &cache, spec)
}

pub fn stage1_with_cache(
    cfg: &RunConfig,
    prep: &Prepared,
    cache: &CohortWeightCache,
    spec: &WeightSpec,
) -> Result<PretrainOutcome, PipelineError> {
    let series: Vec<VitalsSeries> = prep.train.iter().map(|&i| prep.normalized[i].clone()).collect();
    let mut pc = cfg.pretrain.clone();
    pc.weight_spec = *spec;
    pc.seed = stage_seed(cfg.seed, STAGE_PRETRAIN, pc.seed);
    let mut aug = cfg.augment.clone();
    aug.seed = stage_seed(cfg.seed, STAGE_AUGMENT, aug.seed);
    let mut m = meta(cfg, prep);
    m.entries.insert("role".into(), "stage1".into());
    m.entries.insert("weight_spec".into(), spec.key());
    Ok(contrastive::pretrain(&series, cache, &cfg.encoder, &pc, &aug, m)?)
}

pub fn embeddings(
    enc: &EncoderConfig,
    params: &ParamStore,
    prep: &Prepared,
    idx: &[usize],
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let refs: Vec<&VitalsSeries> = idx.iter().map(|&i| &prep.normalized[i]).collect();
    Ok(encoders::embed_all(enc, params, &refs, 256)?)
}

/// Linear probe trained on the training split, scored on the test split.
pub fn probe(
    cfg: &RunConfig,
    prep: &Prepared,
    params: &ParamStore,
    task: &str,
    label_fraction: f64,
) -> Result<ProbeOutcome, PipelineError> {
    let kind = prep.bundle.task(task)?;
    let train_x = embeddings(&cfg.encoder, params, prep, &prep.train)?;
    let test_x = embeddings(&cfg.encoder, params, prep, &prep.test)?;
    let train_y = prep.bundle.labels(task, &prep.train)?;
    let test_y = prep.bundle.labels(task, &prep.test)?;
    let mut pc = cfg.probe.clone();
    pc.seed = stage_seed(cfg.seed, STAGE_EVAL, pc.seed);
    Ok(linear_probe(
        &train_x,
        &train_y,
        &test_x,
        &test_y,
        kind,
        label_fraction,
        &pc,
    )?)
}

pub fn neighbors(
    cfg: &RunConfig,
    prep: &Prepared,
    params: &ParamStore,
    k: usize,
) -> Result<NeighborAnalysis, PipelineError> {
    let emb = embeddings(&cfg.encoder, params, prep, &prep.train)?;
    let sets: Vec<DiagnosisSet> = prep.train.iter().map(|&i| prep.sets[i].clone()).collect();
    Ok(neighbor_analysis(
        &emb,
        &sets,
        &prep.tree,
        k,
        None,
        stage_seed(cfg.seed, STAGE_EVAL, k as u64),
    )?)
}

pub fn examples(prep: &Prepared, task: &str, idx: &[usize]) -> Result<Vec<LabeledExample>, PipelineError> {
    let labels = prep.bundle.labels(task, idx)?;
    Ok(idx
        .iter()
        .zip(labels)
        .map(|(&i, label)| {
            let p = &prep.bundle.patients[i];
            LabeledExample {
                vitals: prep.normalized[i].clone(),
                note_raw: p.note_raw.iter().map(|&v| v as f64).collect(),
                note_summary: p.note_summary.iter().map(|&v| v as f64).collect(),
                label,
            }
        })
        .collect())
}

pub fn task_data(prep: &Prepared, task: &str) -> Result<TaskData, PipelineError> {
    Ok(TaskData {
        kind: prep.bundle.task(task)?,
        train: examples(prep, task, &prep.train)?,
        val: examples(prep, task, &prep.val)?,
    })
}

pub fn teach(cfg: &RunConfig, prep: &Prepared, data: &TaskData) -> Result<TrainOutcome, PipelineError> {
    let mut dc = cfg.distill.clone();
    dc.seed = stage_seed(cfg.seed, STAGE_TEACHER, dc.seed);
    Ok(distill::train_teacher(data, &cfg.encoder, &dc, &meta(cfg, prep))?)
}

/// Student with the configured λ (λ = 0 gives plain fine-tuning with the
/// same batches and initialization).
pub fn student(
    cfg: &RunConfig,
    prep: &Prepared,
    data: &TaskData,
    teacher: &Checkpoint,
    init: Option<&Checkpoint>,
    lambda: f64,
) -> Result<TrainOutcome, PipelineError> {
    let mut dc = cfg.distill.clone();
    dc.seed = stage_seed(cfg.seed, STAGE_STUDENT, dc.seed);
    dc.lambda_distill = lambda;
    Ok(distill::train_student(
        data,
        teacher,
        init,
        &cfg.encoder,
        &dc,
        &meta(cfg, prep),
    )?)
}

pub fn finetune(
    cfg: &RunConfig,
    prep: &Prepared,
    data: &TaskData,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome, PipelineError> {
    let mut dc = cfg.distill.clone();
    dc.seed = stage_seed(cfg.seed, STAGE_STUDENT, dc.seed);
    Ok(distill::finetune(data, init, &cfg.encoder, &dc, &meta(cfg, prep))?)
}

/// Test-split report for a supervised checkpoint.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    prep: &Prepared,
    ckpt: &Checkpoint,
    task: &str,
    teacher: bool,
    n_resamples: usize,
) -> Result<MetricReport, PipelineError> {
    let kind = prep.bundle.task(task)?;
    let test = examples(prep, task, &prep.test)?;
    let outputs = if teacher {
        distill::teacher_predict(&cfg.encoder, ckpt, &test)?
    } else {
        distill::student_predict(&cfg.encoder, ckpt, &test)?
    };
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    Ok(evaluate(
        kind,
        &outputs,
        &labels,
        n_resamples,
        stage_seed(cfg.seed, STAGE_EVAL, 0),
    )?)
}

fn fmt_opt(v: Option<(f64, f64)>) -> (String, String) {
    match v {
        Some((a, b)) => (format!("{a:.6}"), format!("{b:.6}")),
        None => (String::new(), String::new()),
    }
}

pub const METRICS_HEADER: &str = "model,task,auroc,auroc_low,auroc_high,auprc,auprc_low,auprc_high,n_test";
pub const NEIGHBORS_HEADER: &str = "k,n_knn_pairs,n_random_pairs,knn_mean,random_mean,u,z,p_value,effect_size_r";

pub fn metrics_csv(config_hash: &str, rows: &[(String, String, MetricReport)]) -> String {
    let mut out = format!("# config_hash={config_hash}\n{METRICS_HEADER}\n");
    for (model, task, r) in rows {
        let (al, ah) = fmt_opt(r.auroc_ci);
        let (pl, ph) = fmt_opt(r.auprc_ci);
        let _ = writeln!(
            out,
            "{model},{task},{:.6},{al},{ah},{:.6},{pl},{ph},{}",
            r.auroc, r.auprc, r.n_examples
        );
    }
    out
}

pub fn neighbors_csv(config_hash: &str, rows: &[NeighborAnalysis]) -> String {
    let mut out = format!("# config_hash={config_hash}\n{NEIGHBORS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.1},{:.6},{:.6e},{:.6}",
            r.k, r.n_knn_pairs, r.n_random_pairs, r.knn_mean, r.random_mean, r.u, r.z, r.p_value, r.effect_size_r
        );
    }
    out
}

pub fn histogram_csv(config_hash: &str, label: &str, h: &WeightHistogram) -> String {
    let mut out = format!(
        "# config_hash={config_hash}\n# {label}: {} pairs, fraction below one {:.6}\nbin_low,bin_high,count\n",
        h.total,
        h.fraction_below_one()
    );
    for ((lo, hi), c) in h.bin_edges().into_iter().zip(&h.counts) {
        let _ = writeln!(out, "{lo:.4},{hi:.4},{c}");
    }
    out
}

/// Renders delimited text (comment lines skipped) as an aligned table.
pub fn render_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:>w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            out.push('\n');
        }
    }
    out
}

/// Everything a full run produces; `reports` maps file names to contents.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config_hash: String,
    pub reports: BTreeMap<String, String>,
    pub stage1: Checkpoint,
    pub teacher: Checkpoint,
    pub student: Checkpoint,
    pub finetune: Checkpoint,
}

/// Full desk pipeline. With `out` set, artifacts and reports are written
/// under that directory.
pub fn run_full(cfg: &RunConfig, out: Option<&Path>) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let task = cfg.eval.task.clone();
    let (bundle, tree) = synth_cohort(cfg)?;
    let prep = prepare(bundle, tree);
    log::info!(
        "cohort: {} train / {} val / {} test patients",
        prep.train.len(),
        prep.val.len(),
        prep.test.len()
    );

    let spec = cfg.pretrain.weight_spec;
    let cache = train_weights(&prep, &spec, cfg.weights.code_match, cfg.weights.cache_budget)?;
    let hist = cache_histogram(&cache, cfg.weights.histogram_bins)?;
    let pre = stage1_with_cache(cfg, &prep, &cache, &spec)?;
    let stage1 = pre.final_checkpoint.clone();
    log::info!("stage 1 done: {} steps", pre.trace.len());

    let probe_out = probe(cfg, &prep, &stage1.params, &task, cfg.eval.label_fraction)?;
    let mut neighbor_rows = Vec::new();
    for &k in &cfg.eval.neighbor_ks {
        neighbor_rows.push(neighbors(cfg, &prep, &stage1.params, k)?);
    }

    let data = task_data(&prep, &task)?;
    let teacher = teach(cfg, &prep, &data)?;
    let student_out = student(
        cfg,
        &prep,
        &data,
        &teacher.best,
        Some(&stage1),
        cfg.distill.lambda_distill,
    )?;
    let finetune_out = finetune(cfg, &prep, &data, Some(&stage1))?;
    log::info!("stage 2 done");

    let n = cfg.eval.n_resamples;
    let rows = vec![
        ("probe".to_string(), task.clone(), probe_out.report.clone()),
        (
            "teacher".to_string(),
            task.clone(),
            evaluate_checkpoint(cfg, &prep, &teacher.best, &task, true, n)?,
        ),
        (
            "student".to_string(),
            task.clone(),
            evaluate_checkpoint(cfg, &prep, &student_out.best, &task, false, n)?,
        ),
        (
            "finetune".to_string(),
            task.clone(),
            evaluate_checkpoint(cfg, &prep, &finetune_out.best, &task, false, n)?,
        ),
    ];

    let mut reports = BTreeMap::new();
    reports.insert("metrics.csv".to_string(), metrics_csv(&hash, &rows));
    reports.insert("neighbors.csv".to_string(), neighbors_csv(&hash, &neighbor_rows));
    reports.insert(
        "weights_histogram.csv".to_string(),
        histogram_csv(&hash, &spec.to_string(), &hist),
    );
    reports.insert(
        "pretrain_loss.csv".to_string(),
        format!("# config_hash={hash}\n{}", contrastive::format_trace(&pre.trace)),
    );
    reports.insert(
        "teacher_log.csv".to_string(),
        format!("# config_hash={hash}\n{}", distill::format_epochs(&teacher.epochs)),
    );
    reports.insert(
        "student_log.csv".to_string(),
        format!("# config_hash={hash}\n{}", distill::format_epochs(&student_out.epochs)),
    );
    reports.insert(
        "finetune_log.csv".to_string(),
        format!("# config_hash={hash}\n{}", distill::format_epochs(&finetune_out.epochs)),
    );

    if let Some(dir) = out {
        save_config(dir, cfg)?;
        save_cohort(dir, &prep, &hash)?;
        cache.save(&dir.join("weights.cache"))?;
        write_file(&dir.join("weights.cache.meta"), stamp(&hash, ""))?;
        for (name, ck) in [
            ("stage1.ckpt", &stage1),
            ("teacher.ckpt", &teacher.best),
            ("student.ckpt", &student_out.best),
            ("finetune.ckpt", &finetune_out.best),
        ] {
            ck.save(&dir.join(name))?;
        }
        for (name, body) in &reports {
            write_file(&dir.join(name), body)?;
        }
    }

    Ok(PipelineRun {
        config_hash: hash,
        reports,
        stage1,
        teacher: teacher.best,
        student: student_out.best,
        finetune: finetune_out.best,
    })
}

/// Prefixes a report body with the producing config hash.
pub fn stamp(config_hash: &str, body: &str) -> String {
    format!("# config_hash={config_hash}\n{body}")
}

pub fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.display().to_string(),
        source,
    })
}

/// Writes `resolved_config.toml` into `dir`.
pub fn save_config(dir: &Path, cfg: &RunConfig) -> Result<(), PipelineError> {
    ensure_dir(dir)?;
    write_file(&dir.join("resolved_config.toml"), stamp(&cfg.hash(), &cfg.to_toml()))
}

/// Writes `bundle/` and `ontology.csv` into `dir`.
pub fn save_cohort(dir: &Path, prep: &Prepared, config_hash: &str) -> Result<(), PipelineError> {
    ensure_dir(dir)?;
    prep.bundle.save(
        &dir.join("bundle"),
        &[("config_hash".to_string(), config_hash.to_string())],
    )?;
    write_file(&dir.join("ontology.csv"), stamp(config_hash, &prep.tree.to_edge_list()))
}

/// A previously written bundle when given, otherwise the cohort the config
/// synthesizes.
pub fn load_or_synth(
    cfg: &RunConfig,
    bundle: Option<&Path>,
    ontology: Option<&Path>,
) -> Result<Prepared, PipelineError> {
    match bundle {
        Some(dir) => load_prepared(dir, ontology),
        None => {
            let (b, mut tree) = synth_cohort(cfg)?;
            if let Some(p) = ontology {
                tree = OntologyTree::load_path(p)?;
            }
            Ok(prepare(b, tree))
        }
    }
}

/// Loads a bundle directory written by a run, with the ontology next to it
/// (`<dir>/ontology.csv` or `<dir>/../ontology.csv`).
pub fn load_prepared(bundle_dir: &Path, ontology: Option<&Path>) -> Result<Prepared, PipelineError> {
    let ont: PathBuf = match ontology {
        Some(p) => p.to_path_buf(),
        None => {
            let here = bundle_dir.join("ontology.csv");
            if here.exists() {
                here
            } else {
                bundle_dir.parent().unwrap_or(bundle_dir).join("ontology.csv")
            }
        }
    };
    if !ont.exists() {
        return Err(PipelineError::MissingInput(ont.display().to_string()));
    }
    if !bundle_dir.join("manifest.txt").exists() {
        return Err(PipelineError::MissingInput(
            bundle_dir.join("manifest.txt").display().to_string(),
        ));
    }
    let tree = OntologyTree::load_path(&ont)?;
    let (bundle, _) = data::load_bundle(bundle_dir, None)?;
    Ok(prepare(bundle, tree))
}
