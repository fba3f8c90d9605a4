use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use ocdistill_core::config::{distill_grid, ConfigError, RunConfig};
use ocdistill_core::distill::{self, TrainOutcome};
use ocdistill_core::numerics::Checkpoint;
use ocdistill_core::pipeline::{self as pl, PipelineError, Prepared};
use ocdistill_core::similarity::{patient_similarity_with, CodeMatch, DiagnosisSet};
use ocdistill_core::{contrastive, ontology::OntologyTree};

/// Ontology-weighted contrastive pretraining and notes-to-vitals
/// distillation for ICU vitals.
///
/// Configuration precedence: --seed/--out and --set flags override the
/// --config file, which overrides built-in defaults. Every subcommand writes
/// `resolved_config.toml` and its reports under the output directory.
///
/// Exit codes: 0 success, 2 configuration or missing input, 3 data error,
/// 4 numeric failure (non-finite loss).
#[derive(Parser, Debug)]
#[command(name = "ocdistill", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Global seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (same as `--set out_dir=DIR`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Input {
    /// Cohort bundle directory written by `synth`; synthesized from the
    /// config when absent.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Ontology edge list (defaults to the one next to the bundle).
    #[arg(long)]
    ontology: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Node, leaf and depth statistics of an ontology.
    OntologyStats {
        #[arg(long)]
        ontology: Option<PathBuf>,
    },
    /// Code-pair (--a/--b) or patient-pair (--patient-a/--patient-b) similarity.
    Sim {
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        a: Option<String>,
        #[arg(long)]
        b: Option<String>,
        /// Comma-separated diagnosis codes.
        #[arg(long)]
        patient_a: Option<String>,
        #[arg(long)]
        patient_b: Option<String>,
        /// Flat exact-code matching instead of the ontology.
        #[arg(long)]
        exact: bool,
    },
    /// Build the training-split weight cache and its histogram.
    Weights {
        #[command(flatten)]
        input: Input,
    },
    /// Synthesize a cohort and write it as a bundle.
    Synth,
    /// Stage-1 contrastive pretraining.
    Pretrain {
        #[command(flatten)]
        input: Input,
    },
    /// Train the vitals+notes teacher.
    Teach {
        #[command(flatten)]
        input: Input,
    },
    /// Distill the teacher into a vitals-only student.
    Distill {
        #[command(flatten)]
        input: Input,
        /// Stage-1 checkpoint to initialize the student encoder from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Teacher checkpoint [default: <out>/teacher.ckpt].
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Full fine-tuning of all parameters on hard labels.
    Finetune {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Linear probe on frozen stage-1 embeddings.
    Probe {
        #[command(flatten)]
        input: Input,
        /// Stage-1 checkpoint [default: <out>/stage1.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labeled fraction of the training split [default: eval.label_fraction].
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// Test-split metrics for supervised checkpoints.
    Eval {
        #[command(flatten)]
        input: Input,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Diagnosis similarity of embedding neighbors versus random pairs.
    AnalyzeNeighbors {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Neighbor counts [default: eval.neighbor_ks].
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Weight distributions under ontology-aware and exact code matching.
    AnalyzeWeights {
        #[command(flatten)]
        input: Input,
    },
    /// Whole pipeline: synth, pretrain, probe, teach, distill, finetune, eval.
    Run,
    /// Distillation sweep over learning rate, temperature, λ and note probability.
    Grid {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Only run the first N grid points.
        #[arg(long)]
        limit: Option<usize>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, body: &str) -> Result<(), PipelineError> {
        let p = self.path(name);
        std::fs::write(&p, body).map_err(|source| PipelineError::Io {
            path: p.display().to_string(),
            source,
        })
    }

    /// Writes a report and prints it as a table.
    fn report(&self, name: &str, body: &str) -> Result<(), PipelineError> {
        self.write(name, body)?;
        print!("{}", pl::render_table(body));
        Ok(())
    }

    fn save(&self, name: &str, ck: &Checkpoint) -> Result<(), PipelineError> {
        ck.save(&self.path(name))?;
        log::info!("wrote {}", self.path(name).display());
        Ok(())
    }

    fn input(&self, input: &Input) -> Result<Prepared, PipelineError> {
        pl::load_or_synth(&self.cfg, input.bundle.as_deref(), input.ontology.as_deref())
    }

    fn checkpoint(&self, given: Option<&Path>, default: &str) -> Result<Checkpoint, PipelineError> {
        let p = given.map_or_else(|| self.path(default), Path::to_path_buf);
        if !p.exists() {
            return Err(PipelineError::MissingInput(p.display().to_string()));
        }
        Ok(Checkpoint::load(&p)?)
    }

    fn optional_checkpoint(&self, given: Option<&Path>) -> Result<Option<Checkpoint>, PipelineError> {
        given.map(|p| self.checkpoint(Some(p), "")).transpose()
    }

    fn ontology(&self, given: Option<&Path>) -> Result<OntologyTree, PipelineError> {
        match given {
            Some(p) if !p.exists() => Err(PipelineError::MissingInput(p.display().to_string())),
            Some(p) => Ok(OntologyTree::load_path(p)?),
            None => Ok(pl::synth_cohort(&self.cfg)?.1),
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={}", toml_string(&o.display().to_string())));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn log_outcome(name: &str, o: &TrainOutcome) {
    let best = &o.epochs[o.best_epoch];
    log::info!("{name}: best epoch {} val AUROC {:.4}", best.epoch, best.val_auroc);
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = resolve(&cli)?;
    let hash = cfg.hash();
    let out = PathBuf::from(&cfg.out_dir);
    log::info!(
        "ocdistill {} config_hash={hash} seed={} out={}",
        env!("CARGO_PKG_VERSION"),
        cfg.seed,
        out.display()
    );
    pl::save_config(&out, &cfg)?;
    let ctx = Ctx { cfg, hash, out };
    let cfg = &ctx.cfg;
    let task = cfg.eval.task.as_str();

    match &cli.command {
        Command::OntologyStats { ontology } => {
            let tree = ctx.ontology(ontology.as_deref())?;
            let mut by_depth = vec![0usize; tree.max_depth() as usize + 1];
            for n in tree.nodes() {
                by_depth[tree.depth(n) as usize] += 1;
            }
            let mut body = format!(
                "# config_hash={}\n# nodes={} leaves={} max_depth={} content_hash={}\ndepth,nodes\n",
                ctx.hash,
                tree.len(),
                tree.leaves().len(),
                tree.max_depth(),
                hex::encode(tree.content_hash())
            );
            for (d, c) in by_depth.iter().enumerate() {
                let _ = writeln!(body, "{d},{c}");
            }
            println!(
                "nodes {}  leaves {}  max depth {}",
                tree.len(),
                tree.leaves().len(),
                tree.max_depth()
            );
            ctx.report("ontology_stats.csv", &body)?;
        }
        Command::Sim {
            ontology,
            a,
            b,
            patient_a,
            patient_b,
            exact,
        } => {
            let tree = ctx.ontology(ontology.as_deref())?;
            let mode = if *exact { CodeMatch::Exact } else { CodeMatch::Ontology };
            let mut body = String::from("kind,a,b,similarity\n");
            if let (Some(a), Some(b)) = (a, b) {
                let sa = DiagnosisSet::resolve_strict(&tree, "a", &[a.as_str()])?;
                let sb = DiagnosisSet::resolve_strict(&tree, "b", &[b.as_str()])?;
                let s = patient_similarity_with(&tree, &sa, &sb, mode)?;
                println!("{s}");
                let _ = writeln!(body, "code,{a},{b},{s}");
            }
            if let (Some(pa), Some(pb)) = (patient_a, patient_b) {
                let codes = |s: &str| s.split(',').map(str::trim).map(String::from).collect::<Vec<_>>();
                let sa = DiagnosisSet::resolve_strict(&tree, "a", &codes(pa))?;
                let sb = DiagnosisSet::resolve_strict(&tree, "b", &codes(pb))?;
                let s = patient_similarity_with(&tree, &sa, &sb, mode)?;
                println!("{s}");
                let _ = writeln!(body, "patient,{},{},{s}", pa.replace(',', " "), pb.replace(',', " "));
            }
            if body.lines().count() == 1 {
                return Err(ConfigError::Invalid("sim needs --a/--b or --patient-a/--patient-b".into()).into());
            }
            ctx.write("sim.csv", &pl::stamp(&ctx.hash, &body))?;
        }
        Command::Weights { input } => {
            let prep = ctx.input(input)?;
            let spec = &cfg.pretrain.weight_spec;
            let cache = pl::train_weights(&prep, spec, cfg.weights.code_match, cfg.weights.cache_budget)?;
            cache.save(&ctx.path("weights.cache"))?;
            ctx.write("weights.cache.meta", &pl::stamp(&ctx.hash, ""))?;
            let h = pl::cache_histogram(&cache, cfg.weights.histogram_bins)?;
            println!(
                "{} patients, {} pairs, fraction below one {:.6}",
                cache.len(),
                h.total,
                h.fraction_below_one()
            );
            ctx.report(
                "weights_histogram.csv",
                &pl::histogram_csv(&ctx.hash, &spec.to_string(), &h),
            )?;
        }
        Command::Synth => {
            let (b, t) = pl::synth_cohort(cfg)?;
            let prep = pl::prepare(b, t);
            pl::save_cohort(&ctx.out, &prep, &ctx.hash)?;
            println!(
                "{} patients ({} train / {} val / {} test) written to {}",
                prep.bundle.len(),
                prep.train.len(),
                prep.val.len(),
                prep.test.len(),
                ctx.path("bundle").display()
            );
        }
        Command::Pretrain { input } => {
            let prep = ctx.input(input)?;
            let pre = pl::stage1(cfg, &prep, &cfg.pretrain.weight_spec)?;
            ctx.save("stage1.ckpt", &pre.final_checkpoint)?;
            ctx.save("stage1_best.ckpt", &pre.best_checkpoint)?;
            ctx.write(
                "pretrain_loss.csv",
                &pl::stamp(&ctx.hash, &contrastive::format_trace(&pre.trace)),
            )?;
            if let Some(last) = pre.trace.last() {
                println!("{} steps, final loss {:.6}", pre.trace.len(), last.loss);
            }
        }
        Command::Teach { input } => {
            let prep = ctx.input(input)?;
            let data = pl::task_data(&prep, task)?;
            let t = pl::teach(cfg, &prep, &data)?;
            log_outcome("teacher", &t);
            ctx.save("teacher.ckpt", &t.best)?;
            ctx.report(
                "teacher_log.csv",
                &pl::stamp(&ctx.hash, &distill::format_epochs(&t.epochs)),
            )?;
        }
        Command::Distill { input, init, teacher } => {
            let prep = ctx.input(input)?;
            let teacher = ctx.checkpoint(teacher.as_deref(), "teacher.ckpt")?;
            let init = ctx.optional_checkpoint(init.as_deref())?;
            let data = pl::task_data(&prep, task)?;
            let s = pl::student(cfg, &prep, &data, &teacher, init.as_ref(), cfg.distill.lambda_distill)?;
            log_outcome("student", &s);
            ctx.save("student.ckpt", &s.best)?;
            ctx.report(
                "student_log.csv",
                &pl::stamp(&ctx.hash, &distill::format_epochs(&s.epochs)),
            )?;
        }
        Command::Finetune { input, init } => {
            let prep = ctx.input(input)?;
            let init = ctx.optional_checkpoint(init.as_deref())?;
            let data = pl::task_data(&prep, task)?;
            let f = pl::finetune(cfg, &prep, &data, init.as_ref())?;
            log_outcome("finetune", &f);
            ctx.save("finetune.ckpt", &f.best)?;
            ctx.report(
                "finetune_log.csv",
                &pl::stamp(&ctx.hash, &distill::format_epochs(&f.epochs)),
            )?;
        }
        Command::Probe {
            input,
            checkpoint,
            label_fraction,
        } => {
            let prep = ctx.input(input)?;
            let ck = ctx.checkpoint(checkpoint.as_deref(), "stage1.ckpt")?;
            let fraction = label_fraction.unwrap_or(cfg.eval.label_fraction);
            let p = pl::probe(cfg, &prep, &ck.params, task, fraction)?;
            let rows = [("probe".to_string(), task.to_string(), p.report)];
            ctx.report("probe_metrics.csv", &pl::metrics_csv(&ctx.hash, &rows))?;
        }
        Command::Eval { input, checkpoint } => {
            let prep = ctx.input(input)?;
            let mut rows = Vec::new();
            for path in checkpoint {
                let ck = ctx.checkpoint(Some(path), "")?;
                let role = ck.meta.entries.get("role").cloned().unwrap_or_else(|| "student".into());
                if role == "stage1" {
                    return Err(ConfigError::Invalid(format!(
                        "{} is a stage-1 encoder; use `probe` for it",
                        path.display()
                    ))
                    .into());
                }
                let r = pl::evaluate_checkpoint(cfg, &prep, &ck, task, role == "teacher", cfg.eval.n_resamples)?;
                let name = path.file_stem().map_or(role, |s| s.to_string_lossy().into_owned());
                rows.push((name, task.to_string(), r));
            }
            ctx.report("metrics.csv", &pl::metrics_csv(&ctx.hash, &rows))?;
        }
        Command::AnalyzeNeighbors { input, checkpoint, k } => {
            let prep = ctx.input(input)?;
            let ck = ctx.checkpoint(checkpoint.as_deref(), "stage1.ckpt")?;
            let ks = if k.is_empty() { &cfg.eval.neighbor_ks } else { k };
            let rows = ks
                .iter()
                .map(|&k| pl::neighbors(cfg, &prep, &ck.params, k))
                .collect::<Result<Vec<_>, _>>()?;
            ctx.report("neighbors.csv", &pl::neighbors_csv(&ctx.hash, &rows))?;
        }
        Command::AnalyzeWeights { input } => {
            let prep = ctx.input(input)?;
            let spec = &cfg.pretrain.weight_spec;
            let mut summary = String::from("code_match,weight_spec,pairs,fraction_below_one\n");
            for (mode, name) in [(CodeMatch::Ontology, "ontology"), (CodeMatch::Exact, "exact")] {
                let cache = pl::train_weights(&prep, spec, mode, cfg.weights.cache_budget)?;
                let h = pl::cache_histogram(&cache, cfg.weights.histogram_bins)?;
                let _ = writeln!(summary, "{name},{spec},{},{:.6}", h.total, h.fraction_below_one());
                ctx.write(
                    &format!("weights_histogram_{name}.csv"),
                    &pl::histogram_csv(&ctx.hash, &format!("{name} {spec}"), &h),
                )?;
            }
            ctx.report("weights_summary.csv", &pl::stamp(&ctx.hash, &summary))?;
        }
        Command::Run => {
            let run = pl::run_full(cfg, Some(&ctx.out))?;
            print!("{}", pl::render_table(&run.reports["metrics.csv"]));
            println!();
            print!("{}", pl::render_table(&run.reports["neighbors.csv"]));
        }
        Command::Grid {
            input,
            init,
            teacher,
            limit,
            jobs,
        } => grid(&ctx, input, init.as_deref(), teacher.as_deref(), *limit, *jobs)?,
    }
    Ok(())
}

/// Runs every grid point in its own subdirectory and writes a summary
/// index ranked by validation AUROC. Stage 1 and the teacher are shared:
/// given on the command line or trained once from the base config.
fn grid(
    ctx: &Ctx,
    input: &Input,
    init: Option<&Path>,
    teacher: Option<&Path>,
    limit: Option<usize>,
    jobs: usize,
) -> Result<(), PipelineError> {
    let cfg = &ctx.cfg;
    let task = cfg.eval.task.as_str();
    let prep = ctx.input(input)?;
    let data = pl::task_data(&prep, task)?;
    let stage1 = match init {
        Some(p) => ctx.checkpoint(Some(p), "")?,
        None => {
            let pre = pl::stage1(cfg, &prep, &cfg.pretrain.weight_spec)?;
            ctx.save("stage1.ckpt", &pre.final_checkpoint)?;
            pre.final_checkpoint
        }
    };
    let teacher = match teacher {
        Some(p) => ctx.checkpoint(Some(p), "")?,
        None => {
            let t = pl::teach(cfg, &prep, &data)?;
            ctx.save("teacher.ckpt", &t.best)?;
            t.best
        }
    };

    let mut points = distill_grid(&cfg.distill);
    points.truncate(limit.unwrap_or(points.len()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<(String, f64, usize), PipelineError>> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, dc)| {
                let mut point = cfg.clone();
                point.distill = dc.clone();
                let dir = format!("grid_{i:02}");
                point.out_dir = ctx.path(&dir).display().to_string();
                let hash = point.hash();
                pl::save_config(Path::new(&point.out_dir), &point)?;
                let s = pl::student(&point, &prep, &data, &teacher, Some(&stage1), dc.lambda_distill)?;
                s.best.save(&Path::new(&point.out_dir).join("student.ckpt"))?;
                std::fs::write(
                    Path::new(&point.out_dir).join("student_log.csv"),
                    pl::stamp(&hash, &distill::format_epochs(&s.epochs)),
                )
                .map_err(|source| PipelineError::Io {
                    path: point.out_dir.clone(),
                    source,
                })?;
                Ok((dir, s.epochs[s.best_epoch].val_auroc, s.best_epoch))
            })
            .collect()
    });

    let mut body =
        String::from("index,dir,learning_rate,temperature,lambda_distill,raw_note_prob,best_epoch,val_auroc\n");
    let mut best: Option<(usize, f64)> = None;
    for (i, (dc, r)) in points.iter().zip(results).enumerate() {
        let (dir, auroc, epoch) = r?;
        let _ = writeln!(
            body,
            "{i},{dir},{},{},{},{},{epoch},{auroc:.6}",
            dc.learning_rate, dc.temperature, dc.lambda_distill, dc.raw_note_prob
        );
        if best.is_none_or(|(_, b)| auroc > b) {
            best = Some((i, auroc));
        }
    }
    if let Some((i, a)) = best {
        let _ = writeln!(body, "# best index={i} val_auroc={a:.6}");
        println!("best grid point {i} (val AUROC {a:.4})");
    }
    ctx.report("grid_summary.csv", &pl::stamp(&ctx.hash, &body))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
