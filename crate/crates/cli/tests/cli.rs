use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "synth.n_patients=60",
    "--set",
    "pretrain.epochs=1",
    "--set",
    "pretrain.batch_size=16",
    "--set",
    "distill.epochs=1",
    "--set",
    "eval.n_resamples=20",
    "--set",
    "probe.iterations=50",
];

fn ocdistill(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocdistill"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = TINY.to_vec();
    all.extend_from_slice(args);
    ocdistill(out, &all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_tree(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tree.csv");
    std::fs::write(&p, "root,,root\nX,root,x\nY,root,y\na,X,\nb,X,\nc,Y,\nd,a,\n").unwrap();
    p
}

#[test]
fn code_with_itself_has_similarity_one() {
    let dir = tempfile::tempdir().unwrap();
    let tree = write_tree(dir.path());
    let o = ocdistill(
        dir.path(),
        &["sim", "--ontology", tree.to_str().unwrap(), "--a", "X", "--b", "X"],
    );
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).trim(), "1");
}

#[test]
fn code_and_patient_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let tree = write_tree(dir.path());
    let t = tree.to_str().unwrap();
    // lca(d, b) = X at depth 1: 1 / (3 + 2 - 1)
    let o = ocdistill(dir.path(), &["sim", "--ontology", t, "--a", "d", "--b", "b"]);
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 0.25);
    // exact matching of a shared code and a disjoint one
    let o = ocdistill(
        dir.path(),
        &[
            "sim",
            "--ontology",
            t,
            "--patient-a",
            "a,c",
            "--patient-b",
            "a",
            "--exact",
        ],
    );
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 0.75);
    let o = ocdistill(dir.path(), &["sim", "--ontology", t, "--a", "zz", "--b", "a"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ontology_stats_counts_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let tree = write_tree(dir.path());
    let o = ocdistill(dir.path(), &["ontology-stats", "--ontology", tree.to_str().unwrap()]);
    assert!(o.status.success());
    let report = std::fs::read_to_string(dir.path().join("ontology_stats.csv")).unwrap();
    assert!(report.contains("nodes=7 leaves=3 max_depth=3"), "{report}");
}

#[test]
fn full_run_emits_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = ocdistill(
        dir.path(),
        &[
            "--set",
            "synth.n_patients=200",
            "--set",
            "pretrain.epochs=2",
            "--set",
            "distill.epochs=2",
            "--set",
            "eval.n_resamples=50",
            "run",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = std::fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap();
    let hash_line = cfg.lines().next().unwrap().to_string();
    assert!(hash_line.starts_with("# config_hash="));
    for name in [
        "metrics.csv",
        "neighbors.csv",
        "weights_histogram.csv",
        "pretrain_loss.csv",
        "teacher_log.csv",
        "student_log.csv",
        "finetune_log.csv",
        "ontology.csv",
        "weights.cache.meta",
    ] {
        let body = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(body.lines().next().unwrap(), hash_line, "{name}");
    }
    for name in [
        "stage1.ckpt",
        "teacher.ckpt",
        "student.ckpt",
        "finetune.ckpt",
        "weights.cache",
        "bundle/manifest.txt",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let models: Vec<&str> = metrics.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["probe", "teacher", "student", "finetune"]);
}

#[test]
fn staged_commands_reuse_a_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(tiny(out, &["synth"]).status.success());
    let bundle = out.join("bundle");
    let b = bundle.to_str().unwrap();
    assert!(tiny(out, &["pretrain", "--bundle", b]).status.success());
    assert!(tiny(out, &["teach", "--bundle", b]).status.success());
    let init = out.join("stage1.ckpt");
    let i = init.to_str().unwrap();
    assert!(tiny(out, &["distill", "--bundle", b, "--init", i]).status.success());
    assert!(tiny(out, &["finetune", "--bundle", b, "--init", i]).status.success());
    assert!(tiny(out, &["probe", "--bundle", b]).status.success());
    assert!(tiny(out, &["analyze-neighbors", "--bundle", b, "--k", "1,3"])
        .status
        .success());
    let neighbors = std::fs::read_to_string(out.join("neighbors.csv")).unwrap();
    assert_eq!(neighbors.lines().count(), 4);

    let t = out.join("teacher.ckpt");
    let s = out.join("student.ckpt");
    let o = tiny(
        out,
        &[
            "eval",
            "--bundle",
            b,
            "--checkpoint",
            t.to_str().unwrap(),
            "--checkpoint",
            s.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("teacher"));
    // a stage-1 encoder has no classifier head
    assert_eq!(
        tiny(out, &["eval", "--bundle", b, "--checkpoint", i]).status.code(),
        Some(2)
    );
}

#[test]
fn exact_matching_leaves_fewer_pairs_below_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(dir.path(), &["analyze-weights"]);
    assert!(o.status.success());
    let summary = std::fs::read_to_string(dir.path().join("weights_summary.csv")).unwrap();
    let frac = |mode: &str| -> f64 {
        let line = summary.lines().find(|l| l.starts_with(mode)).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!(frac("exact") < frac("ontology"), "{summary}");
}

#[test]
fn grid_enumerates_81_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(dir.path(), &["grid", "--jobs", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.path().join("grid_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 81);
    assert!(summary.contains("# best index="));
    let mut hashes = std::collections::BTreeSet::new();
    for i in 0..81 {
        let sub = dir.path().join(format!("grid_{i:02}"));
        assert!(sub.join("student.ckpt").exists());
        let cfg = std::fs::read_to_string(sub.join("resolved_config.toml")).unwrap();
        hashes.insert(cfg.lines().next().unwrap().to_string());
    }
    assert_eq!(hashes.len(), 81);
}

#[test]
fn identical_configs_give_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(tiny(a.path(), &["run"]).status.success());
    assert!(tiny(b.path(), &["run"]).status.success());
    for name in ["metrics.csv", "neighbors.csv", "pretrain_loss.csv", "student_log.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn precedence_flags_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n[synth]\nn_patients = 80\n").unwrap();
    let o = ocdistill(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
            "--set",
            "synth.n_patients=70",
            "synth",
        ],
    );
    assert!(o.status.success());
    let resolved = std::fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 9"));
    assert!(resolved.contains("n_patients = 70"));
    assert!(stdout(&o).starts_with("70 patients"));
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    // configuration
    assert_eq!(
        ocdistill(out, &["--set", "pretrain.bogus=1", "synth"]).status.code(),
        Some(2)
    );
    assert_eq!(
        ocdistill(out, &["--set", "synth.channels=9", "synth"]).status.code(),
        Some(2)
    );
    // missing input
    assert_eq!(
        tiny(out, &["probe", "--checkpoint", "absent.ckpt"]).status.code(),
        Some(2)
    );
    // malformed data
    let bad = out.join("bad");
    std::fs::create_dir_all(bad.join("bundle")).unwrap();
    std::fs::write(bad.join("bundle/manifest.txt"), "garbage\n").unwrap();
    write_tree(&bad);
    std::fs::rename(bad.join("tree.csv"), bad.join("ontology.csv")).unwrap();
    let o = tiny(out, &["probe", "--bundle", bad.join("bundle").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    // divergent training
    let o = tiny(
        out,
        &[
            "--set",
            "pretrain.learning_rate=1e300",
            "--set",
            "pretrain.epochs=3",
            "pretrain",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_subcommands() {
    let o = Command::new(env!("CARGO_BIN_EXE_ocdistill"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in [
        "ontology-stats",
        "sim",
        "weights",
        "synth",
        "pretrain",
        "teach",
        "distill",
        "probe",
        "finetune",
        "eval",
        "analyze-neighbors",
        "analyze-weights",
        "grid",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
    assert!(text.contains("Exit codes"));
}
