use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mimalign::config::Config;
use mimalign::data::{read_corpus, read_masks};
use mimalign::eval::Backbone;
use mimalign::teacher::load_teacher_weights;

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimalign")).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

/// Overrides for a pre-training run that finishes in well under a second.
fn quick(out_dir: &Path) -> Vec<String> {
    [
        "teacher=pixel",
        "count=8",
        "batch_size=4",
        "total_steps=4",
        "warmup_steps=1",
        "depth=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("out_dir={}", out_dir.display())])
    .collect()
}

/// `prefix` followed by `--set KEY=VALUE` for each of `sets`.
fn with_sets(prefix: &[&str], sets: &[String]) -> Vec<String> {
    let mut v: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    for s in sets {
        v.push("--set".into());
        v.push(s.clone());
    }
    v
}

#[test]
fn help_lists_every_key() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let t = text(&o);
    for k in Config::KEYS {
        assert!(t.contains(k.name), "missing {}", k.name);
    }
    let o = run(&["probe", "--help"]);
    assert!(o.status.success());
    assert!(text(&o).contains("probe.holdout"));
}

#[test]
fn unknown_subcommand_exits_1() {
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run::<&str>(&[]).status.code(), Some(1));
}

#[test]
fn unknown_key_exits_1_and_lists_keys() {
    let o = run(&["probe", "--set", "nonsense=3"]);
    assert_eq!(o.status.code(), Some(1));
    let t = text(&o);
    assert!(t.contains("nonsense"));
    assert!(t.contains("total_steps") && t.contains("mask_count"), "{t}");
}

#[test]
fn malformed_values_exit_1() {
    assert_eq!(run(&["probe", "--set", "seed=abc"]).status.code(), Some(1));
    assert_eq!(run(&["probe", "--set", "seed"]).status.code(), Some(1));
    assert_eq!(run(&["probe", "--config", "/nonexistent/run.cfg"]).status.code(), Some(1));
}

#[test]
fn set_overrides_only_its_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = quick(dir.path());
    sets.push("seed=7".into());
    let o = run(&with_sets(&["pretrain"], &sets));
    assert!(o.status.success(), "{}", text(&o));

    let written = Config::parse(&fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    let mut expected = Config::default();
    expected.apply_overrides(&quick(dir.path())).unwrap();
    assert_eq!(written.seed, 7);
    expected.seed = 7;
    assert_eq!(written, expected);
}

#[test]
fn set_wins_over_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "# quick run\nseed = 3\ntotal_steps = 6\n").unwrap();
    let mut sets = quick(dir.path());
    sets.retain(|s| !s.starts_with("total_steps"));
    sets.push("seed=9".into());
    let o = run(&with_sets(&["pretrain", "--config", file.to_str().unwrap()], &sets));
    assert!(o.status.success(), "{}", text(&o));
    let written = Config::parse(&fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    assert_eq!(written.seed, 9);
    assert_eq!(written.total_steps, 6);
    assert!(dir.path().join("step-000006.mimt").exists());
}

#[test]
fn synth_data_writes_a_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shapes.corpus");
    let out_set = format!("out={}", out.display());
    let o = run(&["synth-data", "--set", "count=256", "--set", out_set.as_str()]);
    assert!(o.status.success(), "{}", text(&o));
    let corpus = read_corpus(&out).unwrap();
    assert_eq!(corpus.len(), 256);
    assert_eq!(corpus.num_classes(), 4);
    assert_eq!(read_masks(&out).unwrap().len(), 256);
}

#[test]
fn pretrain_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let sets = quick(dir.path());
    let o = run(&with_sets(&["pretrain"], &sets));
    assert!(o.status.success(), "{}", text(&o));
    let last = dir.path().join("step-000004.mimt");
    assert!(last.exists());

    let mut longer = sets.clone();
    longer.retain(|s| !s.starts_with("total_steps"));
    longer.push("total_steps=6".into());
    // A different total_steps changes the config digest, so resume is refused.
    let o = run(&with_sets(&["pretrain", "--resume", last.to_str().unwrap()], &longer));
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));

    let ckpt = format!("checkpoint={}", last.display());
    let mut eval = vec!["depth=1".to_owned(), "count=24".into(), "probe.steps=20".into(), ckpt];
    let o = run(&with_sets(&["probe"], &eval));
    assert!(o.status.success(), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("accuracy "));
    let o = run(&with_sets(&["dense-probe"], &eval));
    assert!(o.status.success(), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("mean_iou "));
    eval.push("finetune.steps=4".into());
    let o = run(&with_sets(&["finetune"], &eval));
    assert!(o.status.success(), "{}", text(&o));

    eval.push(format!("out_dir={}", dir.path().display()));
    eval.push("attn.count=2".into());
    let o = run(&with_sets(&["attnmap"], &eval));
    assert!(o.status.success(), "{}", text(&o));
    let pgm = fs::read(dir.path().join("attention/attn-001.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
}

#[test]
fn missing_checkpoint_exits_1() {
    let o = run(&["probe", "--set", "checkpoint=/nonexistent/step.mimt"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn teacher_train_output_feeds_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("teacher.mimt");
    let teacher_sets: Vec<String> = vec![
        "teacher.steps=10".into(),
        "teacher.warmup_steps=2".into(),
        "teacher.train_images=32".into(),
        "teacher.heldout_images=8".into(),
        format!("out={}", weights.display()),
    ];
    let o = run(&with_sets(&["teacher-train"], &teacher_sets));
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("held-out accuracy"));
    let cfg = Config::default();
    let t = load_teacher_weights(&weights, &cfg.teacher_vit()).unwrap();
    assert_eq!(t.kind(), "frozen-vit");
    // Bare weights also load as a backbone.
    Backbone::load(&weights, cfg.teacher_vit()).unwrap();

    let mut sets = quick(dir.path());
    sets.retain(|s| !s.starts_with("teacher="));
    sets.push("teacher=frozen-vit".into());
    sets.push(format!("teacher.weights={}", weights.display()));
    let o = run(&with_sets(&["pretrain"], &sets));
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn ablate_writes_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let sets: Vec<String> = vec![
        "ablate.guidance=pixel,none".into(),
        "ablate.seeds=0".into(),
        "count=24".into(),
        "batch_size=4".into(),
        "total_steps=3".into(),
        "warmup_steps=1".into(),
        "depth=1".into(),
        "probe.steps=10".into(),
        format!("out_dir={}", dir.path().display()),
    ];
    let o = run(&with_sets(&["ablate"], &sets));
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("guidance,seed,probe_acc,dense_iou\n"));
    assert!(fs::read_to_string(dir.path().join("ablation_summary.txt")).unwrap().contains("best probe"));
}
