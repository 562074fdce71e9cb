//! Command-line entry point. Exit codes: 0 success, 1 user error, 2 internal
//! error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use mimalign::config::Config;
use mimalign::data::{synth_dataset, write_synth};
use mimalign::eval::{
    dense_probe, dump_attention, finetune, labeled_eval_set, linear_probe, run_ablation, Backbone, FinetuneOptions,
    ProbeOptions, ProbeResult,
};
use mimalign::pretrain::run_pretraining;
use mimalign::teacher::train_toy_teacher;
use mimalign::tensor::tensor_save;
use mimalign::{Error, Result};

#[derive(Parser)]
#[command(name = "mimalign", version, about = "Masked image modeling with frozen-teacher feature alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a student against the configured teacher.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Linear probe of a frozen backbone on a labeled corpus.
    Probe(Common),
    /// Per-token probe of a frozen backbone, scored by mean IoU.
    DenseProbe(Common),
    /// End-to-end fine-tuning with a fresh classifier.
    Finetune(Common),
    /// Dump CLS attention maps as PGM and CSV.
    Attnmap(Common),
    /// Write a synthetic labeled corpus and its foreground masks.
    SynthData(Common),
    /// Compare guidance kinds across seeds.
    Ablate(Common),
    /// Train the toy semantic teacher and save its frozen backbone.
    TeacherTrain(Common),
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (set in --config files or with --set):\n");
    for k in Config::KEYS {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        s.push_str(&format!("  {:<24} {} [default: {}]\n", k.name, k.doc, default));
    }
    s
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&common.set)?;
    Ok(cfg)
}

fn out_file(cfg: &Config, default_name: &str) -> PathBuf {
    if cfg.out.is_empty() {
        Path::new(&cfg.out_dir).join(default_name)
    } else {
        PathBuf::from(&cfg.out)
    }
}

fn report(kind: &str, r: &ProbeResult) {
    println!(
        "{kind} {:.6} classes={} samples={} config={}",
        r.metric, r.classes, r.samples, r.config_digest
    );
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common, resume } => {
            let cfg = load_config(&common)?;
            let (out, acc) = run_pretraining(&cfg, resume.as_deref())?;
            if let Some(a) = acc {
                println!("teacher held-out accuracy {a:.4}");
            }
            if let Some(l) = out.losses.last() {
                println!("step {} loss {l:.6}", out.checkpoint.step);
            }
            for p in &out.checkpoints {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Probe(common) => {
            let cfg = load_config(&common)?;
            let (corpus, _) = labeled_eval_set(&cfg)?;
            let r = linear_probe(&Backbone::from_config(&cfg)?, &corpus, &ProbeOptions::from_config(&cfg)?)?;
            report("accuracy", &r);
        }
        Command::DenseProbe(common) => {
            let cfg = load_config(&common)?;
            let (corpus, masks) = labeled_eval_set(&cfg)?;
            let masks = masks.ok_or_else(|| Error::Config(format!("no patch masks found next to {}", cfg.data)))?;
            let r = dense_probe(&Backbone::from_config(&cfg)?, &corpus, &masks, &ProbeOptions::from_config(&cfg)?)?;
            report("mean_iou", &r);
        }
        Command::Finetune(common) => {
            let cfg = load_config(&common)?;
            let (corpus, _) = labeled_eval_set(&cfg)?;
            let r = finetune(&Backbone::from_config(&cfg)?, &corpus, &FinetuneOptions::from_config(&cfg))?;
            report("accuracy", &r);
        }
        Command::Attnmap(common) => {
            let cfg = load_config(&common)?;
            let (corpus, _) = labeled_eval_set(&cfg)?;
            let n = cfg.attn_count.min(corpus.len());
            let layer = cfg.attn_layer.checked_sub(1);
            let dir = Path::new(&cfg.out_dir).join("attention");
            let dumps = dump_attention(&Backbone::from_config(&cfg)?, &corpus.images[..n], layer, &dir)?;
            println!("wrote {} maps to {}", dumps.len(), dir.display());
        }
        Command::SynthData(common) => {
            let cfg = load_config(&common)?;
            let ds = synth_dataset(cfg.synth_seed, cfg.synth_count, cfg.synth_classes, cfg.image_size)?;
            let path = out_file(&cfg, "synth.corpus");
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_synth(&ds, &path)?;
            println!("wrote {} images to {}", ds.corpus.len(), path.display());
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let dir = PathBuf::from(&cfg.out_dir);
            let r = run_ablation(&cfg, &cfg.ablate_guidance, &cfg.ablate_seeds, &HashMap::new(), Some(&dir))?;
            print!("{}", r.rows_csv());
            print!("{r}");
        }
        Command::TeacherTrain(common) => {
            let cfg = load_config(&common)?;
            cfg.teacher_vit().validate().map_err(|e| Error::Config(format!("teacher: {e}")))?;
            let toy = train_toy_teacher(&cfg.toy_teacher_spec(), &cfg.normalization()?)?;
            let path = out_file(&cfg, "teacher.mimt");
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let blobs = toy.teacher.params().expect("toy teacher has weights").to_blobs();
            tensor_save(blobs.iter().map(|(k, v)| (k.as_str(), v)), &path)?;
            println!("teacher held-out accuracy {:.4}", toy.heldout_accuracy);
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = keys_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in [
        "pretrain",
        "probe",
        "dense-probe",
        "finetune",
        "attnmap",
        "synth-data",
        "ablate",
        "teacher-train",
    ] {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(help.clone()));
    }
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
