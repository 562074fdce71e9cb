//! The pre-training loop: sample a batch, mask it, ask the teacher for the
//! clean-image features, align the student's predictions and take an AdamW
//! step. Everything random is keyed by `(seed, step, position)`, so a run is
//! reproducible bit for bit and a resumed run continues the same trajectory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::classifier::batch_indices;
use crate::config::Config;
use crate::data::{augment, load_corpus, synth_dataset, Corpus};
use crate::error::{Error, Result};
use crate::masking::{random_mask, BlockwiseMasker, MaskSpec, MaskingKind};
use crate::optim::{adamw_step, OptimizerState};
use crate::rng::{self, tag};
use crate::student::{batch_loss_grad, init_student, Sample, StudentParams};
use crate::teacher::{load_teacher_weights, train_toy_teacher, Teacher, TeacherKind};
use crate::tensor::TensorBlob;
use crate::vit::patchify;

pub const METRICS_HEADER: &str = "step,loss,lr,ms";
pub const METRICS_FILE: &str = "metrics.csv";

/// Teacher named by the config; the second value is the toy teacher's
/// held-out accuracy when one was trained.
pub fn build_teacher(cfg: &Config) -> Result<(Teacher, Option<f64>)> {
    let student = cfg.student();
    let teacher = match cfg.teacher_kind()? {
        TeacherKind::FrozenVit { weights: Some(path), .. } => load_teacher_weights(&path, &cfg.teacher_vit())?,
        TeacherKind::FrozenVit { weights: None, seed } => Teacher::random_vit(cfg.teacher_vit(), seed)?,
        TeacherKind::Pixel => Teacher::pixel(student.image_size, student.patch_size, student.channels)?,
        TeacherKind::HogLike { bins, cell } => {
            Teacher::hog_like(student.image_size, student.patch_size, student.channels, bins, cell)?
        }
        TeacherKind::ToySemantic(spec) => {
            let toy = train_toy_teacher(&spec, &cfg.normalization()?)?;
            toy.teacher.check_compatible(&student)?;
            return Ok((toy.teacher, Some(toy.heldout_accuracy)));
        }
    };
    teacher.check_compatible(&student)?;
    Ok((teacher, None))
}

/// The pre-training corpus: the `data` path, or synthetic shapes.
pub fn training_corpus(cfg: &Config) -> Result<Corpus> {
    let norm = cfg.normalization()?;
    if cfg.data.is_empty() {
        let ds = synth_dataset(cfg.synth_seed, cfg.synth_count, cfg.synth_classes, cfg.image_size)?;
        let images = ds.corpus.images.iter().map(|i| norm.apply(i)).collect::<Result<_>>()?;
        Ok(Corpus {
            images,
            labels: ds.corpus.labels,
        })
    } else {
        load_corpus(Path::new(&cfg.data), &norm)
    }
}

/// Mask for image `j` of step `step`.
pub fn step_mask(cfg: &Config, grid: usize, step: u64, j: usize) -> Result<MaskSpec> {
    let seed = rng::derive(cfg.seed, &[tag::MASK, step, j as u64]);
    match cfg.masking_kind()? {
        MaskingKind::Blockwise => BlockwiseMasker {
            min_block: cfg.mask_min_block,
            ..BlockwiseMasker::default()
        }
        .generate(grid, grid, cfg.mask_count, seed),
        MaskingKind::Random => random_mask(grid, grid, cfg.mask_count, seed),
    }
}

/// Image `j` of step `step` as the student and teacher see it.
pub fn step_view(cfg: &Config, image: &TensorBlob, step: u64, j: usize) -> TensorBlob {
    if cfg.augment_pad == 0 {
        image.clone()
    } else {
        augment(image, cfg.augment_pad, cfg.seed, &[tag::AUGMENT, step, j as u64])
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss of every step this call executed.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.mimt"))
}

/// Fresh or resumed training state.
pub fn initial_state(cfg: &Config, teacher: &Teacher, resume: Option<Checkpoint>) -> Result<Checkpoint> {
    match resume {
        Some(c) => {
            if c.config_digest != cfg.digest() {
                return Err(Error::config("checkpoint was written under a different training configuration"));
            }
            if c.step > cfg.total_steps {
                return Err(Error::config(format!(
                    "checkpoint step {} is past total_steps {}",
                    c.step, cfg.total_steps
                )));
            }
            Ok(c)
        }
        None => {
            let student = init_student(&cfg.student(), teacher.feature_dim(), cfg.seed)?;
            let optimizer = OptimizerState::new(&student, cfg.adamw());
            Ok(Checkpoint {
                config: cfg.student(),
                student,
                optimizer,
                step: 0,
                config_digest: cfg.digest(),
            })
        }
    }
}

/// Runs pre-training from `resume` (or from scratch) up to `total_steps`.
///
/// With `out_dir` set, metrics go to `metrics.csv` and checkpoints to
/// `step-NNNNNN.mimt` every `checkpoint_every` steps and at the end. A
/// non-finite loss aborts the run; checkpoints already written stay intact.
pub fn pretrain(
    cfg: &Config,
    teacher: &Teacher,
    corpus: &Corpus,
    resume: Option<Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let vit = cfg.student();
    teacher.check_compatible(&vit)?;
    if corpus.is_empty() {
        return Err(Error::config("pre-training corpus is empty"));
    }
    let variant = cfg.loss_variant()?;
    let schedule = cfg.schedule()?;
    let mut state = initial_state(cfg, teacher, resume)?;
    if state.config != vit {
        return Err(Error::config("checkpoint architecture differs from the configured student"));
    }

    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.txt"), cfg.serialize())?;
            Some(open_metrics(&dir.join(METRICS_FILE), state.step)?)
        }
        None => None,
    };
    let mut outcome_paths = Vec::new();
    let mut losses = Vec::new();
    let grid = vit.grid();

    while state.step < cfg.total_steps {
        let step = state.step;
        let started = Instant::now();
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, corpus.len());
        let mut patches = Vec::with_capacity(idx.len());
        let mut masks = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let view = step_view(cfg, &corpus.images[i], step, j);
            targets.push(teacher.extract(&view)?);
            masks.push(step_mask(cfg, grid, step, j)?);
            patches.push(patchify(&view, &vit)?);
        }
        let samples: Vec<Sample<'_, f32>> = (0..idx.len())
            .map(|j| Sample {
                patches: &patches[j],
                mask: &masks[j],
                target: &targets[j],
            })
            .collect();
        let params = StudentParams::<f32>::from_store(&state.student, &vit)?;
        let (loss, grads) = batch_loss_grad(&params, &vit, &samples, variant)
            .map_err(|e| abort(e, step, out_dir, &outcome_paths))?;
        if !loss.is_finite() {
            return Err(abort(Error::numeric("non-finite loss"), step, out_dir, &outcome_paths));
        }
        let lr = schedule.lr_at(step)?;
        adamw_step(&mut state.student, &grads.to_blobs(&vit)?, &mut state.optimizer, lr)
            .map_err(|e| abort(e, step, out_dir, &outcome_paths))?;
        state.step += 1;
        losses.push(loss);

        if let (Some(w), Some(dir)) = (metrics.as_mut(), out_dir) {
            let ms = if cfg.metrics_wallclock {
                started.elapsed().as_millis()
            } else {
                0
            };
            writeln!(w, "{},{loss},{lr},{ms}", state.step)?;
            let periodic = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
            if periodic || state.step == cfg.total_steps {
                w.flush()?;
                let path = checkpoint_path(dir, state.step);
                state.save(&path)?;
                outcome_paths.push(path);
            }
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(PretrainOutcome {
        checkpoint: state,
        losses,
        checkpoints: outcome_paths,
        metrics: out_dir.map(|d| d.join(METRICS_FILE)),
    })
}

/// Builds the teacher and corpus from the config, then pre-trains into
/// `out_dir`, resuming from `resume` when given.
pub fn run_pretraining(cfg: &Config, resume: Option<&Path>) -> Result<(PretrainOutcome, Option<f64>)> {
    cfg.validate()?;
    let resume = resume.map(|p| Checkpoint::load(p, cfg.adamw())).transpose()?;
    let (teacher, accuracy) = build_teacher(cfg)?;
    let corpus = training_corpus(cfg)?;
    let out = PathBuf::from(&cfg.out_dir);
    Ok((pretrain(cfg, &teacher, &corpus, resume, Some(&out))?, accuracy))
}

fn abort(e: Error, step: u64, out_dir: Option<&Path>, saved: &[PathBuf]) -> Error {
    let kept = match (saved.last(), out_dir) {
        (Some(p), _) => format!("; last good checkpoint {}", p.display()),
        (None, Some(dir)) => latest_checkpoint(dir)
            .map(|p| format!("; last good checkpoint {}", p.display()))
            .unwrap_or_default(),
        _ => String::new(),
    };
    match e {
        Error::Numeric(m) => Error::numeric(format!("step {}: {m}{kept}", step + 1)),
        other => other,
    }
}

/// Highest-step checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".mimt"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, entry.path()));
        }
    }
    best.map(|(_, p)| p)
}

/// Opens the metrics file, keeping only rows up to `resume_step`.
fn open_metrics(path: &Path, resume_step: u64) -> Result<std::io::BufWriter<fs::File>> {
    let mut kept = String::from(METRICS_HEADER);
    kept.push('\n');
    if resume_step > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s <= resume_step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(path, kept)?;
    let f = fs::OpenOptions::new().append(true).open(path)?;
    Ok(std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        Config {
            teacher: "pixel".into(),
            depth: 1,
            synth_count: 8,
            batch_size: 4,
            total_steps: 6,
            warmup_steps: 2,
            checkpoint_every: 3,
            ..Config::default()
        }
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let cfg = small();
        let (teacher, _) = build_teacher(&cfg).unwrap();
        let corpus = training_corpus(&cfg).unwrap();
        let d = tempfile::tempdir().unwrap();
        let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
        let ra = pretrain(&cfg, &teacher, &corpus, None, Some(&a)).unwrap();
        pretrain(&cfg, &teacher, &corpus, None, Some(&b)).unwrap();
        assert_eq!(ra.checkpoints.len(), 2);
        for f in ["metrics.csv", "step-000003.mimt", "step-000006.mimt"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        fs::create_dir_all(&c).unwrap();
        fs::copy(a.join("metrics.csv"), c.join("metrics.csv")).unwrap();
        let mid = Checkpoint::load(&a.join("step-000003.mimt"), cfg.adamw()).unwrap();
        let rc = pretrain(&cfg, &teacher, &corpus, Some(mid), Some(&c)).unwrap();
        assert_eq!(rc.losses.len(), 3);
        assert_eq!(fs::read(a.join("step-000006.mimt")).unwrap(), fs::read(c.join("step-000006.mimt")).unwrap());
        assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
        assert_eq!(latest_checkpoint(&a).unwrap(), a.join("step-000006.mimt"));
    }

    #[test]
    fn resume_rejects_other_configs() {
        let cfg = small();
        let (teacher, _) = build_teacher(&cfg).unwrap();
        let corpus = training_corpus(&cfg).unwrap();
        let out = pretrain(&Config { total_steps: 2, warmup_steps: 1, ..cfg.clone() }, &teacher, &corpus, None, None)
            .unwrap();
        assert!(pretrain(&cfg, &teacher, &corpus, Some(out.checkpoint), None).unwrap_err().is_user_error());
    }

    #[test]
    fn metrics_rows_are_increasing() {
        let cfg = small();
        let (teacher, _) = build_teacher(&cfg).unwrap();
        let d = tempfile::tempdir().unwrap();
        pretrain(&cfg, &teacher, &training_corpus(&cfg).unwrap(), None, Some(d.path())).unwrap();
        let text = fs::read_to_string(d.path().join(METRICS_FILE)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        let steps: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, (1..=6).collect::<Vec<_>>());
        assert!(text.lines().skip(1).all(|l| l.ends_with(",0")));
    }
}
