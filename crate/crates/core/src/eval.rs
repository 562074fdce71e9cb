//! Downstream measurements of a backbone: linear probe, dense per-token
//! probe, fine-tuning, CLS attention dumps and the guidance ablation.
//!
//! Probes never modify the backbone; they train an affine classifier on
//! frozen, standardized features with AdamW (no weight decay) and score it on
//! a held-out split disjoint from the training split.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::checkpoint::Checkpoint;
use crate::classifier::{self, add_classifier, batch_indices, SupervisedConfig};
use crate::config::Config;
use crate::data::{patch_labels, read_masks, synth_dataset, Corpus, ForegroundMask};
use crate::error::{Error, Result};
use crate::nn::{self, Mat};
use crate::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use crate::pretrain::{build_teacher, pretrain, training_corpus};
use crate::rng::{self, tag};
use crate::teacher::Teacher;
use crate::tensor::{tensor_load, ParamStore, TensorBlob};
use crate::vit::{self, cls_attention_map, embed, encode, forward, init_tensor, patchify, ViTConfig, VitParams};

/// Score of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Accuracy, or mean per-class IoU for the dense probe; in `[0, 1]`.
    pub metric: f64,
    pub classes: usize,
    /// Held-out samples scored (images, or tokens for the dense probe).
    pub samples: usize,
    pub config_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeFeature {
    Cls,
    MeanPatch,
}

impl FromStr for ProbeFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Self::Cls),
            "mean" => Ok(Self::MeanPatch),
            other => Err(Error::config(format!("probe.feature must be cls or mean, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub feature: ProbeFeature,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl ProbeOptions {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            feature: cfg.probe_feature.parse()?,
            steps: cfg.probe_steps,
            batch_size: cfg.probe_batch_size,
            lr: cfg.probe_lr,
            holdout: cfg.probe_holdout,
            seed: cfg.probe_seed,
            config_digest: cfg.digest_hex(),
        })
    }
}

/// A backbone to evaluate: architecture plus weights (extra entries ignored).
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ViTConfig,
    pub params: ParamStore,
}

impl Backbone {
    pub fn random(config: ViTConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            config,
            params: vit::init_params(&config, seed)?,
        })
    }

    /// Loads a pre-training checkpoint, or a bare backbone weights file
    /// whose architecture is `fallback`.
    pub fn load(path: &Path, fallback: ViTConfig) -> Result<Self> {
        let blobs = tensor_load(path).map_err(|e| match e {
            Error::Format { offset, message } => Error::FileFormat {
                path: path.to_owned(),
                message: format!("byte {offset}: {message}"),
            },
            other => other,
        })?;
        if blobs.contains_key("meta.format_version") {
            let c = Checkpoint::from_blobs(blobs, AdamWConfig::default()).map_err(|e| Error::FileFormat {
                path: path.to_owned(),
                message: e.to_string(),
            })?;
            return Ok(Self::from_checkpoint(&c));
        }
        let params = ParamStore::from_blobs(blobs, false);
        VitParams::<f32>::from_store(&params, &fallback, "").map_err(|e| Error::FileFormat {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Ok(Self {
            config: fallback,
            params,
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Self {
        Self {
            config: c.config,
            params: c.student.clone(),
        }
    }

    /// `checkpoint` key, or a random backbone seeded by `seed` when empty.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        if cfg.checkpoint.is_empty() {
            Self::random(cfg.student(), cfg.seed)
        } else {
            Self::load(Path::new(&cfg.checkpoint), cfg.student())
        }
    }

    /// Backbone entries only, all trainable, in canonical order.
    pub fn backbone_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (name, shape) in self.config.param_shapes() {
            s.insert(name.clone(), self.params.expect(&name, &shape)?.clone(), true)?;
        }
        Ok(s)
    }

    /// Final-layer token features (row 0 is CLS) for one image.
    pub fn tokens(&self, image: &TensorBlob) -> Result<Mat<f32>> {
        let p = VitParams::<f32>::from_store(&self.params, &self.config, "")?;
        tokens_with(&p, &self.config, image)
    }
}

fn tokens_with(p: &VitParams<f32>, cfg: &ViTConfig, image: &TensorBlob) -> Result<Mat<f32>> {
    Ok(encode(embed(&patchify(image, cfg)?, p, cfg)?, p, cfg)?.0)
}

/// One pooled feature vector per image.
pub fn image_features(backbone: &Backbone, images: &[TensorBlob], feature: ProbeFeature) -> Result<Vec<Vec<f32>>> {
    let p = VitParams::<f32>::from_store(&backbone.params, &backbone.config, "")?;
    images
        .iter()
        .map(|img| {
            let t = tokens_with(&p, &backbone.config, img)?;
            Ok(match feature {
                ProbeFeature::Cls => t.row(0).to_vec(),
                ProbeFeature::MeanPatch => {
                    let mut acc = vec![0.0f64; t.cols];
                    for r in 1..t.rows {
                        for (a, v) in acc.iter_mut().zip(t.row(r)) {
                            *a += *v as f64;
                        }
                    }
                    acc.iter().map(|v| (v / (t.rows - 1) as f64) as f32).collect()
                }
            })
        })
        .collect()
}

/// Patch-token features (CLS dropped) per image.
pub fn patch_features(backbone: &Backbone, images: &[TensorBlob]) -> Result<Vec<Vec<Vec<f32>>>> {
    let p = VitParams::<f32>::from_store(&backbone.params, &backbone.config, "")?;
    images
        .iter()
        .map(|img| {
            let t = tokens_with(&p, &backbone.config, img)?;
            Ok((1..t.rows).map(|r| t.row(r).to_vec()).collect())
        })
        .collect()
}

/// Seeded disjoint `(train, held_out)` index split; the held-out part has
/// `round(n * fraction)` items, at least one when `n >= 2`.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    if n < 2 {
        return Err(Error::contract(format!("need at least 2 samples to split, got {n}")));
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let perm = rng::permutation(&mut rng::stream(seed, &[tag::SPLIT]), n);
    let mut test = perm[..k].to_vec();
    let mut train = perm[k..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Affine classifier over standardized features.
#[derive(Debug, Clone)]
pub struct AffineProbe {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: ParamStore,
    pub classes: usize,
}

const PROBE_WEIGHT: &str = "probe.weight";
const PROBE_BIAS: &str = "probe.bias";

impl AffineProbe {
    fn standardize(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect()
    }

    fn logits(&self, x: &[f32]) -> Vec<f64> {
        let z = self.standardize(x);
        let w = self.weights.get(PROBE_WEIGHT).expect("probe weight").data();
        let b = self.weights.get(PROBE_BIAS).expect("probe bias").data();
        let d = z.len();
        (0..self.classes)
            .map(|c| b[c] as f64 + w[c * d..(c + 1) * d].iter().zip(&z).map(|(&a, z)| a as f64 * z).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        nn::argmax(&self.logits(x))
    }
}

/// Trains an affine probe with cross-entropy; weight decay is off.
pub fn train_affine_probe(
    features: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    opts: &ProbeOptions,
) -> Result<AffineProbe> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::contract("probe needs matching, non-empty features and labels"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::range(format!("label {bad} outside {classes} classes")));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0f64; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; d];
    for f in features {
        for ((s, &v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let std = var.into_iter().map(|v| v.sqrt().max(1e-6)).collect();

    let mut weights = ParamStore::new();
    weights.insert(
        PROBE_WEIGHT,
        init_tensor(&[classes, d], PROBE_WEIGHT, opts.seed, &[tag::HEAD_INIT, 11]),
        true,
    )?;
    weights.insert(PROBE_BIAS, TensorBlob::zeros(&[classes]), true)?;
    let mut probe = AffineProbe {
        mean,
        std,
        weights,
        classes,
    };
    let hyper = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = OptimizerState::new(&probe.weights, hyper);
    let schedule = LrSchedule::new(opts.lr, opts.lr, 0, opts.steps.max(1))?;
    for step in 0..opts.steps {
        let idx = batch_indices(opts.seed, step, opts.batch_size.max(1), features.len());
        let mut gw = vec![0.0f64; classes * d];
        let mut gb = vec![0.0f64; classes];
        for &i in &idx {
            let z = probe.standardize(&features[i]);
            let (_, dl) = nn::cross_entropy(&probe.logits(&features[i]), labels[i]);
            for c in 0..classes {
                gb[c] += dl[c];
                for (g, zv) in gw[c * d..(c + 1) * d].iter_mut().zip(&z) {
                    *g += dl[c] * zv;
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        let grads = IndexMap::from([
            (
                PROBE_WEIGHT.to_owned(),
                TensorBlob::new(vec![classes, d], gw.iter().map(|g| (g * inv) as f32).collect())?,
            ),
            (
                PROBE_BIAS.to_owned(),
                TensorBlob::new(vec![classes], gb.iter().map(|g| (g * inv) as f32).collect())?,
            ),
        ]);
        adamw_step(&mut probe.weights, &grads, &mut state, schedule.lr_at(step)?)?;
    }
    Ok(probe)
}

/// Linear probe on precomputed per-image features (also the one-hot test hook).
pub fn linear_probe_on_features(
    features: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    let (train, test) = holdout_split(features.len(), opts.holdout, opts.seed)?;
    let pick = |idx: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
        (idx.iter().map(|&i| features[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let probe = train_affine_probe(&xtr, &ytr, classes, opts)?;
    let pred: Vec<usize> = xte.iter().map(|x| probe.predict(x)).collect();
    Ok(ProbeResult {
        metric: classifier::accuracy(&pred, &yte),
        classes,
        samples: yte.len(),
        config_digest: opts.config_digest.clone(),
    })
}

/// Frozen-backbone linear probe on a labeled corpus.
pub fn linear_probe(backbone: &Backbone, corpus: &Corpus, opts: &ProbeOptions) -> Result<ProbeResult> {
    let labels = corpus.require_labels()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let feats = image_features(backbone, &corpus.images, opts.feature)?;
    linear_probe_on_features(&feats, &labels, classes, opts)
}

/// IoU per class over flat label arrays; `None` when a class appears in
/// neither prediction nor truth.
pub fn per_class_iou(pred: &[usize], truth: &[usize], classes: usize) -> Vec<Option<f64>> {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fnn = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    (0..classes)
        .map(|c| {
            let union = tp[c] + fp[c] + fnn[c];
            (union > 0).then(|| tp[c] as f64 / union as f64)
        })
        .collect()
}

/// Mean of the defined per-class IoUs.
pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let ious: Vec<f64> = per_class_iou(pred, truth, classes).into_iter().flatten().collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Dense probe on precomputed per-image token features and token labels
/// (also the one-hot test hook). Images, not tokens, are split.
pub fn dense_probe_on_features(
    tokens: &[Vec<Vec<f32>>],
    labels: &[Vec<usize>],
    classes: usize,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    if tokens.len() != labels.len() {
        return Err(Error::contract("token features and token labels differ in image count"));
    }
    let (train, test) = holdout_split(tokens.len(), opts.holdout, opts.seed)?;
    let flat = |idx: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &i in idx {
            x.extend(tokens[i].iter().cloned());
            y.extend(labels[i].iter().copied());
        }
        (x, y)
    };
    let (xtr, ytr) = flat(&train);
    let (xte, yte) = flat(&test);
    let probe = train_affine_probe(&xtr, &ytr, classes, opts)?;
    let pred: Vec<usize> = xte.iter().map(|x| probe.predict(x)).collect();
    Ok(ProbeResult {
        metric: mean_iou(&pred, &yte, classes),
        classes,
        samples: yte.len(),
        config_digest: opts.config_digest.clone(),
    })
}

/// Frozen-backbone per-token probe: background is class 0 and shape class
/// `k` is `k + 1`; scored by mean per-class IoU on held-out images.
pub fn dense_probe(
    backbone: &Backbone,
    corpus: &Corpus,
    masks: &[ForegroundMask],
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    let labels = corpus.require_labels()?;
    if masks.len() != corpus.len() {
        return Err(Error::contract(format!(
            "dense probe needs one patch mask per image: {} masks for {} images",
            masks.len(),
            corpus.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1) + 1;
    let token_labels = masks
        .iter()
        .zip(&labels)
        .map(|(m, &l)| {
            Ok(patch_labels(m, l, backbone.config.patch_size)?
                .into_iter()
                .map(|v| v as usize)
                .collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let tokens = patch_features(backbone, &corpus.images)?;
    dense_probe_on_features(&tokens, &token_labels, classes, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub optimizer: AdamWConfig,
    pub augment_pad: usize,
    pub holdout: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl FinetuneOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            steps: cfg.finetune_steps,
            batch_size: cfg.finetune_batch_size,
            lr: cfg.finetune_lr,
            warmup_steps: cfg.finetune_warmup_steps,
            optimizer: cfg.adamw(),
            augment_pad: cfg.augment_pad,
            holdout: cfg.probe_holdout,
            seed: cfg.probe_seed,
            config_digest: cfg.digest_hex(),
        }
    }
}

/// End-to-end training of backbone and a fresh classifier; held-out accuracy.
pub fn finetune(backbone: &Backbone, corpus: &Corpus, opts: &FinetuneOptions) -> Result<ProbeResult> {
    let labels = corpus.require_labels()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let (train, test) = holdout_split(corpus.len(), opts.holdout, opts.seed)?;
    let xtr: Vec<TensorBlob> = train.iter().map(|&i| corpus.images[i].clone()).collect();
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let mut store = backbone.backbone_store()?;
    add_classifier(&mut store, &backbone.config, classes, opts.seed)?;
    let sc = SupervisedConfig {
        steps: opts.steps,
        batch_size: opts.batch_size,
        base_lr: opts.lr,
        min_lr: 0.0,
        warmup_steps: opts.warmup_steps.min(opts.steps.saturating_sub(1)),
        optimizer: opts.optimizer,
        seed: opts.seed,
        augment_pad: (opts.augment_pad > 0).then_some(opts.augment_pad),
    };
    let (store, losses) = classifier::train_classifier(&backbone.config, store, &xtr, &ytr, &sc)
        .map_err(|e| match e {
            Error::Numeric(m) => Error::numeric(format!("fine-tuning diverged: {m}")),
            other => other,
        })?;
    if let Some(step) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::numeric(format!("fine-tuning diverged at step {}", step + 1)));
    }
    let xte: Vec<TensorBlob> = test.iter().map(|&i| corpus.images[i].clone()).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let pred = classifier::predict_classes(&backbone.config, &store, &xte)?;
    Ok(ProbeResult {
        metric: classifier::accuracy(&pred, &yte),
        classes,
        samples: yte.len(),
        config_digest: opts.config_digest.clone(),
    })
}

/// One image's CLS attention, raw and min-max normalized.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub raw: TensorBlob,
    pub normalized: TensorBlob,
    pub pgm: PathBuf,
    pub csv: PathBuf,
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max(map: &TensorBlob) -> TensorBlob {
    let d = map.data();
    let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let data = d
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    TensorBlob::new(map.shape().to_vec(), data).expect("finite")
}

/// Binary (P5) 8-bit graymap bytes.
pub fn encode_pgm(map: &TensorBlob) -> Vec<u8> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// CLS attention of block `layer` (0-based; `None` is the last block),
/// averaged over heads, for each image. Writes `attn-NNN.pgm` (normalized)
/// and `attn-NNN.csv` (raw values) into `out_dir`.
pub fn dump_attention(
    backbone: &Backbone,
    images: &[TensorBlob],
    layer: Option<usize>,
    out_dir: &Path,
) -> Result<Vec<AttentionDump>> {
    let cfg = &backbone.config;
    let layer = layer.unwrap_or(cfg.depth - 1);
    if layer >= cfg.depth {
        return Err(Error::config(format!("attention layer {} exceeds depth {}", layer + 1, cfg.depth)));
    }
    let p = VitParams::<f32>::from_store(&backbone.params, cfg, "")?;
    fs::create_dir_all(out_dir)?;
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let tokens = embed(&patchify(img, cfg)?, &p, cfg)?;
        let (_, rec) = forward(tokens, &p, cfg, true)?;
        let raw = cls_attention_map(&rec.expect("captured"), layer)?;
        let normalized = min_max(&raw);
        let pgm = out_dir.join(format!("attn-{i:03}.pgm"));
        let csv = out_dir.join(format!("attn-{i:03}.csv"));
        fs::write(&pgm, encode_pgm(&normalized))?;
        let w = raw.shape()[1];
        let text: String = raw
            .data()
            .chunks(w)
            .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        fs::write(&csv, text)?;
        out.push(AttentionDump {
            raw,
            normalized,
            pgm,
            csv,
        });
    }
    Ok(out)
}

/// Labeled evaluation images and, when available, their foreground masks.
pub fn labeled_eval_set(cfg: &Config) -> Result<(Corpus, Option<Vec<ForegroundMask>>)> {
    if cfg.data.is_empty() {
        let ds = synth_dataset(cfg.synth_seed, cfg.synth_count, cfg.synth_classes, cfg.image_size)?;
        let norm = cfg.normalization()?;
        let images = ds.corpus.images.iter().map(|i| norm.apply(i)).collect::<Result<_>>()?;
        let corpus = Corpus {
            images,
            labels: ds.corpus.labels,
        };
        Ok((corpus, Some(ds.masks)))
    } else {
        let corpus = training_corpus(cfg)?;
        let masks = read_masks(Path::new(&cfg.data)).ok();
        Ok((corpus, masks))
    }
}

/// Guidance without a teacher: the randomly initialized backbone itself.
pub const NO_GUIDANCE: &str = "none";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub guidance: String,
    pub seed: u64,
    pub probe_acc: f64,
    pub dense_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSummary {
    pub guidance: String,
    pub runs: usize,
    pub probe_mean: f64,
    pub probe_std: f64,
    pub dense_mean: f64,
    pub dense_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<GuidanceSummary>,
    /// Best guidance by mean probe accuracy and by mean dense IoU; only
    /// present with two or more guidance kinds.
    pub comparison: Option<(String, String)>,
}

impl AblationReport {
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("guidance,seed,probe_acc,dense_iou\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.guidance, r.seed, r.probe_acc, r.dense_iou));
        }
        s
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.summary {
            writeln!(
                f,
                "{:<14} n={} probe {:.4} ± {:.4}  dense {:.4} ± {:.4}",
                g.guidance, g.runs, g.probe_mean, g.probe_std, g.dense_mean, g.dense_std
            )?;
        }
        if let Some((p, d)) = &self.comparison {
            writeln!(f, "best probe: {p}; best dense: {d}")?;
        }
        Ok(())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

pub fn summarize(rows: &[AblationRow]) -> (Vec<GuidanceSummary>, Option<(String, String)>) {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.guidance.as_str()) {
            order.push(&r.guidance);
        }
    }
    let summary: Vec<GuidanceSummary> = order
        .iter()
        .map(|g| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.guidance == *g).collect();
            let (pm, ps) = mean_std(&sel.iter().map(|r| r.probe_acc).collect::<Vec<_>>());
            let (dm, ds) = mean_std(&sel.iter().map(|r| r.dense_iou).collect::<Vec<_>>());
            GuidanceSummary {
                guidance: g.to_string(),
                runs: sel.len(),
                probe_mean: pm,
                probe_std: ps,
                dense_mean: dm,
                dense_std: ds,
            }
        })
        .collect();
    let comparison = (summary.len() >= 2).then(|| {
        let best = |key: fn(&GuidanceSummary) -> f64| {
            summary
                .iter()
                .fold(&summary[0], |b, g| if key(g) > key(b) { g } else { b })
                .guidance
                .clone()
        };
        (best(|g| g.probe_mean), best(|g| g.dense_mean))
    });
    (summary, comparison)
}

/// For every guidance kind and seed: pre-train (skipped for `none`), then
/// linear- and dense-probe the backbone. Teachers in `provided` are used
/// as given; the others are built from the config once per kind. With
/// `out_dir`, `ablation.csv` is appended row by row so that a failing arm
/// leaves the finished rows on disk, and `ablation_summary.txt` is written
/// at the end.
pub fn run_ablation(
    base: &Config,
    guidance: &[String],
    seeds: &[u64],
    provided: &HashMap<String, Teacher>,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if guidance.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one guidance kind and one seed"));
    }
    let (corpus, masks) = labeled_eval_set(base)?;
    let masks = masks.ok_or_else(|| Error::contract("ablation needs per-patch masks for the dense probe"))?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("ablation.csv"))?;
            f.write_all(b"guidance,seed,probe_acc,dense_iou\n")?;
            Some(f)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for g in guidance {
        let teacher = if g == NO_GUIDANCE {
            None
        } else if let Some(t) = provided.get(g) {
            Some(t.clone())
        } else {
            let cfg = Config {
                teacher: g.clone(),
                ..base.clone()
            };
            cfg.validate()?;
            Some(build_teacher(&cfg)?.0)
        };
        for &seed in seeds {
            let cfg = Config {
                teacher: if g == NO_GUIDANCE { base.teacher.clone() } else { g.clone() },
                seed,
                ..base.clone()
            };
            let backbone = match &teacher {
                None => Backbone::random(cfg.student(), seed)?,
                Some(t) => {
                    let run_dir = out_dir.map(|d| d.join(format!("{g}-{seed}")));
                    let out = pretrain(&cfg, t, &corpus, None, run_dir.as_deref())?;
                    Backbone::from_checkpoint(&out.checkpoint)
                }
            };
            let opts = ProbeOptions {
                seed,
                ..ProbeOptions::from_config(&cfg)?
            };
            let probe = linear_probe(&backbone, &corpus, &opts)?;
            let dense = dense_probe(&backbone, &corpus, &masks, &opts)?;
            let row = AblationRow {
                guidance: g.clone(),
                seed,
                probe_acc: probe.metric,
                dense_iou: dense.metric,
            };
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{},{},{},{}", row.guidance, row.seed, row.probe_acc, row.dense_iou)?;
                f.flush()?;
            }
            rows.push(row);
        }
    }
    let (summary, comparison) = summarize(&rows);
    let report = AblationReport {
        rows,
        summary,
        comparison,
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join("ablation_summary.txt"), report.to_string())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> ProbeOptions {
        ProbeOptions {
            feature: ProbeFeature::Cls,
            steps: 200,
            batch_size: 16,
            lr: 1e-2,
            holdout: 0.25,
            seed: 4,
            config_digest: String::new(),
        }
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (a, b) = holdout_split(10, 0.25, 1).unwrap();
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(holdout_split(10, 1.0, 1).is_err());
    }

    #[test]
    fn one_hot_features_are_perfect() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let feats: Vec<Vec<f32>> = labels.iter().map(|&l| (0..4).map(|c| (c == l) as u8 as f32).collect()).collect();
        assert_eq!(linear_probe_on_features(&feats, &labels, 4, &opts()).unwrap().metric, 1.0);

        let tok_labels: Vec<Vec<usize>> = (0..12).map(|i| (0..4).map(|t| (i + t) % 3).collect()).collect();
        let toks: Vec<Vec<Vec<f32>>> = tok_labels
            .iter()
            .map(|ls| ls.iter().map(|&l| (0..3).map(|c| (c == l) as u8 as f32).collect()).collect())
            .collect();
        assert_eq!(dense_probe_on_features(&toks, &tok_labels, 3, &opts()).unwrap().metric, 1.0);
    }

    #[test]
    fn all_background_scores_zero_foreground_iou() {
        let truth = [0, 0, 1, 1, 2];
        let pred = [0; 5];
        let ious = per_class_iou(&pred, &truth, 3);
        assert_eq!(ious[1], Some(0.0));
        assert_eq!(ious[2], Some(0.0));
        assert!((ious[0].unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_corpus_is_rejected() {
        let c = Corpus {
            images: vec![TensorBlob::zeros(&[32, 32, 3]); 4],
            labels: vec![None; 4],
        };
        let b = Backbone::random(ViTConfig { depth: 1, ..ViTConfig::vit_micro() }, 0).unwrap();
        assert!(linear_probe(&b, &c, &opts()).is_err());
        assert!(dense_probe(&b, &c, &[], &opts()).is_err());
    }

    #[test]
    fn min_max_and_pgm() {
        let m = TensorBlob::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.5]).unwrap();
        let n = min_max(&m);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[3], 1.0);
        assert!(min_max(&TensorBlob::filled(&[2, 2], 0.25)).data().iter().all(|&v| v == 0.0));
        let pgm = encode_pgm(&n);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 4);
        assert_eq!(*pgm.last().unwrap(), 255);
    }

    #[test]
    fn summary_has_comparison_only_for_several_groups() {
        let row = |g: &str, s, p| AblationRow {
            guidance: g.into(),
            seed: s,
            probe_acc: p,
            dense_iou: p / 2.0,
        };
        let (s, c) = summarize(&[row("a", 0, 0.5), row("a", 1, 0.7)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].probe_mean - 0.6).abs() < 1e-12);
        assert!(c.is_none());
        let (_, c) = summarize(&[row("a", 0, 0.5), row("b", 0, 0.9)]);
        assert_eq!(c, Some(("b".into(), "b".into())));
    }
}
