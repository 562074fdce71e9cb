//! Flat `key = value` run configuration shared by every subcommand.
//!
//! Each key has a type, a default and a one-line description; the registry in
//! [`Config::KEYS`] is the canonical key list. Keys marked as digest keys
//! feed [`Config::digest`], which checkpoints record so that a resume under a
//! different training setup is rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::classifier::SupervisedConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::masking::MaskingKind;
use crate::objective::LossVariant;
use crate::optim::{AdamWConfig, LrSchedule};
use crate::teacher::{TeacherKind, ToyTeacherSpec};
use crate::vit::ViTConfig;

/// Registry metadata for one key.
#[derive(Debug, Clone, Copy)]
pub struct KeyInfo {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
    pub digest: bool,
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
scalar_value!(usize, u64, f64, bool);

impl Value for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_owned())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

/// Comma-separated, optionally bracketed.
impl<T: Value> Value for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']').trim();
        if inner.is_empty() {
            return Ok(Vec::new());
        }
        inner.split(',').map(|p| T::parse_value(unquote(p.trim()))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(s)
}

macro_rules! config_keys {
    ($( $field:ident, $key:literal : $t:ty = $default:literal, $digest:literal, $doc:literal; )*) => {
        /// Every configurable setting, with defaults sized for `vit-micro`.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( #[doc = $doc] pub $field: $t, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self {
                    $( $field: <$t as Value>::parse_value($default).expect("registry default parses"), )*
                }
            }
        }

        impl Config {
            pub const KEYS: &'static [KeyInfo] = &[
                $( KeyInfo { name: $key, default: $default, doc: $doc, digest: $digest }, )*
            ];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = unquote(value.trim());
                match key {
                    $( $key => {
                        self.$field = <$t as Value>::parse_value(value)
                            .map_err(|e| Error::config(format!("bad value {value:?} for {key}: {e}")))?;
                    } )*
                    _ => return Err(unknown_key(key)),
                }
                Ok(())
            }

            /// Textual value of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(self.$field.render()), )*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    image_size, "image_size": usize = "32", true, "Image side length in pixels.";
    patch_size, "patch_size": usize = "8", true, "Patch side length in pixels.";
    channels, "channels": usize = "3", true, "Image channels.";
    embed_dim, "embed_dim": usize = "64", true, "Student token width.";
    depth, "depth": usize = "4", true, "Student transformer blocks.";
    heads, "heads": usize = "4", true, "Student attention heads.";
    mlp_ratio, "mlp_ratio": f64 = "4.0", true, "Student MLP hidden width as a multiple of embed_dim.";

    teacher, "teacher": String = "toy-semantic", true, "Guidance source: toy-semantic, frozen-vit, pixel or hog-like.";
    teacher_weights, "teacher.weights": String = "", true, "frozen-vit weights file; empty means random init from teacher.seed.";
    teacher_seed, "teacher.seed": u64 = "1000", true, "Seed for teacher initialization and toy-teacher training.";
    teacher_embed_dim, "teacher.embed_dim": usize = "64", true, "Teacher token width (frozen-vit, toy-semantic).";
    teacher_depth, "teacher.depth": usize = "2", true, "Teacher transformer blocks.";
    teacher_heads, "teacher.heads": usize = "4", true, "Teacher attention heads.";
    teacher_mlp_ratio, "teacher.mlp_ratio": f64 = "4.0", true, "Teacher MLP ratio.";
    hog_bins, "teacher.hog_bins": usize = "9", true, "Orientation bins of the hog teacher.";
    hog_cell, "teacher.hog_cell": usize = "4", true, "Cell side in pixels of the hog teacher; divides patch_size.";
    teacher_classes, "teacher.classes": usize = "4", true, "Shape classes the toy teacher learns.";
    teacher_train_images, "teacher.train_images": usize = "2000", true, "Toy-teacher training images.";
    teacher_heldout_images, "teacher.heldout_images": usize = "400", true, "Toy-teacher held-out images.";
    teacher_data_seed, "teacher.data_seed": u64 = "77", true, "Seed of the toy teacher's synthetic images.";
    teacher_steps, "teacher.steps": u64 = "2000", true, "Toy-teacher training steps.";
    teacher_batch_size, "teacher.batch_size": usize = "32", true, "Toy-teacher batch size.";
    teacher_lr, "teacher.lr": f64 = "5e-4", true, "Toy-teacher peak learning rate.";
    teacher_warmup_steps, "teacher.warmup_steps": u64 = "200", true, "Toy-teacher warmup steps.";

    masking, "masking": String = "blockwise", true, "Mask generator: blockwise or random.";
    mask_count, "mask_count": usize = "6", true, "Masked patches per image.";
    mask_min_block, "mask.min_block": usize = "4", true, "Minimum block area of the blockwise masker.";
    loss, "loss": String = "all-tokens", true, "Alignment loss: all-tokens or masked-only.";

    batch_size, "batch_size": usize = "32", true, "Pre-training batch size.";
    total_steps, "total_steps": u64 = "1000", true, "Pre-training optimizer steps.";
    base_lr, "base_lr": f64 = "1.5e-3", true, "Peak learning rate.";
    min_lr, "min_lr": f64 = "1e-5", true, "Learning rate at the end of the cosine decay.";
    warmup_steps, "warmup_steps": u64 = "100", true, "Linear warmup steps.";
    weight_decay, "weight_decay": f64 = "0.05", true, "AdamW decoupled weight decay.";
    beta1, "beta1": f64 = "0.9", true, "AdamW first-moment decay.";
    beta2, "beta2": f64 = "0.999", true, "AdamW second-moment decay.";
    adam_eps, "adam_eps": f64 = "1e-8", true, "AdamW denominator epsilon.";
    seed, "seed": u64 = "0", true, "Run seed for initialization, batches, masks and augmentation.";
    augment_pad, "augment_pad": usize = "2", true, "Random translation range in pixels; 0 disables crop and flip.";

    data, "data": String = "", true, "Corpus file or image directory; empty means synthetic shapes.";
    synth_count, "count": usize = "256", true, "Synthetic images generated when data is empty, and by synth-data.";
    synth_classes, "classes": usize = "4", true, "Synthetic shape classes (2 to 8).";
    synth_seed, "synth.seed": u64 = "1", true, "Synthetic corpus seed.";
    norm_mean, "norm.mean": Vec<f64> = "0.5,0.5,0.5", true, "Per-channel normalization mean.";
    norm_std, "norm.std": Vec<f64> = "0.25,0.25,0.25", true, "Per-channel normalization std.";

    out_dir, "out_dir": String = "runs/default", false, "Output directory for checkpoints, metrics and reports.";
    out, "out": String = "", false, "Output file for synth-data and teacher-train.";
    checkpoint_every, "checkpoint_every": u64 = "250", false, "Checkpoint period in steps; 0 keeps only the final one.";
    metrics_wallclock, "metrics_wallclock": bool = "false", false, "Record real step times in the metrics ms column instead of 0.";

    checkpoint, "checkpoint": String = "", false, "Checkpoint evaluated by probe, dense-probe, finetune and attnmap; empty means random init.";
    probe_feature, "probe.feature": String = "cls", false, "Linear-probe feature: cls or mean.";
    probe_steps, "probe.steps": u64 = "2000", false, "Probe classifier training steps.";
    probe_batch_size, "probe.batch_size": usize = "64", false, "Probe classifier batch size.";
    probe_lr, "probe.lr": f64 = "1e-3", false, "Probe classifier learning rate (no weight decay).";
    probe_holdout, "probe.holdout": f64 = "0.25", false, "Held-out fraction for probes and fine-tuning.";
    probe_seed, "probe.seed": u64 = "0", false, "Seed for probe split and classifier.";
    finetune_steps, "finetune.steps": u64 = "300", false, "Fine-tuning steps.";
    finetune_lr, "finetune.lr": f64 = "4e-3", false, "Fine-tuning peak learning rate.";
    finetune_warmup_steps, "finetune.warmup_steps": u64 = "30", false, "Fine-tuning warmup steps.";
    finetune_batch_size, "finetune.batch_size": usize = "32", false, "Fine-tuning batch size.";
    attn_layer, "attn.layer": usize = "0", false, "Block whose CLS attention is dumped, counted from 1; 0 means the last.";
    attn_count, "attn.count": usize = "8", false, "Images dumped by attnmap.";
    ablate_guidance, "ablate.guidance": Vec<String> = "toy-semantic,frozen-vit", false, "Guidance kinds compared by ablate.";
    ablate_seeds, "ablate.seeds": Vec<u64> = "0,1,2", false, "Seeds run for every guidance kind.";
}

fn unknown_key(key: &str) -> Error {
    let names: Vec<&str> = Config::KEYS.iter().map(|k| k.name).collect();
    Error::config(format!("unknown key {key:?}; valid keys: {}", names.join(", ")))
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment. Later lines win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key in registry order, each preceded by its description.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "# {}", k.doc);
            let _ = writeln!(s, "{} = {}", k.name, self.get(k.name).expect("registered"));
        }
        s
    }

    /// SHA-256 over the digest keys' rendered values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in Self::KEYS.iter().filter(|k| k.digest) {
            h.update(k.name.as_bytes());
            h.update([0]);
            h.update(self.get(k.name).expect("registered").as_bytes());
            h.update([0]);
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn student(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn teacher_vit(&self) -> ViTConfig {
        ViTConfig {
            embed_dim: self.teacher_embed_dim,
            depth: self.teacher_depth,
            heads: self.teacher_heads,
            mlp_ratio: self.teacher_mlp_ratio,
            ..self.student()
        }
    }

    pub fn toy_teacher_spec(&self) -> ToyTeacherSpec {
        ToyTeacherSpec {
            config: self.teacher_vit(),
            train_images: self.teacher_train_images,
            heldout_images: self.teacher_heldout_images,
            classes: self.teacher_classes,
            data_seed: self.teacher_data_seed,
            training: SupervisedConfig {
                steps: self.teacher_steps,
                batch_size: self.teacher_batch_size,
                base_lr: self.teacher_lr,
                min_lr: 0.0,
                warmup_steps: self.teacher_warmup_steps,
                optimizer: self.adamw(),
                seed: self.teacher_seed,
                augment_pad: None,
            },
        }
    }

    pub fn teacher_kind(&self) -> Result<TeacherKind> {
        Ok(match self.teacher.as_str() {
            "toy-semantic" => TeacherKind::ToySemantic(self.toy_teacher_spec()),
            "frozen-vit" => TeacherKind::FrozenVit {
                weights: (!self.teacher_weights.is_empty()).then(|| PathBuf::from(&self.teacher_weights)),
                seed: self.teacher_seed,
            },
            "pixel" => TeacherKind::Pixel,
            "hog-like" => TeacherKind::HogLike {
                bins: self.hog_bins,
                cell: self.hog_cell,
            },
            other => {
                return Err(Error::config(format!(
                    "teacher must be toy-semantic, frozen-vit, pixel or hog-like, got {other:?}"
                )))
            }
        })
    }

    pub fn masking_kind(&self) -> Result<MaskingKind> {
        match self.masking.as_str() {
            "blockwise" => Ok(MaskingKind::Blockwise),
            "random" => Ok(MaskingKind::Random),
            other => Err(Error::config(format!("masking must be blockwise or random, got {other:?}"))),
        }
    }

    pub fn loss_variant(&self) -> Result<LossVariant> {
        self.loss.parse().map_err(|_| {
            Error::config(format!("loss must be all-tokens or masked-only, got {:?}", self.loss))
        })
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.base_lr, self.min_lr, self.warmup_steps, self.total_steps)
            .map_err(|e| Error::config(e.to_string()))
    }

    pub fn normalization(&self) -> Result<Normalization> {
        if self.norm_mean.len() != self.channels || self.norm_std.len() != self.channels {
            return Err(Error::config(format!(
                "norm.mean and norm.std need {} values each",
                self.channels
            )));
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config("norm.std entries must be positive"));
        }
        Ok(Normalization {
            mean: self.norm_mean.iter().map(|&v| v as f32).collect(),
            std: self.norm_std.iter().map(|&v| v as f32).collect(),
        })
    }

    /// Checks everything pre-training depends on.
    pub fn validate(&self) -> Result<()> {
        let cfg = self.student();
        cfg.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.mask_count > cfg.num_patches() {
            return Err(Error::config(format!(
                "mask_count {} exceeds the {} patches",
                self.mask_count,
                cfg.num_patches()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.mask_min_block == 0 {
            return Err(Error::config("mask.min_block must be positive"));
        }
        self.teacher_kind()?;
        if matches!(self.teacher.as_str(), "frozen-vit" | "toy-semantic") {
            self.teacher_vit().validate().map_err(|e| Error::config(format!("teacher: {e}")))?;
        }
        if self.teacher == "hog-like" && (self.hog_bins == 0 || self.hog_cell == 0 || !self.patch_size.is_multiple_of(self.hog_cell)) {
            return Err(Error::config("teacher.hog_cell must divide patch_size and teacher.hog_bins must be positive"));
        }
        self.masking_kind()?;
        self.loss_variant()?;
        self.schedule()?;
        self.normalization()?;
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    line.find('#').map_or(line, |i| &line[..i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::parse(&c.serialize()).unwrap(), c);
        assert_eq!(c.student(), ViTConfig::vit_micro());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let mut c = Config::parse("# run\nseed = 3  # trailing\n\ndata = \"a.corpus\"\nnorm.mean = [0.1, 0.2, 0.3]\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.data, "a.corpus");
        assert_eq!(c.norm_mean, vec![0.1, 0.2, 0.3]);
        let before = c.clone();
        c.apply_overrides(&["seed=7"]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(Config { seed: 3, ..c }, before);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = Config::parse("sede = 1").unwrap_err();
        assert!(e.is_user_error());
        let m = e.to_string();
        assert!(m.contains("sede") && m.contains("total_steps") && m.contains("probe.feature"));
        assert!(Config::parse("seed = x").is_err());
        assert!(Config::parse("seed").is_err());
    }

    #[test]
    fn digest_ignores_output_settings() {
        let a = Config::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.checkpoint_every = 1;
        b.metrics_wallclock = true;
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = |k: &str, v: &str| {
            let mut c = Config::default();
            c.set(k, v).unwrap();
            c.validate().is_err()
        };
        assert!(bad("mask_count", "17"));
        assert!(bad("teacher", "clip"));
        assert!(bad("loss", "mse"));
        assert!(bad("norm.std", "1,0,1"));
        assert!(bad("warmup_steps", "1000"));
        assert!(Config { teacher: "hog-like".into(), hog_cell: 3, ..Config::default() }.validate().is_err());
    }
}
