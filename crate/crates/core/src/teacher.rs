//! Frozen guidance sources producing per-token target features.
//!
//! A teacher maps a clean image to `M + 1` feature rows (CLS first). The
//! frozen-ViT variants return the last encoder layer's output (after the final
//! norm) with no projection; the pixel and HOG-like variants are hand-made
//! features whose CLS row is the mean of the patch rows.

use std::fmt;
use std::path::Path;

use crate::classifier::{self, add_classifier, SupervisedConfig};
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::tensor::{tensor_load, ParamStore, TensorBlob};
use crate::vit::{self, embed, encode, patchify, ViTConfig, VitParams};

/// Per-token teacher features, row 0 is CLS.
pub type TeacherFeatures = Mat<f32>;

/// Which guidance a teacher provides.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherKind {
    /// A frozen ViT, loaded from weights or randomly initialized from a seed.
    FrozenVit { weights: Option<std::path::PathBuf>, seed: u64 },
    /// Unit-normalized raw patch pixels.
    Pixel,
    /// Per-patch gradient-orientation histograms.
    HogLike { bins: usize, cell: usize },
    /// A tiny ViT first trained to classify the synthetic shapes.
    ToySemantic(ToyTeacherSpec),
}

impl TeacherKind {
    pub fn label(&self) -> &'static str {
        match self {
            TeacherKind::FrozenVit { .. } => "frozen-vit",
            TeacherKind::Pixel => "pixel",
            TeacherKind::HogLike { .. } => "hog-like",
            TeacherKind::ToySemantic(_) => "toy-semantic",
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone)]
enum Source {
    Vit { config: ViTConfig, store: ParamStore, params: VitParams<f32> },
    Pixel,
    Hog { bins: usize, cell: usize },
}

/// An immutable teacher. Safe to share between threads.
#[derive(Debug, Clone)]
pub struct Teacher {
    kind: &'static str,
    image_size: usize,
    patch_size: usize,
    channels: usize,
    source: Source,
}

impl Teacher {
    /// Wraps backbone weights; every entry is flagged frozen.
    pub fn frozen_vit(config: ViTConfig, mut store: ParamStore, kind: &'static str) -> Result<Self> {
        config.validate()?;
        let params = VitParams::from_store(&store, &config, "")?;
        store.freeze_all();
        Ok(Self {
            kind,
            image_size: config.image_size,
            patch_size: config.patch_size,
            channels: config.channels,
            source: Source::Vit { config, store, params },
        })
    }

    /// Randomly initialized frozen ViT.
    pub fn random_vit(config: ViTConfig, seed: u64) -> Result<Self> {
        Self::frozen_vit(config, vit::init_params(&config, seed)?, "frozen-vit")
    }

    pub fn pixel(image_size: usize, patch_size: usize, channels: usize) -> Result<Self> {
        check_geometry(image_size, patch_size)?;
        Ok(Self {
            kind: "pixel",
            image_size,
            patch_size,
            channels,
            source: Source::Pixel,
        })
    }

    pub fn hog_like(image_size: usize, patch_size: usize, channels: usize, bins: usize, cell: usize) -> Result<Self> {
        check_geometry(image_size, patch_size)?;
        if bins == 0 || cell == 0 || !patch_size.is_multiple_of(cell) {
            return Err(Error::config(format!(
                "hog cell {cell} must divide patch size {patch_size} and bins must be positive"
            )));
        }
        Ok(Self {
            kind: "hog-like",
            image_size,
            patch_size,
            channels,
            source: Source::Hog { bins, cell },
        })
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn feature_dim(&self) -> usize {
        match &self.source {
            Source::Vit { config, .. } => config.embed_dim,
            Source::Pixel => self.patch_size * self.patch_size * self.channels,
            Source::Hog { bins, cell } => (self.patch_size / cell).pow(2) * bins,
        }
    }

    /// The frozen parameters, if this teacher has any.
    pub fn params(&self) -> Option<&ParamStore> {
        match &self.source {
            Source::Vit { store, .. } => Some(store),
            _ => None,
        }
    }

    pub fn vit_config(&self) -> Option<&ViTConfig> {
        match &self.source {
            Source::Vit { config, .. } => Some(config),
            _ => None,
        }
    }

    /// Fails unless the student shares this teacher's patch grid.
    pub fn check_compatible(&self, student: &ViTConfig) -> Result<()> {
        if student.image_size != self.image_size
            || student.patch_size != self.patch_size
            || student.channels != self.channels
        {
            return Err(Error::config(format!(
                "teacher geometry {}px/{}px/{}ch differs from student {}px/{}px/{}ch",
                self.image_size, self.patch_size, self.channels, student.image_size, student.patch_size, student.channels
            )));
        }
        Ok(())
    }

    /// Features for one clean `H x W x C` image.
    pub fn extract(&self, image: &TensorBlob) -> Result<TeacherFeatures> {
        let (s, c) = (self.image_size, self.channels);
        if image.shape() != [s, s, c] {
            return Err(Error::contract(format!(
                "teacher expects {s}x{s}x{c} images, got {:?}",
                image.shape()
            )));
        }
        match &self.source {
            Source::Vit { config, params, .. } => {
                let tokens = embed(&patchify(image, config)?, params, config)?;
                Ok(encode(tokens, params, config)?.0)
            }
            Source::Pixel => {
                let geo = self.geometry();
                let patches = patchify(image, &geo)?;
                let mut rows: Vec<Vec<f64>> = (0..patches.rows)
                    .map(|r| {
                        let v: Vec<f64> = patches.row(r).iter().map(|&x| x as f64).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            v.into_iter().map(|x| x / norm).collect()
                        } else {
                            v
                        }
                    })
                    .collect();
                Ok(with_mean_cls(&mut rows))
            }
            Source::Hog { bins, cell } => Ok(with_mean_cls(&mut hog_rows(image, self.patch_size, *bins, *cell))),
        }
    }

    pub fn extract_batch(&self, images: &[TensorBlob]) -> Result<Vec<TeacherFeatures>> {
        images.iter().map(|i| self.extract(i)).collect()
    }

    fn geometry(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            embed_dim: 1,
            depth: 1,
            heads: 1,
            mlp_ratio: 1.0,
        }
    }
}

fn check_geometry(image_size: usize, patch_size: usize) -> Result<()> {
    if patch_size == 0 || !image_size.is_multiple_of(patch_size) || image_size == 0 {
        return Err(Error::config(format!(
            "image_size {image_size} must be a positive multiple of patch_size {patch_size}"
        )));
    }
    Ok(())
}

fn with_mean_cls(rows: &mut [Vec<f64>]) -> TeacherFeatures {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    let mut cls = vec![0.0f64; d];
    for r in rows.iter() {
        for (c, v) in cls.iter_mut().zip(r) {
            *c += v;
        }
    }
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend(cls.iter().map(|v| (v / n as f64) as f32));
    for r in rows.iter() {
        data.extend(r.iter().map(|&v| v as f32));
    }
    Mat::from_vec(n + 1, d, data)
}

/// Unsigned orientation histograms weighted by gradient magnitude, one
/// `(patch/cell)^2 * bins` vector per patch. Gradients are central
/// differences of the channel-mean image with replicated borders.
fn hog_rows(image: &TensorBlob, patch: usize, bins: usize, cell: usize) -> Vec<Vec<f64>> {
    let [h, w, c]: [usize; 3] = image.shape().try_into().expect("validated HWC");
    let src = image.data();
    let gray: Vec<f64> = (0..h * w)
        .map(|i| src[i * c..(i + 1) * c].iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect();
    let at = |y: usize, x: usize| gray[y * w + x];
    let cells_per_side = patch / cell;
    let (gh, gw) = (h / patch, w / patch);
    let mut rows = vec![vec![0.0f64; cells_per_side * cells_per_side * bins]; gh * gw];
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            let bin = ((theta / std::f64::consts::PI * bins as f64) as usize).min(bins - 1);
            let (py, px) = (y / patch, x / patch);
            let (cy, cx) = ((y % patch) / cell, (x % patch) / cell);
            rows[py * gw + px][(cy * cells_per_side + cx) * bins + bin] += mag;
        }
    }
    rows
}

/// Loads frozen backbone weights from a `.mimt` file, validating every
/// expected entry against `config`.
pub fn load_teacher_weights(path: &Path, config: &ViTConfig) -> Result<Teacher> {
    config.validate()?;
    let blobs = tensor_load(path).map_err(|e| match e {
        Error::Format { offset, message } => Error::FileFormat {
            path: path.to_owned(),
            message: format!("byte {offset}: {message}"),
        },
        other => other,
    })?;
    let mut store = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let t = blobs.get(&name).ok_or_else(|| Error::FileFormat {
            path: path.to_owned(),
            message: format!("missing entry {name:?}"),
        })?;
        if t.shape() != shape.as_slice() {
            return Err(Error::FileFormat {
                path: path.to_owned(),
                message: format!("entry {name:?} has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        store.insert(name, t.clone(), false)?;
    }
    Teacher::frozen_vit(*config, store, "frozen-vit")
}

/// Recipe for the toy semantic teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTeacherSpec {
    pub config: ViTConfig,
    pub train_images: usize,
    pub heldout_images: usize,
    pub classes: usize,
    pub data_seed: u64,
    pub training: SupervisedConfig,
}

/// A trained toy teacher and its held-out accuracy.
#[derive(Debug, Clone)]
pub struct ToyTeacher {
    pub teacher: Teacher,
    pub heldout_accuracy: f64,
    pub train_losses: Vec<f64>,
}

/// Trains a tiny ViT classifier on the synthetic shapes, discards its
/// classification layer and freezes the backbone.
///
/// `norm` is applied to the generated images so the teacher sees the same
/// input distribution as the pipeline.
pub fn train_toy_teacher(spec: &ToyTeacherSpec, norm: &crate::data::Normalization) -> Result<ToyTeacher> {
    let cfg = spec.config;
    cfg.validate()?;
    let total = spec.train_images + spec.heldout_images;
    let ds = crate::data::synth_dataset(spec.data_seed, total, spec.classes, cfg.image_size)?;
    let images: Vec<TensorBlob> = ds.corpus.images.iter().map(|i| norm.apply(i)).collect::<Result<_>>()?;
    let labels = ds.corpus.require_labels()?;
    let (train_x, test_x) = images.split_at(spec.train_images);
    let (train_y, test_y) = labels.split_at(spec.train_images);

    let mut store = vit::init_params(&cfg, spec.training.seed)?;
    add_classifier(&mut store, &cfg, spec.classes, spec.training.seed)?;
    let (store, losses) = classifier::train_classifier(&cfg, store, train_x, train_y, &spec.training)?;
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::numeric("toy teacher training diverged"));
    }
    let pred = classifier::predict_classes(&cfg, &store, test_x)?;
    let acc = classifier::accuracy(&pred, test_y);

    let mut backbone = ParamStore::new();
    for (name, _) in cfg.param_shapes() {
        backbone.insert(name.clone(), store.get(&name).unwrap().clone(), false)?;
    }
    Ok(ToyTeacher {
        teacher: Teacher::frozen_vit(cfg, backbone, "toy-semantic")?,
        heldout_accuracy: acc,
        train_losses: losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor_save;

    #[test]
    fn counts_and_determinism() {
        let cfg = ViTConfig::vit_micro();
        let img = TensorBlob::new(vec![32, 32, 3], (0..3072).map(|v| ((v % 97) as f32) / 97.0).collect()).unwrap();
        for t in [
            Teacher::random_vit(cfg, 1).unwrap(),
            Teacher::pixel(32, 8, 3).unwrap(),
            Teacher::hog_like(32, 8, 3, 9, 4).unwrap(),
        ] {
            let a = t.extract(&img).unwrap();
            assert_eq!(a.rows, 17);
            assert_eq!(a.cols, t.feature_dim());
            assert_eq!(a, t.extract(&img).unwrap());
        }
        let b16 = Teacher::pixel(224, 16, 3).unwrap();
        assert_eq!(b16.num_tokens(), 197);
        assert!(Teacher::pixel(32, 8, 3).unwrap().extract(&TensorBlob::zeros(&[16, 16, 3])).is_err());
    }

    #[test]
    fn pixel_constant_image() {
        let t = Teacher::pixel(16, 4, 3).unwrap();
        let f = t.extract(&TensorBlob::filled(&[16, 16, 3], 0.7)).unwrap();
        for r in 1..f.rows {
            assert_eq!(f.row(r), f.row(1));
            let n: f64 = f.row(r).iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hog_shift_invariance() {
        let t = Teacher::hog_like(16, 8, 3, 6, 4).unwrap();
        let img = TensorBlob::new(vec![16, 16, 3], (0..768).map(|v| ((v * 31 % 101) as f32) / 101.0).collect()).unwrap();
        let shifted = TensorBlob::new(img.shape().to_vec(), img.data().iter().map(|v| v + 0.37).collect()).unwrap();
        let (a, b) = (t.extract(&img).unwrap(), t.extract(&shifted).unwrap());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-5 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn load_weights_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ViTConfig { depth: 1, ..ViTConfig::vit_micro() };
        let store = vit::init_params(&cfg, 5).unwrap();
        let path = dir.path().join("t.mimt");
        let blobs = store.to_blobs();
        tensor_save(blobs.iter().map(|(k, v)| (k.as_str(), v)), &path).unwrap();
        let loaded = load_teacher_weights(&path, &cfg).unwrap();
        assert!(loaded.params().unwrap().iter().all(|(_, e)| !e.trainable));
        let direct = Teacher::frozen_vit(cfg, store.clone(), "frozen-vit").unwrap();
        let img = TensorBlob::filled(&[32, 32, 3], 0.2);
        assert_eq!(loaded.extract(&img).unwrap(), direct.extract(&img).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_teacher_weights(&path, &cfg) {
            Err(Error::FileFormat { message, .. }) => assert!(message.starts_with("byte ")),
            other => panic!("{other:?}"),
        }

        let mut bad = blobs.clone();
        bad.insert("blocks.0.attn.proj.weight".into(), TensorBlob::zeros(&[64, 63]));
        tensor_save(bad.iter().map(|(k, v)| (k.as_str(), v)), &path).unwrap();
        match load_teacher_weights(&path, &cfg) {
            Err(Error::FileFormat { message, .. }) => assert!(message.contains("blocks.0.attn.proj.weight")),
            other => panic!("{other:?}"),
        }
    }
}
