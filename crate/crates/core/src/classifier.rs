//! Supervised ViT classification on the final CLS feature. Used to train the
//! toy semantic teacher and for end-to-end fine-tuning.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{self, Mat, Real};
use crate::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use crate::rng::{self, tag};
use crate::tensor::{ParamStore, TensorBlob};
use crate::vit::{embed, embed_backward, encode, encode_backward, init_tensor, patchify, ViTConfig, VitParams};

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Translation range for augmentation; `None` disables augmentation.
    pub augment_pad: Option<usize>,
}

/// Appends a freshly initialized `classes x embed_dim` classifier.
pub fn add_classifier(store: &mut ParamStore, config: &ViTConfig, classes: usize, seed: u64) -> Result<()> {
    store.insert(
        CLASSIFIER_WEIGHT,
        init_tensor(&[classes, config.embed_dim], CLASSIFIER_WEIGHT, seed, &[tag::HEAD_INIT, 7]),
        true,
    )?;
    store.insert(CLASSIFIER_BIAS, TensorBlob::zeros(&[classes]), true)
}

/// Names and shapes in [`ClassifierParams`] slot order.
pub fn param_shapes(config: &ViTConfig, classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = config.param_shapes();
    v.push((CLASSIFIER_WEIGHT.to_owned(), vec![classes, config.embed_dim]));
    v.push((CLASSIFIER_BIAS.to_owned(), vec![classes]));
    v
}

/// Backbone and classifier weights in compute precision.
pub struct ClassifierParams<T> {
    pub vit: VitParams<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub classes: usize,
}

impl<T: Real> ClassifierParams<T> {
    pub fn from_store(store: &ParamStore, config: &ViTConfig) -> Result<Self> {
        let bias = store
            .get(CLASSIFIER_BIAS)
            .ok_or_else(|| Error::contract(format!("missing parameter {CLASSIFIER_BIAS:?}")))?;
        let classes = bias.len();
        let conv = |t: &TensorBlob| t.data().iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
        Ok(Self {
            vit: VitParams::from_store(store, config, "")?,
            weight: conv(store.expect(CLASSIFIER_WEIGHT, &[classes, config.embed_dim])?),
            bias: conv(bias),
            classes,
        })
    }

    fn zeros_like(&self, config: &ViTConfig) -> Self {
        Self {
            vit: VitParams::zeros(config),
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            classes: self.classes,
        }
    }

    fn slots(&self) -> Vec<&Vec<T>> {
        let mut v = self.vit.slots();
        v.extend([&self.weight, &self.bias]);
        v
    }
}

/// Logits for one image's patches.
pub fn logits<T: Real>(params: &ClassifierParams<T>, config: &ViTConfig, patches: &Mat<T>) -> Result<Vec<T>> {
    let tokens = embed(patches, &params.vit, config)?;
    let (features, _) = encode(tokens, &params.vit, config)?;
    let cls = Mat::from_vec(1, config.embed_dim, features.row(0).to_vec());
    Ok(nn::linear(&cls, &params.weight, &params.bias).data)
}

/// Cross-entropy for one image, accumulating gradients into `grads`.
pub fn sample_loss_grad<T: Real>(
    params: &ClassifierParams<T>,
    config: &ViTConfig,
    patches: &Mat<T>,
    label: usize,
    grads: &mut ClassifierParams<T>,
) -> Result<f64> {
    if label >= params.classes {
        return Err(Error::range(format!("label {label} outside {} classes", params.classes)));
    }
    let tokens = embed(patches, &params.vit, config)?;
    let (features, cache) = encode(tokens, &params.vit, config)?;
    let cls = Mat::from_vec(1, config.embed_dim, features.row(0).to_vec());
    let out = nn::linear(&cls, &params.weight, &params.bias);
    let (loss, d_logits) = nn::cross_entropy(&out.data, label);
    let d_logits = Mat::from_vec(1, params.classes, d_logits);
    let d_cls = nn::linear_backward(&cls, &params.weight, &d_logits, &mut grads.weight, &mut grads.bias);
    let mut d_features = Mat::zeros(features.rows, features.cols);
    d_features.row_mut(0).copy_from_slice(&d_cls.data);
    let d_tokens = encode_backward(&cache, &params.vit, &d_features, &mut grads.vit);
    let no_mask = vec![false; patches.rows];
    embed_backward(patches, &d_tokens, &no_mask, &mut grads.vit);
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite classification loss"));
    }
    Ok(loss)
}

/// Indices for global step `step`: a fresh seeded permutation per epoch.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut r = rng::stream(seed, &[tag::BATCH, epoch]);
            cached = Some((epoch, rng::permutation(&mut r, n)));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}

/// Trains backbone and classifier end to end; the store must already hold a
/// classifier (see [`add_classifier`]). Returns the updated store and the
/// per-step training losses.
pub fn train_classifier(
    config: &ViTConfig,
    mut store: ParamStore,
    images: &[TensorBlob],
    labels: &[usize],
    sc: &SupervisedConfig,
) -> Result<(ParamStore, Vec<f64>)> {
    if images.len() != labels.len() {
        return Err(Error::contract("image and label counts differ"));
    }
    if sc.steps == 0 {
        return Ok((store, Vec::new()));
    }
    if images.is_empty() || sc.batch_size == 0 {
        return Err(Error::contract("training needs a non-empty dataset and batch"));
    }
    let schedule = LrSchedule::new(sc.base_lr, sc.min_lr, sc.warmup_steps, sc.steps)?;
    let mut state = OptimizerState::new(&store, sc.optimizer);
    let mut losses = Vec::with_capacity(sc.steps as usize);
    for step in 0..sc.steps {
        let params = ClassifierParams::<f32>::from_store(&store, config)?;
        let mut acc: Vec<Vec<f64>> = params.slots().iter().map(|s| vec![0.0; s.len()]).collect();
        let mut total = 0.0;
        let idx = batch_indices(sc.seed, step, sc.batch_size, images.len());
        for (j, &i) in idx.iter().enumerate() {
            let img = match sc.augment_pad {
                Some(pad) => crate::data::augment(&images[i], pad, sc.seed, &[tag::AUGMENT, step, j as u64]),
                None => images[i].clone(),
            };
            let patches = patchify(&img, config)?;
            let mut g = params.zeros_like(config);
            total += sample_loss_grad(&params, config, &patches, labels[i], &mut g)?;
            for (a, s) in acc.iter_mut().zip(g.slots()) {
                for (x, y) in a.iter_mut().zip(s) {
                    *x += *y as f64;
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        let mut grads = IndexMap::new();
        for ((name, shape), a) in param_shapes(config, params.classes).into_iter().zip(&acc) {
            let data = a.iter().map(|v| (v * inv) as f32).collect();
            grads.insert(name, TensorBlob::new(shape, data)?);
        }
        let lr = schedule.lr_at(step)?;
        adamw_step(&mut store, &grads, &mut state, lr)?;
        losses.push(total * inv);
    }
    Ok((store, losses))
}

/// Predicted class per image.
pub fn predict_classes(config: &ViTConfig, store: &ParamStore, images: &[TensorBlob]) -> Result<Vec<usize>> {
    let params = ClassifierParams::<f32>::from_store(store, config)?;
    images
        .iter()
        .map(|img| Ok(nn::argmax(&logits(&params, config, &patchify(img, config)?)?)))
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}
