//! The trainable student: backbone, learned mask embedding and prediction
//! head, with the full forward/backward chain used during pre-training.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskSpec};
use crate::nn::{Mat, Real};
use crate::objective::{alignment_loss_grad, included_tokens, predict, LossVariant, PredictionHead};
use crate::rng::tag;
use crate::tensor::{ParamStore, TensorBlob};
use crate::vit::{self, embed, embed_backward, encode, encode_backward, init_tensor, ViTConfig, VitParams};

pub const MASK_TOKEN: &str = "mask_token";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Backbone plus student-only parameters in compute precision `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams<T> {
    pub vit: VitParams<T>,
    pub mask_token: Vec<T>,
    pub head: PredictionHead<T>,
}

/// Fresh student store: backbone entries, then `mask_token`, `head.*`.
pub fn init_student(config: &ViTConfig, teacher_dim: usize, seed: u64) -> Result<ParamStore> {
    let mut store = vit::init_params(config, seed)?;
    let d = config.embed_dim;
    store.insert(MASK_TOKEN, init_tensor(&[d], MASK_TOKEN, seed, &[tag::HEAD_INIT, 0]), true)?;
    store.insert(
        HEAD_WEIGHT,
        init_tensor(&[teacher_dim, d], HEAD_WEIGHT, seed, &[tag::HEAD_INIT, 1]),
        true,
    )?;
    store.insert(HEAD_BIAS, TensorBlob::zeros(&[teacher_dim]), true)?;
    Ok(store)
}

impl<T: Real> StudentParams<T> {
    pub fn zeros(config: &ViTConfig, teacher_dim: usize) -> Self {
        Self {
            vit: VitParams::zeros(config),
            mask_token: vec![T::zero(); config.embed_dim],
            head: PredictionHead::zeros(config.embed_dim, teacher_dim),
        }
    }

    pub fn from_store(store: &ParamStore, config: &ViTConfig) -> Result<Self> {
        let vit = VitParams::from_store(store, config, "")?;
        let d = config.embed_dim;
        let hb = store
            .get(HEAD_BIAS)
            .ok_or_else(|| Error::contract(format!("missing parameter {HEAD_BIAS:?}")))?;
        let td = hb.len();
        let conv = |t: &TensorBlob| t.data().iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
        Ok(Self {
            vit,
            mask_token: conv(store.expect(MASK_TOKEN, &[d])?),
            head: PredictionHead::new(conv(store.expect(HEAD_WEIGHT, &[td, d])?), conv(hb), d, td)?,
        })
    }

    pub fn teacher_dim(&self) -> usize {
        self.head.out_dim
    }

    /// All slots in store order (backbone, mask token, head weight, head bias).
    pub fn slots(&self) -> Vec<&Vec<T>> {
        let mut v = self.vit.slots();
        v.extend([&self.mask_token, &self.head.weight, &self.head.bias]);
        v
    }

    pub fn slots_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = self.vit.slots_mut();
        v.extend([&mut self.mask_token, &mut self.head.weight, &mut self.head.bias]);
        v
    }

    /// Named gradient tensors in store order.
    pub fn to_blobs(&self, config: &ViTConfig) -> Result<IndexMap<String, TensorBlob>> {
        let mut out = IndexMap::new();
        self.vit.write_blobs(config, "", &mut out)?;
        let d = config.embed_dim;
        let td = self.teacher_dim();
        let f = |v: &[T]| v.iter().map(|x| x.f64() as f32).collect::<Vec<f32>>();
        out.insert(MASK_TOKEN.into(), TensorBlob::new(vec![d], f(&self.mask_token))?);
        out.insert(HEAD_WEIGHT.into(), TensorBlob::new(vec![td, d], f(&self.head.weight))?);
        out.insert(HEAD_BIAS.into(), TensorBlob::new(vec![td], f(&self.head.bias))?);
        Ok(out)
    }
}

/// One training example: patches of the (augmented) image, its mask and the
/// teacher's features for the clean image.
pub struct Sample<'a, T> {
    pub patches: &'a Mat<T>,
    pub mask: &'a MaskSpec,
    pub target: &'a Mat<T>,
}

/// Student predictions for a masked image.
pub fn student_predict<T: Real>(
    params: &StudentParams<T>,
    config: &ViTConfig,
    patches: &Mat<T>,
    mask: &MaskSpec,
) -> Result<Mat<T>> {
    let tokens = embed(patches, &params.vit, config)?;
    let tokens = apply_mask(tokens, mask, &params.mask_token, &params.vit.pos)?;
    let (features, _) = encode(tokens, &params.vit, config)?;
    predict(&features, &params.head)
}

/// Loss for one sample and its gradient, accumulated into `grads`.
pub fn sample_loss_grad<T: Real>(
    params: &StudentParams<T>,
    config: &ViTConfig,
    sample: &Sample<'_, T>,
    variant: LossVariant,
    grads: &mut StudentParams<T>,
) -> Result<f64> {
    let tokens = embed(sample.patches, &params.vit, config)?;
    let tokens = apply_mask(tokens, sample.mask, &params.mask_token, &params.vit.pos)?;
    let (features, cache) = encode(tokens, &params.vit, config)?;
    let pred = predict(&features, &params.head)?;
    let include = included_tokens(variant, pred.rows, Some(sample.mask))?;
    let (loss, d_pred) = alignment_loss_grad(&pred, sample.target, &include)?;
    let d_features = crate::nn::linear_backward(
        &features,
        &params.head.weight,
        &d_pred,
        &mut grads.head.weight,
        &mut grads.head.bias,
    );
    let d_tokens = encode_backward(&cache, &params.vit, &d_features, &mut grads.vit);
    let d_mask = embed_backward(sample.patches, &d_tokens, &sample.mask.flags(), &mut grads.vit);
    crate::nn::add_into(&mut grads.mask_token, &d_mask);
    Ok(loss)
}

/// Forward-only loss for one sample.
pub fn sample_loss<T: Real>(
    params: &StudentParams<T>,
    config: &ViTConfig,
    sample: &Sample<'_, T>,
    variant: LossVariant,
) -> Result<f64> {
    let pred = student_predict(params, config, sample.patches, sample.mask)?;
    let include = included_tokens(variant, pred.rows, Some(sample.mask))?;
    Ok(alignment_loss_grad(&pred, sample.target, &include)?.0)
}

/// Mean loss over a batch and the mean gradient, summed in f64 in batch order.
pub fn batch_loss_grad<T: Real>(
    params: &StudentParams<T>,
    config: &ViTConfig,
    samples: &[Sample<'_, T>],
    variant: LossVariant,
) -> Result<(f64, StudentParams<T>)> {
    if samples.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let td = params.teacher_dim();
    let mut acc = StudentParams::<f64>::zeros(config, td);
    let mut total = 0.0;
    for s in samples {
        let mut g = StudentParams::<T>::zeros(config, td);
        total += sample_loss_grad(params, config, s, variant, &mut g)?;
        for (a, b) in acc.slots_mut().into_iter().zip(g.slots()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y.f64();
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    let mut out = StudentParams::<T>::zeros(config, td);
    for (o, a) in out.slots_mut().into_iter().zip(acc.slots()) {
        for (x, y) in o.iter_mut().zip(a) {
            *x = T::of(y * inv);
        }
    }
    Ok((total * inv, out))
}

/// Forward-only mean loss over a batch.
pub fn batch_loss<T: Real>(
    params: &StudentParams<T>,
    config: &ViTConfig,
    samples: &[Sample<'_, T>],
    variant: LossVariant,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(params, config, s, variant)?;
    }
    Ok(total / samples.len() as f64)
}
