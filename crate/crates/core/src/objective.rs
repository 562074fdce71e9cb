//! Prediction head and the token-level cosine alignment loss.
//!
//! For student predictions `F` and teacher features `G` over the `M + 1`
//! tokens (CLS first) the loss is
//!
//! ```text
//! L = -(1 / (M + 1)) * sum_i cos(F_i, G_i),   cos(a, b) = <a, b> / (|a| |b| + 1e-8)
//! ```
//!
//! The masked-only variant averages over CLS plus the masked tokens instead.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::nn::{self, Mat, Real};

pub const COSINE_EPS: f64 = 1e-8;

/// Single affine layer mapping student features into the teacher space.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead<T> {
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> PredictionHead<T> {
    pub fn new(weight: Vec<T>, bias: Vec<T>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::contract(format!(
                "head tensors do not match {out_dim}x{in_dim}"
            )));
        }
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }
}

/// Applies the head to every token, CLS included.
pub fn predict<T: Real>(features: &Mat<T>, head: &PredictionHead<T>) -> Result<Mat<T>> {
    if features.cols != head.in_dim {
        return Err(Error::contract(format!(
            "feature width {} does not match head input {}",
            features.cols, head.in_dim
        )));
    }
    Ok(nn::linear(features, &head.weight, &head.bias))
}

/// Which tokens contribute to the alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    #[default]
    AllTokens,
    MaskedOnly,
}

impl FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-tokens" => Ok(Self::AllTokens),
            "masked-only" => Ok(Self::MaskedOnly),
            _ => Err(Error::config(format!("unknown loss variant {s:?} (all-tokens | masked-only)"))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AllTokens => "all-tokens",
            Self::MaskedOnly => "masked-only",
        })
    }
}

fn check_pair<T: Real>(pred: &Mat<T>, target: &Mat<T>) -> Result<()> {
    if pred.rows != target.rows || pred.cols != target.cols {
        return Err(Error::contract(format!(
            "prediction {}x{} does not match teacher features {}x{}",
            pred.rows, pred.cols, target.rows, target.cols
        )));
    }
    Ok(())
}

/// Per-token cosine similarity between matching rows.
pub fn token_cosines<T: Real>(pred: &Mat<T>, target: &Mat<T>) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    Ok((0..pred.rows)
        .map(|r| {
            let (a, b) = (pred.row(r), target.row(r));
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (x, y) in a.iter().zip(b) {
                let (x, y) = (x.f64(), y.f64());
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            dot / (na.sqrt() * nb.sqrt() + COSINE_EPS)
        })
        .collect())
}

/// Token selection for a loss variant: CLS always, patches per variant.
pub fn included_tokens(variant: LossVariant, tokens: usize, mask: Option<&MaskSpec>) -> Result<Vec<bool>> {
    match variant {
        LossVariant::AllTokens => Ok(vec![true; tokens]),
        LossVariant::MaskedOnly => {
            let spec = mask.ok_or_else(|| Error::contract("masked-only loss needs a mask"))?;
            if spec.num_cells() + 1 != tokens {
                return Err(Error::contract("mask grid does not match token count"));
            }
            let mut inc = vec![false; tokens];
            inc[0] = true;
            for &m in &spec.masked {
                inc[m + 1] = true;
            }
            Ok(inc)
        }
    }
}

/// Negative mean cosine over the selected tokens, plus its gradient w.r.t. the
/// predictions. The teacher side receives no gradient.
pub fn alignment_loss_grad<T: Real>(pred: &Mat<T>, target: &Mat<T>, include: &[bool]) -> Result<(f64, Mat<T>)> {
    check_pair(pred, target)?;
    if include.len() != pred.rows {
        return Err(Error::contract("token selection length differs from token count"));
    }
    let k = include.iter().filter(|&&b| b).count();
    if k == 0 {
        return Err(Error::contract("no tokens selected for the loss"));
    }
    let scale = 1.0 / k as f64;
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    let mut total = 0.0;
    for r in (0..pred.rows).filter(|&r| include[r]) {
        let (a, b) = (pred.row(r), target.row(r));
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (x, y) in a.iter().zip(b) {
            let (x, y) = (x.f64(), y.f64());
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        let den = na * nb + COSINE_EPS;
        total += dot / den;
        // d cos / dF = G / den - dot * nb * F / (|F| den^2)
        let coef_f = if na > 0.0 { dot * nb / (na * den * den) } else { 0.0 };
        let g = grad.row_mut(r);
        for j in 0..a.len() {
            g[j] = T::of(-scale * (b[j].f64() / den - coef_f * a[j].f64()));
        }
    }
    Ok((-total * scale, grad))
}

/// Alignment loss over all `M + 1` tokens.
pub fn alignment_loss<T: Real>(pred: &Mat<T>, target: &Mat<T>) -> Result<f64> {
    let c = token_cosines(pred, target)?;
    if c.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    Ok(-c.iter().sum::<f64>() / c.len() as f64)
}

/// Alignment loss over CLS plus the masked tokens only.
pub fn masked_only_loss<T: Real>(pred: &Mat<T>, target: &Mat<T>, spec: &MaskSpec) -> Result<f64> {
    let include = included_tokens(LossVariant::MaskedOnly, pred.rows, Some(spec))?;
    let c = token_cosines(pred, target)?;
    let k = include.iter().filter(|&&b| b).count();
    Ok(-c.iter().zip(&include).filter(|(_, &i)| i).map(|(c, _)| c).sum::<f64>() / k as f64)
}

/// Mean of per-image losses.
pub fn batch_alignment_loss<T: Real>(preds: &[Mat<T>], targets: &[Mat<T>]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract("prediction and teacher batches differ in size or are empty"));
    }
    let mut sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        sum += alignment_loss(p, t)?;
    }
    Ok(sum / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        Mat::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn identical_opposite_orthogonal() {
        let g = m(3, 2, &[1.0, 2.0, -0.5, 0.3, 4.0, 1.0]);
        assert!((alignment_loss(&g, &g).unwrap() + 1.0).abs() < 1e-7);
        let neg = Mat::from_vec(3, 2, g.data.iter().map(|v| -v).collect());
        assert!((alignment_loss(&neg, &g).unwrap() - 1.0).abs() < 1e-7);
        let orth = Mat::from_vec(3, 2, vec![-2.0, 1.0, 0.3, 0.5, -1.0, 4.0]);
        assert!(alignment_loss(&orth, &g).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_token_hand_example() {
        let f = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let g = m(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!((alignment_loss(&f, &g).unwrap() + 0.5).abs() < 1e-8);
    }

    #[test]
    fn masked_only_cases() {
        let f = m(5, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0, 2.0, 0.0]);
        let g = m(5, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let full = MaskSpec::full(2, 2);
        assert!((masked_only_loss(&f, &g, &full).unwrap() - alignment_loss(&f, &g).unwrap()).abs() < 1e-15);
        let empty = MaskSpec::empty(2, 2);
        assert!((masked_only_loss(&f, &g, &empty).unwrap() + 1.0).abs() < 1e-8);
        // mask patches 1 and 2 (rows 2 and 3): cosines 1/sqrt2 and -1, with CLS 1
        let half = MaskSpec { masked: vec![1, 2], ..MaskSpec::empty(2, 2) };
        let expect = -(1.0 + std::f64::consts::FRAC_1_SQRT_2 - 1.0) / 3.0;
        assert!((masked_only_loss(&f, &g, &half).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn predict_contract() {
        let x = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let zero = PredictionHead::new(vec![0.0; 6], vec![1.0, 2.0, 3.0], 2, 3).unwrap();
        let y = predict(&x, &zero).unwrap();
        assert_eq!((y.rows, y.cols), (3, 3));
        assert!((0..3).all(|r| y.row(r) == [1.0, 2.0, 3.0]));
        let id = PredictionHead::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 2, 2).unwrap();
        assert_eq!(predict(&x, &id).unwrap(), x);
        assert!(predict(&m(1, 3, &[0.0; 3]), &id).is_err());
    }

    #[test]
    fn zero_prediction_gives_zero_cosine() {
        let f = Mat::<f64>::zeros(2, 3);
        let g = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (loss, grad) = alignment_loss_grad(&f, &g, &[true, true]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.is_finite());
    }

    #[test]
    fn shape_errors() {
        assert!(alignment_loss(&Mat::<f64>::zeros(2, 3), &Mat::zeros(3, 3)).is_err());
        assert!(alignment_loss(&Mat::<f64>::zeros(2, 3), &Mat::zeros(2, 4)).is_err());
    }

    fn mats(rows: usize, cols: usize) -> impl Strategy<Value = Mat<f64>> {
        prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v))
    }

    proptest! {
        #[test]
        fn bounded_and_scale_invariant(f in mats(4, 3), g in mats(4, 3), scales in prop::collection::vec(0.01f64..100.0, 4)) {
            let l = alignment_loss(&f, &g).unwrap();
            prop_assert!((-1.0..=1.0).contains(&l));
            let mut gs = g.clone();
            for r in 0..4 {
                for v in gs.row_mut(r) {
                    *v *= scales[r];
                }
            }
            let ls = alignment_loss(&f, &gs).unwrap();
            // Only the epsilon in the denominator breaks exact invariance.
            let norms_ok = (0..4).all(|r| g.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-6);
            if norms_ok {
                prop_assert!((l - ls).abs() < 1e-6);
            }
        }

        #[test]
        fn gradient_matches_numeric(f in mats(3, 4), g in mats(3, 4)) {
            let inc = [true, false, true];
            let (_, grad) = alignment_loss_grad(&f, &g, &inc).unwrap();
            let h = 1e-6;
            for i in 0..f.data.len() {
                let mut p = f.clone();
                p.data[i] += h;
                let mut q = f.clone();
                q.data[i] -= h;
                let num = (alignment_loss_grad(&p, &g, &inc).unwrap().0 - alignment_loss_grad(&q, &g, &inc).unwrap().0) / (2.0 * h);
                prop_assert!((num - grad.data[i]).abs() < 1e-5 * (1.0 + num.abs()));
            }
        }
    }
}
