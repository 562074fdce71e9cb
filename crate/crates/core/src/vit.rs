//! Vision Transformer backbone: patchify, embedding, pre-norm encoder blocks,
//! and attention capture.
//!
//! Parameter naming (linear weights are stored `out x in`):
//!
//! ```text
//! patch_embed.weight   [D, P*P*C]     patch_embed.bias [D]
//! cls_token            [D]            pos_embed        [M+1, D]
//! blocks.{i}.norm1.{weight,bias}      blocks.{i}.attn.qkv.{weight,bias}
//! blocks.{i}.attn.proj.{weight,bias}  blocks.{i}.norm2.{weight,bias}
//! blocks.{i}.mlp.fc1.{weight,bias}    blocks.{i}.mlp.fc2.{weight,bias}
//! norm.{weight,bias}
//! ```

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{self, LnCache, Mat, Real};
use crate::rng::{self, tag};
use crate::tensor::{ParamStore, TensorBlob};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl ViTConfig {
    pub fn vit_micro() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }

    pub fn vit_mini() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            embed_dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }

    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
        }
    }

    pub fn vit_l16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 1024,
            depth: 24,
            heads: 16,
            mlp_ratio: 4.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vit-micro" => Some(Self::vit_micro()),
            "vit-mini" => Some(Self::vit_mini()),
            "vit-b16" => Some(Self::vit_b16()),
            "vit-l16" => Some(Self::vit_l16()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be at least 1"));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Canonical parameter names and shapes, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.embed_dim, self.mlp_hidden());
        let mut v = vec![
            ("patch_embed.weight".to_owned(), vec![d, self.patch_dim()]),
            ("patch_embed.bias".to_owned(), vec![d]),
            ("cls_token".to_owned(), vec![d]),
            ("pos_embed".to_owned(), vec![self.num_tokens(), d]),
        ];
        for i in 0..self.depth {
            let p = format!("blocks.{i}.");
            v.extend([
                (format!("{p}norm1.weight"), vec![d]),
                (format!("{p}norm1.bias"), vec![d]),
                (format!("{p}attn.qkv.weight"), vec![3 * d, d]),
                (format!("{p}attn.qkv.bias"), vec![3 * d]),
                (format!("{p}attn.proj.weight"), vec![d, d]),
                (format!("{p}attn.proj.bias"), vec![d]),
                (format!("{p}norm2.weight"), vec![d]),
                (format!("{p}norm2.bias"), vec![d]),
                (format!("{p}mlp.fc1.weight"), vec![h, d]),
                (format!("{p}mlp.fc1.bias"), vec![h]),
                (format!("{p}mlp.fc2.weight"), vec![d, h]),
                (format!("{p}mlp.fc2.bias"), vec![d]),
            ]);
        }
        v.push(("norm.weight".to_owned(), vec![d]));
        v.push(("norm.bias".to_owned(), vec![d]));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zeros,
    Ones,
}

fn init_kind(name: &str) -> InitKind {
    if name.contains("norm") && name.ends_with(".weight") {
        InitKind::Ones
    } else if name.ends_with(".bias") {
        InitKind::Zeros
    } else {
        InitKind::Normal
    }
}

/// Truncated-normal (std 0.02) weights, zero biases, unit norm scales.
pub(crate) fn init_tensor(shape: &[usize], name: &str, seed: u64, stream_tags: &[u64]) -> TensorBlob {
    match init_kind(name) {
        InitKind::Ones => TensorBlob::filled(shape, 1.0),
        InitKind::Zeros => TensorBlob::zeros(shape),
        InitKind::Normal => {
            let mut r = rng::stream(seed, stream_tags);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng::trunc_normal(&mut r, 0.02) as f32).collect();
            TensorBlob::new(shape.to_vec(), data).expect("finite by construction")
        }
    }
}

/// Deterministic backbone initialization.
pub fn init_params(config: &ViTConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (i, (name, shape)) in config.param_shapes().into_iter().enumerate() {
        let t = init_tensor(&shape, &name, seed, &[tag::PARAM_INIT, i as u64]);
        store.insert(name, t, true)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1_w: Vec<T>,
    pub norm1_b: Vec<T>,
    pub qkv_w: Vec<T>,
    pub qkv_b: Vec<T>,
    pub proj_w: Vec<T>,
    pub proj_b: Vec<T>,
    pub norm2_w: Vec<T>,
    pub norm2_b: Vec<T>,
    pub fc1_w: Vec<T>,
    pub fc1_b: Vec<T>,
    pub fc2_w: Vec<T>,
    pub fc2_b: Vec<T>,
}

/// Backbone weights (or gradients) in compute precision `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct VitParams<T> {
    pub patch_w: Vec<T>,
    pub patch_b: Vec<T>,
    pub cls: Vec<T>,
    pub pos: Vec<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_w: Vec<T>,
    pub norm_b: Vec<T>,
}

impl<T: Real> VitParams<T> {
    /// Slots in the same order as [`ViTConfig::param_shapes`].
    pub fn slots(&self) -> Vec<&Vec<T>> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos];
        for b in &self.blocks {
            v.extend([
                &b.norm1_w, &b.norm1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.norm2_w, &b.norm2_b, &b.fc1_w,
                &b.fc1_b, &b.fc2_w, &b.fc2_b,
            ]);
        }
        v.push(&self.norm_w);
        v.push(&self.norm_b);
        v
    }

    pub fn slots_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            v.extend([
                &mut b.norm1_w,
                &mut b.norm1_b,
                &mut b.qkv_w,
                &mut b.qkv_b,
                &mut b.proj_w,
                &mut b.proj_b,
                &mut b.norm2_w,
                &mut b.norm2_b,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ]);
        }
        v.push(&mut self.norm_w);
        v.push(&mut self.norm_b);
        v
    }

    pub fn zeros(config: &ViTConfig) -> Self {
        let z = |n: usize| vec![T::zero(); n];
        let (d, h) = (config.embed_dim, config.mlp_hidden());
        Self {
            patch_w: z(d * config.patch_dim()),
            patch_b: z(d),
            cls: z(d),
            pos: z(config.num_tokens() * d),
            blocks: (0..config.depth)
                .map(|_| BlockParams {
                    norm1_w: z(d),
                    norm1_b: z(d),
                    qkv_w: z(3 * d * d),
                    qkv_b: z(3 * d),
                    proj_w: z(d * d),
                    proj_b: z(d),
                    norm2_w: z(d),
                    norm2_b: z(d),
                    fc1_w: z(h * d),
                    fc1_b: z(h),
                    fc2_w: z(d * h),
                    fc2_b: z(d),
                })
                .collect(),
            norm_w: z(d),
            norm_b: z(d),
        }
    }

    /// Reads `prefix + name` for every canonical entry, checking shapes.
    pub fn from_store(store: &ParamStore, config: &ViTConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut out = Self::zeros(config);
        for ((name, shape), slot) in config.param_shapes().into_iter().zip(out.slots_mut()) {
            let t = store.expect(&format!("{prefix}{name}"), &shape)?;
            *slot = t.data().iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(out)
    }

    /// Appends `prefix + name -> tensor` entries (rounded to f32).
    pub fn write_blobs(&self, config: &ViTConfig, prefix: &str, out: &mut IndexMap<String, TensorBlob>) -> Result<()> {
        for ((name, shape), slot) in config.param_shapes().into_iter().zip(self.slots()) {
            let data = slot.iter().map(|v| v.f64() as f32).collect();
            out.insert(format!("{prefix}{name}"), TensorBlob::new(shape, data)?);
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slots_mut().into_iter().zip(other.slots()) {
            nn::add_into(a, b);
        }
    }
}

/// Splits an `H x W x C` image into row-major flattened patches (`M x P*P*C`).
///
/// Each patch vector is laid out `(row within patch, column, channel)`.
pub fn patchify(image: &TensorBlob, config: &ViTConfig) -> Result<Mat<f32>> {
    let (s, p, c) = (config.image_size, config.patch_size, config.channels);
    if image.shape() != [s, s, c] {
        return Err(Error::contract(format!(
            "image shape {:?} does not match config {s}x{s}x{c}",
            image.shape()
        )));
    }
    let g = config.grid();
    let src = image.data();
    let mut out = Mat::zeros(g * g, config.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * s + gx * p) * c;
                row[py * p * c..(py + 1) * p * c].copy_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(out)
}

/// Patch projection plus positional embedding, with CLS at row 0.
pub fn embed<T: Real>(patches: &Mat<T>, params: &VitParams<T>, config: &ViTConfig) -> Result<Mat<T>> {
    let d = config.embed_dim;
    if patches.rows != config.num_patches() || patches.cols != config.patch_dim() {
        return Err(Error::contract(format!(
            "patch matrix {}x{} does not match config {}x{}",
            patches.rows,
            patches.cols,
            config.num_patches(),
            config.patch_dim()
        )));
    }
    let proj = nn::linear(patches, &params.patch_w, &params.patch_b);
    let mut tokens = Mat::zeros(config.num_tokens(), d);
    for (j, slot) in tokens.row_mut(0).iter_mut().enumerate() {
        *slot = params.cls[j] + params.pos[j];
    }
    for m in 0..patches.rows {
        let pos = &params.pos[(m + 1) * d..(m + 2) * d];
        let src = proj.row(m);
        for (j, slot) in tokens.row_mut(m + 1).iter_mut().enumerate() {
            *slot = src[j] + pos[j];
        }
    }
    Ok(tokens)
}

/// Gradient of [`embed`] followed by mask substitution.
///
/// Rows whose patch index is flagged in `masked` came from the mask embedding,
/// so their gradient goes to the position table and into the returned
/// mask-embedding gradient instead of the patch projection.
pub fn embed_backward<T: Real>(
    patches: &Mat<T>,
    d_tokens: &Mat<T>,
    masked: &[bool],
    grads: &mut VitParams<T>,
) -> Vec<T> {
    let d = d_tokens.cols;
    let m = patches.rows;
    debug_assert_eq!(masked.len(), m);
    nn::add_into(&mut grads.pos, &d_tokens.data);
    nn::add_into(&mut grads.cls, d_tokens.row(0));
    let mut d_mask = vec![T::zero(); d];
    let mut d_proj = Mat::zeros(m, d);
    for i in 0..m {
        let src = d_tokens.row(i + 1);
        if masked[i] {
            nn::add_into(&mut d_mask, src);
        } else {
            d_proj.row_mut(i).copy_from_slice(src);
        }
    }
    nn::linear_param_grads(patches, &d_proj, &mut grads.patch_w, &mut grads.patch_b);
    d_mask
}

pub struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Mat<T>,
    qkv: Mat<T>,
    attn: Mat<T>,
    pub probs: Vec<Mat<T>>,
    ln2: LnCache<T>,
    h2: Mat<T>,
    fc1: Mat<T>,
    act: Mat<T>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
}

fn block_forward<T: Real>(x: Mat<T>, b: &BlockParams<T>, heads: usize) -> (Mat<T>, BlockCache<T>) {
    let (h1, ln1) = nn::layer_norm(&x, &b.norm1_w, &b.norm1_b);
    let qkv = nn::linear(&h1, &b.qkv_w, &b.qkv_b);
    let (attn, probs) = nn::attention(&qkv, heads);
    let mut x = x;
    x.add_assign(&nn::linear(&attn, &b.proj_w, &b.proj_b));
    let (h2, ln2) = nn::layer_norm(&x, &b.norm2_w, &b.norm2_b);
    let fc1 = nn::linear(&h2, &b.fc1_w, &b.fc1_b);
    let act = nn::gelu(&fc1);
    x.add_assign(&nn::linear(&act, &b.fc2_w, &b.fc2_b));
    (
        x,
        BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            probs,
            ln2,
            h2,
            fc1,
            act,
        },
    )
}

fn block_backward<T: Real>(c: &BlockCache<T>, b: &BlockParams<T>, g: &mut BlockParams<T>, d_out: Mat<T>) -> Mat<T> {
    let d_act = nn::linear_backward(&c.act, &b.fc2_w, &d_out, &mut g.fc2_w, &mut g.fc2_b);
    let d_fc1 = nn::gelu_backward(&c.fc1, &d_act);
    let d_h2 = nn::linear_backward(&c.h2, &b.fc1_w, &d_fc1, &mut g.fc1_w, &mut g.fc1_b);
    let mut d_mid = d_out;
    d_mid.add_assign(&nn::layer_norm_backward(&c.ln2, &b.norm2_w, &d_h2, &mut g.norm2_w, &mut g.norm2_b));
    let d_attn = nn::linear_backward(&c.attn, &b.proj_w, &d_mid, &mut g.proj_w, &mut g.proj_b);
    let d_qkv = nn::attention_backward(&c.qkv, &c.probs, &d_attn);
    let d_h1 = nn::linear_backward(&c.h1, &b.qkv_w, &d_qkv, &mut g.qkv_w, &mut g.qkv_b);
    let mut d_in = d_mid;
    d_in.add_assign(&nn::layer_norm_backward(&c.ln1, &b.norm1_w, &d_h1, &mut g.norm1_w, &mut g.norm1_b));
    d_in
}

/// Runs all encoder blocks and the final norm, keeping activations.
pub fn encode<T: Real>(tokens: Mat<T>, params: &VitParams<T>, config: &ViTConfig) -> Result<(Mat<T>, ForwardCache<T>)> {
    if tokens.cols != config.embed_dim {
        return Err(Error::contract(format!(
            "token width {} does not match embed_dim {}",
            tokens.cols, config.embed_dim
        )));
    }
    let mut x = tokens;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, b) in params.blocks.iter().enumerate() {
        let (y, cache) = block_forward(x, b, config.heads);
        if !y.is_finite() {
            return Err(Error::numeric(format!("non-finite activation in blocks.{i}")));
        }
        x = y;
        blocks.push(cache);
    }
    let (y, final_ln) = nn::layer_norm(&x, &params.norm_w, &params.norm_b);
    if !y.is_finite() {
        return Err(Error::numeric("non-finite activation in final norm"));
    }
    Ok((y, ForwardCache { blocks, final_ln }))
}

/// Accumulates parameter gradients into `grads`; returns the token gradient.
pub fn encode_backward<T: Real>(
    cache: &ForwardCache<T>,
    params: &VitParams<T>,
    d_out: &Mat<T>,
    grads: &mut VitParams<T>,
) -> Mat<T> {
    let mut d = nn::layer_norm_backward(&cache.final_ln, &params.norm_w, d_out, &mut grads.norm_w, &mut grads.norm_b);
    for ((c, b), g) in cache.blocks.iter().zip(&params.blocks).zip(&mut grads.blocks).rev() {
        d = block_backward(c, b, g, d);
    }
    d
}

/// Per-layer, per-head attention probabilities (`(M+1) x (M+1)` each).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Mat<f32>>>,
    pub grid: usize,
}

impl AttentionRecord {
    pub fn from_cache<T: Real>(cache: &ForwardCache<T>, grid: usize) -> Self {
        Self {
            layers: cache
                .blocks
                .iter()
                .map(|b| b.probs.iter().map(|p| p.cast()).collect())
                .collect(),
            grid,
        }
    }
}

/// Backbone forward in f32, optionally capturing attention maps.
pub fn forward(
    tokens: Mat<f32>,
    params: &VitParams<f32>,
    config: &ViTConfig,
    capture_attention: bool,
) -> Result<(Mat<f32>, Option<AttentionRecord>)> {
    let (out, cache) = encode(tokens, params, config)?;
    let rec = capture_attention.then(|| AttentionRecord::from_cache(&cache, config.grid()));
    Ok((out, rec))
}

/// CLS-query attention averaged over heads, CLS column dropped, as a grid.
pub fn cls_attention_map(record: &AttentionRecord, layer: usize) -> Result<TensorBlob> {
    let heads = record
        .layers
        .get(layer)
        .ok_or_else(|| Error::range(format!("layer {layer} not captured ({} layers)", record.layers.len())))?;
    let g = record.grid;
    let n = g * g + 1;
    let mut avg = vec![0.0f64; n - 1];
    for p in heads {
        for (slot, v) in avg.iter_mut().zip(&p.row(0)[1..]) {
            *slot += *v as f64;
        }
    }
    let data = avg.into_iter().map(|v| (v / heads.len() as f64) as f32).collect();
    TensorBlob::new(vec![g, g], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
        }
    }

    #[test]
    fn patch_counts() {
        let mut c = ViTConfig::vit_b16();
        assert_eq!(c.num_patches(), 196);
        c = ViTConfig::vit_micro();
        assert_eq!(c.num_patches(), 16);
        let img = TensorBlob::filled(&[32, 32, 3], 0.3);
        let p = patchify(&img, &c).unwrap();
        assert_eq!((p.rows, p.cols), (16, 192));
        assert!((1..16).all(|i| p.row(i) == p.row(0)));
        assert!(patchify(&TensorBlob::zeros(&[32, 16, 3]), &c).is_err());
    }

    #[test]
    fn patchify_layout() {
        let c = tiny();
        let data: Vec<f32> = (0..8 * 8 * 2).map(|v| v as f32).collect();
        let img = TensorBlob::new(vec![8, 8, 2], data).unwrap();
        let p = patchify(&img, &c).unwrap();
        // patch (0,1) starts at pixel (0,4), channel 0 => flat 8
        assert_eq!(p.row(1)[0], 8.0);
        // second row of that patch starts at pixel (1,4) => (1*8+4)*2 = 24
        assert_eq!(p.row(1)[8], 24.0);
        // patch (1,0) starts at pixel (4,0) => 64
        assert_eq!(p.row(2)[0], 64.0);
    }

    #[test]
    fn init_is_deterministic() {
        let c = ViTConfig::vit_micro();
        let a = init_params(&c, 3).unwrap();
        let b = init_params(&c, 3).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&init_params(&c, 4).unwrap()));
        for (name, e) in a.iter() {
            if name.contains("norm") && name.ends_with("weight") {
                assert!(e.tensor.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with("bias") {
                assert!(e.tensor.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_embedding_gives_cls_only() {
        let c = tiny();
        let mut p = VitParams::<f32>::zeros(&c);
        p.cls = (0..8).map(|v| v as f32).collect();
        let patches = Mat::from_vec(4, 32, vec![1.0; 128]);
        let t = embed(&patches, &p, &c).unwrap();
        assert_eq!(t.row(0), p.cls.as_slice());
        assert!(t.data[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_adds_position() {
        let c = ViTConfig {
            image_size: 4,
            patch_size: 2,
            channels: 2,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 1.0,
        };
        let mut p = VitParams::<f32>::zeros(&c);
        for i in 0..8 {
            p.patch_w[i * 8 + i] = 1.0;
        }
        p.pos = (0..40).map(|v| v as f32 * 0.1).collect();
        let patches = Mat::from_vec(4, 8, (0..32).map(|v| v as f32).collect());
        let t = embed(&patches, &p, &c).unwrap();
        for m in 0..4 {
            for j in 0..8 {
                assert_eq!(t.row(m + 1)[j], patches.row(m)[j] + p.pos[(m + 1) * 8 + j]);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let c = ViTConfig { depth: 1, ..ViTConfig::vit_micro() };
        let mut p = VitParams::<f32>::zeros(&c);
        p.norm_w = vec![1.0; 64];
        let tokens = Mat::from_vec(17, 64, (0..17 * 64).map(|v| ((v * 7) % 13) as f32).collect());
        let (out, rec) = forward(tokens.clone(), &p, &c, true).unwrap();
        let (expect, _) = nn::layer_norm(&tokens, &p.norm_w, &p.norm_b);
        assert_eq!(out, expect);
        let rec = rec.unwrap();
        for h in &rec.layers[0] {
            assert!(h.data.iter().all(|&v| (v - 1.0 / 17.0).abs() < 1e-7));
        }
        let map = cls_attention_map(&rec, 0).unwrap();
        assert_eq!(map.shape(), &[4, 4]);
        assert!(map.data().iter().all(|&v| (v - 1.0 / 17.0).abs() < 1e-7));
        assert!(cls_attention_map(&rec, 1).is_err());
    }

    #[test]
    fn b16_grid_is_14() {
        let c = ViTConfig::vit_b16();
        let rec = AttentionRecord {
            layers: vec![vec![Mat::from_vec(197, 197, vec![1.0 / 197.0; 197 * 197])]],
            grid: c.grid(),
        };
        assert_eq!(cls_attention_map(&rec, 0).unwrap().shape(), &[14, 14]);
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig { patch_size: 5, ..ViTConfig::vit_micro() }.validate().is_err());
        assert!(ViTConfig { heads: 3, ..ViTConfig::vit_micro() }.validate().is_err());
        assert!(ViTConfig { depth: 0, ..ViTConfig::vit_micro() }.validate().is_err());
        assert!(ViTConfig::vit_mini().validate().is_ok());
    }
}
