//! Image corpora: procedural shapes, the corpus file format, foreground-mask
//! sidecars, directory loading, normalization and augmentation.
//!
//! Corpus file (little-endian):
//!
//! ```text
//! "MIMCORP1"  u32 count
//! per image:  u32 H, u32 W, u32 C, u32 label (0xFFFFFFFF = none), H*W*C f32 pixels (HWC)
//! ```
//!
//! Foreground sidecar (`<corpus>.masks`):
//!
//! ```text
//! "MIMMASK1"  u32 count
//! per image:  u32 H, u32 W, H*W bytes (1 = shape pixel, 0 = background)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::TensorBlob;

pub const CORPUS_MAGIC: &[u8; 8] = b"MIMCORP1";
pub const MASKS_MAGIC: &[u8; 8] = b"MIMMASK1";
pub const NO_LABEL: u32 = 0xFFFF_FFFF;

pub const SHAPE_NAMES: [&str; 8] = ["circle", "square", "triangle", "cross", "ring", "diamond", "frame", "saltire"];

/// Images (`H x W x C`) with optional class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub images: Vec<TensorBlob>,
    pub labels: Vec<Option<u32>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty() && self.labels.iter().all(Option::is_some)
    }

    /// Labels as plain integers; contract error if any is missing.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(|v| v as usize).ok_or_else(|| Error::contract(format!("image {i} has no label"))))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().flatten().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Per-pixel foreground flags for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// A generated corpus together with its foreground masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub corpus: Corpus,
    pub masks: Vec<ForegroundMask>,
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.82,
        2 => (-0.85..=0.85).contains(&v) && u.abs() <= (v + 0.85) / 1.7,
        3 => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
        4 => {
            let r2 = u * u + v * v;
            (0.16..=1.0).contains(&r2)
        }
        5 => u.abs() + v.abs() <= 1.0,
        6 => {
            let m = u.abs().max(v.abs());
            (0.3..=0.9).contains(&m)
        }
        _ => ((u - v).abs() <= 0.5 || (u + v).abs() <= 0.5) && u.abs() <= 0.85 && v.abs() <= 0.85,
    }
}

fn render<R: Rng>(r: &mut R, class: usize, size: usize) -> (Vec<f32>, ForegroundMask) {
    let s = size as f64;
    // Dark textured background, brighter shape.
    let base: [f64; 3] = std::array::from_fn(|_| r.random_range(0.1..0.45));
    let color: [f64; 3] = std::array::from_fn(|_| r.random_range(0.6..1.0));
    struct Wave {
        amp: f64,
        fx: f64,
        fy: f64,
        phase: f64,
        tint: [f64; 3],
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            amp: r.random_range(0.03..0.08),
            fx: r.random_range(-0.6..0.6),
            fy: r.random_range(-0.6..0.6),
            phase: r.random_range(0.0..std::f64::consts::TAU),
            tint: std::array::from_fn(|_| r.random_range(0.5..1.5)),
        })
        .collect();
    let radius = r.random_range(0.3..0.42) * s;
    let cx = s / 2.0 + r.random_range(-0.1..0.1) * s;
    let cy = s / 2.0 + r.random_range(-0.1..0.1) * s;
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut pixels = vec![0.0f32; size * size * 3];
    let mut fg = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5 - cx) / radius, (y as f64 + 0.5 - cy) / radius);
            let is_fg = inside(class, u, v);
            fg[y * size + x] = is_fg as u8;
            for ch in 0..3 {
                let val = if is_fg {
                    color[ch]
                } else {
                    base[ch]
                        + waves
                            .iter()
                            .map(|w| w.amp * w.tint[ch] * (w.fx * x as f64 + w.fy * y as f64 + w.phase).sin())
                            .sum::<f64>()
                };
                let val = val + noise.sample(r);
                pixels[(y * size + x) * 3 + ch] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    (
        pixels,
        ForegroundMask {
            height: size,
            width: size,
            pixels: fg,
        },
    )
}

/// Procedural coloured shapes on textured noise, `count / classes` per class
/// (image `i` has label `i % classes`). Pixels lie in `[0, 1]`.
pub fn synth_dataset(seed: u64, count: usize, classes: usize, image_size: usize) -> Result<SynthDataset> {
    if !(2..=SHAPE_NAMES.len()).contains(&classes) {
        return Err(Error::range(format!(
            "classes must be in 2..={}, got {classes}",
            SHAPE_NAMES.len()
        )));
    }
    if image_size < 4 {
        return Err(Error::range("image_size must be at least 4"));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let mut r = rng::stream(seed, &[tag::SYNTH, i as u64]);
        let (pixels, mask) = render(&mut r, class, image_size);
        images.push(TensorBlob::new(vec![image_size, image_size, 3], pixels)?);
        labels.push(Some(class as u32));
        masks.push(mask);
    }
    Ok(SynthDataset {
        corpus: Corpus { images, labels },
        masks,
    })
}

/// Per-patch labels: `class + 1` where at least half the patch is shape,
/// `0` for background. Row-major over the patch grid.
pub fn patch_labels(mask: &ForegroundMask, class: usize, patch: usize) -> Result<Vec<u32>> {
    if patch == 0 || !mask.height.is_multiple_of(patch) || !mask.width.is_multiple_of(patch) {
        return Err(Error::contract(format!(
            "{}x{} mask is not divisible into {patch}px patches",
            mask.height, mask.width
        )));
    }
    let (gh, gw) = (mask.height / patch, mask.width / patch);
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut n = 0;
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    n += mask.pixels[y * mask.width + x] as usize;
                }
            }
            out.push(if 2 * n >= patch * patch { class as u32 + 1 } else { 0 });
        }
    }
    Ok(out)
}

pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    if corpus.labels.len() != corpus.images.len() {
        return Err(Error::contract("label count differs from image count"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
    for (img, label) in corpus.images.iter().zip(&corpus.labels) {
        let [h, w, c] = <[usize; 3]>::try_from(img.shape())
            .map_err(|_| Error::contract(format!("image shape {:?} is not HxWxC", img.shape())))?;
        for d in [h, w, c] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let l = match label {
            Some(v) if *v == NO_LABEL => return Err(Error::range("label 0xFFFFFFFF is reserved")),
            Some(v) => *v,
            None => NO_LABEL,
        };
        out.extend_from_slice(&l.to_le_bytes());
        for v in img.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let s = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::format(*pos as u64, format!("truncated while reading {what}")))?;
    *pos += 4;
    Ok(u32::from_le_bytes(s.try_into().unwrap()))
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    if bytes.get(..8) != Some(CORPUS_MAGIC.as_slice()) {
        return Err(Error::format(0, "bad magic, expected \"MIMCORP1\""));
    }
    let mut pos = 8;
    let count = read_u32(bytes, &mut pos, "image count")? as usize;
    let mut corpus = Corpus::default();
    for _ in 0..count {
        let at = pos as u64;
        let h = read_u32(bytes, &mut pos, "height")? as usize;
        let w = read_u32(bytes, &mut pos, "width")? as usize;
        let c = read_u32(bytes, &mut pos, "channels")? as usize;
        let label = read_u32(bytes, &mut pos, "label")?;
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::format(at, format!("invalid image dims {h}x{w}x{c}")))?;
        let payload = bytes
            .get(pos..pos.saturating_add(4 * n))
            .ok_or_else(|| Error::format(pos as u64, "truncated pixel payload"))?;
        let data: Vec<f32> = payload.chunks_exact(4).map(|ch| f32::from_le_bytes(ch.try_into().unwrap())).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((pos + 4 * i) as u64, "non-finite pixel"));
        }
        pos += 4 * n;
        corpus.images.push(TensorBlob::new(vec![h, w, c], data)?);
        corpus.labels.push((label != NO_LABEL).then_some(label));
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes after last image"));
    }
    Ok(corpus)
}

pub fn encode_masks(masks: &[ForegroundMask]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MASKS_MAGIC);
    out.extend_from_slice(&(masks.len() as u32).to_le_bytes());
    for m in masks {
        out.extend_from_slice(&(m.height as u32).to_le_bytes());
        out.extend_from_slice(&(m.width as u32).to_le_bytes());
        out.extend_from_slice(&m.pixels);
    }
    out
}

pub fn decode_masks(bytes: &[u8]) -> Result<Vec<ForegroundMask>> {
    if bytes.get(..8) != Some(MASKS_MAGIC.as_slice()) {
        return Err(Error::format(0, "bad magic, expected \"MIMMASK1\""));
    }
    let mut pos = 8;
    let count = read_u32(bytes, &mut pos, "mask count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let height = read_u32(bytes, &mut pos, "height")? as usize;
        let width = read_u32(bytes, &mut pos, "width")? as usize;
        let pixels = bytes
            .get(pos..pos.saturating_add(height * width))
            .ok_or_else(|| Error::format(pos as u64, "truncated mask payload"))?
            .to_vec();
        pos += height * width;
        out.push(ForegroundMask { height, width, pixels });
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes after last mask"));
    }
    Ok(out)
}

fn with_context<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::FileFormat {
            path: path.to_owned(),
            message: format!("byte {offset}: {message}"),
        },
        other => other,
    })
}

pub fn masks_path(corpus_path: &Path) -> PathBuf {
    let mut s = corpus_path.as_os_str().to_owned();
    s.push(".masks");
    PathBuf::from(s)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, encode_corpus(corpus)?)?;
    Ok(())
}

/// Reads a corpus file without normalization.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    with_context(decode_corpus(&fs::read(path)?), path)
}

/// Writes the corpus and its foreground sidecar.
pub fn write_synth(ds: &SynthDataset, path: &Path) -> Result<()> {
    write_corpus(&ds.corpus, path)?;
    fs::write(masks_path(path), encode_masks(&ds.masks))?;
    Ok(())
}

/// Reads the foreground sidecar of a corpus file.
pub fn read_masks(corpus_path: &Path) -> Result<Vec<ForegroundMask>> {
    let p = masks_path(corpus_path);
    if !p.exists() {
        return Err(Error::contract(format!(
            "no per-patch labels: {} does not exist",
            p.display()
        )));
    }
    with_context(decode_masks(&fs::read(&p)?), &p)
}

/// Per-channel `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, image: &TensorBlob) -> Result<TensorBlob> {
        let c = *image.shape().last().unwrap_or(&0);
        if c != self.mean.len() || c != self.std.len() {
            return Err(Error::contract(format!(
                "normalization has {} channels, image has {c}",
                self.mean.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("normalization std must be positive"));
        }
        let data = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect();
        TensorBlob::new(image.shape().to_vec(), data)
    }
}

fn is_raster(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

fn load_raster_dir(dir: &Path) -> Result<Corpus> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && is_raster(p));
    files.sort();
    let mut corpus = Corpus::default();
    for f in files {
        let img = image::open(&f)
            .map_err(|e| Error::FileFormat {
                path: f.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        corpus.images.push(TensorBlob::new(vec![h as usize, w as usize, 3], data)?);
        corpus.labels.push(None);
    }
    Ok(corpus)
}

/// Loads a corpus file or a directory of raster images (sorted by file name,
/// unlabeled), then normalizes every image.
pub fn load_corpus(path: &Path, norm: &Normalization) -> Result<Corpus> {
    let raw = if path.is_dir() {
        load_raster_dir(path)?
    } else {
        read_corpus(path)?
    };
    let images = raw.images.iter().map(|i| norm.apply(i)).collect::<Result<_>>()?;
    Ok(Corpus {
        images,
        labels: raw.labels,
    })
}

/// Random translation (edge-replicated, up to `pad` pixels) and horizontal
/// flip, drawn from the given stream key.
pub fn augment(image: &TensorBlob, pad: usize, seed: u64, tags: &[u64]) -> TensorBlob {
    let mut r = rng::stream(seed, tags);
    let p = pad as i64;
    let (dx, dy) = if pad > 0 {
        (r.random_range(-p..=p), r.random_range(-p..=p))
    } else {
        (0, 0)
    };
    let flip = r.random_bool(0.5);
    let [h, w, c]: [usize; 3] = image.shape().try_into().expect("HWC image");
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
        for x in 0..w {
            let fx = if flip { w - 1 - x } else { x };
            let sx = (fx as i64 + dx).clamp(0, w as i64 - 1) as usize;
            let (d, s) = ((y * w + x) * c, (sy * w + sx) * c);
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    TensorBlob::new(image.shape().to_vec(), out).expect("copied finite values")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_balanced_bounded_deterministic() {
        let a = synth_dataset(5, 256, 4, 32).unwrap();
        for k in 0..4 {
            assert_eq!(a.corpus.labels.iter().filter(|l| **l == Some(k)).count(), 64);
        }
        for img in &a.corpus.images {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let b = synth_dataset(5, 256, 4, 32).unwrap();
        assert_eq!(encode_corpus(&a.corpus).unwrap(), encode_corpus(&b.corpus).unwrap());
        assert!(synth_dataset(5, 4, 1, 32).is_err());
        assert!(synth_dataset(5, 4, 9, 32).is_err());
    }

    #[test]
    fn every_shape_has_foreground() {
        let ds = synth_dataset(1, 400, 8, 32).unwrap();
        for (m, l) in ds.masks.iter().zip(&ds.corpus.labels) {
            let n: usize = m.pixels.iter().map(|&v| v as usize).sum();
            assert!(n > 40, "class {l:?} has only {n} foreground pixels");
            let pl = patch_labels(m, l.unwrap() as usize, 8).unwrap();
            assert!(pl.iter().any(|&v| v == l.unwrap() + 1), "class {l:?} labels no patch");
        }
    }

    #[test]
    fn corpus_roundtrip_and_errors() {
        let ds = synth_dataset(2, 6, 3, 8).unwrap();
        let mut c = ds.corpus.clone();
        c.labels[1] = None;
        let bytes = encode_corpus(&c).unwrap();
        assert_eq!(decode_corpus(&bytes).unwrap(), c);
        assert!(matches!(decode_corpus(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(decode_corpus(b"MIMCORP2\0\0\0\0"), Err(Error::Format { offset: 0, .. })));
        let empty = encode_corpus(&Corpus::default()).unwrap();
        assert_eq!(empty.len(), 12);
        assert!(decode_corpus(&empty).unwrap().is_empty());
        let mb = encode_masks(&ds.masks);
        assert_eq!(decode_masks(&mb).unwrap(), ds.masks);
    }

    #[test]
    fn patch_label_threshold() {
        let mut px = vec![0u8; 16];
        // top-left 2x2 patch fully on, top-right half on
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (0, 3)] {
            px[y * 4 + x] = 1;
        }
        let m = ForegroundMask { height: 4, width: 4, pixels: px };
        assert_eq!(patch_labels(&m, 2, 2).unwrap(), vec![3, 3, 0, 0]);
        assert!(patch_labels(&m, 3, 3).is_err());
    }

    #[test]
    fn augment_is_deterministic_permutation_of_rows() {
        let img = TensorBlob::new(vec![4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let a = augment(&img, 1, 3, &[1, 2]);
        assert!(a.bit_eq(&augment(&img, 1, 3, &[1, 2])));
        let none = augment(&img, 0, 3, &[7]);
        let flipped: Vec<f32> = (0..4).flat_map(|y| (0..4).rev().map(move |x| (y * 4 + x) as f32)).collect();
        assert!(none.data() == img.data() || none.data() == flipped.as_slice());
    }

    #[test]
    fn normalization() {
        let img = TensorBlob::new(vec![1, 2, 2], vec![0.5, 1.0, 0.0, 0.2]).unwrap();
        let n = Normalization { mean: vec![0.5, 0.0], std: vec![0.5, 2.0] };
        assert_eq!(n.apply(&img).unwrap().data(), &[0.0, 0.5, -1.0, 0.1]);
        assert!(Normalization::identity(3).apply(&img).is_err());
    }
}
