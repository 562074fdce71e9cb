//! Training checkpoints stored as `.mimt` tensor files.
//!
//! Entry layout:
//! - `student.<name>`: every student parameter, in store order
//! - `optim.m.<name>`, `optim.v.<name>`: AdamW moments
//! - `meta.format_version`: `[1]`
//! - `meta.step`, `meta.optim_step`: u64 as four 16-bit limbs, low first
//! - `meta.config_digest`: 32 digest bytes, one per element
//! - `meta.vit`: image, patch, channels, dim, depth, heads, mlp_ratio
//!
//! Every meta value is an integer or ratio exactly representable in f32.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, Moments, OptimizerState};
use crate::tensor::{tensor_load, tensor_save, ParamStore, TensorBlob};
use crate::vit::ViTConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

const STUDENT: &str = "student.";
const FIRST: &str = "optim.m.";
const SECOND: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub student: ParamStore,
    pub optimizer: OptimizerState,
    /// Completed pre-training steps.
    pub step: u64,
    pub config_digest: [u8; 32],
}

fn u64_blob(v: u64) -> TensorBlob {
    let limbs = (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect();
    TensorBlob::new(vec![4], limbs).expect("finite limbs")
}

fn blob_u64(t: &TensorBlob) -> Option<u64> {
    if t.shape() != [4] {
        return None;
    }
    let mut v = 0u64;
    for (i, &l) in t.data().iter().enumerate() {
        if l.fract() != 0.0 || !(0.0..=65535.0).contains(&l) {
            return None;
        }
        v |= (l as u64) << (16 * i);
    }
    Some(v)
}

impl Checkpoint {
    pub fn to_blobs(&self) -> IndexMap<String, TensorBlob> {
        let mut out = IndexMap::new();
        for (name, e) in self.student.iter() {
            out.insert(format!("{STUDENT}{name}"), e.tensor.clone());
        }
        for (name, m) in &self.optimizer.moments {
            out.insert(format!("{FIRST}{name}"), m.first.clone());
        }
        for (name, m) in &self.optimizer.moments {
            out.insert(format!("{SECOND}{name}"), m.second.clone());
        }
        out.insert(
            "meta.format_version".into(),
            TensorBlob::new(vec![1], vec![CHECKPOINT_VERSION as f32]).expect("finite"),
        );
        out.insert("meta.step".into(), u64_blob(self.step));
        out.insert("meta.optim_step".into(), u64_blob(self.optimizer.step));
        out.insert(
            "meta.config_digest".into(),
            TensorBlob::new(vec![32], self.config_digest.iter().map(|&b| b as f32).collect()).expect("finite"),
        );
        let c = &self.config;
        let vit = [c.image_size, c.patch_size, c.channels, c.embed_dim, c.depth, c.heads]
            .iter()
            .map(|&v| v as f32)
            .chain([c.mlp_ratio as f32])
            .collect();
        out.insert("meta.vit".into(), TensorBlob::new(vec![7], vit).expect("finite"));
        out
    }

    /// Rebuilds a checkpoint; `hyper` supplies the optimizer settings, which
    /// are covered by the config digest rather than stored.
    pub fn from_blobs(mut blobs: IndexMap<String, TensorBlob>, hyper: AdamWConfig) -> std::result::Result<Self, LayoutError> {
        let mut take = |name: &str| blobs.shift_remove(name).ok_or_else(|| format!("missing entry {name:?}"));
        let version = take("meta.format_version")?;
        if version.data() != [CHECKPOINT_VERSION as f32] {
            return Err(format!("unsupported checkpoint version {:?}", version.data()).into());
        }
        let step = blob_u64(&take("meta.step")?).ok_or("malformed meta.step")?;
        let optim_step = blob_u64(&take("meta.optim_step")?).ok_or("malformed meta.optim_step")?;
        let digest_blob = take("meta.config_digest")?;
        let mut config_digest = [0u8; 32];
        if digest_blob.shape() != [32] {
            return Err("malformed meta.config_digest".to_owned().into());
        }
        for (d, &v) in config_digest.iter_mut().zip(digest_blob.data()) {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err("malformed meta.config_digest".to_owned().into());
            }
            *d = v as u8;
        }
        let vit = take("meta.vit")?;
        if vit.shape() != [7] || vit.data()[..6].iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err("malformed meta.vit".to_owned().into());
        }
        let v = vit.data();
        let config = ViTConfig {
            image_size: v[0] as usize,
            patch_size: v[1] as usize,
            channels: v[2] as usize,
            embed_dim: v[3] as usize,
            depth: v[4] as usize,
            heads: v[5] as usize,
            mlp_ratio: v[6] as f64,
        };
        config.validate().map_err(|e| format!("meta.vit: {e}"))?;

        let mut student = ParamStore::new();
        let mut firsts = IndexMap::new();
        let mut seconds = IndexMap::new();
        for (name, t) in blobs {
            if let Some(n) = name.strip_prefix(STUDENT) {
                student.insert(n, t, true).map_err(|e| e.to_string())?;
            } else if let Some(n) = name.strip_prefix(FIRST) {
                firsts.insert(n.to_owned(), t);
            } else if let Some(n) = name.strip_prefix(SECOND) {
                seconds.insert(n.to_owned(), t);
            } else {
                return Err(format!("unexpected entry {name:?}").into());
            }
        }
        let mut moments = IndexMap::new();
        for (name, e) in student.iter() {
            let first = firsts.shift_remove(name).ok_or_else(|| format!("missing entry \"{FIRST}{name}\""))?;
            let second = seconds.shift_remove(name).ok_or_else(|| format!("missing entry \"{SECOND}{name}\""))?;
            for (prefix, m) in [(FIRST, &first), (SECOND, &second)] {
                if m.shape() != e.tensor.shape() {
                    return Err(format!("entry \"{prefix}{name}\" does not match its parameter's shape").into());
                }
            }
            moments.insert(name.to_owned(), Moments { first, second });
        }
        if let Some(name) = firsts.keys().chain(seconds.keys()).next() {
            return Err(format!("moments for unknown parameter {name:?}").into());
        }
        Ok(Self {
            config,
            student,
            optimizer: OptimizerState {
                hyper,
                step: optim_step,
                moments,
            },
            step,
            config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blobs = self.to_blobs();
        tensor_save(blobs.iter().map(|(k, v)| (k.as_str(), v)), path)
    }

    pub fn load(path: &Path, hyper: AdamWConfig) -> Result<Self> {
        let blobs = tensor_load(path).map_err(|e| match e {
            Error::Format { offset, message } => Error::FileFormat {
                path: path.to_owned(),
                message: format!("byte {offset}: {message}"),
            },
            other => other,
        })?;
        Self::from_blobs(blobs, hyper).map_err(|e: LayoutError| Error::FileFormat {
            path: path.to_owned(),
            message: e.0,
        })
    }
}

/// Checkpoint layout violation.
#[derive(Debug)]
pub struct LayoutError(String);

impl From<String> for LayoutError {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&str> for LayoutError {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl std::fmt::Display for LayoutError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::init_student;

    fn sample() -> Checkpoint {
        let config = ViTConfig { depth: 1, ..ViTConfig::vit_micro() };
        let student = init_student(&config, 16, 3).unwrap();
        let mut optimizer = OptimizerState::new(&student, AdamWConfig::default());
        optimizer.step = 70_000;
        for m in optimizer.moments.values_mut() {
            for (i, v) in m.first.data_mut().iter_mut().enumerate() {
                *v = i as f32 * 1e-3;
            }
        }
        Checkpoint {
            config,
            student,
            optimizer,
            step: (1 << 40) + 12345,
            config_digest: std::array::from_fn(|i| (i * 7) as u8),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mimt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path, AdamWConfig::default()).unwrap();
        assert_eq!(back.step, c.step);
        assert_eq!(back.optimizer.step, 70_000);
        assert_eq!(back.config_digest, c.config_digest);
        assert_eq!(back.config, c.config);
        assert!(back.student.bit_eq(&c.student));
        assert_eq!(back.optimizer, c.optimizer);
        back.save(&dir.path().join("d.mimt")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("d.mimt")).unwrap());
    }

    #[test]
    fn missing_moment_is_named() {
        let mut blobs = sample().to_blobs();
        blobs.shift_remove("optim.v.mask_token");
        let e = Checkpoint::from_blobs(blobs, AdamWConfig::default()).unwrap_err();
        assert!(e.0.contains("optim.v.mask_token"), "{}", e.0);
    }
}
