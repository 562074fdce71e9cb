//! Dense f32 tensors, named parameter stores, and the `.mimt` container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MIMALIGN"
//! version  u32      1
//! count    u32      number of entries
//! entry*   u32 name length, name bytes (UTF-8),
//!          u32 rank, rank x u64 dims,
//!          product(dims) x f32 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MIMALIGN";
pub const FORMAT_VERSION: u32 = 1;

/// Row-major f32 array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorBlob {
    /// Builds a tensor, rejecting shape/length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the payload. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: TensorBlob,
    pub trainable: bool,
}

/// Ordered collection of named parameters, each trainable or frozen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new entry. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorBlob, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorBlob> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorBlob> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    /// Looks up a parameter and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&TensorBlob> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name:?}")))?;
        if t.shape() != shape {
            return Err(Error::contract(format!(
                "parameter {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.trainable = false;
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name:?}")))?;
        e.trainable = trainable;
        Ok(())
    }

    /// Bitwise equality of every entry, including order and trainable flags.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.trainable == b.trainable && a.tensor.bit_eq(&b.tensor))
    }

    /// Named tensors in order, suitable for [`tensor_save`].
    pub fn to_blobs(&self) -> IndexMap<String, TensorBlob> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.tensor.clone()))
            .collect()
    }

    /// Builds a store with every entry flagged `trainable`.
    pub fn from_blobs(blobs: IndexMap<String, TensorBlob>, trainable: bool) -> Self {
        Self {
            entries: blobs
                .into_iter()
                .map(|(k, tensor)| (k, ParamEntry { tensor, trainable }))
                .collect(),
        }
    }
}

/// Encodes named tensors into the container byte layout.
pub fn encode_tensors<'a, I>(blobs: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a TensorBlob)>,
{
    let blobs: Vec<_> = blobs.into_iter().collect();
    let mut out = Vec::with_capacity(16 + blobs.iter().map(|(n, t)| 16 + n.len() + 8 * t.shape().len() + 4 * t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(blobs.len()).map_err(|_| Error::range("too many entries"))?.to_le_bytes());
    for (name, t) in blobs {
        if name.contains('\0') {
            return Err(Error::contract(format!("tensor name {name:?} contains NUL")));
        }
        let len = u32::try_from(name.len()).map_err(|_| Error::range("tensor name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes the container byte layout.
pub fn decode_tensors(bytes: &[u8]) -> Result<IndexMap<String, TensorBlob>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MIMALIGN\""));
    }
    let version_at = r.pos as u64;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(version_at, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let name_at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(name_at + 4, "tensor name is not valid UTF-8"))?
            .to_owned();
        if name.contains('\0') {
            return Err(Error::format(name_at + 4, "tensor name contains NUL"));
        }
        let rank = r.u32("rank")? as usize;
        let dims_at = r.pos as u64;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            let d = usize::try_from(d).map_err(|_| Error::format(dims_at, "dimension overflows usize"))?;
            if d == 0 {
                return Err(Error::format(dims_at, format!("entry {name:?} has a zero dimension")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format(dims_at, "element count overflows"))?;
            shape.push(d);
        }
        let payload_at = r.pos as u64;
        let nbytes = numel
            .checked_mul(4)
            .ok_or_else(|| Error::format(payload_at, "payload size overflows"))?;
        let raw = r.take(nbytes, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(payload_at + 4 * i as u64, format!("non-finite value in {name:?}")));
        }
        if out.contains_key(&name) {
            return Err(Error::format(name_at, format!("duplicate entry {name:?}")));
        }
        out.insert(name, TensorBlob { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last entry"));
    }
    Ok(out)
}

/// Writes named tensors to a `.mimt` file.
pub fn tensor_save<'a, I>(blobs: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a TensorBlob)>,
{
    let bytes = encode_tensors(blobs)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

/// Reads a `.mimt` file, preserving entry order.
pub fn tensor_load(path: &Path) -> Result<IndexMap<String, TensorBlob>> {
    let bytes = fs::read(path)?;
    decode_tensors(&bytes)
}
