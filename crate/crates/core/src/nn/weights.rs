//! Named-tensor weight container and its `PSW1` binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PSW1" | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank × u32 dims | f32 data
//! u32 CRC32 (IEEE) of every preceding byte
//! ```
//!
//! Store metadata travels as two ordinary tensors so the container stays
//! self-describing: `meta.profile` holds the profile name one byte per
//! element and `meta.seed` holds the seed as four 16-bit limbs, low limb
//! first. Both are exact in f32.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::matrix::FeatureMatrix;
use super::rng::Rng;
use crate::error::{Error, Result};

pub const PSW_MAGIC: &[u8; 4] = b"PSW1";
pub const META_PROFILE: &str = "meta.profile";
pub const META_SEED: &str = "meta.seed";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Rank-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<FeatureMatrix> {
        match self.shape[..] {
            [r, c] => Ok(FeatureMatrix::from_raw(r, c, self.to_f64())),
            _ => Err(Error::invalid(format!(
                "tensor of rank {} is not a matrix",
                self.shape.len()
            ))),
        }
    }
}

/// How a declared tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    /// `[fan_in, fan_out]` weight plus `[fan_out]` zero bias, named
    /// `{prefix}.weight` and `{prefix}.bias`.
    pub fn linear(prefix: &str, fan_in: usize, fan_out: usize) -> [TensorSpec; 2] {
        [
            TensorSpec {
                name: format!("{prefix}.weight"),
                shape: vec![fan_in, fan_out],
                init: Init::Xavier { fan_in, fan_out },
            },
            TensorSpec {
                name: format!("{prefix}.bias"),
                shape: vec![fan_out],
                init: Init::Zeros,
            },
        ]
    }
}

/// Immutable-after-construction map from dotted names to tensors. Iteration
/// and serialization follow insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: IndexMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every spec in order from one seeded stream, then appends
    /// the metadata tensors.
    pub fn initialize(specs: &[TensorSpec], profile: &str, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut store = WeightStore::new();
        for spec in specs {
            let mut t = Tensor::zeros(spec.shape.clone());
            if let Init::Xavier { fan_in, fan_out } = spec.init {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.uniform_in(-a, a) as f32;
                }
            }
            store.insert(&spec.name, t)?;
        }
        store.set_metadata(profile, seed)?;
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    /// Replaces an existing tensor of the same shape.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != t.shape() {
            return Err(Error::shape(format!("replace `{name}`"), old.shape(), t.shape()));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Every tensor in `specs` is present with the declared shape.
    pub fn check_specs(&self, specs: &[TensorSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(format!("tensor `{}`", spec.name), t.shape(), &spec.shape));
            }
        }
        Ok(())
    }

    fn set_metadata(&mut self, profile: &str, seed: u64) -> Result<()> {
        let name: Vec<f32> = profile.bytes().map(|b| b as f32).collect();
        self.insert(META_PROFILE, Tensor::new(vec![name.len()], name)?)?;
        let limbs: Vec<f32> = (0..4).map(|i| ((seed >> (16 * i)) & 0xffff) as f32).collect();
        self.insert(META_SEED, Tensor::new(vec![4], limbs)?)
    }

    pub fn profile_name(&self) -> Option<String> {
        let t = self.tensors.get(META_PROFILE)?;
        let bytes: Option<Vec<u8>> = t
            .data()
            .iter()
            .map(|&v| ((0.0..=255.0).contains(&v) && v.fract() == 0.0).then_some(v as u8))
            .collect();
        String::from_utf8(bytes?).ok()
    }

    pub fn seed(&self) -> Option<u64> {
        let t = self.tensors.get(META_SEED)?;
        if t.len() != 4 {
            return None;
        }
        Some(
            t.data()
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | ((v as u64 & 0xffff) << (16 * i))),
        )
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PSW_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::invalid(format!("tensor name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank =
                u8::try_from(t.shape.len()).map_err(|_| Error::invalid(format!("tensor `{name}` rank too large")))?;
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::invalid(format!("tensor `{name}` dim too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != PSW_MAGIC {
            return Err(Error::format(0, "missing PSW1 magic"));
        }
        let count = r.u32("tensor count")?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?
                .to_string();
            if store.contains(&name) {
                return Err(Error::format(name_at, format!("duplicate tensor name `{name}`")));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::format(r.pos as u64, "tensor size overflows"))?;
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.tensors.insert(name, Tensor { shape, data });
        }
        let body_end = r.pos;
        let crc = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after checksum"));
        }
        if crc32fast::hash(&bytes[..body_end]) != crc {
            return Err(Error::format(body_end as u64, "checksum mismatch"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        WeightStore::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            )),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
