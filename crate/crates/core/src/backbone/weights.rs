//! Named parameter tensors and the `PMBF` binary container.
//!
//! Layout (little-endian): magic `PMBF`, `u32` version (1), `u32` tensor count,
//! then per tensor `u16` name length, UTF-8 name, `u8` rank, `u32` per dim and
//! the raw `f32` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"PMBF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    /// Rank-2 tensors map to `rows × cols`, rank-1 tensors to a `1 × n` row.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        match self.shape.as_slice() {
            [n] => Tensor::new(1, *n, data),
            [r, c] => Tensor::new(*r, *c, data),
            other => panic!("unsupported parameter rank {}", other.len()),
        }
    }
}

/// Every parameter of both branches and all fusion blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightsBundle {
    tensors: BTreeMap<String, ParamTensor>,
}

/// Name, shape and fan-in of one parameter.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl WeightsBundle {
    /// Uniform in `[-a, a]` with `a = sqrt(1 / fan_in)`, drawn in architecture
    /// order from one seeded stream.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            let a = (1.0 / spec.fan_in as f64).sqrt();
            let n: usize = spec.shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-a..=a) as f32).collect();
            tensors.insert(spec.name, ParamTensor { shape: spec.shape, data });
        }
        Self { tensors }
    }

    pub fn from_tensors(tensors: BTreeMap<String, ParamTensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ParamTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Puts a parameter on the tape (cached per name).
    pub fn var(&self, tape: &mut Tape, name: &str) -> Var {
        let t = self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("weights bundle has no tensor `{name}`; validate against the config first"));
        tape.param(name, || t.to_tensor())
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Every tensor required by `config` must be present with the right shape,
    /// and nothing else may be.
    pub fn validate(&self, config: &NetworkConfig) -> Result<()> {
        let specs = config.param_specs();
        for spec in &specs {
            match self.tensors.get(&spec.name) {
                None => return Err(Error::Config(format!("missing tensor `{}`", spec.name))),
                Some(t) if t.shape != spec.shape => {
                    return Err(Error::Config(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        spec.name, t.shape, spec.shape
                    )))
                }
                Some(t) if t.data.len() != spec.shape.iter().product::<usize>() => {
                    return Err(Error::Config(format!("tensor `{}` data length mismatch", spec.name)))
                }
                _ => {}
            }
        }
        if specs.len() != self.tensors.len() {
            let known: std::collections::HashSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
            let unknown = self.tensors.keys().find(|k| !known.contains(k.as_str())).expect("extra tensor");
            return Err(Error::Config(format!("unknown tensor `{unknown}`")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, expected PMBF"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if tensors.insert(name.clone(), ParamTensor { shape, data }).is_some() {
                return Err(Error::format(path, format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a bundle; nothing is returned unless the whole file parses.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads and validates against `config`.
    pub fn load_for(path: &Path, config: &NetworkConfig) -> Result<Self> {
        let b = Self::load(path)?;
        b.validate(config)?;
        Ok(b)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
