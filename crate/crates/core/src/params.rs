//! Named parameter sets and their binary container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"TVPS"
//! version  u32            (currently 1)
//! count    u32
//! repeated count times:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims u64 * rank
//!   values   f64 * product(dims)
//! ```

use thiserror::Error;

use crate::autodiff::{Graph, Gradients, Var};
use crate::tensor::Tensor;

pub const PARAMS_MAGIC: &[u8; 4] = b"TVPS";
pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes, not a parameter container")]
    BadMagic,
    #[error("unsupported parameter format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("parameter payload (format v{version}) truncated while reading {context}")]
    Truncated { version: u32, context: &'static str },
    #[error("parameter payload (format v{version}) is corrupt: {reason}")]
    Corrupt { version: u32, reason: String },
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf, in order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Collects the gradient of each registered leaf; leaves the loss does
    /// not reach get zeros.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(vars)
            .map(|((_, t), v)| {
                grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_values() * 8);
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(&PARAMS_MAGIC[..]) {
            return Err(FormatError::BadMagic);
        }
        let version = r.u32().map_err(|_| FormatError::BadMagic)?;
        if version != PARAMS_FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: PARAMS_FORMAT_VERSION,
            });
        }
        let truncated = |context| FormatError::Truncated { version, context };
        let corrupt = |reason: String| FormatError::Corrupt { version, reason };

        let count = r.u32().map_err(|_| truncated("entry count"))? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32().map_err(|_| truncated("name length"))? as usize;
            let name = r.take(name_len).map_err(|_| truncated("name"))?;
            let name = std::str::from_utf8(name)
                .map_err(|e| corrupt(format!("parameter name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u32().map_err(|_| truncated("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            let mut len: usize = 1;
            for _ in 0..rank {
                let d = r.u64().map_err(|_| truncated("shape"))?;
                let d = usize::try_from(d).map_err(|_| corrupt(format!("dimension {d} overflows")))?;
                len = len
                    .checked_mul(d)
                    .ok_or_else(|| corrupt("shape product overflows".into()))?;
                shape.push(d);
            }
            if len.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(truncated("values"));
            }
            let data = (0..len)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| truncated("values"))?;
            let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
            set.push(name, t);
        }
        if r.remaining() != 0 {
            return Err(corrupt(format!("{} trailing bytes", r.remaining())));
        }
        Ok(set)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let out = self.bytes.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ()> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ()> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
