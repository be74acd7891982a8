//! The `PELTNSR0` tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PELTNSR0" | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype | u8 rank | rank × u32 extents | payload
//! ```
//!
//! dtype codes: 0 = float32, 1 = uint8, 2 = int64, 3 = float64. Payloads are
//! raw row-major element bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, DType, Element, Float, Tensor};

pub const MAGIC: &[u8; 8] = b"PELTNSR0";

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, AnyTensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, tensor: AnyTensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn insert_float<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.insert(name, AnyTensor::from_float(t));
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.insert(name, AnyTensor::U8(Tensor::from_vec(bytes.to_vec())));
    }

    pub fn insert_scalar_i64(&mut self, name: impl Into<String>, v: i64) {
        self.insert(name, AnyTensor::I64(Tensor::scalar(v)));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&AnyTensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("archive is missing entry \"{name}\"")))
    }

    pub fn require_float<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        self.require(name)?
            .to_float()
            .map_err(|e| Error::Format(format!("entry \"{name}\": {e}")))
    }

    pub fn require_string(&self, name: &str) -> Result<String> {
        let bytes = self.require(name)?.as_u8()?;
        String::from_utf8(bytes.data().to_vec())
            .map_err(|_| Error::Format(format!("entry \"{name}\" is not valid UTF-8")))
    }

    pub fn require_scalar_i64(&self, name: &str) -> Result<i64> {
        let t = self.require(name)?.as_i64()?;
        match t.data() {
            [v] => Ok(*v),
            _ => Err(Error::Format(format!("entry \"{name}\" is not a scalar"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Format(format!("entry name too long: {name}")));
            }
            if t.shape().len() > u8::MAX as usize {
                return Err(Error::Format(format!("entry \"{name}\" has rank > 255")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                let e32 = u32::try_from(e)
                    .map_err(|_| Error::Format(format!("entry \"{name}\" extent {e} exceeds u32")))?;
                out.extend_from_slice(&e32.to_le_bytes());
            }
            match t {
                AnyTensor::F32(x) => write_payload(x, &mut out),
                AnyTensor::F64(x) => write_payload(x, &mut out),
                AnyTensor::U8(x) => out.extend_from_slice(x.data()),
                AnyTensor::I64(x) => write_payload(x, &mut out),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).map_err(|_| Error::Format("file too short for magic".into()))?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic: not a PELTNSR0 archive".into()));
        }
        let count = r.u32().map_err(|_| Error::Format("truncated entry count".into()))?;
        let mut archive = Archive::new();
        for i in 0..count {
            let trunc = |what: &str| Error::Format(format!("truncated {what} in entry #{i}"));
            let nlen = r.u16().map_err(|_| trunc("name length"))? as usize;
            let name = String::from_utf8(r.take(nlen).map_err(|_| trunc("name"))?.to_vec())
                .map_err(|_| Error::Format(format!("entry #{i} name is not UTF-8")))?;
            let trunc = |what: &str| Error::Format(format!("truncated {what} in entry \"{name}\""));
            let code = r.u8().map_err(|_| trunc("dtype"))?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("entry \"{name}\" has unknown dtype {code}")))?;
            let rank = r.u8().map_err(|_| trunc("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().map_err(|_| trunc("extents"))? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = n
                .checked_mul(dtype.size())
                .and_then(|len| r.take(len).ok())
                .ok_or_else(|| trunc("payload"))?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(read_payload(shape, payload)?),
                DType::F64 => AnyTensor::F64(read_payload(shape, payload)?),
                DType::U8 => AnyTensor::U8(Tensor::new(shape, payload.to_vec())?),
                DType::I64 => AnyTensor::I64(read_payload(shape, payload)?),
            };
            archive.entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_payload<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.reserve(t.numel() * T::DTYPE.size());
    for &x in t.data() {
        x.write_le(out);
    }
}

fn read_payload<T: Element>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let w = T::DTYPE.size();
    Tensor::new(shape, bytes.chunks_exact(w).map(T::read_le).collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        if end > self.bytes.len() {
            return Err(());
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, ()> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, ()> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
