//! Binary weight archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LIT4" | u32 version = 1 | u32 count
//! count x ( u16 name_len | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | payload )
//! ```
//!
//! The payload holds `product(dims)` little-endian values of the dtype
//! (0 = f32, 1 = f64). Names are unique and nothing may follow the last
//! tensor.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"LIT4";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian payload.
    pub payload: Vec<u8>,
}

impl ArchiveTensor {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size_of());
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    /// Decodes the payload; the dtype must match `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor `{}` is stored as {}, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data = match self.dtype {
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub tensors: Vec<ArchiveTensor>,
}

impl WeightArchive {
    /// Every parameter followed by every buffer, in registration order.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut tensors: Vec<ArchiveTensor> = store
            .params()
            .map(|(n, e)| ArchiveTensor::from_tensor(n, &e.value))
            .collect();
        tensors.extend(store.buffers().map(|(n, t)| ArchiveTensor::from_tensor(n, t)));
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(too_big)?.to_le_bytes());
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name `{}`", t.name)));
            }
            if t.payload.len() != numel(&t.shape) * t.dtype.size_of() {
                return Err(Error::Format(format!(
                    "tensor `{}`: payload does not match its shape",
                    t.name
                )));
            }
            out.extend_from_slice(&u16::try_from(t.name.len()).map_err(too_big)?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.push(u8::try_from(t.shape.len()).map_err(too_big)?);
            for &d in &t.shape {
                out.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a weight archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            let code = r.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: unknown dtype code {code}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let size = shape
                .iter()
                .try_fold(dtype.size_of(), |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: size overflows")))?;
            let payload = r.take(size)?.to_vec();
            tensors.push(ArchiveTensor {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Overwrites every tensor of `store` (built from a config) with the
    /// archived value. Fails on the first store tensor that is missing or
    /// differs in shape or dtype, and on archive tensors the store lacks.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = store
            .params()
            .map(|(n, e)| (n.to_string(), e.value.shape().to_vec()))
            .chain(store.buffers().map(|(n, t)| (n.to_string(), t.shape().to_vec())))
            .collect();
        for (name, shape) in &expected {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` {shape:?} is missing from the archive")))?;
            if &t.shape != shape || t.dtype != T::DTYPE {
                return Err(Error::Format(format!(
                    "tensor `{name}`: archive has {} {:?}, config expects {} {shape:?}",
                    t.dtype,
                    t.shape,
                    T::DTYPE
                )));
            }
        }
        let known: HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(extra) = self.tensors.iter().find(|t| !known.contains(t.name.as_str())) {
            return Err(Error::Format(format!(
                "tensor `{}` {:?} is in the archive but not in the config",
                extra.name, extra.shape
            )));
        }
        for t in &self.tensors {
            let value = t.to_tensor::<T>()?;
            if let Ok(p) = store.get_mut(&t.name) {
                *p = value;
            } else {
                *store.buffer_mut(&t.name)? = value;
            }
        }
        Ok(())
    }
}

fn too_big<E>(_: E) -> Error {
    Error::Format("value too large for the archive format".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("archive truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
