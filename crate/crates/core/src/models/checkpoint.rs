//! Little-endian binary checkpoint.
//!
//! ```text
//! magic    b"RIBSUPCK"
//! version  u32 (= 1)
//! config   u32 byte length, UTF-8 text
//! count    u32 number of parameters
//! per parameter:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u64 extents
//!   product(extents) × f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RIBSUPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Checkpoint { config: config.into(), params: Vec::new() }
    }

    /// Appends every parameter of `module` under `prefix`.
    pub fn add_module<T: Scalar, M: Module<T>>(&mut self, prefix: &str, module: &M) {
        module.visit_params(prefix, &mut |name, p| {
            self.params.push((name.to_string(), p.value.cast()));
        });
    }

    /// Copies stored values into `module`; every parameter of the module
    /// must be present with a matching shape.
    pub fn load_module<T: Scalar, M: Module<T>>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut res = Ok(());
        module.visit_params_mut(prefix, &mut |name, p| {
            if res.is_err() {
                return;
            }
            match self.params.iter().find(|(n, _)| n == name) {
                None => res = Err(Error::Invalid(format!("checkpoint has no parameter '{name}'"))),
                Some((_, t)) if t.shape() != p.value.shape() => {
                    res = Err(Error::shape("load_checkpoint", name.to_string(), format!("{:?}", p.value.shape()), format!("{:?}", t.shape())))
                }
                Some((_, t)) => p.value = t.cast(),
            }
        });
        res
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::format(origin, "tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::format(origin, format!("{name}: {e}")))?;
            params.push((name, t));
        }
        if !r.buf.is_empty() {
            return Err(Error::format(origin, "trailing bytes after last parameter"));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.origin, "name is not UTF-8"))
    }
}
