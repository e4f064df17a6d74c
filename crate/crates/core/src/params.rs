//! Named parameter collections and the binary checkpoint format.

use std::io::Write;
use std::path::Path;

use ptu_tensor::Tensor;

use crate::error::{config, io_err, Error, Result};

const MAGIC: &[u8; 4] = b"PTUC";
const VERSION: u16 = 1;

/// Ordered, name-addressed tensors. Names are `l{layer}.{role}` for network
/// layers, so the owning layer is recoverable from a checkpoint alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Layer number encoded in a parameter name, if it follows `l{n}.`.
    pub fn layer_of(name: &str) -> Option<usize> {
        name.strip_prefix('l')?.split('.').next()?.parse().ok()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Bitwise equality of every tensor, including NaN payloads.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| {
                    na == nb
                        && a.shape() == b.shape()
                        && a.data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 + 4 * self.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Config(format!("rank too large for {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Config(format!("dimension too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            file,
        };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, expected PTUC"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported checkpoint version {version}")));
        }
        let mut set = ParamSet::new();
        while r.pos < bytes.len() {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error(at + 2, "parameter name is not utf-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u32()? as usize;
                if d == 0 {
                    return Err(r.error(r.pos - 4, "zero dimension"));
                }
                shape.push(d);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(4 * n)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if set.index_of(&name).is_some() {
                return Err(r.error(at, format!("duplicate parameter {name}")));
            }
            set.push(name, Tensor::from_vec(shape, data));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&bytes).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Fails unless `other` has a tensor of the same shape under `name`.
    pub(crate) fn expect_shape(
        &self,
        name: &str,
        shape: &[usize],
        layer: usize,
    ) -> Result<&Tensor> {
        match self.get(name) {
            Some(t) if t.shape() == shape => Ok(t),
            Some(t) => config(format!(
                "layer {layer}: source parameter {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )),
            None => config(format!("layer {layer}: source has no parameter {name}")),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                format!(
                    "truncated: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
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
