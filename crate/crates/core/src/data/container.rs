//! The TAGD binary container: named u8/f64 tensors plus a UTF-8 metadata
//! chunk. All integers are little-endian.
//!
//! ```text
//! "TAGD" | version u32 | count u32
//! count × { name_len u16 | name | dtype u8 | ndim u8 | dims u64[ndim] | values }
//! meta_len u64 | metadata
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TAGD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl Values {
    fn dtype(&self) -> u8 {
        match self {
            Values::U8(_) => 0,
            Values::F64(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            Values::U8(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Values,
}

/// An ordered list of entries. Bitwise equality survives a round trip
/// (NaN payloads included).
#[derive(Clone, Debug, Default)]
pub struct Container {
    pub entries: Vec<Entry>,
    pub metadata: String,
}

impl PartialEq for Container {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes().ok() == other.to_bytes().ok()
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_u8(&mut self, name: &str, dims: &[usize], values: Vec<u8>) {
        self.entries.push(Entry {
            name: name.into(),
            dims: dims.to_vec(),
            values: Values::U8(values),
        });
    }

    pub fn push_f64(&mut self, name: &str, dims: &[usize], values: Vec<f64>) {
        self.entries.push(Entry {
            name: name.into(),
            dims: dims.to_vec(),
            values: Values::F64(values),
        });
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) {
        self.push_f64(name, t.dims(), t.data().to_vec());
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("container has no entry {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.require(name)?;
        match &e.values {
            Values::F64(v) => Tensor::new(&e.dims, v.clone()),
            Values::U8(_) => Err(Error::Data(format!("entry {name:?} is not f64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let e = self.require(name)?;
        match &e.values {
            Values::U8(v) => Ok((&e.dims, v)),
            Values::F64(_) => Err(Error::Data(format!("entry {name:?} is not u8"))),
        }
    }

    /// Metadata parsed as `key=value` lines.
    pub fn meta_map(&self) -> BTreeMap<String, String> {
        parse_meta(&self.metadata)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::contract("too many container entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            if !e.name.is_ascii() || e.name.len() > u16::MAX as usize {
                return Err(Error::contract(format!("entry name {:?} must be short ASCII", e.name)));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::contract(format!("duplicate entry name {:?}", e.name)));
            }
            if e.dims.len() > u8::MAX as usize {
                return Err(Error::contract(format!("entry {:?} has too many dims", e.name)));
            }
            let numel: usize = e.dims.iter().product();
            if numel != e.values.len() {
                return Err(Error::shape(format!(
                    "entry {:?}: dims {:?} hold {numel} values, got {}",
                    e.name,
                    e.dims,
                    e.values.len()
                )));
            }
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.values.dtype());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.values {
                Values::U8(v) => out.extend_from_slice(v),
                Values::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_bits().to_le_bytes());
                    }
                }
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected TAGD"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .ok()
                .filter(|s| s.is_ascii())
                .ok_or_else(|| Error::format(start as u64, "entry name is not ASCII"))?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.u64()?;
                dims.push(usize::try_from(d).map_err(|_| Error::format(r.pos as u64 - 8, "dimension overflows"))?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(dtype_at as u64, "element count overflows"))?;
            let values = match dtype {
                0 => Values::U8(r.take(numel)?.to_vec()),
                1 => {
                    let size = numel
                        .checked_mul(8)
                        .ok_or_else(|| Error::format(dtype_at as u64, "payload size overflows"))?;
                    let raw = r.take(size)?;
                    Values::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                            .collect(),
                    )
                }
                other => return Err(Error::format(dtype_at as u64, format!("unknown dtype {other}"))),
            };
            entries.push(Entry { name, dims, values });
        }
        let meta_at = r.pos;
        let len = usize::try_from(r.u64()?).map_err(|_| Error::format(meta_at as u64, "metadata too long"))?;
        let metadata = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(meta_at as u64 + 8, "metadata is not UTF-8"))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after metadata"));
        }
        Ok(Container { entries, metadata })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn parse_meta(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn format_meta<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
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
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
