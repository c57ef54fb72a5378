//! Self-describing binary archive for model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "F2VA" | u32 format version
//! u32 kind length | kind (utf-8)
//! u64 config length | config (utf-8 JSON)
//! u32 entry count
//! per entry: u16 name length | name | u8 dtype (1 = f64) | u8 rank | rank x u64 dims | data
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Entries are written in name order, so equal archives serialise to equal
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"F2VA";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub type Entries = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub config: serde_json::Value,
    pub entries: Entries,
}

impl Archive {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.entries.insert(name.to_string(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("{} archive has no entry {name}", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.entries {
            let expected: usize = shape.iter().product();
            if expected != data.len() {
                return Err(Error::Checkpoint(format!(
                    "entry {name}: shape {shape:?} but {} values",
                    data.len()
                )));
            }
            if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("entry {name} name or rank too large")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind_len = r.u32()? as usize;
        let kind = String::from_utf8(r.take(kind_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config_len = r.u64()? as usize;
        let config = serde_json::from_slice(r.take(config_len)?)?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("entry {name}: unknown dtype code {dtype}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.insert(name, (shape, data));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after entries".into()));
        }
        Ok(Self {
            kind,
            config,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the archive kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let a = Self::load(path)?;
        if a.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{}: expected a {kind} checkpoint, found {}",
                path.display(),
                a.kind
            )));
        }
        Ok(a)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.buf[self.pos..end];
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
