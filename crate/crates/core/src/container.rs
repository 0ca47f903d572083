//! Single-file tensor container used for checkpoints and masks.
//!
//! Byte layout:
//!
//! ```text
//! offset 0   8 bytes   magic "PRNLAB01"
//! offset 8   8 bytes   header length H, u64 little-endian
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          payload: entries back to back, little-endian
//! ```
//!
//! The header is `{"manifest": {..}, "entries": {name: {dtype, rows, cols, offset, nbytes}}}`
//! where `offset` is relative to the start of the payload. `dtype` is `"f32"`
//! (4 bytes per element) or `"u8"` (1 byte per element, used for masks).
//! Entries are keyed in a sorted map so the same contents always serialize to
//! the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const MAGIC: &[u8; 8] = b"PRNLAB01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: BTreeMap<String, Value>,
    entries: BTreeMap<String, EntryHeader>,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F32(Tensor2D),
    U8 { rows: usize, cols: usize, bytes: Vec<u8> },
}

/// In-memory view of a container file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    manifest: BTreeMap<String, Value>,
    entries: BTreeMap<String, Payload>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn save_tensor(&mut self, name: &str, tensor: &Tensor2D) -> Result<()> {
        self.insert(name, Payload::F32(tensor.clone()))
    }

    pub fn load_tensor(&self, name: &str) -> Result<Tensor2D> {
        match self.entries.get(name) {
            Some(Payload::F32(t)) => Ok(t.clone()),
            Some(Payload::U8 { .. }) => Err(Error::InvalidParameter(format!("entry `{name}` is u8, not f32"))),
            None => Err(Error::NotFound(format!("tensor `{name}`"))),
        }
    }

    pub fn save_bytes(&mut self, name: &str, rows: usize, cols: usize, bytes: Vec<u8>) -> Result<()> {
        if bytes.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, actual: bytes.len() });
        }
        self.insert(name, Payload::U8 { rows, cols, bytes })
    }

    pub fn load_bytes(&self, name: &str) -> Result<(usize, usize, &[u8])> {
        match self.entries.get(name) {
            Some(Payload::U8 { rows, cols, bytes }) => Ok((*rows, *cols, bytes)),
            Some(Payload::F32(_)) => Err(Error::InvalidParameter(format!("entry `{name}` is f32, not u8"))),
            None => Err(Error::NotFound(format!("byte entry `{name}`"))),
        }
    }

    fn insert(&mut self, name: &str, payload: Payload) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Duplicate(name.to_string()));
        }
        self.entries.insert(name.to_string(), payload);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_manifest(&mut self, key: &str, value: Value) {
        self.manifest.insert(key.to_string(), value);
    }

    pub fn manifest(&self, key: &str) -> Option<&Value> {
        self.manifest.get(key)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, p) in &self.entries {
            let offset = payload.len();
            let (dtype, rows, cols) = match p {
                Payload::F32(t) => {
                    for v in t.data() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    (DType::F32, t.rows(), t.cols())
                }
                Payload::U8 { rows, cols, bytes } => {
                    payload.extend_from_slice(bytes);
                    (DType::U8, *rows, *cols)
                }
            };
            entries.insert(name.clone(), EntryHeader { dtype, rows, cols, offset, nbytes: payload.len() - offset });
        }
        let header = serde_json::to_vec(&Header { manifest: self.manifest.clone(), entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 {
            return Err(Error::Corrupt(format!("file is {} bytes, shorter than the 16-byte preamble", buf.len())));
        }
        if &buf[..8] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| Error::Corrupt("header length overflows".into()))?;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= buf.len())
            .ok_or_else(|| Error::Corrupt(format!("header length {hlen} runs past end of file")))?;
        let header: Header = serde_json::from_slice(&buf[16..hend]).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let payload = &buf[hend..];
        let mut expected_end = 0usize;
        let mut entries = BTreeMap::new();
        for (name, h) in header.entries {
            let want = h
                .rows
                .checked_mul(h.cols)
                .and_then(|n| n.checked_mul(h.dtype.size()))
                .ok_or_else(|| Error::Corrupt(format!("entry `{name}`: size overflows")))?;
            if want != h.nbytes {
                return Err(Error::Corrupt(format!(
                    "entry `{name}`: {}x{} {:?} needs {want} bytes, header says {}",
                    h.rows, h.cols, h.dtype, h.nbytes
                )));
            }
            let end = h.offset.checked_add(h.nbytes).ok_or_else(|| Error::Corrupt(format!("entry `{name}`: offset overflows")))?;
            if end > payload.len() {
                return Err(Error::Corrupt(format!("entry `{name}` ends at {end}, payload has {} bytes", payload.len())));
            }
            expected_end = expected_end.max(end);
            let raw = &payload[h.offset..end];
            let p = match h.dtype {
                DType::F32 => {
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Payload::F32(Tensor2D::from_vec(h.rows, h.cols, data)?)
                }
                DType::U8 => Payload::U8 { rows: h.rows, cols: h.cols, bytes: raw.to_vec() },
            };
            entries.insert(name, p);
        }
        if expected_end != payload.len() {
            return Err(Error::Corrupt(format!("payload has {} bytes, entries cover {expected_end}", payload.len())));
        }
        Ok(Self { manifest: header.manifest, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
