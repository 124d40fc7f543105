//! IGT1 named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IGT1"                      4 bytes
//! entry count                 u32
//! per entry:
//!   name length               u16
//!   name                      UTF-8 bytes
//!   rank                      u8 (1..=3)
//!   dims                      rank x u64
//!   payload                   prod(dims) x f64, row-major
//! ```
//!
//! Names are unique and the file ends exactly after the last payload.

use std::path::Path;

use crate::error::{Error, FormatErrorKind as Kind, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IGT1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::format(
                Kind::InvalidName,
                0,
                format!("name of {} bytes exceeds the u16 length field", name.len()),
            ));
        }
        if self.get(&name).is_some() {
            return Err(Error::format(Kind::DuplicateName, 0, name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Looks up `name` and checks its shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::format(Kind::MissingTensor, 0, name))?;
        if t.shape() != shape {
            return Err(Error::format(
                Kind::ShapeMismatch,
                0,
                format!("{name}: expected {shape:?}, found {:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let i = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(i).1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|(n, t)| 3 + n.len() + 8 * (t.rank() + t.len())).sum();
        let mut out = Vec::with_capacity(8 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic = c.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(
                Kind::BadMagic,
                0,
                format!("expected {MAGIC:?}, found {magic:?}"),
            ));
        }
        let count = u32::from_le_bytes(c.take(4, "entry count")?.try_into().unwrap());
        let mut archive = Archive::new();
        for _ in 0..count {
            let entry_start = c.pos;
            let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
            let name_at = c.pos;
            let name = std::str::from_utf8(c.take(len, "name")?)
                .map_err(|e| Error::format(Kind::InvalidName, name_at, e.to_string()))?
                .to_owned();
            let rank_at = c.pos;
            let rank = c.take(1, "rank")?[0] as usize;
            if !(1..=3).contains(&rank) {
                return Err(Error::format(
                    Kind::InvalidRank,
                    rank_at,
                    format!("{name}: rank {rank}"),
                ));
            }
            let dims_at = c.pos;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(c.take(8, "dimension")?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| {
                    Error::format(Kind::SizeOverflow, dims_at, format!("{name}: dimension {d}"))
                })?);
            }
            let n_bytes = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| {
                    Error::format(Kind::SizeOverflow, dims_at, format!("{name}: shape {shape:?}"))
                })?;
            let payload = c.take(n_bytes, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if archive.get(&name).is_some() {
                return Err(Error::format(Kind::DuplicateName, entry_start, name));
            }
            archive.entries.push((name, Tensor::new(&shape, data)?));
        }
        if c.pos != bytes.len() {
            return Err(Error::format(
                Kind::TrailingBytes,
                c.pos,
                format!("{} bytes after the last entry", bytes.len() - c.pos),
            ));
        }
        Ok(archive)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::file(path, e))?)
    }

    /// Writes through a temporary file in the target directory, then renames.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                Kind::Truncated,
                self.pos,
                format!(
                    "{what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let wrap = |e| Error::file(path, e);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
    tmp.write_all(bytes).map_err(wrap)?;
    tmp.flush().map_err(wrap)?;
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}
