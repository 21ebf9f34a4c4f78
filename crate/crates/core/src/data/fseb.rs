//! FSEB embedding files.
//!
//! Layout, all integers little-endian, no padding:
//!
//! ```text
//! "FSEB" 0x01
//! u32 dim
//! u32 n_classes
//! n_classes × { u64 class_id, u32 count, count·dim × f32 }
//! ```
//!
//! Classes are written in ascending id order, so equal datasets encode to
//! equal bytes. A sidecar `<path>.manifest` of `key: value` lines describes
//! the file; readers never require it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::EmbeddingDataset;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSEB";
pub const VERSION: u8 = 1;

pub fn encode(ds: &EmbeddingDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + ds.n_vectors() * ds.dim() * 4 + ds.n_classes() * 12);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes() as u32).to_le_bytes());
    for (id, vecs) in ds.classes() {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&(vecs.len() as u32).to_le_bytes());
        for x in vecs.iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Byte cursor that reports how far it got when input runs out.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::corrupt(
                self.buf.len() as u64,
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.saturating_mul(4), what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::corrupt(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}, expected \"FSEB\"")));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FSEB version {version}")));
    }
    let dim = r.u32("dim")? as usize;
    let n_classes = r.u32("class count")? as usize;
    if dim == 0 {
        return Err(Error::Schema("dim is zero".into()));
    }
    if n_classes == 0 {
        return Err(Error::Schema("empty class list".into()));
    }
    let mut classes = BTreeMap::new();
    for _ in 0..n_classes {
        let at = r.pos();
        let id = r.u64("class id")?;
        let count = r.u32("vector count")? as usize;
        let flat = r.f32s(count.saturating_mul(dim), "feature values")?;
        let vecs: Vec<Vec<f32>> = flat.chunks_exact(dim).map(<[f32]>::to_vec).collect();
        if classes.insert(id, vecs).is_some() {
            return Err(Error::Schema(format!("class {id} appears twice (record at byte {at})")));
        }
    }
    r.finish()?;
    EmbeddingDataset::new(dim, classes)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    decode(&fs::read(path)?)
}

pub fn save_embeddings(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(ds))?;
    Ok(())
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes the file plus its manifest.
pub fn save_embeddings_with_source(
    ds: &EmbeddingDataset,
    path: impl AsRef<Path>,
    source: &str,
) -> Result<()> {
    let path = path.as_ref();
    save_embeddings(ds, path)?;
    let manifest = format!(
        "format: FSEB\nversion: {VERSION}\ndim: {}\nclasses: {}\nvectors: {}\nfingerprint: {}\nsource: {}\n",
        ds.dim(),
        ds.n_classes(),
        ds.n_vectors(),
        ds.fingerprint(),
        source.replace('\n', " ")
    );
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

/// Reads the sidecar manifest if there is one.
pub fn read_manifest(path: impl AsRef<Path>) -> Option<BTreeMap<String, String>> {
    let text = fs::read_to_string(manifest_path(path.as_ref())).ok()?;
    Some(
        text.lines()
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect(),
    )
}
