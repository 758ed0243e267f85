//! Binary mask file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"PMSK"
//! u32    version (1)
//! u32    layer count
//! per layer:
//!   u32  name length in bytes, then UTF-8 name
//!   u64  bit length
//!   u64  x ceil(bit length / 64) words; bit i of the mask is bit (i % 64)
//!        of word (i / 64); 1 = kept, 0 = pruned; padding bits are 0
//! ```

use std::fs;
use std::path::Path;

use super::PruneMask;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PMSK";
const VERSION: u32 = 1;

pub fn write_masks(masks: &[PruneMask], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(masks.len() as u32).to_le_bytes());
    for m in masks {
        out.extend_from_slice(&(m.layer_name().len() as u32).to_le_bytes());
        out.extend_from_slice(m.layer_name().as_bytes());
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for w in m.words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: "truncated mask file".into(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<Vec<PruneMask>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let mut masks = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| corrupt("layer name is not UTF-8"))?
            .to_string();
        let len = cur.u64()? as usize;
        let mut words = Vec::with_capacity(len.div_ceil(64));
        for _ in 0..len.div_ceil(64) {
            words.push(cur.u64()?);
        }
        masks.push(PruneMask::from_words(name, len, words).map_err(|e| corrupt(&e.to_string()))?);
    }
    if cur.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(masks)
}
