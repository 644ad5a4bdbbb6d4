//! Single-file tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BBTENSOR" | version u32 | kind str | spec_hash str
//! nbits u32 | bits u32 × nbits | group_size u64
//! nsections u32 | per section: name str, ndim u32, dims u64 × ndim, offset u64, bytes u64
//! data: f64 LE, sections back to back
//! ```
//!
//! `str` is a u16 length followed by UTF-8 bytes; offsets are relative to the
//! start of the data block.

use std::path::Path;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"BBTENSOR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub spec_hash: String,
    pub bits: Vec<u32>,
    pub group_size: u64,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.spec_hash);
        out.extend_from_slice(&(self.bits.len() as u32).to_le_bytes());
        for b in &self.bits {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&self.group_size.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let bytes = 8 * s.data.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&bytes.to_le_bytes());
            offset += bytes;
        }
        for s in &self.sections {
            for x in &s.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |detail: String| CliError::Container {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(&fail)? != MAGIC {
            return Err(fail("bad magic bytes".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let kind = r.string().map_err(&fail)?;
        let spec_hash = r.string().map_err(&fail)?;
        let nbits = r.u32().map_err(&fail)? as usize;
        let bits = (0..nbits).map(|_| r.u32()).collect::<std::result::Result<_, _>>().map_err(&fail)?;
        let group_size = r.u64().map_err(&fail)?;
        let nsections = r.u32().map_err(&fail)? as usize;
        let mut table = Vec::with_capacity(nsections);
        for _ in 0..nsections {
            let name = r.string().map_err(&fail)?;
            let ndim = r.u32().map_err(&fail)? as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<_, _>>()
                .map_err(&fail)?;
            let offset = r.u64().map_err(&fail)?;
            let len = r.u64().map_err(&fail)?;
            let numel = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            if numel.and_then(|n| n.checked_mul(8)) != Some(len) {
                return Err(fail(format!("section `{name}` declares {len} bytes for shape {shape:?}")));
            }
            table.push((name, shape, offset, len));
        }
        let data = &bytes[r.pos..];
        let declared: u64 = table.iter().map(|t| t.3).sum();
        if declared != data.len() as u64 {
            return Err(fail(format!(
                "header declares {declared} data bytes, file holds {}",
                data.len()
            )));
        }
        let mut expected = 0u64;
        let mut sections = Vec::with_capacity(nsections);
        for (name, shape, offset, len) in table {
            if offset != expected {
                return Err(fail(format!("section `{name}` at offset {offset}, expected {expected}")));
            }
            expected += len;
            let raw = &data[offset as usize..(offset + len) as usize];
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            sections.push(Section {
                name,
                shape,
                data: values,
            });
        }
        Ok(Self {
            kind,
            spec_hash,
            bits,
            group_size,
            sections,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated header at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "non-UTF-8 string".to_string())
    }
}
