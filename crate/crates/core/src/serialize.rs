//! Binary container shared by the weights ("MGIC") and capture ("MGIG")
//! files. Little-endian throughout; round trips are bit-exact.
//!
//! Layout: magic (4 bytes), version (u32), entry count (u32), then per entry
//! name length (u32) + UTF-8 name, rank (u32), dims (u32 each), and the raw
//! f64 payload.

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"MGIC";
pub const CAPTURE_MAGIC: [u8; 4] = *b"MGIG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        let e = Entry { name: name.into(), dims, data };
        debug_assert_eq!(e.dims.iter().product::<usize>(), e.data.len());
        e
    }

    /// Structural marker with no payload (rank 1, dim 0).
    pub fn marker(name: impl Into<String>) -> Self {
        Entry { name: name.into(), dims: vec![0], data: vec![] }
    }
}

pub fn encode(magic: [u8; 4], entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], expect_magic: [u8; 4]) -> Result<Vec<Entry>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<usize> {
        if bytes.len() < *pos + n {
            return Err(Error::Format {
                detail: format!("truncated while reading {what}"),
                offset: *pos as u64,
            });
        }
        let at = *pos;
        *pos += n;
        Ok(at)
    };
    let read_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
        let at = take(pos, 4, what)?;
        Ok(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()))
    };

    let at = take(&mut pos, 4, "magic")?;
    if bytes[at..at + 4] != expect_magic {
        return Err(Error::Format {
            detail: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[at..at + 4]),
                String::from_utf8_lossy(&expect_magic)
            ),
            offset: 0,
        });
    }
    let version = read_u32(&mut pos, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, supported: FORMAT_VERSION });
    }
    let count = read_u32(&mut pos, "entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let name_len = read_u32(&mut pos, "name length")? as usize;
        let at = take(&mut pos, name_len, "entry name")?;
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| Error::Format {
                detail: format!("entry {i} name is not UTF-8"),
                offset: at as u64,
            })?
            .to_string();
        let rank = read_u32(&mut pos, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut pos, "dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        let at = take(&mut pos, numel * 8, "tensor payload")?;
        let data = bytes[at..at + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            detail: format!("{} trailing bytes after last entry", bytes.len() - pos),
            offset: pos as u64,
        });
    }
    Ok(entries)
}

/// FNV-1a over a byte stream; used for architecture/weight fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
