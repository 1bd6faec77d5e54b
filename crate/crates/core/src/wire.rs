//! Shared binary container for tree-like files.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   5 bytes  b"PERC1"
//! version u16      currently 1
//! kind    u8       0 = sampled tree, 1 = pruned tree
//! hlen    u32      header length in bytes
//! header  hlen     JSON (kind-specific)
//! nlevels u32
//! level   repeated: count u64, count x u64 sorted indices,
//!                   ceil(count/8) mark bytes (LSB-first; absent for kind 1)
//! check   u64      FNV-1a over everything above
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PERC1";
pub const VERSION: u16 = 1;
pub const KIND_TREE: u8 = 0;
pub const KIND_PRUNED: u8 = 1;

/// FNV-1a 64-bit hash. Used as a file checksum and as the manifest
/// fingerprint; it detects corruption and identifies content, nothing
/// cryptographic.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn bitset_len(n: usize) -> usize {
    n.div_ceil(8)
}

pub fn get_bit(bits: &[u8], i: usize) -> bool {
    bits[i / 8] & (1 << (i % 8)) != 0
}

pub fn set_bit(bits: &mut [u8], i: usize, v: bool) {
    if v {
        bits[i / 8] |= 1 << (i % 8);
    } else {
        bits[i / 8] &= !(1 << (i % 8));
    }
}

/// One serialized level: sorted indices plus an optional mark bitset.
pub struct WireLevel {
    pub indices: Vec<u64>,
    pub marks: Option<Vec<u8>>,
}

pub fn encode(kind: u8, header_json: &[u8], levels: &[WireLevel]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    let hlen = u32::try_from(header_json.len())
        .map_err(|_| Error::Format("header too large".into()))?;
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(header_json);
    let nlevels = u32::try_from(levels.len())
        .map_err(|_| Error::Format("too many levels".into()))?;
    out.extend_from_slice(&nlevels.to_le_bytes());
    for level in levels {
        out.extend_from_slice(&(level.indices.len() as u64).to_le_bytes());
        for &idx in &level.indices {
            out.extend_from_slice(&idx.to_le_bytes());
        }
        if let Some(marks) = &level.marks {
            debug_assert_eq!(marks.len(), bitset_len(level.indices.len()));
            out.extend_from_slice(marks);
        }
    }
    let check = fnv1a(&out);
    out.extend_from_slice(&check.to_le_bytes());
    Ok(out)
}

pub struct Decoded {
    pub kind: u8,
    pub header: Vec<u8>,
    pub levels: Vec<WireLevel>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

/// Decode and verify a container. `with_marks` states whether levels carry
/// mark bitsets (kind 0 does, kind 1 does not).
pub fn decode(bytes: &[u8], expect_kind: u8) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Format("truncated file".into()));
    }
    let (body, check_bytes) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(check_bytes.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Format("checksum mismatch: file is corrupt".into()));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a PERC1 file (bad magic)".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported file version {version} (expected {VERSION})"
        )));
    }
    let kind = cur.take(1)?[0];
    if kind != expect_kind {
        let what = |k| match k {
            KIND_TREE => "a sampled tree",
            KIND_PRUNED => "a pruned tree",
            _ => "an unknown kind",
        };
        return Err(Error::Format(format!(
            "file holds {}, expected {}",
            what(kind),
            what(expect_kind)
        )));
    }
    let hlen = cur.u32()? as usize;
    let header = cur.take(hlen)?.to_vec();
    let nlevels = cur.u32()? as usize;
    if nlevels > 1 << 16 {
        return Err(Error::Format(format!("implausible level count {nlevels}")));
    }
    let with_marks = kind == KIND_TREE;
    let mut levels = Vec::with_capacity(nlevels);
    for _ in 0..nlevels {
        let count = cur.u64()? as usize;
        if count.saturating_mul(8) > body.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let raw = cur.take(count * 8)?;
        let indices: Vec<u64> = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let marks = if with_marks {
            Some(cur.take(bitset_len(count))?.to_vec())
        } else {
            None
        };
        levels.push(WireLevel { indices, marks });
    }
    if cur.pos != body.len() {
        return Err(Error::Format("trailing bytes after levels".into()));
    }
    Ok(Decoded {
        kind,
        header,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let levels = vec![
            WireLevel {
                indices: vec![0],
                marks: Some(vec![1]),
            },
            WireLevel {
                indices: vec![0, 3],
                marks: Some(vec![0b10]),
            },
        ];
        let bytes = encode(KIND_TREE, br#"{"x":1}"#, &levels).unwrap();
        let dec = decode(&bytes, KIND_TREE).unwrap();
        assert_eq!(dec.levels.len(), 2);
        assert_eq!(dec.levels[1].indices, vec![0, 3]);
        assert_eq!(dec.header, br#"{"x":1}"#.to_vec());

        // Truncation, magic damage, bit flips, kind mismatch all error.
        assert!(decode(&bytes[..bytes.len() - 3], KIND_TREE).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, KIND_TREE).is_err());
        let mut flip = bytes.clone();
        flip[10] ^= 0x40;
        assert!(decode(&flip, KIND_TREE).is_err());
        assert!(decode(&bytes, KIND_PRUNED).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
