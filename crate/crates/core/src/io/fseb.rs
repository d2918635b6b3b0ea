//! FSEB embedding store files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FSEB"            4 bytes magic
//! version           u16 (= 1)
//! count             u32
//! dim               u32
//! provenance        u32 byte length + UTF-8
//! count records:
//!   id              u32 byte length + UTF-8
//!   vector          dim x f32
//! ```

use std::path::Path;

use crate::encoder::FrozenEmbeddingStore;
use crate::error::{FormatError, Result};
use crate::io::bin::{put_string, ByteReader};

pub const MAGIC: &[u8; 4] = b"FSEB";
pub const VERSION: u16 = 1;

/// Ids longer than this are treated as a framing error rather than data.
pub const MAX_ID_LEN: usize = 4096;

/// Bytes taken by the fixed header and the provenance string.
pub fn header_len(provenance: &str) -> usize {
    4 + 2 + 4 + 4 + 4 + provenance.len()
}

pub fn encode(store: &FrozenEmbeddingStore) -> Vec<u8> {
    let dim = store.dim();
    let mut out = Vec::with_capacity(
        header_len(store.provenance())
            + store.len() * (4 + dim * 4)
            + store.ids().iter().map(String::len).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    put_string(&mut out, store.provenance());
    for (id, vector) in store.iter() {
        put_string(&mut out, id);
        for v in vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<FrozenEmbeddingStore, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(FormatError::DimensionMismatch("header dim is 0".into()));
    }
    let provenance = r.string("provenance")?;

    let mut ids = Vec::with_capacity(count.min(1 << 20));
    let mut data = Vec::with_capacity(count.min(1 << 20) * dim);
    for rec in 0..count {
        let id_len = r.u32()? as usize;
        if id_len == 0 || id_len > MAX_ID_LEN {
            return Err(FormatError::DimensionMismatch(format!(
                "record {rec} has implausible id length {id_len}; payload framing disagrees with header dim {dim}"
            )));
        }
        let raw = r.take(id_len)?;
        let id = String::from_utf8(raw.to_vec()).map_err(|_| {
            FormatError::DimensionMismatch(format!(
                "record {rec} id is not UTF-8; payload framing disagrees with header dim {dim}"
            ))
        })?;
        ids.push(id);
        for _ in 0..dim {
            data.push(r.f32()?);
        }
    }
    if r.remaining() != 0 {
        return Err(FormatError::DimensionMismatch(format!(
            "{} bytes remain after {count} records of dim {dim}",
            r.remaining()
        )));
    }
    FrozenEmbeddingStore::from_parts(provenance, dim, ids, data)
}

pub fn write(path: impl AsRef<Path>, store: &FrozenEmbeddingStore) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<FrozenEmbeddingStore> {
    let bytes = std::fs::read(path)?;
    Ok(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(n: usize, dim: usize) -> FrozenEmbeddingStore {
        let ids = (0..n).map(|i| format!("img_{i:03}")).collect();
        let data = (0..n * dim).map(|i| 0.25 + (i as f32) * 0.5).collect();
        FrozenEmbeddingStore::from_parts("unit-test".into(), dim, ids, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store(10, 6);
        let bytes = encode(&s);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn size_matches_layout() {
        let s = store(10, 128);
        let ids: usize = s.ids().iter().map(|id| 4 + id.len()).sum();
        assert_eq!(encode(&s).len(), header_len("unit-test") + ids + 10 * 128 * 4);
    }

    #[test]
    fn rejects_wrong_magic() {
        let mut bytes = encode(&store(2, 3));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn rejects_unsupported_version() {
        let mut bytes = encode(&store(2, 3));
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert_eq!(err, FormatError::UnsupportedVersion(2));
        assert!(err.to_string().contains("unsupported version"));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode(&store(4, 3));
        for cut in [3, 10, bytes.len() - 1, bytes.len() - 7] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert_eq!(err, FormatError::Truncated, "cut at {cut}");
            assert_eq!(err.to_string(), "unexpected end of payload");
        }
    }

    #[test]
    fn rejects_header_dim_disagreeing_with_payload() {
        let bytes = encode(&store(10, 4));
        for wrong in [3u32, 5] {
            let mut patched = bytes.clone();
            patched[10..14].copy_from_slice(&wrong.to_le_bytes());
            let err = decode(&patched).unwrap_err();
            assert!(matches!(err, FormatError::DimensionMismatch(_)), "dim {wrong}: {err}");
            assert!(err.to_string().contains("dimension mismatch"));
        }
    }

    #[test]
    fn rejects_duplicate_ids() {
        let data = vec![0.0; 4];
        let err = FrozenEmbeddingStore::from_parts("p".into(), 2, vec!["a".into(), "a".into()], data).unwrap_err();
        assert_eq!(err, FormatError::DuplicateId("a".into()));
    }
}
