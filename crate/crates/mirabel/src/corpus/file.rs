//! Binary embedding file format.
//!
//! Layout, all integers little-endian:
//! magic `MIRB` (4 bytes), version u16 = 1, dim u32, count u64,
//! flags u8 (bit 0 = normalized), then count x dim f32 row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::EmbeddingMatrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MIRB";
const VERSION: u16 = 1;
const FLAG_NORMALIZED: u8 = 0x01;
const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 1;

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN + matrix.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.count() as u64).to_le_bytes());
    buf.push(if matrix.is_normalized() { FLAG_NORMALIZED } else { 0 });
    for v in matrix.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    let flags = bytes[18];
    if dim == 0 {
        return Err(Error::BadDim { dim });
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or(Error::BadDim { dim })?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: body.len(),
        });
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let matrix = EmbeddingMatrix::new(dim, data)?;
    // a file claiming normalization must actually be normalized
    if flags & FLAG_NORMALIZED != 0 && !matrix.is_normalized() {
        return Err(Error::NonFiniteEmbedding);
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_bit_exact() {
        let data: Vec<f32> = (0..40).map(|i| (i as f32) * 0.125 - 2.0).collect();
        let m = EmbeddingMatrix::new(8, data).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_embeddings(&m, f.path()).unwrap();
        let loaded = load_embeddings(f.path()).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn truncated_file_rejected() {
        let m = EmbeddingMatrix::new(8, vec![0.5; 40]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_embeddings(&m, f.path()).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        bytes.truncate(bytes.len() - 10); // mid-row
        assert!(matches!(decode(&bytes), Err(Error::Truncated { .. })));
    }

    #[test]
    fn count_mismatch_rejected() {
        // header declares count=10 but body holds 9 rows
        let m = EmbeddingMatrix::new(4, vec![0.25; 36]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_embeddings(&m, f.path()).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        bytes[10..18].copy_from_slice(&10u64.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 160);
                assert_eq!(found, 144);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(decode(b"NOPE"), Err(Error::BadMagic)));
        let m = EmbeddingMatrix::new(4, vec![0.0; 4]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_embeddings(&m, f.path()).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic)));
    }

    proptest! {
        #[test]
        fn round_trip_any_finite_values(rows in proptest::collection::vec(
            proptest::collection::vec(-1e30f32..1e30, 8), 0..20)) {
            let data: Vec<f32> = rows.iter().flatten().copied().collect();
            let m = EmbeddingMatrix::new(8, data).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            save_embeddings(&m, f.path()).unwrap();
            prop_assert_eq!(m, load_embeddings(f.path()).unwrap());
        }
    }
}
