//! SMX1 matrix files and atomic file writes.
//!
//! Layout: the magic bytes `SMX1`, `rows` and `cols` as little-endian `u32`,
//! then `rows × cols` little-endian IEEE-754 `f64` values in row-major order.
//! No padding and no checksum.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const SMX_MAGIC: &[u8; 4] = b"SMX1";
const HEADER_LEN: usize = 12;

pub fn encode_matrix(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(SMX_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<DenseMatrix> {
    let truncated = |expected: usize| Error::TruncatedFile {
        path: path.to_path_buf(),
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < SMX_MAGIC.len() {
        return Err(truncated(HEADER_LEN));
    }
    if &bytes[..4] != SMX_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: SMX_MAGIC.to_vec(),
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidDimensions { rows, cols });
    }
    let expected = HEADER_LEN + 8 * rows * cols;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            extra: (bytes.len() - expected) as u64,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = DenseMatrix::from_vec(rows, cols, data)?;
    m.ensure_finite("read_matrix")?;
    Ok(m)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(m))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_matrix(&bytes, path)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Serializes `rows` as CSV (header from the record type) and writes atomically.
pub(crate) fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i2.smx");
        let m = DenseMatrix::from_rows(&[[1.0, -0.0], [1e-300, std::f64::consts::PI]]);
        write_matrix(&p, &m).unwrap();
        let r = read_matrix(&p).unwrap();
        let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r), bits(&m));
        assert_eq!(fs::read(&p).unwrap().len(), 12 + 4 * 8);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_matrix(&DenseMatrix::identity(2));
        assert_eq!(&bytes[..4], b"SMX1");
        assert_eq!(&bytes[4..12], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_matrix(&DenseMatrix::identity(2));
        bytes[3] = b'2';
        assert!(matches!(decode_matrix(&bytes, Path::new("x")), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_matrix(&DenseMatrix::identity(2));
        for cut in [2, 7, 12, 20, bytes.len() - 1] {
            assert!(matches!(
                decode_matrix(&bytes[..cut], Path::new("x")),
                Err(Error::TruncatedFile { .. })
            ));
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_matrix(&DenseMatrix::identity(2));
        bytes.push(0);
        assert!(matches!(decode_matrix(&bytes, Path::new("x")), Err(Error::TrailingBytes { .. })));
    }
}
