//! Binary feature matrices and atomic file output.
//!
//! Matrix layout, little-endian throughout:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `PEMB`               |
//! | 4      | 4    | u32 version (1)            |
//! | 8      | 8    | u64 rows                   |
//! | 16     | 8    | u64 cols                   |
//! | 24     | 4·rc | f32 values, row-major      |

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PEMB";
const MATRIX_VERSION: u32 = 1;
pub const MATRIX_HEADER_LEN: usize = 24;

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Cursor over a byte slice that reports the offset of every failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.at),
            ));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(0, format!("bad magic {got:02x?}")));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A u64 that must fit in `usize`.
    pub fn dim(&mut self) -> Result<usize> {
        let at = self.at as u64;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(at, format!("dimension {v} too large")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Dense row-major matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Rounds each value to f32 storage precision.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(r) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Shape(format!("row {r} has a different length")));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(rows.len(), cols, data)
    }

    /// Rows widened to f64 for computation.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        if self.cols == 0 {
            return vec![Vec::new(); self.rows];
        }
        self.data
            .chunks_exact(self.cols)
            .map(|r| r.iter().map(|&v| f64::from(v)).collect())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a matrix file; any deviation from the layout is rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != MATRIX_VERSION {
            return Err(Error::format(4, format!("unsupported matrix version {version}")));
        }
        let rows = r.dim()?;
        let cols = r.dim()?;
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(MATRIX_HEADER_LEN))
            .ok_or_else(|| Error::format(8, format!("{rows}x{cols} matrix overflows")))?;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected) as u64,
                format!(
                    "file is {} bytes but a {rows}x{cols} matrix needs {expected}",
                    bytes.len()
                ),
            ));
        }
        let data = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                (MATRIX_HEADER_LEN + 4 * i) as u64,
                "non-finite value",
            ));
        }
        Ok(Self { rows, cols, data })
    }
}

pub fn save_features(path: &Path, matrix: &Matrix) -> Result<()> {
    write_atomic(path, &matrix.to_bytes())
}

pub fn load_features(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Matrix::from_bytes(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_matrix_is_header_only() {
        let m = Matrix::new(0, 0, vec![]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 24);
        assert_eq!(Matrix::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn single_value_encoding() {
        let bytes = Matrix::new(1, 1, vec![1.0]).unwrap().to_bytes();
        assert_eq!(&bytes[..4], b"PEMB");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[24..], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn random_round_trip_on_disk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..70).map(|_| rng.random_range(-10.0..10.0)).collect();
        let m = Matrix::new(10, 7, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pemb");
        save_features(&path, &m).unwrap();
        assert_eq!(load_features(&path).unwrap(), m);
    }

    #[test]
    fn rejects_bad_headers() {
        let good = Matrix::new(2, 3, vec![0.5; 6]).unwrap().to_bytes();
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(
            Matrix::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            Matrix::from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut bad = good.clone();
        bad[8] = 3;
        assert!(Matrix::from_bytes(&bad).is_err());
        let mut bad = good.clone();
        bad[23] = 0x80;
        assert!(Matrix::from_bytes(&bad).is_err());
        assert!(Matrix::from_bytes(&good[..good.len() - 2]).is_err());
        assert!(Matrix::from_bytes(&good[..3]).is_err());
        let mut nan = good.clone();
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            Matrix::from_bytes(&nan),
            Err(Error::Format { offset: 24, .. })
        ));
    }

    #[test]
    fn load_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pemb");
        std::fs::write(&path, b"PEMX0000").unwrap();
        let msg = load_features(&path).unwrap_err().to_string();
        assert!(msg.contains("bad.pemb") && msg.contains("byte 0"), "{msg}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_features(Path::new("/nonexistent/x.pemb")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            prop_assert_eq!(Matrix::from_bytes(&m.to_bytes()).unwrap(), m);
        }

        #[test]
        fn any_truncation_is_rejected(cut in 0usize..48) {
            let bytes = Matrix::new(2, 3, vec![1.5; 6]).unwrap().to_bytes();
            prop_assume!(cut < bytes.len());
            prop_assert!(Matrix::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
