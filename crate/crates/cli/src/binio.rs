//! Little-endian primitives shared by the on-disk formats. Readers work on
//! fully loaded byte buffers so truncation errors can name exact counts.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"WDAE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BinError {
    #[error("missing file {path}: {source}")]
    MissingFile {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes, expected \"WDAE\"")]
    MagicMismatch { path: PathBuf },
    #[error("{path}: unsupported format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Cursor over a fully loaded file.
pub struct Reader {
    path: PathBuf,
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader {
    pub fn open(path: &Path) -> Result<Self, BinError> {
        let bytes = std::fs::read(path).map_err(|source| BinError::MissingFile {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Reader {
            path: path.to_path_buf(),
            bytes,
            pos: 0,
        })
    }

    fn take(&mut self, n: usize) -> Result<&[u8], BinError> {
        if self.pos + n > self.bytes.len() {
            return Err(BinError::Truncated {
                path: self.path.clone(),
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn expect_magic(&mut self) -> Result<(), BinError> {
        let got = self.take(4)?;
        if got != MAGIC {
            return Err(BinError::MagicMismatch {
                path: self.path.clone(),
            });
        }
        Ok(())
    }

    pub fn expect_version(&mut self) -> Result<(), BinError> {
        let found = self.read_u32()?;
        if found != FORMAT_VERSION {
            return Err(BinError::VersionMismatch {
                path: self.path.clone(),
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    pub fn read_u32(&mut self) -> Result<u32, BinError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_f32_slice(&mut self, count: usize) -> Result<Vec<f32>, BinError> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_u32_slice(&mut self, count: usize) -> Result<Vec<u32>, BinError> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Fail when trailing bytes remain after parsing.
    pub fn expect_end(&self) -> Result<(), BinError> {
        if self.pos != self.bytes.len() {
            return Err(BinError::Truncated {
                path: self.path.clone(),
                expected: self.pos,
                actual: self.bytes.len(),
            });
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Byte-buffer writer mirroring [`Reader`].
#[derive(Default)]
pub struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn magic(&mut self) -> &mut Self {
        self.bytes.extend_from_slice(MAGIC);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32_slice(&mut self, values: &[f32]) -> &mut Self {
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn u32_slice(&mut self, values: &[u32]) -> &mut Self {
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn write_to(&self, path: &Path) -> Result<(), BinError> {
        std::fs::write(path, &self.bytes).map_err(|source| BinError::Write {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Widen stored f32 values to the in-memory f64 representation.
pub fn widen(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

/// Narrow in-memory f64 values to the f32 storage type.
pub fn narrow(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}
