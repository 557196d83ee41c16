//! Little-endian binary helpers and atomic file writes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::C64;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FormatError {
    pub fn corrupt(msg: impl Into<String>) -> Self {
        FormatError::Corrupt(msg.into())
    }
}

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u32(&mut self, x: u32) -> io::Result<()> {
        self.inner.write_all(&x.to_le_bytes())
    }

    pub fn u64(&mut self, x: u64) -> io::Result<()> {
        self.inner.write_all(&x.to_le_bytes())
    }

    pub fn f64(&mut self, x: f64) -> io::Result<()> {
        self.inner.write_all(&x.to_le_bytes())
    }

    pub fn f64s(&mut self, xs: &[f64]) -> io::Result<()> {
        for x in xs {
            self.f64(*x)?;
        }
        Ok(())
    }

    /// Interleaved re/im pairs.
    pub fn complex(&mut self, xs: &[C64]) -> io::Result<()> {
        for z in xs {
            self.f64(z.re)?;
            self.f64(z.im)?;
        }
        Ok(())
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn complex(&mut self, n: usize) -> Result<Vec<C64>, FormatError> {
        (0..n)
            .map(|_| Ok(C64::new(self.f64()?, self.f64()?)))
            .collect()
    }

    /// Errors unless the stream is exhausted.
    pub fn expect_end(&mut self) -> Result<(), FormatError> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(FormatError::corrupt("trailing bytes")),
        }
    }
}

fn truncated(e: io::Error) -> FormatError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FormatError::corrupt("unexpected end of file")
    } else {
        FormatError::Io(e)
    }
}

/// Converts a count read from a file, rejecting absurd values before they
/// turn into allocations.
pub(crate) fn checked_count(x: u64, limit: u64, what: &str) -> Result<usize, FormatError> {
    if x > limit {
        return Err(FormatError::corrupt(format!(
            "{what} = {x} exceeds {limit}"
        )));
    }
    Ok(x as usize)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes via a temporary sibling file and renames it into place.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> io::Result<()> {
    let tmp = temp_path(path);
    let result = (|| {
        let file = fs::File::create(&tmp)?;
        let mut buf = io::BufWriter::new(file);
        fill(&mut buf)?;
        buf.flush()?;
        buf.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Path of the JSON manifest that sits next to a binary file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}
