//! BSM matrix files and atomic file output.
//!
//! BSM layout (all little-endian):
//!
//! ```text
//! offset 0   b"BSM1"
//! offset 4   rows  u32
//! offset 8   cols  u32
//! offset 12  rows*cols binary32 values, row-major
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const BSM_MAGIC: &[u8; 4] = b"BSM1";
pub const BSM_HEADER_LEN: usize = 12;

/// Run `write` against a temp file next to `path`, then rename it into place.
/// On any error the destination is left untouched.
pub fn write_atomically<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_bsm(m: &DenseMatrix, out: &mut dyn Write) -> Result<()> {
    let rows = u32::try_from(m.rows())
        .map_err(|_| Error::Format(format!("{} rows do not fit a u32 header", m.rows())))?;
    let cols = u32::try_from(m.cols())
        .map_err(|_| Error::Format(format!("{} cols do not fit a u32 header", m.cols())))?;
    out.write_all(BSM_MAGIC)?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn decode_bsm(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 4 || &bytes[..4] != BSM_MAGIC {
        return Err(Error::Format("not a BSM file (bad magic)".into()));
    }
    if bytes.len() < BSM_HEADER_LEN {
        return Err(Error::Format("truncated BSM header".into()));
    }
    let rows = read_u32(bytes, 4) as usize;
    let cols = read_u32(bytes, 8) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!(
            "BSM header has an empty dimension ({rows}x{cols})"
        )));
    }
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("BSM dimensions {rows}x{cols} overflow")))?;
    let body = &bytes[BSM_HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Format(format!(
            "truncated BSM payload: expected {payload} bytes, found {}",
            body.len()
        )));
    }
    if body.len() > payload {
        return Err(Error::Format(format!(
            "BSM file has {} trailing bytes",
            body.len() - payload
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DenseMatrix::new(rows, cols, data)
}

pub fn write_bsm(m: &DenseMatrix, path: &Path) -> Result<()> {
    write_atomically(path, |w| encode_bsm(m, w))
}

pub fn read_bsm(path: &Path) -> Result<DenseMatrix> {
    decode_bsm(&read_all(path)?)
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Size of `path` in bytes.
pub fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path)?.len())
}
