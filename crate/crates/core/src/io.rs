//! Matrix files.
//!
//! EMB1 layout, all little-endian:
//!
//! ```text
//! b"EMB1" | rows: u32 | cols: u32 | rows*cols f32, row-major
//! ```
//!
//! CSV files hold one row per line, comma-separated decimal reals.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 12;

pub fn encode_emb(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Format {
        offset: 4,
        message: format!("row count {} exceeds u32", m.rows()),
    })?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Format {
        offset: 8,
        message: format!("column count {} exceeds u32", m.cols()),
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for (k, &v) in m.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Format {
                offset: (HEADER_LEN + 4 * k) as u64,
                message: format!("value {v} is not representable as a finite f32"),
            });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_emb(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated header: expected {HEADER_LEN} bytes, got {}", bytes.len()),
        });
    }
    if &bytes[..4] != EMB_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected \"EMB1\"", &bytes[..4]),
        });
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format {
            offset: 4,
            message: format!("shape {rows}x{cols} overflows"),
        })?;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!(
                "{} file for {rows}x{cols}: expected {expected} bytes, got {}",
                if bytes.len() < expected { "truncated" } else { "oversized" },
                bytes.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::Format {
                offset: (HEADER_LEN + 4 * k) as u64,
                message: format!("non-finite value {v}"),
            });
        }
        data.push(f64::from(v));
    }
    Matrix::new(rows, cols, data)
}

pub fn write_emb(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_emb(m)?)
}

pub fn read_emb(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_emb(&bytes)
}

/// Parses CSV text. The optional second value is a warning (currently only for empty input).
pub fn parse_csv_matrix(text: &str) -> Result<(Matrix, Option<String>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                let field = field.trim();
                let v: f64 = field.parse().map_err(|_| Error::FormatLine {
                    line: line_no,
                    message: format!("cannot parse {field:?} as a number"),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::FormatLine {
                        line: line_no,
                        message: format!("non-finite value {field:?}"),
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::FormatLine {
                    line: line_no,
                    message: format!("ragged row: expected {} values, got {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Ok((Matrix::zeros(0, 0), Some("empty CSV input; read as a 0x0 matrix".into())));
    }
    Ok((Matrix::from_rows(&rows)?, None))
}

pub fn read_csv_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    read_csv_matrix_with_warning(path).map(|(m, _)| m)
}

pub fn read_csv_matrix_with_warning(path: impl AsRef<Path>) -> Result<(Matrix, Option<String>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_matrix(&text)
}

/// One line per row, values in shortest round-trip decimal form.
pub fn encode_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in m.row_iter() {
        let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_atomic(path, encode_csv(m).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Emb,
    Csv,
}

impl MatrixFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("emb") => Ok(Self::Emb),
            Some("csv") => Ok(Self::Csv),
            _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
        }
    }
}

/// Reads a matrix, picking the format from the file extension.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<(Matrix, Option<String>)> {
    let path = path.as_ref();
    match MatrixFormat::from_path(path)? {
        MatrixFormat::Emb => read_emb(path).map(|m| (m, None)),
        MatrixFormat::Csv => read_csv_matrix_with_warning(path),
    }
}

pub fn encode_matrix(path: &Path, m: &Matrix) -> Result<Vec<u8>> {
    match MatrixFormat::from_path(path)? {
        MatrixFormat::Emb => encode_emb(m),
        MatrixFormat::Csv => Ok(encode_csv(m).into_bytes()),
    }
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_matrix(path, m)?;
    write_atomic(path, &bytes)
}

/// Writes through a temporary file in the destination directory and renames on success.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
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
