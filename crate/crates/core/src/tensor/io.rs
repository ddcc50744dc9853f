//! Tensor serialization.
//!
//! * CSV: rank-2 (or rank-1, written as a column), one row per line,
//!   comma-separated, `.` decimal point, plain positional notation for
//!   `|v| < 1e6` and exponent notation otherwise.
//! * MPT1 binary container, little endian:
//!
//! ```text
//! magic   4 bytes  "MPT1"
//! rank    u32
//! extents u64 × rank
//! values  f64 × product(extents), row-major
//! ```

use std::io::{self, Read, Write};

use ndarray::IxDyn;
use thiserror::Error;

use super::Array;

pub const MAGIC: &[u8; 4] = b"MPT1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("malformed tensor data: {0}")]
    Malformed(String),
}

pub fn format_value(v: f64) -> String {
    if v.abs() < 1e6 {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn write_csv<W: Write>(mut out: W, a: &Array) -> Result<(), IoError> {
    let (rows, cols) = match a.shape() {
        [] => (1, 1),
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        s => return Err(IoError::Malformed(format!("CSV needs rank <= 2, got {s:?}"))),
    };
    let data = a.as_standard_layout();
    let data = data.as_slice().unwrap();
    let mut line = String::new();
    for r in 0..rows {
        line.clear();
        for c in 0..cols {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&format_value(data[r * cols + c]));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn to_csv_string(a: &Array) -> Result<String, IoError> {
    let mut buf = Vec::new();
    write_csv(&mut buf, a)?;
    Ok(String::from_utf8(buf).expect("csv output is ascii"))
}

/// Reads a rectangular CSV of numbers into a rank-2 array.
pub fn read_csv<R: Read>(mut input: R) -> Result<Array, IoError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                IoError::Malformed(format!("line {}: cannot parse {field:?}", lineno + 1))
            })?;
            values.push(v);
        }
        let n = values.len() - before;
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(IoError::Malformed(format!(
                    "line {} has {n} fields, expected {c}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| IoError::Malformed("empty CSV".into()))?;
    Array::from_shape_vec(IxDyn(&[rows, cols]), values).map_err(|e| IoError::Malformed(e.to_string()))
}

pub fn write_binary<W: Write>(mut out: W, a: &Array) -> Result<(), IoError> {
    out.write_all(MAGIC)?;
    out.write_all(&(a.ndim() as u32).to_le_bytes())?;
    for &d in a.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(a.len() * 8);
    for v in a.as_standard_layout().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<Array, IoError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(IoError::Malformed(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut dword = [0u8; 8];
    for _ in 0..rank {
        input.read_exact(&mut dword)?;
        let d = u64::from_le_bytes(dword) as usize;
        if d == 0 {
            return Err(IoError::Malformed("zero extent".into()));
        }
        shape.push(d);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| IoError::Malformed("element count overflows".into()))?;
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array::from_shape_vec(IxDyn(&shape), values).map_err(|e| IoError::Malformed(e.to_string()))
}
