//! Named-tensor container used for checkpoints, datasets and reference
//! solutions.
//!
//! Layout: a UTF-8 header, one line per tensor, followed by the raw data of
//! every tensor in header order as little-endian `f64`.
//!
//! ```text
//! dc3-tensors 1
//! W1 50x200
//! b1 1x200
//! end
//! <payload>
//! ```

use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &str = "dc3-tensors";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad header line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("unsupported tensor file version {0}")]
    Version(u32),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{found} trailing bytes after payload")]
    Trailing { found: usize },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

pub fn write_tensors(mut w: impl Write, tensors: &[(&str, &Tensor)]) -> Result<(), TensorFileError> {
    let mut header = format!("{MAGIC} {VERSION}\n");
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(TensorFileError::Header { line: 0, msg: format!("invalid name `{name}`") });
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} {}\n", dims.join("x")));
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_tensors(r: impl Read) -> Result<Vec<(String, Tensor)>, TensorFileError> {
    let mut r = io::BufReader::new(r);
    let mut line = String::new();
    let mut lineno = 0;
    let mut next_line = |r: &mut io::BufReader<_>, line: &mut String| -> Result<usize, TensorFileError> {
        line.clear();
        lineno += 1;
        let n = r.read_line(line)?;
        if n == 0 {
            return Err(TensorFileError::Header { line: lineno, msg: "unexpected end of header".into() });
        }
        Ok(lineno)
    };

    let ln = next_line(&mut r, &mut line)?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(TensorFileError::Header { line: ln, msg: "missing magic".into() });
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TensorFileError::Header { line: ln, msg: "missing version".into() })?;
    if version != VERSION {
        return Err(TensorFileError::Version(version));
    }

    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let ln = next_line(&mut r, &mut line)?;
        let trimmed = line.trim();
        if trimmed == "end" {
            break;
        }
        let mut it = trimmed.split_whitespace();
        let (Some(name), Some(dims), None) = (it.next(), it.next(), it.next()) else {
            return Err(TensorFileError::Header { line: ln, msg: format!("expected `name shape`, got `{trimmed}`") });
        };
        let shape = dims
            .split('x')
            .map(str::parse::<usize>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TensorFileError::Header { line: ln, msg: format!("shape `{dims}`: {e}") })?;
        entries.push((name.to_string(), shape));
    }

    let expected: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>() * 8).sum();
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(TensorFileError::Truncated { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(TensorFileError::Trailing { found: payload.len() - expected });
    }
    let mut off = 0;
    let mut out = Vec::with_capacity(entries.len());
    for (name, shape) in entries {
        let count: usize = shape.iter().product();
        let data: Vec<f64> = payload[off..off + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        off += count * 8;
        let t = Tensor::new(shape, data).expect("count matches shape");
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<(), TensorFileError> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, TensorFileError> {
    read_tensors(fs::File::open(path)?)
}

/// Remove and return the tensor called `name`, checking its shape if given.
pub fn take_tensor(
    entries: &mut Vec<(String, Tensor)>,
    name: &str,
    shape: Option<&[usize]>,
) -> Result<Tensor, TensorFileError> {
    let pos = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| TensorFileError::Missing(name.to_string()))?;
    let (_, t) = entries.remove(pos);
    if let Some(s) = shape {
        if t.shape() != s {
            return Err(TensorFileError::ShapeMismatch {
                name: name.to_string(),
                expected: s.to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    Ok(t)
}
