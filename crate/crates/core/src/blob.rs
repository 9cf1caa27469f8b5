//! `DCLD` array blobs: 4-byte magic, `u16` version, `u8` rank, `rank` x `u32`
//! dimension sizes, then a row-major little-endian `f32` payload. All header
//! integers are little-endian.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{DclError, Result};

pub const MAGIC: &[u8; 4] = b"DCLD";
pub const VERSION: u16 = 1;

pub fn encode(array: &ArrayD<f32>) -> Vec<u8> {
    let rank = array.ndim();
    let mut out = Vec::with_capacity(7 + 4 * rank + 4 * array.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(u8::try_from(rank).expect("rank fits in u8"));
    for &d in array.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
    }
    for &v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a blob. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ArrayD<f32>> {
    let corrupt = |msg: String| DclError::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 {
        return Err(corrupt(format!("{} bytes is shorter than the magic", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(DclError::Format {
            path: path.to_path_buf(),
            msg: format!("bad magic {:?}, expected \"DCLD\"", String::from_utf8_lossy(&bytes[..4])),
        });
    }
    if bytes.len() < 7 {
        return Err(corrupt("truncated header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DclError::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(corrupt(format!("truncated shape header for rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 7 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = shape.iter().product();
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "payload has {} bytes, shape {:?} needs {}",
            bytes.len() - header,
            shape,
            4 * count
        )));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length checked above"))
}

pub fn write(path: &Path, array: &ArrayD<f32>) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| DclError::io(path, e))?;
    f.write_all(&encode(array)).map_err(|e| DclError::io(path, e))
}

pub fn read(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = std::fs::read(path).map_err(|e| DclError::io(path, e))?;
    decode(&bytes, path)
}

/// Writes an `f64` matrix, narrowing to `f32`. Used for diagnostic dumps.
pub fn write_matrix(path: &Path, m: &ndarray::Array2<f64>) -> Result<()> {
    write(path, &m.mapv(|v| v as f32).into_dyn())
}
