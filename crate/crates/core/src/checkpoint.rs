//! Model checkpoints: `DCLC` magic, `u16` version, `u32` header length, a
//! JSON header (config, mode, parameter names and shapes) and the parameter
//! values as little-endian `f64` in header order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Mode};
use crate::error::{DclError, Result};
use crate::fusion::Model;

pub const MAGIC: &[u8; 4] = b"DCLC";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Config,
    mode: Mode,
    precomputed: bool,
    video_dim: usize,
    audio_dim: usize,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        mode: model.mode,
        precomputed: model.precomputed,
        video_dim: model.store.value(model.encoders.video_w).nrows(),
        audio_dim: model.store.value(model.encoders.audio_w).nrows(),
        params: model
            .store
            .entries()
            .map(|(name, v, _)| ParamEntry { name: name.to_string(), rows: v.nrows(), cols: v.ncols() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(json.len()).expect("header fits in u32").to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v, _) in model.store.entries() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Rebuilds a model. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let err = |msg: String| DclError::Checkpoint { path: path.to_path_buf(), msg };
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(err("not a checkpoint (bad magic or truncated header)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(err(format!("checkpoint version {version}, this build reads version {VERSION}")));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = bytes.get(10..10 + len).ok_or_else(|| err("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| err(format!("header: {e}")))?;
    let mut model = Model::new(&header.config, header.mode, header.video_dim, header.audio_dim, header.precomputed, 0)
        .map_err(|e| err(format!("incompatible configuration: {e}")))?;
    if model.store.len() != header.params.len() {
        return Err(err(format!(
            "{} parameters stored, mode {} with this configuration has {}",
            header.params.len(),
            header.mode,
            model.store.len()
        )));
    }
    let mut offset = 10 + len;
    for p in &header.params {
        let id = model.store.find(&p.name).ok_or_else(|| err(format!("unknown parameter {}", p.name)))?;
        let expected = model.store.value(id).dim();
        if expected != (p.rows, p.cols) {
            return Err(err(format!("parameter {} is {}x{}, model expects {:?}", p.name, p.rows, p.cols, expected)));
        }
        let n = p.rows * p.cols;
        let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| err(format!("payload truncated at {}", p.name)))?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.store.set(id, Array2::from_shape_vec((p.rows, p.cols), values).expect("size checked"));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(err(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| DclError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| DclError::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn model(mode: Mode) -> Model {
        let cfg = Config::tiny();
        let ds = generate_dataset(&cfg, 1).unwrap();
        Model::new(&cfg, mode, ds.frame_dim, ds.audio_dim, false, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in Mode::ALL {
            let m = model(mode);
            let back = decode(&encode(&m), Path::new("mem")).unwrap();
            assert_eq!(back.mode, mode);
            for id in m.store.ids() {
                let b = back.store.find(m.store.name(id)).unwrap();
                assert!(m.store.value(id).iter().zip(back.store.value(b)).all(|(x, y)| x.to_bits() == y.to_bits()));
                assert_eq!(m.store.is_trainable(id), back.store.is_trainable(b));
            }
        }
    }

    #[test]
    fn corruption_names_the_file() {
        let bytes = encode(&model(Mode::Dse));
        let p = Path::new("run/model.dclc");
        for bad in [&bytes[..bytes.len() - 3], &bytes[..8], b"XXXXXXXXXXXX".as_slice()] {
            let e = decode(bad, p).unwrap_err();
            assert!(e.to_string().contains("run/model.dclc"), "{e}");
        }
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(decode(&v, p).unwrap_err().to_string().contains("version"));
    }
}
