//! Weight files: `DODW`, a little-endian `u32` header length, a JSON header
//! listing tensor names and shapes, then every tensor as little-endian `f32`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DODW";

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("weights do not match the model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
}

pub fn write_weights(store: &ParamStore, mut out: impl Write) -> Result<(), WeightsError> {
    let header = Header {
        tensors: store
            .ids()
            .map(|id| Entry { name: store.name(id).to_string(), shape: store.get(id).shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| WeightsError::Header(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for id in store.ids() {
        for &v in store.get(id).data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a weights file into a fresh store with the same names and order.
pub fn read_weights(mut input: impl Read) -> Result<ParamStore, WeightsError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| WeightsError::Header(e.to_string()))?;
    let mut store = ParamStore::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        input.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        store.add(entry.name, Tensor::new(entry.shape, data));
    }
    Ok(store)
}

/// Copies loaded tensors into `target`, matching by name and shape.
pub fn load_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<(), WeightsError> {
    if target.len() != loaded.len() {
        return Err(WeightsError::Mismatch(format!("expected {} tensors, file has {}", target.len(), loaded.len())));
    }
    for id in target.ids().collect::<Vec<_>>() {
        let name = target.name(id).to_string();
        let src = loaded.find(&name).ok_or_else(|| WeightsError::Mismatch(format!("missing tensor {name}")))?;
        let src = loaded.get(src);
        if src.shape() != target.get(id).shape() {
            return Err(WeightsError::Mismatch(format!("shape of {name}")));
        }
        target.get_mut(id).data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new(vec![2, 1, 1, 2], vec![0.5, -1.25, 3.0, 0.0]));
        store.add("a.bias", Tensor::new(vec![2], vec![0.1, 0.2]));
        let mut buf = Vec::new();
        write_weights(&store, &mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back.name(back.ids().next().unwrap()), "a.weight");
        let mut target = store.clone();
        target.fill(9.0);
        load_into(&mut target, &back).unwrap();
        assert_eq!(target.get(target.find("a.bias").unwrap()).data(), &[0.1f32 as f64, 0.2f32 as f64]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(read_weights(&b"NOPE\0\0\0\0"[..]), Err(WeightsError::BadMagic)));
    }
}
