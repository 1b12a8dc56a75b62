//! Binary checkpoint: `u64` little-endian header length, UTF-8 JSON header,
//! then every tensor's values as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{NumericsError, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(tensors: &[(String, Tensor)], meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(8 + json.len() + payload);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("missing header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut pos = 8 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + n * 8)
            .ok_or_else(|| bad(&format!("truncated data for tensor {}", entry.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        pos += n * 8;
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((tensors, header.meta))
}

pub fn save(path: &Path, tensors: &[(String, Tensor)], meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(tensors, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e300f64..1e300, 0..40), split in 0usize..40) {
            let split = split.min(values.len());
            let a = Tensor::from_vec(values[..split].to_vec());
            let b = Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap();
            let tensors = vec![("a".to_string(), a), ("b.w".to_string(), b)];
            let meta = serde_json::json!({"channels": 8});
            let (back, m) = decode(&encode(&tensors, &meta).unwrap()).unwrap();
            prop_assert_eq!(back, tensors);
            prop_assert_eq!(m, meta);
        }
    }

    #[test]
    fn layout_is_length_prefixed_json_then_le_f64() {
        let bytes = encode(&[("x".into(), Tensor::from_vec(vec![1.5]))], &serde_json::Value::Null).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["tensors"][0]["name"], "x");
        assert_eq!(&bytes[8 + hlen..], &1.5f64.to_le_bytes());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
