//! Parameter checkpoint codec. Layout: magic "TFD1", then for each parameter
//! in store order: name length (u32 LE), UTF-8 name, shape rank (u32 LE),
//! extents (u32 LE each), raw little-endian f64 values. Round trips are
//! bit-exact.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TFD1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (name, value, _) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = value.shape();
        out.extend_from_slice(&4u32.to_le_bytes());
        for extent in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode into (name, tensor) pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let err = |pos: usize, msg: &str| Error::Parse {
        offset: pos,
        message: msg.into(),
    };
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(err(0, "missing TFD1 magic"));
    }
    let mut pos = 4;
    let mut out = Vec::new();
    let read_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32> {
        let end = *pos + 4;
        if end > bytes.len() {
            return Err(err(*pos, "truncated u32"));
        }
        let v = u32::from_le_bytes(bytes[*pos..end].try_into().expect("4 bytes"));
        *pos = end;
        Ok(v)
    };
    while pos < bytes.len() {
        let name_len = read_u32(bytes, &mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(err(pos, "truncated name"));
        }
        let name = core::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| err(pos, "name is not UTF-8"))?
            .into();
        pos += name_len;
        let rank = read_u32(bytes, &mut pos)?;
        if rank != 4 {
            return Err(err(pos - 4, "expected rank 4"));
        }
        let mut extents = [0usize; 4];
        for e in &mut extents {
            *e = read_u32(bytes, &mut pos)? as usize;
        }
        let shape = Shape::new(extents[0], extents[1], extents[2], extents[3]);
        let count = shape.numel();
        if pos + 8 * count > bytes.len() {
            return Err(err(pos, "truncated values"));
        }
        let data: Vec<f64> = bytes[pos..pos + 8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += 8 * count;
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

/// Load decoded values into a store built with the same architecture; every
/// name must exist with the same shape, and every entry must be covered.
pub fn load_into(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Data(alloc::format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, value) in entries {
        let id = store
            .id_of(name)
            .ok_or_else(|| Error::Data(alloc::format!("unknown parameter {name}")))?;
        if store.value(id).shape() != value.shape() {
            return Err(Error::Data(alloc::format!(
                "parameter {name}: checkpoint shape {} vs model {}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        store.set_value(id, value.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_bit_exact() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let a = Tensor::random_uniform(Shape::new(2, 3, 1, 4), -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(Shape::new(1, 1, 1, 1), -1.0, 1.0, &mut rng);
        store.register("layer.w", a.clone()).unwrap();
        store.register("layer.b", b.clone()).unwrap();
        let bytes = encode(&store);
        assert_eq!(&bytes[0..4], b"TFD1");
        let decoded = decode(&bytes).unwrap();
        assert_eq!(decoded.len(), 2);
        assert_eq!(decoded[0].0, "layer.w");
        assert_eq!(decoded[0].1, a);
        assert_eq!(decoded[1].1, b);
        // Byte-identical re-encode.
        let mut store2 = ParamStore::new();
        store2.register("layer.w", Tensor::zeros(Shape::new(2, 3, 1, 4))).unwrap();
        store2.register("layer.b", Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        load_into(&mut store2, &decoded).unwrap();
        assert_eq!(encode(&store2), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut store = ParamStore::new();
        store.register("p", Tensor::scalar(1.5)).unwrap();
        let bytes = encode(&store);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
