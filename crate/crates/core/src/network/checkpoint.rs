//! Binary parameter checkpoints.
//!
//! Layout, little-endian: magic `HWAU`, `u32` version, `u32` entry count,
//! then per entry `u16` name length, name bytes, `u8` dtype code, `u8` rank,
//! `rank × u32` extents and the `u64` absolute byte offset of its payload.
//! Payloads follow the table in entry order.

use std::io::Write;
use std::path::Path;

use crate::binio::{put_string, Reader};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HWAU";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Element>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let dtype = T::DTYPE;
    let mut table = Vec::new();
    let mut header_len = 12;
    for (name, value) in store.iter() {
        header_len += 2 + name.len() + 2 + 4 * value.ndim() + 8;
    }
    let mut offset = header_len as u64;
    for (name, value) in store.iter() {
        put_string(&mut table, name)?;
        let rank = u8::try_from(value.ndim()).map_err(|_| Error::Data(format!("{name}: rank too large")))?;
        table.push(dtype.code());
        table.push(rank);
        for &e in value.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Data(format!("{name}: extent {e} too large")))?;
            table.extend_from_slice(&e.to_le_bytes());
        }
        table.extend_from_slice(&offset.to_le_bytes());
        offset += (value.numel() * dtype.size()) as u64;
    }
    let mut out = Vec::with_capacity(offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&table);
    for (_, value) in store.iter() {
        for &v in value.data() {
            match dtype {
                DType::F32 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Data(format!("{name}: unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Data(format!("{name}: stored as {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        entries.push((name, shape, offset));
    }
    let mut store = ParamStore::new();
    for (name, shape, offset) in entries {
        let numel: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let start = usize::try_from(offset).map_err(|_| Error::Data(format!("{name}: offset overflow")))?;
        let raw = start
            .checked_add(numel * size)
            .and_then(|end| bytes.get(start..end))
            .ok_or_else(|| Error::Truncated(format!("checkpoint: payload of {name} runs past end of file")))?;
        let data = raw
            .chunks_exact(size)
            .map(|c| match T::DTYPE {
                DType::F32 => T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                DType::F64 => T::lit(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Data(format!("{name}: {e}")))?;
        store.register(name, value).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(store)
}

pub fn write_checkpoint<T: Element>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode_checkpoint(store)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_checkpoint<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.register("a.weight", Tensor::from_fn(vec![2, 3], |i| i as f32 - 2.5)).unwrap();
        s.register("b", Tensor::full(vec![1], f32::MIN_POSITIVE)).unwrap();
        s
    }

    #[test]
    fn layout_of_first_entry() {
        let bytes = encode_checkpoint(&store()).unwrap();
        assert_eq!(&bytes[..4], b"HWAU");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 8);
        assert_eq!(&bytes[14..22], b"a.weight");
        assert_eq!(bytes[22], 0);
        assert_eq!(bytes[23], 2);
        // Table: 12 + (2+8+2+8+8) + (2+1+2+4+8) = 57 bytes.
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 57);
        assert_eq!(bytes.len(), 57 + 7 * 4);
        assert_eq!(&bytes[57..61], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn byte_exact_round_trip() {
        let bytes = encode_checkpoint(&store()).unwrap();
        let back: ParamStore<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let wide = store().cast::<f64>();
        let bytes = encode_checkpoint(&wide).unwrap();
        assert_eq!(encode_checkpoint(&decode_checkpoint::<f64>(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&store()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Version(9))));
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..20]), Err(Error::Truncated(_))));
        assert!(decode_checkpoint::<f64>(&bytes).is_err());
    }
}
