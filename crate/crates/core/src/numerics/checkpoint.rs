//! Self-describing binary container of named tensors plus a JSON metadata
//! record.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CAPCKPT1"
//! u64 metadata length, metadata JSON bytes
//! u64 tensor count
//! per tensor: u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//!             u32 rank, u64 dims..., raw values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CAPCKPT1";

pub struct Checkpoint<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub meta: Value,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint<T: Real>(tensors: &BTreeMap<String, Tensor<T>>, meta: &Value) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let m = serde_json::to_vec(meta).expect("metadata serializes");
    put_u64(&mut buf, m.len() as u64);
    buf.extend_from_slice(&m);
    put_u64(&mut buf, tensors.len() as u64);
    let wide = T::NAME == "f64";
    for (name, t) in tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(u8::from(wide));
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &v in t.data() {
            if wide {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            } else {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Real>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let mlen = r.u64()? as usize;
    let meta: Value = serde_json::from_slice(r.take(mlen)?)?;
    let count = r.u64()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Data("tensor name is not utf-8".into()))?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            0 => {
                for c in r.take(n * 4)?.chunks_exact(4) {
                    data.push(T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64));
                }
            }
            1 => {
                for c in r.take(n * 8)?.chunks_exact(8) {
                    data.push(T::lit(f64::from_le_bytes(c.try_into().unwrap())));
                }
            }
            d => return Err(Error::Data(format!("unknown dtype tag {d}"))),
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { tensors, meta })
}

/// Write atomically (temp file then rename).
pub fn save_checkpoint<T: Real>(
    path: &Path,
    tensors: &BTreeMap<String, Tensor<T>>,
    meta: &Value,
) -> Result<()> {
    let bytes = encode_checkpoint(tensors, meta);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_widths() {
        let mut t = BTreeMap::new();
        t.insert("a".to_string(), Tensor::<f32>::matrix(2, 2, vec![1.5, -2.0, 3.25, 1e-7]));
        t.insert("b.c".to_string(), Tensor::<f32>::scalar(0.1));
        let meta = serde_json::json!({"epoch": 3, "history": [1.0, 2.5]});
        let bytes = encode_checkpoint(&t, &meta);
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.tensors, t);
        assert_eq!(back.meta, meta);

        let wide: BTreeMap<_, _> = t.iter().map(|(k, v)| (k.clone(), v.cast::<f64>())).collect();
        let back: Checkpoint<f64> = decode_checkpoint(&encode_checkpoint(&wide, &meta)).unwrap();
        assert_eq!(back.tensors, wide);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint::<f32>(b"nope").is_err());
        let bytes = encode_checkpoint::<f32>(&BTreeMap::new(), &Value::Null);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
