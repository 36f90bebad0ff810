//! `LCH1` checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"LCH1"  u32 header_len  header[header_len]  f32 payload...
//! header = u32 n_meta  { str key  str value }*
//!          u32 n_params { str name  u32 rank  u32 dim*rank  u64 offset }*
//! str    = u32 len  utf8[len]
//! ```
//!
//! `offset` counts f32 elements from the start of the payload.

use std::path::Path;

use super::{Meta, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LCH1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        put_u32(&mut header, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut header, k);
            put_str(&mut header, v);
        }
        put_u32(&mut header, self.params.len() as u32);
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            put_str(&mut header, name);
            put_u32(&mut header, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut header, d as u32);
            }
            header.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }

        let mut out = Vec::with_capacity(8 + header.len() + 4 * offset as usize);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic, expected LCH1"));
        }
        let header_len = r.u32()? as usize;
        let payload_start = 8 + header_len;
        if payload_start > bytes.len() {
            return Err(Error::format("checkpoint", "header runs past end of file"));
        }
        let mut h = Reader {
            bytes: &bytes[8..payload_start],
            pos: 0,
        };
        let n_meta = h.u32()?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            let k = h.str()?;
            let v = h.str()?;
            meta.push((k, v));
        }
        let payload = &bytes[payload_start..];
        if payload.len() % 4 != 0 {
            return Err(Error::format("checkpoint", "payload is not whole f32 values"));
        }
        let floats = payload.len() / 4;
        let n_params = h.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = h.str()?;
            let rank = h.u32()? as usize;
            let shape = (0..rank)
                .map(|_| h.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = h.u64()? as usize;
            let n: usize = shape.iter().product();
            if offset + n > floats {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name} extends past the payload"),
                ));
            }
            let data = payload[4 * offset..4 * (offset + n)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.add(&name, Tensor::new(shape, data)?);
        }
        if h.pos != h.bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes in header"));
        }
        Ok(Self { meta, params })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "name is not utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a.w", Tensor::new([2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        params.add("a.b", Tensor::from_vec(vec![7.25]));
        Checkpoint {
            meta: vec![("model".into(), "test".into())],
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"LCH1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((na, ta), (nb, tb)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_magic_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
