//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FVRB" | version u32 | entry count u32
//! per entry: name length u16 | UTF-8 name | dtype u8 | rank u8 | dims u32 × rank | payload
//! ```
//!
//! dtype 1 is `f32`, 2 is `f64`; the payload is the raw little-endian values.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"FVRB";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE);
        let rank = u8::try_from(p.value.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
        out.push(rank);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            match T::DTYPE {
                1 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes entries, converting the stored dtype into `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 name".into()))?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let data: Vec<T> = match dtype {
            1 => r.take(4 * n)?.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            2 => r.take(8 * n)?.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
            t => return Err(Error::Format(format!("unknown dtype tag {t} for {name}"))),
        };
        entries.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_into<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    store.load_values(decode(&bytes)?)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.push("conv.w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.1 - 0.5), ParamKind::Weight);
        s.push("bn.mean", Tensor::zeros(&[2]), ParamKind::Buffer);
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store()).unwrap();
        assert_eq!(&bytes[..4], b"FVRB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // first entry: name length 6, "conv.w", dtype 1, rank 4, dims
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 6);
        assert_eq!(&bytes[14..20], b"conv.w");
        assert_eq!(bytes[20], 1);
        assert_eq!(bytes[21], 4);
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 2);
        let total = 12 + (2 + 6 + 2 + 16 + 18 * 4) + (2 + 7 + 2 + 4 + 2 * 4);
        assert_eq!(bytes.len(), total);
    }

    #[test]
    fn decode_restores_values() {
        let s = store();
        let mut other = store();
        other.get_mut(0).value.data_mut().fill(0.0);
        other.load_values(decode(&encode(&s).unwrap()).unwrap()).unwrap();
        assert_eq!(other.get(0).value, s.get(0).value);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&store()).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
    }
}
