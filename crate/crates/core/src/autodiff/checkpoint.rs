//! Binary checkpoint format.
//!
//! ```text
//! "WENDCKPT"            8 bytes
//! version               u32 LE
//! repeated until EOF:
//!   name_len            u32 LE
//!   name                name_len bytes, UTF-8
//!   rank                u32 LE
//!   dims                rank x u64 LE
//!   data                prod(dims) x f64 LE
//! ```

use std::fs;
use std::path::Path;

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"WENDCKPT";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let name_len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let count: usize = dims.iter().product();
        let raw = take(count.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&dims, data).map_err(|e| bad(&e.to_string()))?;
        records.push((name, tensor));
    }
    Ok(records)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_layout() {
        let mut ps = ParamSet::new();
        ps.add("conv.w", Tensor::from_vec(&[2, 1], vec![1.5, -2.0]).unwrap(), 1.0, true);
        ps.add("b", Tensor::from_vec(&[1], vec![0.25]).unwrap(), 1.0, false);
        let bytes = encode(&ps);
        assert_eq!(&bytes[..8], b"WENDCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &6u32.to_le_bytes());
        let recs = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].0, "conv.w");
        assert_eq!(recs[0].1.data(), &[1.5, -2.0]);

        let mut other = ps.clone();
        other.iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        other.load(&recs).unwrap();
        assert_eq!(other, ps);
    }

    #[test]
    fn rejects_corruption() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(&[3]), 1.0, true);
        let bytes = encode(&ps);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, Path::new("x")).is_err());
    }
}
