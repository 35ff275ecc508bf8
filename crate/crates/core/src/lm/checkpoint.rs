//! `SALTCKPT` binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SALTCKPT"
//! version    u32      1
//! config     u32 vocab_size, u32 max_len, u32 d_model, u32 n_layers,
//!            u32 n_heads, u32 d_ff, f64 prob_floor, f64 init_std
//! count      u32      number of tensors
//! tensor*    u32 name_len, name bytes (UTF-8), u32 rank, u32 dims[rank],
//!            f64 data[prod(dims)]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::model::{LmConfig, LmModel};

pub const CKPT_MAGIC: &[u8; 8] = b"SALTCKPT";
pub const CKPT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &LmModel) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + 8 * model.param_count());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [c.vocab_size, c.max_len, c.d_model, c.n_layers, c.n_heads, c.d_ff] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&c.prob_floor.to_le_bytes());
    out.extend_from_slice(&c.init_std.to_le_bytes());
    put_u32(&mut out, model.params().len())?;
    for (name, t) in model.params() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.take(4)?.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(8)?.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LmModel> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version as u32 != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = LmConfig {
        vocab_size: r.u32()?,
        max_len: r.u32()?,
        d_model: r.u32()?,
        n_layers: r.u32()?,
        n_heads: r.u32()?,
        d_ff: r.u32()?,
        prob_floor: r.f64()?,
        init_std: r.f64()?,
    };
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name not UTF-8".into()))?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.push((name, Tensor::new(dims, data)?));
    }
    if !r.buf.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    LmModel::from_params(config, params)
}

pub fn save_checkpoint(model: &LmModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LmModel> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = LmConfig {
            vocab_size: 7,
            max_len: 5,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            prob_floor: 1e-4,
            init_std: 0.3,
        };
        let m = LmModel::init(cfg, &mut Rng::new(11)).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..8], b"SALTCKPT");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(decode_checkpoint(b"NOTACKPT").is_err());
        let cfg = LmConfig {
            vocab_size: 3,
            max_len: 2,
            d_model: 2,
            n_layers: 0,
            n_heads: 1,
            d_ff: 2,
            prob_floor: 0.0,
            init_std: 0.1,
        };
        let m = LmModel::init(cfg, &mut Rng::new(1)).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
