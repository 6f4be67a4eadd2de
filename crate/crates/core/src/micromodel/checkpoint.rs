//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian): magic `MMDL`, `u32` format version,
//! then one record per tensor until end of file: `u32` name length, UTF-8
//! name bytes, `u32` rank, `u64` per dimension, `f64` values row-major.

use std::path::Path;

use super::{Backbone, ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::io::{read_file as read_bytes, write_file as write_bytes};

pub const MAGIC: &[u8; 4] = b"MMDL";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated checkpoint while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (buf.len() - r.pos) / 8)
            .ok_or_else(|| Error::Format(format!("{name}: payload shorter than shape {shape:?}")))?;
        let data = r
            .take(n * 8, "values")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.iter().any(|(n, _): &(String, Tensor)| *n == name) {
            return Err(Error::Integrity(format!("duplicate tensor {name}")));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensors(params.tensors()))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    ModelParams::from_named(decode_tensors(&read_bytes(path.as_ref())?)?)
}

pub fn save_backbone(backbone: &Backbone, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensors(backbone.tensors()))
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<Backbone> {
    Backbone::from_named(decode_tensors(&read_bytes(path.as_ref())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layout() {
        let t = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let b = encode_tensors([("ab", &t)]);
        let mut expected = b"MMDL".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        expected.extend((-2.0f64).to_le_bytes());
        assert_eq!(b, expected);
        assert_eq!(decode_tensors(&b).unwrap(), vec![("ab".to_string(), t)]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::init(&mut rng);
        let bytes = encode_tensors(p.tensors());
        let back = ModelParams::from_named(decode_tensors(&bytes).unwrap()).unwrap();
        assert_eq!(encode_tensors(back.tensors()), bytes);
    }

    #[test]
    fn malformed() {
        assert!(matches!(decode_tensors(b"MMDX\x01\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_tensors(b"MMDL\x02\0\0\0"), Err(Error::Format(_))));
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = encode_tensors([("x", &t)]);
        assert!(matches!(decode_tensors(&b[..b.len() - 3]), Err(Error::Format(_))));
        let mut nan = b.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_tensors(&nan), Err(Error::Integrity(_))));
    }
}
