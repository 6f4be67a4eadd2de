use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::primitives::Grid;

const MAGIC: &[u8] = b"\x93NUMPY";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Value of `'key':` in a numpy header dict, up to the next top-level comma.
fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let start = header
        .find(&pat)
        .ok_or_else(|| format_err(format!("npy header lacks {key}")))?;
    let rest = header[start + pat.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| format_err("malformed npy header"))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| format_err("malformed npy header"))?;
    Ok(rest[..end].trim())
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(format_err("not an npy file"));
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(format_err(format!(
            "unsupported npy version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = bytes
        .get(10..10 + hlen)
        .ok_or_else(|| format_err("truncated npy header"))?;
    let header = std::str::from_utf8(header).map_err(|_| format_err("npy header is not ASCII"))?;

    let descr = header_field(header, "descr")?.trim_matches(|c| c == '\'' || c == '"');
    let width_bytes = match descr {
        "<f8" => 8,
        "<f4" => 4,
        other => return Err(format_err(format!("unsupported dtype {other}"))),
    };
    match header_field(header, "fortran_order")? {
        "False" => {}
        "True" => return Err(format_err("fortran-ordered arrays are not supported")),
        other => return Err(format_err(format!("bad fortran_order {other}"))),
    }
    let shape = header_field(header, "shape")?;
    let dims = shape
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format_err(format!("bad shape {shape}"))))
        .collect::<Result<Vec<_>>>()?;
    let [h, w] = dims[..] else {
        return Err(format_err(format!("expected a 2-D array, got shape {shape}")));
    };

    let payload = &bytes[10 + hlen..];
    if payload.len() != h * w * width_bytes {
        return Err(format_err(format!(
            "npy payload has {} bytes, expected {}",
            payload.len(),
            h * w * width_bytes
        )));
    }
    let values: Vec<f64> = if width_bytes == 8 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Grid::new(w, h, values)
}

pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        grid.height(),
        grid.width()
    );
    // Pad so the payload starts on a 64-byte boundary.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + grid.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in grid.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    decode_grid(&read_file(path.as_ref())?)
}

pub fn write_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_grid(grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(descr: &str, fortran: &str, shape: &str, payload: &[u8]) -> Vec<u8> {
        let header = format!("{{'descr': '{descr}', 'fortran_order': {fortran}, 'shape': {shape}, }}\n");
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn header_alignment() {
        let bytes = encode_grid(&Grid::zeros(3, 2));
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes[10 + hlen - 1], b'\n');
    }

    #[test]
    fn reads_f4() {
        let payload: Vec<u8> = [1.5f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let g = decode_grid(&raw("<f4", "False", "(1, 2)", &payload)).unwrap();
        assert_eq!((g.height(), g.width()), (1, 2));
        assert_eq!(g.values(), &[1.5, -2.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let eight = [0u8; 8];
        for bytes in [
            raw(">f8", "False", "(1, 1)", &eight),
            raw("<i8", "False", "(1, 1)", &eight),
            raw("<f8", "True", "(1, 1)", &eight),
            raw("<f8", "False", "(1,)", &eight),
            raw("<f8", "False", "(1, 1, 1)", &eight),
            raw("<f8", "False", "(1, 2)", &eight),
            b"NUMPY\x01\x00".to_vec(),
        ] {
            assert!(matches!(decode_grid(&bytes), Err(Error::Format(_))));
        }
        let mut v2 = encode_grid(&Grid::zeros(1, 1));
        v2[6] = 2;
        assert!(matches!(decode_grid(&v2), Err(Error::Format(_))));
        let nan = raw("<f8", "False", "(1, 1)", &f64::NAN.to_le_bytes());
        assert!(matches!(decode_grid(&nan), Err(Error::Integrity(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1e6..1e6)).collect();
            let g = Grid::new(w, h, values).unwrap();
            let back = decode_grid(&encode_grid(&g)).unwrap();
            prop_assert_eq!((back.width(), back.height()), (w, h));
            for (a, b) in g.values().iter().zip(back.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
