use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::micromodel::Tensor;
use crate::primitives::Grid;

/// An 8-bit image, interleaved row-major. One channel is PGM, three is PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !matches!(channels, 1 | 3) {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height} with {channels} channels"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height}x{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// CHW tensor in [0, 1] with 1 or 3 channels to an 8-bit image.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::ShapeMismatch(format!("expected CxHxW, got {:?}", t.shape())));
    };
    let d = t.data();
    let mut data = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            data.push(quantize(d[ch * h * w + p]));
        }
    }
    Image::new(w, h, c, data)
}

pub fn image_to_tensor(img: &Image) -> Tensor {
    let (c, hw) = (img.channels, img.width * img.height);
    let mut data = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            data[ch * hw + p] = img.data[p * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![c, img.height, img.width], data).expect("finite")
}

/// Min-max scaled grayscale rendering of a grid; a constant grid is black.
pub fn grid_to_heatmap(grid: &Grid) -> Image {
    let v = grid.values();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        v.iter().map(|&x| quantize((x - lo) / (hi - lo))).collect()
    } else {
        vec![0; v.len()]
    };
    Image::new(grid.width(), grid.height(), 1, data).expect("grid is non-empty")
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("malformed PNM header".into()))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Format("not a binary PPM/PGM file".into())),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number()?;
    let height = hdr.number()?;
    let maxval = hdr.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed PNM header".into()));
    }
    let payload = &bytes[hdr.pos + 1..];
    if payload.len() != width * height * channels {
        return Err(Error::Format(format!(
            "PNM payload has {} bytes, expected {}",
            payload.len(),
            width * height * channels
        )));
    }
    Image::new(width, height, channels, payload.to_vec())
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&read_file(path.as_ref())?)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pnm(img))
}
