//! Binary PPM (P6, maxval 255) I/O.
//!
//! Images are `1 x 3 x H x W` tensors with values in `[0, 1]`; a byte `v`
//! maps to `v / 255` and back by rounding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Converts `[0, 1]` to a byte, rounding to nearest.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps every value to the nearest 8-bit level.
pub fn quantize_8bit(x: &Tensor) -> Tensor {
    x.map(|v| f64::from(to_byte(v)) / 255.0)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("PPM holds one RGB image, got {:?}", image.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(d[ch * plane + p]));
        }
    }
    Ok(out)
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.buf.get(self.pos) {
                Some(b'#') => {
                    while self.buf.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
        if self.pos == start {
            return Err(Error::format(self.pos, "expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .expect("ASCII digits")
            .parse()
            .map_err(|_| Error::format(start, format!("{what} out of range")))
    }
}

pub fn decode_ppm(buf: &[u8]) -> Result<Tensor> {
    if !buf.starts_with(b"P6") {
        return Err(Error::format(0, "not a binary PPM (missing P6 magic)"));
    }
    let mut hd = Header { buf, pos: 2 };
    hd.skip_space()?;
    let w = hd.number("width")?;
    hd.skip_space()?;
    let h = hd.number("height")?;
    hd.skip_space()?;
    let at = hd.pos;
    let maxval = hd.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(at, format!("maxval {maxval} unsupported, expected 255")));
    }
    match buf.get(hd.pos) {
        Some(b) if b.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(Error::format(hd.pos, "expected a single whitespace byte after maxval")),
    }
    if w == 0 || h == 0 {
        return Err(Error::format(3, format!("empty image {w}x{h}")));
    }
    let plane = w
        .checked_mul(h)
        .filter(|p| p.checked_mul(3).is_some())
        .ok_or_else(|| Error::format(3, "image dimensions overflow"))?;
    let data = &buf[hd.pos..];
    if data.len() != 3 * plane {
        return Err(Error::format(
            hd.pos,
            format!("expected {} pixel bytes, found {}", 3 * plane, data.len()),
        ));
    }
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            out[ch * plane + p] = f64::from(data[3 * p + ch]) / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], out)
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}
