//! Binary PGM (P5) and PPM (P6) with maxval 255.

use crate::error::{AqsError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM (interleaved RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    encode(&Raster { width, height, channels: 1, data: data.to_vec() })
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    encode(&Raster { width, height, channels: 3, data: rgb.to_vec() })
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> AqsError {
        AqsError::Parse { kind: "netpbm", offset: self.pos, msg: msg.into() }
    }

    fn skip_space(&mut self) {
        while let Some(&c) = self.b.get(self.pos) {
            if c == b'#' {
                while self.b.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.b.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        let s = std::str::from_utf8(&self.b[start..self.pos]).unwrap();
        s.parse().map_err(|_| AqsError::Parse { kind: "netpbm", offset: start, msg: format!("{what} out of range") })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut c = Cursor { b: bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("expected magic P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = {
        c.skip_space();
        c.pos
    };
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(AqsError::Parse { kind: "netpbm", offset: maxval_at, msg: format!("unsupported maxval {maxval}, expected 255") });
    }
    if !c.b.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected a single whitespace byte before the raster"));
    }
    c.pos += 1;
    if width == 0 || height == 0 {
        return Err(c.err("zero image extent"));
    }
    let n = width * height * channels;
    let rest = &bytes[c.pos..];
    if rest.len() != n {
        let at = c.pos + rest.len().min(n);
        return Err(AqsError::Parse { kind: "netpbm", offset: at, msg: format!("raster holds {} bytes, expected {n}", rest.len()) });
    }
    Ok(Raster { width, height, channels, data: rest.to_vec() })
}

/// Decodes and checks the channel count.
pub fn decode_as(bytes: &[u8], channels: usize) -> Result<Raster> {
    let r = decode(bytes)?;
    if r.channels != channels {
        let want = if channels == 3 { "P6" } else { "P5" };
        return Err(AqsError::Parse { kind: "netpbm", offset: 0, msg: format!("expected a {want} file") });
    }
    Ok(r)
}

/// Missed → green, mistaken → red, background → BT.601 luma of the source.
pub fn qa_overlay(rgb: &[u8], labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rgb.len());
    for (px, &l) in rgb.chunks_exact(3).zip(labels) {
        match l {
            1 => out.extend_from_slice(&[0, 255, 0]),
            2 => out.extend_from_slice(&[255, 0, 0]),
            _ => {
                let y = (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64).round() as u8;
                out.extend_from_slice(&[y, y, y]);
            }
        }
    }
    out
}
