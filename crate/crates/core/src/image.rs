//! Binary Netpbm I/O (P6 colour frames, P5 masks) and bilinear resizing.

use thiserror::Error;

use crate::flow::OcclusionMask;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum PnmError {
    #[error("bad magic {found:?}, expected {expected}")]
    BadMagic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported maxval {0}, only 255 is supported")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("cannot encode tensor of shape {0}")]
    Shape(Shape),
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(PnmError::BadMagic {
            expected: magic,
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Header(format!("missing header field {i}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| PnmError::Header(format!("header field {i} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PnmError::Header("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PnmError::Header(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        data_start: pos,
    })
}

/// Decodes a P6 image into a `(1, 3, h, w)` tensor scaled to `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor<f32>, PnmError> {
    let hd = parse_header(bytes, "P6")?;
    let (h, w) = (hd.height, hd.width);
    let expected = 3 * h * w;
    let px = &bytes[hd.data_start..];
    if px.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            actual: px.len(),
        });
    }
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (i, rgb) in px[..expected].chunks_exact(3).enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            t.plane_mut(0, c)[i] = v as f32 / 255.0;
        }
    }
    Ok(t)
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes a `(1, 3, h, w)` tensor, clamping to `[0, 1]` and rounding half
/// up to 0..=255.
pub fn write_ppm(t: &Tensor<f32>) -> Result<Vec<u8>, PnmError> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(PnmError::Shape(s));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(3 * s.plane());
    let (r, g, b) = (t.plane(0, 0), t.plane(0, 1), t.plane(0, 2));
    for i in 0..s.plane() {
        out.extend_from_slice(&[quantize(r[i]), quantize(g[i]), quantize(b[i])]);
    }
    Ok(out)
}

/// Raw P5 grey image: `(height, width, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PnmError> {
    let hd = parse_header(bytes, "P5")?;
    let expected = hd.height * hd.width;
    let px = &bytes[hd.data_start..];
    if px.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            actual: px.len(),
        });
    }
    Ok((hd.height, hd.width, px[..expected].to_vec()))
}

pub fn write_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Occlusion mask from a P5 file: 255 traceable, 0 untraceable.
pub fn read_mask_pgm(bytes: &[u8]) -> Result<OcclusionMask, PnmError> {
    let (h, w, px) = read_pgm(bytes)?;
    Ok(OcclusionMask::from_bytes(h, w, &px))
}

pub fn write_mask_pgm(mask: &OcclusionMask) -> Vec<u8> {
    write_pgm(mask.height(), mask.width(), &mask.to_bytes())
}

/// Bilinear resize with half-pixel centres, per sample and channel.
pub fn resize_bilinear(x: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let s = x.shape();
    if (s.h, s.w) == (height, width) {
        return x.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(height, s.h);
    let xs = axis(width, s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, height, width));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let (r0, r1) = (&src[y0 * s.w..(y0 + 1) * s.w], &src[y1 * s.w..(y1 + 1) * s.w]);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * width + ox] = top + (bot - top) * fy;
                }
            }
        }
    }
    out
}
