//! RGB images and the raw frame-stack file format.
//!
//! A frame stack file is a 16-byte little-endian header
//! `width u32, height u32, channels u32, count u32` followed by
//! `count * height * width * channels` bytes, interleaved RGB per pixel in
//! row-major order.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};

/// `3 x H x W` image stored channel-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = vec![0.0; 3 * width * height];
        for (c, &v) in rgb.iter().enumerate() {
            data[c * width * height..(c + 1) * width * height].fill(v);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, v: usize, u: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, c: usize, v: usize, u: usize, value: f64) {
        self.data[(c * self.height + v) * self.width + u] = value;
    }

    pub fn pixel(&self, v: usize, u: usize) -> [f64; 3] {
        [self.at(0, v, u), self.at(1, v, u), self.at(2, v, u)]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Values clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Nearest 8-bit level per value, as stored in frame files.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a stack of equally sized images; values are quantized to 8 bits.
pub fn encode_frames(images: &[Image]) -> Result<Vec<u8>> {
    let (w, h) = images.first().map_or((0, 0), |i| (i.width, i.height));
    if images.iter().any(|i| (i.width, i.height) != (w, h)) {
        return Err(Error::shape("frame stack mixes image sizes"));
    }
    let mut out = vec![0u8; 16];
    LittleEndian::write_u32(&mut out[0..4], w as u32);
    LittleEndian::write_u32(&mut out[4..8], h as u32);
    LittleEndian::write_u32(&mut out[8..12], Image::CHANNELS as u32);
    LittleEndian::write_u32(&mut out[12..16], images.len() as u32);
    out.reserve(images.len() * w * h * 3);
    for img in images {
        for v in 0..h {
            for u in 0..w {
                for c in 0..3 {
                    out.push(to_u8(img.at(c, v, u)));
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_frames(bytes: &[u8]) -> Result<Vec<Image>> {
    let bad = |msg: &str| Error::Parse {
        path: "<frames>".into(),
        msg: msg.to_string(),
    };
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let w = LittleEndian::read_u32(&bytes[0..4]) as usize;
    let h = LittleEndian::read_u32(&bytes[4..8]) as usize;
    let ch = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let count = LittleEndian::read_u32(&bytes[12..16]) as usize;
    if ch != Image::CHANNELS {
        return Err(bad("only 3-channel frames are supported"));
    }
    let per = w * h * ch;
    if bytes.len() != 16 + per * count {
        return Err(bad("payload length does not match header"));
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let body = &bytes[16 + k * per..16 + (k + 1) * per];
        let mut img = Image::filled(w, h, [0.0; 3]);
        for v in 0..h {
            for u in 0..w {
                for c in 0..3 {
                    img.set(c, v, u, body[(v * w + u) * 3 + c] as f64 / 255.0);
                }
            }
        }
        out.push(img);
    }
    Ok(out)
}

pub fn write_frames(path: &Path, images: &[Image]) -> Result<()> {
    crate::io::write_atomic(path, &encode_frames(images)?)
}

pub fn read_frames(path: &Path) -> Result<Vec<Image>> {
    let bytes = crate::io::read_bytes(path)?;
    decode_frames(&bytes).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_images_survive_encoding() {
        let mut a = Image::filled(3, 2, [10.0 / 255.0, 0.0, 1.0]);
        a.set(1, 1, 2, 77.0 / 255.0);
        let b = Image::filled(3, 2, [0.5, 0.25, 0.75]).quantized();
        let bytes = encode_frames(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(bytes.len(), 16 + 2 * 18);
        assert_eq!(decode_frames(&bytes).unwrap(), vec![a, b]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_frames(&[Image::filled(2, 2, [0.0; 3])]).unwrap();
        assert!(decode_frames(&bytes[..bytes.len() - 1]).is_err());
    }
}
