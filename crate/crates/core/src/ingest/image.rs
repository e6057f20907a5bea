//! Small image tensors and a portable anymap (PGM/PPM) codec.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Channel-major (`c, y, x`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(
                "image dimensions must be positive".into(),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                values.len()
            )));
        }
        if let Some(index) = values
            .iter()
            .position(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Set a pixel; the value is clamped into `[0, 1]`.
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.values[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Replace every channel of the box `(x, y, w, h)` (clipped to the
    /// image) with `fill`.
    pub fn fill_box(&mut self, x: usize, y: usize, w: usize, h: usize, fill: f64) {
        let fill = fill.clamp(0.0, 1.0);
        for c in 0..self.channels {
            for yy in y..(y + h).min(self.height) {
                let row = (c * self.height + yy) * self.width;
                for xx in x..(x + w).min(self.width) {
                    self.values[row + xx] = fill;
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// ITU-R 601 luma: `0.299 R + 0.587 G + 0.114 B`.
pub fn grayscale_transform(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels == 1 {
        return Err(Error::AlreadyGrayscale);
    }
    let plane = img.height * img.width;
    let (r, rest) = img.values.split_at(plane);
    let (g, b) = rest.split_at(plane);
    let values = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(img.height, img.width, 1, values)
}

pub fn read_pnm_file(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_pnm(&bytes)
}

/// Decode P2/P3 (ASCII) or P5/P6 (binary, 8 or 16 bit) anymaps.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let bad = |m: &str| Error::ImageDecode(m.to_string());
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| bad("missing magic"))?;
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        _ => return Err(bad("unsupported anymap magic")),
    };
    let mut header = [0usize; 3];
    for h in &mut header {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| bad("truncated header"))?;
        *h = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad image header"));
    }
    let count = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| bad("image too large"))?;
    let mut interleaved = Vec::with_capacity(count.min(1 << 24));
    if binary {
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let bpp = if maxval > 255 { 2 } else { 1 };
        let raster = bytes
            .get(pos..)
            .filter(|r| r.len() >= count * bpp)
            .ok_or_else(|| bad("truncated raster"))?;
        for i in 0..count {
            let v = if bpp == 2 {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
            } else {
                raster[i] as usize
            };
            interleaved.push(v);
        }
    } else {
        for _ in 0..count {
            let tok = next_token(bytes, &mut pos).ok_or_else(|| bad("truncated raster"))?;
            let v: usize = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad raster value"))?;
            interleaved.push(v);
        }
    }
    if interleaved.iter().any(|&v| v > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    let plane = width * height;
    let mut values = vec![0.0; count];
    for (i, v) in interleaved.into_iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        values[c * plane + p] = v as f64 / maxval as f64;
    }
    ImageTensor::new(height, width, channels, values)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Encode as 8-bit binary P5 (one channel) or P6 (three channels).
pub fn encode_pnm<W: Write>(mut w: W, img: &ImageTensor) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let plane = img.width * img.height;
    let mut raster = Vec::with_capacity(plane * img.channels);
    for p in 0..plane {
        for c in 0..img.channels {
            raster.push((img.values[c * plane + p] * 255.0).round() as u8);
        }
    }
    w.write_all(&raster)?;
    w.flush()?;
    Ok(())
}

pub fn write_pnm_file(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    encode_pnm(BufWriter::new(File::create(path)?), img)
}
