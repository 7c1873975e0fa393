//! 8-bit RGB images at the edge of the system: tensor conversion, PNG I/O
//! and simple montages.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Maps a `1×3×H×W` tensor in `[-1, 1]` to bytes via `round((x+1)·127.5)`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4("to_image")?;
        if n != 1 || c != 3 {
            return Err(Error::shape("to_image", format!("expected 1x3xHxW, got {:?}", t.shape())));
        }
        let mut img = Self::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (ch, p) in px.iter_mut().enumerate() {
                    let v = t.at(0, ch, y, x).to_f64_lossy().clamp(-1.0, 1.0);
                    *p = ((v + 1.0) * 127.5).round() as u8;
                }
                img.put(x, y, px);
            }
        }
        Ok(img)
    }

    /// Inverse of [`RgbImage::from_tensor`] up to quantization.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut data = vec![T::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = self.get(x, y);
                for ch in 0..3 {
                    data[(ch * h + y) * w + x] = T::from_f64_lossy(px[ch] as f64 / 127.5 - 1.0);
                }
            }
        }
        Tensor::from_parts(vec![1, 3, h, w], data)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decodes 8-bit RGB, RGBA, grayscale or palette PNGs to RGB.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(Error::Image(format!("unsupported color type {other:?}"))),
        };
        let mut img = Self::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = &buf[y * info.line_size + x * channels..];
                let c = match channels {
                    1 | 2 => [px[0]; 3],
                    _ => [px[0], px[1], px[2]],
                };
                img.put(x, y, c);
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }
}

/// Tiles equally sized images row by row with a `gap`-pixel white border.
pub fn montage(rows: &[Vec<RgbImage>], gap: usize) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Image("empty montage".into()))?;
    let (tw, th) = (first.width, first.height);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * tw + (cols + 1) * gap;
    let height = rows.len() * th + (rows.len() + 1) * gap;
    let mut out = RgbImage::filled(width, height, [255, 255, 255]);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if (tile.width, tile.height) != (tw, th) {
                return Err(Error::Image("montage tiles differ in size".into()));
            }
            let (ox, oy) = (gap + c * (tw + gap), gap + r * (th + gap));
            for y in 0..th {
                for x in 0..tw {
                    out.put(ox + x, oy + y, tile.get(x, y));
                }
            }
        }
    }
    Ok(out)
}
