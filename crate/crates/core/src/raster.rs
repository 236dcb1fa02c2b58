//! 8-bit RGB images and PNG input/output.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{GraspRect, Point};
use crate::maskops::BinaryMask;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png decode error on {path}: {message}")]
    Decode { path: String, message: String },
    #[error("png encode error on {path}: {message}")]
    Encode { path: String, message: String },
    #[error("image is {found_width}x{found_height}, mask is {width}x{height}")]
    ShapeMismatch {
        width: usize,
        height: usize,
        found_width: usize,
        found_height: usize,
    },
}

/// Row-major interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, p: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&p);
    }

    /// Pixelwise product with a binary mask; background becomes exactly zero.
    pub fn masked(&self, mask: &BinaryMask) -> Result<RgbImage, RasterError> {
        if mask.width() != self.width || mask.height() != self.height {
            return Err(RasterError::ShapeMismatch {
                width: mask.width(),
                height: mask.height(),
                found_width: self.width,
                found_height: self.height,
            });
        }
        let mut out = self.clone();
        for (i, &bit) in mask.bits().iter().enumerate() {
            if !bit {
                out.data[i * 3..i * 3 + 3].fill(0);
            }
        }
        Ok(out)
    }

    /// Squared L2 distance over all channels. Shapes must agree.
    pub fn squared_distance(&self, other: &RgbImage) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as i64 - b as i64;
                (d * d) as u64
            })
            .sum::<u64>() as f64
    }

    pub fn to_rgba(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for px in self.data.chunks_exact(3) {
            out.extend_from_slice(px);
            out.push(255);
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<RgbImage, RasterError> {
        let shown = path.display().to_string();
        let file = File::open(path).map_err(|source| RasterError::Io {
            path: shown.clone(),
            source,
        })?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| RasterError::Decode {
            path: shown.clone(),
            message: e.to_string(),
        })?;
        let size = reader.output_buffer_size().ok_or_else(|| RasterError::Decode {
            path: shown.clone(),
            message: "image too large".into(),
        })?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| RasterError::Decode {
            path: shown.clone(),
            message: e.to_string(),
        })?;
        let (w, h) = (info.width as usize, info.height as usize);
        let buf = &buf[..info.buffer_size()];
        let data: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => {
                return Err(RasterError::Decode {
                    path: shown,
                    message: "unexpanded palette image".into(),
                })
            }
        };
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, &self.data)
    }
}

/// Blends `color` into the pixels under `mask` with weight `alpha`.
pub fn overlay_mask(image: &mut RgbImage, mask: &BinaryMask, color: [u8; 3], alpha: f64) {
    for (x, y) in mask.iter_set() {
        if x < image.width && y < image.height {
            let p = image.pixel(x, y);
            let mut q = [0u8; 3];
            for c in 0..3 {
                q[c] = (p[c] as f64 * (1.0 - alpha) + color[c] as f64 * alpha).round() as u8;
            }
            image.put(x, y, q);
        }
    }
}

/// Draws a straight segment between two points.
pub fn draw_line(image: &mut RgbImage, a: Point, b: Point, color: [u8; 3]) {
    let steps = (b.x - a.x).abs().max((b.y - a.y).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.x + (b.x - a.x) * t).round();
        let y = (a.y + (b.y - a.y) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < image.width && (y as usize) < image.height {
            image.put(x as usize, y as usize, color);
        }
    }
}

/// Outlines a grasp rectangle; the jaw edges (the `h` sides) are drawn in
/// `jaw_color`.
pub fn draw_grasp(image: &mut RgbImage, g: &GraspRect, color: [u8; 3], jaw_color: [u8; 3]) {
    let (s, c) = g.theta.to_radians().sin_cos();
    let (ux, uy) = (c * g.w / 2.0, -s * g.w / 2.0);
    let (vx, vy) = (-s * g.h / 2.0, -c * g.h / 2.0);
    let p = |a: f64, b: f64| Point::new(g.x + a * ux + b * vx, g.y + a * uy + b * vy);
    draw_line(image, p(-1.0, -1.0), p(1.0, -1.0), color);
    draw_line(image, p(-1.0, 1.0), p(1.0, 1.0), color);
    draw_line(image, p(-1.0, -1.0), p(-1.0, 1.0), jaw_color);
    draw_line(image, p(1.0, -1.0), p(1.0, 1.0), jaw_color);
}

/// Writes a grayscale PNG of a mask (set bits white).
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<(), RasterError> {
    let data: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, &data)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<(), RasterError> {
    let shown = path.display().to_string();
    let file = File::create(path).map_err(|source| RasterError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| RasterError::Encode {
        path: shown.clone(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 3);
        img.put(4, 2, [1, 2, 3]);
        img.put(0, 0, [250, 128, 7]);
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        assert_eq!(RgbImage::load_png(&path).unwrap(), img);
    }

    #[test]
    fn masked_zeroes_background() {
        let img = RgbImage::filled(4, 2, [9, 9, 9]);
        let mask = BinaryMask::from_fn(4, 2, |x, _| x < 2);
        let out = img.masked(&mask).unwrap();
        assert_eq!(out.pixel(1, 1), [9, 9, 9]);
        assert_eq!(out.pixel(2, 0), [0, 0, 0]);
        assert!(img.masked(&BinaryMask::new(3, 2)).is_err());
    }
}
