//! Dense binary masks: set algebra, overlap measures, hole-aware polygon
//! rasterization and the wire encodings (polygon rings, base64 bitstrings,
//! row-major run lengths).

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("first operand of overlap ratio is empty")]
    EmptyFirstOperand,
    #[error("mask is empty")]
    EmptyMask,
    #[error("polygon ring {ring} has {points} points, need at least 3")]
    MalformedPolygon { ring: usize, points: usize },
    #[error("bad mask encoding: {0}")]
    Encoding(String),
}

/// Row-major boolean raster.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, area {})", self.width, self.height, self.area())
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != width * height {
            return Err(MaskError::Encoding(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-range coordinates read as unset.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(MaskError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ))
        }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask, MaskError> {
        self.check_shape(other)?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Set pixels as `(x, y)` pairs, row-major.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }
}

pub fn mask_area(m: &BinaryMask) -> usize {
    m.area()
}

pub fn mask_and(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, MaskError> {
    a.zip_with(b, |x, y| x && y)
}

pub fn mask_or(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, MaskError> {
    a.zip_with(b, |x, y| x || y)
}

/// `a \ b`
pub fn mask_sub(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, MaskError> {
    a.zip_with(b, |x, y| x && !y)
}

/// `|a ∧ b|` without materializing the intersection.
pub fn intersection_area(a: &BinaryMask, b: &BinaryMask) -> Result<usize, MaskError> {
    a.check_shape(b)?;
    Ok(a.bits.iter().zip(&b.bits).filter(|(&x, &y)| x && y).count())
}

/// `|a ∧ b| / |a|`. The first operand is the denominator.
pub fn overlap_ratio(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    a.check_shape(b)?;
    let area = a.area();
    if area == 0 {
        return Err(MaskError::EmptyFirstOperand);
    }
    Ok(intersection_area(a, b)? as f64 / area as f64)
}

/// `|a ∧ b| / |a ∨ b|`; two empty masks score 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    a.check_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Inclusive pixel bounds of the set bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

pub fn mask_bbox(m: &BinaryMask) -> Result<PixelBox, MaskError> {
    let mut bbox: Option<PixelBox> = None;
    for (x, y) in m.iter_set() {
        bbox = Some(match bbox {
            None => PixelBox {
                x0: x,
                y0: y,
                x1: x,
                y1: y,
            },
            Some(b) => PixelBox {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x),
                y1: b.y1.max(y),
            },
        });
    }
    bbox.ok_or(MaskError::EmptyMask)
}

/// Mean of set-pixel indices.
pub fn mask_centroid(m: &BinaryMask) -> Result<Point, MaskError> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in m.iter_set() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(MaskError::EmptyMask);
    }
    Ok(Point::new(sx / n as f64, sy / n as f64))
}

/// Outer rings and hole rings in image coordinates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolygonRegion {
    pub outers: Vec<Vec<Point>>,
    #[serde(default)]
    pub holes: Vec<Vec<Point>>,
}

impl PolygonRegion {
    pub fn new(outers: Vec<Vec<Point>>, holes: Vec<Vec<Point>>) -> Self {
        Self { outers, holes }
    }

    pub fn is_empty(&self) -> bool {
        self.outers.is_empty()
    }

    /// From flat COCO-style rings `[x1, y1, x2, y2, ...]`.
    pub fn from_flat(outers: &[Vec<f64>], holes: &[Vec<f64>]) -> Result<Self, MaskError> {
        let unflatten = |rings: &[Vec<f64>]| -> Result<Vec<Vec<Point>>, MaskError> {
            rings
                .iter()
                .map(|r| {
                    if r.len() % 2 != 0 {
                        return Err(MaskError::Encoding(format!(
                            "polygon ring has odd coordinate count {}",
                            r.len()
                        )));
                    }
                    Ok(r.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect())
                })
                .collect()
        };
        Ok(Self {
            outers: unflatten(outers)?,
            holes: unflatten(holes)?,
        })
    }

    pub fn to_flat(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let flatten = |rings: &[Vec<Point>]| -> Vec<Vec<f64>> {
            rings
                .iter()
                .map(|r| r.iter().flat_map(|p| [p.x, p.y]).collect())
                .collect()
        };
        (flatten(&self.outers), flatten(&self.holes))
    }

    /// Applies `f` to every vertex.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> PolygonRegion {
        let map = |rings: &[Vec<Point>]| -> Vec<Vec<Point>> {
            rings.iter().map(|r| r.iter().map(|&p| f(p)).collect()).collect()
        };
        PolygonRegion {
            outers: map(&self.outers),
            holes: map(&self.holes),
        }
    }
}

/// Fills the `[lo, hi)` pixel spans whose centers lie inside `ring` on row `y`
/// (even-odd rule), calling `fill(x)` for each covered column.
fn ring_row_spans(ring: &[Point], y: f64, width: usize, mut fill: impl FnMut(usize)) {
    let mut xs: Vec<f64> = Vec::new();
    let n = ring.len();
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        // half-open in y so shared vertices are counted once
        if (a.y <= y) != (b.y <= y) {
            xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
        }
    }
    xs.sort_by(|p, q| p.total_cmp(q));
    for pair in xs.chunks_exact(2) {
        // pixel centers x + 0.5 in [pair[0], pair[1])
        let lo = (pair[0] - 0.5).ceil().max(0.0);
        let hi = (pair[1] - 0.5).ceil().min(width as f64);
        if hi > lo {
            for x in lo as usize..hi as usize {
                fill(x);
            }
        }
    }
}

/// Rasterizes a region by pixel centers: a pixel is set when its center lies
/// inside some outer ring (even-odd per ring) and inside no hole ring.
pub fn rasterize(region: &PolygonRegion, width: usize, height: usize) -> Result<BinaryMask, MaskError> {
    for (ring, r) in region.outers.iter().chain(&region.holes).enumerate() {
        if r.len() < 3 {
            return Err(MaskError::MalformedPolygon { ring, points: r.len() });
        }
    }
    let mut mask = BinaryMask::new(width, height);
    let mut row_hole = vec![false; width];
    for y in 0..height {
        let cy = y as f64 + 0.5;
        let row = y * width;
        for ring in &region.outers {
            ring_row_spans(ring, cy, width, |x| mask.bits[row + x] = true);
        }
        if region.holes.is_empty() {
            continue;
        }
        row_hole.fill(false);
        for ring in &region.holes {
            let mut inside = vec![false; width];
            ring_row_spans(ring, cy, width, |x| inside[x] = true);
            for (h, i) in row_hole.iter_mut().zip(inside) {
                *h |= i;
            }
        }
        for (x, &h) in row_hole.iter().enumerate() {
            if h {
                mask.bits[row + x] = false;
            }
        }
    }
    Ok(mask)
}

/// Packs bits row-major, most significant bit first, and base64-encodes them.
pub fn encode_bits(m: &BinaryMask) -> String {
    let mut bytes = vec![0u8; m.bits.len().div_ceil(8)];
    for (i, &b) in m.bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 0x80 >> (i % 8);
        }
    }
    BASE64.encode(bytes)
}

pub fn decode_bits(width: usize, height: usize, data: &str) -> Result<BinaryMask, MaskError> {
    let bytes = BASE64
        .decode(data)
        .map_err(|e| MaskError::Encoding(format!("base64: {e}")))?;
    let n = width * height;
    if bytes.len() != n.div_ceil(8) {
        return Err(MaskError::Encoding(format!(
            "{} bytes for {width}x{height} bits",
            bytes.len()
        )));
    }
    let bits = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    Ok(BinaryMask { width, height, bits })
}

/// Row-major run lengths, alternating unset/set and starting with unset.
pub fn encode_rle(m: &BinaryMask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &m.bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn decode_rle(width: usize, height: usize, counts: &[u32]) -> Result<BinaryMask, MaskError> {
    let n = width * height;
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != n as u64 {
        return Err(MaskError::Encoding(format!(
            "run lengths cover {total} pixels, mask has {n}"
        )));
    }
    let mut bits = Vec::with_capacity(n);
    let mut value = false;
    for &c in counts {
        bits.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    Ok(BinaryMask { width, height, bits })
}

/// A mask as it appears in manifests and protocol frames. `size` is
/// `[height, width]` and may be omitted where the frame size is implied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskWire {
    Polygons {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        size: Option<[usize; 2]>,
        polygons: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        holes: Vec<Vec<f64>>,
    },
    Rle {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        size: Option<[usize; 2]>,
        counts: Vec<u32>,
    },
    Bits {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        size: Option<[usize; 2]>,
        bits: String,
    },
}

impl MaskWire {
    pub fn from_region(region: &PolygonRegion, size: Option<[usize; 2]>) -> Self {
        let (polygons, holes) = region.to_flat();
        MaskWire::Polygons { size, polygons, holes }
    }

    pub fn rle(m: &BinaryMask) -> Self {
        MaskWire::Rle {
            size: Some([m.height, m.width]),
            counts: encode_rle(m),
        }
    }

    pub fn bits(m: &BinaryMask) -> Self {
        MaskWire::Bits {
            size: Some([m.height, m.width]),
            bits: encode_bits(m),
        }
    }

    pub fn size(&self) -> Option<[usize; 2]> {
        match self {
            MaskWire::Polygons { size, .. } | MaskWire::Rle { size, .. } | MaskWire::Bits { size, .. } => *size,
        }
    }

    pub fn region(&self) -> Result<Option<PolygonRegion>, MaskError> {
        match self {
            MaskWire::Polygons { polygons, holes, .. } => Ok(Some(PolygonRegion::from_flat(polygons, holes)?)),
            _ => Ok(None),
        }
    }

    /// Decodes into a raster. The embedded size wins over `frame`; one of the
    /// two must be present.
    pub fn decode(&self, frame: Option<(usize, usize)>) -> Result<BinaryMask, MaskError> {
        let (width, height) = match (self.size(), frame) {
            (Some([h, w]), Some((fw, fh))) if (w, h) != (fw, fh) => {
                return Err(MaskError::Encoding(format!(
                    "mask size {w}x{h} does not match frame {fw}x{fh}"
                )))
            }
            (Some([h, w]), _) => (w, h),
            (None, Some(f)) => f,
            (None, None) => return Err(MaskError::Encoding("mask size unknown".into())),
        };
        match self {
            MaskWire::Polygons { polygons, holes, .. } => {
                rasterize(&PolygonRegion::from_flat(polygons, holes)?, width, height)
            }
            MaskWire::Rle { counts, .. } => decode_rle(width, height, counts),
            MaskWire::Bits { bits, .. } => decode_bits(width, height, bits),
        }
    }
}
