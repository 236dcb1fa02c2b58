//! Oriented grasp rectangles and the planar transforms shared by the pipeline
//! stages: corner expansion, rotated IoU, grasp-angle arithmetic, crop/pad
//! mapping and square-crop rotation.
//!
//! Coordinates are image coordinates: `x` is the column, `y` the row, and the
//! `y` axis points down. Angles are in degrees and positive angles turn
//! counterclockwise as the image is displayed, so rotating an image by `r`
//! degrees adds `r` to the angle of every grasp drawn on it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskops::{BinaryMask, PixelBox};
use crate::raster::RgbImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid grasp rectangle: {0}")]
    InvalidGrasp(String),
    #[error("degenerate bounding box ({x0}, {y0}, {x1}, {y1})")]
    DegenerateBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("crop is not square ({width}x{height})")]
    NonSquareCrop { width: usize, height: usize },
    #[error("raster is {found_width}x{found_height}, expected {expected_width}x{expected_height}")]
    RasterShape {
        expected_width: usize,
        expected_height: usize,
        found_width: usize,
        found_height: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Maps any angle in degrees onto the grasp range `(-90, 90]`.
///
/// A grasp and its half-turn twin are the same grasp, so angles are taken
/// modulo 180. The closed endpoint is `+90`; `-90` canonicalizes to `+90`.
pub fn normalize_theta(degrees: f64) -> f64 {
    let mut t = degrees.rem_euclid(180.0);
    if t > 90.0 {
        t -= 180.0;
    }
    if t <= -90.0 {
        t += 180.0;
    }
    t
}

/// Planar parallel-jaw grasp `(x, y, w, h, theta)` with an optional model
/// confidence. `w` is the gripper opening measured along `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl GraspRect {
    /// Builds a validated grasp; `theta == -90` is stored as `+90`.
    pub fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeometryError> {
        let g = Self {
            x,
            y,
            w,
            h,
            theta: if theta == -90.0 { 90.0 } else { theta },
            confidence: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_confidence(mut self, confidence: f64) -> Result<Self, GeometryError> {
        self.confidence = Some(confidence);
        self.validate()?;
        Ok(self)
    }

    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Pixel holding the grasp center, using rounded coordinates.
    pub fn center_pixel(&self) -> (i64, i64) {
        (self.x.round() as i64, self.y.round() as i64)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.x, self.y, self.w, self.h, self.theta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidGrasp("non-finite field".into()));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(GeometryError::InvalidGrasp(format!(
                "w and h must be positive (w={}, h={})",
                self.w, self.h
            )));
        }
        if !(-90.0..=90.0).contains(&self.theta) {
            return Err(GeometryError::InvalidGrasp(format!(
                "theta {} outside [-90, 90]",
                self.theta
            )));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(GeometryError::InvalidGrasp(format!("confidence {c} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn shoelace(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

/// Absolute polygon area by the shoelace formula.
pub fn polygon_area(poly: &[Point]) -> f64 {
    shoelace(poly).abs()
}

/// Corners of a grasp rectangle, ordered with positive signed area in `(x, y)`.
pub fn rect_corners(g: &GraspRect) -> [Point; 4] {
    let (s, c) = g.theta.to_radians().sin_cos();
    // width axis and height axis in image coordinates (y down)
    let (ux, uy) = (c * g.w / 2.0, -s * g.w / 2.0);
    let (vx, vy) = (-s * g.h / 2.0, -c * g.h / 2.0);
    let p = |a: f64, b: f64| Point::new(g.x + a * ux + b * vx, g.y + a * uy + b * vy);
    let corners = [p(-1.0, -1.0), p(1.0, -1.0), p(1.0, 1.0), p(-1.0, 1.0)];
    if shoelace(&corners) < 0.0 {
        [corners[0], corners[3], corners[2], corners[1]]
    } else {
        corners
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn segment_line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Clips `subject` against the convex polygon `clip` (positive orientation).
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let scale = clip
        .iter()
        .chain(subject.iter())
        .fold(1.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()));
    let eps = 1e-12 * scale * scale;
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: Point| cross(a, b, p) >= -eps;
        let mut prev = input[input.len() - 1];
        for &cur in &input {
            match (inside(prev), inside(cur)) {
                (true, true) => output.push(cur),
                (false, true) => {
                    output.push(segment_line_intersection(prev, cur, a, b));
                    output.push(cur);
                }
                (true, false) => output.push(segment_line_intersection(prev, cur, a, b)),
                (false, false) => {}
            }
            prev = cur;
        }
    }
    output
}

/// Intersection over union of two oriented rectangles, by convex clipping.
pub fn rotated_iou(a: &GraspRect, b: &GraspRect) -> f64 {
    let reach_a = (a.w * a.w + a.h * a.h).sqrt() / 2.0;
    let reach_b = (b.w * b.w + b.h * b.h).sqrt() / 2.0;
    if (a.x - b.x).hypot(a.y - b.y) >= reach_a + reach_b {
        return 0.0;
    }
    let pa = rect_corners(a);
    let pb = rect_corners(b);
    let area_a = polygon_area(&pa);
    let area_b = polygon_area(&pb);
    let inter = polygon_area(&clip_convex(&pa, &pb)).min(area_a).min(area_b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Angular distance between two grasp angles under half-turn symmetry, in `[0, 90]`.
pub fn angle_diff(theta_a: f64, theta_b: f64) -> f64 {
    let d = (theta_a - theta_b).abs() % 180.0;
    d.min(180.0 - d)
}

/// Half-open extent `[x0, x1) x [y0, y1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

impl From<PixelBox> for BBox {
    fn from(b: PixelBox) -> Self {
        BBox::new(b.x0 as f64, b.y0 as f64, (b.x1 + 1) as f64, (b.y1 + 1) as f64)
    }
}

pub const DEFAULT_CROP_SIDE: usize = 256;

/// Maps a source bounding box into a `side x side` square: the longest box side
/// is scaled to `side`, aspect is kept and the short side is centered with
/// zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub bbox: BBox,
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub side: usize,
}

pub fn make_crop_transform(bbox: BBox, side: usize) -> Result<CropTransform, GeometryError> {
    let (w, h) = (bbox.width(), bbox.height());
    if !(w > 0.0 && h > 0.0) || side == 0 {
        return Err(GeometryError::DegenerateBox {
            x0: bbox.x0,
            y0: bbox.y0,
            x1: bbox.x1,
            y1: bbox.y1,
        });
    }
    let target = side as f64;
    let scale = target / w.max(h);
    Ok(CropTransform {
        bbox,
        scale,
        pad_x: ((target - w * scale) / 2.0).floor().max(0.0),
        pad_y: ((target - h * scale) / 2.0).floor().max(0.0),
        side,
    })
}

impl CropTransform {
    pub fn forward(&self, p: Point) -> Point {
        Point::new(
            (p.x - self.bbox.x0) * self.scale + self.pad_x,
            (p.y - self.bbox.y0) * self.scale + self.pad_y,
        )
    }

    pub fn inverse(&self, q: Point) -> Point {
        Point::new(
            (q.x - self.pad_x) / self.scale + self.bbox.x0,
            (q.y - self.pad_y) / self.scale + self.bbox.y0,
        )
    }

    /// Source pixel sampled by crop pixel `(u, v)`, if it falls inside the box.
    fn source_pixel(&self, u: usize, v: usize) -> Option<(i64, i64)> {
        let p = self.inverse(Point::new(u as f64 + 0.5, v as f64 + 0.5));
        if p.x < self.bbox.x0 || p.x >= self.bbox.x1 || p.y < self.bbox.y0 || p.y >= self.bbox.y1 {
            return None;
        }
        Some((p.x.floor() as i64, p.y.floor() as i64))
    }

    /// Crops and pads a full-frame mask (nearest-neighbor sampling).
    pub fn crop_mask(&self, mask: &BinaryMask) -> BinaryMask {
        BinaryMask::from_fn(self.side, self.side, |u, v| match self.source_pixel(u, v) {
            Some((x, y)) => mask.get_signed(x, y),
            None => false,
        })
    }

    /// Crops and pads a full-frame image (nearest-neighbor sampling).
    pub fn crop_image(&self, image: &RgbImage) -> RgbImage {
        let mut out = RgbImage::new(self.side, self.side);
        for v in 0..self.side {
            for u in 0..self.side {
                if let Some((x, y)) = self.source_pixel(u, v) {
                    if x >= 0 && y >= 0 && (x as usize) < image.width() && (y as usize) < image.height() {
                        out.put(u, v, image.pixel(x as usize, y as usize));
                    }
                }
            }
        }
        out
    }

    /// Maps a crop-space mask back onto a `width x height` frame. Pixels outside
    /// the source box stay zero.
    pub fn uncrop_mask(&self, crop: &BinaryMask, width: usize, height: usize) -> Result<BinaryMask, GeometryError> {
        if crop.width() != self.side || crop.height() != self.side {
            return Err(GeometryError::RasterShape {
                expected_width: self.side,
                expected_height: self.side,
                found_width: crop.width(),
                found_height: crop.height(),
            });
        }
        let x_lo = self.bbox.x0.floor().max(0.0) as usize;
        let y_lo = self.bbox.y0.floor().max(0.0) as usize;
        let x_hi = (self.bbox.x1.ceil().max(0.0) as usize).min(width);
        let y_hi = (self.bbox.y1.ceil().max(0.0) as usize).min(height);
        let mut out = BinaryMask::new(width, height);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let q = self.forward(Point::new(x as f64 + 0.5, y as f64 + 0.5));
                if crop.get_signed(q.x.floor() as i64, q.y.floor() as i64) {
                    out.set(x, y, true);
                }
            }
        }
        Ok(out)
    }
}

/// Square rasters that can be turned about their center.
pub trait SquareRaster: Clone {
    fn dims(&self) -> (usize, usize);
    /// Exact counterclockwise quarter turn.
    fn quarter_turn(&self) -> Self;
    /// Counterclockwise rotation by an arbitrary angle with resampling.
    fn rotate_resampled(&self, degrees: f64) -> Self;
}

/// Rotates a square crop counterclockwise about its center. Multiples of 90
/// degrees are exact index permutations; other angles resample (nearest for
/// masks, bilinear for images) and pixels rotated in from outside the frame
/// are zero.
pub fn rotate_crop<R: SquareRaster>(raster: &R, degrees: i32) -> Result<R, GeometryError> {
    let (width, height) = raster.dims();
    if width != height {
        return Err(GeometryError::NonSquareCrop { width, height });
    }
    let d = degrees.rem_euclid(360);
    if d % 90 == 0 {
        let mut out = raster.clone();
        for _ in 0..d / 90 {
            out = out.quarter_turn();
        }
        Ok(out)
    } else {
        Ok(raster.rotate_resampled(d as f64))
    }
}

/// For each destination pixel, the (fractional) source position under a
/// counterclockwise rotation about the crop center.
fn rotation_source(n: usize, degrees: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = degrees.to_radians().sin_cos();
    move |x, y| {
        let dx = x as f64 - c;
        let dy = y as f64 - c;
        (c + dx * co - dy * s, c + dx * s + dy * co)
    }
}

impl SquareRaster for BinaryMask {
    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn quarter_turn(&self) -> Self {
        let n = self.width();
        BinaryMask::from_fn(n, n, |x, y| self.get(n - 1 - y, x))
    }

    fn rotate_resampled(&self, degrees: f64) -> Self {
        let n = self.width();
        let src = rotation_source(n, degrees);
        BinaryMask::from_fn(n, n, |x, y| {
            let (sx, sy) = src(x, y);
            self.get_signed(sx.round() as i64, sy.round() as i64)
        })
    }
}

impl SquareRaster for RgbImage {
    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn quarter_turn(&self) -> Self {
        let n = self.width();
        let mut out = RgbImage::new(n, n);
        for y in 0..n {
            for x in 0..n {
                out.put(x, y, self.pixel(n - 1 - y, x));
            }
        }
        out
    }

    fn rotate_resampled(&self, degrees: f64) -> Self {
        let n = self.width();
        let src = rotation_source(n, degrees);
        let data = self.as_raw();
        let mut out = vec![0u8; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = src(x, y);
                let o = (y * n + x) * 3;
                out[o..o + 3].copy_from_slice(&bilinear(data, n, sx, sy));
            }
        }
        RgbImage::from_raw(n, n, out).expect("buffer matches dimensions")
    }
}

/// Bilinear sample of an `n x n` RGB buffer; outside pixels read as zero.
#[inline]
fn bilinear(data: &[u8], n: usize, sx: f64, sy: f64) -> [u8; 3] {
    if !(sx >= -1.0 && sy >= -1.0 && sx < n as f64 && sy < n as f64) {
        return [0; 3];
    }
    let last = n as i64 - 1;
    // truncation of a non-negative value is floor, without a libm call
    let (x0, y0) = ((sx + 1.0) as i64 - 1, (sy + 1.0) as i64 - 1);
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let (w00, w10) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy));
    let (w01, w11) = ((1.0 - fx) * fy, fx * fy);
    let mut px = [0u8; 3];
    if x0 >= 0 && y0 >= 0 && x0 < last && y0 < last {
        let i = (y0 as usize * n + x0 as usize) * 3;
        let j = i + n * 3;
        for ch in 0..3 {
            let v = data[i + ch] as f64 * w00
                + data[i + 3 + ch] as f64 * w10
                + data[j + ch] as f64 * w01
                + data[j + 3 + ch] as f64 * w11;
            px[ch] = (v + 0.5) as u8;
        }
        return px;
    }
    let fetch = |x: i64, y: i64| -> [f64; 3] {
        if x < 0 || y < 0 || x > last || y > last {
            [0.0; 3]
        } else {
            let i = (y as usize * n + x as usize) * 3;
            [data[i] as f64, data[i + 1] as f64, data[i + 2] as f64]
        }
    };
    let (p00, p10, p01, p11) = (
        fetch(x0, y0),
        fetch(x0 + 1, y0),
        fetch(x0, y0 + 1),
        fetch(x0 + 1, y0 + 1),
    );
    for ch in 0..3 {
        let v = p00[ch] * w00 + p10[ch] * w10 + p01[ch] * w01 + p11[ch] * w11;
        px[ch] = (v + 0.5) as u8;
    }
    px
}

/// `target.squared_distance(&rotate_crop(source, degrees)?)` without
/// resampling the all-zero part of `source`.
pub fn rotated_squared_distance(target: &RgbImage, source: &RgbImage, degrees: i32) -> Result<f64, GeometryError> {
    let n = source.width();
    if source.height() != n {
        return Err(GeometryError::NonSquareCrop {
            width: n,
            height: source.height(),
        });
    }
    if target.width() != n || target.height() != n {
        return Err(GeometryError::RasterShape {
            expected_width: n,
            expected_height: n,
            found_width: target.width(),
            found_height: target.height(),
        });
    }
    let d = degrees.rem_euclid(360);
    if d % 90 == 0 {
        return Ok(target.squared_distance(&rotate_crop(source, d)?));
    }
    let data = source.as_raw();
    let t = target.as_raw();
    let sq = |v: u8| (v as u64) * (v as u64);
    let total: u64 = t.iter().map(|&v| sq(v)).sum();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (k, px) in data.chunks_exact(3).enumerate() {
        if px != [0, 0, 0] {
            let (x, y) = (k % n, k / n);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x0 == usize::MAX {
        return Ok(total as f64);
    }
    // destination box covering every sample that can touch the support
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = (d as f64).to_radians().sin_cos();
    let (mut dx0, mut dy0, mut dx1, mut dy1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (px, py) in [
        (x0 as f64 - 2.0, y0 as f64 - 2.0),
        (x1 as f64 + 2.0, y0 as f64 - 2.0),
        (x0 as f64 - 2.0, y1 as f64 + 2.0),
        (x1 as f64 + 2.0, y1 as f64 + 2.0),
    ] {
        let (ux, uy) = (px - c, py - c);
        let (qx, qy) = (c + ux * co + uy * s, c - ux * s + uy * co);
        dx0 = dx0.min(qx);
        dy0 = dy0.min(qy);
        dx1 = dx1.max(qx);
        dy1 = dy1.max(qy);
    }
    let clamp = |v: f64| v.max(0.0).min(n as f64 - 1.0) as usize;
    let (bx0, by0, bx1, by1) = (
        clamp(dx0.floor()),
        clamp(dy0.floor()),
        clamp(dx1.ceil()),
        clamp(dy1.ceil()),
    );
    let src = rotation_source(n, d as f64);
    let mut sum = total;
    for y in by0..=by1 {
        for x in bx0..=bx1 {
            let (sx, sy) = src(x, y);
            let px = bilinear(data, n, sx, sy);
            let o = (y * n + x) * 3;
            for ch in 0..3 {
                let a = t[o + ch] as i64;
                let diff = a - px[ch] as i64;
                sum = sum - sq(t[o + ch]) + (diff * diff) as u64;
            }
        }
    }
    Ok(sum as f64)
}

/// Rotates a point counterclockwise (as displayed) about `center`.
pub fn rotate_point(p: Point, center: Point, degrees: f64) -> Point {
    let (s, c) = degrees.to_radians().sin_cos();
    let dx = p.x - center.x;
    let dy = p.y - center.y;
    Point::new(center.x + dx * c + dy * s, center.y - dx * s + dy * c)
}
