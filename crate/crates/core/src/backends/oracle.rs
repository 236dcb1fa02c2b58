//! Ground-truth oracles. Every output is a pure function of the inputs, the
//! dataset and the seed.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    AffordanceOneShot, AffordancePrediction, AffordanceSegmenter, BackendError, ClassScores, Classifier, CropView,
    GraspProposer, ImageEmbedder, NoiseConfig, OneShotQuery, PairEmbedder, SceneInput, Segmenter, TextEmbedder,
    ViewOrigin,
};
use crate::dataset::{Dataset, DatasetError, ObjectAnnotation, SceneAnnotation};
use crate::geometry::{normalize_theta, GraspRect};
use crate::maskops::{intersection_area, mask_bbox, BinaryMask};

pub const ANCHOR_DIM: usize = 64;
const ANCHOR_MAX_COSINE: f64 = 0.3;
const TRUE_LOGIT: f64 = 10.0;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(fnv1a(key.as_bytes()))))
}

fn gaussian_unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..ANCHOR_DIM).map(|_| normal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded unit anchors, one per name. Names are processed in sorted order and
/// redrawn until every pairwise cosine is below 0.3.
pub fn anchor_table<'a>(names: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, Vec<f64>> {
    let mut sorted: Vec<&str> = names.into_iter().collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for name in sorted {
        let mut rng = stream(0, &format!("anchor/{name}"));
        let v = loop {
            let v = gaussian_unit(&mut rng);
            if table.values().all(|a| dot(a, &v).abs() < ANCHOR_MAX_COSINE) {
                break v;
            }
        };
        table.insert(name.to_string(), v);
    }
    table
}

/// Flips pixels within Chebyshev distance `j` of the boundary. A pixel whose
/// nearest opposite-valued pixel is `d` away flips with probability
/// `(j + 1 - d) / (2 (j + 1))`.
pub fn boundary_jitter(mask: &BinaryMask, j: usize, rng: &mut impl Rng) -> BinaryMask {
    let Ok(b) = mask_bbox(mask) else {
        return mask.clone();
    };
    if j == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let ji = j as i64;
    let mut out = mask.clone();
    for y in b.y0.saturating_sub(j)..(b.y1 + j + 1).min(h) {
        for x in b.x0.saturating_sub(j)..(b.x1 + j + 1).min(w) {
            let v = mask.get(x, y);
            let mut d = None;
            for dy in -ji..=ji {
                for dx in -ji..=ji {
                    if mask.get_signed(x as i64 + dx, y as i64 + dy) != v {
                        let c = dx.abs().max(dy.abs()) as usize;
                        d = Some(d.map_or(c, |old: usize| old.min(c)));
                    }
                }
            }
            if let Some(d) = d {
                let p = (j + 1 - d) as f64 / (2 * (j + 1)) as f64;
                if rng.random_bool(p) {
                    out.set(x, y, !v);
                }
            }
        }
    }
    out
}

fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut label = vec![0usize; w * h];
    let mut best: (usize, usize) = (0, 0);
    let mut next = 1;
    let mut queue = VecDeque::new();
    for (sx, sy) in mask.iter_set() {
        if label[sy * w + sx] != 0 {
            continue;
        }
        let id = next;
        next += 1;
        let mut size = 0;
        label[sy * w + sx] = id;
        queue.push_back((sx, sy));
        while let Some((x, y)) = queue.pop_front() {
            size += 1;
            let around = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
            for (nx, ny) in around {
                if nx < w && ny < h && mask.get(nx, ny) && label[ny * w + nx] == 0 {
                    label[ny * w + nx] = id;
                    queue.push_back((nx, ny));
                }
            }
        }
        if size > best.1 {
            best = (id, size);
        }
    }
    BinaryMask::from_fn(w, h, |x, y| best.0 != 0 && label[y * w + x] == best.0)
}

/// A connected piece of `parent` cut by a random sub-rectangle of its box,
/// strictly smaller than the parent.
fn fragment(parent: &BinaryMask, rng: &mut impl Rng) -> Option<BinaryMask> {
    let b = mask_bbox(parent).ok()?;
    let (bw, bh) = (b.width(), b.height());
    let parent_area = parent.area();
    for _ in 0..16 {
        let rw = rng.random_range((bw / 4).max(1)..=(3 * bw / 4).max(1));
        let rh = rng.random_range((bh / 4).max(1)..=(3 * bh / 4).max(1));
        let x0 = b.x0 + rng.random_range(0..=bw - rw);
        let y0 = b.y0 + rng.random_range(0..=bh - rh);
        let cut = BinaryMask::from_fn(parent.width(), parent.height(), |x, y| {
            parent.get(x, y) && (x0..x0 + rw).contains(&x) && (y0..y0 + rh).contains(&y)
        });
        let piece = largest_component(&cut);
        let area = piece.area();
        if area > 0 && area < parent_area {
            return Some(piece);
        }
    }
    None
}

/// A rectangle outside the default segment size range: either larger than
/// 50000 px or smaller than 400 px.
fn background_blob(width: usize, height: usize, rng: &mut impl Rng) -> BinaryMask {
    let large = rng.random_bool(0.5) && width * height > 50_000;
    let (bw, bh) = if large {
        let bw = rng.random_range(width.clamp(1, 260)..=width);
        let min_h = 50_000 / bw + 1;
        if min_h <= height {
            (bw, rng.random_range(min_h..=height))
        } else {
            (width, height)
        }
    } else {
        (
            rng.random_range(3..=19).min(width),
            rng.random_range(3..=19).min(height),
        )
    };
    let x0 = rng.random_range(0..=width - bw);
    let y0 = rng.random_range(0..=height - bh);
    BinaryMask::from_fn(width, height, |x, y| {
        (x0..x0 + bw).contains(&x) && (y0..y0 + bh).contains(&y)
    })
}

/// Ground-truth segments of a scene after dropout and boundary jitter, each
/// followed by its injected fragments, then the background blobs.
pub fn oracle_segment(scene: &SceneAnnotation, noise: &NoiseConfig, seed: u64) -> Vec<BinaryMask> {
    let mut rng = stream(seed, &format!("segment/{}", scene.image_id));
    let mut out = Vec::new();
    for o in &scene.objects {
        if noise.segment_dropout > 0.0 && rng.random_bool(noise.segment_dropout) {
            continue;
        }
        let m = boundary_jitter(&o.mask.mask, noise.boundary_jitter_px, &mut rng);
        if m.is_empty() {
            continue;
        }
        let fragments: Vec<BinaryMask> = (0..noise.fragments).filter_map(|_| fragment(&m, &mut rng)).collect();
        out.push(m);
        out.extend(fragments);
    }
    for _ in 0..noise.background_blobs {
        out.push(background_blob(scene.width, scene.height, &mut rng));
    }
    out
}

/// Every ground-truth grasp in the scene with a sampled confidence and
/// optional uniform jitter.
pub fn oracle_propose_grasps(scene: &SceneAnnotation, noise: &NoiseConfig, seed: u64) -> Vec<GraspRect> {
    let mut rng = stream(seed, &format!("grasps/{}", scene.image_id));
    let conf_noise = Normal::new(0.0, noise.confidence_sigma).expect("validated sigma");
    let mut out = Vec::new();
    for o in &scene.objects {
        for g in &o.grasps {
            let mut conf: f64 = rng.random_range(0.5..1.0);
            let mut p = *g;
            if noise.grasp_jitter_px > 0.0 {
                p.x += rng.random_range(-noise.grasp_jitter_px..=noise.grasp_jitter_px);
                p.y += rng.random_range(-noise.grasp_jitter_px..=noise.grasp_jitter_px);
            }
            if noise.grasp_jitter_deg > 0.0 {
                p.theta = normalize_theta(p.theta + rng.random_range(-noise.grasp_jitter_deg..=noise.grasp_jitter_deg));
            }
            if noise.confidence_sigma > 0.0 {
                conf = (conf + conf_noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            p.confidence = Some(conf);
            out.push(p);
        }
    }
    out
}

/// Implements every backend kind from dataset ground truth.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    dataset: Arc<Dataset>,
    noise: NoiseConfig,
    seed: u64,
    anchors: BTreeMap<String, Vec<f64>>,
    descriptions: BTreeMap<String, String>,
    labels: Vec<String>,
}

impl OracleBackend {
    pub fn new(dataset: Arc<Dataset>, noise: NoiseConfig, seed: u64) -> Self {
        let anchors = anchor_table(dataset.categories.iter().map(|c| c.subcategory.as_str()));
        let descriptions = dataset
            .entries
            .iter()
            .filter_map(|e| {
                e.annotation
                    .description
                    .as_ref()
                    .map(|d| (d.clone(), e.object().subcategory.clone()))
            })
            .collect();
        let labels = anchors.keys().cloned().collect();
        Self {
            dataset,
            noise,
            seed,
            anchors,
            descriptions,
            labels,
        }
    }

    /// Restricts the classifier to a label set (subcategory or category names).
    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.labels = labels;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    pub fn anchors(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.anchors
    }

    fn scene(&self, id: u64) -> Result<&SceneAnnotation, BackendError> {
        self.dataset
            .scene(id)
            .ok_or_else(|| BackendError::UnknownScene(id.to_string()))
    }

    /// The ground-truth object a view shows: the reference object itself, or
    /// the scene object with the largest pixel overlap (lowest index on ties).
    pub fn object_for(&self, view: &CropView<'_>) -> Result<&ObjectAnnotation, BackendError> {
        match view.origin {
            ViewOrigin::Reference(sub) => self
                .dataset
                .entry(sub)
                .map(|e| &e.annotation)
                .ok_or_else(|| BackendError::UnknownScene(format!("reference {sub}"))),
            ViewOrigin::Scene(id) => {
                let scene = self.scene(*id)?;
                let mut best: Option<(usize, &ObjectAnnotation)> = None;
                for o in &scene.objects {
                    let n = intersection_area(view.mask, &o.mask.mask)?;
                    if n > 0 && best.is_none_or(|(m, _)| n > m) {
                        best = Some((n, o));
                    }
                }
                best.map(|(_, o)| o).ok_or(BackendError::UnmappableCrop)
            }
        }
    }

    fn view_key(tag: &str, view: &CropView<'_>) -> String {
        let b = view.transform.bbox;
        format!(
            "{tag}/{:?}/{}/{}/{}/{}/{}",
            view.origin,
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            view.mask.area()
        )
    }

    fn noisy_anchor(&self, tag: &str, view: &CropView<'_>) -> Result<Vec<f64>, BackendError> {
        let obj = self.object_for(view)?;
        let anchor = self
            .anchors
            .get(&obj.object.subcategory)
            .cloned()
            .unwrap_or_else(|| gaussian_unit(&mut stream(0, &format!("anchor/{}", obj.object.subcategory))));
        if self.noise.embedding_sigma == 0.0 {
            return Ok(anchor);
        }
        let mut rng = stream(self.seed, &Self::view_key(tag, view));
        let normal = Normal::new(0.0, self.noise.embedding_sigma).expect("validated sigma");
        let v: Vec<f64> = anchor.iter().map(|a| a + normal.sample(&mut rng)).collect();
        let n = norm(&v);
        Ok(if n > 1e-12 {
            v.into_iter().map(|x| x / n).collect()
        } else {
            anchor
        })
    }

    fn confidence(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.noise.confidence_sigma == 0.0 {
            return 1.0;
        }
        let normal = Normal::new(0.0, self.noise.confidence_sigma).expect("validated sigma");
        (1.0 + normal.sample(rng)).clamp(0.0, 1.0)
    }
}

fn missing(e: DatasetError) -> BackendError {
    match e {
        DatasetError::MissingAffordance { object, affordance } => {
            BackendError::MissingAffordance { object, affordance }
        }
        DatasetError::Mask(m) => BackendError::Mask(m),
        other => BackendError::Remote(other.to_string()),
    }
}

impl Segmenter for OracleBackend {
    fn segment(&self, scene: &SceneInput) -> Result<Vec<BinaryMask>, BackendError> {
        Ok(oracle_segment(self.scene(scene.scene_id)?, &self.noise, self.seed))
    }
}

impl ImageEmbedder for OracleBackend {
    fn embed_image(&self, view: &CropView<'_>) -> Result<Vec<f64>, BackendError> {
        self.noisy_anchor("image", view)
    }
}

impl PairEmbedder for OracleBackend {
    fn embed_pair(&self, view: &CropView<'_>) -> Result<Vec<f64>, BackendError> {
        self.noisy_anchor("pair", view)
    }
}

impl TextEmbedder for OracleBackend {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(match self.descriptions.get(text).and_then(|s| self.anchors.get(s)) {
            Some(a) => a.clone(),
            None => gaussian_unit(&mut stream(0, &format!("text/{text}"))),
        })
    }
}

impl Classifier for OracleBackend {
    fn labels(&self) -> Option<Vec<String>> {
        Some(self.labels.clone())
    }

    /// Logit 10 on the object's label (its subcategory, else its category),
    /// 0 elsewhere, plus Gaussian noise scaled by 10·σ.
    fn classify(&self, view: &CropView<'_>) -> Result<ClassScores, BackendError> {
        let obj = self.object_for(view)?;
        let column = self
            .labels
            .iter()
            .position(|l| *l == obj.object.subcategory)
            .or_else(|| self.labels.iter().position(|l| *l == obj.object.category));
        let mut logits: Vec<f64> = (0..self.labels.len())
            .map(|i| if Some(i) == column { TRUE_LOGIT } else { 0.0 })
            .collect();
        if self.noise.embedding_sigma > 0.0 {
            let mut rng = stream(self.seed, &Self::view_key("classify", view));
            let normal = Normal::new(0.0, TRUE_LOGIT * self.noise.embedding_sigma).expect("validated sigma");
            for l in &mut logits {
                *l += normal.sample(&mut rng);
            }
        }
        Ok(ClassScores {
            labels: self.labels.clone(),
            logits,
        })
    }
}

impl AffordanceOneShot for OracleBackend {
    /// The scene object's ground-truth task region in crop coordinates.
    fn predict_region(&self, q: &OneShotQuery<'_>) -> Result<BinaryMask, BackendError> {
        let obj = self.object_for(&q.scene)?;
        let region = obj.task_region(q.rule).map_err(missing)?;
        let crop = q.scene.transform.crop_mask(&region);
        let mut rng = stream(
            self.seed,
            &Self::view_key(&format!("oneshot/{}", q.rule.task), &q.scene),
        );
        Ok(boundary_jitter(&crop, self.noise.boundary_jitter_px, &mut rng))
    }
}

impl AffordanceSegmenter for OracleBackend {
    fn segment_affordances(&self, view: &CropView<'_>) -> Result<Vec<AffordancePrediction>, BackendError> {
        let obj = self.object_for(view)?;
        let mut rng = stream(self.seed, &Self::view_key("affordances", view));
        Ok(obj
            .affordances
            .iter()
            .map(|(label, m)| {
                let crop = view.transform.crop_mask(&m.mask);
                AffordancePrediction {
                    label: label.clone(),
                    confidence: self.confidence(&mut rng),
                    mask: boundary_jitter(&crop, self.noise.boundary_jitter_px, &mut rng),
                }
            })
            .collect())
    }
}

impl GraspProposer for OracleBackend {
    fn propose(&self, scene: &SceneInput) -> Result<Vec<GraspRect>, BackendError> {
        Ok(oracle_propose_grasps(
            self.scene(scene.scene_id)?,
            &self.noise,
            self.seed,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskops::{mask_iou, overlap_ratio};

    fn blob_mask(w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - 40.0, y as f64 - 30.0);
            dx * dx / 900.0 + dy * dy / 225.0 <= 1.0
        })
    }

    #[test]
    fn anchors_are_unit_and_separated() {
        let names: Vec<String> = (0..40).map(|i| format!("obj_{i:02}")).collect();
        let t = anchor_table(names.iter().map(String::as_str));
        assert_eq!(t.len(), 40);
        let vs: Vec<&Vec<f64>> = t.values().collect();
        for (i, a) in vs.iter().enumerate() {
            assert!((norm(a) - 1.0).abs() < 1e-12);
            for b in &vs[i + 1..] {
                assert!(dot(a, b).abs() < ANCHOR_MAX_COSINE);
            }
        }
        // insertion order does not matter
        let t2 = anchor_table(names.iter().rev().map(String::as_str));
        assert_eq!(t, t2);
    }

    #[test]
    fn fragments_are_strict_connected_subsets() {
        let parent = blob_mask(100, 60);
        let mut rng = stream(3, "t");
        for _ in 0..50 {
            let f = fragment(&parent, &mut rng).unwrap();
            assert_eq!(overlap_ratio(&f, &parent).unwrap(), 1.0);
            assert!(f.area() < parent.area());
            assert_eq!(largest_component(&f), f);
        }
    }

    #[test]
    fn blobs_fall_outside_default_range() {
        let mut rng = stream(9, "blobs");
        for _ in 0..200 {
            let a = background_blob(640, 480, &mut rng).area();
            assert!(!(400..=50_000).contains(&a), "area {a}");
        }
    }

    #[test]
    fn jitter_stays_near_boundary() {
        let m = blob_mask(100, 60);
        let mut rng = stream(1, "j");
        let j = boundary_jitter(&m, 2, &mut rng);
        assert_ne!(j, m);
        for y in 0..60 {
            for x in 0..100 {
                if j.get(x, y) != m.get(x, y) {
                    let near = (-2i64..=2)
                        .any(|dy| (-2i64..=2).any(|dx| m.get_signed(x as i64 + dx, y as i64 + dy) != m.get(x, y)));
                    assert!(near, "flip at ({x}, {y}) far from boundary");
                }
            }
        }
        assert!(mask_iou(&j, &m).unwrap() > 0.8);
        assert_eq!(boundary_jitter(&m, 0, &mut rng), m);
    }
}
