//! The four-stage TOG pipeline: segment and filter candidates (SSF), recognize
//! the target, compute the task-suitable region, then pick the most confident
//! grasp inside it.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backends::{AffordancePrediction, BackendError, BackendSet, CropView, OneShotQuery, SceneInput, ViewOrigin};
use crate::dataset::{rule_lookup, Dataset, DatasetError, KnowledgeEntry, Polarity, TaskRule};
use crate::geometry::{
    make_crop_transform, rotate_crop, rotated_squared_distance, BBox, CropTransform, GeometryError, GraspRect,
    DEFAULT_CROP_SIDE,
};
use crate::maskops::{mask_and, mask_bbox, mask_or, mask_sub, BinaryMask, MaskError};
use crate::raster::{RasterError, RgbImage};

pub const DEFAULT_MIN_AREA: usize = 400;
pub const DEFAULT_MAX_AREA: usize = 50_000;
pub const DEFAULT_TAU: f64 = 0.75;
pub const DEFAULT_N_ROTS: usize = 36;
pub const DEFAULT_AFFORDANCE_THRESHOLD: f64 = 0.5;
/// Cosine similarities are scaled by this before the softmax.
pub const ZERO_SHOT_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no candidate masks")]
    EmptyCandidates,
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("category {0:?} is not in the classifier label set")]
    UnknownCategory(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("{object} has no {affordance:?} affordance")]
    MissingAffordance { object: String, affordance: String },
    #[error("crop sides differ: {0} vs {1}")]
    SideMismatch(String, String),
    #[error("task-suitable region is empty")]
    EmptyRegion,
    #[error("no grasp candidate falls inside the task-suitable region")]
    NoGraspInRegion,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::MissingAffordance { object, affordance } => {
                PipelineError::MissingAffordance { object, affordance }
            }
            DatasetError::UnknownTask(t) => PipelineError::UnknownTask(t),
            DatasetError::Mask(m) => PipelineError::Mask(m),
            other => PipelineError::InvalidParams(other.to_string()),
        }
    }
}

/// Framework mode: zero-shot (Binary-TOG), one-shot (OS-TOG) or closed-set
/// (Standard-TOG).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "binary")]
    Binary,
    #[serde(rename = "os")]
    OneShot,
    #[serde(rename = "standard")]
    Standard,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Binary, Mode::OneShot, Mode::Standard];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Binary => "binary",
            Mode::OneShot => "os",
            Mode::Standard => "standard",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected binary, os or standard)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TogParams {
    pub min_area: usize,
    pub max_area: usize,
    pub tau: f64,
    pub n_rots: usize,
    pub affordance_threshold: f64,
    /// Use the whole candidate mask when the predicted region is empty.
    pub region_fallback: bool,
    pub crop_side: usize,
}

impl Default for TogParams {
    fn default() -> Self {
        Self {
            min_area: DEFAULT_MIN_AREA,
            max_area: DEFAULT_MAX_AREA,
            tau: DEFAULT_TAU,
            n_rots: DEFAULT_N_ROTS,
            affordance_threshold: DEFAULT_AFFORDANCE_THRESHOLD,
            region_fallback: false,
            crop_side: DEFAULT_CROP_SIDE,
        }
    }
}

impl TogParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidParams(m));
        if self.min_area == 0 || self.min_area >= self.max_area {
            return bad(format!(
                "need 0 < min_area < max_area, got {} and {}",
                self.min_area, self.max_area
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.n_rots == 0 {
            return bad("n_rots must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.affordance_threshold) {
            return bad(format!(
                "affordance threshold {} outside [0, 1]",
                self.affordance_threshold
            ));
        }
        if self.crop_side == 0 {
            return bad("crop side must be positive".into());
        }
        Ok(())
    }
}

/// Indices of the masks kept by Size Subset Filtering, in input order.
///
/// Stage 1 keeps masks with `min_area < area < max_area`. Stage 2 orders the
/// survivors by ascending area (stable) and drops a mask when its overlap
/// ratio with any later mask in that order exceeds `tau`.
pub fn ssf_keep_indices(masks: &[BinaryMask], min_area: usize, max_area: usize, tau: f64) -> Vec<usize> {
    let areas: Vec<usize> = masks.iter().map(BinaryMask::area).collect();
    let mut order: Vec<usize> = (0..masks.len())
        .filter(|&i| areas[i] > min_area && areas[i] < max_area)
        .collect();
    order.sort_by_key(|&i| areas[i]);
    let mut keep: Vec<usize> = order
        .iter()
        .enumerate()
        .filter(|&(k, &i)| {
            !order[k + 1..].iter().any(|&j| {
                let inter = masks[i]
                    .bits()
                    .iter()
                    .zip(masks[j].bits())
                    .filter(|(a, b)| **a && **b)
                    .count();
                inter as f64 / areas[i] as f64 > tau
            })
        })
        .map(|(_, &i)| i)
        .collect();
    keep.sort_unstable();
    keep
}

pub fn ssf_filter(masks: &[BinaryMask], min_area: usize, max_area: usize, tau: f64) -> Vec<BinaryMask> {
    ssf_keep_indices(masks, min_area, max_area, tau)
        .into_iter()
        .map(|i| masks[i].clone())
        .collect()
}

/// `ĉ_i = I · ŝ_i` for every mask.
pub fn make_masked_images(scene: &RgbImage, masks: &[BinaryMask]) -> Result<Vec<RgbImage>, RasterError> {
    masks.iter().map(|m| scene.masked(m)).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (
        a.iter().map(|x| x * x).sum::<f64>().sqrt(),
        b.iter().map(|x| x * x).sum::<f64>().sqrt(),
    );
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Scores `softmax(100 · cos(c_i, d))`; selects the highest (lowest index on ties).
pub fn recognize_zero_shot(
    image_features: &[Vec<f64>],
    text_feature: &[f64],
) -> Result<(usize, Vec<f64>), PipelineError> {
    if image_features.is_empty() {
        return Err(PipelineError::EmptyCandidates);
    }
    let logits: Vec<f64> = image_features
        .iter()
        .map(|f| ZERO_SHOT_SCALE * cosine(f, text_feature))
        .collect();
    let scores = softmax(&logits);
    Ok((argmax(&scores), scores))
}

/// Selects the candidate nearest to the reference in ℓ2 (lowest index on ties).
pub fn recognize_one_shot(candidate_features: &[Vec<f64>], reference_feature: &[f64]) -> Result<usize, PipelineError> {
    let d = l2_distances(candidate_features, reference_feature)?;
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v < d[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn l2_distances(candidate_features: &[Vec<f64>], reference_feature: &[f64]) -> Result<Vec<f64>, PipelineError> {
    if candidate_features.is_empty() {
        return Err(PipelineError::EmptyCandidates);
    }
    Ok(candidate_features
        .iter()
        .map(|f| {
            f.iter()
                .zip(reference_feature)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Row-wise softmax of an `N x M` logit matrix; selects the row with the
/// highest probability in column `target`.
pub fn recognize_standard(logits: &[Vec<f64>], target: usize) -> Result<(usize, Vec<Vec<f64>>), PipelineError> {
    if logits.is_empty() {
        return Err(PipelineError::EmptyCandidates);
    }
    if logits.iter().any(|row| target >= row.len()) {
        return Err(PipelineError::UnknownCategory(format!("column {target}")));
    }
    let probs: Vec<Vec<f64>> = logits.iter().map(|row| softmax(row)).collect();
    let column: Vec<f64> = probs.iter().map(|row| row[target]).collect();
    Ok((argmax(&column), probs))
}

/// `Q_ô`: the reference object's task-suitable region.
pub fn reference_task_region(entry: &KnowledgeEntry, rule: &TaskRule) -> Result<BinaryMask, PipelineError> {
    Ok(entry.annotation.task_region(rule)?)
}

/// Task region from labeled affordance predictions (full-frame masks):
/// predictions labeled with the rule's affordance at or above `threshold` are
/// unioned into `F̂`, then `Require → ĉ ∧ F̂`, `Avoid → ĉ ∧ ¬F̂`, `None → ĉ`.
pub fn standard_task_region(
    candidate: &BinaryMask,
    predictions: &[AffordancePrediction],
    rule: &TaskRule,
    threshold: f64,
) -> Result<BinaryMask, PipelineError> {
    let Some(name) = rule.affordance.as_ref().filter(|_| rule.polarity != Polarity::None) else {
        return Ok(candidate.clone());
    };
    let mut f = BinaryMask::new(candidate.width(), candidate.height());
    for p in predictions
        .iter()
        .filter(|p| &p.label == name && p.confidence >= threshold)
    {
        f = mask_or(&f, &p.mask)?;
    }
    Ok(match rule.polarity {
        Polarity::Require => mask_and(candidate, &f)?,
        _ => mask_sub(candidate, &f)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub reference_image: RgbImage,
    pub reference_region: BinaryMask,
    pub degrees: i32,
}

/// Affordance Alignment: tries `r = i · (360 div n_rots)` for `i < n_rots`
/// and keeps the first rotation minimizing the squared distance between the
/// scene crop and the rotated masked reference `ref_crop · ref_region`.
pub fn affordance_align(
    scene_crop: &RgbImage,
    ref_crop: &RgbImage,
    ref_region: &BinaryMask,
    n_rots: usize,
) -> Result<Alignment, PipelineError> {
    let side = scene_crop.width();
    let dims = |w: usize, h: usize| format!("{w}x{h}");
    for (w, h) in [
        (scene_crop.width(), scene_crop.height()),
        (ref_crop.width(), ref_crop.height()),
        (ref_region.width(), ref_region.height()),
    ] {
        if w != side || h != side {
            return Err(PipelineError::SideMismatch(dims(side, side), dims(w, h)));
        }
    }
    let n_rots = n_rots.max(1);
    let step = (360 / n_rots) as i32;
    let masked = ref_crop.masked(ref_region)?;
    let mut best = (0, f64::INFINITY);
    for i in 0..n_rots as i32 {
        let r = i * step;
        let d = rotated_squared_distance(scene_crop, &masked, r)?;
        if d < best.1 {
            best = (r, d);
        }
    }
    let degrees = best.0;
    Ok(Alignment {
        reference_image: rotate_crop(ref_crop, degrees)?,
        reference_region: rotate_crop(ref_region, degrees)?,
        degrees,
    })
}

/// Most confident grasp whose rounded center lies in `region`; lowest index
/// on ties. Returns the index into `candidates` too.
pub fn select_grasp(candidates: &[GraspRect], region: &BinaryMask) -> Result<(usize, GraspRect), PipelineError> {
    if region.is_empty() {
        return Err(PipelineError::EmptyRegion);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in candidates.iter().enumerate() {
        let (x, y) = g.center_pixel();
        if !region.get_signed(x, y) {
            continue;
        }
        let c = g.confidence.unwrap_or(0.0);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| (i, candidates[i]))
        .ok_or(PipelineError::NoGraspInRegion)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validation,
    Segmentation,
    Filtering,
    Recognition,
    Region,
    GraspProposal,
    GraspSelection,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("stage serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TogRequest {
    pub scene: SceneInput,
    /// Target object (subcategory id).
    pub target: String,
    pub task: String,
    pub mode: Mode,
    pub params: TogParams,
}

/// Every intermediate artifact of one run. Filled stage by stage, so a failed
/// run carries whatever was produced before the failure.
#[derive(Debug, Clone, Default)]
pub struct TogTrace {
    /// Raw segmenter output.
    pub segments: Vec<BinaryMask>,
    /// Indices into `segments` kept by SSF.
    pub kept: Vec<usize>,
    /// Per kept candidate: softmax scores (zero-shot), softmax of negated ℓ2
    /// distances (one-shot) or target-column probabilities (standard).
    pub scores: Vec<f64>,
    /// Index into `kept` of the recognized candidate.
    pub selected: Option<usize>,
    pub rotation_deg: Option<i32>,
    pub region: Option<BinaryMask>,
    pub grasps: Vec<GraspRect>,
    pub selected_grasp: Option<usize>,
    pub log: Vec<StageLog>,
    /// Wall-clock milliseconds per stage; never serialized.
    pub timings: Vec<(Stage, f64)>,
}

impl TogTrace {
    pub fn kept_masks(&self) -> impl Iterator<Item = &BinaryMask> {
        self.kept.iter().map(|&i| &self.segments[i])
    }

    pub fn candidate(&self) -> Option<&BinaryMask> {
        self.selected.map(|s| &self.segments[self.kept[s]])
    }

    pub fn grasp(&self) -> Option<&GraspRect> {
        self.selected_grasp.map(|i| &self.grasps[i])
    }
}

#[derive(Debug, Clone)]
pub struct TogResult {
    pub grasp: GraspRect,
    pub trace: TogTrace,
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {error}")]
pub struct TogFailure {
    pub stage: Stage,
    #[source]
    pub error: PipelineError,
    pub trace: TogTrace,
}

struct Run<'a> {
    backends: &'a BackendSet,
    trace: TogTrace,
    clock: Instant,
}

struct Candidate {
    transform: CropTransform,
    crop: RgbImage,
}

impl Run<'_> {
    fn log(&mut self, stage: Stage, detail: serde_json::Value) {
        let ms = self.clock.elapsed().as_secs_f64() * 1e3;
        self.clock = Instant::now();
        self.trace.log.push(StageLog { stage, detail });
        self.trace.timings.push((stage, ms));
    }

    #[allow(clippy::result_large_err)]
    fn fail<T>(self, stage: Stage, error: impl Into<PipelineError>) -> Result<T, TogFailure> {
        Err(TogFailure {
            stage,
            error: error.into(),
            trace: self.trace,
        })
    }
}

fn crop_of(image: &RgbImage, mask: &BinaryMask, side: usize) -> Result<Candidate, PipelineError> {
    let transform = make_crop_transform(BBox::from(mask_bbox(mask)?), side)?;
    let crop = transform.crop_image(&image.masked(mask)?);
    Ok(Candidate { transform, crop })
}

fn load_reference(knowledge: &Dataset, entry: &KnowledgeEntry) -> Result<RgbImage, PipelineError> {
    Ok(RgbImage::load_png(&knowledge.resolve(&entry.image_path))?)
}

/// Runs the pipeline end to end. Errors carry the stage they occurred in and
/// the partial trace.
#[allow(clippy::result_large_err)]
pub fn run_tog(req: &TogRequest, backends: &BackendSet, knowledge: &Dataset) -> Result<TogResult, TogFailure> {
    let mut run = Run {
        backends,
        trace: TogTrace::default(),
        clock: Instant::now(),
    };
    macro_rules! stage {
        ($stage:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => return run.fail($stage, err),
            }
        };
    }

    // validation: nothing reaches a backend before this passes
    stage!(Stage::Validation, req.params.validate());
    let rule = stage!(Stage::Validation, rule_lookup(&knowledge.rules, &req.task)).clone();
    let object = stage!(
        Stage::Validation,
        knowledge
            .object_id(&req.target)
            .ok_or_else(|| PipelineError::UnknownObject(req.target.clone()))
    );
    let entry = match req.mode {
        Mode::Standard => None,
        _ => Some(stage!(
            Stage::Validation,
            knowledge
                .entry(&req.target)
                .ok_or_else(|| PipelineError::UnknownObject(format!("{} has no reference entry", req.target)))
        )),
    };
    if req.mode == Mode::Standard {
        if let Some(labels) = backends.classifier.labels() {
            if !labels.iter().any(|l| *l == object.subcategory || *l == object.category) {
                return run.fail(
                    Stage::Validation,
                    PipelineError::UnknownCategory(object.category.clone()),
                );
            }
        }
    }
    run.log(
        Stage::Validation,
        json!({"target": req.target, "task": req.task, "mode": req.mode, "polarity": rule.polarity, "affordance": rule.affordance}),
    );

    let scene = &req.scene.image;
    let (w, h) = (scene.width(), scene.height());
    let segments = stage!(Stage::Segmentation, run.backends.segmenter.segment(&req.scene));
    if segments.is_empty() {
        return run.fail(Stage::Segmentation, PipelineError::EmptyCandidates);
    }
    if let Some(m) = segments.iter().find(|m| m.width() != w || m.height() != h) {
        let err = MaskError::ShapeMismatch(m.width(), m.height(), w, h);
        return run.fail(Stage::Segmentation, err);
    }
    run.trace.segments = segments;
    let areas: Vec<usize> = run.trace.segments.iter().map(BinaryMask::area).collect();
    run.log(Stage::Segmentation, json!({"masks": areas.len(), "areas": areas}));

    let p = &req.params;
    run.trace.kept = ssf_keep_indices(&run.trace.segments, p.min_area, p.max_area, p.tau);
    if run.trace.kept.is_empty() {
        return run.fail(Stage::Filtering, PipelineError::EmptyCandidates);
    }
    run.log(Stage::Filtering, json!({"kept": run.trace.kept}));

    // recognition
    let origin = ViewOrigin::Scene(req.scene.scene_id);
    let candidates: Vec<Candidate> = stage!(
        Stage::Recognition,
        run.trace
            .kept_masks()
            .map(|m| crop_of(scene, m, p.crop_side))
            .collect::<Result<Vec<_>, _>>()
    );
    let kept_masks: Vec<BinaryMask> = run.trace.kept_masks().cloned().collect();
    let views: Vec<CropView<'_>> = candidates
        .iter()
        .zip(&kept_masks)
        .map(|(c, m)| CropView {
            origin: &origin,
            mask: m,
            transform: c.transform,
            image: &c.crop,
        })
        .collect();
    let mut reference_image = None;
    let recognition: Result<(usize, Vec<f64>), PipelineError> = (|| match req.mode {
        Mode::Binary => {
            let entry = entry.expect("validated");
            let text = backends.text_embedder.embed_text(entry.description())?;
            let feats = views
                .iter()
                .map(|v| backends.image_embedder.embed_image(v))
                .collect::<Result<Vec<_>, _>>()?;
            recognize_zero_shot(&feats, &text)
        }
        Mode::OneShot => {
            let entry = entry.expect("validated");
            let image = load_reference(knowledge, entry)?;
            let ref_crop = crop_of(&image, entry.mask(), p.crop_side)?;
            let ref_origin = ViewOrigin::Reference(entry.object().subcategory.clone());
            let ref_view = CropView {
                origin: &ref_origin,
                mask: entry.mask(),
                transform: ref_crop.transform,
                image: &ref_crop.crop,
            };
            let reference = backends.pair_embedder.embed_pair(&ref_view)?;
            reference_image = Some(image);
            let feats = views
                .iter()
                .map(|v| backends.pair_embedder.embed_pair(v))
                .collect::<Result<Vec<_>, _>>()?;
            let selected = recognize_one_shot(&feats, &reference)?;
            let neg: Vec<f64> = l2_distances(&feats, &reference)?.iter().map(|d| -d).collect();
            Ok((selected, softmax(&neg)))
        }
        Mode::Standard => {
            let scores = views
                .iter()
                .map(|v| backends.classifier.classify(v))
                .collect::<Result<Vec<_>, _>>()?;
            let labels = &scores[0].labels;
            if scores.iter().any(|s| s.labels != *labels) {
                return Err(BackendError::Protocol("classifier label sets differ between candidates".into()).into());
            }
            let column = labels
                .iter()
                .position(|l| *l == object.subcategory)
                .or_else(|| labels.iter().position(|l| *l == object.category))
                .ok_or_else(|| PipelineError::UnknownCategory(object.category.clone()))?;
            let logits: Vec<Vec<f64>> = scores.into_iter().map(|s| s.logits).collect();
            let (selected, probs) = recognize_standard(&logits, column)?;
            Ok((selected, probs.iter().map(|row| row[column]).collect()))
        }
    })();
    let (selected, scores) = match recognition {
        Ok(v) => v,
        Err(e) => return run.fail(Stage::Recognition, e),
    };
    let sel_view = views[selected];
    run.trace.scores = scores;
    run.trace.selected = Some(selected);
    run.log(
        Stage::Recognition,
        json!({"selected": selected, "segment": run.trace.kept[selected], "scores": run.trace.scores}),
    );

    // region
    let candidate = &kept_masks[selected];
    let region: Result<(BinaryMask, Option<i32>), PipelineError> = (|| {
        if rule.polarity == Polarity::None || rule.affordance.is_none() {
            return Ok((candidate.clone(), None));
        }
        match req.mode {
            Mode::Binary | Mode::OneShot => {
                let entry = entry.expect("validated");
                let q_ref = reference_task_region(entry, &rule)?;
                let image = match reference_image.take() {
                    Some(i) => i,
                    None => load_reference(knowledge, entry)?,
                };
                let t_ref = make_crop_transform(BBox::from(mask_bbox(entry.mask())?), p.crop_side)?;
                let ref_crop = t_ref.crop_image(&image);
                let ref_region = t_ref.crop_mask(&q_ref);
                let aligned = affordance_align(sel_view.image, &ref_crop, &ref_region, p.n_rots)?;
                let out = backends.affordance_oneshot.predict_region(&OneShotQuery {
                    scene: sel_view,
                    reference_image: &aligned.reference_image,
                    reference_region: &aligned.reference_region,
                    rule: &rule,
                })?;
                Ok((sel_view.transform.uncrop_mask(&out, w, h)?, Some(aligned.degrees)))
            }
            Mode::Standard => {
                let preds = backends.affordance_segmenter.segment_affordances(&sel_view)?;
                let full = preds
                    .into_iter()
                    .map(|pr| {
                        Ok(AffordancePrediction {
                            mask: sel_view.transform.uncrop_mask(&pr.mask, w, h)?,
                            ..pr
                        })
                    })
                    .collect::<Result<Vec<_>, PipelineError>>()?;
                Ok((
                    standard_task_region(candidate, &full, &rule, p.affordance_threshold)?,
                    None,
                ))
            }
        }
    })();
    let (mut region, rotation) = stage!(Stage::Region, region);
    run.trace.rotation_deg = rotation;
    let mut fallback = false;
    if region.is_empty() {
        if !p.region_fallback {
            run.trace.region = Some(region);
            return run.fail(Stage::Region, PipelineError::EmptyRegion);
        }
        region = candidate.clone();
        fallback = true;
    }
    run.log(
        Stage::Region,
        json!({"rotation_deg": rotation, "area": region.area(), "fallback": fallback}),
    );
    run.trace.region = Some(region);

    let grasps = stage!(Stage::GraspProposal, backends.grasp_proposer.propose(&req.scene));
    run.trace.grasps = grasps;
    run.log(Stage::GraspProposal, json!({"proposals": run.trace.grasps.len()}));

    let region = run.trace.region.as_ref().expect("set above");
    let (index, grasp) = stage!(Stage::GraspSelection, select_grasp(&run.trace.grasps, region));
    run.trace.selected_grasp = Some(index);
    run.log(Stage::GraspSelection, json!({"index": index, "grasp": grasp}));
    Ok(TogResult {
        grasp,
        trace: run.trace,
    })
}
