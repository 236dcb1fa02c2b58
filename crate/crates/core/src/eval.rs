//! Evaluation harness: grasp and task-grasp success rules, COCO-style mask
//! AP, recognition F1, split iteration and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendSet, SceneInput};
use crate::dataset::{Dataset, ObjectAnnotation, SceneAnnotation, Split, TaskRule};
use crate::geometry::{angle_diff, rotated_iou, GraspRect};
use crate::maskops::{intersection_area, BinaryMask, MaskError};
use crate::pipeline::{run_tog, ssf_filter, Mode, Stage, StageLog, TogParams, TogRequest};
use crate::raster::{RasterError, RgbImage};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;
pub const DEFAULT_ANGLE_THRESHOLD: f64 = 30.0;
pub const SMALL_AREA: usize = 32 * 32;
pub const LARGE_AREA: usize = 96 * 96;
/// A kept segment covering its object at least this well counts as found.
pub const SEGMENT_FOUND_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground-truth grasps")]
    NoGroundTruth,
    #[error("ground-truth task region is empty")]
    EmptyRegion,
    #[error("no recognition trials")]
    EmptyTrials,
    #[error("split {0:?} has no scenes")]
    EmptySplit(String),
    #[error("unknown split selector {0:?}")]
    UnknownSplit(String),
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report does not parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Split name or group (`category`, `subcategory`, `test`, `all`).
    pub split: String,
    pub mode: Mode,
    pub params: TogParams,
    pub iou_threshold: f64,
    pub angle_threshold: f64,
    pub ap_grid: Vec<f64>,
    pub small_area: usize,
    pub large_area: usize,
    pub workers: usize,
    /// Keep every trial's stage log in the report.
    pub keep_traces: bool,
}

/// `0.50, 0.55, ..., 0.95`.
pub fn default_ap_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn new(split: impl Into<String>, mode: Mode) -> Self {
        Self {
            split: split.into(),
            mode,
            params: TogParams::default(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            angle_threshold: DEFAULT_ANGLE_THRESHOLD,
            ap_grid: default_ap_grid(),
            small_area: SMALL_AREA,
            large_area: LARGE_AREA,
            workers: 1,
            keep_traces: false,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return bad("IoU threshold must lie in (0, 1]");
        }
        if self.angle_threshold.is_nan() || self.angle_threshold <= 0.0 {
            return bad("angle threshold must be positive");
        }
        if self.ap_grid.is_empty() || self.ap_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("AP grid must be non-empty and strictly increasing");
        }
        if self.ap_grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("AP thresholds must lie in (0, 1]");
        }
        if self.small_area > self.large_area {
            return bad("small-area cut exceeds large-area cut");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        self.params
            .validate()
            .map_err(|e| EvalError::InvalidConfig(e.to_string()))
    }
}

/// True iff one ground-truth grasp has IoU above the threshold and an angle
/// difference within the angle threshold.
pub fn grasp_success(pred: &GraspRect, gts: &[GraspRect], cfg: &EvalConfig) -> Result<bool, EvalError> {
    grasp_success_with(pred, gts, cfg.iou_threshold, cfg.angle_threshold)
}

pub fn grasp_success_with(
    pred: &GraspRect,
    gts: &[GraspRect],
    iou_threshold: f64,
    angle_threshold: f64,
) -> Result<bool, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(gts
        .iter()
        .any(|gt| angle_diff(pred.theta, gt.theta) <= angle_threshold && rotated_iou(pred, gt) > iou_threshold))
}

pub fn tog_success(
    pred: &GraspRect,
    gts: &[GraspRect],
    gt_region: &BinaryMask,
    cfg: &EvalConfig,
) -> Result<bool, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    if gt_region.is_empty() {
        return Err(EvalError::EmptyRegion);
    }
    let (x, y) = pred.center_pixel();
    Ok(gt_region.get_signed(x, y) && grasp_success(pred, gts, cfg)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    pub confidence: f64,
}

/// One image's predictions and ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApImage {
    pub predictions: Vec<ScoredMask>,
    pub ground_truth: Vec<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no ground truth falls in the bucket.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Mean IoU of the pairs matched at threshold 0.5.
    pub mean_iou: Option<f64>,
}

/// Area bucket as a half-open-ish pixel range: `lo <= a` and `a <= hi`, with
/// the exclusive ends encoded by the caller.
#[derive(Clone, Copy)]
struct AreaRange {
    lo: usize,
    hi: usize,
}

impl AreaRange {
    const ALL: AreaRange = AreaRange { lo: 0, hi: usize::MAX };

    fn contains(self, a: usize) -> bool {
        self.lo <= a && a <= self.hi
    }
}

struct Matched {
    /// `(confidence, image, index, tp)` for every non-ignored prediction.
    detections: Vec<(f64, usize, usize, bool)>,
    n_gt: usize,
    ious: Vec<f64>,
}

fn match_at(images: &[ApImage], ious: &[Vec<Vec<f64>>], threshold: f64, range: AreaRange) -> Matched {
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| (0..img.predictions.len()).map(move |k| (i, k)))
        .collect();
    // stable: equal confidences keep image then index order
    order.sort_by(|a, b| {
        let ca = images[a.0].predictions[a.1].confidence;
        let cb = images[b.0].predictions[b.1].confidence;
        cb.total_cmp(&ca)
    });
    let mut taken: Vec<Vec<bool>> = images.iter().map(|img| vec![false; img.ground_truth.len()]).collect();
    let ignored: Vec<Vec<bool>> = images
        .iter()
        .map(|img| img.ground_truth.iter().map(|g| !range.contains(g.area())).collect())
        .collect();
    let n_gt = ignored.iter().flatten().filter(|ig| !**ig).count();
    let mut detections = Vec::new();
    let mut matched_ious = Vec::new();
    for (i, k) in order {
        let row = &ious[i][k];
        let best = |want_ignored: bool| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in row.iter().enumerate() {
                if taken[i][g] || ignored[i][g] != want_ignored || iou < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            best
        };
        let pred = &images[i].predictions[k];
        if let Some((g, iou)) = best(false) {
            taken[i][g] = true;
            detections.push((pred.confidence, i, k, true));
            matched_ious.push(iou);
        } else if let Some((g, _)) = best(true) {
            taken[i][g] = true;
        } else if range.contains(pred.mask.area()) {
            detections.push((pred.confidence, i, k, false));
        }
    }
    Matched {
        detections,
        n_gt,
        ious: matched_ious,
    }
}

/// 101-point interpolated average precision; `None` without ground truth.
fn interpolated_ap(m: &Matched) -> Option<f64> {
    if m.n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(m.detections.len());
    let mut recall = Vec::with_capacity(m.detections.len());
    for (k, d) in m.detections.iter().enumerate() {
        tp += usize::from(d.3);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / m.n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

fn iou_table(images: &[ApImage]) -> Result<Vec<Vec<Vec<f64>>>, MaskError> {
    images
        .iter()
        .map(|img| {
            img.predictions
                .iter()
                .map(|p| {
                    img.ground_truth
                        .iter()
                        .map(|g| {
                            let inter = intersection_area(&p.mask, g)?;
                            let union = p.mask.area() + g.area() - inter;
                            Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// COCO-style class-agnostic mask AP.
pub fn mask_ap(images: &[ApImage], cfg: &EvalConfig) -> Result<ApTable, EvalError> {
    let ious = iou_table(images)?;
    let over_grid = |range: AreaRange| -> Option<f64> {
        let aps: Vec<f64> = cfg
            .ap_grid
            .iter()
            .map(|&t| interpolated_ap(&match_at(images, &ious, t, range)))
            .collect::<Option<_>>()?;
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    };
    let at = |t: f64| interpolated_ap(&match_at(images, &ious, t, AreaRange::ALL)).unwrap_or(0.0);
    let at_half = match_at(images, &ious, 0.5, AreaRange::ALL);
    let mean_iou = (!at_half.ious.is_empty()).then(|| at_half.ious.iter().sum::<f64>() / at_half.ious.len() as f64);
    let small = AreaRange {
        lo: 0,
        hi: cfg.small_area.saturating_sub(1),
    };
    let medium = AreaRange {
        lo: cfg.small_area,
        hi: cfg.large_area,
    };
    let large = AreaRange {
        lo: cfg.large_area + 1,
        hi: usize::MAX,
    };
    Ok(ApTable {
        ap: over_grid(AreaRange::ALL).unwrap_or(0.0),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_small: over_grid(small),
        ap_medium: over_grid(medium),
        ap_large: over_grid(large),
        mean_iou,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecognitionScores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

/// Accuracy and F1 over `(predicted, true)` pairs; F1 averages over the
/// classes that occur as true labels.
pub fn f1_recognition<S: AsRef<str>>(trials: &[(S, S)]) -> Result<RecognitionScores, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::EmptyTrials);
    }
    let classes: BTreeSet<&str> = trials.iter().map(|(_, t)| t.as_ref()).collect();
    let correct = trials.iter().filter(|(p, t)| p.as_ref() == t.as_ref()).count();
    let (mut sum_f1, mut tp_all, mut denom_all) = (0.0, 0usize, 0usize);
    for c in &classes {
        let tp = trials
            .iter()
            .filter(|(p, t)| p.as_ref() == *c && t.as_ref() == *c)
            .count();
        let fp = trials
            .iter()
            .filter(|(p, t)| p.as_ref() == *c && t.as_ref() != *c)
            .count();
        let fn_ = trials
            .iter()
            .filter(|(p, t)| p.as_ref() != *c && t.as_ref() == *c)
            .count();
        sum_f1 += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        tp_all += tp;
        denom_all += 2 * tp + fp + fn_;
    }
    Ok(RecognitionScores {
        accuracy: correct as f64 / trials.len() as f64,
        macro_f1: sum_f1 / classes.len() as f64,
        micro_f1: 2.0 * tp_all as f64 / denom_all as f64,
    })
}

/// Pixelwise F1 of a predicted region against the truth; two empty masks agree.
pub fn pixel_f1(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64, MaskError> {
    let tp = intersection_area(pred, truth)?;
    let denom = pred.area() + truth.area();
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Where a failed trial went wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Validation,
    Segmentation,
    Recognition,
    Region,
    Grasp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scene_id: u64,
    pub split: Split,
    pub object: String,
    pub task: String,
    pub success: bool,
    pub grasp_success: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<FailureStage>,
    /// Pipeline stage and message of an aborted run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<(Stage, String)>,
    /// Ground-truth object under the selected candidate.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recognized: Option<String>,
    pub affordance_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grasp: Option<GraspRect>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rotation_deg: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub log: Option<Vec<StageLog>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub object: String,
    pub task: String,
    pub trials: usize,
    pub successes: usize,
    pub accuracy: f64,
    /// Manual score filled in after the fact; never computed.
    #[serde(default)]
    pub partial_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: Split,
    pub trials: usize,
    pub successes: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub validation: usize,
    pub segmentation: usize,
    pub recognition: usize,
    pub region: usize,
    pub grasp: usize,
}

impl FailureCounts {
    fn add(&mut self, s: FailureStage) {
        *match s {
            FailureStage::Validation => &mut self.validation,
            FailureStage::Segmentation => &mut self.segmentation,
            FailureStage::Recognition => &mut self.recognition,
            FailureStage::Region => &mut self.region,
            FailureStage::Grasp => &mut self.grasp,
        } += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mode: Mode,
    pub trials: usize,
    pub tg_accuracy: f64,
    pub grasp_accuracy: f64,
    pub pairs: Vec<PairStats>,
    pub splits: Vec<SplitStats>,
    pub recognition: RecognitionScores,
    pub affordance_f1: f64,
    pub mask_ap: ApTable,
    pub failures: FailureCounts,
    /// Objects skipped because the classifier does not know them.
    pub skipped: Vec<String>,
    pub records: Vec<TrialRecord>,
}

struct Trial<'a> {
    scene: usize,
    object: &'a ObjectAnnotation,
    rule: &'a TaskRule,
}

fn dominant_object<'a>(
    scene: &'a SceneAnnotation,
    mask: &BinaryMask,
) -> Result<Option<&'a ObjectAnnotation>, MaskError> {
    let mut best: Option<(&ObjectAnnotation, usize)> = None;
    for o in &scene.objects {
        let inter = intersection_area(&o.mask.mask, mask)?;
        if inter > 0 && best.is_none_or(|(_, b)| inter > b) {
            best = Some((o, inter));
        }
    }
    Ok(best.map(|(o, _)| o))
}

fn mask_iou_or_zero(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let inter = intersection_area(a, b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

fn run_trial(
    dataset: &Dataset,
    backends: &BackendSet,
    cfg: &EvalConfig,
    scene: &SceneAnnotation,
    input: &SceneInput,
    trial: &Trial<'_>,
) -> Result<TrialRecord, EvalError> {
    let target = trial.object;
    let req = TogRequest {
        scene: input.clone(),
        target: target.object.subcategory.clone(),
        task: trial.rule.task.clone(),
        mode: cfg.mode,
        params: cfg.params.clone(),
    };
    let gt_region = target.task_region(trial.rule).map_err(|e| match e {
        crate::dataset::DatasetError::Mask(m) => EvalError::Mask(m),
        _ => EvalError::EmptyRegion,
    })?;
    let outcome = run_tog(&req, backends, dataset);
    let (trace, error) = match outcome {
        Ok(r) => (r.trace, None),
        Err(f) => (f.trace, Some((f.stage, f.error.to_string()))),
    };
    let recognized = match trace.candidate() {
        Some(c) => dominant_object(scene, c)?.map(|o| o.object.subcategory.clone()),
        None => None,
    };
    let affordance_f1 = match &trace.region {
        Some(r) => pixel_f1(r, &gt_region)?,
        None => 0.0,
    };
    let grasp = trace.grasp().cloned();
    let (grasp_ok, success) = match (&grasp, error.is_none()) {
        (Some(g), true) => {
            let ok = grasp_success(g, &target.grasps, cfg)?;
            (
                ok,
                !gt_region.is_empty() && tog_success(g, &target.grasps, &gt_region, cfg)?,
            )
        }
        _ => (false, false),
    };
    let failure = if success {
        None
    } else {
        let mut found = false;
        for m in trace.kept_masks() {
            if mask_iou_or_zero(m, &target.mask.mask)? >= SEGMENT_FOUND_IOU {
                found = true;
                break;
            }
        }
        Some(match &error {
            Some((Stage::Validation, _)) => FailureStage::Validation,
            _ if !found => FailureStage::Segmentation,
            Some((Stage::Segmentation | Stage::Filtering | Stage::Recognition, _)) => FailureStage::Recognition,
            _ if recognized.as_deref() != Some(target.object.subcategory.as_str()) => FailureStage::Recognition,
            Some((Stage::Region, _)) => FailureStage::Region,
            _ if grasp.as_ref().is_some_and(|g| {
                let (x, y) = g.center_pixel();
                !gt_region.get_signed(x, y)
            }) =>
            {
                FailureStage::Region
            }
            _ => FailureStage::Grasp,
        })
    };
    Ok(TrialRecord {
        scene_id: scene.image_id,
        split: scene.split,
        object: target.object.subcategory.clone(),
        task: trial.rule.task.clone(),
        success,
        grasp_success: grasp_ok,
        failure,
        error,
        recognized,
        affordance_f1,
        grasp,
        rotation_deg: trace.rotation_deg,
        log: cfg.keep_traces.then_some(trace.log),
    })
}

fn load_scene(dataset: &Dataset, scene: &SceneAnnotation) -> Result<SceneInput, EvalError> {
    let path = dataset.resolve(&scene.image_path);
    let image = RgbImage::load_png(&path)?;
    Ok(SceneInput {
        scene_id: scene.image_id,
        image,
        path: Some(path),
    })
}

/// Runs one pipeline per (scene, object, applicable task) triple in the
/// selected split and aggregates every metric. Trial errors count as failures.
pub fn evaluate_split(dataset: &Dataset, backends: &BackendSet, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let splits = Split::select(&cfg.split).ok_or_else(|| EvalError::UnknownSplit(cfg.split.clone()))?;
    let scenes = dataset.scenes_in(&splits);
    if scenes.is_empty() {
        return Err(EvalError::EmptySplit(cfg.split.clone()));
    }
    let labels = match cfg.mode {
        Mode::Standard => backends.classifier.labels(),
        _ => None,
    };
    let mut skipped = BTreeSet::new();
    let mut trials = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        for object in &scene.objects {
            let id = &object.object;
            if let Some(labels) = &labels {
                if !labels.iter().any(|l| *l == id.subcategory || *l == id.category) {
                    skipped.insert(id.subcategory.clone());
                    continue;
                }
            }
            for rule in dataset.applicable_rules(&id.category) {
                trials.push(Trial { scene: s, object, rule });
            }
        }
    }
    let inputs = scenes
        .iter()
        .map(|s| load_scene(dataset, s))
        .collect::<Result<Vec<_>, _>>()?;

    let results: Vec<Mutex<Option<Result<TrialRecord, EvalError>>>> = trials.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(t) = trials.get(k) else { break };
        let r = run_trial(dataset, backends, cfg, scenes[t.scene], &inputs[t.scene], t);
        *results[k].lock().expect("result slot") = Some(r);
    };
    if cfg.workers <= 1 {
        work();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..cfg.workers.min(trials.len().max(1)) {
                scope.spawn(work);
            }
        });
    }
    let records = results
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("every trial ran"))
        .collect::<Result<Vec<_>, _>>()?;

    // segmentation quality is scored once per scene, on the SSF output
    let mut ap_images = Vec::with_capacity(scenes.len());
    for (scene, input) in scenes.iter().zip(&inputs) {
        let predictions = match backends.segmenter.segment(input) {
            Ok(masks) => ssf_filter(&masks, cfg.params.min_area, cfg.params.max_area, cfg.params.tau)
                .into_iter()
                .map(|mask| ScoredMask { mask, confidence: 1.0 })
                .collect(),
            Err(_) => Vec::new(),
        };
        ap_images.push(ApImage {
            predictions,
            ground_truth: scene.objects.iter().map(|o| o.mask.mask.clone()).collect(),
        });
    }
    let mask_ap = mask_ap(&ap_images, cfg)?;
    aggregate(cfg, records, skipped.into_iter().collect(), mask_ap)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn aggregate(
    cfg: &EvalConfig,
    records: Vec<TrialRecord>,
    skipped: Vec<String>,
    mask_ap: ApTable,
) -> Result<EvalReport, EvalError> {
    let mut pairs: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    let mut splits: BTreeMap<Split, (usize, usize)> = BTreeMap::new();
    let mut failures = FailureCounts::default();
    for r in &records {
        let p = pairs.entry((&r.object, &r.task)).or_default();
        p.0 += 1;
        p.1 += usize::from(r.success);
        let s = splits.entry(r.split).or_default();
        s.0 += 1;
        s.1 += usize::from(r.success);
        if let Some(f) = r.failure {
            failures.add(f);
        }
    }
    let recognition_pairs: Vec<(&str, &str)> = records
        .iter()
        .map(|r| (r.recognized.as_deref().unwrap_or("none"), r.object.as_str()))
        .collect();
    let recognition = f1_recognition(&recognition_pairs)?;
    let successes = records.iter().filter(|r| r.success).count();
    let grasp_ok = records.iter().filter(|r| r.grasp_success).count();
    let affordance_f1 = records.iter().map(|r| r.affordance_f1).sum::<f64>() / records.len() as f64;
    Ok(EvalReport {
        split: cfg.split.clone(),
        mode: cfg.mode,
        trials: records.len(),
        tg_accuracy: ratio(successes, records.len()),
        grasp_accuracy: ratio(grasp_ok, records.len()),
        pairs: pairs
            .into_iter()
            .map(|((object, task), (n, k))| PairStats {
                object: object.to_string(),
                task: task.to_string(),
                trials: n,
                successes: k,
                accuracy: ratio(k, n),
                partial_success: None,
            })
            .collect(),
        splits: splits
            .into_iter()
            .map(|(split, (n, k))| SplitStats {
                split,
                trials: n,
                successes: k,
                accuracy: ratio(k, n),
            })
            .collect(),
        recognition,
        affordance_f1,
        mask_ap,
        failures,
        skipped,
        records,
    })
}

/// Fills the manual partial-success column; unknown pairs are reported back.
pub fn apply_partial_overrides(
    report: &mut EvalReport,
    overrides: &BTreeMap<(String, String), f64>,
) -> Vec<(String, String)> {
    let mut unknown = Vec::new();
    for ((object, task), v) in overrides {
        match report.pairs.iter_mut().find(|p| p.object == *object && p.task == *task) {
            Some(p) => p.partial_success = Some(*v),
            None => unknown.push((object.clone(), task.clone())),
        }
    }
    unknown
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(EvalError::UnknownFormat(s.to_string())),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

pub fn report_markdown(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation: {} split, {} mode\n", r.split, r.mode);
    let _ = writeln!(
        s,
        "Trials: {}. TG accuracy: {:.3}. Grasp accuracy: {:.3}.\n",
        r.trials, r.tg_accuracy, r.grasp_accuracy
    );
    let _ = writeln!(s, "## Task-oriented grasping\n");
    let _ = writeln!(s, "| Object | Task | Trials | Successes | Accuracy | Partial |");
    let _ = writeln!(s, "|---|---|---:|---:|---:|---:|");
    for p in &r.pairs {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.3} | {} |",
            p.object,
            p.task,
            p.trials,
            p.successes,
            p.accuracy,
            opt(p.partial_success)
        );
    }
    let _ = writeln!(s, "\n## Splits\n");
    let _ = writeln!(s, "| Split | Trials | Successes | Accuracy |");
    let _ = writeln!(s, "|---|---:|---:|---:|");
    for p in &r.splits {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.3} |",
            p.split.name(),
            p.trials,
            p.successes,
            p.accuracy
        );
    }
    let _ = writeln!(s, "\n## Object recognition\n");
    let _ = writeln!(s, "| Accuracy | F1 (macro) | F1 (micro) |");
    let _ = writeln!(s, "|---:|---:|---:|");
    let rc = &r.recognition;
    let _ = writeln!(s, "| {:.3} | {:.3} | {:.3} |", rc.accuracy, rc.macro_f1, rc.micro_f1);
    let _ = writeln!(s, "\n## Affordance recognition\n");
    let _ = writeln!(s, "| F1 |\n|---:|\n| {:.3} |", r.affordance_f1);
    let _ = writeln!(s, "\n## Object segmentation\n");
    let _ = writeln!(s, "| AP | AP50 | AP75 | AP_S | AP_M | AP_L | IoU |");
    let _ = writeln!(s, "|---:|---:|---:|---:|---:|---:|---:|");
    let m = &r.mask_ap;
    let _ = writeln!(
        s,
        "| {:.3} | {:.3} | {:.3} | {} | {} | {} | {} |",
        m.ap,
        m.ap50,
        m.ap75,
        opt(m.ap_small),
        opt(m.ap_medium),
        opt(m.ap_large),
        opt(m.mean_iou)
    );
    let f = &r.failures;
    let _ = writeln!(s, "\n## Failures by stage\n");
    let _ = writeln!(s, "| Validation | Segmentation | Recognition | Region | Grasp |");
    let _ = writeln!(s, "|---:|---:|---:|---:|---:|");
    let _ = writeln!(
        s,
        "| {} | {} | {} | {} | {} |",
        f.validation, f.segmentation, f.recognition, f.region, f.grasp
    );
    if !r.skipped.is_empty() {
        let _ = writeln!(s, "\nSkipped (unknown to the classifier): {}", r.skipped.join(", "));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_pairs_csv(r: &EvalReport) -> String {
    let mut s = String::from("object,task,trials,successes,accuracy,partial_success\n");
    for p in &r.pairs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            csv_field(&p.object),
            csv_field(&p.task),
            p.trials,
            p.successes,
            p.accuracy,
            p.partial_success.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    s
}

pub fn report_trials_csv(r: &EvalReport) -> String {
    let mut s = String::from("scene_id,split,object,task,success,grasp_success,failure,recognized,affordance_f1\n");
    for t in &r.records {
        let failure = t
            .failure
            .map(|f| {
                serde_json::to_value(f)
                    .expect("enum serializes")
                    .as_str()
                    .unwrap_or_default()
                    .to_string()
            })
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            t.scene_id,
            t.split.name(),
            csv_field(&t.object),
            csv_field(&t.task),
            t.success,
            t.grasp_success,
            failure,
            csv_field(t.recognized.as_deref().unwrap_or("")),
            t.affordance_f1
        );
    }
    s
}

pub fn report_json(r: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

/// Writes the report into `dir` and returns the written paths:
/// `report.json`, `pairs.csv` plus `trials.csv`, or `report.md`.
pub fn emit_report(r: &EvalReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let files: Vec<(&str, String)> = match format {
        ReportFormat::Json => vec![("report.json", report_json(r))],
        ReportFormat::Csv => vec![("pairs.csv", report_pairs_csv(r)), ("trials.csv", report_trials_csv(r))],
        ReportFormat::Markdown => vec![("report.md", report_markdown(r))],
    };
    let mut out = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(io_error(&path))?;
        out.push(path);
    }
    Ok(out)
}

pub fn load_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> EvalConfig {
        EvalConfig::new("test", Mode::Binary)
    }

    fn g(x: f64, y: f64, w: f64, h: f64, t: f64) -> GraspRect {
        GraspRect::new(x, y, w, h, t).unwrap()
    }

    #[test]
    fn grasp_rule_examples() {
        let gt = g(50.0, 50.0, 40.0, 20.0, 0.0);
        assert!(grasp_success(&gt, &[gt], &cfg()).unwrap());
        assert!(!grasp_success(&g(50.0, 50.0, 40.0, 20.0, 40.0), &[gt], &cfg()).unwrap());
        assert!(grasp_success(&g(55.0, 50.0, 40.0, 20.0, 0.0), &[gt], &cfg()).unwrap());
        assert!(matches!(grasp_success(&gt, &[], &cfg()), Err(EvalError::NoGroundTruth)));
    }

    #[test]
    fn both_conditions_against_one_grasp() {
        // one gt overlaps but is rotated away, the other is aligned but far
        let pred = g(50.0, 50.0, 40.0, 20.0, 0.0);
        let gts = [g(50.0, 50.0, 40.0, 20.0, 60.0), g(200.0, 200.0, 40.0, 20.0, 0.0)];
        assert!(!grasp_success(&pred, &gts, &cfg()).unwrap());
    }

    #[test]
    fn tog_rule_examples() {
        let gt = g(10.0, 10.0, 8.0, 4.0, 0.0);
        let region = BinaryMask::from_fn(20, 20, |x, _| x <= 10);
        assert!(tog_success(&gt, &[gt], &region, &cfg()).unwrap());
        let outside = BinaryMask::from_fn(20, 20, |x, _| x <= 9);
        assert!(!tog_success(&gt, &[gt], &outside, &cfg()).unwrap());
        let bad = g(10.0, 10.0, 8.0, 4.0, 80.0);
        assert!(!tog_success(&bad, &[gt], &region, &cfg()).unwrap());
        assert!(matches!(
            tog_success(&gt, &[gt], &BinaryMask::new(20, 20), &cfg()),
            Err(EvalError::EmptyRegion)
        ));
    }

    #[test]
    fn f1_examples() {
        let all = f1_recognition(&[("a", "a"), ("b", "b")]).unwrap();
        assert_eq!((all.accuracy, all.macro_f1), (1.0, 1.0));
        let mixed = f1_recognition(&[("a", "a"), ("a", "b"), ("b", "a"), ("b", "b")]).unwrap();
        assert_abs_diff_eq!(mixed.accuracy, 0.5);
        assert_abs_diff_eq!(mixed.macro_f1, 0.5);
        let one = f1_recognition(&[("a", "a"), ("a", "b")]).unwrap();
        assert_abs_diff_eq!(one.accuracy, 0.5);
        assert_abs_diff_eq!(one.macro_f1, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(one.micro_f1, one.accuracy, epsilon = 1e-12);
        assert!(matches!(f1_recognition::<&str>(&[]), Err(EvalError::EmptyTrials)));
    }

    fn square(x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(100, 100, |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
    }

    #[test]
    fn ap_examples() {
        let gt = square(10, 10, 20);
        let perfect = [ApImage {
            predictions: vec![ScoredMask {
                mask: gt.clone(),
                confidence: 0.9,
            }],
            ground_truth: vec![gt.clone()],
        }];
        let t = mask_ap(&perfect, &cfg()).unwrap();
        assert_eq!((t.ap, t.ap50, t.ap75), (1.0, 1.0, 1.0));
        assert_eq!(t.ap_small, Some(1.0));
        assert_eq!((t.ap_medium, t.ap_large), (None, None));
        assert_eq!(t.mean_iou, Some(1.0));

        let none = [ApImage {
            predictions: vec![],
            ground_truth: vec![gt.clone()],
        }];
        assert_eq!(mask_ap(&none, &cfg()).unwrap().ap, 0.0);

        // 20x20 gt, 20x12 prediction inside it: IoU 240 / 400 = 0.6
        let pred = BinaryMask::from_fn(100, 100, |x, y| (10..30).contains(&x) && (10..22).contains(&y));
        let partial = [ApImage {
            predictions: vec![ScoredMask {
                mask: pred,
                confidence: 0.5,
            }],
            ground_truth: vec![gt],
        }];
        let t = mask_ap(&partial, &cfg()).unwrap();
        assert_abs_diff_eq!(t.ap, 0.3, epsilon = 1e-12);
        assert_eq!((t.ap50, t.ap75), (1.0, 0.0));
    }

    #[test]
    fn format_names() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!(matches!(
            "xml".parse::<ReportFormat>(),
            Err(EvalError::UnknownFormat(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.ap_grid = vec![0.5, 0.5];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.angle_threshold = 0.0;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
