//! Browser demo over the core crate: rotated grasp IoU, size subset filtering
//! on a generated scene, and affordance alignment of a rotated reference.
//!
//! Methods return JSON strings (`{"error": ...}` on failure) and raw RGBA
//! buffers so the same API runs natively in tests.

use std::path::Path;

use serde_json::{json, Value};
use tog_core::backends::{oracle_segment, NoiseConfig};
use tog_core::dataset::{rule_lookup, Dataset};
use tog_core::eval::{grasp_success_with, DEFAULT_ANGLE_THRESHOLD, DEFAULT_IOU_THRESHOLD};
use tog_core::geometry::{angle_diff, make_crop_transform, rect_corners, rotate_crop, rotated_iou, BBox, GraspRect};
use tog_core::maskops::{mask_bbox, BinaryMask};
use tog_core::pipeline::{affordance_align, reference_task_region, ssf_keep_indices};
use tog_core::raster::{overlay_mask, RgbImage};
use tog_core::synth;
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 200, 0],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

const CROP_SIDE: usize = 160;

fn error(e: impl std::fmt::Display) -> String {
    json!({ "error": e.to_string() }).to_string()
}

fn rect(v: &[f64]) -> Result<GraspRect, String> {
    match v {
        [x, y, w, h, theta] => GraspRect::new(*x, *y, *w, *h, *theta).map_err(|e| e.to_string()),
        _ => Err(format!("expected x, y, w, h, theta; got {} numbers", v.len())),
    }
}

fn corners(g: &GraspRect) -> Value {
    rect_corners(g).iter().map(|p| json!([p.x, p.y])).collect()
}

/// IoU, angle difference and the success verdict for two grasps given as
/// `[x, y, w, h, theta]`, plus their corners for drawing.
#[wasm_bindgen]
pub fn grasp_overlap(pred: &[f64], truth: &[f64]) -> String {
    let (a, b) = match (rect(pred), rect(truth)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return error(e),
    };
    let success = grasp_success_with(&a, &[b], DEFAULT_IOU_THRESHOLD, DEFAULT_ANGLE_THRESHOLD).unwrap_or(false);
    json!({
        "iou": rotated_iou(&a, &b),
        "angle_diff": angle_diff(a.theta, b.theta),
        "success": success,
        "pred": corners(&a),
        "truth": corners(&b),
    })
    .to_string()
}

/// Holds a generated fixture and the state of the last segmentation and
/// alignment so the page can redraw without recomputing.
#[wasm_bindgen]
pub struct Demo {
    dataset: Dataset,
    images: Vec<RgbImage>,
    references: Vec<RgbImage>,
    scene: usize,
    segments: Vec<BinaryMask>,
    kept: Vec<usize>,
    panels: Option<RgbImage>,
}

impl Default for Demo {
    fn default() -> Self {
        Self::new()
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        let generated = synth::generate(&synth::mini_spec(), Path::new("")).expect("built-in fixture generates");
        let image = |p: &Path| generated.images[p].clone();
        let images = generated.dataset.scenes.iter().map(|s| image(&s.image_path)).collect();
        let references = generated.dataset.entries.iter().map(|e| image(&e.image_path)).collect();
        Demo {
            dataset: generated.dataset,
            images,
            references,
            scene: 0,
            segments: Vec::new(),
            kept: Vec::new(),
            panels: None,
        }
    }

    pub fn width(&self) -> usize {
        synth::WIDTH
    }

    pub fn height(&self) -> usize {
        synth::HEIGHT
    }

    /// Scene and reference names as JSON.
    pub fn catalog(&self) -> String {
        let scenes: Vec<Value> = self
            .dataset
            .scenes
            .iter()
            .map(|s| {
                let objects: Vec<&str> = s.objects.iter().map(|o| o.object.subcategory.as_str()).collect();
                json!({ "id": s.image_id, "split": s.split, "objects": objects })
            })
            .collect();
        let references: Vec<Value> = self
            .dataset
            .entries
            .iter()
            .map(|e| {
                let tasks: Vec<&str> = self
                    .dataset
                    .applicable_rules(&e.object().category)
                    .iter()
                    .map(|r| r.task.as_str())
                    .collect();
                json!({ "object": e.object().subcategory, "tasks": tasks })
            })
            .collect();
        json!({ "scenes": scenes, "references": references }).to_string()
    }

    /// Runs the noisy ground-truth segmenter on a scene and filters the result.
    #[allow(clippy::too_many_arguments)]
    pub fn segment(
        &mut self,
        scene: usize,
        seed: u64,
        fragments: usize,
        blobs: usize,
        tau: f64,
        min_area: usize,
        max_area: usize,
    ) -> String {
        let Some(s) = self.dataset.scenes.get(scene) else {
            return error(format!("no scene {scene}"));
        };
        if !(tau > 0.0 && tau <= 1.0) {
            return error(format!("tau {tau} outside (0, 1]"));
        }
        let noise = NoiseConfig {
            fragments,
            background_blobs: blobs,
            ..NoiseConfig::default()
        };
        self.scene = scene;
        self.segments = oracle_segment(s, &noise, seed);
        self.kept = ssf_keep_indices(&self.segments, min_area, max_area, tau);
        let areas: Vec<usize> = self.segments.iter().map(BinaryMask::area).collect();
        let objects = s.objects.len();
        let exact = self.kept.len() == objects
            && self
                .kept
                .iter()
                .zip(&s.objects)
                .all(|(&k, o)| self.segments[k] == o.mask.mask);
        json!({
            "segments": self.segments.len(),
            "areas": areas,
            "kept": self.kept,
            "objects": objects,
            "recovers_objects": exact,
        })
        .to_string()
    }

    /// RGBA of the last segmented scene with every segment (or only the kept
    /// ones) tinted.
    pub fn render_segments(&self, kept_only: bool) -> Vec<u8> {
        let mut img = self.images[self.scene].clone();
        let masks: Vec<&BinaryMask> = if kept_only {
            self.kept.iter().map(|&i| &self.segments[i]).collect()
        } else {
            self.segments.iter().collect()
        };
        for (i, m) in masks.into_iter().enumerate() {
            overlay_mask(&mut img, m, PALETTE[i % PALETTE.len()], 0.55);
        }
        img.to_rgba()
    }

    /// Rotates a reference crop by `rotation` degrees and recovers the angle
    /// with `n_rots` candidates. Draws reference, rotated view and the
    /// aligned task region side by side (see `render_alignment`).
    pub fn align(&mut self, reference: usize, task: &str, rotation: i32, n_rots: usize) -> String {
        match self.try_align(reference, task, rotation, n_rots) {
            Ok(v) => v.to_string(),
            Err(e) => error(e),
        }
    }

    pub fn panel_width(&self) -> usize {
        3 * CROP_SIDE
    }

    pub fn panel_height(&self) -> usize {
        CROP_SIDE
    }

    pub fn render_alignment(&self) -> Vec<u8> {
        self.panels
            .as_ref()
            .map(RgbImage::to_rgba)
            .unwrap_or_else(|| vec![0; 4 * 3 * CROP_SIDE * CROP_SIDE])
    }
}

impl Demo {
    fn try_align(&mut self, reference: usize, task: &str, rotation: i32, n_rots: usize) -> Result<Value, String> {
        let entry = self
            .dataset
            .entries
            .get(reference)
            .ok_or(format!("no reference {reference}"))?;
        if n_rots == 0 || n_rots > 360 {
            return Err(format!("n_rots {n_rots} outside 1..=360"));
        }
        let rule = rule_lookup(&self.dataset.rules, task).map_err(|e| e.to_string())?;
        let region = reference_task_region(entry, rule).map_err(|e| e.to_string())?;
        let bbox = BBox::from(mask_bbox(entry.mask()).map_err(|e| e.to_string())?);
        let t = make_crop_transform(bbox, CROP_SIDE).map_err(|e| e.to_string())?;
        let image = &self.references[reference];
        let ref_crop = t.crop_image(&image.masked(entry.mask()).map_err(|e| e.to_string())?);
        let region_crop = t.crop_mask(&region);
        let scene_crop = rotate_crop(&ref_crop, rotation).map_err(|e| e.to_string())?;
        let a = affordance_align(&scene_crop, &ref_crop, &region_crop, n_rots).map_err(|e| e.to_string())?;

        let mut left = ref_crop.clone();
        overlay_mask(&mut left, &region_crop, [0, 200, 0], 0.5);
        let mut right = scene_crop.clone();
        overlay_mask(&mut right, &a.reference_region, [0, 200, 0], 0.5);
        let mut panels = RgbImage::new(3 * CROP_SIDE, CROP_SIDE);
        for (k, p) in [&left, &scene_crop, &right].into_iter().enumerate() {
            for y in 0..CROP_SIDE {
                for x in 0..CROP_SIDE {
                    panels.put(k * CROP_SIDE + x, y, p.pixel(x, y));
                }
            }
        }
        self.panels = Some(panels);
        let error = {
            let d = (a.degrees - rotation).rem_euclid(360);
            d.min(360 - d)
        };
        Ok(json!({
            "object": entry.object().subcategory,
            "task": task,
            "rotation": rotation.rem_euclid(360),
            "recovered": a.degrees,
            "step": 360 / n_rots,
            "error_deg": error,
            "region_px": region_crop.area(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn overlap_reports_success_rule() {
        let v = parse(&grasp_overlap(
            &[50.0, 50.0, 40.0, 20.0, 0.0],
            &[50.0, 50.0, 40.0, 20.0, 30.0],
        ));
        assert_eq!(v["success"], true);
        assert_eq!(v["angle_diff"], 30.0);
        assert_eq!(v["pred"].as_array().unwrap().len(), 4);
        let v = parse(&grasp_overlap(
            &[50.0, 50.0, 40.0, 20.0, 0.0],
            &[50.0, 50.0, 40.0, 20.0, 31.0],
        ));
        assert_eq!(v["success"], false);
        let v = parse(&grasp_overlap(&[1.0, 2.0], &[50.0, 50.0, 40.0, 20.0, 31.0]));
        assert!(v["error"].is_string());
    }

    #[test]
    fn filtering_recovers_objects() {
        let mut d = Demo::new();
        let catalog = parse(&d.catalog());
        assert_eq!(catalog["scenes"].as_array().unwrap().len(), 3);
        for scene in 0..3 {
            let v = parse(&d.segment(scene, 4, 3, 4, 0.75, 400, 50_000));
            assert_eq!(v["recovers_objects"], true, "{v}");
            assert!(v["segments"].as_u64().unwrap() > v["objects"].as_u64().unwrap());
        }
        let rgba = d.render_segments(true);
        assert_eq!(rgba.len(), 4 * d.width() * d.height());
        assert!(parse(&d.segment(9, 0, 0, 0, 0.75, 400, 50_000))["error"].is_string());
    }

    #[test]
    fn alignment_recovers_rotation() {
        let mut d = Demo::new();
        for rotation in [0, 90, 130, 270] {
            let v = parse(&d.align(0, "handover", rotation, 36));
            assert_eq!(v["error_deg"], 0, "{v}");
        }
        let v = parse(&d.align(0, "handover", 45, 8));
        assert_eq!(v["recovered"], 45);
        assert_eq!(d.render_alignment().len(), 4 * d.panel_width() * d.panel_height());
        assert!(parse(&d.align(0, "no-such-task", 0, 36))["error"].is_string());
    }
}
