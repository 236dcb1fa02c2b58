//! Stage artifacts for `tog run --dump-trace`.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use tog_core::geometry::GraspRect;
use tog_core::maskops::BinaryMask;
use tog_core::pipeline::{TogRequest, TogTrace};
use tog_core::raster::{draw_grasp, overlay_mask, RgbImage};

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub const ARTIFACTS: [&str; 5] = [
    "1_segments.png",
    "2_filtered.png",
    "3_recognized.png",
    "4_region.png",
    "5_grasp.png",
];

fn overlay_all<'a>(scene: &RgbImage, masks: impl Iterator<Item = &'a BinaryMask>) -> RgbImage {
    let mut img = scene.clone();
    for (i, m) in masks.enumerate() {
        overlay_mask(&mut img, m, PALETTE[i % PALETTE.len()], 0.5);
    }
    img
}

/// Writes the five stage images and `trace.json`. Stages the run never reached
/// are drawn as the bare scene; the log records where it stopped.
pub fn dump(
    dir: &Path,
    req: &TogRequest,
    trace: &TogTrace,
    outcome: Result<&GraspRect, (String, String)>,
) -> Result<Vec<PathBuf>, String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let scene = &req.scene.image;
    let mut grasps = scene.clone();
    if let Some(region) = &trace.region {
        overlay_mask(&mut grasps, region, [0, 200, 0], 0.35);
    }
    for g in &trace.grasps {
        draw_grasp(&mut grasps, g, [150, 150, 150], [90, 90, 90]);
    }
    if let Some(g) = trace.grasp() {
        draw_grasp(&mut grasps, g, [255, 0, 0], [0, 0, 255]);
    }
    let images = [
        overlay_all(scene, trace.segments.iter()),
        overlay_all(scene, trace.kept_masks()),
        overlay_all(scene, trace.candidate().into_iter()),
        overlay_all(scene, trace.region.iter()),
        grasps,
    ];
    let mut written = Vec::new();
    for (name, img) in ARTIFACTS.iter().zip(&images) {
        let path = dir.join(name);
        img.save_png(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        written.push(path);
    }

    let outcome: Value = match outcome {
        Ok(g) => json!({"status": "ok", "grasp": g}),
        Err((stage, error)) => json!({"status": "failed", "stage": stage, "error": error}),
    };
    let doc = json!({
        "scene_id": req.scene.scene_id,
        "target": req.target,
        "task": req.task,
        "mode": req.mode,
        "params": req.params,
        "segments": trace.segments.len(),
        "kept": trace.kept,
        "scores": trace.scores,
        "selected": trace.selected,
        "rotation_deg": trace.rotation_deg,
        "region_area": trace.region.as_ref().map(BinaryMask::area),
        "grasps": trace.grasps,
        "selected_grasp": trace.selected_grasp,
        "log": trace.log,
        "outcome": outcome,
    });
    let path = dir.join("trace.json");
    let mut text = serde_json::to_string_pretty(&doc).expect("trace serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    written.push(path);
    Ok(written)
}
