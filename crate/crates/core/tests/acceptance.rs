//! Acceptance criteria AC1 to AC10. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use tog_core::backends::oracle::{oracle_segment, OracleBackend};
use tog_core::backends::protocol::MaskResult;
use tog_core::backends::{
    AffordancePrediction, BackendError, BackendSet, Concurrency, ExternalProcess, Kind, NoiseConfig, ProcessSpec,
    SceneInput,
};
use tog_core::dataset::{
    default_rules, load_dataset, to_manifest_json, AnnotatedMask, Category, Dataset, KnowledgeEntry, ObjectAnnotation,
    ObjectId, Polarity, SceneAnnotation, Split, TaskRule,
};
use tog_core::eval::{
    evaluate_split, grasp_success, mask_ap, report_json, tog_success, ApImage, EvalConfig, EvalError, EvalReport,
    FailureStage, ScoredMask,
};
use tog_core::geometry::{rotate_crop, rotated_iou, GraspRect};
use tog_core::maskops::{BinaryMask, MaskWire};
use tog_core::pipeline::{
    affordance_align, reference_task_region, run_tog, ssf_keep_indices, standard_task_region, Mode, PipelineError,
    Stage, TogParams, TogRequest,
};
use tog_core::raster::RgbImage;

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn synthetic() -> Arc<Dataset> {
    Arc::new(load_dataset(&fixtures().join("synthetic/manifest.json")).expect("synthetic fixture loads"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))
}

// ---------------------------------------------------------------- AC1

/// Direct transcription of the filter: area gate, then ascending-area order
/// (index breaks ties), then removal against every later mask.
fn ssf_brute(masks: &[BinaryMask], min_area: usize, max_area: usize, tau: f64) -> Vec<usize> {
    let area = |m: &BinaryMask| {
        (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| m.get(x, y))
            .count()
    };
    let mut survivors: Vec<(usize, usize)> = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        let a = area(m);
        if a > min_area && a < max_area {
            survivors.push((a, i));
        }
    }
    survivors.sort();
    let mut kept = Vec::new();
    for (k, &(a, i)) in survivors.iter().enumerate() {
        let mut removed = false;
        for &(_, j) in &survivors[k + 1..] {
            let mut inter = 0;
            for y in 0..masks[i].height() {
                for x in 0..masks[i].width() {
                    if masks[i].get(x, y) && masks[j].get(x, y) {
                        inter += 1;
                    }
                }
            }
            if inter as f64 / a as f64 > tau {
                removed = true;
            }
        }
        if !removed {
            kept.push(i);
        }
    }
    kept.sort();
    kept
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let x0 = rng.random_range(0..w);
    let y0 = rng.random_range(0..h);
    let x1 = rng.random_range(x0..=w);
    let y1 = rng.random_range(y0..=h);
    let holey = rng.random_bool(0.3);
    BinaryMask::from_fn(w, h, |x, y| {
        (x0..x1).contains(&x) && (y0..y1).contains(&y) && !(holey && (x + 2 * y) % 7 == 0)
    })
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let n = rng.random_range(0..=20);
        let masks: Vec<BinaryMask> = (0..n).map(|_| random_mask(&mut rng, 48, 40)).collect();
        let min_area = rng.random_range(0..200);
        let max_area = rng.random_range(min_area + 1..2000);
        let tau = rng.random_range(0.05..=1.0);
        let got = ssf_keep_indices(&masks, min_area, max_area, tau);
        let want = ssf_brute(&masks, min_area, max_area, tau);
        ensure(got == want, || {
            format!("case {case}: kept {got:?}, brute force {want:?}")
        })?;
    }
    let brute = start.elapsed();

    let d = synthetic();
    let mini = load_dataset(&fixtures().join("mini/manifest.json")).map_err(|e| e.to_string())?;
    let noise = NoiseConfig {
        fragments: 3,
        background_blobs: 4,
        ..NoiseConfig::default()
    };
    let p = TogParams::default();
    let (mut injected, mut removed) = (0, 0);
    for seed in 0..3 {
        for scene in d.scenes.iter().chain(&mini.scenes) {
            let masks = oracle_segment(scene, &noise, seed);
            let truth: Vec<&BinaryMask> = scene.objects.iter().map(|o| &o.mask.mask).collect();
            let kept = ssf_keep_indices(&masks, p.min_area, p.max_area, p.tau);
            let kept_masks: Vec<&BinaryMask> = kept.iter().map(|&i| &masks[i]).collect();
            ensure(kept_masks == truth, || {
                format!(
                    "scene {} seed {seed}: {} kept, {} objects",
                    scene.image_id,
                    kept.len(),
                    truth.len()
                )
            })?;
            let noise_masks = masks.iter().filter(|m| !truth.contains(m)).count();
            injected += noise_masks;
            removed += noise_masks;
        }
    }
    ensure(injected > 0, || "no noise masks were injected".into())?;
    within(Duration::from_secs(5), start)?;
    Ok(format!(
        "200 random sets match brute force ({brute:.2?}); {removed}/{injected} injected fragments and blobs removed"
    ))
}

// ---------------------------------------------------------------- AC2

fn inside(g: &GraspRect, px: f64, py: f64) -> bool {
    let (s, c) = g.theta.to_radians().sin_cos();
    let (dx, dy) = (px - g.x, py - g.y);
    // width axis (cos, -sin), height axis (sin, cos)
    (dx * c - dy * s).abs() <= g.w / 2.0 && (dx * s + dy * c).abs() <= g.h / 2.0
}

/// IoU by point sampling on a 0.1 px lattice over the joint bounding box.
fn raster_iou(a: &GraspRect, b: &GraspRect) -> f64 {
    let reach = |g: &GraspRect| (g.w.hypot(g.h)) / 2.0;
    let x0 = (a.x - reach(a)).min(b.x - reach(b));
    let x1 = (a.x + reach(a)).max(b.x + reach(b));
    let y0 = (a.y - reach(a)).min(b.y - reach(b));
    let y1 = (a.y + reach(a)).max(b.y + reach(b));
    let step = 0.1;
    let (mut inter, mut union) = (0u64, 0u64);
    let mut y = y0 + step / 2.0;
    while y < y1 {
        let mut x = x0 + step / 2.0;
        while x < x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
            x += step;
        }
        y += step;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn random_rect(rng: &mut ChaCha8Rng) -> GraspRect {
    GraspRect::new(
        rng.random_range(20.0..50.0),
        rng.random_range(20.0..50.0),
        rng.random_range(8.0..40.0),
        rng.random_range(8.0..40.0),
        rng.random_range(-89.9..=90.0),
    )
    .expect("valid rectangle")
}

fn ac2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let (a, b) = (random_rect(&mut rng), random_rect(&mut rng));
        let (poly, raster) = (rotated_iou(&a, &b), raster_iou(&a, &b));
        worst = worst.max((poly - raster).abs());
        ensure((poly - raster).abs() < 0.01, || {
            format!("pair {k}: polygon {poly}, raster {raster}")
        })?;
    }
    for k in 0..100 {
        let a = random_rect(&mut rng);
        ensure(rotated_iou(&a, &a) == 1.0, || {
            format!("identity {k}: {}", rotated_iou(&a, &a))
        })?;
        let far = GraspRect::new(a.x + 200.0, a.y, a.w, a.h, -a.theta).expect("valid");
        ensure(rotated_iou(&a, &far) == 0.0, || format!("disjoint {k}"))?;
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "1000 pairs, max |polygon - raster| = {worst:.4}; identity 1.0 and disjoint 0.0 exact"
    ))
}

// ---------------------------------------------------------------- AC3

fn ac3() -> Outcome {
    let cfg = EvalConfig::new("test", Mode::Binary);
    let mut cases: Vec<(String, GraspRect, GraspRect, bool)> = Vec::new();
    // angle boundary: same rectangle turned in place, overlap far above threshold
    for (gt_theta, delta) in [
        (0.0, 30.0),
        (0.0, 31.0),
        (75.0, 30.0),
        (75.0, 31.0),
        (-80.0, -30.0),
        (-80.0, -31.0),
        (89.0, 2.0),
    ] {
        let gt = GraspRect::new(50.0, 50.0, 40.0, 20.0, gt_theta).expect("valid");
        let pred = GraspRect::new(
            50.0,
            50.0,
            40.0,
            20.0,
            tog_core::geometry::normalize_theta(gt_theta + delta),
        )
        .expect("valid");
        let oracle = raster_iou(&pred, &gt);
        if oracle <= 0.3 {
            return Err(format!("angle case {gt_theta}+{delta} overlaps only {oracle}"));
        }
        cases.push((
            format!("dtheta {delta} at {gt_theta}"),
            pred,
            gt,
            f64::abs(delta) <= 30.0,
        ));
    }
    // IoU boundary: shifting a w x h box by d along its width gives IoU (w - d) / (w + d)
    for theta in [0.0, 37.0, -61.0] {
        let gt = GraspRect::new(60.0, 60.0, 40.0, 20.0, theta).expect("valid");
        for d in [23.0, 23.9, 23.99, 24.01, 24.1, 25.0] {
            let (s, c) = f64::to_radians(theta).sin_cos();
            let pred = GraspRect::new(60.0 + d * c, 60.0 - d * s, 40.0, 20.0, theta).expect("valid");
            let exact = (40.0 - d) / (40.0 + d);
            cases.push((format!("shift {d} at {theta}"), pred, gt, exact > 0.25));
        }
    }
    // exactly 0.25 in exact arithmetic: strict rule rejects it
    let gt = GraspRect::new(60.0, 60.0, 40.0, 20.0, 0.0).expect("valid");
    let pred = GraspRect::new(84.0, 60.0, 40.0, 20.0, 0.0).expect("valid");
    cases.push(("IoU exactly 0.25".into(), pred, gt, false));

    let mut disagreements = Vec::new();
    for (name, pred, gt, want) in &cases {
        let got = grasp_success(pred, std::slice::from_ref(gt), &cfg).map_err(|e| e.to_string())?;
        if got != *want {
            disagreements.push(format!("{name}: rule {got}, expected {want}"));
        }
    }
    ensure(disagreements.is_empty(), || disagreements.join("; "))?;
    Ok(format!("{} boundary cases, zero disagreements", cases.len()))
}

// ---------------------------------------------------------------- AC4

fn rule(polarity: Polarity) -> TaskRule {
    let task = match polarity {
        Polarity::Require => "hitting",
        Polarity::Avoid => "handover",
        Polarity::None => "transport",
    };
    default_rules()
        .into_iter()
        .find(|r| r.task == task)
        .expect("rule exists")
}

fn annotation(object: BinaryMask, grasp_affordance: BinaryMask, grasps: Vec<GraspRect>) -> ObjectAnnotation {
    ObjectAnnotation {
        annotation_id: 1,
        category_id: 1,
        object: ObjectId {
            category: "hammer".into(),
            subcategory: "hammer_01".into(),
        },
        mask: AnnotatedMask::raster(object),
        affordances: BTreeMap::from([("grasp".to_string(), AnnotatedMask::raster(grasp_affordance))]),
        grasps,
        description: Some("a hammer".into()),
        properties: BTreeMap::new(),
    }
}

fn ac4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (40, 30);
    let mut checked = 0;
    for pair in 0..50 {
        let m = random_mask(&mut rng, w, h);
        let f = match pair % 5 {
            0 => m.clone(),
            1 => BinaryMask::new(w, h),
            _ => random_mask(&mut rng, w, h),
        };
        let entry = KnowledgeEntry {
            image_id: 1,
            image_path: PathBuf::from("unused.png"),
            width: w,
            height: h,
            annotation: annotation(m.clone(), f.clone(), vec![]),
        };
        for polarity in [Polarity::Require, Polarity::Avoid, Polarity::None] {
            let r = rule(polarity);
            let want = BinaryMask::from_fn(w, h, |x, y| match polarity {
                Polarity::Require => m.get(x, y) && f.get(x, y),
                Polarity::Avoid => m.get(x, y) && !f.get(x, y),
                Polarity::None => m.get(x, y),
            });
            let gt = entry.annotation.task_region(&r).map_err(|e| e.to_string())?;
            let reference = reference_task_region(&entry, &r).map_err(|e| e.to_string())?;
            let prediction = AffordancePrediction {
                label: "grasp".into(),
                confidence: 0.9,
                mask: f.clone(),
            };
            let standard = standard_task_region(&m, &[prediction], &r, 0.5).map_err(|e| e.to_string())?;
            ensure(gt == want && reference == want && standard == want, || {
                format!("pair {pair}, {polarity:?}: region differs from the case formula")
            })?;
            checked += 1;
        }
    }

    // Avoid with F = M leaves nothing: the pipeline and the scorer both refuse it
    let (w, h) = (120, 100);
    let object = BinaryMask::from_fn(w, h, |x, y| (30..90).contains(&x) && (30..70).contains(&y));
    let grasp = GraspRect::new(60.0, 50.0, 30.0, 10.0, 90.0).expect("valid");
    let scene = SceneAnnotation {
        image_id: 1,
        image_path: PathBuf::from("scene.png"),
        depth_path: None,
        width: w,
        height: h,
        split: Split::KcKsc,
        objects: vec![annotation(object.clone(), object.clone(), vec![grasp])],
    };
    let dataset = Arc::new(Dataset {
        root: PathBuf::from("."),
        affordances: vec!["grasp".into()],
        categories: vec![Category {
            id: 1,
            name: "hammer".into(),
            subcategory: "hammer_01".into(),
        }],
        entries: vec![],
        scenes: vec![scene],
        rules: default_rules(),
    });
    let backends = BackendSet::oracle(OracleBackend::new(dataset.clone(), NoiseConfig::default(), 0));
    let req = TogRequest {
        scene: SceneInput {
            scene_id: 1,
            image: RgbImage::filled(w, h, [90, 90, 90]),
            path: None,
        },
        target: "hammer_01".into(),
        task: "handover".into(),
        mode: Mode::Standard,
        params: TogParams {
            min_area: 10,
            ..TogParams::default()
        },
    };
    match run_tog(&req, &backends, &dataset) {
        Err(f) if f.stage == Stage::Region && matches!(f.error, PipelineError::EmptyRegion) => {}
        Err(f) => {
            return Err(format!(
                "expected EmptyRegion at region stage, got {} at {}",
                f.error, f.stage
            ))
        }
        Ok(_) => return Err("expected EmptyRegion, pipeline succeeded".into()),
    }
    let empty = dataset.scenes[0].objects[0]
        .task_region(&rule(Polarity::Avoid))
        .map_err(|e| e.to_string())?;
    let cfg = EvalConfig::new("test", Mode::Standard);
    ensure(
        matches!(tog_success(&grasp, &[grasp], &empty, &cfg), Err(EvalError::EmptyRegion)),
        || "scorer accepted an empty region".into(),
    )?;
    Ok(format!(
        "{checked} region computations equal the case formula; F = M under Avoid surfaces EmptyRegion"
    ))
}

// ---------------------------------------------------------------- AC5

/// Asymmetric binary shape: an L with a notch, white on black.
fn binary_fixture(n: usize) -> (RgbImage, BinaryMask) {
    let c = n / 2;
    let region = BinaryMask::from_fn(n, n, |x, y| {
        let bar = (c - 30..c + 40).contains(&x) && (c - 8..c + 8).contains(&y);
        let leg = (c - 30..c - 14).contains(&x) && (c - 45..c).contains(&y);
        let notch = (c + 20..c + 28).contains(&x) && (c + 8..c + 18).contains(&y);
        bar || leg || notch
    });
    let mut img = RgbImage::new(n, n);
    for (x, y) in region.iter_set() {
        img.put(x, y, [255, 255, 255]);
    }
    (img, region)
}

fn ac5() -> Outcome {
    let n = 256;
    let (img, region) = binary_fixture(n);
    let masked = img.masked(&region).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for n_rots in [4usize, 8, 36] {
        let step = (360 / n_rots) as i32;
        let (mut exact, mut off_by_one) = (0, 0);
        for i in 0..n_rots as i32 {
            let truth = i * step;
            let scene = rotate_crop(&masked, truth).map_err(|e| e.to_string())?;
            let a = affordance_align(&scene, &img, &region, n_rots).map_err(|e| e.to_string())?;
            let diff = (a.degrees - truth).rem_euclid(360);
            let steps_off = (diff / step).min((360 - diff) / step);
            if diff == 0 {
                exact += 1;
            } else if truth % 90 == 0 {
                return Err(format!(
                    "n_rots {n_rots}: quarter turn {truth} recovered as {}",
                    a.degrees
                ));
            } else if steps_off <= 1 {
                off_by_one += 1;
            } else {
                return Err(format!("n_rots {n_rots}: {truth} recovered as {}", a.degrees));
            }
        }
        summary.push(format!(
            "n_rots {n_rots}: {exact}/{n_rots} exact, {off_by_one} within one step"
        ));
    }
    Ok(summary.join("; "))
}

// ---------------------------------------------------------------- AC6

fn ac6() -> Outcome {
    let start = Instant::now();
    let d = synthetic();
    let tasks: std::collections::BTreeSet<&str> = d
        .scenes
        .iter()
        .flat_map(|s| s.objects.iter())
        .flat_map(|o| d.applicable_rules(&o.object.category))
        .map(|r| r.task.as_str())
        .collect();
    let test_scenes = d.scenes_in(&Split::select("test").expect("selector")).len();
    ensure(test_scenes >= 10 && d.entries.len() >= 8 && tasks.len() >= 5, || {
        format!(
            "fixture too small: {test_scenes} scenes, {} subcategories, {} tasks",
            d.entries.len(),
            tasks.len()
        )
    })?;
    let backends = BackendSet::oracle(OracleBackend::new(d.clone(), NoiseConfig::default(), 0));
    let mut lines = Vec::new();
    for mode in Mode::ALL {
        let mut runs: Vec<(EvalReport, String)> = Vec::new();
        for workers in [1, 2] {
            let mut cfg = EvalConfig::new("test", mode);
            cfg.workers = workers;
            let r = evaluate_split(&d, &backends, &cfg).map_err(|e| format!("{mode}: {e}"))?;
            let json = report_json(&r);
            runs.push((r, json));
        }
        let r = &runs[0].0;
        ensure(runs[0].1 == runs[1].1, || format!("{mode}: two runs differ"))?;
        ensure(
            r.recognition.accuracy == 1.0 && r.affordance_f1 == 1.0 && r.tg_accuracy == 1.0,
            || {
                format!(
                    "{mode}: recognition {}, affordance F1 {}, TG {}",
                    r.recognition.accuracy, r.affordance_f1, r.tg_accuracy
                )
            },
        )?;
        lines.push(format!("{mode} {} trials", r.trials));
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{test_scenes} scenes, {} subcategories, {} tasks; {}; all metrics 1.0, runs identical ({:.1?})",
        d.entries.len(),
        tasks.len(),
        lines.join(", "),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- AC7

fn ac7() -> Outcome {
    let d = synthetic();
    let seed = 5;
    let noise = NoiseConfig {
        segment_dropout: 0.2,
        embedding_sigma: 0.5,
        ..NoiseConfig::default()
    };
    let backends = BackendSet::oracle(OracleBackend::new(d.clone(), noise.clone(), seed));
    let mut counts: BTreeMap<FailureStage, usize> = BTreeMap::new();
    let mut lines = Vec::new();
    for mode in Mode::ALL {
        let r = evaluate_split(&d, &backends, &EvalConfig::new("test", mode)).map_err(|e| e.to_string())?;
        ensure(r.tg_accuracy < 1.0, || {
            format!("{mode}: accuracy {} under noise", r.tg_accuracy)
        })?;
        for t in r.records.iter().filter(|t| !t.success) {
            let scene = d.scene(t.scene_id).expect("scene exists");
            let target = scene.find_object(&t.object).expect("object exists");
            let segmented = oracle_segment(scene, &noise, seed).contains(&target.mask.mask);
            let expected = if segmented {
                FailureStage::Recognition
            } else {
                FailureStage::Segmentation
            };
            ensure(t.failure == Some(expected), || {
                format!(
                    "{mode}: scene {} {} {}: attributed {:?}, expected {expected:?}",
                    t.scene_id, t.object, t.task, t.failure
                )
            })?;
            if expected == FailureStage::Recognition {
                ensure(t.recognized.as_deref() != Some(t.object.as_str()), || {
                    format!("{mode}: recognition blamed though the target was picked")
                })?;
            }
            *counts.entry(expected).or_default() += 1;
        }
        lines.push(format!("{mode} {:.3}", r.tg_accuracy));
    }
    ensure(counts.len() == 2, || {
        format!("expected both failure kinds, got {counts:?}")
    })?;

    // rotation-only grasp noise keeps every center in place: only the grasp stage can fail
    let grasp_noise = NoiseConfig {
        grasp_jitter_deg: 60.0,
        ..NoiseConfig::default()
    };
    let backends = BackendSet::oracle(OracleBackend::new(d.clone(), grasp_noise, seed));
    let r = evaluate_split(&d, &backends, &EvalConfig::new("test", Mode::Binary)).map_err(|e| e.to_string())?;
    let failed: Vec<_> = r.records.iter().filter(|t| !t.success).collect();
    ensure(!failed.is_empty(), || "grasp noise produced no failures".into())?;
    ensure(failed.iter().all(|t| t.failure == Some(FailureStage::Grasp)), || {
        "grasp-only noise attributed elsewhere".into()
    })?;
    Ok(format!(
        "TG accuracy {} (noiseless 1.0); {} segmentation and {} recognition failures attributed correctly; {} grasp-noise failures attributed to grasp",
        lines.join(", "),
        counts.get(&FailureStage::Segmentation).unwrap_or(&0),
        counts.get(&FailureStage::Recognition).unwrap_or(&0),
        failed.len()
    ))
}

// ---------------------------------------------------------------- AC8

fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
}

/// Greedy matcher written out longhand: detections in descending confidence
/// (image, then index, on ties); each takes the highest-IoU free in-range
/// ground truth, falling back to out-of-range ones (which mutes it).
fn brute_ap(images: &[ApImage], threshold: f64, lo: usize, hi: usize) -> Option<f64> {
    let in_range = |a: usize| a >= lo && a <= hi;
    let iou = |a: &BinaryMask, b: &BinaryMask| {
        let (mut i, mut u) = (0, 0);
        for y in 0..a.height() {
            for x in 0..a.width() {
                i += usize::from(a.get(x, y) && b.get(x, y));
                u += usize::from(a.get(x, y) || b.get(x, y));
            }
        }
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    };
    let n_gt: usize = images
        .iter()
        .map(|im| im.ground_truth.iter().filter(|g| in_range(g.area())).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for (k, p) in im.predictions.iter().enumerate() {
            dets.push((i, k, p.confidence));
        }
    }
    // insertion sort keeps equal confidences in original order
    for a in 1..dets.len() {
        let mut b = a;
        while b > 0 && dets[b - 1].2 < dets[b].2 {
            dets.swap(b - 1, b);
            b -= 1;
        }
    }
    let mut used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
    let mut flags = Vec::new();
    for (i, k, _) in dets {
        let p = &images[i].predictions[k].mask;
        let mut pick: Option<(usize, f64, bool)> = None;
        for (g, gt) in images[i].ground_truth.iter().enumerate() {
            let v = iou(p, gt);
            if used[i][g] || v < threshold {
                continue;
            }
            let ignored = !in_range(gt.area());
            let better = match pick {
                None => true,
                Some((_, bv, bign)) => (bign && !ignored) || (bign == ignored && v > bv),
            };
            if better {
                pick = Some((g, v, ignored));
            }
        }
        match pick {
            Some((g, _, false)) => {
                used[i][g] = true;
                flags.push(true);
            }
            Some((g, _, true)) => used[i][g] = true,
            None if in_range(p.area()) => flags.push(false),
            None => {}
        }
    }
    let mut pr = Vec::new();
    let mut tp = 0;
    for (k, f) in flags.iter().enumerate() {
        tp += usize::from(*f);
        pr.push((tp as f64 / (k + 1) as f64, tp as f64 / n_gt as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        sum += pr
            .iter()
            .filter(|(_, rec)| *rec >= r)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

fn ac8() -> Outcome {
    let mut cfg = EvalConfig::new("test", Mode::Binary);
    let (w, h) = (160, 120);
    let gts = [
        rect_mask(w, h, 0, 0, 20, 20),
        rect_mask(w, h, 30, 30, 80, 80),
        rect_mask(w, h, 0, 0, 160, 120),
    ];
    let perfect: Vec<ApImage> = gts
        .iter()
        .map(|g| ApImage {
            predictions: vec![ScoredMask {
                mask: g.clone(),
                confidence: 0.9,
            }],
            ground_truth: vec![g.clone()],
        })
        .collect();
    let t = mask_ap(&perfect, &cfg).map_err(|e| e.to_string())?;
    ensure(
        t.ap == 1.0
            && t.ap50 == 1.0
            && t.ap75 == 1.0
            && t.ap_small == Some(1.0)
            && t.ap_medium == Some(1.0)
            && t.ap_large == Some(1.0),
        || format!("perfect predictions scored {t:?}"),
    )?;

    let gt = rect_mask(w, h, 10, 10, 30, 30);
    let pred = rect_mask(w, h, 10, 10, 30, 22);
    let single = [ApImage {
        predictions: vec![ScoredMask {
            mask: pred,
            confidence: 0.7,
        }],
        ground_truth: vec![gt],
    }];
    let t = mask_ap(&single, &cfg).map_err(|e| e.to_string())?;
    ensure((t.ap - 0.3).abs() < 1e-12 && t.ap50 == 1.0 && t.ap75 == 0.0, || {
        format!("IoU 0.6 case scored AP {} AP50 {} AP75 {}", t.ap, t.ap50, t.ap75)
    })?;

    cfg.small_area = 16;
    cfg.large_area = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, h) = (14, 12);
    for case in 0..100 {
        let n_img = rng.random_range(1..=3);
        let mut images = Vec::new();
        for _ in 0..n_img {
            let rect = |rng: &mut ChaCha8Rng| {
                let x0 = rng.random_range(0..w - 1);
                let y0 = rng.random_range(0..h - 1);
                rect_mask(w, h, x0, y0, rng.random_range(x0 + 1..=w), rng.random_range(y0 + 1..=h))
            };
            let ground_truth = (0..rng.random_range(0..=3)).map(|_| rect(&mut rng)).collect();
            let predictions = (0..rng.random_range(0..=4))
                .map(|_| ScoredMask {
                    mask: rect(&mut rng),
                    confidence: (rng.random_range(0..5) as f64) / 4.0,
                })
                .collect();
            images.push(ApImage {
                predictions,
                ground_truth,
            });
        }
        let t = mask_ap(&images, &cfg).map_err(|e| e.to_string())?;
        let grid_mean = |lo, hi| -> Option<f64> {
            let v: Option<Vec<f64>> = cfg.ap_grid.iter().map(|&th| brute_ap(&images, th, lo, hi)).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        let want_all = grid_mean(0, usize::MAX).unwrap_or(0.0);
        let want50 = brute_ap(&images, 0.5, 0, usize::MAX).unwrap_or(0.0);
        let want75 = brute_ap(&images, 0.75, 0, usize::MAX).unwrap_or(0.0);
        ensure(
            (t.ap - want_all).abs() < 1e-12
                && (t.ap50 - want50).abs() < 1e-12
                && (t.ap75 - want75).abs() < 1e-12
                && close(t.ap_small, grid_mean(0, 15))
                && close(t.ap_medium, grid_mean(16, 40))
                && close(t.ap_large, grid_mean(41, usize::MAX)),
            || format!("case {case}: engine {t:?}, brute force AP {want_all} AP50 {want50} AP75 {want75}"),
        )?;
    }
    Ok("perfect fixture 1.0 everywhere; IoU 0.6 case AP 0.3; 100 random cases match brute force".into())
}

// ---------------------------------------------------------------- AC9

const TASK_TABLE: &str = r"
\textit{transport}  & \texttt{-}                  & all objects                 \\
\textit{handover}   & \textbf{NOT} \texttt{grasp}            & all objects except cable    \\
\textit{brushing}   & \texttt{grasp}                & hairbrush, toothbrush       \\
\textit{clamping}   & \texttt{grasp}                & clip, tongs                 \\
\textit{connecting} & \texttt{connect}              & cable                       \\
\textit{cutting}    & \texttt{grasp}                & pizza cutter, scissors     \\
\textit{flipping}   & \texttt{grasp}                & spatula                     \\
\textit{frying}     & \texttt{grasp}                & pan                         \\
\textit{gluing}     & \texttt{grasp}                & glue                        \\
\textit{grating}    & \texttt{grasp}                & grater                      \\
\textit{hitting}    & \texttt{grasp}                & hammer, tenderizer          \\
\textit{measuring}  & \texttt{grasp}                & thermometer                 \\
\textit{opening}    & \texttt{open}                 & toothpaste, vitamin         \\
\textit{painting}   & \textbf{NOT} \texttt{paint}            & paint brush, paint roller \\
\textit{peeling}    & \texttt{grasp}                & peeler                      \\
\textit{scooping}   & \texttt{grasp}                & measuring cup, spoon       \\
\textit{screwing}   & \textbf{NOT} \texttt{screw}            & screw, screwdriver          \\
\textit{scrubbing}  & \texttt{grasp}                & dish brush                 \\
\textit{shaving}    & \texttt{grasp}                & razor                       \\
\textit{sweeping}   & \textbf{NOT} \texttt{contain}          & dustpan                     \\
\textit{writing}    & \texttt{grasp}                & marker, pen                 \\
";

fn strip(s: &str, open: &str) -> String {
    s.trim().trim_start_matches(open).trim_end_matches('}').to_string()
}

fn table_rules() -> Vec<TaskRule> {
    TASK_TABLE
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.trim_end_matches("\\\\").trim().split('&').collect();
            let task = strip(cols[0], "\\textit{");
            let rule = cols[1].trim();
            let (polarity, affordance) = if rule.contains('-') {
                (Polarity::None, None)
            } else if let Some(rest) = rule.strip_prefix("\\textbf{NOT}") {
                (Polarity::Avoid, Some(strip(rest, "\\texttt{")))
            } else {
                (Polarity::Require, Some(strip(rule, "\\texttt{")))
            };
            let objects = cols[2].trim();
            let (categories, exclude_categories) = if let Some(ex) = objects.strip_prefix("all objects except ") {
                (vec!["*".to_string()], vec![ex.trim().to_string()])
            } else if objects == "all objects" {
                (vec!["*".to_string()], vec![])
            } else {
                (objects.split(',').map(|c| c.trim().replace(' ', "_")).collect(), vec![])
            };
            TaskRule {
                task,
                polarity,
                affordance,
                categories,
                exclude_categories,
            }
        })
        .collect()
}

fn ac9() -> Outcome {
    let mut round_trips = 0;
    for name in ["mini", "synthetic"] {
        let src = fixtures().join(name).join("manifest.json");
        let d = load_dataset(&src).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        // copy images so the saved manifest stays relative to its own directory
        let img_dir = dir.path().join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| e.to_string())?;
        for entry in std::fs::read_dir(fixtures().join(name).join("images")).map_err(|e| e.to_string())? {
            let entry = entry.map_err(|e| e.to_string())?;
            std::fs::copy(entry.path(), img_dir.join(entry.file_name())).map_err(|e| e.to_string())?;
        }
        let original = std::fs::read_to_string(&src).map_err(|e| e.to_string())?;
        let saved = to_manifest_json(&d, &fixtures().join(name));
        ensure(saved == original, || {
            format!("{name}: load then save differs from the bundled manifest")
        })?;
        let first = dir.path().join("manifest.json");
        std::fs::write(&first, &saved).map_err(|e| e.to_string())?;
        let reloaded = load_dataset(&first).map_err(|e| e.to_string())?;
        tog_core::dataset::save_dataset(&reloaded, &first).map_err(|e| e.to_string())?;
        let again = std::fs::read_to_string(&first).map_err(|e| e.to_string())?;
        ensure(again == saved, || {
            format!("{name}: save, load, save is not byte-identical")
        })?;
        round_trips += 1;
    }
    let shipped = default_rules();
    let table = table_rules();
    ensure(shipped.len() == 21 && table.len() == 21, || {
        format!("{} shipped rows", shipped.len())
    })?;
    for (s, t) in shipped.iter().zip(&table) {
        ensure(s == t, || format!("row {}: shipped {s:?}, table {t:?}", t.task))?;
    }
    let find = |task: &str| shipped.iter().find(|r| r.task == task).expect("task present");
    let handover = find("handover");
    ensure(
        handover.polarity == Polarity::Avoid && handover.affordance.as_deref() == Some("grasp"),
        || "handover".into(),
    )?;
    let connecting = find("connecting");
    ensure(
        connecting.polarity == Polarity::Require && connecting.affordance.as_deref() == Some("connect"),
        || "connecting".into(),
    )?;
    ensure(find("transport").polarity == Polarity::None, || "transport".into())?;
    Ok(format!(
        "{round_trips} fixtures round-trip byte-identically; 21/21 rule rows match the task table"
    ))
}

// ---------------------------------------------------------------- AC10

fn stub(flags: &[&str], timeout_ms: u64) -> ProcessSpec {
    let mut command = vec![env!("CARGO_BIN_EXE_tog-stub-backend").to_string()];
    command.extend(flags.iter().map(|s| s.to_string()));
    ProcessSpec {
        command,
        kinds: Kind::ALL.to_vec(),
        timeout_ms,
        concurrency: Concurrency::SerializeCalls,
    }
}

fn ac10() -> Outcome {
    let p = ExternalProcess::spawn(&stub(&[], 5000)).map_err(|e| format!("handshake: {e}"))?;
    ensure(p.hello().kinds == Kind::ALL.to_vec(), || "handshake kinds".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for k in 0..500 {
        let (w, h) = (rng.random_range(1..64), rng.random_range(1..64));
        let density = rng.random::<f64>();
        let m = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density));
        let wire = if k % 2 == 0 {
            MaskWire::rle(&m)
        } else {
            MaskWire::bits(&m)
        };
        let back: MaskResult = p.call("echo", MaskResult { mask: wire }).map_err(|e| e.to_string())?;
        ensure(back.mask.decode(None).map_err(|e| e.to_string())? == m, || {
            format!("round trip {k} changed the mask")
        })?;
    }
    drop(p);

    let bad = ExternalProcess::spawn(&stub(&["--mismatch-id"], 5000)).map_err(|e| e.to_string())?;
    ensure(
        matches!(bad.call_raw("ping", Value::Null), Err(BackendError::Protocol(_))),
        || "mismatched id accepted".into(),
    )?;

    let slow = ExternalProcess::spawn(&stub(&[], 200)).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let err = slow.call_raw("sleep", serde_json::json!({"ms": 800}));
    ensure(matches!(err, Err(BackendError::Timeout { .. })), || {
        format!("expected timeout, got {err:?}")
    })?;
    ensure(started.elapsed() < Duration::from_millis(700), || {
        "timeout fired late".into()
    })?;
    std::thread::sleep(Duration::from_millis(800));
    ensure(slow.call_raw("ping", Value::Null).is_ok(), || {
        "late reply poisoned the connection".into()
    })?;
    Ok("handshake, 500 mask round trips, id mismatch rejected, timeout enforced and recovered".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC1 SSF", ac1),
        ("AC2 rotated IoU", ac2),
        ("AC3 grasp success boundaries", ac3),
        ("AC4 task region algebra", ac4),
        ("AC5 affordance alignment", ac5),
        ("AC6 end-to-end oracle eval", ac6),
        ("AC7 noise attribution", ac7),
        ("AC8 mask AP", ac8),
        ("AC9 round trip and rule table", ac9),
        ("AC10 protocol conformance", ac10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{:.2?}]", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.2?}]", start.elapsed());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
