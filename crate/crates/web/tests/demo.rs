use serde_json::Value;
use tog_web::{grasp_overlap, Demo};

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn whole_object_regions_align_on_grid_rotations() {
    let mut d = Demo::new();
    let catalog = parse(&d.catalog());
    for (i, r) in catalog["references"].as_array().unwrap().iter().enumerate() {
        for rotation in [0, 40, 180, 310] {
            let v = parse(&d.align(i, "transport", rotation, 36));
            assert_eq!(v["error_deg"], 0, "{} {rotation}: {v}", r["object"]);
        }
    }
}

// Only the region is compared, so a region covering part of the object can
// match a flipped pose better than the true one.
#[test]
fn partial_regions_can_be_ambiguous() {
    let mut d = Demo::new();
    let v = parse(&d.align(3, "painting", 0, 36));
    assert_eq!(v["object"], "paint_brush_01");
    assert_eq!(v["recovered"], 180);
}

#[test]
fn overlap_is_symmetric_and_bounded() {
    let a = [100.0, 80.0, 50.0, 20.0, 35.0];
    let b = [110.0, 85.0, 40.0, 30.0, -10.0];
    let ab = parse(&grasp_overlap(&a, &b));
    let ba = parse(&grasp_overlap(&b, &a));
    let (x, y) = (ab["iou"].as_f64().unwrap(), ba["iou"].as_f64().unwrap());
    assert!((x - y).abs() < 1e-12 && x > 0.0 && x < 1.0);
    assert_eq!(ab["angle_diff"], 45.0);
    assert_eq!(ab["success"], false);
}

#[test]
fn tighter_tau_keeps_no_more_segments() {
    let mut d = Demo::new();
    let kept = |d: &mut Demo, tau: f64| {
        parse(&d.segment(1, 9, 3, 4, tau, 400, 50_000))["kept"]
            .as_array()
            .unwrap()
            .len()
    };
    let loose = kept(&mut d, 1.0);
    let tight = kept(&mut d, 0.3);
    assert!(tight <= loose);
}
