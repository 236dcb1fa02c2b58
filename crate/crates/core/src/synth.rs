//! Deterministic generator for the bundled fixture datasets: flat-shaded
//! top-down renderings of parametric tools with part-level affordance
//! polygons and hand-placed grasps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    default_rules, AnnotatedMask, Category, Dataset, DatasetError, KnowledgeEntry, ObjectAnnotation, ObjectId,
    SceneAnnotation, Split,
};
use crate::geometry::{normalize_theta, rotate_point, GraspRect, Point};
use crate::maskops::{rasterize, PolygonRegion};
use crate::raster::RgbImage;

pub const WIDTH: usize = 640;
pub const HEIGHT: usize = 480;

struct Part {
    affordance: Option<&'static str>,
    outer: Vec<Point>,
    holes: Vec<Vec<Point>>,
    color: [u8; 3],
}

struct Template {
    subcategory: &'static str,
    category: &'static str,
    description: &'static str,
    parts: Vec<Part>,
    /// `(x, y, w, h, theta)` in template coordinates.
    grasps: Vec<(f64, f64, f64, f64, f64)>,
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
    vec![
        Point::new(x0, y0),
        Point::new(x1, y0),
        Point::new(x1, y1),
        Point::new(x0, y1),
    ]
}

fn poly(pts: &[(f64, f64)]) -> Vec<Point> {
    pts.iter().map(|&(x, y)| Point::new(x, y)).collect()
}

fn part(affordance: Option<&'static str>, outer: Vec<Point>, color: [u8; 3]) -> Part {
    Part {
        affordance,
        outer,
        holes: Vec::new(),
        color,
    }
}

fn octagon(cx: f64, cy: f64, r: f64) -> Vec<Point> {
    (0..8)
        .map(|i| {
            let a = (i as f64 * 45.0 + 22.5).to_radians();
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

const WOOD: [u8; 3] = [150, 100, 50];
const STEEL: [u8; 3] = [120, 125, 135];
const BLACK: [u8; 3] = [40, 40, 45];
const RED: [u8; 3] = [190, 40, 40];
const BLUE: [u8; 3] = [40, 70, 180];
const GREEN: [u8; 3] = [40, 140, 70];
const YELLOW: [u8; 3] = [220, 190, 40];
const WHITE: [u8; 3] = [235, 235, 230];
const ORANGE: [u8; 3] = [230, 120, 30];

fn templates() -> Vec<Template> {
    vec![
        Template {
            subcategory: "hammer_01",
            category: "hammer",
            description: "a claw hammer with a wooden handle and a steel head",
            parts: vec![
                part(Some("grasp"), rect(-80.0, -8.0, 40.0, 8.0), WOOD),
                part(None, rect(40.0, -30.0, 64.0, 30.0), STEEL),
            ],
            grasps: vec![(-30.0, 0.0, 30.0, 12.0, 90.0), (52.0, 0.0, 34.0, 14.0, 0.0)],
        },
        Template {
            subcategory: "hammer_02",
            category: "hammer",
            description: "a rubber mallet with a short black handle",
            parts: vec![
                part(Some("grasp"), rect(-70.0, -7.0, 30.0, 7.0), BLACK),
                part(None, rect(30.0, -22.0, 70.0, 22.0), RED),
            ],
            grasps: vec![(-25.0, 0.0, 26.0, 12.0, 90.0), (50.0, 0.0, 50.0, 14.0, 0.0)],
        },
        Template {
            subcategory: "spatula_01",
            category: "spatula",
            description: "a kitchen spatula with a flat rectangular blade",
            parts: vec![
                part(Some("grasp"), rect(-85.0, -7.0, 5.0, 7.0), BLACK),
                part(None, rect(5.0, -25.0, 75.0, 25.0), STEEL),
            ],
            grasps: vec![(-40.0, 0.0, 26.0, 12.0, 90.0), (40.0, 0.0, 30.0, 14.0, 0.0)],
        },
        Template {
            subcategory: "spatula_02",
            category: "spatula",
            description: "a slotted turner with a flared green blade",
            parts: vec![
                part(Some("grasp"), rect(-80.0, -6.0, 10.0, 6.0), WOOD),
                part(
                    None,
                    poly(&[(10.0, -20.0), (70.0, -30.0), (70.0, 30.0), (10.0, 20.0)]),
                    GREEN,
                ),
            ],
            grasps: vec![(-35.0, 0.0, 24.0, 12.0, 90.0), (40.0, 0.0, 30.0, 14.0, 0.0)],
        },
        Template {
            subcategory: "scissors_01",
            category: "scissors",
            description: "a pair of scissors with looped orange handles",
            parts: vec![
                Part {
                    affordance: Some("grasp"),
                    outer: rect(-75.0, -36.0, -20.0, -2.0),
                    holes: vec![rect(-63.0, -26.0, -32.0, -12.0)],
                    color: ORANGE,
                },
                Part {
                    affordance: Some("grasp"),
                    outer: rect(-75.0, 2.0, -20.0, 36.0),
                    holes: vec![rect(-63.0, 12.0, -32.0, 26.0)],
                    color: ORANGE,
                },
                part(Some("cut"), rect(-20.0, -10.0, 80.0, 10.0), STEEL),
            ],
            grasps: vec![
                (-69.0, -19.0, 24.0, 10.0, 0.0),
                (-69.0, 19.0, 24.0, 10.0, 0.0),
                (40.0, 0.0, 28.0, 12.0, 90.0),
            ],
        },
        Template {
            subcategory: "paint_brush_01",
            category: "paint_brush",
            description: "a flat paint brush with a long blue handle",
            parts: vec![
                part(Some("grasp"), rect(-90.0, -6.0, 10.0, 6.0), BLUE),
                part(None, rect(10.0, -9.0, 35.0, 9.0), STEEL),
                part(Some("paint"), rect(35.0, -12.0, 70.0, 12.0), WHITE),
            ],
            grasps: vec![
                (-40.0, 0.0, 22.0, 10.0, 90.0),
                (22.0, 0.0, 26.0, 10.0, 90.0),
                (52.0, 0.0, 32.0, 12.0, 90.0),
            ],
        },
        Template {
            subcategory: "screwdriver_01",
            category: "screwdriver",
            description: "a flat-head screwdriver with a yellow grip",
            parts: vec![
                part(Some("grasp"), rect(-80.0, -12.0, -10.0, 12.0), YELLOW),
                part(None, rect(-10.0, -4.0, 60.0, 4.0), STEEL),
                part(Some("screw"), rect(60.0, -5.0, 75.0, 5.0), STEEL),
            ],
            grasps: vec![(-45.0, 0.0, 34.0, 12.0, 90.0), (25.0, 0.0, 18.0, 10.0, 90.0)],
        },
        Template {
            subcategory: "pan_01",
            category: "pan",
            description: "a round frying pan with a black handle",
            parts: vec![
                part(Some("grasp"), rect(-95.0, -8.0, -20.0, 8.0), BLACK),
                part(Some("contain"), octagon(35.0, 0.0, 55.0), STEEL),
            ],
            grasps: vec![(-60.0, 0.0, 26.0, 12.0, 90.0), (35.0, 0.0, 40.0, 14.0, 0.0)],
        },
        Template {
            subcategory: "toothpaste_01",
            category: "toothpaste",
            description: "a tube of toothpaste with a white screw cap",
            parts: vec![
                part(
                    Some("grasp"),
                    poly(&[(-70.0, -22.0), (40.0, -16.0), (40.0, 16.0), (-70.0, 22.0)]),
                    BLUE,
                ),
                part(Some("open"), rect(40.0, -12.0, 64.0, 12.0), WHITE),
            ],
            grasps: vec![(-15.0, 0.0, 50.0, 14.0, 90.0), (52.0, 0.0, 30.0, 10.0, 90.0)],
        },
        Template {
            subcategory: "cable_01",
            category: "cable",
            description: "a black charging cable with a square plug",
            parts: vec![
                part(None, rect(-90.0, -5.0, 40.0, 5.0), BLACK),
                part(Some("connect"), rect(40.0, -14.0, 80.0, 14.0), WHITE),
            ],
            grasps: vec![(-40.0, 0.0, 16.0, 10.0, 90.0), (60.0, 0.0, 34.0, 12.0, 90.0)],
        },
        Template {
            subcategory: "dustpan_01",
            category: "dustpan",
            description: "a green dustpan with a short handle",
            parts: vec![
                part(Some("grasp"), rect(-90.0, -8.0, -10.0, 8.0), GREEN),
                part(
                    Some("contain"),
                    poly(&[(-10.0, -30.0), (80.0, -55.0), (80.0, 55.0), (-10.0, 30.0)]),
                    GREEN,
                ),
            ],
            grasps: vec![(-50.0, 0.0, 26.0, 12.0, 90.0), (35.0, 0.0, 40.0, 14.0, 0.0)],
        },
        Template {
            subcategory: "marker_01",
            category: "marker",
            description: "a thick red permanent marker with a cap",
            parts: vec![
                part(Some("grasp"), rect(-70.0, -10.0, 30.0, 10.0), RED),
                part(None, rect(30.0, -11.0, 70.0, 11.0), BLACK),
            ],
            grasps: vec![(-20.0, 0.0, 26.0, 12.0, 90.0), (50.0, 0.0, 28.0, 12.0, 90.0)],
        },
        Template {
            subcategory: "marker_02",
            category: "marker",
            description: "a slim blue whiteboard marker",
            parts: vec![
                part(Some("grasp"), rect(-60.0, -8.0, 40.0, 8.0), BLUE),
                part(None, rect(40.0, -9.0, 75.0, 9.0), WHITE),
            ],
            grasps: vec![(-10.0, 0.0, 22.0, 10.0, 90.0), (57.0, 0.0, 24.0, 10.0, 90.0)],
        },
        Template {
            subcategory: "marker_03",
            category: "marker",
            description: "a chunky yellow highlighter with a wedge tip",
            parts: vec![
                part(Some("grasp"), rect(-55.0, -14.0, 25.0, 14.0), YELLOW),
                part(
                    None,
                    poly(&[(25.0, -14.0), (60.0, -6.0), (60.0, 6.0), (25.0, 14.0)]),
                    BLACK,
                ),
            ],
            grasps: vec![(-15.0, 0.0, 34.0, 12.0, 90.0), (38.0, 0.0, 24.0, 10.0, 90.0)],
        },
        Template {
            subcategory: "peeler_01",
            category: "peeler",
            description: "a vegetable peeler with an open steel frame",
            parts: vec![
                part(Some("grasp"), rect(-80.0, -9.0, 0.0, 9.0), ORANGE),
                Part {
                    affordance: None,
                    outer: rect(0.0, -20.0, 50.0, 20.0),
                    holes: vec![rect(10.0, -10.0, 40.0, 10.0)],
                    color: STEEL,
                },
            ],
            grasps: vec![(-40.0, 0.0, 26.0, 12.0, 90.0), (45.0, 0.0, 18.0, 8.0, 0.0)],
        },
    ]
}

/// Which scenes a fixture holds: `(split, subcategories)` per scene.
pub struct FixtureSpec {
    pub references: Vec<&'static str>,
    pub scenes: Vec<(Split, Vec<&'static str>)>,
    pub seed: u64,
}

/// Four references and three scenes; the first scene (hammer and cable)
/// yields five trials.
pub fn mini_spec() -> FixtureSpec {
    FixtureSpec {
        references: vec!["hammer_01", "cable_01", "scissors_01", "paint_brush_01"],
        scenes: vec![
            (Split::KcKsc, vec!["hammer_01", "cable_01"]),
            (Split::KcUsc, vec!["scissors_01", "paint_brush_01"]),
            (Split::UcUsc, vec!["paint_brush_01", "hammer_01", "scissors_01"]),
        ],
        seed: 11,
    }
}

pub fn synthetic_spec() -> FixtureSpec {
    FixtureSpec {
        references: templates().iter().map(|t| t.subcategory).collect(),
        scenes: vec![
            (Split::KcKsc, vec!["hammer_01", "spatula_01", "marker_01"]),
            (
                Split::KcKsc,
                vec!["scissors_01", "paint_brush_01", "pan_01", "toothpaste_01"],
            ),
            (Split::KcKsc, vec!["screwdriver_01", "cable_01"]),
            (
                Split::KcKsc,
                vec!["dustpan_01", "peeler_01", "hammer_02", "marker_02", "spatula_02"],
            ),
            (Split::KcUsc, vec!["hammer_02", "scissors_01", "cable_01"]),
            (Split::KcUsc, vec!["marker_03", "pan_01"]),
            (
                Split::KcUsc,
                vec!["spatula_02", "toothpaste_01", "screwdriver_01", "paint_brush_01"],
            ),
            (Split::UcUsc, vec!["peeler_01", "dustpan_01"]),
            (Split::UcUsc, vec!["toothpaste_01", "marker_01", "hammer_01"]),
            (Split::UcUsc, vec!["pan_01"]),
            (Split::SubcategoryKc, vec!["hammer_01", "hammer_02"]),
            (Split::SubcategoryKc, vec!["marker_01", "marker_02", "marker_03"]),
            (Split::SubcategoryUc, vec!["spatula_01", "spatula_02"]),
            (Split::Train, vec!["hammer_01", "cable_01"]),
        ],
        seed: 23,
    }
}

/// A generated dataset with its rendered images keyed by manifest-relative path.
pub struct Generated {
    pub dataset: Dataset,
    pub images: BTreeMap<PathBuf, RgbImage>,
}

fn background() -> RgbImage {
    let mut img = RgbImage::new(WIDTH, HEIGHT);
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            img.put(x, y, [(200 - y / 8) as u8, (205 - x / 16) as u8, 190]);
        }
    }
    img
}

struct Placed {
    annotation: ObjectAnnotation,
    layers: Vec<(crate::maskops::BinaryMask, [u8; 3])>,
}

fn place(
    t: &Template,
    category_id: u64,
    annotation_id: u64,
    center: Point,
    rotation: f64,
) -> Result<Placed, DatasetError> {
    let map = |p: Point| {
        let r = rotate_point(p, Point::new(0.0, 0.0), rotation);
        Point::new(r.x + center.x, r.y + center.y)
    };
    let map_ring = |r: &[Point]| r.iter().map(|&p| map(p)).collect::<Vec<_>>();
    let mut outers = Vec::new();
    let mut holes = Vec::new();
    let mut by_affordance: BTreeMap<&str, PolygonRegion> = BTreeMap::new();
    let mut layers = Vec::new();
    for p in &t.parts {
        let outer = map_ring(&p.outer);
        let part_holes: Vec<Vec<Point>> = p.holes.iter().map(|h| map_ring(h)).collect();
        let region = PolygonRegion::new(vec![outer.clone()], part_holes.clone());
        layers.push((rasterize(&region, WIDTH, HEIGHT)?, p.color));
        if let Some(a) = p.affordance {
            let e = by_affordance.entry(a).or_default();
            e.outers.push(outer.clone());
            e.holes.extend(part_holes.iter().cloned());
        }
        outers.push(outer);
        holes.extend(part_holes);
    }
    let mask = AnnotatedMask::from_region(PolygonRegion::new(outers, holes), WIDTH, HEIGHT)?;
    let mut affordances = BTreeMap::new();
    for (name, region) in by_affordance {
        affordances.insert(name.to_string(), AnnotatedMask::from_region(region, WIDTH, HEIGHT)?);
    }
    let grasps = t
        .grasps
        .iter()
        .map(|&(x, y, w, h, theta)| {
            let c = map(Point::new(x, y));
            GraspRect::new(c.x, c.y, w, h, normalize_theta(theta + rotation)).expect("template grasp is valid")
        })
        .collect();
    Ok(Placed {
        annotation: ObjectAnnotation {
            annotation_id,
            category_id,
            object: ObjectId {
                category: t.category.to_string(),
                subcategory: t.subcategory.to_string(),
            },
            mask,
            affordances,
            grasps,
            description: Some(t.description.to_string()),
            properties: BTreeMap::new(),
        },
        layers,
    })
}

fn render(placed: &[Placed]) -> RgbImage {
    let mut img = background();
    for p in placed {
        for (mask, color) in &p.layers {
            for (x, y) in mask.iter_set() {
                // faint texture so crops are not flat
                let shade = ((x / 4 + y / 4) % 2) as u8 * 12;
                img.put(
                    x,
                    y,
                    [
                        color[0].saturating_sub(shade),
                        color[1].saturating_sub(shade),
                        color[2].saturating_sub(shade),
                    ],
                );
            }
        }
    }
    img
}

/// Cells of a 3 x 2 grid; every template fits in a cell at any rotation.
const CELLS: [(f64, f64); 6] = [
    (107.0, 120.0),
    (320.0, 120.0),
    (533.0, 120.0),
    (107.0, 360.0),
    (320.0, 360.0),
    (533.0, 360.0),
];

/// Builds the dataset described by `spec`, rooted at `root`.
pub fn generate(spec: &FixtureSpec, root: &Path) -> Result<Generated, DatasetError> {
    let all = templates();
    let find = |sub: &str| {
        all.iter()
            .position(|t| t.subcategory == sub)
            .ok_or_else(|| DatasetError::DanglingReference(format!("no template {sub}")))
    };
    let mut used: Vec<usize> = spec
        .references
        .iter()
        .chain(spec.scenes.iter().flat_map(|(_, s)| s.iter()))
        .map(|s| find(s))
        .collect::<Result<_, _>>()?;
    used.sort_unstable();
    used.dedup();
    let categories: Vec<Category> = used
        .iter()
        .map(|&i| Category {
            id: i as u64 + 1,
            name: all[i].category.to_string(),
            subcategory: all[i].subcategory.to_string(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = BTreeMap::new();
    let mut next_annotation = 1;
    let mut entries = Vec::new();
    for (k, sub) in spec.references.iter().enumerate() {
        let i = find(sub)?;
        let placed = place(&all[i], i as u64 + 1, next_annotation, Point::new(320.0, 240.0), 0.0)?;
        next_annotation += 1;
        let path = PathBuf::from(format!("images/ref_{sub}.png"));
        images.insert(path.clone(), render(std::slice::from_ref(&placed)));
        entries.push(KnowledgeEntry {
            image_id: k as u64 + 1,
            image_path: path,
            width: WIDTH,
            height: HEIGHT,
            annotation: placed.annotation,
        });
    }
    let mut scenes = Vec::new();
    for (k, (split, subs)) in spec.scenes.iter().enumerate() {
        let mut cells: Vec<usize> = (0..CELLS.len()).collect();
        let mut placed = Vec::new();
        for sub in subs {
            let i = find(sub)?;
            let cell = cells.remove(rng.random_range(0..cells.len()));
            let (cx, cy) = CELLS[cell];
            let center = Point::new(
                cx + rng.random_range(-4i32..=4) as f64,
                cy + rng.random_range(-4i32..=4) as f64,
            );
            let rotation = rng.random_range(0i32..360) as f64;
            placed.push(place(&all[i], i as u64 + 1, next_annotation, center, rotation)?);
            next_annotation += 1;
        }
        let path = PathBuf::from(format!("images/scene_{:02}.png", k + 1));
        images.insert(path.clone(), render(&placed));
        scenes.push(SceneAnnotation {
            image_id: 1000 + k as u64 + 1,
            image_path: path,
            depth_path: None,
            width: WIDTH,
            height: HEIGHT,
            split: *split,
            objects: placed.into_iter().map(|p| p.annotation).collect(),
        });
    }
    let mut affordances: Vec<String> = all
        .iter()
        .flat_map(|t| t.parts.iter().filter_map(|p| p.affordance))
        .map(str::to_string)
        .collect();
    affordances.sort();
    affordances.dedup();
    Ok(Generated {
        dataset: Dataset {
            root: root.to_path_buf(),
            affordances,
            categories,
            entries,
            scenes,
            rules: default_rules(),
        },
        images,
    })
}

/// Writes `manifest.json` and the images under `dir`.
pub fn write_fixture(spec: &FixtureSpec, dir: &Path) -> Result<Generated, DatasetError> {
    let generated = generate(spec, dir)?;
    let io = |path: &Path, source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| io(&image_dir, e))?;
    for (rel, img) in &generated.images {
        let path = dir.join(rel);
        img.save_png(&path).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    crate::dataset::save_dataset(&generated.dataset, &dir.join("manifest.json"))?;
    Ok(generated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{validate_dataset, Polarity};
    use crate::maskops::{mask_or, BinaryMask};

    #[test]
    fn templates_fit_their_cells() {
        for t in templates() {
            let r = t
                .parts
                .iter()
                .flat_map(|p| p.outer.iter())
                .map(|p| (p.x * p.x + p.y * p.y).sqrt())
                .fold(0.0, f64::max);
            assert!(r + 4.0 * 2f64.sqrt() < 106.0, "{} radius {r}", t.subcategory);
        }
    }

    #[test]
    fn generated_fixtures_are_clean() {
        for spec in [mini_spec(), synthetic_spec()] {
            let g = generate(&spec, Path::new("unused")).unwrap();
            let report = validate_dataset(&g.dataset);
            assert!(report.is_clean(), "{:?}", report.issues);
            for s in &g.dataset.scenes {
                let mut seen = BinaryMask::new(WIDTH, HEIGHT);
                for o in &s.objects {
                    assert_eq!(crate::maskops::intersection_area(&seen, &o.mask.mask).unwrap(), 0);
                    seen = mask_or(&seen, &o.mask.mask).unwrap();
                }
            }
        }
    }

    /// Every applicable task region holds at least one ground-truth grasp
    /// center, so a perfect pipeline can succeed on every trial.
    #[test]
    fn every_task_region_holds_a_grasp() {
        let g = generate(&synthetic_spec(), Path::new("unused")).unwrap();
        let d = &g.dataset;
        let objects = d
            .entries
            .iter()
            .map(|e| &e.annotation)
            .chain(d.scenes.iter().flat_map(|s| s.objects.iter()));
        for o in objects {
            for rule in d.applicable_rules(&o.object.category) {
                let q = o.task_region(rule).unwrap();
                let hit = o.grasps.iter().any(|g| {
                    let (x, y) = g.center_pixel();
                    // a 3x3 neighbourhood keeps rounding of rotated centers safe
                    (-1..=1).all(|dy| (-1..=1).all(|dx| q.get_signed(x + dx, y + dy)))
                });
                assert!(hit, "{} / {}", o.object, rule.task);
                if rule.polarity != Polarity::None {
                    assert!(q.area() > 0);
                }
            }
        }
    }
}
