//! COCO-extended annotation manifests, the knowledge base of reference
//! objects, the task rule table, and the two annotation assists
//! (affordance refining and reference-driven auto-labeling).
//!
//! # Manifest schema
//!
//! One UTF-8 JSON document per split file:
//!
//! ```json
//! {
//!   "affordances": ["grasp", "paint"],
//!   "categories": [{"id": 1, "name": "hammer", "subcategory": "hammer_01"}],
//!   "images": [{"id": 1, "file_name": "images/ref.png", "width": 640, "height": 480,
//!               "split": "reference", "depth_file": "images/ref_depth.png"}],
//!   "annotations": [{"id": 1, "image_id": 1, "category_id": 1,
//!                    "object_mask": {"polygons": [[x1, y1, x2, y2, ...]], "holes": [[...]]},
//!                    "affordances": [{"name": "grasp", "polygons": [[...]]}],
//!                    "grasps": [{"x": 0, "y": 0, "w": 30, "h": 15, "theta": 90}],
//!                    "description": "a claw hammer with a red handle",
//!                    "properties": {"weight_g": 540}}],
//!   "tasks": [{"name": "handover", "polarity": "avoid", "affordance": "grasp",
//!              "categories": ["*"], "exclude_categories": ["cable"]}]
//! }
//! ```
//!
//! Masks may also be given as row-major run lengths (`{"counts": [...]}`) or
//! base64 bitstrings (`{"bits": "..."}`); see [`MaskWire`]. Image paths are
//! relative to the manifest. Images with split `reference` hold exactly one
//! object each and form the knowledge base.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_theta, rotate_point, GraspRect, Point};
use crate::maskops::{mask_and, mask_bbox, mask_centroid, mask_sub, BinaryMask, MaskError, MaskWire, PolygonRegion};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error in {path}: {message}")]
    Schema { path: String, message: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("{object} has no {affordance:?} affordance")]
    MissingAffordance { object: String, affordance: String },
    #[error("scene object mask is empty")]
    EmptySceneMask,
    #[error("alignment failed: best IoU {iou:.3} below {threshold}")]
    AlignmentFailure { iou: f64, threshold: f64 },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Dataset partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "KC-KSC")]
    KcKsc,
    #[serde(rename = "KC-USC")]
    KcUsc,
    #[serde(rename = "UC-USC")]
    UcUsc,
    #[serde(rename = "subcategory-KC")]
    SubcategoryKc,
    #[serde(rename = "subcategory-UC")]
    SubcategoryUc,
    #[serde(rename = "reference")]
    Reference,
}

impl Split {
    pub const ALL: [Split; 7] = [
        Split::Train,
        Split::KcKsc,
        Split::KcUsc,
        Split::UcUsc,
        Split::SubcategoryKc,
        Split::SubcategoryUc,
        Split::Reference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::KcKsc => "KC-KSC",
            Split::KcUsc => "KC-USC",
            Split::UcUsc => "UC-USC",
            Split::SubcategoryKc => "subcategory-KC",
            Split::SubcategoryUc => "subcategory-UC",
            Split::Reference => "reference",
        }
    }

    /// Scenes of 1-5 objects with distinct categories.
    pub fn is_category_style(self) -> bool {
        matches!(self, Split::Train | Split::KcKsc | Split::KcUsc | Split::UcUsc)
    }

    pub fn is_subcategory_style(self) -> bool {
        matches!(self, Split::SubcategoryKc | Split::SubcategoryUc)
    }

    /// Resolves a split selector: a split name, or one of the groups
    /// `category`, `subcategory`, `test` and `all` (every non-reference split).
    pub fn select(selector: &str) -> Option<Vec<Split>> {
        match selector {
            "category" => Some(vec![Split::KcKsc, Split::KcUsc, Split::UcUsc]),
            "subcategory" => Some(vec![Split::SubcategoryKc, Split::SubcategoryUc]),
            "test" => Some(vec![
                Split::KcKsc,
                Split::KcUsc,
                Split::UcUsc,
                Split::SubcategoryKc,
                Split::SubcategoryUc,
            ]),
            "all" => Some(Split::ALL[..6].to_vec()),
            name => Split::ALL.iter().find(|s| s.name() == name).map(|&s| vec![s]),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Require,
    Avoid,
    None,
}

/// Task → affordance constraint, plus the object categories the task applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRule {
    #[serde(rename = "name")]
    pub task: String,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affordance: Option<String>,
    /// Category names; `"*"` matches every category.
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude_categories: Vec<String>,
}

impl TaskRule {
    fn new(task: &str, polarity: Polarity, affordance: Option<&str>, categories: &[&str], exclude: &[&str]) -> Self {
        Self {
            task: task.to_string(),
            polarity,
            affordance: affordance.map(str::to_string),
            categories: categories.iter().map(|s| s.to_string()).collect(),
            exclude_categories: exclude.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn applies_to(&self, category: &str) -> bool {
        !self.exclude_categories.iter().any(|c| c == category)
            && self.categories.iter().any(|c| c == "*" || c == category)
    }

    pub fn check(&self) -> Result<(), DatasetError> {
        match (self.polarity, &self.affordance) {
            (Polarity::None, None) | (Polarity::Require | Polarity::Avoid, Some(_)) => Ok(()),
            _ => Err(DatasetError::InvariantViolation(format!(
                "task {:?}: polarity none iff no affordance",
                self.task
            ))),
        }
    }
}

/// The 21-task rule table used throughout the dataset.
pub fn default_rules() -> Vec<TaskRule> {
    use Polarity::*;
    vec![
        TaskRule::new("transport", None, Option::None, &["*"], &[]),
        TaskRule::new("handover", Avoid, Some("grasp"), &["*"], &["cable"]),
        TaskRule::new("brushing", Require, Some("grasp"), &["hairbrush", "toothbrush"], &[]),
        TaskRule::new("clamping", Require, Some("grasp"), &["clip", "tongs"], &[]),
        TaskRule::new("connecting", Require, Some("connect"), &["cable"], &[]),
        TaskRule::new("cutting", Require, Some("grasp"), &["pizza_cutter", "scissors"], &[]),
        TaskRule::new("flipping", Require, Some("grasp"), &["spatula"], &[]),
        TaskRule::new("frying", Require, Some("grasp"), &["pan"], &[]),
        TaskRule::new("gluing", Require, Some("grasp"), &["glue"], &[]),
        TaskRule::new("grating", Require, Some("grasp"), &["grater"], &[]),
        TaskRule::new("hitting", Require, Some("grasp"), &["hammer", "tenderizer"], &[]),
        TaskRule::new("measuring", Require, Some("grasp"), &["thermometer"], &[]),
        TaskRule::new("opening", Require, Some("open"), &["toothpaste", "vitamin"], &[]),
        TaskRule::new("painting", Avoid, Some("paint"), &["paint_brush", "paint_roller"], &[]),
        TaskRule::new("peeling", Require, Some("grasp"), &["peeler"], &[]),
        TaskRule::new("scooping", Require, Some("grasp"), &["measuring_cup", "spoon"], &[]),
        TaskRule::new("screwing", Avoid, Some("screw"), &["screw", "screwdriver"], &[]),
        TaskRule::new("scrubbing", Require, Some("grasp"), &["dish_brush"], &[]),
        TaskRule::new("shaving", Require, Some("grasp"), &["razor"], &[]),
        TaskRule::new("sweeping", Avoid, Some("contain"), &["dustpan"], &[]),
        TaskRule::new("writing", Require, Some("grasp"), &["marker", "pen"], &[]),
    ]
}

pub fn rule_lookup<'a>(rules: &'a [TaskRule], task: &str) -> Result<&'a TaskRule, DatasetError> {
    rules
        .iter()
        .find(|r| r.task == task)
        .ok_or_else(|| DatasetError::UnknownTask(task.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectId {
    pub category: String,
    pub subcategory: String,
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.subcategory)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: u64,
    pub name: String,
    pub subcategory: String,
}

/// A raster mask together with the polygons it was drawn from, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedMask {
    pub mask: BinaryMask,
    pub region: Option<PolygonRegion>,
}

impl AnnotatedMask {
    pub fn raster(mask: BinaryMask) -> Self {
        Self { mask, region: None }
    }

    pub fn from_region(region: PolygonRegion, width: usize, height: usize) -> Result<Self, MaskError> {
        let mask = crate::maskops::rasterize(&region, width, height)?;
        Ok(Self {
            mask,
            region: Some(region),
        })
    }

    fn to_wire(&self) -> MaskWire {
        match &self.region {
            Some(region) => MaskWire::from_region(region, None),
            None => MaskWire::Rle {
                size: None,
                counts: crate::maskops::encode_rle(&self.mask),
            },
        }
    }
}

/// One annotated object instance, in a reference image or a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub annotation_id: u64,
    pub category_id: u64,
    pub object: ObjectId,
    pub mask: AnnotatedMask,
    pub affordances: BTreeMap<String, AnnotatedMask>,
    pub grasps: Vec<GraspRect>,
    pub description: Option<String>,
    pub properties: BTreeMap<String, serde_json::Value>,
}

impl ObjectAnnotation {
    pub fn affordance(&self, name: &str) -> Option<&BinaryMask> {
        self.affordances.get(name).map(|a| &a.mask)
    }

    /// Ground-truth task-suitable region under `rule`.
    pub fn task_region(&self, rule: &TaskRule) -> Result<BinaryMask, DatasetError> {
        task_region(&self.mask.mask, rule, |name| self.affordance(name), &self.object)
    }
}

/// `Require → M ∧ F`, `Avoid → M ∧ ¬F`, `None → M`.
pub fn task_region<'a>(
    object_mask: &BinaryMask,
    rule: &TaskRule,
    affordance: impl FnOnce(&str) -> Option<&'a BinaryMask>,
    object: &ObjectId,
) -> Result<BinaryMask, DatasetError> {
    let name = match (rule.polarity, &rule.affordance) {
        (Polarity::None, _) | (_, None) => return Ok(object_mask.clone()),
        (_, Some(name)) => name,
    };
    let f = affordance(name).ok_or_else(|| DatasetError::MissingAffordance {
        object: object.to_string(),
        affordance: name.clone(),
    })?;
    Ok(match rule.polarity {
        Polarity::Require => mask_and(object_mask, f)?,
        _ => mask_sub(object_mask, f)?,
    })
}

/// Reference record `(image, object mask, affordance masks, grasps, description)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeEntry {
    pub image_id: u64,
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub annotation: ObjectAnnotation,
}

impl KnowledgeEntry {
    pub fn object(&self) -> &ObjectId {
        &self.annotation.object
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.annotation.mask.mask
    }

    pub fn affordance(&self, name: &str) -> Option<&BinaryMask> {
        self.annotation.affordance(name)
    }

    pub fn grasps(&self) -> &[GraspRect] {
        &self.annotation.grasps
    }

    pub fn description(&self) -> &str {
        self.annotation.description.as_deref().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub image_id: u64,
    pub image_path: PathBuf,
    pub depth_path: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub split: Split,
    pub objects: Vec<ObjectAnnotation>,
}

impl SceneAnnotation {
    pub fn find_object(&self, subcategory: &str) -> Option<&ObjectAnnotation> {
        self.objects.iter().find(|o| o.object.subcategory == subcategory)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    pub affordances: Vec<String>,
    pub categories: Vec<Category>,
    pub entries: Vec<KnowledgeEntry>,
    pub scenes: Vec<SceneAnnotation>,
    pub rules: Vec<TaskRule>,
}

impl Dataset {
    pub fn tasks(&self) -> Vec<&str> {
        self.rules.iter().map(|r| r.task.as_str()).collect()
    }

    pub fn entry(&self, subcategory: &str) -> Option<&KnowledgeEntry> {
        self.entries.iter().find(|e| e.object().subcategory == subcategory)
    }

    pub fn scene(&self, image_id: u64) -> Option<&SceneAnnotation> {
        self.scenes.iter().find(|s| s.image_id == image_id)
    }

    pub fn object_id(&self, subcategory: &str) -> Option<ObjectId> {
        self.categories
            .iter()
            .find(|c| c.subcategory == subcategory)
            .map(|c| ObjectId {
                category: c.name.clone(),
                subcategory: c.subcategory.clone(),
            })
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Rules applicable to a category, in table order.
    pub fn applicable_rules(&self, category: &str) -> Vec<&TaskRule> {
        self.rules.iter().filter(|r| r.applies_to(category)).collect()
    }

    pub fn scenes_in(&self, splits: &[Split]) -> Vec<&SceneAnnotation> {
        self.scenes.iter().filter(|s| splits.contains(&s.split)).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    affordances: Vec<String>,
    categories: Vec<Category>,
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    tasks: Vec<TaskRule>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_file: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    id: u64,
    image_id: u64,
    category_id: u64,
    object_mask: MaskWire,
    #[serde(default)]
    affordances: Vec<AffordanceRecord>,
    #[serde(default)]
    grasps: Vec<GraspRect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    properties: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffordanceRecord {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    polygons: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    holes: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counts: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<String>,
}

impl AffordanceRecord {
    fn wire(&self) -> Result<MaskWire, String> {
        match (&self.polygons, &self.counts, &self.bits) {
            (Some(p), None, None) => Ok(MaskWire::Polygons {
                size: None,
                polygons: p.clone(),
                holes: self.holes.clone(),
            }),
            (None, Some(c), None) if self.holes.is_empty() => Ok(MaskWire::Rle {
                size: None,
                counts: c.clone(),
            }),
            (None, None, Some(b)) if self.holes.is_empty() => Ok(MaskWire::Bits {
                size: None,
                bits: b.clone(),
            }),
            _ => Err(format!(
                "affordance {:?} needs exactly one of polygons, counts or bits",
                self.name
            )),
        }
    }

    fn from_mask(name: &str, m: &AnnotatedMask) -> Self {
        let mut rec = AffordanceRecord {
            name: name.to_string(),
            polygons: None,
            holes: Vec::new(),
            counts: None,
            bits: None,
        };
        match m.to_wire() {
            MaskWire::Polygons { polygons, holes, .. } => {
                rec.polygons = Some(polygons);
                rec.holes = holes;
            }
            MaskWire::Rle { counts, .. } => rec.counts = Some(counts),
            MaskWire::Bits { bits, .. } => rec.bits = Some(bits),
        }
        rec
    }
}

fn decode_annotated(wire: &MaskWire, width: usize, height: usize) -> Result<AnnotatedMask, MaskError> {
    Ok(AnnotatedMask {
        mask: wire.decode(Some((width, height)))?,
        region: wire.region()?,
    })
}

/// Loads a manifest, rasterizes every mask and checks references and
/// annotation invariants.
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: shown.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    from_manifest(manifest, root, true)
}

fn from_manifest(manifest: Manifest, root: PathBuf, check_files: bool) -> Result<Dataset, DatasetError> {
    for rule in &manifest.tasks {
        rule.check()?;
    }
    let mut seen = BTreeSet::new();
    for c in &manifest.categories {
        if !seen.insert(c.id) {
            return Err(DatasetError::InvariantViolation(format!(
                "duplicate category id {}",
                c.id
            )));
        }
    }
    let mut images = BTreeMap::new();
    for img in &manifest.images {
        if img.width == 0 || img.height == 0 {
            return Err(DatasetError::InvariantViolation(format!(
                "image {} has zero size",
                img.id
            )));
        }
        if images.insert(img.id, img).is_some() {
            return Err(DatasetError::InvariantViolation(format!(
                "duplicate image id {}",
                img.id
            )));
        }
        if check_files {
            for file in std::iter::once(&img.file_name).chain(img.depth_file.as_ref()) {
                let p = root.join(file);
                if !p.is_file() {
                    return Err(DatasetError::DanglingReference(format!(
                        "image {} file {} does not exist",
                        img.id,
                        p.display()
                    )));
                }
            }
        }
    }

    let mut per_image: BTreeMap<u64, Vec<ObjectAnnotation>> = BTreeMap::new();
    let mut annotation_ids = BTreeSet::new();
    for ann in &manifest.annotations {
        if !annotation_ids.insert(ann.id) {
            return Err(DatasetError::InvariantViolation(format!(
                "duplicate annotation id {}",
                ann.id
            )));
        }
        let img = images.get(&ann.image_id).ok_or_else(|| {
            DatasetError::DanglingReference(format!(
                "annotation {} refers to unknown image {}",
                ann.id, ann.image_id
            ))
        })?;
        let cat = manifest
            .categories
            .iter()
            .find(|c| c.id == ann.category_id)
            .ok_or_else(|| {
                DatasetError::DanglingReference(format!(
                    "annotation {} refers to unknown category {}",
                    ann.id, ann.category_id
                ))
            })?;
        let (w, h) = (img.width, img.height);
        let violation = |what: String| DatasetError::InvariantViolation(format!("annotation {}: {what}", ann.id));
        let mask = decode_annotated(&ann.object_mask, w, h).map_err(|e| violation(format!("object mask: {e}")))?;
        let mut affordances = BTreeMap::new();
        for a in &ann.affordances {
            let wire = a.wire().map_err(violation)?;
            let m = decode_annotated(&wire, w, h).map_err(|e| violation(format!("affordance {}: {e}", a.name)))?;
            if affordances.insert(a.name.clone(), m).is_some() {
                return Err(violation(format!("duplicate affordance {}", a.name)));
            }
        }
        for g in &ann.grasps {
            g.validate().map_err(|e| violation(e.to_string()))?;
            if g.x < 0.0 || g.y < 0.0 || g.x >= w as f64 || g.y >= h as f64 {
                return Err(violation(format!("grasp center ({}, {}) outside the image", g.x, g.y)));
            }
        }
        per_image.entry(ann.image_id).or_default().push(ObjectAnnotation {
            annotation_id: ann.id,
            category_id: cat.id,
            object: ObjectId {
                category: cat.name.clone(),
                subcategory: cat.subcategory.clone(),
            },
            mask,
            affordances,
            grasps: ann.grasps.clone(),
            description: ann.description.clone(),
            properties: ann.properties.clone(),
        });
    }

    let mut entries = Vec::new();
    let mut scenes = Vec::new();
    for (id, img) in &images {
        let mut objects = per_image.remove(id).unwrap_or_default();
        objects.sort_by_key(|o| o.annotation_id);
        if img.split == Split::Reference {
            if objects.len() != 1 {
                return Err(DatasetError::InvariantViolation(format!(
                    "reference image {id} has {} objects, expected 1",
                    objects.len()
                )));
            }
            entries.push(KnowledgeEntry {
                image_id: *id,
                image_path: PathBuf::from(&img.file_name),
                width: img.width,
                height: img.height,
                annotation: objects.pop().expect("one object"),
            });
        } else {
            scenes.push(SceneAnnotation {
                image_id: *id,
                image_path: PathBuf::from(&img.file_name),
                depth_path: img.depth_file.as_ref().map(PathBuf::from),
                width: img.width,
                height: img.height,
                split: img.split,
                objects,
            });
        }
    }
    let mut categories = manifest.categories;
    categories.sort_by_key(|c| c.id);
    Ok(Dataset {
        root,
        affordances: manifest.affordances,
        categories,
        entries,
        scenes,
        rules: manifest.tasks,
    })
}

fn path_string(dataset_root: &Path, target_dir: &Path, p: &Path) -> String {
    if p.is_absolute() || same_dir(dataset_root, target_dir) {
        return p.to_string_lossy().into_owned();
    }
    let abs = dataset_root.join(p);
    std::fs::canonicalize(&abs)
        .unwrap_or(abs)
        .to_string_lossy()
        .into_owned()
}

fn same_dir(a: &Path, b: &Path) -> bool {
    let norm = |p: &Path| {
        let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
        std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
    };
    norm(a) == norm(b)
}

fn annotation_record(image_id: u64, o: &ObjectAnnotation) -> AnnotationRecord {
    AnnotationRecord {
        id: o.annotation_id,
        image_id,
        category_id: o.category_id,
        object_mask: o.mask.to_wire(),
        affordances: o
            .affordances
            .iter()
            .map(|(name, m)| AffordanceRecord::from_mask(name, m))
            .collect(),
        grasps: o.grasps.clone(),
        description: o.description.clone(),
        properties: o.properties.clone(),
    }
}

/// Serializes a dataset to canonical JSON: images, categories and annotations
/// sorted by id, maps in key order. Image paths stay relative when the manifest
/// is written next to the original one and become absolute otherwise.
pub fn to_manifest_json(d: &Dataset, target_dir: &Path) -> String {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for e in &d.entries {
        images.push(ImageRecord {
            id: e.image_id,
            file_name: path_string(&d.root, target_dir, &e.image_path),
            width: e.width,
            height: e.height,
            split: Split::Reference,
            depth_file: None,
        });
        annotations.push(annotation_record(e.image_id, &e.annotation));
    }
    for s in &d.scenes {
        images.push(ImageRecord {
            id: s.image_id,
            file_name: path_string(&d.root, target_dir, &s.image_path),
            width: s.width,
            height: s.height,
            split: s.split,
            depth_file: s.depth_path.as_ref().map(|p| path_string(&d.root, target_dir, p)),
        });
        for o in &s.objects {
            annotations.push(annotation_record(s.image_id, o));
        }
    }
    images.sort_by_key(|i| i.id);
    annotations.sort_by_key(|a| a.id);
    let mut categories = d.categories.clone();
    categories.sort_by_key(|c| c.id);
    let manifest = Manifest {
        affordances: d.affordances.clone(),
        categories,
        images,
        annotations,
        tasks: d.rules.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let text = to_manifest_json(d, dir);
    std::fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Keeps the part of a rough affordance mask that lies on the object.
pub fn refine_affordance(rough: &BinaryMask, object_mask: &BinaryMask) -> Result<BinaryMask, DatasetError> {
    Ok(mask_and(rough, object_mask)?)
}

fn refine_object(o: &mut ObjectAnnotation) -> Result<(), DatasetError> {
    for aff in o.affordances.values_mut() {
        let refined = refine_affordance(&aff.mask, &o.mask.mask)?;
        if refined != aff.mask {
            *aff = AnnotatedMask::raster(refined);
        }
    }
    Ok(())
}

/// Refines every affordance mask in the dataset against its object mask.
pub fn refine_dataset(d: &mut Dataset) -> Result<(), DatasetError> {
    for e in &mut d.entries {
        refine_object(&mut e.annotation)?;
    }
    for s in &mut d.scenes {
        for o in &mut s.objects {
            refine_object(o)?;
        }
    }
    Ok(())
}

/// Similarity transform `q = scene_center + scale * R(rotation) (p - ref_center)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub ref_center: Point,
    pub scene_center: Point,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl Similarity {
    pub fn apply(&self, p: Point) -> Point {
        let r = rotate_point(p, self.ref_center, self.rotation_deg);
        Point::new(
            self.scene_center.x + self.scale * (r.x - self.ref_center.x),
            self.scene_center.y + self.scale * (r.y - self.ref_center.y),
        )
    }

    pub fn invert(&self, q: Point) -> Point {
        let p = Point::new(
            self.ref_center.x + (q.x - self.scene_center.x) / self.scale,
            self.ref_center.y + (q.y - self.scene_center.y) / self.scale,
        );
        rotate_point(p, self.ref_center, -self.rotation_deg)
    }

    pub fn apply_grasp(&self, g: &GraspRect) -> GraspRect {
        let c = self.apply(g.center());
        GraspRect {
            x: c.x,
            y: c.y,
            w: g.w * self.scale,
            h: g.h * self.scale,
            theta: normalize_theta(g.theta + self.rotation_deg),
            confidence: g.confidence,
        }
    }

    /// Warps a reference-frame mask into a `width x height` scene frame,
    /// nearest-neighbor by pixel index. Only pixels inside `window` are visited.
    fn warp_in(&self, m: &BinaryMask, width: usize, height: usize, window: (usize, usize, usize, usize)) -> BinaryMask {
        let mut out = BinaryMask::new(width, height);
        let (x0, y0, x1, y1) = window;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = self.invert(Point::new(x as f64, y as f64));
                if m.get_signed(p.x.round() as i64, p.y.round() as i64) {
                    out.set(x, y, true);
                }
            }
        }
        out
    }

    fn window_for(&self, m: &BinaryMask, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let b = mask_bbox(m).ok()?;
        let corners = [
            (b.x0 as f64 - 1.0, b.y0 as f64 - 1.0),
            (b.x1 as f64 + 1.0, b.y0 as f64 - 1.0),
            (b.x1 as f64 + 1.0, b.y1 as f64 + 1.0),
            (b.x0 as f64 - 1.0, b.y1 as f64 + 1.0),
        ]
        .map(|(x, y)| self.apply(Point::new(x, y)));
        let xs = corners.iter().map(|p| p.x);
        let ys = corners.iter().map(|p| p.y);
        let lo_x = xs.clone().fold(f64::MAX, f64::min).floor().max(0.0) as usize;
        let hi_x = (xs.fold(f64::MIN, f64::max).ceil() + 1.0).clamp(0.0, width as f64) as usize;
        let lo_y = ys.clone().fold(f64::MAX, f64::min).floor().max(0.0) as usize;
        let hi_y = (ys.fold(f64::MIN, f64::max).ceil() + 1.0).clamp(0.0, height as f64) as usize;
        (lo_x < hi_x && lo_y < hi_y).then_some((lo_x, lo_y, hi_x, hi_y))
    }

    pub fn warp_mask(&self, m: &BinaryMask, width: usize, height: usize) -> BinaryMask {
        match self.window_for(m, width, height) {
            Some(w) => self.warp_in(m, width, height, w),
            None => BinaryMask::new(width, height),
        }
    }
}

pub const DEFAULT_ALIGNMENT_MIN_IOU: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct AutoLabel {
    pub grasps: Vec<GraspRect>,
    pub rough_affordances: BTreeMap<String, BinaryMask>,
    pub transform: Similarity,
    /// IoU between the warped reference mask and the scene mask.
    pub iou: f64,
}

/// Transfers a reference object's grasps and affordance masks onto a scene
/// object by a similarity transform: translation from the centroid offset,
/// uniform scale from the square root of the area ratio, and the rotation (out
/// of `n_rots` evenly spaced candidates) with the smallest symmetric
/// difference between the warped reference mask and the scene mask.
pub fn auto_label(
    scene_mask: &BinaryMask,
    reference: &KnowledgeEntry,
    n_rots: usize,
    min_iou: f64,
) -> Result<AutoLabel, DatasetError> {
    let scene_area = scene_mask.area();
    if scene_area == 0 {
        return Err(DatasetError::EmptySceneMask);
    }
    let ref_mask = reference.mask();
    let ref_area = ref_mask.area();
    if ref_area == 0 {
        return Err(DatasetError::InvariantViolation(format!(
            "reference {} has an empty mask",
            reference.object()
        )));
    }
    let (width, height) = (scene_mask.width(), scene_mask.height());
    let scene_box = mask_bbox(scene_mask)?;
    let base = Similarity {
        ref_center: mask_centroid(ref_mask)?,
        scene_center: mask_centroid(scene_mask)?,
        scale: (scene_area as f64 / ref_area as f64).sqrt(),
        rotation_deg: 0.0,
    };
    let n_rots = n_rots.max(1);
    let mut best: Option<(usize, usize, Similarity, BinaryMask)> = None;
    for i in 0..n_rots {
        let t = Similarity {
            rotation_deg: i as f64 * 360.0 / n_rots as f64,
            ..base
        };
        let window = match t.window_for(ref_mask, width, height) {
            Some((x0, y0, x1, y1)) => (
                x0.min(scene_box.x0),
                y0.min(scene_box.y0),
                x1.max(scene_box.x1 + 1),
                y1.max(scene_box.y1 + 1),
            ),
            None => (scene_box.x0, scene_box.y0, scene_box.x1 + 1, scene_box.y1 + 1),
        };
        let warped = t.warp_in(ref_mask, width, height, window);
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in warped.bits().iter().zip(scene_mask.bits()) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        let sym_diff = union - inter;
        if best.as_ref().is_none_or(|(d, _, _, _)| sym_diff < *d) {
            best = Some((sym_diff, inter, t, warped));
        }
    }
    let (sym_diff, inter, transform, _) = best.expect("at least one rotation");
    let iou = inter as f64 / (inter + sym_diff) as f64;
    if iou < min_iou {
        return Err(DatasetError::AlignmentFailure {
            iou,
            threshold: min_iou,
        });
    }
    let grasps = reference
        .grasps()
        .iter()
        .map(|g| transform.apply_grasp(g))
        .filter(|g| g.x >= 0.0 && g.y >= 0.0 && g.x < width as f64 && g.y < height as f64)
        .collect();
    let rough_affordances = reference
        .annotation
        .affordances
        .iter()
        .map(|(name, m)| (name.clone(), transform.warp_mask(&m.mask, width, height)))
        .collect();
    Ok(AutoLabel {
        grasps,
        rough_affordances,
        transform,
        iou,
    })
}

/// Auto-labels every scene object from the reference entry of the same
/// subcategory, replacing its grasps and affordance masks. Returns per-object
/// failures as `(annotation id, error)`.
pub fn auto_label_dataset(
    scenes: &mut Dataset,
    references: &Dataset,
    n_rots: usize,
    min_iou: f64,
) -> Vec<(u64, DatasetError)> {
    let mut failures = Vec::new();
    for scene in &mut scenes.scenes {
        for o in &mut scene.objects {
            let Some(reference) = references.entry(&o.object.subcategory) else {
                failures.push((
                    o.annotation_id,
                    DatasetError::DanglingReference(format!("no reference for {}", o.object)),
                ));
                continue;
            };
            match auto_label(&o.mask.mask, reference, n_rots, min_iou) {
                Ok(label) => {
                    o.grasps = label.grasps;
                    o.affordances = label
                        .rough_affordances
                        .into_iter()
                        .map(|(k, m)| (k, AnnotatedMask::raster(m)))
                        .collect();
                    if o.description.is_none() {
                        o.description = reference.annotation.description.clone();
                    }
                }
                Err(e) => failures.push((o.annotation_id, e)),
            }
        }
    }
    failures
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    fn push(&mut self, severity: Severity, location: String, message: impl Into<String>) {
        self.issues.push(Issue {
            severity,
            location,
            message: message.into(),
        });
    }
}

fn check_object(
    report: &mut ValidationReport,
    d: &Dataset,
    location: &str,
    o: &ObjectAnnotation,
    needs_description: bool,
) {
    let vocab: BTreeSet<&str> = d.affordances.iter().map(String::as_str).collect();
    for (name, aff) in &o.affordances {
        if !vocab.contains(name.as_str()) {
            report.push(
                Severity::Error,
                location.to_string(),
                format!("affordance {name:?} not in vocabulary"),
            );
        }
        if let Ok(escaped) = mask_sub(&aff.mask, &o.mask.mask) {
            let n = escaped.area();
            if n > 0 {
                report.push(
                    Severity::Warning,
                    location.to_string(),
                    format!("affordance {name:?} escapes the object mask by {n} px"),
                );
            }
        }
        if aff.mask.is_empty() {
            report.push(
                Severity::Warning,
                location.to_string(),
                format!("affordance {name:?} is empty"),
            );
        }
    }
    for (i, g) in o.grasps.iter().enumerate() {
        let (x, y) = g.center_pixel();
        if !o.mask.mask.get_signed(x, y) {
            report.push(
                Severity::Warning,
                format!("{location} grasp {i}"),
                "grasp center off object",
            );
        }
    }
    if o.mask.mask.is_empty() {
        report.push(Severity::Error, location.to_string(), "object mask is empty");
    }
    if needs_description && o.description.as_deref().is_none_or(|s| s.trim().is_empty()) {
        report.push(Severity::Warning, location.to_string(), "missing description");
    }
}

/// Checks dataset-wide invariants and returns every finding; an empty report
/// means all of them hold.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let tasks: BTreeSet<&str> = d.tasks().into_iter().collect();
    if tasks.len() != d.rules.len() {
        report.push(Severity::Error, "tasks".into(), "duplicate task names");
    }
    for r in &d.rules {
        if let Err(e) = r.check() {
            report.push(Severity::Error, format!("task {}", r.task), e.to_string());
        }
        if let Some(a) = &r.affordance {
            if !d.affordances.contains(a) {
                report.push(
                    Severity::Error,
                    format!("task {}", r.task),
                    format!("affordance {a:?} not in vocabulary"),
                );
            }
        }
    }
    for e in &d.entries {
        let loc = format!("reference {} (annotation {})", e.object(), e.annotation.annotation_id);
        check_object(&mut report, d, &loc, &e.annotation, true);
    }
    for s in &d.scenes {
        let scene_loc = format!("scene {}", s.image_id);
        let n = s.objects.len();
        let categories: BTreeSet<&str> = s.objects.iter().map(|o| o.object.category.as_str()).collect();
        let subcategories: BTreeSet<&str> = s.objects.iter().map(|o| o.object.subcategory.as_str()).collect();
        if s.split.is_category_style() {
            if !(1..=5).contains(&n) {
                report.push(
                    Severity::Error,
                    scene_loc.clone(),
                    format!("{} scene has {n} objects, expected 1-5", s.split),
                );
            }
            if categories.len() != n {
                report.push(
                    Severity::Error,
                    scene_loc.clone(),
                    "objects in a category-split scene must have distinct categories",
                );
            }
        } else if s.split.is_subcategory_style() {
            if !(2..=4).contains(&n) {
                report.push(
                    Severity::Error,
                    scene_loc.clone(),
                    format!("{} scene has {n} objects, expected 2-4", s.split),
                );
            }
            if categories.len() > 1 || subcategories.len() != n {
                report.push(
                    Severity::Error,
                    scene_loc.clone(),
                    "subcategory-split scenes need one category with distinct subcategories",
                );
            }
        }
        for o in &s.objects {
            let loc = format!("{scene_loc} annotation {}", o.annotation_id);
            check_object(&mut report, d, &loc, o, false);
        }
    }
    report
}
