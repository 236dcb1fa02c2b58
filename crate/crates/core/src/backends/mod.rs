//! Perception ports used by the pipeline, ground-truth oracles that implement
//! them with injectable noise, and a JSON-lines subprocess transport for real
//! models.

pub mod external;
pub mod oracle;
pub mod protocol;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, TaskRule};
use crate::geometry::{CropTransform, GraspRect};
use crate::maskops::{BinaryMask, MaskError};
use crate::raster::{RasterError, RgbImage};

pub use external::{ExternalProcess, DEFAULT_TIMEOUT_MS};
pub use oracle::{anchor_table, boundary_jitter, oracle_propose_grasps, oracle_segment, OracleBackend, ANCHOR_DIM};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("crop overlaps no ground-truth object")]
    UnmappableCrop,
    #[error("unknown scene {0}")]
    UnknownScene(String),
    #[error("{object} has no {affordance:?} affordance")]
    MissingAffordance { object: String, affordance: String },
    #[error("backend for {0} is not configured")]
    NotConfigured(Kind),
    #[error("{op} timed out after {ms} ms")]
    Timeout { op: String, ms: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend process exited: {0}")]
    ProcessExit(String),
    #[error("backend reported: {0}")]
    Remote(String),
    #[error("cannot start backend {command}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Segmenter,
    ImageEmbedder,
    TextEmbedder,
    PairEmbedder,
    Classifier,
    #[serde(rename = "affordance_oneshot")]
    AffordanceOneShot,
    AffordanceSegmenter,
    GraspProposer,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Segmenter,
        Kind::ImageEmbedder,
        Kind::TextEmbedder,
        Kind::PairEmbedder,
        Kind::Classifier,
        Kind::AffordanceOneShot,
        Kind::AffordanceSegmenter,
        Kind::GraspProposer,
    ];
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("kind serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    ConcurrentSafe,
    #[default]
    SerializeCalls,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcessOracle,
    ExternalProcess { command: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: Kind,
    pub transport: Transport,
    pub concurrency: Concurrency,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Oracle perturbations. The default (all zero) is the noiseless oracle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability that a ground-truth segment is dropped.
    pub segment_dropout: f64,
    /// Subset fragments injected per object.
    pub fragments: usize,
    /// Out-of-size-range background segments per scene.
    pub background_blobs: usize,
    /// Pixels near a mask boundary (Chebyshev distance ≤ this) may flip.
    pub boundary_jitter_px: usize,
    pub embedding_sigma: f64,
    pub grasp_jitter_px: f64,
    pub grasp_jitter_deg: f64,
    pub confidence_sigma: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let sigmas = [
            ("embedding_sigma", self.embedding_sigma),
            ("grasp_jitter_px", self.grasp_jitter_px),
            ("grasp_jitter_deg", self.grasp_jitter_deg),
            ("confidence_sigma", self.confidence_sigma),
        ];
        if !(0.0..=1.0).contains(&self.segment_dropout) {
            return Err(BackendError::Config(format!(
                "segment_dropout {} outside [0, 1]",
                self.segment_dropout
            )));
        }
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(BackendError::Config(format!(
                    "{name} must be a finite value ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        *self == NoiseConfig::default()
    }
}

/// Where a crop came from, so oracles can look up ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewOrigin {
    /// Scene image id.
    Scene(u64),
    /// Reference subcategory.
    Reference(String),
}

#[derive(Debug, Clone)]
pub struct SceneInput {
    pub scene_id: u64,
    pub image: RgbImage,
    pub path: Option<PathBuf>,
}

/// A candidate or reference object cropped to a square.
#[derive(Debug, Clone, Copy)]
pub struct CropView<'a> {
    pub origin: &'a ViewOrigin,
    /// The object's mask in its full frame.
    pub mask: &'a BinaryMask,
    pub transform: CropTransform,
    /// Masked, cropped image.
    pub image: &'a RgbImage,
}

/// Inputs of a one-shot affordance model: the scene crop plus an aligned
/// reference crop and its task region (both in crop coordinates).
#[derive(Debug, Clone, Copy)]
pub struct OneShotQuery<'a> {
    pub scene: CropView<'a>,
    pub reference_image: &'a RgbImage,
    pub reference_region: &'a BinaryMask,
    pub rule: &'a TaskRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub labels: Vec<String>,
    pub logits: Vec<f64>,
}

/// One labeled affordance mask, in crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordancePrediction {
    pub label: String,
    pub confidence: f64,
    pub mask: BinaryMask,
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, scene: &SceneInput) -> Result<Vec<BinaryMask>, BackendError>;
}

pub trait ImageEmbedder: Send + Sync {
    fn embed_image(&self, view: &CropView<'_>) -> Result<Vec<f64>, BackendError>;
}

pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

pub trait PairEmbedder: Send + Sync {
    fn embed_pair(&self, view: &CropView<'_>) -> Result<Vec<f64>, BackendError>;
}

pub trait Classifier: Send + Sync {
    /// The label set, when known ahead of any call.
    fn labels(&self) -> Option<Vec<String>>;
    fn classify(&self, view: &CropView<'_>) -> Result<ClassScores, BackendError>;
}

pub trait AffordanceOneShot: Send + Sync {
    fn predict_region(&self, query: &OneShotQuery<'_>) -> Result<BinaryMask, BackendError>;
}

pub trait AffordanceSegmenter: Send + Sync {
    fn segment_affordances(&self, view: &CropView<'_>) -> Result<Vec<AffordancePrediction>, BackendError>;
}

pub trait GraspProposer: Send + Sync {
    fn propose(&self, scene: &SceneInput) -> Result<Vec<GraspRect>, BackendError>;
}

/// An external model server declared in a backend configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub command: Vec<String>,
    pub kinds: Vec<Kind>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub concurrency: Concurrency,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

/// Backend configuration file. Kinds not served by a process fall back to
/// the ground-truth oracle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub processes: Vec<ProcessSpec>,
}

pub const BACKEND_CONFIG_ENV: &str = "TOG_BACKEND_CONFIG";

impl BackendConfig {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: BackendConfig =
            serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in &mut cfg.processes {
            if let Some(first) = p.command.first_mut() {
                let candidate = Path::new(first.as_str());
                if candidate.is_relative() && candidate.components().count() > 1 {
                    *first = dir.join(candidate).to_string_lossy().into_owned();
                }
            }
        }
        cfg.noise.validate()?;
        Ok(cfg)
    }
}

/// The configured implementation for every kind.
#[derive(Clone)]
pub struct BackendSet {
    pub segmenter: Arc<dyn Segmenter>,
    pub image_embedder: Arc<dyn ImageEmbedder>,
    pub text_embedder: Arc<dyn TextEmbedder>,
    pub pair_embedder: Arc<dyn PairEmbedder>,
    pub classifier: Arc<dyn Classifier>,
    pub affordance_oneshot: Arc<dyn AffordanceOneShot>,
    pub affordance_segmenter: Arc<dyn AffordanceSegmenter>,
    pub grasp_proposer: Arc<dyn GraspProposer>,
    pub descriptors: Vec<BackendDescriptor>,
}

impl std::fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSet")
            .field("descriptors", &self.descriptors)
            .finish()
    }
}

impl BackendSet {
    /// Every kind served by one oracle.
    pub fn oracle(oracle: OracleBackend) -> Self {
        let seed = oracle.seed();
        let o = Arc::new(oracle);
        BackendSet {
            segmenter: o.clone(),
            image_embedder: o.clone(),
            text_embedder: o.clone(),
            pair_embedder: o.clone(),
            classifier: o.clone(),
            affordance_oneshot: o.clone(),
            affordance_segmenter: o.clone(),
            grasp_proposer: o,
            descriptors: Kind::ALL
                .iter()
                .map(|&kind| BackendDescriptor {
                    kind,
                    transport: Transport::InProcessOracle,
                    concurrency: Concurrency::ConcurrentSafe,
                    seed: Some(seed),
                })
                .collect(),
        }
    }

    /// Starts the configured processes (performing their handshakes) and
    /// fills the remaining kinds with oracles over `dataset`.
    pub fn from_config(cfg: &BackendConfig, dataset: Arc<Dataset>) -> Result<Self, BackendError> {
        cfg.noise.validate()?;
        let mut oracle = OracleBackend::new(dataset, cfg.noise.clone(), cfg.seed);
        if let Some(labels) = &cfg.classifier_labels {
            oracle = oracle.with_labels(labels.clone());
        }
        let mut set = BackendSet::oracle(oracle);
        let mut claimed = Vec::new();
        for spec in &cfg.processes {
            let proc = Arc::new(ExternalProcess::spawn(spec)?);
            if let Some(labels) = &cfg.classifier_labels {
                proc.set_labels(labels.clone());
            }
            for &kind in &spec.kinds {
                if claimed.contains(&kind) {
                    return Err(BackendError::Config(format!("{kind} served by two processes")));
                }
                claimed.push(kind);
                set.attach(kind, proc.clone());
                let d = set.descriptors.iter_mut().find(|d| d.kind == kind).expect("every kind");
                d.transport = Transport::ExternalProcess {
                    command: spec.command.clone(),
                };
                d.concurrency = spec.concurrency;
                d.seed = None;
            }
        }
        Ok(set)
    }

    fn attach(&mut self, kind: Kind, p: Arc<ExternalProcess>) {
        match kind {
            Kind::Segmenter => self.segmenter = p,
            Kind::ImageEmbedder => self.image_embedder = p,
            Kind::TextEmbedder => self.text_embedder = p,
            Kind::PairEmbedder => self.pair_embedder = p,
            Kind::Classifier => self.classifier = p,
            Kind::AffordanceOneShot => self.affordance_oneshot = p,
            Kind::AffordanceSegmenter => self.affordance_segmenter = p,
            Kind::GraspProposer => self.grasp_proposer = p,
        }
    }

    pub fn descriptor(&self, kind: Kind) -> Option<&BackendDescriptor> {
        self.descriptors.iter().find(|d| d.kind == kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_config_defaults_and_validation() {
        let n: NoiseConfig = serde_json::from_str("{}").unwrap();
        assert!(n.is_noiseless());
        let n: NoiseConfig = serde_json::from_str(r#"{"segment_dropout": 1.5}"#).unwrap();
        assert!(n.validate().is_err());
        let n: NoiseConfig = serde_json::from_str(r#"{"embedding_sigma": -1}"#).unwrap();
        assert!(n.validate().is_err());
        assert!(serde_json::from_str::<NoiseConfig>(r#"{"typo": 1}"#).is_err());
    }

    #[test]
    fn kind_names() {
        assert_eq!(Kind::AffordanceOneShot.to_string(), "affordance_oneshot");
        let k: Kind = serde_json::from_str("\"grasp_proposer\"").unwrap();
        assert_eq!(k, Kind::GraspProposer);
    }
}
