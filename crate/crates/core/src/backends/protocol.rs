//! Frames of the JSON-lines backend protocol.
//!
//! Each line on the child's stdin is a [`Request`]; each line on its stdout a
//! [`Response`] with the same `id`. The first exchange is always
//! `{"id":0,"op":"hello"}`, answered with [`Hello`]. Images travel as PNG file
//! paths, masks as [`MaskWire`] objects (polygons, run lengths or base64 bits)
//! carrying their `size`.
//!
//! | op | args | result |
//! |----|------|--------|
//! | `ping` | none | none |
//! | `segment` | [`ImageArgs`] | [`SegmentResult`] |
//! | `embed_image`, `embed_pair` | [`ViewArgs`] | [`EmbeddingResult`] |
//! | `embed_text` | [`TextArgs`] | [`EmbeddingResult`] |
//! | `classify` | [`ViewArgs`] | [`ClassScores`](super::ClassScores) |
//! | `affordance_oneshot` | [`OneShotArgs`] | [`MaskResult`] |
//! | `affordance_segment` | [`ViewArgs`] | [`AffordanceResult`] |
//! | `propose_grasps` | [`ImageArgs`] | [`GraspResult`] |

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Kind, ViewOrigin};
use crate::dataset::TaskRule;
use crate::geometry::GraspRect;
use crate::maskops::MaskWire;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn success(id: u64, result: Option<Value>) -> Self {
        Self {
            id,
            ok: true,
            result,
            error: None,
        }
    }

    pub fn failure(id: u64, error: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            result: None,
            error: Some(error.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub kinds: Vec<Kind>,
    pub concurrent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageArgs {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub scene_id: u64,
}

/// Where a crop sits in its source frame: `[x0, y0, x1, y1]` plus side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewContext {
    pub origin: ViewOrigin,
    pub bbox: [f64; 4],
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewArgs {
    pub image: String,
    pub context: ViewContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextArgs {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotArgs {
    pub scene_image: String,
    pub reference_image: String,
    pub reference_region: MaskWire,
    pub context: ViewContext,
    pub task: TaskRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResult {
    pub masks: Vec<MaskWire>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResult {
    pub mask: MaskWire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAffordance {
    pub label: String,
    pub confidence: f64,
    pub mask: MaskWire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceResult {
    pub predictions: Vec<WireAffordance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspResult {
    pub grasps: Vec<GraspRect>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_shapes() {
        let r: Request = serde_json::from_str(r#"{"id":1,"op":"ping"}"#).unwrap();
        assert_eq!(r.args, Value::Null);
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"id":1,"op":"ping"}"#);
        assert_eq!(
            serde_json::to_string(&Response::success(1, None)).unwrap(),
            r#"{"id":1,"ok":true}"#
        );
        assert_eq!(
            serde_json::to_string(&Response::failure(2, "boom")).unwrap(),
            r#"{"id":2,"ok":false,"error":"boom"}"#
        );
        let o: ViewOrigin = serde_json::from_str(r#"{"reference":"hammer_01"}"#).unwrap();
        assert_eq!(o, ViewOrigin::Reference("hammer_01".into()));
    }
}
