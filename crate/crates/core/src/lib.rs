//! Task-oriented grasping: mask algebra, rotated-rectangle geometry,
//! annotated datasets, the recognition → region → grasp pipeline, pluggable
//! perception backends and a COCO-style evaluation harness.

pub mod backends;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod maskops;
pub mod pipeline;
pub mod raster;
pub mod synth;
