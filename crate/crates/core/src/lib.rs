//! Occlusion compositing for AR through implicit depth.
//!
//! Instead of regressing a depth map and comparing it against the rendered
//! depth of a virtual asset, a per-pixel classifier is asked directly whether
//! the virtual surface at a queried depth lies behind the real scene. The
//! crate contains the classifier and its training recipe, a regression
//! baseline, binary-search depth extraction, temporal rollout with warped
//! previous predictions, occlusion/depth/flicker metrics, and a procedural
//! RGB-D scene generator to run all of it on a CPU.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
