//! Building blocks for small-object detection at desk scale.
//!
//! The crate provides a minimal double-precision tensor substrate with
//! hand-derived backward passes ([`ops`]), the four detection mechanisms —
//! a residual Haar wavelet downsampling stem ([`rhwd`]), global relation
//! modeling over P5 tokens ([`grm`]), cross-scale hybrid attention
//! ([`csha`]) and the center-assisted regression loss ([`geometry`]) —
//! plus a dual-protocol (IoU / SAFit) COCO-style evaluator ([`eval`]) and
//! a synthetic-scene training harness ([`harness`]).

pub mod checks;
pub mod csha;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod grm;
pub mod harness;
pub mod ops;
pub mod rhwd;
pub mod tensor;

pub use gradcheck::GradCheckReport;
pub use tensor::{FeatureMap, TokenSequence};

/// Errors shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
