//! Desk-scale end-to-end harness: synthetic tiny-object scenes, a minimal
//! detector wiring the stem / backbone / SPPF / attention modules together,
//! and a deterministic training loop.

pub mod config;
pub mod detector;
pub mod scene;
pub mod sppf;
pub mod train;

pub use config::{DetectorConfig, GrmChoice, GrmPosition, LossChoice, SceneConfig, StemChoice, TrainHistory};
pub use detector::{build_detector, Detector, DetectorCache};
pub use scene::{gen_dataset, gen_scene, load_pgm, save_pgm, Dataset};
pub use sppf::{sppf_backward, sppf_forward, sppf_forward_cached, SppfCache, SppfGrads, SppfWeights};
pub use train::{assign_targets, predict_and_decode, train, CellTargets, TrainConfig};
