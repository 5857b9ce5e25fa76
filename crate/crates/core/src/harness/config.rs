//! Harness configuration types; the detector config mirrors the ablation
//! axes (stem variant, relation module and its position, cross-scale
//! attention, loss composition) so each ablation row is a single config.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Image side in pixels; must be divisible by 32.
    pub size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object side range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Amplitude of the smoothed background clutter.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            objects_min: 1,
            objects_max: 3,
            min_size: 3,
            max_size: 8,
            clutter: 0.15,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of 32, got {}",
                self.size
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config("objects_min exceeds objects_max".into()));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config("invalid object size range".into()));
        }
        if self.max_size >= self.size / 4 {
            return Err(Error::Config(format!(
                "object size {} must stay below a quarter of the image side {}",
                self.max_size, self.size
            )));
        }
        if !self.clutter.is_finite() || self.clutter < 0.0 {
            return Err(Error::Config("clutter amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemChoice {
    Rhwd,
    Largekernel,
    Focus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrmChoice {
    None,
    PlainMhsa,
    Grm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrmPosition {
    BeforeSppf,
    AfterSppf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    IouOnly,
    IouPlusCenter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub stem: StemChoice,
    pub grm: GrmChoice,
    pub grm_position: GrmPosition,
    pub csha_enabled: bool,
    pub loss: LossChoice,
    pub stem_channels: usize,
    pub p3_channels: usize,
    pub p4_channels: usize,
    pub p5_channels: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Average object size in pixels for the center-distance loss; when
    /// absent it is computed from the training ground truth.
    pub size_constant: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            stem: StemChoice::Rhwd,
            grm: GrmChoice::Grm,
            grm_position: GrmPosition::BeforeSppf,
            csha_enabled: true,
            loss: LossChoice::IouPlusCenter,
            stem_channels: 8,
            p3_channels: 16,
            p4_channels: 16,
            p5_channels: 24,
            alpha1: 0.5,
            alpha2: 0.5,
            size_constant: None,
        }
    }
}

impl DetectorConfig {
    /// The progressive ablation ladder: baseline, then the stem, then the
    /// relation module, then cross-scale attention, then the center loss.
    pub fn ablation_ladder() -> Vec<DetectorConfig> {
        let baseline = DetectorConfig {
            stem: StemChoice::Largekernel,
            grm: GrmChoice::None,
            csha_enabled: false,
            loss: LossChoice::IouOnly,
            ..DetectorConfig::default()
        };
        let mut rows = vec![baseline.clone()];
        let mut cfg = baseline;
        cfg.stem = StemChoice::Rhwd;
        rows.push(cfg.clone());
        cfg.grm = GrmChoice::Grm;
        rows.push(cfg.clone());
        cfg.csha_enabled = true;
        rows.push(cfg.clone());
        cfg.loss = LossChoice::IouPlusCenter;
        rows.push(cfg);
        rows
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stem_channels", self.stem_channels),
            ("p3_channels", self.p3_channels),
            ("p4_channels", self.p4_channels),
            ("p5_channels", self.p5_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.alpha1 + self.alpha2 <= 0.0 {
            return Err(Error::Config(
                "loss weights must be non-negative with a positive sum".into(),
            ));
        }
        if let Some(c) = self.size_constant {
            if c <= 0.0 {
                return Err(Error::Config(format!(
                    "size constant must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss and score traces of one training run. The wall clock is excluded
/// from the determinism comparison.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub step_total: Vec<f64>,
    pub step_objectness: Vec<f64>,
    pub step_regression: Vec<f64>,
    pub epoch_ap50_iou: Vec<f64>,
    pub epoch_ap50_safit: Vec<f64>,
    pub wall_clock_seconds: f64,
}

impl TrainHistory {
    /// Serialization of every deterministic field, for byte-for-byte
    /// comparison of same-seed runs.
    pub fn determinism_key(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_seconds = 0.0;
        serde_json::to_string(&clone).expect("history is serializable")
    }

    pub fn all_finite(&self) -> bool {
        self.step_total
            .iter()
            .chain(&self.step_objectness)
            .chain(&self.step_regression)
            .chain(&self.epoch_ap50_iou)
            .chain(&self.epoch_ap50_safit)
            .all(|v| v.is_finite())
    }

    /// Exponentially smoothed total loss (factor 0.9) at each step.
    pub fn smoothed_total(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.step_total.len());
        let mut ema = 0.0;
        for (i, &v) in self.step_total.iter().enumerate() {
            ema = if i == 0 { v } else { 0.9 * ema + 0.1 * v };
            out.push(ema);
        }
        out
    }
}
