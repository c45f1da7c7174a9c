//! Rule-based correction of network predictions: snow verdicts that the
//! sensing geometry rules out are turned back into non-snow.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geom::{PointCloud, DEFAULT_SNOW_SENSE_LIMIT_M, SHORT_RANGE_LIMIT_M};
use crate::pseudolabel::ground_cutoff;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub enabled: bool,
    /// Snow beyond this range is impossible, metres.
    pub limit_m: f64,
    pub ground_margin_m: f64,
    /// Probability at or above which a point is snow.
    pub threshold: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self::sensing_limit()
    }
}

impl PostprocessConfig {
    /// Theoretical snow-sensing range of the reference sensor.
    pub fn sensing_limit() -> Self {
        Self { enabled: true, limit_m: DEFAULT_SNOW_SENSE_LIMIT_M, ground_margin_m: 0.2, threshold: 0.5 }
    }

    /// The tighter range used for short-range comparisons.
    pub fn short_range() -> Self {
        Self { limit_m: SHORT_RANGE_LIMIT_M, ..Self::sensing_limit() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.limit_m > 0.0) {
            return Err(Error::Config(format!("postprocess.limit_m must be positive, got {}", self.limit_m)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("postprocess.threshold must be in (0, 1), got {}", self.threshold)));
        }
        if !self.ground_margin_m.is_finite() {
            return Err(Error::Config("postprocess.ground_margin_m must be finite".into()));
        }
        Ok(())
    }
}

/// Clears snow labels beyond `cfg.limit_m` or at/below the ground cutoff.
/// Non-snow labels are never touched. With `cfg.enabled == false` the
/// labels pass through unchanged.
pub fn apply(labels: &[u8], cloud: &PointCloud, cfg: &PostprocessConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    if labels.len() != cloud.len() {
        return Err(contract(format!("{} labels for {} points", labels.len(), cloud.len())));
    }
    if !cfg.enabled {
        return Ok(labels.to_vec());
    }
    let cutoff = ground_cutoff(cloud.meta.mount_height_m, cfg.ground_margin_m);
    Ok(labels
        .iter()
        .zip(&cloud.points)
        .map(|(&l, p)| (l != 0 && p.range() <= cfg.limit_m && p.z > cutoff) as u8)
        .collect())
}

/// Thresholds probabilities at `cfg.threshold`, then [`apply`].
pub fn apply_probs(probs: &[f64], cloud: &PointCloud, cfg: &PostprocessConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let labels: Vec<u8> = probs.iter().map(|&p| (p >= cfg.threshold) as u8).collect();
    apply(&labels, cloud, cfg)
}
