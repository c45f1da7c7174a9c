//! Classical snow filters used as reference points: radius (ROR), statistical
//! (SOR), dynamic radius (DROR), low-intensity (LIOR) and its adaptive-threshold
//! stream variant (D-LIOR). Each produces a per-point snow labeling.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{LabelSet, PointCloud};
use crate::spatial::NeighborIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RorConfig {
    pub radius: f64,
    pub n_min: usize,
}

impl Default for RorConfig {
    fn default() -> Self {
        Self { radius: 0.5, n_min: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SorConfig {
    pub k: usize,
    pub std_mult: f64,
}

impl Default for SorConfig {
    fn default() -> Self {
        Self { k: 8, std_mult: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrorConfig {
    /// Horizontal angular resolution of the sensor.
    pub beam_angle_rad: f64,
    pub mult: f64,
    pub r_min: f64,
    pub n_min: usize,
}

impl Default for DrorConfig {
    fn default() -> Self {
        Self { beam_angle_rad: std::f64::consts::TAU / 1024.0, mult: 3.0, r_min: 0.04, n_min: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiorConfig {
    pub intensity_fixed: f64,
    pub ris_radius: f64,
    pub ris_n_min: usize,
}

impl Default for LiorConfig {
    fn default() -> Self {
        Self { intensity_fixed: 8.0, ris_radius: 0.3, ris_n_min: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DliorConfig {
    pub percentile: f64,
    pub window_scans: usize,
    pub floor_intensity: f64,
    pub ceil_intensity: f64,
}

impl Default for DliorConfig {
    fn default() -> Self {
        Self { percentile: 90.0, window_scans: 3, floor_intensity: 2.0, ceil_intensity: 20.0 }
    }
}

fn invalid(msg: String) -> Error {
    Error::Config(msg)
}

impl RorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.n_min < 1 {
            return Err(invalid(format!("ror: need radius > 0 and n_min >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl SorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || !self.std_mult.is_finite() {
            return Err(invalid(format!("sor: need k >= 1 and finite std_mult, got {self:?}")));
        }
        Ok(())
    }
}

impl DrorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.beam_angle_rad > 0.0 && self.mult > 0.0) || self.n_min < 1 {
            return Err(invalid(format!("dror: radii and factors must be > 0, n_min >= 1, got {self:?}")));
        }
        Ok(())
    }

    /// Search radius for a point at `range` metres.
    pub fn radius_at(&self, range: f64) -> f64 {
        self.r_min.max(self.mult * range * self.beam_angle_rad)
    }
}

impl LiorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ris_radius > 0.0) || self.ris_n_min < 1 {
            return Err(invalid(format!("lior: need ris_radius > 0 and ris_n_min >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl DliorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 100.0)
            || self.floor_intensity > self.ceil_intensity
            || self.window_scans < 1
        {
            return Err(invalid(format!(
                "dlior: need percentile in (0,100), floor <= ceil, window >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn ror(cloud: &PointCloud, cfg: &RorConfig) -> Result<LabelSet> {
    cfg.validate()?;
    let index = NeighborIndex::from_cloud(cloud);
    let labels = (0..cloud.len())
        .map(|i| Ok((index.radius_count(i, cfg.radius)? < cfg.n_min) as u8))
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabelSet::from_binary(labels))
}

pub fn sor(cloud: &PointCloud, cfg: &SorConfig) -> Result<LabelSet> {
    cfg.validate()?;
    let n = cloud.len();
    if n < 2 {
        return Ok(LabelSet::from_binary(vec![0; n]));
    }
    let index = NeighborIndex::from_cloud(cloud);
    let d: Vec<f64> = (0..n).map(|i| index.mean_knn_distance(i, cfg.k).unwrap_or(0.0)).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let std = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    let limit = mean + cfg.std_mult * std;
    Ok(LabelSet::from_binary(d.iter().map(|&di| (di > limit) as u8).collect()))
}

pub fn dror(cloud: &PointCloud, cfg: &DrorConfig) -> Result<LabelSet> {
    cfg.validate()?;
    let index = NeighborIndex::from_cloud(cloud);
    let labels = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| Ok((index.radius_count(i, cfg.radius_at(p.range()))? < cfg.n_min) as u8))
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabelSet::from_binary(labels))
}

/// Low-intensity points are snow unless radius-inlier saving finds them in a
/// dense neighbourhood.
pub fn lior(cloud: &PointCloud, cfg: &LiorConfig) -> Result<LabelSet> {
    cfg.validate()?;
    let index = NeighborIndex::from_cloud(cloud);
    lior_with_threshold(cloud, &index, cfg.intensity_fixed, cfg)
}

/// Stage 1 of LIOR only: the snow set before radius-inlier saving.
pub fn lior_intensity_stage(cloud: &PointCloud, threshold: f64) -> Vec<u8> {
    cloud.points.iter().map(|p| (p.intensity <= threshold) as u8).collect()
}

fn lior_with_threshold(cloud: &PointCloud, index: &NeighborIndex, threshold: f64, cfg: &LiorConfig) -> Result<LabelSet> {
    let mut labels = lior_intensity_stage(cloud, threshold);
    for (i, l) in labels.iter_mut().enumerate() {
        if *l == 1 && index.radius_count(i, cfg.ris_radius)? >= cfg.ris_n_min {
            *l = 0;
        }
    }
    Ok(LabelSet::from_binary(labels))
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// D-LIOR over a temporally ordered stream of scans. The intensity threshold
/// for each scan is a clamped percentile of the intensities of snow found in
/// the preceding window; the first scan uses the fixed LIOR threshold.
#[derive(Debug, Clone)]
pub struct DliorStream {
    lior: LiorConfig,
    cfg: DliorConfig,
    history: VecDeque<Vec<f64>>,
    scans_seen: usize,
}

impl DliorStream {
    pub fn new(lior: LiorConfig, cfg: DliorConfig) -> Result<Self> {
        lior.validate()?;
        cfg.validate()?;
        Ok(Self { lior, cfg, history: VecDeque::new(), scans_seen: 0 })
    }

    /// Threshold the next scan will use.
    pub fn next_threshold(&self) -> f64 {
        if self.scans_seen == 0 {
            return self.lior.intensity_fixed;
        }
        let window: Vec<f64> = self.history.iter().flatten().copied().collect();
        match percentile(&window, self.cfg.percentile) {
            Some(p) => p.clamp(self.cfg.floor_intensity, self.cfg.ceil_intensity),
            None => self.cfg.floor_intensity,
        }
    }

    /// Label one scan; returns the labels and the threshold that was used.
    pub fn process(&mut self, cloud: &PointCloud) -> Result<(LabelSet, f64)> {
        let threshold = self.next_threshold();
        let index = NeighborIndex::from_cloud(cloud);
        let labels = lior_with_threshold(cloud, &index, threshold, &self.lior)?;
        let snow: Vec<f64> = labels.snow_indices().into_iter().map(|i| cloud.points[i].intensity).collect();
        self.history.push_back(snow);
        while self.history.len() > self.cfg.window_scans {
            self.history.pop_front();
        }
        self.scans_seen += 1;
        Ok((labels, threshold))
    }
}

pub fn dlior<'a>(
    scans: impl IntoIterator<Item = &'a PointCloud>,
    lior: &LiorConfig,
    cfg: &DliorConfig,
) -> Result<Vec<LabelSet>> {
    let mut stream = DliorStream::new(*lior, *cfg)?;
    scans.into_iter().map(|c| stream.process(c).map(|(l, _)| l)).collect()
}
