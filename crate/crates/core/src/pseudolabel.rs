//! Physics-guided pseudo-labels.
//!
//! Preprocessing removes returns that cannot be snow (beyond the snow sensing
//! limit, on or below the ground plane). The remaining points pass four
//! refinement stages in order, each of which can only shrink the snow set:
//!
//! 1. intensity at or below a range-dependent threshold makes a candidate;
//! 2. a candidate with non-zero reflectivity is an object;
//! 3. a candidate on a range-image edge is an object;
//! 4. a candidate with too many neighbours for its range is an object.
//!
//! Survivors are the snow set.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geom::{LabelSet, PointCloud, Provenance, DEFAULT_SNOW_SENSE_LIMIT_M};
use crate::rangeproj::{project, RangeImage};
use crate::spatial::NeighborIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Intensity threshold at the reference range `d0`.
    pub i0: f64,
    pub d0: f64,
    /// Power-law decay of the threshold with range.
    pub exponent: f64,
    pub i_min: f64,
    /// `|reflectivity| <= eps` counts as zero.
    pub reflectivity_eps: f64,
    /// Base gradient magnitude (metres) for an edge.
    pub edge_grad_threshold: f64,
    /// Relative growth of the edge threshold per metre of range.
    pub edge_range_gain: f64,
    pub edge_dilation_px: usize,
    /// Neighbour search radius `max(r_min, c * range)`.
    pub density_r_min: f64,
    pub density_c: f64,
    /// Object if at least `max(n_min, round(a / range))` neighbours.
    pub density_n_min: usize,
    pub density_a: f64,
    pub snow_sense_limit_m: f64,
    pub ground_margin_m: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            i0: 10.0,
            d0: 10.0,
            exponent: 1.0,
            i_min: 1.0,
            reflectivity_eps: 0.0,
            edge_grad_threshold: 0.5,
            edge_range_gain: 0.05,
            edge_dilation_px: 0,
            density_r_min: 0.15,
            density_c: 0.03,
            density_n_min: 3,
            density_a: 30.0,
            snow_sense_limit_m: DEFAULT_SNOW_SENSE_LIMIT_M,
            ground_margin_m: 0.2,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.i0 > 0.0
            && self.d0 > 0.0
            && self.exponent >= 0.0
            && self.i_min >= 0.0
            && self.reflectivity_eps >= 0.0
            && self.density_r_min > 0.0
            && self.density_c >= 0.0
            && self.density_n_min >= 1
            && self.density_a >= 0.0
            && self.edge_grad_threshold >= 0.0
            && self.edge_range_gain >= 0.0
            && self.snow_sense_limit_m > 0.0
            && self.ground_margin_m >= 0.0;
        if !ok {
            return Err(Error::Config(format!("pseudolabel: parameter out of range in {self:?}")));
        }
        Ok(())
    }

    pub fn density_radius(&self, range: f64) -> f64 {
        self.density_r_min.max(self.density_c * range)
    }

    pub fn density_count(&self, range: f64) -> usize {
        let scaled = if range > 0.0 { (self.density_a / range).round() } else { f64::INFINITY };
        (self.density_n_min as f64).max(scaled).min(usize::MAX as f64) as usize
    }
}

/// `max(I_min, I0 * (d0 / range)^exponent)`.
pub fn intensity_threshold(range_m: f64, cfg: &PseudoLabelConfig) -> Result<f64> {
    if !(range_m > 0.0) {
        return Err(contract(format!("intensity threshold needs range > 0, got {range_m}")));
    }
    Ok(cfg.i_min.max(cfg.i0 * (cfg.d0 / range_m).powf(cfg.exponent)))
}

/// z at or below which a point counts as ground.
pub fn ground_cutoff(mount_height_m: f64, ground_margin_m: f64) -> f64 {
    -(mount_height_m - ground_margin_m)
}

/// Eligibility for snow candidacy. Ineligible points carry `PreRange` or
/// `PreGround` (the later check wins when both apply); zero-range returns are
/// treated as out of range.
pub fn preprocess(cloud: &PointCloud, cfg: &PseudoLabelConfig) -> (Vec<bool>, Vec<Provenance>) {
    let cutoff = ground_cutoff(cloud.meta.mount_height_m, cfg.ground_margin_m);
    let mut eligible = vec![true; cloud.len()];
    let mut prov = vec![Provenance::None; cloud.len()];
    for (i, p) in cloud.points.iter().enumerate() {
        let r = p.range();
        if r > cfg.snow_sense_limit_m || r == 0.0 {
            eligible[i] = false;
            prov[i] = Provenance::PreRange;
        }
        if p.z <= cutoff {
            eligible[i] = false;
            prov[i] = Provenance::PreGround;
        }
    }
    (eligible, prov)
}

pub fn cond1_intensity(cloud: &PointCloud, cfg: &PseudoLabelConfig, eligible: &[bool]) -> Result<Vec<bool>> {
    cloud
        .points
        .iter()
        .zip(eligible)
        .map(|(p, &ok)| Ok(ok && p.intensity <= intensity_threshold(p.range(), cfg)?))
        .collect()
}

/// Drops candidates with non-zero reflectivity. Returns the indices dropped.
pub fn cond2_reflectivity(cloud: &PointCloud, candidates: &mut [bool], cfg: &PseudoLabelConfig) -> Vec<usize> {
    let mut dropped = Vec::new();
    for (i, c) in candidates.iter_mut().enumerate() {
        if *c && cloud.points[i].reflectivity.abs() > cfg.reflectivity_eps {
            *c = false;
            dropped.push(i);
        }
    }
    dropped
}

/// Range-image edges. A pixel is an edge when its Sobel-weighted gradient on
/// the range channel, taken only over neighbour pairs that are both valid and
/// normalized by the weight used, exceeds
/// `edge_grad_threshold * (1 + edge_range_gain * range)`. The mask is then
/// dilated by `edge_dilation_px` (square neighbourhood).
pub fn edge_map(img: &RangeImage, cfg: &PseudoLabelConfig) -> Vec<bool> {
    let (h, w) = (img.height as isize, img.width as isize);
    let valid = |r: isize, c: isize| r >= 0 && r < h && c >= 0 && c < w && img.valid[(r * w + c) as usize];
    let range = |r: isize, c: isize| img.range[(r * w + c) as usize];
    const WEIGHTS: [(isize, f64); 3] = [(-1, 1.0), (0, 2.0), (1, 1.0)];

    let mut edges = vec![false; img.len()];
    for r in 0..h {
        for c in 0..w {
            if !valid(r, c) {
                continue;
            }
            let (mut gx, mut wx, mut gy, mut wy) = (0.0, 0.0, 0.0, 0.0);
            for &(d, wt) in &WEIGHTS {
                if valid(r + d, c + 1) && valid(r + d, c - 1) {
                    gx += wt * (range(r + d, c + 1) - range(r + d, c - 1));
                    wx += wt;
                }
                if valid(r + 1, c + d) && valid(r - 1, c + d) {
                    gy += wt * (range(r + 1, c + d) - range(r - 1, c + d));
                    wy += wt;
                }
            }
            if wx > 0.0 {
                gx /= wx;
            }
            if wy > 0.0 {
                gy /= wy;
            }
            let mag = (gx * gx + gy * gy).sqrt();
            let limit = cfg.edge_grad_threshold * (1.0 + cfg.edge_range_gain * range(r, c));
            edges[(r * w + c) as usize] = mag > limit;
        }
    }
    dilate(&edges, img.height, img.width, cfg.edge_dilation_px)
}

fn dilate(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut out = vec![false; mask.len()];
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            for rr in r.saturating_sub(radius)..=(r + radius).min(h - 1) {
                for cc in c.saturating_sub(radius)..=(c + radius).min(w - 1) {
                    out[rr * w + cc] = true;
                }
            }
        }
    }
    out
}

/// Drops candidates whose pixel (their own, or the occluding pixel for hidden
/// points) is an edge.
pub fn cond3_edge(candidates: &mut [bool], img: &RangeImage, edges: &[bool]) -> Vec<usize> {
    let mut dropped = Vec::new();
    for (i, c) in candidates.iter_mut().enumerate() {
        if *c && img.point_pixel[i].is_some_and(|px| edges[px]) {
            *c = false;
            dropped.push(i);
        }
    }
    dropped
}

/// Drops candidates sitting in a neighbourhood dense enough to be an object.
pub fn cond4_density(
    cloud: &PointCloud,
    candidates: &mut [bool],
    index: &NeighborIndex,
    cfg: &PseudoLabelConfig,
) -> Result<Vec<usize>> {
    let mut dropped = Vec::new();
    for (i, c) in candidates.iter_mut().enumerate() {
        if !*c {
            continue;
        }
        let range = cloud.points[i].range();
        if index.radius_count(i, cfg.density_radius(range))? >= cfg.density_count(range) {
            *c = false;
            dropped.push(i);
        }
    }
    Ok(dropped)
}

/// Every intermediate product of [`generate`].
#[derive(Debug, Clone)]
pub struct Stages {
    pub eligible: Vec<bool>,
    pub after_cond1: Vec<bool>,
    pub after_cond2: Vec<bool>,
    pub after_cond3: Vec<bool>,
    pub image: RangeImage,
    pub edges: Vec<bool>,
    pub labels: LabelSet,
}

/// Pseudo-labels at the sensor's native image resolution.
pub fn generate(cloud: &PointCloud, cfg: &PseudoLabelConfig) -> Result<LabelSet> {
    Ok(generate_staged(cloud, cfg)?.labels)
}

pub fn generate_staged(cloud: &PointCloud, cfg: &PseudoLabelConfig) -> Result<Stages> {
    let (img, _) = project(cloud, cloud.meta.channels, cloud.meta.horiz_steps)?;
    generate_with_image(cloud, img, cfg)
}

pub fn generate_with_image(cloud: &PointCloud, image: RangeImage, cfg: &PseudoLabelConfig) -> Result<Stages> {
    cfg.validate()?;
    if image.point_count() != cloud.len() {
        return Err(contract("range image was projected from a different cloud"));
    }
    let (eligible, mut prov) = preprocess(cloud, cfg);

    let mut cand = cond1_intensity(cloud, cfg, &eligible)?;
    for (i, &c) in cand.iter().enumerate() {
        if c {
            prov[i] = Provenance::Cond1Snow;
        }
    }
    let after_cond1 = cand.clone();

    for i in cond2_reflectivity(cloud, &mut cand, cfg) {
        prov[i] = Provenance::Cond2Obj;
    }
    let after_cond2 = cand.clone();

    let edges = edge_map(&image, cfg);
    for i in cond3_edge(&mut cand, &image, &edges) {
        prov[i] = Provenance::Cond3Obj;
    }
    let after_cond3 = cand.clone();

    let index = NeighborIndex::from_cloud(cloud);
    for i in cond4_density(cloud, &mut cand, &index, cfg)? {
        prov[i] = Provenance::Cond4Obj;
    }

    let labels = LabelSet { labels: cand.iter().map(|&c| c as u8).collect(), provenance: prov };
    Ok(Stages { eligible, after_cond1, after_cond2, after_cond3, image, edges, labels })
}
