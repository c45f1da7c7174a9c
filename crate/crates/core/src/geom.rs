//! Points, scans, labels and the spherical coordinate math shared by the
//! rest of the crate.
//!
//! Sensor frame: z up, origin at the optical centre. The ground plane sits at
//! `z = -mount_height_m`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Range beyond which a return cannot be a snow particle for the reference
/// sensor geometry.
pub const DEFAULT_SNOW_SENSE_LIMIT_M: f64 = 71.235;

/// Alternative post-processing range used for the short-range regime.
pub const SHORT_RANGE_LIMIT_M: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorMeta {
    pub mount_height_m: f64,
    pub channels: usize,
    pub horiz_steps: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub max_range_m: f64,
    pub snow_sense_limit_m: f64,
}

impl Default for SensorMeta {
    /// A 64-beam, 1024-column spinning sensor (65,536 returns per scan).
    fn default() -> Self {
        Self {
            mount_height_m: 1.8,
            channels: 64,
            horiz_steps: 1024,
            fov_up_deg: 16.6,
            fov_down_deg: -16.6,
            max_range_m: 120.0,
            snow_sense_limit_m: DEFAULT_SNOW_SENSE_LIMIT_M,
        }
    }
}

impl SensorMeta {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sensor: {m}")));
        if self.channels < 1 || self.horiz_steps < 1 {
            return bad("channels and horiz_steps must be >= 1");
        }
        if !(self.fov_up_deg > self.fov_down_deg) {
            return bad("fov_up_deg must exceed fov_down_deg");
        }
        if !(self.snow_sense_limit_m > 0.0 && self.snow_sense_limit_m <= self.max_range_m) {
            return bad("need 0 < snow_sense_limit_m <= max_range_m");
        }
        if !(self.mount_height_m > 0.0) {
            return bad("mount_height_m must be > 0");
        }
        Ok(())
    }

    /// z coordinate of the ground plane.
    pub fn ground_z(&self) -> f64 {
        -self.mount_height_m
    }
}

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Raw return strength.
    pub intensity: f64,
    /// Range-calibrated reflectance.
    pub reflectivity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64, reflectivity: f64) -> Self {
        Self { x, y, z, intensity, reflectivity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.intensity >= 0.0
            && self.reflectivity >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spherical {
    pub range: f64,
    /// In `[-pi, pi)`.
    pub azimuth: f64,
    pub elevation: f64,
}

pub fn to_spherical(p: &Point) -> Spherical {
    let range = p.range();
    if range == 0.0 {
        return Spherical { range: 0.0, azimuth: 0.0, elevation: 0.0 };
    }
    let mut azimuth = p.y.atan2(p.x);
    if azimuth >= PI {
        azimuth = -PI;
    }
    let elevation = (p.z / range).clamp(-1.0, 1.0).asin();
    Spherical { range, azimuth, elevation }
}

pub fn from_spherical(s: Spherical) -> [f64; 3] {
    let (se, ce) = s.elevation.sin_cos();
    let (sa, ca) = s.azimuth.sin_cos();
    [s.range * ce * ca, s.range * ce * sa, s.range * se]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub meta: SensorMeta,
    /// Ground truth, snow = 1.
    pub gt_labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, meta: SensorMeta) -> Self {
        Self { points, meta, gt_labels: None }
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(contract(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.gt_labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Why a point ended up with its label. Stored as one byte per point in
/// provenance sidecar files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum Provenance {
    #[default]
    None = 0,
    PreRange = 1,
    PreGround = 2,
    Cond1Snow = 3,
    Cond2Obj = 4,
    Cond3Obj = 5,
    Cond4Obj = 6,
}

impl Provenance {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use Provenance::*;
        Some(match code {
            0 => None,
            1 => PreRange,
            2 => PreGround,
            3 => Cond1Snow,
            4 => Cond2Obj,
            5 => Cond3Obj,
            6 => Cond4Obj,
            _ => return Option::None,
        })
    }
}

/// Per-point binary snow labels plus the provenance of each verdict.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSet {
    pub labels: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl LabelSet {
    /// Labels without a decision trail (baseline filters, network output):
    /// snow points carry `Cond1Snow`, everything else `None`.
    pub fn from_binary(labels: Vec<u8>) -> Self {
        let provenance = labels
            .iter()
            .map(|&l| if l == 1 { Provenance::Cond1Snow } else { Provenance::None })
            .collect();
        Self { labels, provenance }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn snow_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn snow_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == 1).then_some(i))
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.labels.len() != self.provenance.len() {
            return Err(contract("label and provenance lengths differ"));
        }
        for (i, (&l, &p)) in self.labels.iter().zip(&self.provenance).enumerate() {
            if l > 1 {
                return Err(contract(format!("label {l} at {i} is not binary")));
            }
            if l == 1 && p != Provenance::Cond1Snow {
                return Err(contract(format!("snow point {i} has provenance {p:?}")));
            }
        }
        Ok(())
    }
}
