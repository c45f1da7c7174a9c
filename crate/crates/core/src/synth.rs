//! Deterministic synthetic snowy scenes with exact ground truth.
//!
//! Solid surfaces (ground, boxes, an optional enclosing room) are sampled by
//! casting one ray per range-image pixel, so object returns form dense
//! patches in the image. Snow flakes are scattered through free space.
//!
//! Return model: a surface of reflectance `rho` at range `d` reports
//! reflectivity `rho` and intensity `100 * rho * 10 / d`. Flakes report zero
//! reflectivity and an intensity that is a fixed fraction of a configurable
//! threshold curve `max(i_min, i0 * (d0 / d)^exponent)`.
//!
//! In the separable regime each flake is placed so that its pixel and the
//! eight around it hold no other return and no other point lies within
//! `flake_clearance_m`; with the curve set to the pseudo-labeler's intensity
//! threshold every flake then passes all four labeling rules. The overlap
//! regime drops these constraints and seeds part of the snow right next to
//! object surfaces.
//!
//! Every coordinate and channel is rounded to `f32` so that scans survive a
//! round trip through the on-disk format unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{to_spherical, Point, PointCloud, SensorMeta};
use crate::rangeproj::pixel_of;
use crate::spatial::{dist2, NeighborIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    Separable,
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub seed: u64,
    /// Taken from the caller's sensor settings, not from config files.
    #[serde(skip)]
    pub sensor: SensorMeta,
    pub ground: bool,
    /// Ground returns beyond this range are lost (grazing incidence).
    pub ground_max_range_m: f64,
    /// Radius of a cylindrical room with a ceiling; 0 for open sky.
    pub room_radius_m: f64,
    pub room_height_m: f64,
    pub boxes: usize,
    pub box_distance_m: [f64; 2],
    pub box_size_m: [f64; 2],
    pub box_height_m: [f64; 2],
    /// Surface reflectance of solid objects, drawn once per object.
    pub object_reflectivity: [f64; 2],
    pub snow_count: usize,
    /// Horizontal distance band of flakes from the sensor.
    pub snow_distance_m: [f64; 2],
    /// Height band of flakes relative to the sensor.
    pub snow_z_m: [f64; 2],
    /// Flake intensity as a fraction of the threshold curve.
    pub snow_intensity_frac: [f64; 2],
    pub curve_i0: f64,
    pub curve_d0: f64,
    pub curve_exponent: f64,
    pub curve_i_min: f64,
    pub regime: Regime,
    /// Minimum distance from a flake to any other point (separable regime).
    pub flake_clearance_m: f64,
    /// Share of flakes seeded next to object surfaces (overlap regime).
    pub overlap_fraction: f64,
    /// Probability that a surface return goes missing.
    pub dropout: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl SceneParams {
    /// 16-beam, 256-column sensor: a 16x256 native range image.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            sensor: SensorMeta { channels: 16, horiz_steps: 256, ..SensorMeta::default() },
            ground: true,
            ground_max_range_m: 40.0,
            room_radius_m: 0.0,
            room_height_m: 6.0,
            boxes: 6,
            box_distance_m: [6.0, 25.0],
            box_size_m: [1.0, 4.0],
            box_height_m: [1.0, 4.0],
            object_reflectivity: [0.05, 0.9],
            snow_count: 80,
            snow_distance_m: [2.0, 20.0],
            snow_z_m: [-1.2, 4.0],
            snow_intensity_frac: [0.05, 0.8],
            curve_i0: 10.0,
            curve_d0: 10.0,
            curve_exponent: 1.0,
            curve_i_min: 1.0,
            regime: Regime::Separable,
            flake_clearance_m: 1.0,
            overlap_fraction: 0.5,
            dropout: 0.0,
        }
    }

    /// Full-size 64x1024 scan inside a room: every beam returns, so the scan
    /// holds exactly 65,536 surface points plus the snow.
    pub fn enclosed(seed: u64) -> Self {
        Self {
            sensor: SensorMeta::default(),
            ground_max_range_m: 120.0,
            room_radius_m: 30.0,
            boxes: 12,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let band = |name: &str, b: [f64; 2], lo: f64| {
            if b[0].is_finite() && b[1].is_finite() && lo <= b[0] && b[0] <= b[1] {
                Ok(())
            } else {
                Err(Error::Config(format!("synth.{name} must be an ordered band >= {lo}, got {b:?}")))
            }
        };
        band("box_distance_m", self.box_distance_m, 0.0)?;
        band("box_size_m", self.box_size_m, 0.0)?;
        band("box_height_m", self.box_height_m, 0.0)?;
        band("snow_distance_m", self.snow_distance_m, 0.0)?;
        band("snow_z_m", self.snow_z_m, f64::NEG_INFINITY)?;
        band("snow_intensity_frac", self.snow_intensity_frac, 0.0)?;
        if self.object_reflectivity[0] <= 0.0 || self.object_reflectivity[0] > self.object_reflectivity[1] {
            return Err(Error::Config("synth.object_reflectivity must be a band above zero".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config("synth.dropout and synth.overlap_fraction must be in [0, 1]".into()));
        }
        if !(self.curve_i0 > 0.0 && self.curve_d0 > 0.0 && self.curve_i_min >= 0.0) {
            return Err(Error::Config("synth curve parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn curve(&self, range: f64) -> f64 {
        self.curve_i_min.max(self.curve_i0 * (self.curve_d0 / range).powf(self.curve_exponent))
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
    rho: f64,
}

/// Entry distance of the ray `t * dir` into the box, if any.
fn ray_box(dir: [f64; 3], b: &Aabb) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if 0.0 < b.lo[a] || 0.0 > b.hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = (b.lo[a] / dir[a], b.hi[a] / dir[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn surface_point(p: [f64; 3], rho: f64) -> Point {
    let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    Point::new(round32(p[0]), round32(p[1]), round32(p[2]), round32(100.0 * rho * 10.0 / d), round32(rho))
}

/// A scene; `gt_labels` marks flakes with 1.
pub fn generate_scene(params: &SceneParams) -> Result<PointCloud> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let m = params.sensor;
    let (h, w) = (m.channels, m.horiz_steps);
    let ground_z = m.ground_z();

    let boxes: Vec<Aabb> = (0..params.boxes)
        .map(|_| {
            let dist = rng.random_range(params.box_distance_m[0]..=params.box_distance_m[1]);
            let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let sx = rng.random_range(params.box_size_m[0]..=params.box_size_m[1]) / 2.0;
            let sy = rng.random_range(params.box_size_m[0]..=params.box_size_m[1]) / 2.0;
            let top = ground_z + rng.random_range(params.box_height_m[0]..=params.box_height_m[1]);
            let (cx, cy) = (dist * az.cos(), dist * az.sin());
            let rho = rng.random_range(params.object_reflectivity[0]..=params.object_reflectivity[1]);
            Aabb { lo: [cx - sx, cy - sy, ground_z], hi: [cx + sx, cy + sy, top], rho }
        })
        .collect();
    let ground_rho = rng.random_range(params.object_reflectivity[0]..=params.object_reflectivity[1]);
    let room_rho = rng.random_range(params.object_reflectivity[0]..=params.object_reflectivity[1]);

    let mut points = Vec::new();
    let mut occupied = vec![false; h * w];
    let span = m.fov_up_deg - m.fov_down_deg;
    for r in 0..h {
        let elev = (m.fov_up_deg - (r as f64 + 0.5) / h as f64 * span).to_radians();
        for c in 0..w {
            let az = (c as f64 + 0.5) / w as f64 * std::f64::consts::TAU - std::f64::consts::PI;
            let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let mut best: Option<(f64, f64)> = None;
            let mut consider = |t: f64, rho: f64, limit: f64| {
                if t > 0.0 && t <= limit && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, rho));
                }
            };
            if params.ground && dir[2] < 0.0 {
                consider(ground_z / dir[2], ground_rho, params.ground_max_range_m);
            }
            for b in &boxes {
                if let Some(t) = ray_box(dir, b) {
                    consider(t, b.rho, m.max_range_m);
                }
            }
            if params.room_radius_m > 0.0 {
                let horiz = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
                if horiz > 1e-12 {
                    consider(params.room_radius_m / horiz, room_rho, m.max_range_m);
                }
                if dir[2] > 0.0 {
                    consider((ground_z + params.room_height_m) / dir[2], room_rho, m.max_range_m);
                }
            }
            let Some((t, rho)) = best else { continue };
            if params.dropout > 0.0 && rng.random_bool(params.dropout) {
                continue;
            }
            points.push(surface_point([t * dir[0], t * dir[1], t * dir[2]], rho));
            occupied[r * w + c] = true;
        }
    }
    let surface_count = points.len();
    let index = NeighborIndex::build(&points.iter().map(|p| p.xyz()).collect::<Vec<_>>());

    let mut flakes: Vec<Point> = Vec::new();
    let attempts = 200 * params.snow_count;
    let clearance2 = params.flake_clearance_m * params.flake_clearance_m;
    for _ in 0..attempts {
        if flakes.len() == params.snow_count {
            break;
        }
        let near_object = params.regime == Regime::Overlap
            && surface_count > 0
            && rng.random_bool(params.overlap_fraction);
        let xyz = if near_object {
            let anchor = points[rng.random_range(0..surface_count)].xyz();
            let mut q = anchor;
            for v in &mut q {
                *v += rng.random_range(-0.3..0.3);
            }
            q
        } else {
            let d = rng.random_range(params.snow_distance_m[0]..=params.snow_distance_m[1]);
            let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let z = rng.random_range(params.snow_z_m[0]..=params.snow_z_m[1]);
            [d * az.cos(), d * az.sin(), z]
        };
        let frac = rng.random_range(params.snow_intensity_frac[0]..=params.snow_intensity_frac[1]);
        let mut p = Point::new(round32(xyz[0]), round32(xyz[1]), round32(xyz[2]), 0.0, 0.0);
        let range = p.range();
        if !(range > 0.0) || p.z <= ground_z || range > m.max_range_m {
            continue;
        }
        p.intensity = round32(frac * params.curve(range));
        let s = to_spherical(&p);
        let (row, col, outside) = pixel_of(s.azimuth, s.elevation, m.fov_up_deg, m.fov_down_deg, h, w);
        if outside {
            continue;
        }
        if params.regime == Regime::Separable {
            let crowded = (row.saturating_sub(1)..=(row + 1).min(h - 1))
                .any(|rr| (col as isize - 1..=col as isize + 1).any(|cc| occupied[rr * w + cc.rem_euclid(w as isize) as usize]));
            if crowded
                || index.count_near(p.xyz(), params.flake_clearance_m)? > 0
                || flakes.iter().any(|f| dist2(&f.xyz(), &p.xyz()) <= clearance2)
            {
                continue;
            }
        }
        occupied[row * w + col] = true;
        flakes.push(p);
    }

    let mut labels = vec![0u8; surface_count];
    labels.resize(surface_count + flakes.len(), 1);
    points.extend(flakes);
    PointCloud::new(points, m).with_labels(labels)
}
