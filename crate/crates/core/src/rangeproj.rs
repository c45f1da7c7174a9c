//! Spherical projection of a scan into a range image, and the inverse mapping
//! from per-pixel masks back to per-point values.
//!
//! Rows are linear in elevation over `[fov_down, fov_up]` (row 0 at the top),
//! columns linear in azimuth over `[-pi, pi)`. When several points land in one
//! pixel the nearest is kept and the rest go to an overflow list, so the
//! inverse map stays total.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::geom::{to_spherical, PointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub range: Vec<f64>,
    pub intensity: Vec<f64>,
    pub reflectivity: Vec<f64>,
    /// Point held by each pixel.
    pub index_map: Vec<Option<usize>>,
    pub valid: Vec<bool>,
    /// Pixel each point projected to (placed or not). `None` for zero-range
    /// points, which have no direction.
    pub point_pixel: Vec<Option<usize>>,
}

impl RangeImage {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn point_count(&self) -> usize {
        self.point_pixel.len()
    }
}

/// Bookkeeping of points that did not map cleanly onto their own pixel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectionReport {
    /// Points hidden behind a nearer point in the same pixel, ascending.
    pub overflow: Vec<usize>,
    /// Points outside the vertical field of view, clamped to an edge row.
    pub fov_clamped: Vec<usize>,
    /// Zero-range points, never placed.
    pub dropped: Vec<usize>,
}

/// Which pixel a direction falls in.
pub fn pixel_of(
    azimuth: f64,
    elevation_rad: f64,
    fov_up_deg: f64,
    fov_down_deg: f64,
    height: usize,
    width: usize,
) -> (usize, usize, bool) {
    let elev_deg = elevation_rad.to_degrees();
    let span = fov_up_deg - fov_down_deg;
    let row_f = ((fov_up_deg - elev_deg) / span * height as f64).floor();
    let outside = elev_deg > fov_up_deg || elev_deg < fov_down_deg;
    let row = row_f.clamp(0.0, (height - 1) as f64) as usize;
    let col_f = ((azimuth + std::f64::consts::PI) / std::f64::consts::TAU * width as f64).floor();
    let col = col_f.clamp(0.0, (width - 1) as f64) as usize;
    (row, col, outside)
}

pub fn project(cloud: &PointCloud, height: usize, width: usize) -> Result<(RangeImage, ProjectionReport)> {
    if height == 0 || width == 0 {
        return Err(contract(format!("image size {height}x{width} must be at least 1x1")));
    }
    let n = height * width;
    let meta = &cloud.meta;
    let mut img = RangeImage {
        height,
        width,
        range: vec![0.0; n],
        intensity: vec![0.0; n],
        reflectivity: vec![0.0; n],
        index_map: vec![None; n],
        valid: vec![false; n],
        point_pixel: vec![None; cloud.len()],
    };
    let mut report = ProjectionReport::default();
    let mut overflow = Vec::new();

    for (i, p) in cloud.points.iter().enumerate() {
        let s = to_spherical(p);
        if !(s.range > 0.0) {
            report.dropped.push(i);
            continue;
        }
        let (row, col, outside) =
            pixel_of(s.azimuth, s.elevation, meta.fov_up_deg, meta.fov_down_deg, height, width);
        if outside {
            report.fov_clamped.push(i);
        }
        let px = row * width + col;
        img.point_pixel[i] = Some(px);
        match img.index_map[px] {
            None => {
                img.index_map[px] = Some(i);
                img.range[px] = s.range;
            }
            Some(held) if s.range < img.range[px] => {
                overflow.push(held);
                img.index_map[px] = Some(i);
                img.range[px] = s.range;
            }
            Some(_) => overflow.push(i),
        }
    }
    for px in 0..n {
        if let Some(i) = img.index_map[px] {
            img.valid[px] = true;
            img.intensity[px] = cloud.points[i].intensity;
            img.reflectivity[px] = cloud.points[i].reflectivity;
        }
    }
    overflow.sort_unstable();
    report.overflow = overflow;
    Ok((img, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowPolicy {
    /// Hidden points take the value of the pixel that hides them.
    #[default]
    Inherit,
    /// Hidden points get 0.
    Clear,
}

/// Per-point values from a per-pixel mask. Every point receives exactly one
/// value; zero-range points always get 0.
pub fn unproject_mask(img: &RangeImage, mask: &[f64], policy: OverflowPolicy) -> Result<Vec<f64>> {
    if mask.len() != img.len() {
        return Err(contract(format!(
            "mask has {} pixels, image is {}x{}",
            mask.len(),
            img.height,
            img.width
        )));
    }
    Ok(img
        .point_pixel
        .iter()
        .enumerate()
        .map(|(i, px)| match *px {
            None => 0.0,
            Some(px) if img.index_map[px] == Some(i) => mask[px],
            Some(px) => match policy {
                OverflowPolicy::Inherit => mask[px],
                OverflowPolicy::Clear => 0.0,
            },
        })
        .collect())
}

/// Binary per-point labels: value >= `threshold` is snow.
pub fn unproject_labels(
    img: &RangeImage,
    mask: &[f64],
    threshold: f64,
    policy: OverflowPolicy,
) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(contract(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(unproject_mask(img, mask, policy)?
        .into_iter()
        .map(|p| (p >= threshold) as u8)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    MeanStd,
    MinMax,
}

/// Per-channel offset and scale, in range/intensity/reflectivity order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub kind: NormKind,
    pub offset: [f64; 3],
    pub scale: [f64; 3],
}

impl ChannelStats {
    /// Statistics over the valid pixels of all `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RangeImage>, kind: NormKind) -> Self {
        let images: Vec<&RangeImage> = images.into_iter().collect();
        let mut offset = [0.0; 3];
        let mut scale = [0.0; 3];
        for c in 0..3 {
            let vals = || {
                images.iter().flat_map(move |img| {
                    channel(img, c)
                        .iter()
                        .zip(&img.valid)
                        .filter_map(|(&v, &ok)| ok.then_some(v))
                })
            };
            let count = vals().count();
            if count == 0 {
                offset[c] = 0.0;
                scale[c] = 0.0;
                continue;
            }
            match kind {
                NormKind::MeanStd => {
                    let mean = vals().sum::<f64>() / count as f64;
                    let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
                    offset[c] = mean;
                    scale[c] = var.sqrt();
                }
                NormKind::MinMax => {
                    let lo = vals().fold(f64::INFINITY, f64::min);
                    let hi = vals().fold(f64::NEG_INFINITY, f64::max);
                    offset[c] = lo;
                    scale[c] = hi - lo;
                }
            }
        }
        Self { kind, offset, scale }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.offset.iter().chain(&self.scale).copied().collect()
    }

    pub fn from_slice(kind: NormKind, v: &[f64]) -> Option<Self> {
        (v.len() == 6).then(|| Self {
            kind,
            offset: [v[0], v[1], v[2]],
            scale: [v[3], v[4], v[5]],
        })
    }
}

pub fn channel(img: &RangeImage, c: usize) -> &[f64] {
    match c {
        0 => &img.range,
        1 => &img.intensity,
        2 => &img.reflectivity,
        _ => panic!("channel index {c} out of range"),
    }
}

/// Normalized image, channel-major `3 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub data: Vec<f64>,
    /// Channels whose scale was zero and were only shifted.
    pub passthrough: [bool; 3],
}

pub fn normalize_channels(img: &RangeImage, stats: &ChannelStats) -> Normalized {
    let n = img.len();
    let mut data = vec![0.0; 3 * n];
    let mut passthrough = [false; 3];
    for c in 0..3 {
        let scale = stats.scale[c];
        let flat = !(scale > 0.0) || !scale.is_finite();
        passthrough[c] = flat;
        let src = channel(img, c);
        let dst = &mut data[c * n..(c + 1) * n];
        for px in 0..n {
            if img.valid[px] {
                let v = src[px] - stats.offset[c];
                dst[px] = if flat { v } else { v / scale };
            }
        }
    }
    Normalized { data, passthrough }
}

/// Debug export: `RIMG`, then `u32` height, width and channel count, then one
/// four-byte tag per channel (`RNGE`, `INTS`, `REFL`), then `f32` data in
/// channel-major order. All integers and floats little-endian.
pub fn encode_image(img: &RangeImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 12 * img.len());
    out.extend_from_slice(b"RIMG");
    for v in [img.height as u32, img.width as u32, 3] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(b"RNGEINTSREFL");
    for c in 0..3 {
        for &v in channel(img, c) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}
