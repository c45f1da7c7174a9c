//! Binary scan and label files.
//!
//! Scan files are packed little-endian `f32` records, either
//! `x y z intensity` (16 bytes) or `x y z intensity reflectivity` (20 bytes).
//! Label files are packed little-endian `u32` codes, one per point.
//! Provenance sidecars are one byte per point.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geom::{Point, PointCloud, Provenance, SensorMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanFormat {
    /// Four fields; reflectivity is filled in from intensity on read.
    Xyzi,
    #[default]
    Xyzir,
}

impl ScanFormat {
    pub fn record_len(self) -> usize {
        match self {
            ScanFormat::Xyzi => 16,
            ScanFormat::Xyzir => 20,
        }
    }
}

impl std::str::FromStr for ScanFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyzi" => Ok(ScanFormat::Xyzi),
            "xyzir" => Ok(ScanFormat::Xyzir),
            other => Err(Error::Config(format!(
                "unknown scan format `{other}` (expected xyzi or xyzir)"
            ))),
        }
    }
}

fn check_records(path: &Path, len: usize, record: usize) -> Result<()> {
    if !len.is_multiple_of(record) {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: (len - len % record) as u64,
        });
    }
    Ok(())
}

fn f32_at(buf: &[u8], off: usize) -> f64 {
    f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
}

pub fn decode_scan(path: &Path, bytes: &[u8], format: ScanFormat, meta: SensorMeta) -> Result<PointCloud> {
    let rec = format.record_len();
    check_records(path, bytes.len(), rec)?;
    let points = bytes
        .chunks_exact(rec)
        .map(|r| {
            let intensity = f32_at(r, 12);
            let reflectivity = match format {
                ScanFormat::Xyzi => intensity,
                ScanFormat::Xyzir => f32_at(r, 16),
            };
            Point::new(f32_at(r, 0), f32_at(r, 4), f32_at(r, 8), intensity, reflectivity)
        })
        .collect();
    Ok(PointCloud::new(points, meta))
}

pub fn read_scan(path: impl AsRef<Path>, format: ScanFormat, meta: SensorMeta) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_scan(path, &bytes, format, meta)
}

/// Serialize as XYZIR. Coordinates are narrowed to `f32`.
pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 20);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity, p.reflectivity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scan(cloud)).map_err(io_err(path))
}

pub fn read_label_codes(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    check_records(path, bytes.len(), 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Binary labels: 1 where the stored code is one of `snow_ids`.
pub fn read_labels(path: impl AsRef<Path>, snow_ids: &[u32]) -> Result<Vec<u8>> {
    Ok(read_label_codes(path)?
        .into_iter()
        .map(|c| snow_ids.contains(&c) as u8)
        .collect())
}

pub fn write_label_codes(codes: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = codes.iter().flat_map(|c| c.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

/// Binary labels written as codes 0 / 1.
pub fn write_labels(labels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let codes: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    write_label_codes(&codes, path)
}

pub fn write_provenance(prov: &[Provenance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = prov.iter().map(|p| p.code()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_provenance(path: impl AsRef<Path>) -> Result<Vec<Provenance>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            Provenance::from_code(b).ok_or_else(|| {
                Error::Contract(format!("{}: bad provenance code {b} at {i}", path.display()))
            })
        })
        .collect()
}
