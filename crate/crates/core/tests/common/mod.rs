//! Straight-line reference implementations. Nothing here uses the spatial
//! index or the library's projection code; every neighbourhood is an O(n^2)
//! scan and every pixel is resolved by looking at all points.

#![allow(dead_code, clippy::needless_range_loop)]

use desnow::pseudolabel::PseudoLabelConfig;
use desnow::PointCloud;

pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Points other than `skip` within `r` (boundary inclusive).
pub fn brute_count(points: &[[f64; 3]], q: [f64; 3], r: f64, skip: Option<usize>) -> usize {
    let r2 = r * r;
    (0..points.len()).filter(|&j| Some(j) != skip && sq_dist(q, points[j]) <= r2).count()
}

/// The `k` nearest points other than `skip`, ordered by distance then index.
pub fn brute_knn(points: &[[f64; 3]], q: [f64; 3], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> =
        (0..points.len()).filter(|&j| Some(j) != skip).map(|j| (sq_dist(q, points[j]), j)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d2, j)| (j, d2.sqrt())).collect()
}

fn norm(x: f64, y: f64, z: f64) -> f64 {
    (x * x + y * y + z * z).sqrt()
}

/// Row and column of a direction, or `None` for a zero-range return.
fn cell(x: f64, y: f64, z: f64, up: f64, down: f64, h: usize, w: usize) -> Option<(usize, usize)> {
    let r = norm(x, y, z);
    if r == 0.0 {
        return None;
    }
    let mut az = y.atan2(x);
    if az >= std::f64::consts::PI {
        az = -std::f64::consts::PI;
    }
    let elev = (z / r).clamp(-1.0, 1.0).asin().to_degrees();
    let row = ((up - elev) / (up - down) * h as f64).floor().max(0.0).min((h - 1) as f64) as usize;
    let col = ((az + std::f64::consts::PI) / std::f64::consts::TAU * w as f64).floor().max(0.0).min((w - 1) as f64)
        as usize;
    Some((row, col))
}

/// Every stage of the rule-based labeller, computed one point at a time.
pub struct Reference {
    pub eligible: Vec<bool>,
    pub cond1: Vec<bool>,
    pub cond2: Vec<bool>,
    pub cond3: Vec<bool>,
    pub cond4: Vec<bool>,
}

impl Reference {
    pub fn labels(&self) -> Vec<u8> {
        self.cond4.iter().map(|&b| b as u8).collect()
    }
}

pub fn reference_labels(cloud: &PointCloud, cfg: &PseudoLabelConfig) -> Reference {
    let m = &cloud.meta;
    let (h, w) = (m.channels, m.horiz_steps);
    let pts = &cloud.points;
    let n = pts.len();
    let xyz: Vec<[f64; 3]> = pts.iter().map(|p| [p.x, p.y, p.z]).collect();
    let range: Vec<f64> = pts.iter().map(|p| norm(p.x, p.y, p.z)).collect();
    let cells: Vec<Option<(usize, usize)>> =
        pts.iter().map(|p| cell(p.x, p.y, p.z, m.fov_up_deg, m.fov_down_deg, h, w)).collect();

    // Range image: the nearest point in each cell, earliest index on ties.
    let mut img: Vec<Vec<Option<f64>>> = vec![vec![None; w]; h];
    for r in 0..h {
        for c in 0..w {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if cells[i] == Some((r, c)) && best.is_none_or(|b| range[i] < range[b]) {
                    best = Some(i);
                }
            }
            img[r][c] = best.map(|b| range[b]);
        }
    }
    let at = |r: isize, c: isize| -> Option<f64> {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            None
        } else {
            img[r as usize][c as usize]
        }
    };

    // Sobel gradient over fully valid pairs, normalized by the weight used.
    let mut edge = vec![vec![false; w]; h];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let Some(centre) = at(r, c) else { continue };
            let mut gx = 0.0;
            let mut wx = 0.0;
            let mut gy = 0.0;
            let mut wy = 0.0;
            for (d, wt) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                if let (Some(a), Some(b)) = (at(r + d, c + 1), at(r + d, c - 1)) {
                    gx += wt * (a - b);
                    wx += wt;
                }
                if let (Some(a), Some(b)) = (at(r + 1, c + d), at(r - 1, c + d)) {
                    gy += wt * (a - b);
                    wy += wt;
                }
            }
            if wx > 0.0 {
                gx /= wx;
            }
            if wy > 0.0 {
                gy /= wy;
            }
            edge[r as usize][c as usize] =
                (gx * gx + gy * gy).sqrt() > cfg.edge_grad_threshold * (1.0 + cfg.edge_range_gain * centre);
        }
    }
    let k = cfg.edge_dilation_px as isize;
    let is_edge = |r: usize, c: usize| -> bool {
        for dr in -k..=k {
            for dc in -k..=k {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize && edge[rr as usize][cc as usize] {
                    return true;
                }
            }
        }
        false
    };

    let cutoff = -(m.mount_height_m - cfg.ground_margin_m);
    let mut out = Reference {
        eligible: vec![false; n],
        cond1: vec![false; n],
        cond2: vec![false; n],
        cond3: vec![false; n],
        cond4: vec![false; n],
    };
    for i in 0..n {
        let p = &pts[i];
        let d = range[i];
        out.eligible[i] = d > 0.0 && d <= cfg.snow_sense_limit_m && p.z > cutoff;
        if !out.eligible[i] {
            continue;
        }
        let threshold = cfg.i_min.max(cfg.i0 * (cfg.d0 / d).powf(cfg.exponent));
        out.cond1[i] = p.intensity <= threshold;
        out.cond2[i] = out.cond1[i] && p.reflectivity.abs() <= cfg.reflectivity_eps;
        out.cond3[i] = out.cond2[i] && !cells[i].is_some_and(|(r, c)| is_edge(r, c));
        if out.cond3[i] {
            let radius = cfg.density_r_min.max(cfg.density_c * d);
            let needed = (cfg.density_n_min as f64).max((cfg.density_a / d).round());
            out.cond4[i] = (brute_count(&xyz, xyz[i], radius, Some(i)) as f64) < needed;
        }
    }
    out
}
