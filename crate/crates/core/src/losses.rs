//! The five training losses and their uncertainty-weighted total.
//!
//! Per-pixel targets are prepared once per scan by [`Targets::build`]; the
//! loss functions then act on tape variables holding a batch of predictions
//! laid out like the concatenated targets.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geom::{PointCloud, DEFAULT_SNOW_SENSE_LIMIT_M};
use crate::nnet::tape::sigmoid;
use crate::nnet::{Tape, Tensor, Var};
use crate::pseudolabel::{intensity_threshold, PseudoLabelConfig, Stages};
use crate::spatial::NeighborIndex;

/// Lower bound on the k-NN distance in the sparsity term, metres.
pub const DIST_FLOOR_M: f64 = 1e-3;
pub const TERM_NAMES: [&str; 5] = ["intensity", "reflectivity", "edge", "sparsity", "penalty"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMode {
    /// All log-variances held at 0.
    #[default]
    Fixed,
    /// Log-variances are trained alongside the network.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Gates for intensity, reflectivity, edge, sparsity and penalty terms.
    pub lambda: [f64; 5],
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub d_max_m: f64,
    pub s_intensity: f64,
    pub s_range: f64,
    pub s_height: f64,
    pub sparsity_k: usize,
    pub uncertainty_mode: UncertaintyMode,
    /// First epoch at which learned log-variances start moving.
    pub uncertainty_start_epoch: usize,
    /// Restrict the reflectivity term to pixels that reached the
    /// reflectivity check (intensity candidates) instead of all valid pixels.
    pub region_scoped: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: [1.0; 5],
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            d_max_m: DEFAULT_SNOW_SENSE_LIMIT_M,
            s_intensity: 1.0,
            s_range: 1.0,
            s_height: 1.0,
            sparsity_k: 8,
            uncertainty_mode: UncertaintyMode::Fixed,
            uncertainty_start_epoch: 0,
            region_scoped: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || !self.lambda.iter().any(|&l| l > 0.0) {
            return Err(Error::Config(format!("loss.lambda must be nonnegative with one positive entry, got {:?}", self.lambda)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [("s_intensity", self.s_intensity), ("s_range", self.s_range), ("s_height", self.s_height), ("d_max_m", self.d_max_m)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("loss.{name} must be positive, got {v}")));
            }
        }
        if self.sparsity_k == 0 {
            return Err(Error::Config("loss.sparsity_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// One-sided violation: 0 below zero, `sigm(x) - 1/2` above, so points that
/// respect a constraint contribute nothing.
pub fn violation_ramp(x: f64) -> f64 {
    if x >= 0.0 {
        sigmoid(x) - 0.5
    } else {
        0.0
    }
}

/// Penalty integrand of a single return.
pub fn point_violation(
    range: f64,
    intensity: f64,
    z: f64,
    mount_height_m: f64,
    pl: &PseudoLabelConfig,
    cfg: &LossConfig,
) -> Result<f64> {
    let di = intensity - intensity_threshold(range, pl)?;
    let dd = range - cfg.d_max_m;
    let dz = -mount_height_m - z;
    Ok(cfg.alpha * violation_ramp(di / cfg.s_intensity)
        + cfg.beta * violation_ramp(dd / cfg.s_range)
        + cfg.gamma * violation_ramp(dz / cfg.s_height))
}

/// Per-pixel supervision for one scan, all vectors of image length except
/// `sparsity`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub valid: Vec<bool>,
    /// Pseudo-label of the pixel's point, 0 or 1.
    pub target: Vec<f64>,
    /// Pixels entering the reflectivity term.
    pub scope: Vec<bool>,
    pub edges: Vec<bool>,
    pub violation: Vec<f64>,
    /// `(pixel, dist_k)` per snow candidate that landed in the image.
    pub sparsity: Vec<(usize, f64)>,
}

impl Targets {
    pub fn build(cloud: &PointCloud, stages: &Stages, pl: &PseudoLabelConfig, cfg: &LossConfig) -> Result<Self> {
        let img = &stages.image;
        let n = img.len();
        let mut t = Targets {
            valid: img.valid.clone(),
            target: vec![0.0; n],
            scope: vec![false; n],
            edges: vec![false; n],
            violation: vec![0.0; n],
            sparsity: Vec::new(),
        };
        for px in 0..n {
            let Some(i) = img.index_map[px] else { continue };
            let p = &cloud.points[i];
            t.target[px] = stages.labels.labels[i] as f64;
            t.scope[px] = !cfg.region_scoped || stages.after_cond1[i];
            t.edges[px] = stages.edges[px];
            t.violation[px] = point_violation(p.range(), p.intensity, p.z, cloud.meta.mount_height_m, pl, cfg)?;
        }
        let index = NeighborIndex::from_cloud(cloud);
        for (i, &cand) in stages.after_cond1.iter().enumerate() {
            if !cand {
                continue;
            }
            if let (Some(px), Some(d)) = (img.point_pixel[i], index.mean_knn_distance(i, cfg.sparsity_k)) {
                t.sparsity.push((px, d.max(DIST_FLOOR_M)));
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Concatenates per-scan targets in batch order; sparsity pixels are
    /// shifted to batch-global indices.
    pub fn concat<'a>(items: impl IntoIterator<Item = &'a Targets>) -> Targets {
        let mut out =
            Targets { valid: vec![], target: vec![], scope: vec![], edges: vec![], violation: vec![], sparsity: vec![] };
        for t in items {
            let off = out.valid.len();
            out.valid.extend_from_slice(&t.valid);
            out.target.extend_from_slice(&t.target);
            out.scope.extend_from_slice(&t.scope);
            out.edges.extend_from_slice(&t.edges);
            out.violation.extend_from_slice(&t.violation);
            out.sparsity.extend(t.sparsity.iter().map(|&(px, d)| (px + off, d)));
        }
        out
    }
}

fn and(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x && *y).collect()
}

/// Mean binary cross-entropy against the pseudo-labels over valid pixels.
pub fn intensity_loss(tape: &mut Tape, probs: Var, t: &Targets) -> Result<Var> {
    tape.bce(probs, &t.target, &t.valid)
}

/// Same cross-entropy as [`intensity_loss`], restricted to `t.scope`.
pub fn reflectivity_loss(tape: &mut Tape, probs: Var, t: &Targets) -> Result<Var> {
    tape.bce(probs, &t.target, &and(&t.scope, &t.valid))
}

/// Mean `softplus(logit)` over edge pixels: snow predicted on object
/// boundaries is pushed back towards zero.
pub fn edge_loss(tape: &mut Tape, logits: Var, t: &Targets) -> Result<Var> {
    tape.softplus_mean(logits, &and(&t.edges, &t.valid))
}

/// `(1/N) * sum(w_i / dist_k_i)` with `w_i` the predicted probability at the
/// candidate's pixel. Plain numbers in, plain number out: the predictions
/// are read off the tape and never differentiated.
pub fn sparsity_loss(probs: &[f64], sparsity: &[(usize, f64)]) -> Result<f64> {
    if sparsity.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for &(px, d) in sparsity {
        let w = *probs.get(px).ok_or_else(|| contract(format!("sparsity pixel {px} outside prediction")))?;
        s += w / d.max(DIST_FLOOR_M);
    }
    Ok(s / sparsity.len() as f64)
}

/// Mean violation weighted by predicted snow mass over valid pixels.
pub fn penalty_loss(tape: &mut Tape, probs: Var, t: &Targets) -> Result<Var> {
    tape.weighted_mean(probs, &t.violation, &t.valid)
}

/// `sum_i lambda_i * (L_i / (2 exp(log_sigma_i)) + log_sigma_i / 2)`.
pub fn total_loss(tape: &mut Tape, terms: &[Var; 5], log_sigma: &[Var; 5], lambda: &[f64; 5]) -> Result<Var> {
    tape.uncertainty_weighted(terms, log_sigma, lambda)
}

/// Plain-number version of [`total_loss`].
pub fn total_value(terms: &[f64; 5], log_sigma: &[f64; 5], lambda: &[f64; 5]) -> f64 {
    (0..5)
        .filter(|&i| lambda[i] != 0.0)
        .map(|i| lambda[i] * (terms[i] / (2.0 * log_sigma[i].exp()) + log_sigma[i] / 2.0))
        .sum()
}

/// Values of one evaluation of every term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermValues {
    pub terms: [f64; 5],
    pub total: f64,
}

/// Every term on the tape for a batch of network outputs.
pub struct LossGraph {
    pub terms: [Var; 5],
    pub total: Var,
}

/// Builds all five terms and the total. `main` and `aux` are logits laid out
/// like `t`; auxiliary cross-entropies are averaged and added to the
/// intensity term.
pub fn build_graph(
    tape: &mut Tape,
    main: Var,
    aux: &[Var],
    t: &Targets,
    log_sigma: &[Var; 5],
    cfg: &LossConfig,
) -> Result<LossGraph> {
    if tape.value(main).len() != t.len() {
        return Err(contract(format!("prediction has {} pixels, targets {}", tape.value(main).len(), t.len())));
    }
    let probs = tape.sigmoid(main);
    let mut l1 = intensity_loss(tape, probs, t)?;
    if !aux.is_empty() {
        let mut parts = vec![l1];
        for &a in aux {
            let p = tape.sigmoid(a);
            parts.push(intensity_loss(tape, p, t)?);
        }
        let mut coef = vec![1.0 / aux.len() as f64; parts.len()];
        coef[0] = 1.0;
        l1 = tape.weighted_sum(&parts, &coef)?;
    }
    let l2 = reflectivity_loss(tape, probs, t)?;
    let l3 = edge_loss(tape, main, t)?;
    let l4_value = sparsity_loss(tape.value(probs).data(), &t.sparsity)?;
    let l4 = tape.constant(Tensor::scalar(l4_value));
    let l5 = penalty_loss(tape, probs, t)?;
    let terms = [l1, l2, l3, l4, l5];
    let total = total_loss(tape, &terms, log_sigma, &cfg.lambda)?;
    Ok(LossGraph { terms, total })
}

impl LossGraph {
    /// Reads the values and rejects non-finite active terms.
    pub fn values(&self, tape: &Tape, lambda: &[f64; 5]) -> Result<TermValues> {
        let mut terms = [0.0; 5];
        for i in 0..5 {
            terms[i] = tape.value(self.terms[i]).item();
            if lambda[i] != 0.0 && !terms[i].is_finite() {
                return Err(Error::NonFinite { term: TERM_NAMES[i], value: terms[i] });
            }
        }
        let total = tape.value(self.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite { term: "total", value: total });
        }
        Ok(TermValues { terms, total })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::gradcheck::max_relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn targets(n: usize, rng: &mut ChaCha8Rng) -> Targets {
        Targets {
            valid: (0..n).map(|_| rng.random_bool(0.9)).collect(),
            target: (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect(),
            scope: (0..n).map(|_| rng.random_bool(0.6)).collect(),
            edges: (0..n).map(|_| rng.random_bool(0.3)).collect(),
            violation: (0..n).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1.5) } else { 0.0 }).collect(),
            sparsity: (0..n / 3).map(|_| (rng.random_range(0..n), rng.random_range(0.01..3.0))).collect(),
        }
    }

    fn probs_var(tape: &mut Tape, p: &[f64]) -> Var {
        tape.constant(Tensor::from_vec(&[p.len()], p.to_vec()).unwrap())
    }

    #[test]
    fn bce_anchors() {
        let mut tape = Tape::new();
        let t = Targets { valid: vec![true; 4], target: vec![1.0, 0.0, 1.0, 0.0], ..targets(4, &mut ChaCha8Rng::seed_from_u64(0)) };
        let p = probs_var(&mut tape, &[0.5; 4]);
        let l = intensity_loss(&mut tape, p, &t).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let p = probs_var(&mut tape, &[1.0, 0.0, 1.0, 0.0]);
        let l = intensity_loss(&mut tape, p, &t).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn bce_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = targets(16, &mut rng);
            let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..=1.0)).collect();
            let mut tape = Tape::new();
            let pv = probs_var(&mut tape, &p);
            let l1 = intensity_loss(&mut tape, pv, &t).unwrap();
            let l2 = reflectivity_loss(&mut tape, pv, &t).unwrap();
            let oracle = |mask: &dyn Fn(usize) -> bool| {
                let (mut s, mut n) = (0.0, 0);
                for i in 0..16 {
                    if mask(i) {
                        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
                        s += -(t.target[i] * q.ln() + (1.0 - t.target[i]) * (1.0 - q).ln());
                        n += 1;
                    }
                }
                if n == 0 { 0.0 } else { s / n as f64 }
            };
            assert!((tape.value(l1).item() - oracle(&|i| t.valid[i])).abs() < 1e-12);
            assert!((tape.value(l2).item() - oracle(&|i| t.valid[i] && t.scope[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_loss_anchors_and_stability() {
        let mut tape = Tape::new();
        let mut t = targets(10, &mut ChaCha8Rng::seed_from_u64(1));
        t.valid = vec![true; 10];
        t.edges = vec![true; 10];
        let x = tape.constant(Tensor::full(&[10], -40.0));
        let l = edge_loss(&mut tape, x, &t).unwrap();
        assert!(tape.value(l).item() < 1e-15);
        let x = tape.constant(Tensor::zeros(&[10]));
        let l = edge_loss(&mut tape, x, &t).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let mut logits = vec![-40.0; 10];
        logits[3] = 40.0;
        let x = tape.constant(Tensor::from_vec(&[10], logits).unwrap());
        let l = edge_loss(&mut tape, x, &t).unwrap();
        assert!((tape.value(l).item() - 4.0).abs() < 1e-12);
        let x = tape.constant(Tensor::from_vec(&[2], vec![1e4, -1e4]).unwrap());
        let two = Targets { valid: vec![true; 2], edges: vec![true; 2], ..t.clone() };
        let l = edge_loss(&mut tape, x, &two).unwrap();
        assert!(tape.value(l).item().is_finite());
        let none = Targets { edges: vec![false; 10], ..t };
        let x = tape.constant(Tensor::zeros(&[10]));
        let l = edge_loss(&mut tape, x, &none).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn bce_finite_at_hard_probabilities() {
        let mut tape = Tape::new();
        let t = Targets { valid: vec![true; 2], target: vec![1.0, 0.0], ..targets(2, &mut ChaCha8Rng::seed_from_u64(1)) };
        let p = probs_var(&mut tape, &[0.0, 1.0]);
        let l = intensity_loss(&mut tape, p, &t).unwrap();
        assert!((tape.value(l).item() - -(1e-7f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn sparsity_anchors() {
        assert_eq!(sparsity_loss(&[0.7], &[]).unwrap(), 0.0);
        assert_eq!(sparsity_loss(&[1.0], &[(0, 2.0)]).unwrap(), 0.5);
        assert_eq!(sparsity_loss(&[1.0], &[(0, 0.0)]).unwrap(), 1000.0);
        assert!(sparsity_loss(&[1.0], &[(4, 1.0)]).is_err());
    }

    #[test]
    fn penalty_anchors() {
        let pl = PseudoLabelConfig::default();
        let cfg = LossConfig { alpha: 0.0, gamma: 0.0, beta: 1.0, ..LossConfig::default() };
        let v = point_violation(cfg.d_max_m + 1e3, 0.0, 0.0, 1.8, &pl, &cfg).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = point_violation(cfg.d_max_m - 1.0, 0.0, 0.0, 1.8, &pl, &cfg).unwrap();
        assert_eq!(v, 0.0);
        let mut tape = Tape::new();
        let t = Targets { valid: vec![true], violation: vec![v], ..targets(1, &mut ChaCha8Rng::seed_from_u64(1)) };
        let p = probs_var(&mut tape, &[1.0]);
        let l = penalty_loss(&mut tape, p, &t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let t = Targets { violation: vec![0.5], ..t };
        let l = penalty_loss(&mut tape, p, &t).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-8);
    }

    #[test]
    fn total_anchors() {
        let mut tape = Tape::new();
        let terms = [(); 5].map(|_| tape.constant(Tensor::scalar(1.0)));
        let zeros = [(); 5].map(|_| tape.constant(Tensor::scalar(0.0)));
        let tot = total_loss(&mut tape, &terms, &zeros, &[1.0; 5]).unwrap();
        assert_eq!(tape.value(tot).item(), 2.5);
        let l2 = [(); 5].map(|_| tape.constant(Tensor::scalar(2.0)));
        let ln2 = [(); 5].map(|_| tape.constant(Tensor::scalar(2f64.ln())));
        let tot = total_loss(&mut tape, &l2, &ln2, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((tape.value(tot).item() - 0.846_573_590_279_972_6).abs() < 1e-12);
        assert!((total_value(&[2.0; 5], &[2f64.ln(); 5], &[1.0, 0.0, 0.0, 0.0, 0.0]) - 0.8466).abs() < 1e-4);
    }

    #[test]
    fn gated_term_gets_no_gradient() {
        let mut tape = Tape::new();
        let terms = [(); 5].map(|_| tape.leaf(Tensor::scalar(1.3), true));
        let ls = [(); 5].map(|_| tape.leaf(Tensor::scalar(0.2), true));
        let tot = total_loss(&mut tape, &terms, &ls, &[1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let g = tape.backward(tot).unwrap();
        assert!(g.get(terms[2]).is_none() && g.get(ls[2]).is_none());
        assert!(g.get(terms[0]).is_some());
    }

    #[test]
    fn log_sigma_stationary_at_log_loss() {
        for l in [0.3, 1.0, 2.0, 7.5] {
            let mut tape = Tape::new();
            let terms = [(); 5].map(|_| tape.constant(Tensor::scalar(l)));
            let ls = [(); 5].map(|_| tape.leaf(Tensor::scalar(f64::ln(l)), true));
            let tot = total_loss(&mut tape, &terms, &ls, &[1.0; 5]).unwrap();
            let g = tape.backward(tot).unwrap();
            for v in ls {
                assert!(g.get(v).unwrap()[0].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = targets(32, &mut rng);
            // 4x8 logits, kept off the probability clamp.
            let logits = Tensor::from_vec(&[1, 1, 4, 8], (0..32).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
            type Term = fn(&mut Tape, Var, Var, &Targets) -> Result<Var>;
            let terms: [Term; 4] = [
                |tp, _, p, t| intensity_loss(tp, p, t),
                |tp, _, p, t| reflectivity_loss(tp, p, t),
                |tp, x, _, t| edge_loss(tp, x, t),
                |tp, _, p, t| penalty_loss(tp, p, t),
            ];
            for term in terms {
                let err = max_relative_error(std::slice::from_ref(&logits), 1e-4, |tp, v| {
                    let p = tp.sigmoid(v[0]);
                    term(tp, v[0], p, &t)
                })
                .unwrap();
                assert!(err <= 1e-4, "{err:e}");
            }
        }
    }
}
