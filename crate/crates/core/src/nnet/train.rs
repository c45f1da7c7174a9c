//! Self-supervised training: sample preparation, momentum SGD steps and the
//! epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{NetConfig, Network, INPUT_CHANNELS};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};
use crate::geom::PointCloud;
use crate::losses::{build_graph, LossConfig, Targets, TermValues, UncertaintyMode};
use crate::pseudolabel::{generate_staged, PseudoLabelConfig};
use crate::rangeproj::{normalize_channels, ChannelStats, NormKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub seed: u64,
    pub norm: NormKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.9, epochs: 10, batch_size: 2, max_steps: 0, seed: 0, norm: NormKind::MeanStd }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training scan: normalized network input plus its loss targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Channel-major `3 x H x W`.
    pub input: Vec<f64>,
    pub targets: Targets,
}

/// Pseudo-labels every cloud, fits normalization statistics over the whole
/// set, and packs the samples.
pub fn prepare_dataset(
    clouds: &[PointCloud],
    pl: &PseudoLabelConfig,
    loss: &LossConfig,
    norm: NormKind,
) -> Result<(Vec<Sample>, ChannelStats)> {
    let staged = clouds.iter().map(|c| generate_staged(c, pl)).collect::<Result<Vec<_>>>()?;
    let stats = ChannelStats::from_images(staged.iter().map(|s| &s.image), norm);
    let samples = clouds
        .iter()
        .zip(&staged)
        .map(|(cloud, st)| {
            Ok(Sample {
                height: st.image.height,
                width: st.image.width,
                input: normalize_channels(&st.image, &stats).data,
                targets: Targets::build(cloud, st, pl, loss)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, stats))
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    /// Momentum buffers, one per parameter.
    pub velocity: Vec<Vec<f64>>,
    pub log_sigma: [f64; 5],
    pub log_sigma_velocity: [f64; 5],
    pub stats: ChannelStats,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &NetConfig, stats: ChannelStats, seed: u64) -> Result<Self> {
        let net = Network::new(cfg, seed)?;
        let velocity = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self { net, velocity, log_sigma: [0.0; 5], log_sigma_velocity: [0.0; 5], stats, epoch: 0, step: 0, seed })
    }
}

/// Per-epoch means of the loss terms, as written to the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub terms: [f64; 5],
    pub log_sigma: [f64; 5],
    pub total: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tL1\tL2\tL3\tL4\tL5\tlogsig1\tlogsig2\tlogsig3\tlogsig4\tlogsig5\ttotal";

    pub fn line(&self) -> String {
        let mut s = self.epoch.to_string();
        for v in self.terms.iter().chain(&self.log_sigma).chain([&self.total]) {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s
    }
}

fn stack_inputs(batch: &[&Sample]) -> Result<Tensor> {
    let (h, w) = (batch[0].height, batch[0].width);
    if batch.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(contract("all samples in a batch must share one image size"));
    }
    let mut data = Vec::with_capacity(batch.len() * INPUT_CHANNELS * h * w);
    for s in batch {
        data.extend_from_slice(&s.input);
    }
    Tensor::from_vec(&[batch.len(), INPUT_CHANNELS, h, w], data)
}

/// One forward/backward pass and momentum-SGD update over `batch`.
/// Nothing is modified when a loss term is non-finite.
pub fn train_step(state: &mut TrainState, batch: &[&Sample], loss: &LossConfig, cfg: &TrainConfig) -> Result<TermValues> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let learn_sigma = loss.uncertainty_mode == UncertaintyMode::Learned && state.epoch >= loss.uncertainty_start_epoch;
    let mut tape = Tape::new();
    let pv = state.net.bind(&mut tape, true);
    let ls: [Var; 5] = state.log_sigma.map(|s| tape.leaf(Tensor::scalar(s), learn_sigma));
    let x = tape.constant(stack_inputs(batch)?);
    let out = state.net.forward(&mut tape, &pv, x, true)?;
    let targets = Targets::concat(batch.iter().map(|s| &s.targets));
    let graph = build_graph(&mut tape, out.main, &out.aux, &targets, &ls, loss)?;
    let values = graph.values(&tape, &loss.lambda)?;
    let grads = tape.backward(graph.total)?;

    let (lr, mom) = (cfg.lr, cfg.momentum);
    for ((p, vel), &v) in state.net.params_mut().iter_mut().zip(&mut state.velocity).zip(&pv) {
        match grads.get(v) {
            Some(g) => {
                for ((w, m), gi) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                    *m = mom * *m + gi;
                    *w -= lr * *m;
                }
            }
            None => {
                for (w, m) in p.value.data_mut().iter_mut().zip(vel.iter_mut()) {
                    *m *= mom;
                    *w -= lr * *m;
                }
            }
        }
    }
    if learn_sigma {
        for i in 0..5 {
            let g = grads.get(ls[i]).map_or(0.0, |g| g[0]);
            state.log_sigma_velocity[i] = mom * state.log_sigma_velocity[i] + g;
            state.log_sigma[i] -= lr * state.log_sigma_velocity[i];
        }
    }
    state.net.update_running_stats(&out.batch_stats);
    state.step += 1;
    Ok(values)
}

/// Sample order of one epoch; depends only on the seed and epoch number.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Runs epochs from `state.epoch` up to `cfg.epochs`, or until
/// `cfg.max_steps` optimizer steps have been taken. `on_epoch` sees each
/// finished epoch.
pub fn train(
    state: &mut TrainState,
    samples: &[Sample],
    loss: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    loss.validate()?;
    if samples.is_empty() {
        return Err(contract("no training samples"));
    }
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs && (cfg.max_steps == 0 || state.step < cfg.max_steps) {
        let order = epoch_order(samples.len(), state.seed, state.epoch);
        let mut sums = [0.0; 5];
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps != 0 && state.step >= cfg.max_steps {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let v = train_step(state, &batch, loss, cfg)?;
            for i in 0..5 {
                sums[i] += v.terms[i];
            }
            total += v.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let log = EpochLog { epoch: state.epoch, terms: sums.map(|s| s / n), log_sigma: state.log_sigma, total: total / n };
        state.epoch += 1;
        on_epoch(&log, state);
        logs.push(log);
    }
    Ok(logs)
}
