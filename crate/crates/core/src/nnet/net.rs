//! U-Net and U-Net++ snow-mask networks built from residual blocks.
//!
//! Nodes are indexed `(i, j)`: `i` is the resolution level (0 = full, each
//! level halves both axes), `j` the position along the skip path. Column
//! `j = 0` is the encoder. A decoder node `(i, j)` consumes its same-level
//! predecessors `(i, k < j)` concatenated with the upsampled `(i + 1, j - 1)`.
//! U-Net keeps only the encoder and the anti-diagonal `i + j = depth`;
//! U-Net++ keeps every node with `i + j <= depth`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

pub const INPUT_CHANNELS: usize = 3;
/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unet,
    #[default]
    Unetpp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub variant: Variant,
    /// Number of 2x pooling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub deep_supervision: bool,
    /// Off replaces every batch norm by the identity.
    pub batch_norm: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { variant: Variant::Unetpp, depth: 4, base_channels: 8, deep_supervision: true, batch_norm: true }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 12 {
            return Err(Error::Config(format!("net.depth must be in 1..=12, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("net.base_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn node_exists(&self, i: usize, j: usize) -> bool {
        match self.variant {
            _ if j == 0 => i <= self.depth,
            Variant::Unet => i + j == self.depth,
            Variant::Unetpp => i + j <= self.depth,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Nodes in evaluation order: the encoder top-down, then decoder columns
    /// left to right.
    pub fn nodes(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<_> = (0..=self.depth).map(|i| (i, 0)).collect();
        for j in 1..=self.depth {
            for i in 0..=self.depth - j {
                if self.node_exists(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Top-row nodes that carry an auxiliary head under deep supervision.
    pub fn aux_nodes(&self) -> Vec<usize> {
        if !self.deep_supervision {
            return Vec::new();
        }
        (1..=self.depth).filter(|&j| self.node_exists(0, j)).collect()
    }

    fn node_inputs(&self, i: usize, j: usize) -> usize {
        if j == 0 {
            return if i == 0 { INPUT_CHANNELS } else { self.channels(i - 1) };
        }
        let same_level = (0..j).filter(|&k| self.node_exists(i, k)).count();
        same_level * self.channels(i) + self.channels(i + 1)
    }

    /// Input height and width must survive `depth` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(contract(format!("input {h}x{w} is not divisible by 2^{} = {m}", self.depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    buf: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    bn1: Option<Norm>,
    conv2: Conv,
    bn2: Option<Norm>,
    proj: Option<Conv>,
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct Output {
    /// Main head logits, `(B, 1, H, W)`.
    pub main: Var,
    /// Deep-supervision logits, one per top-row node, each `(B, 1, H, W)`.
    pub aux: Vec<Var>,
    /// Batch mean and variance per batch-norm layer (train mode only).
    pub batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    params: Vec<Param>,
    buffers: Vec<BnBuffers>,
    blocks: BTreeMap<(usize, usize), Block>,
    main_head: Conv,
    aux_heads: Vec<(usize, Conv)>,
}

struct Builder<'a> {
    params: Vec<Param>,
    buffers: Vec<BnBuffers>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let data = (0..cout * cin * k * k).map(|_| normal.sample(self.rng)).collect();
        let w = self.push(format!("{name}.weight"), Tensor::from_vec(&[cout, cin, k, k], data).unwrap());
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.buffers.push(BnBuffers { name: name.to_string(), mean: vec![0.0; c], var: vec![1.0; c] });
        Norm { gamma, beta, buf: self.buffers.len() - 1 }
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }
}

impl Network {
    /// Fresh network with He-normal convolution weights drawn from `seed`.
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: Vec::new(), buffers: Vec::new(), rng: &mut rng };
        let mut blocks = BTreeMap::new();
        for (i, j) in cfg.nodes() {
            let name = format!("x{i}_{j}");
            let (cin, cout) = (cfg.node_inputs(i, j), cfg.channels(i));
            let conv1 = b.conv(&format!("{name}.conv1"), cin, cout, 3);
            let bn1 = cfg.batch_norm.then(|| b.norm(&format!("{name}.bn1"), cout));
            let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3);
            let bn2 = cfg.batch_norm.then(|| b.norm(&format!("{name}.bn2"), cout));
            let proj = (cin != cout).then(|| b.conv(&format!("{name}.proj"), cin, cout, 1));
            blocks.insert((i, j), Block { conv1, bn1, conv2, bn2, proj });
        }
        let top = cfg.channels(0);
        let main_head = b.conv("head.main", top, 1, 1);
        let aux_heads = cfg.aux_nodes().into_iter().map(|j| (j, b.conv(&format!("head.aux{j}"), top, 1, 1))).collect();
        Ok(Self { cfg: cfg.clone(), params: b.params, buffers: b.buffers, blocks, main_head, aux_heads })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn buffers(&self) -> &[BnBuffers] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BnBuffers] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of prediction heads: main plus auxiliary.
    pub fn head_count(&self) -> usize {
        1 + self.aux_heads.len()
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Folds batch statistics from a train-mode pass into the running
    /// averages.
    pub fn update_running_stats(&mut self, stats: &[Option<(Vec<f64>, Vec<f64>)>]) {
        for (buf, s) in self.buffers.iter_mut().zip(stats) {
            if let Some((m, v)) = s {
                for c in 0..buf.mean.len() {
                    buf.mean[c] = (1.0 - BN_MOMENTUM) * buf.mean[c] + BN_MOMENTUM * m[c];
                    buf.var[c] = (1.0 - BN_MOMENTUM) * buf.var[c] + BN_MOMENTUM * v[c];
                }
            }
        }
    }

    /// Runs the network on `x: (B, 3, H, W)`. `pv` are the vars returned by
    /// [`Network::bind`] on the same tape. `train` selects batch statistics
    /// for batch norm.
    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var, train: bool) -> Result<Output> {
        let (_, c, h, w) = tape.value(x).dims4().ok_or_else(|| contract("network input must be 4-D"))?;
        if c != INPUT_CHANNELS {
            return Err(contract(format!("network expects {INPUT_CHANNELS} input channels, got {c}")));
        }
        self.cfg.check_input(h, w)?;
        if pv.len() != self.params.len() {
            return Err(contract("parameter vars do not belong to this network"));
        }
        let mut stats = vec![None; self.buffers.len()];
        let mut nodes: BTreeMap<(usize, usize), Var> = BTreeMap::new();
        for (i, j) in self.cfg.nodes() {
            let input = if j == 0 {
                if i == 0 {
                    x
                } else {
                    tape.maxpool2(nodes[&(i - 1, 0)])?
                }
            } else {
                let mut parts: Vec<Var> = (0..j).filter_map(|k| nodes.get(&(i, k)).copied()).collect();
                parts.push(tape.upsample2(nodes[&(i + 1, j - 1)])?);
                tape.concat(&parts)?
            };
            let out = self.block(tape, pv, &self.blocks[&(i, j)], input, train, &mut stats)?;
            nodes.insert((i, j), out);
        }
        let top = nodes[&(0, self.cfg.depth)];
        let main = self.conv(tape, pv, self.main_head, top)?;
        let mut aux = Vec::with_capacity(self.aux_heads.len());
        for &(j, head) in &self.aux_heads {
            aux.push(self.conv(tape, pv, head, nodes[&(0, j)])?);
        }
        Ok(Output { main, aux, batch_stats: stats })
    }

    fn conv(&self, tape: &mut Tape, pv: &[Var], c: Conv, x: Var) -> Result<Var> {
        tape.conv2d(x, pv[c.w], Some(pv[c.b]))
    }

    fn norm(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        n: Option<Norm>,
        x: Var,
        train: bool,
        stats: &mut [Option<(Vec<f64>, Vec<f64>)>],
    ) -> Result<Var> {
        let Some(n) = n else { return Ok(x) };
        if train {
            let (y, m, v) = tape.batch_norm_train(x, pv[n.gamma], pv[n.beta])?;
            stats[n.buf] = Some((m, v));
            Ok(y)
        } else {
            let buf = &self.buffers[n.buf];
            tape.batch_norm_eval(x, pv[n.gamma], pv[n.beta], &buf.mean, &buf.var)
        }
    }

    // relu(bn(conv(relu(bn(conv(x)))))) + proj(x)
    fn block(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        b: &Block,
        x: Var,
        train: bool,
        stats: &mut [Option<(Vec<f64>, Vec<f64>)>],
    ) -> Result<Var> {
        let y = self.conv(tape, pv, b.conv1, x)?;
        let y = self.norm(tape, pv, b.bn1, y, train, stats)?;
        let y = tape.relu(y);
        let y = self.conv(tape, pv, b.conv2, y)?;
        let y = self.norm(tape, pv, b.bn2, y, train, stats)?;
        let y = tape.relu(y);
        let skip = match b.proj {
            Some(p) => self.conv(tape, pv, p, x)?,
            None => x,
        };
        tape.add(y, skip)
    }

    /// Eval-mode logits of the main head for a batch, without gradients.
    pub fn predict_logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &pv, x, false)?;
        Ok(tape.value(out.main).clone())
    }
}
