//! Checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic  b"DSNWCKPT"
//! u32    format version
//! u64    architecture fingerprint
//! u32 + bytes   network config line, e.g. "variant=unetpp depth=4 base=8 ds=1 bn=1"
//! u64 x3        epoch, step, seed
//! u32    blob count, then per blob:
//!        u32 + bytes name, u32 rank, u64 dims[rank], f64 payload
//! ```
//!
//! Blobs hold parameters under their own names plus `bn/<layer>/mean`,
//! `bn/<layer>/var`, `velocity/<param>`, `log_sigma`, `log_sigma_velocity`
//! and `norm/<kind>` (offsets then scales).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::net::{NetConfig, Network, Variant};
use super::tensor::Tensor;
use super::train::TrainState;
use crate::error::{io_err, Error, Result};
use crate::rangeproj::{ChannelStats, NormKind};

const MAGIC: &[u8; 8] = b"DSNWCKPT";
pub const VERSION: u32 = 1;

fn config_line(cfg: &NetConfig) -> String {
    let variant = match cfg.variant {
        Variant::Unet => "unet",
        Variant::Unetpp => "unetpp",
    };
    format!(
        "variant={variant} depth={} base={} ds={} bn={}",
        cfg.depth, cfg.base_channels, cfg.deep_supervision as u8, cfg.batch_norm as u8
    )
}

fn parse_config_line(line: &str) -> Result<NetConfig> {
    let bad = || Error::Checkpoint(format!("malformed network config line {line:?}"));
    let mut cfg = NetConfig::default();
    for kv in line.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(bad)?;
        match k {
            "variant" => {
                cfg.variant = match v {
                    "unet" => Variant::Unet,
                    "unetpp" => Variant::Unetpp,
                    _ => return Err(bad()),
                }
            }
            "depth" => cfg.depth = v.parse().map_err(|_| bad())?,
            "base" => cfg.base_channels = v.parse().map_err(|_| bad())?,
            "ds" => cfg.deep_supervision = v == "1",
            "bn" => cfg.batch_norm = v == "1",
            _ => return Err(bad()),
        }
    }
    Ok(cfg)
}

/// FNV-1a over the config line and every parameter's name and shape.
pub fn fingerprint(net: &Network) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    feed(config_line(net.config()).as_bytes());
    for p in net.params() {
        feed(p.name.as_bytes());
        for &d in p.value.shape() {
            feed(&(d as u64).to_le_bytes());
        }
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn blob(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.str(name);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(fingerprint(&state.net));
    w.str(&config_line(state.net.config()));
    w.u64(state.epoch as u64);
    w.u64(state.step as u64);
    w.u64(state.seed);
    let net = &state.net;
    let count = 2 * net.params().len() + 2 * net.buffers().len() + 3;
    w.u32(count as u32);
    for p in net.params() {
        w.blob(&p.name, p.value.shape(), p.value.data());
    }
    for b in net.buffers() {
        w.blob(&format!("bn/{}/mean", b.name), &[b.mean.len()], &b.mean);
        w.blob(&format!("bn/{}/var", b.name), &[b.var.len()], &b.var);
    }
    for (p, v) in net.params().iter().zip(&state.velocity) {
        w.blob(&format!("velocity/{}", p.name), p.value.shape(), v);
    }
    w.blob("log_sigma", &[5], &state.log_sigma);
    w.blob("log_sigma_velocity", &[5], &state.log_sigma_velocity);
    let kind = match state.stats.kind {
        NormKind::MeanStd => "meanstd",
        NormKind::MinMax => "minmax",
    };
    w.blob(&format!("norm/{kind}"), &[6], &state.stats.to_vec());
    w.0
}

pub fn decode(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let stored_fp = r.u64()?;
    let cfg = parse_config_line(&r.str()?)?;
    let (epoch, step, seed) = (r.u64()? as usize, r.u64()? as usize, r.u64()?);
    let mut blobs: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        blobs.insert(name, (shape, data));
    }

    let mut state = TrainState::new(&cfg, ChannelStats { kind: NormKind::MeanStd, offset: [0.0; 3], scale: [0.0; 3] }, seed)?;
    if fingerprint(&state.net) != stored_fp {
        return Err(Error::Checkpoint("architecture fingerprint does not match the stored config".into()));
    }
    let mut get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let (s, d) = blobs.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing blob `{name}`")))?;
        if s != shape {
            return Err(Error::Checkpoint(format!("blob `{name}` has shape {s:?}, expected {shape:?}")));
        }
        Ok(d)
    };
    for p in state.net.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::from_vec(&shape, get(&p.name, &shape)?)?;
    }
    for b in state.net.buffers_mut() {
        b.mean = get(&format!("bn/{}/mean", b.name), &[b.mean.len()])?;
        b.var = get(&format!("bn/{}/var", b.name), &[b.var.len()])?;
    }
    let shapes: Vec<(String, Vec<usize>)> =
        state.net.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    for (v, (name, shape)) in state.velocity.iter_mut().zip(&shapes) {
        *v = get(&format!("velocity/{name}"), shape)?;
    }
    state.log_sigma = get("log_sigma", &[5])?.try_into().unwrap();
    state.log_sigma_velocity = get("log_sigma_velocity", &[5])?.try_into().unwrap();
    let (kind, stats) = if let Ok(v) = get("norm/meanstd", &[6]) {
        (NormKind::MeanStd, v)
    } else {
        (NormKind::MinMax, get("norm/minmax", &[6])?)
    };
    state.stats = ChannelStats::from_slice(kind, &stats).unwrap();
    state.epoch = epoch;
    state.step = step;
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected blob `{extra}`")));
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode(state)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

/// Loads a checkpoint and insists it was trained with network config `cfg`.
pub fn load_expecting(path: &Path, cfg: &NetConfig) -> Result<TrainState> {
    let state = load(path)?;
    let want = fingerprint(&Network::new(cfg, 0)?);
    if fingerprint(&state.net) != want {
        return Err(Error::Checkpoint(format!(
            "{}: architecture `{}` does not match configured `{}`",
            path.display(),
            config_line(state.net.config()),
            config_line(cfg)
        )));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let cfg = NetConfig { variant: Variant::Unetpp, depth: 2, base_channels: 2, deep_supervision: true, batch_norm: true };
        let stats = ChannelStats { kind: NormKind::MinMax, offset: [1.0, 2.0, 3.0], scale: [4.0, 5.0, 6.0] };
        let mut st = TrainState::new(&cfg, stats, 77).unwrap();
        st.log_sigma = [0.1, -0.2, 0.3, 0.0, 1.5];
        st.velocity[0][0] = 0.25;
        st.net.buffers_mut()[0].mean[0] = -3.0;
        st.epoch = 4;
        st.step = 19;
        st
    }

    #[test]
    fn round_trip_is_exact() {
        let st = state();
        let bytes = encode(&st);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.net.params(), st.net.params());
        assert_eq!(back.net.buffers(), st.net.buffers());
        assert_eq!(back.velocity, st.velocity);
        assert_eq!(back.log_sigma, st.log_sigma);
        assert_eq!(back.stats, st.stats);
        assert_eq!((back.epoch, back.step, back.seed), (4, 19, 77));
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_damage_and_mismatch() {
        let st = state();
        let mut bytes = encode(&st);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&st, &path).unwrap();
        let mut other = st.net.config().clone();
        other.base_channels = 4;
        let err = load_expecting(&path, &other).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
        assert!(load_expecting(&path, st.net.config()).is_ok());
    }
}
