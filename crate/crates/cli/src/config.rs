//! Sectioned TOML configuration with `--section.key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use desnow::baselines::{DliorConfig, DrorConfig, LiorConfig, RorConfig, SorConfig};
use desnow::eval::Aggregation;
use desnow::io::ScanFormat;
use desnow::losses::LossConfig;
use desnow::nnet::{NetConfig, TrainConfig};
use desnow::postprocess::PostprocessConfig;
use desnow::pseudolabel::PseudoLabelConfig;
use desnow::rangeproj::OverflowPolicy;
use desnow::synth::SceneParams;
use desnow::SensorMeta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: ScanFormat,
    /// Label codes that count as snow.
    pub snow_ids: Vec<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { format: ScanFormat::Xyzir, snow_ids: vec![1] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub overflow: OverflowPolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 1, reps: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sensor: SensorMeta,
    pub data: DataConfig,
    pub synth: SceneParams,
    pub pseudolabel: PseudoLabelConfig,
    pub ror: RorConfig,
    pub sor: SorConfig,
    pub dror: DrorConfig,
    pub lior: LiorConfig,
    pub dlior: DliorConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        let synth = SceneParams::desk(0);
        Self {
            sensor: synth.sensor,
            data: DataConfig::default(),
            synth,
            pseudolabel: PseudoLabelConfig::default(),
            ror: RorConfig::default(),
            sor: SorConfig::default(),
            dror: DrorConfig::default(),
            lior: LiorConfig::default(),
            dlior: DliorConfig::default(),
            net: NetConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            postprocess: PostprocessConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl Config {
    /// Scene parameters with the configured sensor filled in.
    pub fn scene(&self, seed: u64) -> SceneParams {
        SceneParams { sensor: self.sensor, seed, ..self.synth.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        self.scene(self.synth.seed).validate()?;
        self.pseudolabel.validate()?;
        self.ror.validate()?;
        self.sor.validate()?;
        self.dror.validate()?;
        self.lior.validate()?;
        self.dlior.validate()?;
        self.net.validate()?;
        self.net.check_input(self.sensor.channels, self.sensor.horiz_steps).context("sensor image size vs net.depth")?;
        self.loss.validate()?;
        self.train.validate()?;
        self.postprocess.validate()?;
        if self.bench.reps == 0 {
            bail!("bench.reps must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// One `--section.key=value` override.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub section: String,
    pub key: String,
    pub raw: String,
}

/// Pulls `--section.key=value` and `--section.key value` pairs out of the
/// argument list, leaving everything else for the regular parser.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        let Some((section, key)) = name.split_once('.') else {
            rest.push(arg);
            continue;
        };
        let raw = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("--{name} needs a value"))?,
        };
        overrides.push(Override { section: section.to_string(), key: key.to_string(), raw });
    }
    Ok((rest, overrides))
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Defaults, then the file (if any), then overrides. Unknown sections and
/// keys are rejected with the list of valid ones.
pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Config> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let section = table
            .entry(o.section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(section) = section.as_table_mut() else {
            bail!("config entry `{}` is not a section", o.section);
        };
        section.insert(o.key.clone(), parse_value(&o.raw));
    }
    let cfg: Config = toml::Value::Table(table).try_into().context("invalid configuration")?;
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}
