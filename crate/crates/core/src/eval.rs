//! Confusion metrics, F-beta scores, aggregation over scans and a timing
//! harness. Snow is the positive class.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Which fractions had a zero denominator and were filled with a
/// placeholder. Flagged values are left out of aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub fpr: bool,
    pub iou: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRecord {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// 1.0 when nothing was predicted as snow.
    pub precision: f64,
    /// 1.0 when the ground truth has no snow.
    pub recall: f64,
    /// 0.0 when the ground truth is all snow.
    pub fpr: f64,
    pub fnr: f64,
    /// 1.0 when neither prediction nor ground truth has snow.
    pub iou: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: u64, den: u64, empty: f64) -> (f64, bool) {
    if den == 0 {
        (empty, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl MetricsRecord {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let (precision, dp) = ratio(tp, tp + fp, 1.0);
        let (recall, dr) = ratio(tp, tp + fn_, 1.0);
        let (fpr, df) = ratio(fp, fp + tn, 0.0);
        let (iou, di) = ratio(tp, tp + fp + fn_, 1.0);
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            fpr,
            fnr: 1.0 - recall,
            iou,
            degenerate: Degenerate { precision: dp, recall: dr, fpr: df, iou: di },
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn fbeta(&self, beta: f64) -> f64 {
        fbeta(self.precision, self.recall, beta)
    }
}

/// Counts over nonzero-means-snow label vectors.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<MetricsRecord> {
    if pred.len() != gt.len() {
        return Err(contract(format!("{} predictions for {} ground-truth labels", pred.len(), gt.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsRecord::from_counts(tp, fp, fn_, tn))
}

/// `(1 + b^2) P R / (b^2 P + R)`, 0 when both are 0.
pub fn fbeta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean and spread of per-scan scores.
    #[default]
    PerScan,
    /// One confusion matrix summed over all scans.
    Pooled,
}

/// Mean and population standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Values dropped because their record was degenerate for this metric.
    pub excluded: usize,
}

/// Two-pass mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub const METRIC_NAMES: [&str; 8] = ["precision", "recall", "fpr", "fnr", "iou", "f1", "f3", "f5"];

fn metric(r: &MetricsRecord, k: usize) -> (f64, bool) {
    let d = r.degenerate;
    match k {
        0 => (r.precision, d.precision),
        1 => (r.recall, d.recall),
        2 => (r.fpr, d.fpr),
        3 => (r.fnr, d.recall),
        4 => (r.iou, d.iou),
        _ => {
            let beta = [1.0, 3.0, 5.0][k - 5];
            (r.fbeta(beta), d.precision || d.recall)
        }
    }
}

/// Per-metric summaries in [`METRIC_NAMES`] order. `None` marks a metric
/// for which every record was degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mode: Aggregation,
    pub scans: usize,
    pub metrics: [Option<Summary>; 8],
}

impl Aggregate {
    pub fn get(&self, name: &str) -> Option<Summary> {
        METRIC_NAMES.iter().position(|&n| n == name).and_then(|k| self.metrics[k])
    }
}

pub fn aggregate(records: &[MetricsRecord], mode: Aggregation) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(contract("cannot aggregate zero records"));
    }
    let pooled;
    let used: &[MetricsRecord] = match mode {
        Aggregation::PerScan => records,
        Aggregation::Pooled => {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for r in records {
                tp += r.tp;
                fp += r.fp;
                fn_ += r.fn_;
                tn += r.tn;
            }
            pooled = [MetricsRecord::from_counts(tp, fp, fn_, tn)];
            &pooled
        }
    };
    let metrics = std::array::from_fn(|k| {
        let mut vals = Vec::with_capacity(used.len());
        let mut excluded = 0;
        for r in used {
            match metric(r, k) {
                (_, true) => excluded += 1,
                (v, false) => vals.push(v),
            }
        }
        mean_std(&vals).map(|(mean, std)| Summary { mean, std, count: vals.len(), excluded })
    });
    Ok(Aggregate { mode, scans: records.len(), metrics })
}

/// Aligned plain-text table.
pub fn format_table(agg: &Aggregate) -> String {
    let mode = match agg.mode {
        Aggregation::PerScan => "per-scan mean +/- population std",
        Aggregation::Pooled => "pooled over all scans",
    };
    let mut s = format!("# {} scans, {mode}\n", agg.scans);
    let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>6} {:>9}", "metric", "mean", "std", "n", "excluded");
    for (name, m) in METRIC_NAMES.iter().zip(&agg.metrics) {
        match m {
            Some(m) => {
                let _ = writeln!(s, "{name:<10} {:>8.3} {:>8.3} {:>6} {:>9}", m.mean, m.std, m.count, m.excluded);
            }
            None => {
                let _ = writeln!(s, "{name:<10} {:>8} {:>8} {:>6} {:>9}", "-", "-", 0, agg.scans);
            }
        }
    }
    s
}

/// `key=value` lines, full precision.
pub fn format_kv(agg: &Aggregate) -> String {
    let mode = match agg.mode {
        Aggregation::PerScan => "per_scan",
        Aggregation::Pooled => "pooled",
    };
    let mut s = format!("mode={mode}\nscans={}\nstd=population\n", agg.scans);
    for (name, m) in METRIC_NAMES.iter().zip(&agg.metrics) {
        if let Some(m) = m {
            let _ = writeln!(s, "{name}.mean={}\n{name}.std={}\n{name}.count={}\n{name}.excluded={}", m.mean, m.std, m.count, m.excluded);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub mean_ms: f64,
    pub hz: f64,
    pub warmup: usize,
    pub reps: usize,
    pub scans: usize,
}

pub fn hz_from_ms(mean_ms: f64) -> f64 {
    1000.0 / mean_ms
}

/// Rate to one decimal, as reported.
pub fn format_hz(hz: f64) -> String {
    format!("{hz:.1}")
}

impl BenchResult {
    pub fn from_mean_ms(mean_ms: f64, warmup: usize, reps: usize, scans: usize) -> Self {
        Self { mean_ms, hz: hz_from_ms(mean_ms), warmup, reps, scans }
    }

    pub fn report(&self) -> String {
        format!(
            "mean_ms={:.1}\nhz={}\nscans={}\nwarmup={}\nreps={}\nthreads=1\n",
            self.mean_ms,
            format_hz(self.hz),
            self.scans,
            self.warmup,
            self.reps
        )
    }
}

/// Times `f` on every scan: `warmup` discarded passes over all scans, then
/// `reps` timed passes. Reports the mean wall-clock time per scan call.
pub fn bench<T, R>(mut f: impl FnMut(&T) -> R, scans: &[T], warmup: usize, reps: usize) -> Result<BenchResult> {
    if reps == 0 || scans.is_empty() {
        return Err(contract("bench needs at least one rep and one scan"));
    }
    for _ in 0..warmup {
        for s in scans {
            std::hint::black_box(f(s));
        }
    }
    let mut total = 0.0;
    for _ in 0..reps {
        for s in scans {
            let t = Instant::now();
            std::hint::black_box(f(s));
            total += t.elapsed().as_secs_f64() * 1e3;
        }
    }
    Ok(BenchResult::from_mean_ms(total / (reps * scans.len()) as f64, warmup, reps, scans.len()))
}
