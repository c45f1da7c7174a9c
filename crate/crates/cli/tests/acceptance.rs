//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{brute_count, brute_knn, reference_labels};
use desnow::eval::{confusion, fbeta, format_hz, hz_from_ms, BenchResult, MetricsRecord};
use desnow::losses::{edge_loss, intensity_loss, penalty_loss, reflectivity_loss, total_loss, total_value, LossConfig, Targets};
use desnow::nnet::gradcheck::max_relative_error;
use desnow::nnet::{infer, prepare_dataset, train, train_step, NetConfig, Tape, Tensor, TrainConfig, TrainState, Var};
use desnow::postprocess::{apply, apply_probs, PostprocessConfig};
use desnow::pseudolabel::{cond4_density, generate, generate_staged, PseudoLabelConfig};
use desnow::rangeproj::{NormKind, OverflowPolicy};
use desnow::spatial::NeighborIndex;
use desnow::synth::{generate_scene, Regime, SceneParams};
use desnow::{Point, PointCloud, SensorMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Scenes for the labeller checks: alternating regimes, at most 2,000 points.
fn label_scenes() -> Vec<PointCloud> {
    (0..100)
        .map(|seed| {
            let mut p = SceneParams::desk(seed);
            p.sensor.horiz_steps = 192;
            if seed % 2 == 1 {
                p.regime = Regime::Overlap;
            }
            generate_scene(&p).unwrap()
        })
        .collect()
}

fn oracle_equivalence(scenes: &[PointCloud]) -> Outcome {
    let cfg = PseudoLabelConfig::default();
    let start = Instant::now();
    let mut matched = 0;
    let mut largest = 0;
    for cloud in scenes {
        largest = largest.max(cloud.len());
        if generate(cloud, &cfg).unwrap().labels == reference_labels(cloud, &cfg).labels() {
            matched += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        matched == scenes.len() && scenes.len() == 100 && largest <= 2000 && secs < 60.0,
        format!("{matched}/{} scenes identical, largest {largest} points, {secs:.1} s", scenes.len()),
    )
}

fn monotone_refinement(scenes: &[PointCloud]) -> Outcome {
    let cfg = PseudoLabelConfig::default();
    let mut violations = 0;
    let mut shrinks = [0usize; 3];
    for cloud in scenes {
        let st = generate_staged(cloud, &cfg).unwrap();
        let snow: Vec<bool> = st.labels.labels.iter().map(|&l| l == 1).collect();
        let sets = [&st.after_cond1, &st.after_cond2, &st.after_cond3, &snow];
        for (k, pair) in sets.windows(2).enumerate() {
            violations += pair[1].iter().zip(pair[0].iter()).filter(|(&later, &earlier)| later && !earlier).count();
            shrinks[k] += pair[0].iter().zip(pair[1].iter()).filter(|(&a, &b)| a && !b).count();
        }
    }
    outcome(
        violations == 0,
        format!(
            "{violations} violations; points removed by cond2/cond3/cond4: {}/{}/{}",
            shrinks[0], shrinks[1], shrinks[2]
        ),
    )
}

fn spatial_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..50 {
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..3.0)])
            .collect();
        let index = NeighborIndex::build(&pts);
        for _ in 0..50 {
            let i = rng.random_range(0..pts.len());
            let r = rng.random_range(0.1..5.0);
            let k = rng.random_range(1..16);
            if index.radius_count(i, r).unwrap() != brute_count(&pts, pts[i], r, Some(i)) {
                mismatches += 1;
            }
            let got: Vec<(usize, f64)> = index.knn(i, k).iter().map(|n| (n.index, n.dist)).collect();
            if got != brute_knn(&pts, pts[i], k, Some(i)) {
                mismatches += 1;
            }
        }
    }

    let mut params = SceneParams::enclosed(1);
    params.snow_count = 0;
    let scan = generate_scene(&params).unwrap();
    let cfg = PseudoLabelConfig::default();
    let start = Instant::now();
    let index = NeighborIndex::from_cloud(&scan);
    let mut indexed = vec![true; scan.len()];
    cond4_density(&scan, &mut indexed, &index, &cfg).unwrap();
    let t_index = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let xyz: Vec<[f64; 3]> = scan.points.iter().map(|p| p.xyz()).collect();
    let brute: Vec<bool> = (0..scan.len())
        .map(|i| {
            let d = scan.points[i].range();
            brute_count(&xyz, xyz[i], cfg.density_radius(d), Some(i)) < cfg.density_count(d)
        })
        .collect();
    let t_brute = start.elapsed().as_secs_f64();
    let speedup = t_brute / t_index;
    outcome(
        mismatches == 0 && indexed == brute && scan.len() == 65_536 && speedup >= 10.0,
        format!(
            "{mismatches} query mismatches over 2,500 queries; {}-point pass indexed {:.3} s vs brute {:.2} s ({speedup:.0}x), results {}",
            scan.len(),
            t_index,
            t_brute,
            if indexed == brute { "equal" } else { "DIFFER" }
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Distinct values at least 0.02 apart and away from zero, so max-pooling
/// and ReLU have no kink within a finite-difference step.
fn spread_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) * 0.02 * if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    for k in (1..n).rev() {
        v.swap(k, rng.random_range(0..=k));
    }
    Tensor::from_vec(shape, v).unwrap()
}

fn shape4(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..3), rng.random_range(1..4), 2 * rng.random_range(1..4), 2 * rng.random_range(1..4)]
}

/// Reduces any tensor to a scalar with fixed random weights.
fn project(tp: &mut Tape, x: Var, seed: u64) -> desnow::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..tp.value(x).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    tp.dot(x, &c)
}

fn random_targets(n: usize, rng: &mut ChaCha8Rng) -> Targets {
    Targets {
        valid: (0..n).map(|_| rng.random_bool(0.9)).collect(),
        target: (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect(),
        scope: (0..n).map(|_| rng.random_bool(0.6)).collect(),
        edges: (0..n).map(|_| rng.random_bool(0.3)).collect(),
        violation: (0..n).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1.5) } else { 0.0 }).collect(),
        sparsity: Vec::new(),
    }
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

fn fd(inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> desnow::Result<Var>) -> f64 {
    max_relative_error(&inputs, 1e-4, f).unwrap()
}

fn gradient_checks() -> Outcome {
    const INSTANCES: usize = 20;
    let loss_check = |which: usize| -> Check {
        Box::new(move |rng| {
            let t = random_targets(32, rng);
            let logits = random_tensor(rng, &[1, 1, 4, 8], -4.0, 4.0);
            fd(vec![logits], &|tp, v| {
                let p = tp.sigmoid(v[0]);
                match which {
                    0 => intensity_loss(tp, p, &t),
                    1 => reflectivity_loss(tp, p, &t),
                    2 => edge_loss(tp, v[0], &t),
                    _ => penalty_loss(tp, p, &t),
                }
            })
        })
    };
    let checks: Vec<(&str, Check)> = vec![
        ("intensity loss", loss_check(0)),
        ("reflectivity loss", loss_check(1)),
        ("edge loss", loss_check(2)),
        ("penalty loss", loss_check(3)),
        (
            "uncertainty total",
            Box::new(|rng| {
                let l = random_tensor(rng, &[5], 0.1, 3.0);
                let s = random_tensor(rng, &[5], -1.0, 1.0);
                let lambda = [1.0, 0.5, 1.0, 2.0, 1.0];
                let parts: Vec<Tensor> = (0..10)
                    .map(|k| Tensor::scalar(if k < 5 { l.data()[k] } else { s.data()[k - 5] }))
                    .collect();
                fd(parts, &|tp, v| {
                    let terms = [v[0], v[1], v[2], v[3], v[4]];
                    let ls = [v[5], v[6], v[7], v[8], v[9]];
                    total_loss(tp, &terms, &ls, &lambda)
                })
            }),
        ),
        (
            "conv2d 3x3 + bias",
            Box::new(|rng| {
                let s = shape4(rng);
                let co = rng.random_range(1..4);
                let x = random_tensor(rng, &s, -1.0, 1.0);
                let w = random_tensor(rng, &[co, s[1], 3, 3], -1.0, 1.0);
                let b = random_tensor(rng, &[co], -1.0, 1.0);
                fd(vec![x, w, b], &|tp, v| {
                    let y = tp.conv2d(v[0], v[1], Some(v[2]))?;
                    project(tp, y, 1)
                })
            }),
        ),
        (
            "conv2d 1x1",
            Box::new(|rng| {
                let s = shape4(rng);
                let x = random_tensor(rng, &s, -1.0, 1.0);
                let w = random_tensor(rng, &[2, s[1], 1, 1], -1.0, 1.0);
                fd(vec![x, w], &|tp, v| {
                    let y = tp.conv2d(v[0], v[1], None)?;
                    project(tp, y, 2)
                })
            }),
        ),
        (
            "batch norm (batch statistics)",
            Box::new(|rng| {
                let mut s = shape4(rng);
                s[0] = 2;
                let x = random_tensor(rng, &s, -2.0, 2.0);
                let g = random_tensor(rng, &[s[1]], 0.5, 1.5);
                let b = random_tensor(rng, &[s[1]], -1.0, 1.0);
                fd(vec![x, g, b], &|tp, v| {
                    let (y, _, _) = tp.batch_norm_train(v[0], v[1], v[2])?;
                    project(tp, y, 3)
                })
            }),
        ),
        (
            "batch norm (running statistics)",
            Box::new(|rng| {
                let s = shape4(rng);
                let x = random_tensor(rng, &s, -2.0, 2.0);
                let g = random_tensor(rng, &[s[1]], -1.5, 1.5);
                let b = random_tensor(rng, &[s[1]], -1.0, 1.0);
                let mean: Vec<f64> = (0..s[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
                let var: Vec<f64> = (0..s[1]).map(|_| rng.random_range(0.1..2.0)).collect();
                fd(vec![x, g, b], &|tp, v| {
                    let y = tp.batch_norm_eval(v[0], v[1], v[2], &mean, &var)?;
                    project(tp, y, 4)
                })
            }),
        ),
        (
            "relu",
            Box::new(|rng| {
                let s = shape4(rng);
                let x = spread_tensor(rng, &s);
                fd(vec![x], &|tp, v| {
                    let y = tp.relu(v[0]);
                    project(tp, y, 5)
                })
            }),
        ),
        (
            "sigmoid",
            Box::new(|rng| {
                let s = shape4(rng);
                let x = random_tensor(rng, &s, -5.0, 5.0);
                fd(vec![x], &|tp, v| {
                    let y = tp.sigmoid(v[0]);
                    project(tp, y, 6)
                })
            }),
        ),
        (
            "max pool 2x2",
            Box::new(|rng| {
                let s = shape4(rng);
                let x = spread_tensor(rng, &s);
                fd(vec![x], &|tp, v| {
                    let y = tp.maxpool2(v[0])?;
                    project(tp, y, 7)
                })
            }),
        ),
        (
            "bilinear upsample x2",
            Box::new(|rng| {
                let s = shape4(rng);
                let x = random_tensor(rng, &s, -1.0, 1.0);
                fd(vec![x], &|tp, v| {
                    let y = tp.upsample2(v[0])?;
                    project(tp, y, 8)
                })
            }),
        ),
        (
            "channel concat",
            Box::new(|rng| {
                let s = shape4(rng);
                let mut s2 = s;
                s2[1] = rng.random_range(1..4);
                let a = random_tensor(rng, &s, -1.0, 1.0);
                let b = random_tensor(rng, &s2, -1.0, 1.0);
                fd(vec![a, b], &|tp, v| {
                    let y = tp.concat(&[v[0], v[1]])?;
                    project(tp, y, 9)
                })
            }),
        ),
        (
            "add",
            Box::new(|rng| {
                let s = shape4(rng);
                let a = random_tensor(rng, &s, -1.0, 1.0);
                let b = random_tensor(rng, &s, -1.0, 1.0);
                fd(vec![a, b], &|tp, v| {
                    let y = tp.add(v[0], v[1])?;
                    let y = tp.sigmoid(y);
                    project(tp, y, 10)
                })
            }),
        ),
        (
            "weighted sum",
            Box::new(|rng| {
                let xs: Vec<Tensor> = (0..3).map(|_| Tensor::scalar(rng.random_range(-2.0..2.0))).collect();
                let coef: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                fd(xs, &|tp, v| {
                    let sq: Vec<Var> = v.iter().map(|&x| tp.sigmoid(x)).collect();
                    tp.weighted_sum(&sq, &coef)
                })
            }),
        ),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_overall: f64 = 0.0;
    let mut failing = Vec::new();
    for (name, check) in &checks {
        let worst = (0..INSTANCES).map(|_| check(&mut rng)).fold(0.0, f64::max);
        worst_overall = worst_overall.max(worst);
        if worst.is_nan() || worst > 1e-4 {
            failing.push(format!("{name} {worst:.1e}"));
        }
    }
    outcome(
        failing.is_empty(),
        format!(
            "{} checks x {INSTANCES} instances, worst relative error {worst_overall:.1e}{}",
            checks.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

fn desk_clouds(seeds: std::ops::Range<u64>) -> Vec<PointCloud> {
    seeds.map(|s| generate_scene(&SceneParams::desk(s)).unwrap()).collect()
}

fn stop_gradient() -> Outcome {
    let clouds = desk_clouds(0..2);
    let loss = LossConfig { lambda: [0.0, 0.0, 0.0, 1.0, 0.0], ..LossConfig::default() };
    let (samples, stats) = prepare_dataset(&clouds, &PseudoLabelConfig::default(), &loss, NormKind::MeanStd).unwrap();
    let mut state = TrainState::new(&NetConfig::default(), stats, 5).unwrap();
    let before: Vec<Vec<u64>> = state.net.params().iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
    let values = train_step(&mut state, &[&samples[0], &samples[1]], &loss, &TrainConfig::default()).unwrap();
    let after: Vec<Vec<u64>> = state.net.params().iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    outcome(
        changed == 0 && values.terms[3] > 0.0,
        format!("{changed} of {} parameter tensors changed (sparsity term {:.4})", before.len(), values.terms[3]),
    )
}

fn uncertainty_weighting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_total: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..100 {
        let l: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.01..10.0));
        let half_sum = 0.5 * l.iter().sum::<f64>();
        let mut tape = Tape::new();
        let terms = l.map(|v| tape.constant(Tensor::scalar(v)));
        let zeros = [0.0; 5].map(|v| tape.constant(Tensor::scalar(v)));
        let tot = total_loss(&mut tape, &terms, &zeros, &[1.0; 5]).unwrap();
        worst_total = worst_total.max((tape.value(tot).item() - half_sum).abs());
        worst_total = worst_total.max((total_value(&l, &[0.0; 5], &[1.0; 5]) - half_sum).abs());

        // At exp(log_sigma_i) = L_i the derivative in log_sigma_i vanishes.
        let s = l.map(f64::ln);
        let h = 1e-5;
        for i in 0..5 {
            let (mut up, mut down) = (s, s);
            up[i] += h;
            down[i] -= h;
            let numeric = (total_value(&l, &up, &[1.0; 5]) - total_value(&l, &down, &[1.0; 5])) / (2.0 * h);
            worst_grad = worst_grad.max(numeric.abs());
        }
        let mut tape = Tape::new();
        let terms = l.map(|v| tape.constant(Tensor::scalar(v)));
        let ls = s.map(|v| tape.leaf(Tensor::scalar(v), true));
        let tot = total_loss(&mut tape, &terms, &ls, &[1.0; 5]).unwrap();
        let g = tape.backward(tot).unwrap();
        for v in ls {
            worst_grad = worst_grad.max(g.get(v).unwrap()[0].abs());
        }
    }
    outcome(
        worst_total <= 1e-12 && worst_grad <= 1e-6,
        format!("max |total - sum/2| {worst_total:.1e}; max |d total / d log_sigma| at optimum {worst_grad:.1e}"),
    )
}

fn metric_anchors() -> Outcome {
    let a = fbeta(0.827, 0.908, 1.0);
    let b = fbeta(0.672, 0.920, 1.0);
    let h1 = format_hz(hz_from_ms(208.1));
    let h2 = format_hz(hz_from_ms(3505.0));
    let report = BenchResult::from_mean_ms(208.1, 1, 3, 1).report();
    outcome(
        (a - 0.866).abs() <= 0.001 && (b - 0.777).abs() <= 0.001 && h1 == "4.8" && h2 == "0.3" && report.contains("hz=4.8"),
        format!("F1 {a:.4} and {b:.4}; 208.1 ms -> {h1} Hz, 3505 ms -> {h2} Hz"),
    )
}

fn pooled(records: &[MetricsRecord]) -> MetricsRecord {
    let sum = |f: fn(&MetricsRecord) -> u64| records.iter().map(f).sum();
    MetricsRecord::from_counts(sum(|r| r.tp), sum(|r| r.fp), sum(|r| r.fn_), sum(|r| r.tn))
}

fn training_surrogate() -> Outcome {
    let train_clouds = desk_clouds(0..64);
    let test_clouds = desk_clouds(1000..1016);
    let loss = LossConfig::default();
    let net = NetConfig { depth: 4, base_channels: 8, deep_supervision: true, ..NetConfig::default() };
    let tc = TrainConfig { lr: 1e-3, momentum: 0.9, batch_size: 2, epochs: 1000, max_steps: 200, seed: 7, ..TrainConfig::default() };
    let start = Instant::now();
    let (samples, stats) = prepare_dataset(&train_clouds, &PseudoLabelConfig::default(), &loss, tc.norm).unwrap();
    let mut state = TrainState::new(&net, stats, tc.seed).unwrap();
    train(&mut state, &samples, &loss, &tc, |_, _| {}).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let pp_on = PostprocessConfig::default();
    let pp_off = PostprocessConfig { enabled: false, ..pp_on.clone() };
    let (mut with_pp, mut without_pp) = (Vec::new(), Vec::new());
    for cloud in &test_clouds {
        let probs = infer(&state.net, &state.stats, cloud, OverflowPolicy::Inherit).unwrap();
        let gt = cloud.gt_labels.as_ref().unwrap();
        without_pp.push(confusion(&apply_probs(&probs, cloud, &pp_off).unwrap(), gt).unwrap());
        with_pp.push(confusion(&apply_probs(&probs, cloud, &pp_on).unwrap(), gt).unwrap());
    }
    let (off, on) = (pooled(&without_pp), pooled(&with_pp));
    outcome(
        state.step == 200 && off.recall >= 0.90 && off.iou >= 0.50 && on.precision >= off.precision && minutes < 15.0,
        format!(
            "{} steps in {minutes:.1} min; held-out recall {:.3}, IoU {:.3}; precision {:.3} without PP, {:.3} with PP",
            state.step, off.recall, off.iou, off.precision, on.precision
        ),
    )
}

fn postprocess_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let meta = SensorMeta::default();
    let (mut beyond, mut not_idempotent, mut not_subset) = (0, 0, 0);
    for k in 0..1000 {
        let n = rng.random_range(1..200);
        let points = (0..n)
            .map(|_| {
                let r = rng.random_range(0.5..120.0);
                let az = rng.random_range(-3.1..3.1f64);
                let z = rng.random_range(-2.5..6.0);
                Point::new(r * az.cos(), r * az.sin(), z, 1.0, 0.0)
            })
            .collect();
        let cloud = PointCloud::new(points, meta);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
        let cfg = if k % 2 == 0 { PostprocessConfig::sensing_limit() } else { PostprocessConfig::short_range() };
        let once = apply(&labels, &cloud, &cfg).unwrap();
        let twice = apply(&once, &cloud, &cfg).unwrap();
        beyond += once.iter().zip(&cloud.points).filter(|(&l, p)| l == 1 && p.range() > cfg.limit_m).count();
        not_idempotent += (once != twice) as usize;
        not_subset += once.iter().zip(&labels).filter(|(&a, &b)| a == 1 && b == 0).count();
    }
    outcome(
        beyond == 0 && not_idempotent == 0 && not_subset == 0,
        format!("1000 label vectors: {beyond} snow beyond limit, {not_idempotent} non-idempotent, {not_subset} labels added"),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_desnow")).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn same_files(a: &Path, b: &Path) -> (usize, usize) {
    let mut names: Vec<_> = fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| e.file_name())
        .collect();
    names.sort();
    let mut equal = 0;
    for name in &names {
        let read = |dir: &Path| fs::read(dir.join(name)).expect("readable output file");
        if read(a) == read(b) {
            equal += 1;
        }
    }
    (equal, names.len())
}

fn determinism() -> Outcome {
    let t = tempfile::tempdir().unwrap();
    let p = |name: &str| t.path().join(name).to_str().unwrap().to_string();
    let data = p("data");
    let mut ok = run_cli(&["synth", "--out", &data, "--scenes", "4"]);
    for out in ["train_a", "train_b"] {
        ok &= run_cli(&["train", "--data", &data, "--out", &p(out), "--epochs", "2", "--seed", "7"]);
    }
    for out in ["pl_a", "pl_b"] {
        ok &= run_cli(&["pseudolabel", "--input", &data, "--out", &p(out)]);
    }
    if !ok {
        return outcome(false, "a CLI run failed".into());
    }
    let (a, b) = (t.path().join("train_a"), t.path().join("train_b"));
    let (top_eq, top_n) = same_files(&a, &b);
    let (ck_eq, ck_n) = same_files(&a.join("checkpoints"), &b.join("checkpoints"));
    let (pl_eq, pl_n) = same_files(&t.path().join("pl_a"), &t.path().join("pl_b"));
    let train_ok = top_eq == top_n && top_n == 3 && ck_eq == ck_n && ck_n == 2;
    outcome(
        train_ok && pl_eq == pl_n && pl_n == 9,
        format!(
            "train: {top_eq}/{top_n} files and {ck_eq}/{ck_n} checkpoints identical; pseudolabel: {pl_eq}/{pl_n} files identical"
        ),
    )
}

fn main() {
    let start = Instant::now();
    let scenes = label_scenes();
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("pseudo-label oracle equivalence", Box::new(|| oracle_equivalence(&scenes))),
        ("monotone refinement", Box::new(|| monotone_refinement(&scenes))),
        ("spatial index exactness and speed", Box::new(spatial_exactness)),
        ("gradient correctness", Box::new(gradient_checks)),
        ("stop-gradient on the sparsity term", Box::new(stop_gradient)),
        ("uncertainty weighting", Box::new(uncertainty_weighting)),
        ("metric anchors", Box::new(metric_anchors)),
        ("desk-scale training", Box::new(training_surrogate)),
        ("post-processing invariants", Box::new(postprocess_invariants)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += (!o.pass) as usize;
        println!("[{}] {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, k + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed ({:.0} s)", criteria.len() - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
