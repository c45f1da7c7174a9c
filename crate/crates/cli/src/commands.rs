//! One function per subcommand, each a thin composition of library calls.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use desnow::baselines::{dlior, dror, lior, ror, sor, DliorStream};
use desnow::eval::{aggregate, bench, confusion, format_kv, format_table};
use desnow::io::{read_labels, read_scan, write_labels, write_provenance, write_scan};
use desnow::nnet::{checkpoint, infer, prepare_dataset, train, EpochLog, TrainState};
use desnow::rangeproj::{encode_image, project};
use desnow::synth::generate_scene;
use desnow::{postprocess, pseudolabel, LabelSet, PointCloud};

use crate::config::Config;
use crate::{BenchMethod, Command, FilterName};

pub fn run(cmd: &Command, cfg: &Config) -> Result<()> {
    match cmd {
        Command::Synth { out, scenes } => synth(cfg, out, *scenes),
        Command::Project { input, out } => project_cmd(cfg, input, out),
        Command::Pseudolabel { input, out } => pseudolabel_cmd(cfg, input, out),
        Command::Filter { name, input, out } => filter(cfg, *name, input, out),
        Command::Train { data, out, .. } => train_cmd(cfg, data, out),
        Command::Infer { checkpoint, input, out } => infer_cmd(cfg, checkpoint, input, out),
        Command::Eval { pred, gt, out } => eval_cmd(cfg, pred, gt, out),
        Command::Bench { method, input, checkpoint, out } => bench_cmd(cfg, *method, input, checkpoint.as_deref(), out),
    }
}

/// Creates `out` and writes the effective configuration into it.
fn prepare_out(cfg: &Config, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

/// A single scan file, or every `.bin` in a directory in name order.
fn scan_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).with_context(|| format!("reading {}", input.display()))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "bin") {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        bail!("no .bin scans in {}", input.display());
    }
    paths.sort();
    Ok(paths)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_scans(cfg: &Config, input: &Path) -> Result<Vec<(String, PointCloud)>> {
    scan_paths(input)?
        .into_iter()
        .map(|p| {
            let cloud = read_scan(&p, cfg.data.format, cfg.sensor).with_context(|| format!("reading scan {}", p.display()))?;
            Ok((stem(&p), cloud))
        })
        .collect()
}

fn synth(cfg: &Config, out: &Path, scenes: usize) -> Result<()> {
    prepare_out(cfg, out)?;
    for k in 0..scenes {
        let seed = cfg.synth.seed + k as u64;
        let cloud = generate_scene(&cfg.scene(seed)).with_context(|| format!("generating scene seed {seed}"))?;
        let name = format!("scene_{k:04}");
        write_scan(&cloud, out.join(format!("{name}.bin")))?;
        write_labels(cloud.gt_labels.as_deref().unwrap_or_default(), out.join(format!("{name}.label")))?;
    }
    Ok(())
}

fn project_cmd(cfg: &Config, input: &Path, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    for (name, cloud) in load_scans(cfg, input)? {
        let (img, _) = project(&cloud, cfg.sensor.channels, cfg.sensor.horiz_steps)?;
        let path = out.join(format!("{name}.rimg"));
        fs::write(&path, encode_image(&img)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn write_label_set(out: &Path, name: &str, ls: &LabelSet) -> Result<()> {
    write_labels(&ls.labels, out.join(format!("{name}.label")))?;
    write_provenance(&ls.provenance, out.join(format!("{name}.prov")))?;
    Ok(())
}

fn pseudolabel_cmd(cfg: &Config, input: &Path, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    for (name, cloud) in load_scans(cfg, input)? {
        let ls = pseudolabel::generate(&cloud, &cfg.pseudolabel).with_context(|| format!("labelling {name}"))?;
        write_label_set(out, &name, &ls)?;
    }
    Ok(())
}

fn filter(cfg: &Config, name: FilterName, input: &Path, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let scans = load_scans(cfg, input)?;
    let results = match name {
        FilterName::Dlior => dlior(scans.iter().map(|(_, c)| c), &cfg.lior, &cfg.dlior)?,
        _ => scans
            .iter()
            .map(|(_, c)| match name {
                FilterName::Ror => ror(c, &cfg.ror),
                FilterName::Sor => sor(c, &cfg.sor),
                FilterName::Dror => dror(c, &cfg.dror),
                _ => lior(c, &cfg.lior),
            })
            .collect::<desnow::Result<Vec<_>>>()?,
    };
    for ((name, _), ls) in scans.iter().zip(&results) {
        write_label_set(out, name, ls)?;
    }
    Ok(())
}

fn train_cmd(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let clouds: Vec<PointCloud> = load_scans(cfg, data)?.into_iter().map(|(_, c)| c).collect();
    let (samples, stats) = prepare_dataset(&clouds, &cfg.pseudolabel, &cfg.loss, cfg.train.norm)?;
    let mut state = TrainState::new(&cfg.net, stats, cfg.train.seed)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut log = format!("{}\n", EpochLog::HEADER);
    let mut save_err = None;
    train(&mut state, &samples, &cfg.loss, &cfg.train, |entry, st| {
        log.push_str(&entry.line());
        log.push('\n');
        if save_err.is_none() {
            let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", entry.epoch));
            save_err = checkpoint::save(st, &path).err();
        }
    })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    fs::write(out.join("loss.tsv"), log)?;
    checkpoint::save(&state, &out.join("model.ckpt"))?;
    Ok(())
}

fn infer_cmd(cfg: &Config, ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let state = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    prepare_out(cfg, out)?;
    for (name, cloud) in load_scans(cfg, input)? {
        let probs = infer(&state.net, &state.stats, &cloud, cfg.infer.overflow)?;
        let labels = postprocess::apply_probs(&probs, &cloud, &cfg.postprocess)?;
        write_labels(&labels, out.join(format!("{name}.label")))?;
        let bytes: Vec<u8> = probs.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
        fs::write(out.join(format!("{name}.prob")), bytes)?;
    }
    Ok(())
}

fn eval_cmd(cfg: &Config, pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "label"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .label files in {}", pred.display());
    }
    let mut records = Vec::new();
    let mut per_scan = String::from("scan\ttp\tfp\tfn\ttn\tprecision\trecall\tiou\n");
    for p in &names {
        let file = p.file_name().unwrap();
        let gt_path = gt.join(file);
        let predicted = read_labels(p, &[1])?;
        let truth = read_labels(&gt_path, &cfg.data.snow_ids).with_context(|| format!("ground truth for {}", stem(p)))?;
        let r = confusion(&predicted, &truth).with_context(|| format!("scoring {}", stem(p)))?;
        per_scan.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            stem(p),
            r.tp,
            r.fp,
            r.fn_,
            r.tn,
            r.precision,
            r.recall,
            r.iou
        ));
        records.push(r);
    }
    let agg = aggregate(&records, cfg.eval.aggregation)?;
    prepare_out(cfg, out)?;
    fs::write(out.join("per_scan.tsv"), per_scan)?;
    fs::write(out.join("report.kv"), format_kv(&agg))?;
    let table = format_table(&agg);
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn bench_cmd(cfg: &Config, method: BenchMethod, input: &Path, ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let scans: Vec<PointCloud> = load_scans(cfg, input)?.into_iter().map(|(_, c)| c).collect();
    let (warmup, reps) = (cfg.bench.warmup, cfg.bench.reps);
    let result = match method {
        BenchMethod::Ror => bench(|c| ror(c, &cfg.ror), &scans, warmup, reps)?,
        BenchMethod::Sor => bench(|c| sor(c, &cfg.sor), &scans, warmup, reps)?,
        BenchMethod::Dror => bench(|c| dror(c, &cfg.dror), &scans, warmup, reps)?,
        BenchMethod::Lior => bench(|c| lior(c, &cfg.lior), &scans, warmup, reps)?,
        BenchMethod::Dlior => {
            let mut stream = DliorStream::new(cfg.lior, cfg.dlior)?;
            bench(|c| stream.process(c), &scans, warmup, reps)?
        }
        BenchMethod::Pseudolabel => bench(|c| pseudolabel::generate(c, &cfg.pseudolabel), &scans, warmup, reps)?,
        BenchMethod::Net => {
            let Some(ckpt) = ckpt else {
                bail!("bench net needs --checkpoint");
            };
            let state = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            bench(
                |c| {
                    let probs = infer(&state.net, &state.stats, c, cfg.infer.overflow)?;
                    postprocess::apply_probs(&probs, c, &cfg.postprocess)
                },
                &scans,
                warmup,
                reps,
            )?
        }
    };
    prepare_out(cfg, out)?;
    let report = result.report();
    fs::write(out.join("bench.txt"), &report)?;
    print!("{report}");
    Ok(())
}
