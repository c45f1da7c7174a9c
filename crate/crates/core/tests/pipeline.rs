use desnow::eval::{aggregate, confusion, Aggregation};
use desnow::io::{read_labels, read_scan, write_labels, write_scan, ScanFormat};
use desnow::losses::LossConfig;
use desnow::nnet::{checkpoint, infer, prepare_dataset, train, NetConfig, TrainConfig, TrainState};
use desnow::postprocess::{apply_probs, PostprocessConfig};
use desnow::pseudolabel::{generate, PseudoLabelConfig};
use desnow::rangeproj::{NormKind, OverflowPolicy};
use desnow::synth::{generate_scene, SceneParams};

#[test]
fn scans_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = generate_scene(&SceneParams::desk(4)).unwrap();
    let (bin, label) = (dir.path().join("s.bin"), dir.path().join("s.label"));
    write_scan(&cloud, &bin).unwrap();
    write_labels(cloud.gt_labels.as_ref().unwrap(), &label).unwrap();
    let back = read_scan(&bin, ScanFormat::Xyzir, cloud.meta).unwrap();
    assert_eq!(back.points, cloud.points);
    assert_eq!(&read_labels(&label, &[1]).unwrap(), cloud.gt_labels.as_ref().unwrap());
    let cfg = PseudoLabelConfig::default();
    assert_eq!(generate(&back, &cfg).unwrap(), generate(&cloud, &cfg).unwrap());
}

#[test]
fn train_checkpoint_infer_eval() {
    let clouds: Vec<_> = (0..8).map(|s| generate_scene(&SceneParams::desk(s)).unwrap()).collect();
    let loss = LossConfig::default();
    let (samples, stats) = prepare_dataset(&clouds, &PseudoLabelConfig::default(), &loss, NormKind::MeanStd).unwrap();
    let net = NetConfig { depth: 2, base_channels: 4, ..NetConfig::default() };
    let tc = TrainConfig { epochs: 3, seed: 2, ..TrainConfig::default() };
    let mut state = TrainState::new(&net, stats, tc.seed).unwrap();
    let mut seen = Vec::new();
    let logs = train(&mut state, &samples, &loss, &tc, |l, _| seen.push(l.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert!(logs.iter().all(|l| l.total.is_finite()));
    assert_eq!(state.step, 12);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&state, &path).unwrap();
    let loaded = checkpoint::load_expecting(&path, &net).unwrap();
    assert!(checkpoint::load_expecting(&path, &NetConfig::default()).is_err());

    let pp = PostprocessConfig::default();
    let mut records = Vec::new();
    for cloud in &clouds[..2] {
        let a = infer(&state.net, &state.stats, cloud, OverflowPolicy::Inherit).unwrap();
        let b = infer(&loaded.net, &loaded.stats, cloud, OverflowPolicy::Inherit).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cloud.len());
        let labels = apply_probs(&a, cloud, &pp).unwrap();
        records.push(confusion(&labels, cloud.gt_labels.as_ref().unwrap()).unwrap());
    }
    let agg = aggregate(&records, Aggregation::Pooled).unwrap();
    assert_eq!(agg.scans, 2);
    let total: u64 = records.iter().map(|r| r.total()).sum();
    assert_eq!(total as usize, clouds[0].len() + clouds[1].len());
}
