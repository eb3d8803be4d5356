use std::path::Path;

use lts_harness::checkpoint::{model_state, restore_model, Checkpoint, Restore, TensorData};
use lts_harness::data::{load_cifar10_bin, load_idx, parse_idx, IDX_IMAGES_MAGIC};
use lts_harness::metrics::{
    emit_metrics, read_metrics, AccuracyRecord, EpochRecord, IterRecord, LayerRecord, RunMetrics,
    TicketRecord,
};
use lts_harness::HarnessError;
use lts_core::nn::{Model, ModelSpec};
use lts_core::quant::BitWidth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

fn idx_bytes(magic: u32, dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

fn write(path: &Path, bytes: &[u8]) {
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn idx_fixture_parses_exactly() {
    let dir = tempdir().unwrap();
    let pixels: Vec<u8> = (0..4 * 784).map(|i| (i % 256) as u8).collect();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write(&img, &idx_bytes(0x803, &[4, 28, 28], &pixels));
    write(&lab, &idx_bytes(0x801, &[4], &[3, 1, 4, 1]));
    let ds = load_idx(&img, &lab, &[0.0], &[1.0]).unwrap();
    assert_eq!(ds.shape(), [4, 1, 28, 28]);
    assert_eq!(ds.labels, vec![3, 1, 4, 1]);
    for (v, &p) in ds.images.iter().zip(&pixels) {
        assert_eq!(*v, (p as f64 / 255.0) as f32);
    }
    let norm = load_idx(&img, &lab, &[0.5], &[0.25]).unwrap();
    assert_eq!(norm.images[255], ((1.0 - 0.5) / 0.25) as f32);
}

#[test]
fn idx_errors_name_offsets() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad");
    let err = parse_idx(&idx_bytes(0x801, &[1], &[0]), &path, IDX_IMAGES_MAGIC).unwrap_err();
    assert!(matches!(err, HarnessError::Format { offset: 0, .. }));
    assert!(err.to_string().contains("expected 0x00000803"), "{err}");

    let err = parse_idx(&[], &path, IDX_IMAGES_MAGIC).unwrap_err();
    assert!(matches!(err, HarnessError::Truncated { offset: 0, .. }), "{err}");

    let short = idx_bytes(0x803, &[2, 28, 28], &[0; 784 + 10]);
    let err = parse_idx(&short, &path, IDX_IMAGES_MAGIC).unwrap_err();
    assert!(matches!(err, HarnessError::Truncated { offset, .. } if offset == short.len() as u64));

    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write(&img, &idx_bytes(0x803, &[1, 2, 2], &[0; 4]));
    write(&lab, &idx_bytes(0x801, &[1], &[10]));
    let err = load_idx(&img, &lab, &[0.0], &[1.0]).unwrap_err();
    assert!(matches!(err, HarnessError::Format { offset: 8, .. }), "{err}");
}

#[test]
fn cifar_fixture_parses_exactly() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    let mut bytes = Vec::new();
    for (label, base) in [(7u8, 0u8), (2, 100)] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| base.wrapping_add((i % 97) as u8)));
    }
    write(&path, &bytes);
    let ds = load_cifar10_bin(&[path.clone()], &[0.0], &[1.0]).unwrap();
    assert_eq!(ds.shape(), [2, 3, 32, 32]);
    assert_eq!(ds.labels, vec![7, 2]);
    // Second record, channel 1, pixel 0 sits at 1 + 3073 + 1024 in the file.
    assert_eq!(ds.images[3072 + 1024], (bytes[3073 + 1 + 1024] as f64 / 255.0) as f32);

    write(&path, &bytes[..3073 + 5]);
    let err = load_cifar10_bin(&[path.clone()], &[0.0], &[1.0]).unwrap_err();
    assert!(matches!(err, HarnessError::Truncated { offset: 3073, .. }), "{err}");

    bytes[3073] = 12;
    write(&path, &bytes);
    let err = load_cifar10_bin(&[path], &[0.0], &[1.0]).unwrap_err();
    assert!(matches!(err, HarnessError::Format { offset: 3073, .. }), "{err}");
}

fn trained_model(bits: Option<u8>) -> Model<f32> {
    let spec = ModelSpec::convnet_s(bits.map(|b| BitWidth::new(b).unwrap()), 1, 6, 6);
    let mut model = Model::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let x = lts_core::Tensor::from_fn(&[4, 1, 6, 6], |i| (i as f32 * 0.37).sin());
    if bits.is_some() {
        model.calibrate(&x).unwrap();
    }
    let (_, grads) = model.loss_and_grads(&x, &[0, 1, 2, 3]).unwrap();
    model.sgd_step(&grads, &Default::default()).unwrap();
    if bits.is_some() {
        model.scheduler_update(0.5, 0.7).unwrap();
    }
    model
}

#[test]
fn checkpoint_round_trips_full_state() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = trained_model(Some(2));
    let mut ckpt = Checkpoint::default();
    model_state(&model, &mut ckpt);
    ckpt.push("train.iteration", &[1], TensorData::U64(vec![17]));
    ckpt.save(&path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"LTSCKPT1");
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.u64_value(&path, "train.iteration").unwrap(), 17);

    let mut fresh = Model::<f32>::new(model.spec.clone(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    restore_model(&mut fresh, &loaded, &path, Restore::Full).unwrap();
    assert_eq!(fresh, model);
}

#[test]
fn checkpoint_rejects_bad_magic_and_mismatched_shapes() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write(&path, b"LTSCKPT0rest");
    assert!(matches!(Checkpoint::load(&path).unwrap_err(), HarnessError::Version { .. }));

    let mut ckpt = Checkpoint::default();
    model_state(&trained_model(Some(4)), &mut ckpt);
    let spec = ModelSpec::convnet_s(Some(BitWidth::new(4).unwrap()), 1, 8, 8);
    let mut other = Model::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let err = restore_model(&mut other, &ckpt, &path, Restore::Full).unwrap_err();
    match err {
        HarnessError::Shape { name, .. } => assert_eq!(name, "l8.weight"),
        e => panic!("unexpected {e}"),
    }

    let mut truncated = ckpt.to_bytes();
    truncated.truncate(truncated.len() - 3);
    let err = Checkpoint::from_bytes(&truncated, &path).unwrap_err();
    assert!(matches!(err, HarnessError::Truncated { .. }));

    let mut f64_model = Model::<f64>::new(trained_model(Some(4)).spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let err = restore_model(&mut f64_model, &ckpt, &path, Restore::Full).unwrap_err();
    assert!(err.to_string().contains("dtype"), "{err}");
}

#[test]
fn params_restore_initializes_a_quantized_model_from_full_precision() {
    let fp = trained_model(None);
    let mut ckpt = Checkpoint::default();
    model_state(&fp, &mut ckpt);
    let spec = ModelSpec::convnet_s(Some(BitWidth::new(2).unwrap()), 1, 6, 6);
    let mut q = Model::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    restore_model(&mut q, &ckpt, Path::new("fp"), Restore::Params).unwrap();
    q.reinit_quantizers().unwrap();
    for ((_, a), (_, b)) in q.weight_layers().zip(fp.weight_layers()) {
        assert_eq!(a.params.weight, b.params.weight);
        assert!(a.quant.is_some());
    }
}

#[test]
fn metrics_files_round_trip_with_exact_headers() {
    let dir = tempdir().unwrap();
    emit_metrics(dir.path(), &RunMetrics::default()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text, "iter,epoch,loss,wgs,p,flops_reduction\n");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("accuracy.csv")).unwrap(),
        "epoch,top1\n"
    );
    assert_eq!(read_metrics(dir.path()).unwrap(), RunMetrics::default());

    let m = RunMetrics {
        iters: vec![
            IterRecord { iter: 1, epoch: 1, loss: 2.302585092994046, wgs: 0.0, p: 0.0, flops_reduction: 0.0 },
            IterRecord { iter: 2, epoch: 1, loss: 1.0 / 3.0, wgs: 0.1 + 0.2, p: 1e-17, flops_reduction: 0.15000000000000002 },
        ],
        accuracy: vec![AccuracyRecord { epoch: 1, top1: 0.987654321 }],
        layers: vec![LayerRecord { iter: 2, layer: 0, frozen: 3, total: 144, threshold: 0.0625 }],
        tickets: vec![TicketRecord { epoch: 0, layer: 0, ratio: 0.75 }],
        epochs: vec![EpochRecord {
            epoch: 1,
            lr: 0.05,
            level_changes: Some(12),
            frozen_level_changes: None,
            macs_performed: 1 << 40,
            macs_baseline: (1 << 40) + 1,
        }],
    };
    emit_metrics(dir.path(), &m).unwrap();
    assert_eq!(read_metrics(dir.path()).unwrap(), m);
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.lines().nth(2).unwrap().starts_with("2,1,0.3333333333333333,0.30000000000000004,"));
}
