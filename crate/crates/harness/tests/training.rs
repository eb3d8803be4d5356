use std::path::Path;

use lts_harness::config::{DatasetKind, ModelKind, RunMode};
use lts_harness::metrics::{read_csv, IterRecord};
use lts_harness::train::{checkpoint_name, FINAL_CHECKPOINT};
use lts_harness::{train, HarnessError, RunConfig};
use lts_core::lts::RateStrategy;
use tempfile::tempdir;

fn small(out: &Path, mode: RunMode) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.kind = DatasetKind::Synthetic;
    c.data.shape = [1, 8, 8];
    c.data.synthetic_train = 64;
    c.data.synthetic_test = 40;
    c.model = ModelKind::ConvNetS;
    c.mode = mode;
    c.epochs = 4;
    c.batch_size = 16;
    c.lr_decay_epochs = vec![2, 3];
    c.lts.warmup_epochs = 1;
    c.seed = Some(11);
    c.out_dir = out.to_path_buf();
    c.set("mode", &mode.to_string()).unwrap();
    c
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn one_epoch_of_two_iterations() {
    let dir = tempdir().unwrap();
    let mut c = small(dir.path(), RunMode::Lts);
    c.epochs = 1;
    c.lts.warmup_epochs = 0;
    c.data.synthetic_train = 32;
    let r = train(&c).unwrap();
    assert_eq!(r.metrics.iters.len(), 2);
    assert!(r.metrics.iters.iter().all(|m| m.loss.is_finite()));
    assert_eq!(read_csv::<IterRecord>(&dir.path().join("metrics.csv")).unwrap(), r.metrics.iters);
}

#[test]
fn identical_seeds_give_identical_files() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    train(&small(a.path(), RunMode::Lts)).unwrap();
    train(&small(b.path(), RunMode::Lts)).unwrap();
    for f in ["metrics.csv", "accuracy.csv", "sparsity_per_layer.csv", "ticket_ratio.csv", FINAL_CHECKPOINT] {
        assert_eq!(bytes(&a.path().join(f)), bytes(&b.path().join(f)), "{f}");
    }
}

#[test]
fn baseline_equals_lts_at_zero_rate() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let base = train(&small(a.path(), RunMode::Baseline)).unwrap();
    let mut c = small(b.path(), RunMode::Lts);
    c.lts.strategy = RateStrategy::Fixing;
    c.lts.fixed_rate = 0.0;
    let lts = train(&c).unwrap();
    assert!(base.metrics.iters.iter().all(|m| m.wgs == 0.0));
    for (x, y) in base.metrics.iters.iter().zip(&lts.metrics.iters) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
    assert_eq!(base.metrics.accuracy, lts.metrics.accuracy);
}

#[test]
fn lts_sparsity_is_monotone_and_zero_in_warmup() {
    let dir = tempdir().unwrap();
    let mut c = small(dir.path(), RunMode::Lts);
    c.bits = lts_core::quant::BitWidth::new(2).unwrap();
    c.epochs = 6;
    let r = train(&c).unwrap();
    let per_epoch = 4;
    let mut last = 0.0;
    for m in &r.metrics.iters {
        assert!(m.wgs >= last);
        assert_eq!(m.flops_reduction, m.wgs / 2.0);
        if m.iter <= per_epoch * c.lts.warmup_epochs + 1 {
            assert_eq!(m.wgs, 0.0);
        }
        last = m.wgs;
    }
    assert!(last > 0.0, "nothing froze");
    assert!((r.summary.flops_reduction - r.summary.avg_wgs / 2.0).abs() < 1e-12);
}

#[test]
fn resume_is_bit_exact() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let mut c = small(a.path(), RunMode::Lts);
    c.checkpoint_iters = vec![6];
    let full = train(&c).unwrap();
    let mut resumed = small(b.path(), RunMode::Lts);
    resumed.resume = Some(a.path().join(checkpoint_name(6)));
    let r = train(&resumed).unwrap();
    assert_eq!(bytes(&a.path().join(FINAL_CHECKPOINT)), bytes(&b.path().join(FINAL_CHECKPOINT)));
    assert_eq!(full.metrics, r.metrics);
    assert_eq!(bytes(&a.path().join("metrics.csv")), bytes(&b.path().join("metrics.csv")));
}

#[test]
fn random_mode_tracks_the_recorded_trajectory() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let mut lc = small(a.path(), RunMode::Lts);
    lc.bits = lts_core::quant::BitWidth::new(2).unwrap();
    let lts = train(&lc).unwrap();
    let mut rc = small(b.path(), RunMode::Lts);
    rc.bits = lc.bits;
    rc.set("mode", "random").unwrap();
    rc.trajectory = Some(a.path().join("metrics.csv"));
    let rand = train(&rc).unwrap();
    let total: usize = rand.metrics.layers.iter().filter(|l| l.iter == 1).map(|l| l.total).sum();
    for (x, y) in lts.metrics.iters.iter().zip(&rand.metrics.iters) {
        let expected = (x.wgs * total as f64).floor() / total as f64;
        assert_eq!(y.wgs, expected, "iteration {}", x.iter);
    }

    let mut short = small(tempdir().unwrap().path(), RunMode::Lts);
    short.set("mode", "random").unwrap();
    short.epochs = 8;
    short.trajectory = Some(a.path().join("metrics.csv"));
    assert!(train(&short).is_err());
}

#[test]
fn divergence_aborts() {
    let dir = tempdir().unwrap();
    let mut c = small(dir.path(), RunMode::Fp);
    c.sgd.lr = 1e30;
    c.lr_decay_epochs.clear();
    match train(&c) {
        Err(HarnessError::Divergence { iter, loss }) => assert!(iter >= 1 && !loss.is_finite()),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn fp_mode_never_freezes_and_reports_32_bits() {
    let dir = tempdir().unwrap();
    let r = train(&small(dir.path(), RunMode::Fp)).unwrap();
    assert!(r.metrics.iters.iter().all(|m| m.wgs == 0.0));
    assert!(r.metrics.tickets.is_empty());
    assert_eq!(r.summary.bits, 32);
    assert!(r.summary.best_top1 > 0.3, "synthetic data should be learnable: {}", r.summary.best_top1);
}

#[test]
fn config_file_drives_a_run() {
    let dir = tempdir().unwrap();
    let text = format!(
        "data.kind = synthetic\ndata.shape = 1,28,28\ndata.synthetic_train = 32\ndata.synthetic_test = 20\n\
         model = mlp-s\nmode = baseline\nbits = 3\nepochs = 2\nbatch_size = 16\nseed = 4\nout = {}\n",
        dir.path().display()
    );
    let c = RunConfig::parse(&text).unwrap();
    let r = train(&c).unwrap();
    assert_eq!(r.metrics.iters.len(), 4);
    let recorded = RunConfig::from_file(&dir.path().join("config.txt")).unwrap();
    assert_eq!(recorded, c);
}
