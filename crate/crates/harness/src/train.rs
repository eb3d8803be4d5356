//! The training loop: forward, loss, skip-GEMM backward, SGD step, freezing
//! update, metrics. Everything random is derived from the seed and the
//! epoch or iteration number, so a run resumed from a checkpoint continues
//! exactly as the uninterrupted run would have.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use lts_core::nn::{Model, ModelSpec, SgdConfig};
use lts_core::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{model_state, restore_model, Checkpoint, Restore, TensorData};
use crate::config::{ModelKind, Precision, RunConfig, RunMode};
use crate::data::{load_split, Dataset};
use crate::error::{HarnessError, Result};
use crate::metrics::{
    avg_wgs, best_epoch, emit_metrics, read_csv, read_metrics, write_summary, AccuracyRecord,
    EpochRecord, IterRecord, LayerRecord, RunMetrics, Summary, METRICS_CSV,
};
use crate::random_freeze::random_freeze_model;
use crate::ticket::{load_snapshots, save_snapshots, ticket_ratio_curve, LevelSnapshots, LEVELS_FILE};

pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const EVAL_BATCH: usize = 500;

/// Everything a finished run produced; the same data is written to its output directory.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub summary: Summary,
    pub metrics: RunMetrics,
    pub snapshots: LevelSnapshots,
    pub out_dir: PathBuf,
}

/// Checkpoint file name for 1-based iteration `i`.
pub fn checkpoint_name(i: usize) -> String {
    format!("iter{i:07}.ckpt")
}

/// The configured seed, or one from the OS when none is set and the run is
/// not marked deterministic.
pub fn resolve_seed(cfg: &RunConfig) -> u64 {
    match (cfg.seed, cfg.deterministic) {
        (Some(s), _) => s,
        (None, true) => 0,
        (None, false) => rand::random(),
    }
}

/// Derive an independent stream from `seed` for `(purpose, n)`.
fn mix(seed: u64, purpose: u64, n: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0xd1b5_4a32_d192_ed03) ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_RANDOM_FREEZE: u64 = 2;

/// Sample order for 1-based `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, STREAM_SHUFFLE, epoch as u64)));
    order
}

pub fn model_spec(cfg: &RunConfig, sample_shape: [usize; 3]) -> Result<ModelSpec> {
    let bits = cfg.mode.is_quantized().then_some(cfg.bits);
    let mut spec = match cfg.model {
        ModelKind::MlpS => {
            if sample_shape != [1, 28, 28] {
                return Err(HarnessError::invalid(format!(
                    "mlp-s takes 1x28x28 samples, data has {sample_shape:?}"
                )));
            }
            ModelSpec::mlp_s(bits)
        }
        ModelKind::ConvNetS => {
            let [c, h, w] = sample_shape;
            ModelSpec::convnet_s(bits, c, h, w)
        }
    };
    spec.bound_grad = cfg.bound_grad;
    Ok(spec)
}

/// Top-1 accuracy in `[0, 1]` with running batch-norm statistics.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, y): (Tensor<T>, _) = data.batch(chunk);
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Run training as configured and write all outputs to `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg),
        Precision::F64 => train_typed::<f64>(cfg),
    }
}

/// Per-epoch counters carried through checkpoints so a mid-epoch resume
/// still reports whole-epoch totals.
#[derive(Clone, Copy, Debug, Default)]
struct EpochAcc {
    level_changes: u64,
    frozen_level_changes: u64,
    macs_performed: u64,
    macs_baseline: u64,
}

impl EpochAcc {
    fn to_vec(self) -> Vec<u64> {
        vec![
            self.level_changes,
            self.frozen_level_changes,
            self.macs_performed,
            self.macs_baseline,
        ]
    }
}

struct State<T> {
    model: Model<T>,
    iteration: usize,
    acc: EpochAcc,
    metrics: RunMetrics,
    snapshots: LevelSnapshots,
}

fn write_outputs<T: Scalar>(cfg: &RunConfig, st: &State<T>) -> Result<()> {
    emit_metrics(&cfg.out_dir, &st.metrics)?;
    if !st.snapshots.is_empty() {
        save_snapshots(&cfg.out_dir.join(LEVELS_FILE), &st.snapshots)?;
    }
    Ok(())
}

fn save_checkpoint<T: Scalar>(path: &Path, st: &State<T>) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    model_state(&st.model, &mut ckpt);
    ckpt.push("train.iteration", &[1], TensorData::U64(vec![st.iteration as u64]));
    ckpt.push("train.epoch_acc", &[4], TensorData::U64(st.acc.to_vec()));
    ckpt.save(path)
}

fn load_trajectory(path: &Path, needed: usize) -> Result<Vec<f64>> {
    let rows: Vec<IterRecord> = read_csv(path)?;
    if rows.len() < needed {
        return Err(HarnessError::invalid(format!(
            "{}: trajectory has {} iterations, run needs {needed}",
            path.display(),
            rows.len()
        )));
    }
    Ok(rows.into_iter().map(|r| r.wgs).collect())
}

fn train_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let seed = resolve_seed(cfg);
    let (train_set, test_set) = load_split(&cfg.data)?;
    let per_epoch = train_set.len() / cfg.batch_size;
    if per_epoch == 0 {
        return Err(HarnessError::invalid(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let total_iters = per_epoch * cfg.epochs;
    let trajectory = match (cfg.mode, &cfg.trajectory) {
        (RunMode::Random, Some(p)) => Some(load_trajectory(p, total_iters)?),
        _ => None,
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    let mut recorded = cfg.clone();
    recorded.seed = Some(seed);
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), recorded.to_text())
        .map_err(|e| HarnessError::io(cfg.out_dir.join(CONFIG_FILE), e))?;

    let spec = model_spec(cfg, train_set.sample_shape)?;
    let quantized = spec.is_quantized();
    let mut model = Model::<T>::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    model.frozen_bound_grad = cfg.frozen_bound_grad;
    let mut st = State {
        model,
        iteration: 0,
        acc: EpochAcc::default(),
        metrics: RunMetrics::default(),
        snapshots: LevelSnapshots::new(),
    };

    if let Some(resume) = &cfg.resume {
        let ckpt = Checkpoint::load(resume)?;
        restore_model(&mut st.model, &ckpt, resume, Restore::Full)?;
        st.iteration = ckpt.u64_value(resume, "train.iteration")? as usize;
        let acc = ckpt.u64_values(resume, "train.epoch_acc", 4)?;
        st.acc = EpochAcc {
            level_changes: acc[0],
            frozen_level_changes: acc[1],
            macs_performed: acc[2],
            macs_baseline: acc[3],
        };
        let done_epochs = st.iteration / per_epoch;
        let run_dir = resume.parent().unwrap_or(Path::new("."));
        if run_dir.join(METRICS_CSV).exists() {
            let mut m = read_metrics(run_dir)?;
            m.iters.retain(|r| r.iter <= st.iteration);
            m.layers.retain(|r| r.iter <= st.iteration);
            m.accuracy.retain(|r| r.epoch <= done_epochs);
            m.epochs.retain(|r| r.epoch <= done_epochs);
            m.tickets.clear();
            st.metrics = m;
        } else {
            warn!("no metrics next to {}; earlier records are not carried over", resume.display());
        }
        if run_dir.join(LEVELS_FILE).exists() {
            st.snapshots = load_snapshots(&run_dir.join(LEVELS_FILE))?;
            st.snapshots.retain(|&e, _| e <= done_epochs);
        }
        info!("resumed from {} at iteration {}", resume.display(), st.iteration);
    } else {
        if let Some(init) = &cfg.init_checkpoint {
            let ckpt = Checkpoint::load(init)?;
            restore_model(&mut st.model, &ckpt, init, Restore::Params)?;
            st.model.reinit_quantizers()?;
            info!("initialized weights from {}", init.display());
        }
        if quantized {
            let order = epoch_order(seed, 1, train_set.len());
            let (x, _) = train_set.batch::<T>(&order[..cfg.batch_size]);
            st.model.calibrate(&x)?;
            st.snapshots.insert(0, st.model.level_snapshot()?);
        }
    }

    let start_epoch = st.iteration / per_epoch + 1;
    for epoch in start_epoch..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let sgd = SgdConfig { lr, ..cfg.sgd };
        let order = epoch_order(seed, epoch, train_set.len());
        let first = st.iteration - (epoch - 1) * per_epoch;
        for b in first..per_epoch {
            let i = (epoch - 1) * per_epoch + b + 1;
            let (x, y) = train_set.batch::<T>(&order[b * cfg.batch_size..(b + 1) * cfg.batch_size]);
            let (frozen, total) = st.model.frozen_totals();
            let wgs = if total == 0 { 0.0 } else { frozen as f64 / total as f64 };
            let (loss, grads) = st.model.loss_and_grads(&x, &y)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                write_outputs(cfg, &st)?;
                return Err(HarnessError::Divergence { iter: i, loss });
            }
            let flops = grads.flops()?;
            st.acc.macs_performed += flops.performed;
            st.acc.macs_baseline += flops.baseline;
            st.model.sgd_step(&grads, &sgd)?;

            let p = match cfg.mode {
                RunMode::Lts => {
                    let p = cfg.lts.rate(i, per_epoch, cfg.epochs)?;
                    for s in st.model.scheduler_update(cfg.lts.momentum, p)? {
                        st.acc.level_changes += s.ema.level_changes as u64;
                        st.acc.frozen_level_changes += s.ema.frozen_level_changes as u64;
                    }
                    p
                }
                RunMode::Random => {
                    let traj = trajectory.as_deref().expect("loaded for random mode");
                    if i < total_iters {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, STREAM_RANDOM_FREEZE, i as u64));
                        random_freeze_model(&mut st.model, traj, i + 1, &mut rng)?;
                    }
                    0.0
                }
                RunMode::Baseline | RunMode::Fp => 0.0,
            };
            st.iteration = i;
            st.metrics.iters.push(IterRecord {
                iter: i,
                epoch,
                loss,
                wgs,
                p,
                flops_reduction: wgs / 2.0,
            });
            for (layer, w) in st.model.quantized_layers() {
                st.metrics.layers.push(LayerRecord {
                    iter: i,
                    layer,
                    frozen: w.params.frozen_count(),
                    total: w.params.weight.numel(),
                    threshold: w.quant.as_ref().map_or(0.0, |q| q.freeze.threshold),
                });
            }
            if cfg.log_every > 0 && i % cfg.log_every == 0 {
                info!("iter {i} epoch {epoch} loss {loss:.4} wgs {wgs:.4} p {p:.4}");
            }
            if cfg.checkpoint_iters.contains(&i) {
                write_outputs(cfg, &st)?;
                save_checkpoint(&cfg.out_dir.join(checkpoint_name(i)), &st)?;
            }
        }

        let top1 = evaluate(&mut st.model, &test_set)?;
        st.metrics.accuracy.push(AccuracyRecord { epoch, top1 });
        let scheduled = cfg.mode == RunMode::Lts;
        st.metrics.epochs.push(EpochRecord {
            epoch,
            lr,
            level_changes: scheduled.then_some(st.acc.level_changes as usize),
            frozen_level_changes: scheduled.then_some(st.acc.frozen_level_changes as usize),
            macs_performed: st.acc.macs_performed,
            macs_baseline: st.acc.macs_baseline,
        });
        st.acc = EpochAcc::default();
        if quantized {
            st.snapshots.insert(epoch, st.model.level_snapshot()?);
        }
        let (frozen, total) = st.model.frozen_totals();
        info!(
            "epoch {epoch}/{} top1 {:.4} frozen {frozen}/{total} lr {lr}",
            cfg.epochs, top1
        );
    }

    let wgs: Vec<f64> = st.metrics.iters.iter().map(|r| r.wgs).collect();
    let avg = avg_wgs(&wgs)?;
    let best = best_epoch(&st.metrics.accuracy)
        .cloned()
        .ok_or_else(|| HarnessError::invalid("run finished without an evaluated epoch"))?;
    if quantized {
        st.metrics.tickets = ticket_ratio_curve(&st.snapshots, best.epoch)?;
    }
    let (performed, baseline) = st
        .metrics
        .epochs
        .iter()
        .fold((0u64, 0u64), |(p, b), e| (p + e.macs_performed, b + e.macs_baseline));
    let summary = Summary {
        mode: cfg.mode.to_string(),
        model: cfg.model.to_string(),
        bits: if quantized { cfg.bits.bits() } else { 32 },
        seed,
        epochs: cfg.epochs,
        iterations: st.iteration,
        best_epoch: best.epoch,
        best_top1: best.top1,
        final_top1: st.metrics.accuracy.last().map_or(0.0, |r| r.top1),
        avg_wgs: avg,
        flops_reduction: avg / 2.0,
        mac_flops_reduction: if baseline == 0 {
            0.0
        } else {
            (baseline - performed) as f64 / baseline as f64
        },
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    write_outputs(cfg, &st)?;
    write_summary(&cfg.out_dir, &summary)?;
    save_checkpoint(&cfg.out_dir.join(FINAL_CHECKPOINT), &st)?;
    Ok(RunReport {
        summary,
        metrics: st.metrics,
        snapshots: st.snapshots,
        out_dir: cfg.out_dir.clone(),
    })
}

/// Load a model of the configured architecture from a checkpoint written by a run.
pub fn load_model<T: Scalar>(cfg: &RunConfig, sample_shape: [usize; 3], path: &Path) -> Result<Model<T>> {
    let spec = model_spec(cfg, sample_shape)?;
    let mut model = Model::<T>::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.frozen_bound_grad = cfg.frozen_bound_grad;
    restore_model(&mut model, &Checkpoint::load(path)?, path, Restore::Full)?;
    Ok(model)
}
