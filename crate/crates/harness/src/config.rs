//! Run configuration and its line-based `key = value` file format.
//!
//! Blank lines and `#` comments are ignored; keys are dotted
//! (`optim.lr`, `lts.warmup_epochs`, ...). Unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lts_core::lts::{FreezeMode, LtsHyperparams, RateStrategy};
use lts_core::nn::{FrozenBoundGrad, SgdConfig};
use lts_core::quant::{BitWidth, BoundGradMode};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DatasetKind {
    #[default]
    Idx,
    Cifar10Bin,
    Synthetic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModelKind {
    MlpS,
    #[default]
    ConvNetS,
}

/// What the run trains: full precision, or QAT with one of the freezing modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RunMode {
    Fp,
    Baseline,
    #[default]
    Lts,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

macro_rules! names {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(format!("unknown value '{other}', expected one of: {}", [$($name),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self { $(v if *v == $variant => $name,)+ _ => unreachable!() };
                f.write_str(name)
            }
        }
    };
}

names!(DatasetKind, "idx" => DatasetKind::Idx, "cifar10bin" => DatasetKind::Cifar10Bin, "synthetic" => DatasetKind::Synthetic);
names!(ModelKind, "mlp-s" => ModelKind::MlpS, "convnet-s" => ModelKind::ConvNetS);
names!(RunMode, "fp" => RunMode::Fp, "baseline" => RunMode::Baseline, "lts" => RunMode::Lts, "random" => RunMode::Random);
names!(Precision, "32" => Precision::F32, "64" => Precision::F64);

impl RunMode {
    pub fn is_quantized(self) -> bool {
        self != RunMode::Fp
    }

    fn freeze_mode(self) -> Option<FreezeMode> {
        match self {
            RunMode::Fp => None,
            RunMode::Baseline => Some(FreezeMode::Baseline),
            RunMode::Lts => Some(FreezeMode::Lts),
            RunMode::Random => Some(FreezeMode::Random),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Directory holding the standard MNIST / CIFAR-10 file names.
    pub path: PathBuf,
    /// Use only the first `n` training / test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Per-channel normalization; a single value is broadcast. Defaults depend on the kind.
    pub mean: Option<Vec<f64>>,
    pub std: Option<Vec<f64>>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    /// Sample shape for synthetic data.
    pub shape: [usize; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Idx,
            path: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            mean: None,
            std: None,
            synthetic_train: 512,
            synthetic_test: 256,
            shape: [1, 28, 28],
        }
    }
}

impl DataConfig {
    pub fn normalization(&self) -> (Vec<f64>, Vec<f64>) {
        let (mean, std) = match self.kind {
            DatasetKind::Cifar10Bin => (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616]),
            DatasetKind::Idx => (vec![0.1307], vec![0.3081]),
            DatasetKind::Synthetic => (vec![0.0], vec![1.0]),
        };
        (
            self.mean.clone().unwrap_or(mean),
            self.std.clone().unwrap_or(std),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelKind,
    pub bits: BitWidth,
    pub mode: RunMode,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub lts: LtsHyperparams,
    /// `None` draws a seed from the OS unless `deterministic` is set.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub deterministic: bool,
    pub bound_grad: BoundGradMode,
    pub frozen_bound_grad: FrozenBoundGrad,
    /// Full-precision checkpoint whose weights initialize a quantized run.
    pub init_checkpoint: Option<PathBuf>,
    /// Checkpoint of this same run to continue from.
    pub resume: Option<PathBuf>,
    /// `metrics.csv` of an lts run; its `wgs` column drives random mode.
    pub trajectory: Option<PathBuf>,
    /// Iterations after which a checkpoint is written.
    pub checkpoint_iters: Vec<usize>,
    /// Log every `n` iterations; 0 logs once per epoch.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelKind::ConvNetS,
            bits: BitWidth::new(4).expect("valid"),
            mode: RunMode::Lts,
            sgd: SgdConfig::default(),
            epochs: 60,
            batch_size: 128,
            lr_decay_epochs: vec![30, 45],
            lr_decay_factor: 0.1,
            lts: LtsHyperparams::default(),
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            precision: Precision::F32,
            deterministic: true,
            bound_grad: BoundGradMode::Literal,
            frozen_bound_grad: FrozenBoundGrad::Drop,
            init_checkpoint: None,
            resume: None,
            trajectory: None,
            checkpoint_iters: Vec::new(),
            log_every: 0,
        }
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("'{s}': {e}")))
        .collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected a boolean, got '{other}'")),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find(" #").or_else(|| raw.trim_start().starts_with('#').then_some(0)) {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| HarnessError::Config { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            // `mode` and `lts.mode` name the same setting.
            let canonical = if key == "lts.mode" { "mode" } else { key };
            if !seen.insert(canonical.to_string()) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("'{v}': {e}"))
        }
        let path = || -> std::result::Result<Option<PathBuf>, String> {
            Ok((!v.is_empty() && v != "none").then(|| PathBuf::from(v)))
        };
        match key {
            "data.kind" => self.data.kind = v.parse()?,
            "data.path" => self.data.path = PathBuf::from(v),
            "data.train_limit" => self.data.train_limit = Some(num(v)?),
            "data.test_limit" => self.data.test_limit = Some(num(v)?),
            "data.mean" => self.data.mean = Some(parse_list(v)?),
            "data.std" => self.data.std = Some(parse_list(v)?),
            "data.synthetic_train" => self.data.synthetic_train = num(v)?,
            "data.synthetic_test" => self.data.synthetic_test = num(v)?,
            "data.shape" => {
                let dims: Vec<usize> = parse_list(v)?;
                self.data.shape = dims
                    .try_into()
                    .map_err(|_| "expected channels,height,width".to_string())?;
            }
            "model" => self.model = v.parse()?,
            "bits" => self.bits = BitWidth::new(num(v)?).map_err(|e| e.to_string())?,
            "mode" | "lts.mode" => self.mode = v.parse()?,
            "precision" => self.precision = v.parse()?,
            "seed" => self.seed = Some(num(v)?),
            "out" => self.out_dir = PathBuf::from(v),
            "deterministic" => self.deterministic = parse_bool(v)?,
            "epochs" => self.epochs = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "optim.lr" => self.sgd.lr = num(v)?,
            "optim.momentum" => self.sgd.momentum = num(v)?,
            "optim.weight_decay" => self.sgd.weight_decay = num(v)?,
            "optim.bound_lr_scale" => self.sgd.bound_lr_scale = num(v)?,
            "optim.lr_decay_epochs" => self.lr_decay_epochs = parse_list(v)?,
            "optim.lr_decay_factor" => self.lr_decay_factor = num(v)?,
            "lts.m" => self.lts.momentum = num(v)?,
            "lts.warmup_epochs" => self.lts.warmup_epochs = num(v)?,
            "lts.strategy" => self.lts.strategy = v.parse::<RateStrategy>().map_err(|e| e.to_string())?,
            "lts.c" => self.lts.fixed_rate = num(v)?,
            "quant.bound_grad" => {
                self.bound_grad = match v {
                    "literal" => BoundGradMode::Literal,
                    "route" => BoundGradMode::RouteClipped,
                    other => return Err(format!("unknown value '{other}', expected literal or route")),
                }
            }
            "quant.frozen_bound_grad" => {
                self.frozen_bound_grad = match v {
                    "drop" => FrozenBoundGrad::Drop,
                    "keep" => FrozenBoundGrad::Keep,
                    other => return Err(format!("unknown value '{other}', expected drop or keep")),
                }
            }
            "init.checkpoint" => self.init_checkpoint = path()?,
            "resume" => self.resume = path()?,
            "random.trajectory" => self.trajectory = path()?,
            "checkpoint.iters" => self.checkpoint_iters = parse_list(v)?,
            "log_every" => self.log_every = num(v)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        if let Some(mode) = self.mode.freeze_mode() {
            self.lts.mode = mode;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| HarnessError::Config { line: 0, msg };
        if self.epochs == 0 {
            return Err(bad("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(bad("optim.lr_decay_factor must be positive".into()));
        }
        self.sgd.validate()?;
        if self.mode == RunMode::Lts {
            self.lts.validate(self.epochs)?;
        }
        if self.mode == RunMode::Random && self.trajectory.is_none() {
            return Err(bad("random mode needs random.trajectory".into()));
        }
        if self.model == ModelKind::MlpS && self.data.kind == DatasetKind::Cifar10Bin {
            return Err(bad("mlp-s takes 1x28x28 inputs; use convnet-s for CIFAR-10".into()));
        }
        Ok(())
    }

    /// The learning rate used throughout 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.sgd.lr * self.lr_decay_factor.powi(decays as i32)
    }

    /// Serialize back to the file format; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let _ = writeln!(s, "data.kind = {}", d.kind);
        let _ = writeln!(s, "data.path = {}", d.path.display());
        if let Some(n) = d.train_limit {
            let _ = writeln!(s, "data.train_limit = {n}");
        }
        if let Some(n) = d.test_limit {
            let _ = writeln!(s, "data.test_limit = {n}");
        }
        if let Some(m) = &d.mean {
            let _ = writeln!(s, "data.mean = {}", join(m));
        }
        if let Some(m) = &d.std {
            let _ = writeln!(s, "data.std = {}", join(m));
        }
        let _ = writeln!(s, "data.synthetic_train = {}", d.synthetic_train);
        let _ = writeln!(s, "data.synthetic_test = {}", d.synthetic_test);
        let _ = writeln!(s, "data.shape = {}", join(&d.shape));
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "bits = {}", self.bits.bits());
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "precision = {}", self.precision);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(s, "out = {}", self.out_dir.display());
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "optim.lr = {}", self.sgd.lr);
        let _ = writeln!(s, "optim.momentum = {}", self.sgd.momentum);
        let _ = writeln!(s, "optim.weight_decay = {}", self.sgd.weight_decay);
        let _ = writeln!(s, "optim.bound_lr_scale = {}", self.sgd.bound_lr_scale);
        let _ = writeln!(s, "optim.lr_decay_epochs = {}", join(&self.lr_decay_epochs));
        let _ = writeln!(s, "optim.lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(s, "lts.m = {}", self.lts.momentum);
        let _ = writeln!(s, "lts.warmup_epochs = {}", self.lts.warmup_epochs);
        let _ = writeln!(s, "lts.strategy = {}", self.lts.strategy);
        let _ = writeln!(s, "lts.c = {}", self.lts.fixed_rate);
        let bg = match self.bound_grad {
            BoundGradMode::Literal => "literal",
            BoundGradMode::RouteClipped => "route",
        };
        let _ = writeln!(s, "quant.bound_grad = {bg}");
        let fb = match self.frozen_bound_grad {
            FrozenBoundGrad::Drop => "drop",
            FrozenBoundGrad::Keep => "keep",
        };
        let _ = writeln!(s, "quant.frozen_bound_grad = {fb}");
        let _ = writeln!(s, "init.checkpoint = {}", opt(&self.init_checkpoint));
        let _ = writeln!(s, "resume = {}", opt(&self.resume));
        let _ = writeln!(s, "random.trajectory = {}", opt(&self.trajectory));
        let _ = writeln!(s, "checkpoint.iters = {}", join(&self.checkpoint_iters));
        let _ = writeln!(s, "log_every = {}", self.log_every);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.batch_size), (60, 128));
        assert_eq!(c.lr_decay_epochs, vec![30, 45]);
        assert_eq!(c.lts.warmup_epochs, 12);
        assert_eq!(c.lts.momentum, 0.99);
        assert_eq!(c.lts.strategy, RateStrategy::Linear);
        assert_eq!(c.lr_at(30), 0.05);
        assert!((c.lr_at(31) - 0.005).abs() < 1e-15);
        assert!((c.lr_at(46) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn parses_comments_and_dotted_keys() {
        let c = RunConfig::parse(
            "# header\nmodel = mlp-s\nbits = 2  # two bits\n\nlts.mode = baseline\noptim.lr = 0.1\nlts.strategy = sine\n",
        )
        .unwrap();
        assert_eq!(c.model, ModelKind::MlpS);
        assert_eq!(c.bits.bits(), 2);
        assert_eq!(c.mode, RunMode::Baseline);
        assert_eq!(c.lts.mode, FreezeMode::Baseline);
        assert_eq!(c.sgd.lr, 0.1);
        assert_eq!(c.lts.strategy, RateStrategy::Sine);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_lines() {
        let e = RunConfig::parse("bogus = 1").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("unknown key"), "{e}");
        let e = RunConfig::parse("mode = lts\nlts.mode = lts").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("duplicate"), "{e}");
        assert!(RunConfig::parse("epochs").is_err());
        assert!(RunConfig::parse("bits = 9").is_err());
        assert!(RunConfig::parse("mode = random").is_err());
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.seed = Some(7);
        c.data.train_limit = Some(100);
        c.data.mean = Some(vec![0.5]);
        c.checkpoint_iters = vec![3, 9];
        c.init_checkpoint = Some("fp/final.ckpt".into());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
