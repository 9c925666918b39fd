use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::LengthFilter;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, DEFAULT_BETA, DEFAULT_ENTROPY_FLOOR};
use crate::seq2seq::ModelHyper;

pub const TRAIN_BATCH_SIZE: usize = 256;
pub const REFINE_BATCH_SIZE: usize = 30;

/// Which loop a configuration drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Refine,
}

/// Everything a `train` or `refine` run reads. Built from defaults, then a
/// `key = value` file, then command-line overrides, all through [`TrainConfig::set`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub loss: LossConfig,
    pub beta: f64,
    pub entropy_floor: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub dropout: f64,
    pub factor: f64,
    pub patience: usize,
    pub plateau_threshold: f64,
    pub max_reductions: usize,
    /// Batches between evaluations; 0 means once per epoch.
    pub eval_every: usize,
    pub max_epochs: usize,
    /// Optimizer steps before stopping; 0 means unlimited.
    pub max_steps: usize,
    pub seed: u64,
    pub valid_cap: usize,
    pub max_len: usize,
    pub max_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub min_tokens: usize,
    pub filter_after_unk: bool,
    pub resume_optimizer: bool,
    pub face_from_scratch: bool,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(phase: Phase) -> Self {
        TrainConfig {
            phase,
            loss: LossConfig::ce(),
            beta: DEFAULT_BETA,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
            batch_size: match phase {
                Phase::Train => TRAIN_BATCH_SIZE,
                Phase::Refine => REFINE_BATCH_SIZE,
            },
            lr: 0.001,
            clip: 5.0,
            dropout: 0.1,
            factor: 0.5,
            patience: 3,
            plateau_threshold: 1e-4,
            max_reductions: 3,
            eval_every: 0,
            max_epochs: 30,
            max_steps: 0,
            seed: 0,
            valid_cap: 1000,
            max_len: 20,
            max_vocab: 1000,
            embed: 32,
            hidden: 64,
            layers: 1,
            min_tokens: 0,
            filter_after_unk: false,
            resume_optimizer: false,
            face_from_scratch: false,
            train: None,
            valid: None,
            test: None,
            vocab: None,
            base: None,
            out_dir: PathBuf::from("run"),
        }
    }

    /// Loss configuration with `beta` and `entropy_floor` applied.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            entropy_floor: self.entropy_floor,
            ..self.loss
        }
    }

    pub fn hyper(&self, vocab: usize) -> ModelHyper {
        ModelHyper {
            vocab,
            embed: self.embed,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn filter(&self) -> LengthFilter {
        LengthFilter {
            min_tokens: self.min_tokens,
            after_unk: self.filter_after_unk,
        }
    }

    /// Set one field from its textual form. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::usage(format!("invalid value {value:?} for {key}")))
        }
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let path = || Some(PathBuf::from(value));
        match key.as_str() {
            "loss" => self.loss = value.parse()?,
            "beta" => self.beta = parse(&key, value)?,
            "entropy_floor" => self.entropy_floor = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "clip" => self.clip = parse(&key, value)?,
            "dropout" => self.dropout = parse(&key, value)?,
            "factor" => self.factor = parse(&key, value)?,
            "patience" => self.patience = parse(&key, value)?,
            "plateau_threshold" => self.plateau_threshold = parse(&key, value)?,
            "max_reductions" => self.max_reductions = parse(&key, value)?,
            "eval_every" => self.eval_every = parse(&key, value)?,
            "max_epochs" => self.max_epochs = parse(&key, value)?,
            "max_steps" => self.max_steps = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "valid_cap" => self.valid_cap = parse(&key, value)?,
            "max_len" => self.max_len = parse(&key, value)?,
            "max_vocab" => self.max_vocab = parse(&key, value)?,
            "embed" => self.embed = parse(&key, value)?,
            "hidden" => self.hidden = parse(&key, value)?,
            "layers" => self.layers = parse(&key, value)?,
            "min_tokens" => self.min_tokens = parse(&key, value)?,
            "filter_after_unk" => self.filter_after_unk = parse(&key, value)?,
            "resume_optimizer" => self.resume_optimizer = parse(&key, value)?,
            "face_from_scratch" => self.face_from_scratch = parse(&key, value)?,
            "train" => self.train = path(),
            "valid" => self.valid = path(),
            "test" => self.test = path(),
            "vocab" => self.vocab = path(),
            "base" => self.base = path(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` text. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::usage("patience must be at least 1"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::usage("factor must lie in (0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(Error::usage("lr and clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage("dropout must lie in [0, 1)"));
        }
        if self.max_len == 0 || self.valid_cap == 0 || self.max_epochs == 0 || self.max_reductions == 0 {
            return Err(Error::usage("max_len, valid_cap, max_epochs and max_reductions must be at least 1"));
        }
        if self.phase == Phase::Train && self.loss.variant != crate::loss::LossVariant::Ce && !self.face_from_scratch {
            return Err(Error::usage(format!(
                "training from scratch with {} needs face_from_scratch = true",
                self.loss.name()
            )));
        }
        Ok(())
    }

    /// Resolved configuration, one `key = value` per line, readable by
    /// [`TrainConfig::apply_text`].
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let phase = match self.phase {
            Phase::Train => "train",
            Phase::Refine => "refine",
        };
        let _ = writeln!(s, "# {phase}");
        let fields: [(&str, String); 31] = [
            ("loss", self.loss.name()),
            ("beta", self.beta.to_string()),
            ("entropy_floor", self.entropy_floor.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("clip", self.clip.to_string()),
            ("dropout", self.dropout.to_string()),
            ("factor", self.factor.to_string()),
            ("patience", self.patience.to_string()),
            ("plateau_threshold", self.plateau_threshold.to_string()),
            ("max_reductions", self.max_reductions.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("valid_cap", self.valid_cap.to_string()),
            ("max_len", self.max_len.to_string()),
            ("max_vocab", self.max_vocab.to_string()),
            ("embed", self.embed.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("min_tokens", self.min_tokens.to_string()),
            ("filter_after_unk", self.filter_after_unk.to_string()),
            ("resume_optimizer", self.resume_optimizer.to_string()),
            ("face_from_scratch", self.face_from_scratch.to_string()),
            ("train", opt(&self.train)),
            ("valid", opt(&self.valid)),
            ("test", opt(&self.test)),
            ("vocab", opt(&self.vocab)),
            ("base", opt(&self.base)),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        for (k, v) in fields {
            if !v.is_empty() {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}
