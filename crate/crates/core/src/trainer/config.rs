use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapter::{DEFAULT_ALPHA, DEFAULT_RANK};
use crate::error::{Error, Result};
use crate::model::{AdapterTargets, GlyphTransformerConfig};

use super::augment::Augment;

/// How a task is learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Adapters with trainable importance, ℓ1 shrinkage and pruning.
    #[default]
    Dynamic,
    /// The same adapters without shrinkage or pruning.
    FixedRank,
    /// No adapters; every backbone tensor trains.
    FullFt,
}

impl Mode {
    pub fn uses_adapters(self) -> bool {
        self != Mode::FullFt
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Mode::Dynamic),
            "fixed_rank" => Ok(Mode::FixedRank),
            "full_ft" => Ok(Mode::FullFt),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected dynamic, fixed_rank or full_ft)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dynamic => "dynamic",
            Mode::FixedRank => "fixed_rank",
            Mode::FullFt => "full_ft",
        })
    }
}

/// Threshold of the ℓ1 proximal step on importance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShrinkRule {
    /// `τ = λ·lr` for every direction.
    Scalar,
    /// `τᵢ = λ·lr/(√v̂ᵢ + ε)`, AdamW's per-coordinate step.
    #[default]
    Preconditioned,
}

/// Keys accepted in a config file, in manifest order.
pub const CONFIG_KEYS: [&str; 14] = [
    "lr",
    "weight_decay",
    "clip_norm",
    "micro_batch",
    "accumulation_steps",
    "max_epochs",
    "patience",
    "lambda",
    "prune_epsilon",
    "rank",
    "alpha",
    "mode",
    "seed",
    "tasks",
];

/// Optimizer, regularization and protocol settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// ℓ1 strength on importance weights.
    pub lambda: f64,
    /// `None` disables pruning.
    pub prune_epsilon: Option<f64>,
    pub rank: usize,
    pub alpha: f64,
    pub mode: Mode,
    pub seed: u64,
    pub tasks: Vec<PathBuf>,

    /// Model shape; `n_classes` is replaced per task.
    pub model: GlyphTransformerConfig,
    pub targets: AdapterTargets,
    /// Keep every importance weight fixed at 1.
    pub freeze_importance: bool,
    pub shrink: ShrinkRule,
    /// Epochs trained before shrinkage starts.
    pub shrink_warmup_epochs: usize,
    /// Fold adapters into the backbone after each task.
    pub merge: bool,
    pub augment: Option<Augment>,
    /// Hard cap on optimizer steps per task.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            micro_batch: 1,
            accumulation_steps: 2,
            max_epochs: 30,
            patience: 5,
            lambda: 1e-3,
            prune_epsilon: Some(1e-3),
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            mode: Mode::Dynamic,
            seed: 0,
            tasks: Vec::new(),
            model: GlyphTransformerConfig::default(),
            targets: AdapterTargets::default(),
            freeze_importance: false,
            shrink: ShrinkRule::Preconditioned,
            shrink_warmup_epochs: 1,
            merge: true,
            augment: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings for a multi-billion-parameter backbone: lr 5e-6.
    pub fn large_model_profile() -> Self {
        Self {
            lr: 5e-6,
            ..Self::default()
        }
    }

    /// Samples per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if self.micro_batch < 1 || self.accumulation_steps < 1 {
            return bad("micro_batch and accumulation_steps must be >= 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if let Some(e) = self.prune_epsilon {
            if !(e >= 0.0) {
                return bad(format!("prune_epsilon must be >= 0, got {e}"));
            }
        }
        if self.rank < 1 {
            return bad("rank must be >= 1".into());
        }
        if self.mode.uses_adapters() && !self.targets.attention && !self.targets.mlp {
            return bad("adapter modes need at least one adapted matrix group".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines. Unknown or repeated keys are errors;
    /// missing keys keep their defaults. Task paths are kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: key {key:?} given twice", n + 1)));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative task paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for t in &mut cfg.tasks {
            if t.is_relative() {
                *t = dir.join(&*t);
            }
        }
        Ok(cfg)
    }

    /// Sets one file key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "micro_batch" => self.micro_batch = num(key, value)?,
            "accumulation_steps" => self.accumulation_steps = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "prune_epsilon" => {
                self.prune_epsilon = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "rank" => self.rank = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "tasks" => {
                self.tasks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The file keys as `key = value` lines, in [`CONFIG_KEYS`] order.
    pub fn to_file_text(&self) -> String {
        let tasks: Vec<String> = self.tasks.iter().map(|p| p.display().to_string()).collect();
        let values = [
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.clip_norm.to_string(),
            self.micro_batch.to_string(),
            self.accumulation_steps.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.lambda.to_string(),
            self.prune_epsilon.map_or("none".to_string(), |e| e.to_string()),
            self.rank.to_string(),
            self.alpha.to_string(),
            self.mode.to_string(),
            self.seed.to_string(),
            tasks.join(","),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Every resolved setting, including those without a file key.
    pub fn manifest(&self) -> String {
        let m = &self.model;
        let mut s = self.to_file_text();
        s += &format!(
            "model = {}x{} patch {} d_model {} heads {} layers {} d_ff {}\n",
            m.image_side, m.image_side, m.patch_side, m.d_model, m.n_heads, m.n_layers, m.d_ff
        );
        s += &format!("adapt_attention = {}\n", self.targets.attention);
        s += &format!("adapt_mlp = {}\n", self.targets.mlp);
        s += &format!("freeze_importance = {}\n", self.freeze_importance);
        s += &format!("shrink = {:?}\n", self.shrink);
        s += &format!("shrink_warmup_epochs = {}\n", self.shrink_warmup_epochs);
        s += &format!("merge = {}\n", self.merge);
        s += &format!("augment = {}\n", self.augment.is_some());
        if let Some(n) = self.max_steps {
            s += &format!("max_steps = {n}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.effective_batch(), 2);
        assert_eq!((c.rank, c.alpha), (8, 16.0));
        assert_eq!(TrainConfig::large_model_profile().lr, 5e-6);
    }

    #[test]
    fn parses_every_key() {
        let text = "# run\nlr = 0.01\nweight_decay=0\nclip_norm = 2\nmicro_batch = 4\n\
                    accumulation_steps = 1\nmax_epochs = 3\npatience = 1\nlambda = 1e-2\n\
                    prune_epsilon = none\nrank = 4\nalpha = 8\nmode = full_ft\nseed = 7\n\
                    tasks = a, b/c  # two\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.micro_batch, 4);
        assert_eq!(c.prune_epsilon, None);
        assert_eq!(c.mode, Mode::FullFt);
        assert_eq!(c.tasks, vec![PathBuf::from("a"), PathBuf::from("b/c")]);
        assert_eq!(TrainConfig::parse(&c.to_file_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_files() {
        for text in ["lr = 1e-3\nlr = 2e-3", "learning_rate = 1", "lr", "lr = -1", "mode = lora", "rank = x"] {
            assert!(matches!(TrainConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
