//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and text after `#` are ignored. Every key has a default, so a
//! file only lists what it changes; unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use crate::decomposer::{DecomposeOptions, Exclusions, SelectionRule};
use crate::error::{Result, SlimError};
use crate::io::fnv1a;
use crate::linalg::DampingPolicy;
use crate::model::{ComponentId, ModelConfig, Optimizer, TrainConfig};

/// Where calibration sequences come from and how many are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSpec {
    /// `bundled` for the built-in corpus, otherwise a UTF-8 text file.
    pub corpus: String,
    /// `all`, `first-half` or `second-half` of the calibration split.
    pub split: String,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of the weight initialization before training.
    pub init_seed: u64,
    /// Multiplier applied to the initial gate, up and down weights.
    pub ffn_init_scale: f64,
    pub calibration: CalibrationSpec,
    pub rule: SelectionRule,
    /// γ for the fixed-fraction rule, the energy threshold otherwise.
    pub gamma: f64,
    pub target_ratio: f64,
    pub exclusions: Exclusions,
    pub rank_step: usize,
    /// `greedy` or `uniform`.
    pub allocation: String,
    pub damping: DampingPolicy,
    pub dense_fallback: bool,
    /// Context length used for perplexity.
    pub eval_context: usize,
    /// Cap on evaluation tokens; zero means the whole split.
    pub eval_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig {
                vocab_size: crate::corpus::VOCAB_SIZE,
                d_model: 64,
                d_ff: 256,
                n_layers: 16,
                n_heads: 4,
                max_seq_len: 128,
                rms_norm: true,
            },
            train: TrainConfig::default(),
            init_seed: 0,
            ffn_init_scale: 1.0,
            calibration: CalibrationSpec {
                corpus: "bundled".into(),
                split: "all".into(),
                n_sequences: 32,
                seq_len: 128,
                seed: 0,
            },
            rule: SelectionRule::FixedFraction,
            gamma: 0.15,
            target_ratio: 0.3,
            exclusions: Exclusions::default(),
            rank_step: 16,
            allocation: "greedy".into(),
            damping: DampingPolicy::default(),
            dense_fallback: true,
            eval_context: 128,
            eval_tokens: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SlimError::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "-")
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    if items.is_empty() {
        "-".into()
    } else {
        items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
}

fn parse_component(key: &str, s: &str) -> Result<ComponentId> {
    let bad = || SlimError::config(format!("{key}: expected layers.<l>.<kind>, got {s:?}"));
    let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
    let (l, kind) = rest.split_once('.').ok_or_else(bad)?;
    Ok(ComponentId::new(l.parse().map_err(|_| bad())?, kind.parse()?))
}

impl PipelineConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let c = &self.calibration;
        let (optimizer, beta1, beta2, eps) = match t.optimizer {
            Optimizer::Sgd => ("sgd", 0.9, 0.999, 1e-8),
            Optimizer::Adam { beta1, beta2, eps } => ("adam", beta1, beta2, eps),
        };
        vec![
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.n_layers", m.n_layers.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("model.rms_norm", m.rms_norm.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seq_len", t.seq_len.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.activation_l1", t.activation_l1.to_string()),
            ("train.optimizer", optimizer.to_string()),
            ("train.beta1", beta1.to_string()),
            ("train.beta2", beta2.to_string()),
            ("train.eps", eps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.init_seed", self.init_seed.to_string()),
            ("train.ffn_init_scale", self.ffn_init_scale.to_string()),
            ("calib.corpus", c.corpus.clone()),
            ("calib.split", c.split.clone()),
            ("calib.n_sequences", c.n_sequences.to_string()),
            ("calib.seq_len", c.seq_len.to_string()),
            ("calib.seed", c.seed.to_string()),
            ("rule", self.rule.to_string()),
            ("gamma", self.gamma.to_string()),
            ("target_ratio", self.target_ratio.to_string()),
            ("exclude.kinds", join(&self.exclusions.kinds)),
            ("exclude.leading_layers", self.exclusions.leading_layers.to_string()),
            ("exclude.trailing_layers", self.exclusions.trailing_layers.to_string()),
            ("exclude.components", join(&self.exclusions.components)),
            ("rank_step", self.rank_step.to_string()),
            ("allocation", self.allocation.clone()),
            ("damping", join(&self.damping.ladder)),
            ("dense_fallback", self.dense_fallback.to_string()),
            ("eval.context", self.eval_context.to_string()),
            ("eval.tokens", self.eval_tokens.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        PipelineConfig::default()
            .entries()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Sets one key; the key must already exist.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.vocab_size" => self.model.vocab_size = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "model.rms_norm" => self.model.rms_norm = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.seq_len" => self.train.seq_len = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.activation_l1" => self.train.activation_l1 = parse(key, v)?,
            "train.optimizer" => {
                self.train.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => match self.train.optimizer {
                        a @ Optimizer::Adam { .. } => a,
                        Optimizer::Sgd => Optimizer::adam(),
                    },
                    _ => return Err(SlimError::config(format!("{key}: expected sgd or adam, got {v:?}"))),
                }
            }
            "train.beta1" | "train.beta2" | "train.eps" => {
                let x: f64 = parse(key, v)?;
                if let Optimizer::Adam { beta1, beta2, eps } = &mut self.train.optimizer {
                    match key {
                        "train.beta1" => *beta1 = x,
                        "train.beta2" => *beta2 = x,
                        _ => *eps = x,
                    }
                }
            }
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.init_seed" => self.init_seed = parse(key, v)?,
            "train.ffn_init_scale" => self.ffn_init_scale = parse(key, v)?,
            "calib.corpus" => self.calibration.corpus = v.to_string(),
            "calib.split" => {
                if !["all", "first-half", "second-half"].contains(&v) {
                    return Err(SlimError::config(format!(
                        "{key}: expected all, first-half or second-half, got {v:?}"
                    )));
                }
                self.calibration.split = v.to_string();
            }
            "calib.n_sequences" => self.calibration.n_sequences = parse(key, v)?,
            "calib.seq_len" => self.calibration.seq_len = parse(key, v)?,
            "calib.seed" => self.calibration.seed = parse(key, v)?,
            "rule" => self.rule = v.parse()?,
            "gamma" => self.gamma = parse(key, v)?,
            "target_ratio" => self.target_ratio = parse(key, v)?,
            "exclude.kinds" => self.exclusions.kinds = parse_list(key, v)?,
            "exclude.leading_layers" => self.exclusions.leading_layers = parse(key, v)?,
            "exclude.trailing_layers" => self.exclusions.trailing_layers = parse(key, v)?,
            "exclude.components" => {
                self.exclusions.components = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "-")
                    .map(|s| parse_component(key, s))
                    .collect::<Result<_>>()?
            }
            "rank_step" => self.rank_step = parse(key, v)?,
            "allocation" => {
                if v != "greedy" && v != "uniform" {
                    return Err(SlimError::config(format!(
                        "{key}: expected greedy or uniform, got {v:?}"
                    )));
                }
                self.allocation = v.to_string();
            }
            "damping" => self.damping = DampingPolicy::new(parse_list(key, v)?)?,
            "dense_fallback" => self.dense_fallback = parse(key, v)?,
            "eval.context" => self.eval_context = parse(key, v)?,
            "eval.tokens" => self.eval_tokens = parse(key, v)?,
            _ => return Err(SlimError::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SlimError::config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SlimError::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| SlimError::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SlimError::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Canonical text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// FNV-1a of the canonical text, used to label reports.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.vocab_size < crate::corpus::VOCAB_SIZE {
            return Err(SlimError::config(format!(
                "model.vocab_size must be at least {} for the byte tokenizer",
                crate::corpus::VOCAB_SIZE
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SlimError::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.target_ratio) {
            return Err(SlimError::config(format!(
                "target_ratio {} outside [0, 1)",
                self.target_ratio
            )));
        }
        if self.rank_step == 0 {
            return Err(SlimError::config("rank_step must be positive"));
        }
        if self.calibration.n_sequences == 0 || self.calibration.seq_len < 2 {
            return Err(SlimError::config("calibration needs sequences of length at least 2"));
        }
        if self.calibration.seq_len > self.model.max_seq_len || self.eval_context > self.model.max_seq_len {
            return Err(SlimError::config(
                "calibration and evaluation lengths must fit max_seq_len",
            ));
        }
        if self.eval_context == 0 {
            return Err(SlimError::config("eval.context must be positive"));
        }
        Ok(())
    }

    pub fn decompose_options(&self) -> DecomposeOptions {
        DecomposeOptions {
            damping: self.damping.clone(),
            dense_fallback: self.dense_fallback,
        }
    }

    /// One-line description of the exclusion set for the manifest.
    pub fn exclusions_text(&self) -> String {
        format!(
            "kinds={};leading={};trailing={};components={}",
            join(&self.exclusions.kinds),
            self.exclusions.leading_layers,
            self.exclusions.trailing_layers,
            join(&self.exclusions.components)
        )
    }
}
