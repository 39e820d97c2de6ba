//! Training configuration and its flat `key = value` file format.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::{BmlMode, Margins};
use crate::error::{Error, Result};
use crate::sampler::{Method, Mods, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// half-cosine from `lr` towards 0 over the stage
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

/// Which rationales the answer stage trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RationaleSource {
    Gold,
    Generated,
}

impl FromStr for RationaleSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(Self::Gold),
            "generated" => Ok(Self::Generated),
            _ => Err(Error::Config(format!("unknown rationale source {s:?}"))),
        }
    }
}

impl fmt::Display for RationaleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gold => "gold",
            Self::Generated => "generated",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    /// rationale-stage epochs
    pub epochs: usize,
    pub answer_epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub max_len_rationale: usize,
    pub max_len_answer: usize,
    pub max_gen_rationale: usize,
    pub max_gen_answer: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub positional: bool,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub momentum: f64,
    /// global gradient-norm clip; 0 disables
    pub clip_norm: f64,
    pub eval_every: usize,
    pub disable_number: bool,
    pub disable_orientation: bool,
    pub disable_unit: bool,
    pub disable_option: bool,
    pub fixed_negatives: bool,
    pub no_vision: bool,
    pub bml_mode: BmlMode,
    pub mods: Mods,
    /// detach positive and negative embeddings in the margin loss
    pub stop_grad_targets: bool,
    pub answer_rationale: RationaleSource,
    /// empty means the bundled lexicons
    pub lexicons: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.3,
            lambda: 0.1,
            lr: 3e-3,
            epochs: 20,
            answer_epochs: 20,
            seed: 42,
            batch_size: 64,
            max_len_rationale: 512,
            max_len_answer: 64,
            max_gen_rationale: 96,
            max_gen_answer: 16,
            d_model: 64,
            d_ff: 128,
            positional: true,
            optimizer: OptimizerKind::Adam,
            schedule: Schedule::Constant,
            momentum: 0.9,
            clip_norm: 5.0,
            eval_every: 1,
            disable_number: false,
            disable_orientation: false,
            disable_unit: false,
            disable_option: false,
            fixed_negatives: false,
            no_vision: false,
            bml_mode: BmlMode::Soft,
            mods: Mods::Count(1),
            stop_grad_targets: false,
            answer_rationale: RationaleSource::Gold,
            lexicons: String::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Margins::new(self.alpha, self.beta)?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.clip_norm < 0.0 {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and clip_norm ≥ 0".into(),
            ));
        }
        let counts = [
            ("epochs", self.epochs),
            ("answer_epochs", self.answer_epochs),
            ("batch_size", self.batch_size),
            ("max_len_rationale", self.max_len_rationale),
            ("max_len_answer", self.max_len_answer),
            ("max_gen_rationale", self.max_gen_rationale),
            ("max_gen_answer", self.max_gen_answer),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("eval_every", self.eval_every),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be ≥ 1")));
            }
        }
        Ok(())
    }

    pub fn margins(&self) -> Result<Margins> {
        Margins::new(self.alpha, self.beta)
    }

    pub fn disabled_methods(&self) -> BTreeSet<Method> {
        [
            (self.disable_number, Method::Number),
            (self.disable_orientation, Method::Orientation),
            (self.disable_unit, Method::Unit),
            (self.disable_option, Method::OptionText),
        ]
        .into_iter()
        .filter_map(|(off, m)| off.then_some(m))
        .collect()
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            fixed_negatives: self.fixed_negatives,
            mods: self.mods,
            disabled: self.disabled_methods(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "answer_epochs" => self.answer_epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_len_rationale" => self.max_len_rationale = parse(key, v)?,
            "max_len_answer" => self.max_len_answer = parse(key, v)?,
            "max_gen_rationale" => self.max_gen_rationale = parse(key, v)?,
            "max_gen_answer" => self.max_gen_answer = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "positional" => self.positional = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "schedule" => self.schedule = v.parse()?,
            "momentum" => self.momentum = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "disable_number" => self.disable_number = parse(key, v)?,
            "disable_orientation" => self.disable_orientation = parse(key, v)?,
            "disable_unit" => self.disable_unit = parse(key, v)?,
            "disable_option" => self.disable_option = parse(key, v)?,
            "fixed_negatives" => self.fixed_negatives = parse(key, v)?,
            "no_vision" => self.no_vision = parse(key, v)?,
            "bml_mode" => self.bml_mode = v.parse()?,
            "mods" => self.mods = v.parse()?,
            "stop_grad_targets" => self.stop_grad_targets = parse(key, v)?,
            "answer_rationale" => self.answer_rationale = v.parse()?,
            "lexicons" => self.lexicons = v.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {raw:?}"),
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_kv(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv(&self) -> String {
        let pairs: Vec<(&str, String)> = vec![
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("answer_epochs", self.answer_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_len_rationale", self.max_len_rationale.to_string()),
            ("max_len_answer", self.max_len_answer.to_string()),
            ("max_gen_rationale", self.max_gen_rationale.to_string()),
            ("max_gen_answer", self.max_gen_answer.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("positional", self.positional.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("schedule", self.schedule.to_string()),
            ("momentum", self.momentum.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("disable_number", self.disable_number.to_string()),
            ("disable_orientation", self.disable_orientation.to_string()),
            ("disable_unit", self.disable_unit.to_string()),
            ("disable_option", self.disable_option.to_string()),
            ("fixed_negatives", self.fixed_negatives.to_string()),
            ("no_vision", self.no_vision.to_string()),
            ("bml_mode", self.bml_mode.to_string()),
            ("mods", self.mods.to_string()),
            ("stop_grad_targets", self.stop_grad_targets.to_string()),
            ("answer_rationale", self.answer_rationale.to_string()),
            ("lexicons", self.lexicons.clone()),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.lambda = 0.01;
        cfg.mods = Mods::All;
        cfg.disable_unit = true;
        cfg.bml_mode = BmlMode::Greedy;
        let back = TrainConfig::parse_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.disabled_methods(), [Method::Unit].into());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            TrainConfig::parse_kv("alpha = 0.5\nbeta = 0.3"),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::parse_kv("lambda = -1").is_err());
        assert!(TrainConfig::parse_kv("colour = red").is_err());
        assert!(matches!(
            TrainConfig::parse_kv("# c\nepochs 3"),
            Err(Error::Parse { line: 2, .. })
        ));
        let cfg = TrainConfig::parse_kv("# comment\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }
}
