//! Flat `key = value` run configuration.
//!
//! Resolution order: built-in defaults for the selected loss variant, then
//! the config file, then command-line overrides. The last `loss` value seen
//! anywhere selects the variant defaults before any other key is applied.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vocalid_core::losses::LossVariant;
use vocalid_core::metrics::ProbeConfig;
use vocalid_core::train::{PitchEngine, TrainConfig};

use crate::error::CliError;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Trials sampled for the EER.
    pub pairs: usize,
    pub mnr_queries: usize,
    pub mnr_candidates: usize,
    pub folds: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: 50_000,
            mnr_queries: 1000,
            mnr_candidates: 512,
            folds: 5,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub downmix: bool,
    pub resample: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            downmix: true,
            resample: true,
        }
    }
}

/// Fully resolved configuration shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Segment length used when embedding clips for evaluation.
    pub embed_segment_seconds: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub prepare: PrepareConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn for_variant(variant: LossVariant) -> Self {
        Self {
            seed: 0,
            embed_segment_seconds: 4.0,
            train: TrainConfig::for_variant(variant),
            eval: EvalConfig::default(),
            prepare: PrepareConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            pairs.extend(parse_pairs(&text)?);
        }
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, CliError> {
        let variant = match pairs.iter().rev().find(|(k, _)| canonical_key(k) == "loss") {
            Some((_, v)) => v.parse::<LossVariant>().map_err(|e| CliError::Config(e.to_string()))?,
            None => LossVariant::Cont,
        };
        let mut cfg = Self::for_variant(variant);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.train.model.encoder.n_mels != 80 {
            return Err(CliError::Config("the feature extractor produces 80 mel bins".into()));
        }
        if !(self.embed_segment_seconds > 0.0) {
            return Err(CliError::Config("embed_segment_seconds must be positive".into()));
        }
        let e = &self.eval;
        if e.pairs == 0 || e.mnr_queries == 0 || e.mnr_candidates == 0 {
            return Err(CliError::Config("trial counts must be positive".into()));
        }
        if e.folds < 3 {
            return Err(CliError::Config("folds must be at least 3".into()));
        }
        if !(e.probe.learning_rate > 0.0) {
            return Err(CliError::Config("probe_lr must be positive".into()));
        }
        self.synth.validate()
    }

    /// Applies one key. Keys accept `-` or `_` as separator.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = canonical_key(key);
        let t = &mut self.train;
        let l = &mut t.loss;
        let a = &mut t.augmentation;
        match key.as_str() {
            "loss" => {}
            "seed" => self.seed = num(&key, value)?,
            "tau" | "temperature" => l.temperature = num(&key, value)?,
            "symmetrize_contrastive" => l.symmetrize_contrastive = flag(&key, value)?,
            "uniformity_t" => l.uniformity_t = num(&key, value)?,
            "uniformity_weight" | "gamma" => l.uniformity_weight = num(&key, value)?,
            "invariance_weight" => l.invariance_weight = num(&key, value)?,
            "variance_weight" => l.variance_weight = num(&key, value)?,
            "covariance_weight" => l.covariance_weight = num(&key, value)?,
            "variance_target" => l.variance_target = num(&key, value)?,
            "variance_eps" => l.variance_eps = num(&key, value)?,
            "ema_decay" => l.ema_decay = num(&key, value)?,
            "ema_cosine_anneal" => l.ema_cosine_anneal = flag(&key, value)?,
            "byol_normalize" => l.byol_normalize = flag(&key, value)?,
            "byol_predictor_on_target" => l.byol_predictor_on_target = flag(&key, value)?,
            "byol_symmetrize" => l.byol_symmetrize = flag(&key, value)?,
            "lr" | "learning_rate" => t.optimizer.learning_rate = num(&key, value)?,
            "weight_decay" => t.optimizer.weight_decay = num(&key, value)?,
            "adam_beta1" => t.optimizer.beta1 = num(&key, value)?,
            "adam_beta2" => t.optimizer.beta2 = num(&key, value)?,
            "adam_eps" => t.optimizer.eps = num(&key, value)?,
            "batch_size" => t.batch_size = num(&key, value)?,
            "segment_seconds" => t.segment_seconds = num(&key, value)?,
            "max_epochs" => t.max_epochs = num(&key, value)?,
            "max_steps" => {
                t.max_steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(num(&key, v)?),
                }
            }
            "patience" => t.patience = num(&key, value)?,
            "channels" => {
                t.model.encoder.channels = value
                    .split(',')
                    .map(|c| num(&key, c))
                    .collect::<Result<_, _>>()?
            }
            "kernel_size" => t.model.encoder.kernel_size = num(&key, value)?,
            "projection_dim" => t.model.projection_dim = num(&key, value)?,
            "aug_p" => a.p_apply = num(&key, value)?,
            "gain_min_db" => a.gain_min_db = num(&key, value)?,
            "gain_max_db" => a.gain_max_db = num(&key, value)?,
            "time_mask_max_fraction" => a.time_mask_max_fraction = num(&key, value)?,
            "snr_min_db" => a.noise_snr_range_db.0 = num(&key, value)?,
            "snr_max_db" => a.noise_snr_range_db.1 = num(&key, value)?,
            "pitch_engine" => {
                t.pitch_engine = match value.trim() {
                    "identity" => PitchEngine::Identity,
                    "granular" => PitchEngine::Granular,
                    other => return Err(CliError::Config(format!("pitch_engine: unknown engine {other:?}"))),
                }
            }
            "val_trials" => t.val_trials = num(&key, value)?,
            "val_mnr_queries" => t.val_mnr_queries = num(&key, value)?,
            "val_mnr_candidates" => t.val_mnr_candidates = num(&key, value)?,
            "embed_segment_seconds" => self.embed_segment_seconds = num(&key, value)?,
            "pairs" | "eval_pairs" => self.eval.pairs = num(&key, value)?,
            "mnr_k" | "mnr_queries" => self.eval.mnr_queries = num(&key, value)?,
            "mnr_n" | "mnr_candidates" => self.eval.mnr_candidates = num(&key, value)?,
            "folds" => self.eval.folds = num(&key, value)?,
            "probe_epochs" => self.eval.probe.epochs = num(&key, value)?,
            "probe_lr" => self.eval.probe.learning_rate = num(&key, value)?,
            "downmix" => self.prepare.downmix = flag(&key, value)?,
            "resample" => self.prepare.resample = flag(&key, value)?,
            "singers" => self.synth.singers = num(&key, value)?,
            "clips_per_singer" => self.synth.clips_per_singer = num(&key, value)?,
            "clip_seconds" => self.synth.seconds = num(&key, value)?,
            other => return Err(CliError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

fn canonical_key(k: &str) -> String {
    k.trim().trim_start_matches("--").replace('-', "_").to_ascii_lowercase()
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `key=value` as given to `--set`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}
