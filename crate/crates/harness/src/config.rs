//! Run configuration: flat `key value` text files with dotted keys, a
//! documented default for every key, and hard errors on unknown keys.
//! Input geometry and class count always come from the dataset, never from
//! the config file.

use std::path::Path;

use heterovid_core::loss::DsmConfig;
use heterovid_core::model::{Backbone, ModelConfig};

use crate::synth::Dataset;
use crate::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 5e-4,
            min_learning_rate: 5e-6,
            weight_decay: 0.05,
            epochs: 30,
            warmup_epochs: 6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate > 0.0) {
            return Err(HarnessError::Config("learning rates must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(HarnessError::Config(format!(
                "warmup ({}) exceeds total epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.epochs == 0 {
            return Err(HarnessError::Config("need at least one epoch".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dsm: DsmConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            dsm: DsmConfig::default(),
            optim: OptimConfig::default(),
            batch_size: 16,
            seed: 42,
        }
    }
}

/// Every configurable key with its documentation. The parser rejects
/// anything not listed here.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("model.backbone", "feature extractor: tiny3dconv or identity"),
    ("model.stage_channels", "comma-separated output channels per conv stage, e.g. 4,8"),
    ("model.temporal_stride", "temporal stride applied at every conv stage"),
    ("model.embed_dim", "projection-head embedding dimension"),
    ("model.dam_enabled", "enable the dual-branch attention module"),
    ("model.freq_enabled", "enable the frequency attention branch"),
    ("model.temporal_enabled", "enable the temporal attention branch"),
    ("model.dsm_enabled", "enable the projection head and scaled contrastive objective"),
    ("model.fusion_softmax", "normalize fusion weights with a two-logit softmax"),
    ("model.freq_variance_per_sample", "fitting-stage variance per sample instead of per frame"),
    ("model.epsilon_adv", "fixed adversarial budget of the frequency branch"),
    ("dsm.tau", "similarity temperature"),
    ("dsm.eta", "center of the Gaussian reweighting kernel"),
    ("dsm.beta_ib", "coefficient of the covariance-trace regularizer"),
    ("dsm.alpha_base", "base scale of the classification weight"),
    ("dsm.beta_base", "base scale of the contrastive weight"),
    ("dsm.uniform_weights", "force all contrastive weights to one"),
    ("dsm.differentiable_weights", "backpropagate through the Gaussian weights"),
    ("optim.learning_rate", "peak learning rate"),
    ("optim.min_learning_rate", "cosine floor of the schedule"),
    ("optim.weight_decay", "decoupled weight decay"),
    ("optim.epochs", "total training epochs"),
    ("optim.warmup_epochs", "linear warm-up epochs before the cosine phase"),
    ("optim.beta1", "first-moment decay"),
    ("optim.beta2", "second-moment decay"),
    ("optim.eps", "denominator floor of the update rule"),
    ("train.batch_size", "training and evaluation batch size"),
    ("train.seed", "run seed: init, shuffling, and data generation"),
];

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(HarnessError::Config(format!("cannot parse '{value}' as bool for key '{key}'"))),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.backbone" => {
                self.model.backbone =
                    value.parse::<Backbone>().map_err(HarnessError::Engine)?;
            }
            "model.stage_channels" => {
                self.model.stage_channels = value
                    .split(',')
                    .map(|v| parse_as::<usize>(key, v.trim()))
                    .collect::<Result<_>>()?;
            }
            "model.temporal_stride" => self.model.temporal_stride = parse_as(key, value)?,
            "model.embed_dim" => self.model.embed_dim = parse_as(key, value)?,
            "model.dam_enabled" => self.model.dam_enabled = parse_bool(key, value)?,
            "model.freq_enabled" => self.model.freq_enabled = parse_bool(key, value)?,
            "model.temporal_enabled" => self.model.temporal_enabled = parse_bool(key, value)?,
            "model.dsm_enabled" => self.model.dsm_enabled = parse_bool(key, value)?,
            "model.fusion_softmax" => self.model.fusion_softmax = parse_bool(key, value)?,
            "model.freq_variance_per_sample" => {
                self.model.freq_variance_per_sample = parse_bool(key, value)?
            }
            "model.epsilon_adv" => self.model.epsilon_adv = parse_as(key, value)?,
            "dsm.tau" => self.dsm.tau = parse_as(key, value)?,
            "dsm.eta" => self.dsm.eta = parse_as(key, value)?,
            "dsm.beta_ib" => self.dsm.beta_ib = parse_as(key, value)?,
            "dsm.alpha_base" => self.dsm.alpha_base = parse_as(key, value)?,
            "dsm.beta_base" => self.dsm.beta_base = parse_as(key, value)?,
            "dsm.uniform_weights" => self.dsm.uniform_weights = parse_bool(key, value)?,
            "dsm.differentiable_weights" => {
                self.dsm.differentiable_weights = parse_bool(key, value)?
            }
            "optim.learning_rate" => self.optim.learning_rate = parse_as(key, value)?,
            "optim.min_learning_rate" => self.optim.min_learning_rate = parse_as(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_as(key, value)?,
            "optim.epochs" => self.optim.epochs = parse_as(key, value)?,
            "optim.warmup_epochs" => self.optim.warmup_epochs = parse_as(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse_as(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse_as(key, value)?,
            "optim.eps" => self.optim.eps = parse_as(key, value)?,
            "train.batch_size" => self.batch_size = parse_as(key, value)?,
            "train.seed" => self.seed = parse_as(key, value)?,
            _ => return Err(HarnessError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| HarnessError::Config(format!("malformed line '{line}'")))?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// `key=value` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override '{o}' is not key=value")))?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "model.backbone" => self.model.backbone.as_str().to_string(),
            "model.stage_channels" => self
                .model
                .stage_channels
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "model.temporal_stride" => self.model.temporal_stride.to_string(),
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "model.dam_enabled" => self.model.dam_enabled.to_string(),
            "model.freq_enabled" => self.model.freq_enabled.to_string(),
            "model.temporal_enabled" => self.model.temporal_enabled.to_string(),
            "model.dsm_enabled" => self.model.dsm_enabled.to_string(),
            "model.fusion_softmax" => self.model.fusion_softmax.to_string(),
            "model.freq_variance_per_sample" => self.model.freq_variance_per_sample.to_string(),
            "model.epsilon_adv" => self.model.epsilon_adv.to_string(),
            "dsm.tau" => self.dsm.tau.to_string(),
            "dsm.eta" => self.dsm.eta.to_string(),
            "dsm.beta_ib" => self.dsm.beta_ib.to_string(),
            "dsm.alpha_base" => self.dsm.alpha_base.to_string(),
            "dsm.beta_base" => self.dsm.beta_base.to_string(),
            "dsm.uniform_weights" => self.dsm.uniform_weights.to_string(),
            "dsm.differentiable_weights" => self.dsm.differentiable_weights.to_string(),
            "optim.learning_rate" => self.optim.learning_rate.to_string(),
            "optim.min_learning_rate" => self.optim.min_learning_rate.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.epochs" => self.optim.epochs.to_string(),
            "optim.warmup_epochs" => self.optim.warmup_epochs.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.seed" => self.seed.to_string(),
            _ => unreachable!("value_of called with unlisted key"),
        }
    }

    /// The full documented key set with current values; valid as a config
    /// file.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEY_DOCS {
            out.push_str(&format!("# {doc}\n{key} {}\n", self.value_of(key)));
        }
        out
    }

    /// Fills input geometry and class count from a dataset and validates.
    pub fn resolve_with_data(&self, data: &Dataset) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        model.time_steps = data.spec.time_steps;
        model.in_channels = data.spec.channels;
        model.height = data.spec.height;
        model.width = data.spec.width;
        model.num_classes = data.spec.num_classes;
        model.validate()?;
        self.dsm.validate()?;
        self.optim.validate()?;
        if self.batch_size < 2 {
            return Err(HarnessError::Config("batch size must be at least 2".into()));
        }
        Ok(model)
    }
}

/// Checkpoint header lines for a resolved model.
pub fn checkpoint_header(model: &ModelConfig, dsm: &DsmConfig, seed: u64) -> Vec<(String, String)> {
    let kv = |k: &str, v: String| (k.to_string(), v);
    vec![
        kv("model.backbone", model.backbone.as_str().to_string()),
        kv("model.time_steps", model.time_steps.to_string()),
        kv("model.in_channels", model.in_channels.to_string()),
        kv("model.height", model.height.to_string()),
        kv("model.width", model.width.to_string()),
        kv(
            "model.stage_channels",
            model.stage_channels.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        ),
        kv("model.temporal_stride", model.temporal_stride.to_string()),
        kv("model.num_classes", model.num_classes.to_string()),
        kv("model.embed_dim", model.embed_dim.to_string()),
        kv("model.dam_enabled", model.dam_enabled.to_string()),
        kv("model.freq_enabled", model.freq_enabled.to_string()),
        kv("model.temporal_enabled", model.temporal_enabled.to_string()),
        kv("model.dsm_enabled", model.dsm_enabled.to_string()),
        kv("model.fusion_softmax", model.fusion_softmax.to_string()),
        kv("model.freq_variance_per_sample", model.freq_variance_per_sample.to_string()),
        kv("model.epsilon_adv", model.epsilon_adv.to_string()),
        kv("dsm.tau", dsm.tau.to_string()),
        kv("dsm.eta", dsm.eta.to_string()),
        kv("dsm.beta_ib", dsm.beta_ib.to_string()),
        kv("dsm.alpha_base", dsm.alpha_base.to_string()),
        kv("dsm.beta_base", dsm.beta_base.to_string()),
        kv("dsm.uniform_weights", dsm.uniform_weights.to_string()),
        kv("dsm.differentiable_weights", dsm.differentiable_weights.to_string()),
        kv("train.seed", seed.to_string()),
    ]
}

/// Reconstructs the model and loss configuration from a checkpoint header.
pub fn from_checkpoint_header(header: &[(String, String)]) -> Result<(ModelConfig, DsmConfig)> {
    let get = |key: &str| -> Result<&str> {
        header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| HarnessError::Config(format!("checkpoint header missing '{key}'")))
    };
    let num = |key: &str| -> Result<usize> { parse_as(key, get(key)?) };
    let flt = |key: &str| -> Result<f64> { parse_as(key, get(key)?) };
    let flag = |key: &str| -> Result<bool> { parse_bool(key, get(key)?) };

    let model = ModelConfig {
        backbone: get("model.backbone")?.parse().map_err(HarnessError::Engine)?,
        time_steps: num("model.time_steps")?,
        in_channels: num("model.in_channels")?,
        height: num("model.height")?,
        width: num("model.width")?,
        stage_channels: get("model.stage_channels")?
            .split(',')
            .map(|v| parse_as::<usize>("model.stage_channels", v))
            .collect::<Result<_>>()?,
        temporal_stride: num("model.temporal_stride")?,
        num_classes: num("model.num_classes")?,
        embed_dim: num("model.embed_dim")?,
        dam_enabled: flag("model.dam_enabled")?,
        freq_enabled: flag("model.freq_enabled")?,
        temporal_enabled: flag("model.temporal_enabled")?,
        dsm_enabled: flag("model.dsm_enabled")?,
        fusion_softmax: flag("model.fusion_softmax")?,
        freq_variance_per_sample: flag("model.freq_variance_per_sample")?,
        epsilon_adv: flt("model.epsilon_adv")?,
    };
    let dsm = DsmConfig {
        tau: flt("dsm.tau")?,
        eta: flt("dsm.eta")?,
        beta_ib: flt("dsm.beta_ib")?,
        alpha_base: flt("dsm.alpha_base")?,
        beta_base: flt("dsm.beta_base")?,
        uniform_weights: flag("dsm.uniform_weights")?,
        differentiable_weights: flag("dsm.differentiable_weights")?,
    };
    Ok((model, dsm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_dump_and_parse() {
        let cfg = RunConfig::default();
        let mut parsed = RunConfig::default();
        parsed.apply_text(&cfg.dump()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("model.does_not_exist 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["dsm.tau=0.2".into(), "train.seed=7".into()]).unwrap();
        assert_eq!(cfg.dsm.tau, 0.2);
        assert_eq!(cfg.seed, 7);
        assert!(cfg.apply_overrides(&["garbage".into()]).is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored()  {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a comment\n\noptim.epochs 3 # trailing\n").unwrap();
        assert_eq!(cfg.optim.epochs, 3);
    }

    #[test]
    fn every_documented_key_is_applicable() {
        let cfg = RunConfig::default();
        for (key, _) in KEY_DOCS {
            let mut fresh = RunConfig::default();
            fresh.apply(key, &cfg.value_of(key)).unwrap();
        }
    }

    #[test]
    fn checkpoint_header_round_trips_the_model() {
        let mut model = ModelConfig::default();
        model.stage_channels = vec![3, 5];
        model.fusion_softmax = true;
        let dsm = DsmConfig { tau: 0.11, ..DsmConfig::default() };
        let header = checkpoint_header(&model, &dsm, 9);
        let (m2, d2) = from_checkpoint_header(&header).unwrap();
        assert_eq!(m2, model);
        assert_eq!(d2.tau, 0.11);
    }

    #[test]
    fn warmup_longer_than_training_is_rejected() {
        let optim = OptimConfig { warmup_epochs: 50, epochs: 10, ..OptimConfig::default() };
        assert!(optim.validate().is_err());
    }
}
