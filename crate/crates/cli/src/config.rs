//! `key = value` run configuration: defaults, then a file, then flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use cats_core::backbone::AdapterKind;
use cats_core::data::{generate_domain, random_templates, MtsDataset, SyntheticDomainSpec};
use cats_core::train::TrainConfig;
use cats_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Settings for the synthetic source/target pair written by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_vars: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub n_steps: usize,
    /// Target rotation angle in radians.
    pub theta: f64,
    pub noise_scale: f64,
    pub template_rank: usize,
    pub template_ridge: f64,
    pub template_seed: u64,
    pub rotation_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_vars: 4,
            n_classes: 4,
            n_per_class: 125,
            n_steps: 128,
            theta: std::f64::consts::FRAC_PI_3,
            noise_scale: 1.0,
            template_rank: 1,
            template_ridge: 0.3,
            template_seed: 7,
            rotation_seed: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub data: DataConfig,
}

/// One documented key with its help line.
pub struct KeyDoc {
    pub key: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "window_len", help: "window length L" },
    KeyDoc { key: "vote_count", help: "windows per series at inference (m)" },
    KeyDoc { key: "kernel", help: "temporal convolution kernel size (r), odd" },
    KeyDoc { key: "lr", help: "adapter learning rate" },
    KeyDoc { key: "pretrain_lr", help: "backbone pretraining learning rate" },
    KeyDoc { key: "lambda_corr", help: "correlation alignment weight" },
    KeyDoc { key: "lambda_f", help: "forecasting weight" },
    KeyDoc { key: "pretrain_epochs", help: "source pretraining epochs" },
    KeyDoc { key: "adapt_steps", help: "adaptation steps" },
    KeyDoc { key: "batch_size", help: "windows per batch and domain" },
    KeyDoc { key: "stride", help: "window stride for training" },
    KeyDoc { key: "seed", help: "run seed" },
    KeyDoc { key: "log_every", help: "steps between loss log lines" },
    KeyDoc { key: "d_model", help: "hidden width" },
    KeyDoc { key: "d_ff", help: "feed-forward width" },
    KeyDoc { key: "n_blocks", help: "Transformer blocks (K)" },
    KeyDoc { key: "n_heads", help: "attention heads" },
    KeyDoc { key: "adapter", help: "adapter kind: none, linear or cats" },
    KeyDoc { key: "adapter_rank", help: "bottleneck width of the linear adapter" },
    KeyDoc { key: "n_vars", help: "synthetic variables D" },
    KeyDoc { key: "n_classes", help: "synthetic classes" },
    KeyDoc { key: "n_per_class", help: "synthetic samples per class and domain" },
    KeyDoc { key: "n_steps", help: "synthetic series length T" },
    KeyDoc { key: "theta", help: "target rotation angle in radians" },
    KeyDoc { key: "noise_scale", help: "synthetic noise scale" },
    KeyDoc { key: "template_rank", help: "factor rank of the class templates" },
    KeyDoc { key: "template_ridge", help: "ridge added to the class templates" },
    KeyDoc { key: "template_seed", help: "seed of the class templates" },
    KeyDoc { key: "rotation_seed", help: "seed of the rotation basis" },
];

const NON_NEGATIVE: &[&str] = &["lambda_corr", "lambda_f", "template_ridge"];
const POSITIVE: &[&str] = &["lr", "pretrain_lr", "noise_scale"];

fn type_error(key: &str, reason: impl Into<String>) -> Error {
    Error::TypeError { key: key.to_string(), reason: reason.into() }
}

impl CliConfig {
    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        }
    }

    /// The current value of every key, rendered as it would be written in a
    /// config file.
    pub fn rendered(&self) -> Vec<(&'static str, String)> {
        let map = self.to_map();
        KEYS.iter()
            .map(|k| {
                let v = match &map[k.key] {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.key, v)
            })
            .collect()
    }

    /// Applies `key = value` pairs in order, type-checked against the
    /// current value of each key.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut map = self.to_map();
        for (key, raw) in pairs {
            let slot = map.get_mut(key).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
            *slot = parse_value(key, raw, slot)?;
        }
        let next: CliConfig = serde_json::from_value(Value::Object(map)).map_err(|e| type_error("config", e.to_string()))?;
        next.check()?;
        *self = next;
        Ok(())
    }

    fn check(&self) -> Result<()> {
        let map = self.to_map();
        for &key in NON_NEGATIVE.iter().chain(POSITIVE) {
            let v = map[key].as_f64().expect("numeric key");
            if POSITIVE.contains(&key) && !(v > 0.0) {
                return Err(type_error(key, format!("must be positive, got {v}")));
            }
            if !(v >= 0.0) {
                return Err(type_error(key, format!("must be non-negative, got {v}")));
            }
        }
        self.train.validate()
    }

    /// Synthetic domain with the configured templates, rotated by `theta`.
    pub fn domain(&self, id: &str, theta: f64, seed: u64) -> Result<MtsDataset> {
        let d = &self.data;
        let templates = random_templates(d.n_vars, d.n_classes, d.template_rank, d.template_ridge, d.template_seed)?;
        let spec = SyntheticDomainSpec {
            domain_id: id.to_string(),
            templates,
            theta,
            noise_scale: d.noise_scale,
            n_steps: d.n_steps,
            seed,
            rotation_seed: d.rotation_seed,
        };
        generate_domain(&spec, d.n_per_class)
    }

    /// The unrotated source and the `theta`-rotated target for the run seed.
    pub fn synthetic_pair(&self) -> Result<(MtsDataset, MtsDataset)> {
        let s = self.train.seed;
        let base = self.data.rotation_seed;
        let cfg = CliConfig { data: DataConfig { rotation_seed: base + s, ..self.data.clone() }, ..self.clone() };
        Ok((cfg.domain("source", 0.0, 2 * s + 1000)?, cfg.domain("target", self.data.theta, 2 * s + 1001)?))
    }
}

fn parse_value(key: &str, raw: &str, current: &Value) -> Result<Value> {
    let bad = |what: &str| type_error(key, format!("expected {what}, got `{raw}`"));
    match current {
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|_| bad("a non-negative integer")),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            Ok(Value::from(v))
        }
        Value::String(_) => raw.parse::<AdapterKind>().map(|_| Value::from(raw)).map_err(|_| bad("none, linear or cats")),
        _ => Err(bad("a scalar")),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax { line: i + 1, reason: "expected `key = value`".into() })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::ConfigSyntax { line: i + 1, reason: "empty key or value".into() });
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::DuplicateKey(k.to_string()));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Defaults, then the file at `path`, then `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<CliConfig> {
    let mut cfg = CliConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| crate::with_path(p, e.into()))?;
        let pairs = parse_pairs(&text)?;
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    }
    cfg.apply(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}
