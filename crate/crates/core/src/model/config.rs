use std::fmt::Write as _;
use std::str::FromStr;

use super::ModelError;
use crate::autodiff::DType;
use crate::decoding::DecoderConfig;
use crate::encoding::{EncoderConfig, Pooling};
use crate::graph::GraphConfig;

/// Every hyperparameter of a run. The text form is one `key = value` per
/// line with `#` comments; keys are the field names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub lstm_layers: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub conv_channels: usize,
    pub t_cap: usize,
    pub pooling: Pooling,
    /// Graph convolution layers `L`.
    pub layers: usize,
    pub relearn: bool,
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Fraction of the training documents held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub precision: DType,
    pub ablate_image: bool,
    pub ablate_graph_learning: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_hidden: 64,
            lstm_layers: 1,
            blocks: 2,
            heads: 4,
            d_ff: 128,
            conv_channels: 16,
            t_cap: 16,
            pooling: Pooling::Mean,
            layers: 1,
            relearn: false,
            eta: 1.0,
            gamma: 0.4,
            lambda: 0.01,
            dropout: 0.1,
            lr: 1e-4,
            batch_size: 1,
            epochs: 30,
            max_steps: 0,
            val_fraction: 0.1,
            seed: 0,
            precision: DType::F64,
            ablate_image: false,
            ablate_graph_learning: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "d_model",
    "d_hidden",
    "lstm_layers",
    "blocks",
    "heads",
    "d_ff",
    "conv_channels",
    "t_cap",
    "pooling",
    "layers",
    "relearn",
    "eta",
    "gamma",
    "lambda",
    "dropout",
    "lr",
    "batch_size",
    "epochs",
    "max_steps",
    "val_fraction",
    "seed",
    "precision",
    "ablate_image",
    "ablate_graph_learning",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

impl ModelConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let v = value.trim();
        let r: Result<(), String> = (|| {
            match key {
                "d_model" => self.d_model = parse(key, v)?,
                "d_hidden" => self.d_hidden = parse(key, v)?,
                "lstm_layers" => self.lstm_layers = parse(key, v)?,
                "blocks" => self.blocks = parse(key, v)?,
                "heads" => self.heads = parse(key, v)?,
                "d_ff" => self.d_ff = parse(key, v)?,
                "conv_channels" => self.conv_channels = parse(key, v)?,
                "t_cap" => self.t_cap = parse(key, v)?,
                "pooling" => self.pooling = parse(key, v)?,
                "layers" => self.layers = parse(key, v)?,
                "relearn" => self.relearn = parse(key, v)?,
                "eta" => self.eta = parse(key, v)?,
                "gamma" => self.gamma = parse(key, v)?,
                "lambda" => self.lambda = parse(key, v)?,
                "dropout" => self.dropout = parse(key, v)?,
                "lr" => self.lr = parse(key, v)?,
                "batch_size" => self.batch_size = parse(key, v)?,
                "epochs" => self.epochs = parse(key, v)?,
                "max_steps" => self.max_steps = parse(key, v)?,
                "val_fraction" => self.val_fraction = parse(key, v)?,
                "seed" => self.seed = parse(key, v)?,
                "precision" => self.precision = parse(key, v)?,
                "ablate_image" => self.ablate_image = parse(key, v)?,
                "ablate_graph_learning" => self.ablate_graph_learning = parse(key, v)?,
                _ => return Err(format!("unknown config key {key:?}")),
            }
            Ok(())
        })();
        r.map_err(ModelError::Config)
    }

    /// Reads the text form over the defaults, then validates.
    pub fn parse_text(text: &str) -> Result<Self, ModelError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every key listed in `text` without validating the result.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ModelError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value).map_err(|e| match e {
                ModelError::Config(m) => ModelError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    /// Text form of one field.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d_model" => self.d_model.to_string(),
            "d_hidden" => self.d_hidden.to_string(),
            "lstm_layers" => self.lstm_layers.to_string(),
            "blocks" => self.blocks.to_string(),
            "heads" => self.heads.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "conv_channels" => self.conv_channels.to_string(),
            "t_cap" => self.t_cap.to_string(),
            "pooling" => self.pooling.to_string(),
            "layers" => self.layers.to_string(),
            "relearn" => self.relearn.to_string(),
            "eta" => self.eta.to_string(),
            "gamma" => self.gamma.to_string(),
            "lambda" => self.lambda.to_string(),
            "dropout" => self.dropout.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "seed" => self.seed.to_string(),
            "precision" => self.precision.as_str().to_string(),
            "ablate_image" => self.ablate_image.to_string(),
            "ablate_graph_learning" => self.ablate_graph_learning.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.eta >= 0.0 && self.gamma >= 0.0) {
            return bad("lambda, eta and gamma must be nonnegative");
        }
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        self.encoder().validate().map_err(|e| ModelError::Config(e.to_string()))?;
        self.graph().validate().map_err(|e| ModelError::Config(e.to_string()))?;
        if self.d_hidden == 0 || self.lstm_layers == 0 {
            return bad("d_hidden and lstm_layers must be positive");
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            blocks: self.blocks,
            heads: self.heads,
            d_ff: self.d_ff,
            conv_channels: self.conv_channels,
            t_cap: self.t_cap,
            pooling: self.pooling,
        }
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            d_model: self.d_model,
            layers: self.layers,
            eta: self.eta,
            gamma: self.gamma,
            relearn: self.relearn,
            learn_adjacency: !self.ablate_graph_learning,
        }
    }

    pub fn decoder(&self, tags: usize) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            lstm_layers: self.lstm_layers,
            tags,
        }
    }
}
