use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{MsgcError, Result};
use crate::msgc::DEFAULT_GUMBEL_TEMPERATURE;

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "val_dataset",
    "out_dir",
    "init_checkpoint",
    "input_channels",
    "input_size",
    "classes",
    "stem_width",
    "widths",
    "strides",
    "msgc",
    "groups",
    "attention",
    "reduction",
    "saliency_bias_init",
    "gumbel_temperature",
    "lambda",
    "tau_end",
    "warm_fraction",
    "epochs",
    "batch_size",
    "lr_mlp",
    "lr_backbone",
    "momentum",
    "weight_decay",
    "seed",
    "augment",
];

/// A training/evaluation run. `attention` lists 1-based layer numbers within a
/// block; the input shape and class count are only used when no dataset is given.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub val_dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub input_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    pub stem_width: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub msgc: bool,
    pub groups: [usize; 2],
    pub attention: Vec<usize>,
    pub reduction: usize,
    pub saliency_bias_init: f64,
    pub gumbel_temperature: f64,
    pub lambda: f64,
    pub tau_end: f64,
    pub warm_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_mlp: f64,
    pub lr_backbone: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            val_dataset: None,
            out_dir: PathBuf::from("run"),
            init_checkpoint: None,
            input_channels: 3,
            input_size: 32,
            classes: 8,
            stem_width: 16,
            widths: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            msgc: true,
            groups: [1, 4],
            attention: vec![1, 2],
            reduction: 4,
            saliency_bias_init: 3.0,
            gumbel_temperature: DEFAULT_GUMBEL_TEMPERATURE,
            lambda: 30.0,
            tau_end: 0.5,
            warm_fraction: 0.5,
            epochs: 20,
            batch_size: 64,
            lr_mlp: 0.075,
            lr_backbone: 0.015,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment: false,
        }
    }
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| MsgcError::InvalidValue { key: key.into(), reason: format!("cannot parse `{v}`") })
}

fn finite(key: &str, v: &str) -> Result<f64> {
    let x: f64 = scalar(key, v)?;
    if !x.is_finite() {
        return Err(MsgcError::InvalidValue { key: key.into(), reason: "must be finite".into() });
    }
    Ok(x)
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| scalar(key, s.trim())).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(MsgcError::InvalidValue { key: key.into(), reason: format!("expected true/false, got `{v}`") }),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Returns the config and
    /// the keys that fell back to defaults.
    pub fn parse(text: &str) -> Result<(Self, Vec<&'static str>)> {
        let mut c = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| MsgcError::InvalidValue {
                key: format!("line {}", lineno + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let key = *CONFIG_KEYS
                .iter()
                .find(|&&known| known == k)
                .ok_or_else(|| MsgcError::UnknownKey(k.to_string()))?;
            if !seen.insert(key) {
                return Err(MsgcError::InvalidValue { key: key.into(), reason: "given twice".into() });
            }
            c.set(key, v)?;
        }
        c.validate()?;
        let defaulted: Vec<&'static str> = CONFIG_KEYS.iter().copied().filter(|k| !seen.contains(k)).collect();
        for k in &defaulted {
            log::info!("config key `{k}` not set, using default");
        }
        Ok((c, defaulted))
    }

    pub fn load(p: &Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(p)?)?.0)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = path(v),
            "val_dataset" => self.val_dataset = path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "init_checkpoint" => self.init_checkpoint = path(v),
            "input_channels" => self.input_channels = scalar(key, v)?,
            "input_size" => self.input_size = scalar(key, v)?,
            "classes" => self.classes = scalar(key, v)?,
            "stem_width" => self.stem_width = scalar(key, v)?,
            "widths" => self.widths = list(key, v)?,
            "strides" => self.strides = list(key, v)?,
            "msgc" => self.msgc = boolean(key, v)?,
            "groups" => {
                let g = list(key, v)?;
                self.groups = g.as_slice().try_into().map_err(|_| MsgcError::InvalidValue {
                    key: key.into(),
                    reason: format!("expected two group counts, got {}", g.len()),
                })?;
            }
            "attention" => self.attention = list(key, v)?,
            "reduction" => self.reduction = scalar(key, v)?,
            "saliency_bias_init" => self.saliency_bias_init = finite(key, v)?,
            "gumbel_temperature" => self.gumbel_temperature = finite(key, v)?,
            "lambda" => self.lambda = finite(key, v)?,
            "tau_end" => self.tau_end = finite(key, v)?,
            "warm_fraction" => self.warm_fraction = finite(key, v)?,
            "epochs" => self.epochs = scalar(key, v)?,
            "batch_size" => self.batch_size = scalar(key, v)?,
            "lr_mlp" => self.lr_mlp = finite(key, v)?,
            "lr_backbone" => self.lr_backbone = finite(key, v)?,
            "momentum" => self.momentum = finite(key, v)?,
            "weight_decay" => self.weight_decay = finite(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "augment" => self.augment = boolean(key, v)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(MsgcError::InvalidValue { key: key.into(), reason: reason.into() });
        if self.widths.is_empty() {
            return bad("widths", "at least one block is required");
        }
        if self.widths.len() != self.strides.len() {
            return bad("strides", "needs one stride per width");
        }
        if self.attention.iter().any(|&l| l == 0 || l > 2) {
            return bad("attention", "layers are numbered 1 and 2");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "batch norm needs at least 2 samples");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(self.tau_end > 0.0 && self.tau_end <= 1.0) {
            return bad("tau_end", "must lie in (0, 1]");
        }
        if !(self.warm_fraction > 0.0 && self.warm_fraction <= 1.0) {
            return bad("warm_fraction", "must lie in (0, 1]");
        }
        if self.lambda < 0.0 {
            return bad("lambda", "must be non-negative");
        }
        if self.gumbel_temperature <= 0.0 {
            return bad("gumbel_temperature", "must be positive");
        }
        if self.reduction == 0 {
            return bad("reduction", "must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let p = |o: &Option<PathBuf>| o.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut out = String::new();
        for &key in CONFIG_KEYS {
            let v = match key {
                "dataset" => p(&self.dataset),
                "val_dataset" => p(&self.val_dataset),
                "out_dir" => self.out_dir.display().to_string(),
                "init_checkpoint" => p(&self.init_checkpoint),
                "input_channels" => self.input_channels.to_string(),
                "input_size" => self.input_size.to_string(),
                "classes" => self.classes.to_string(),
                "stem_width" => self.stem_width.to_string(),
                "widths" => join(&self.widths),
                "strides" => join(&self.strides),
                "msgc" => self.msgc.to_string(),
                "groups" => join(&self.groups),
                "attention" => join(&self.attention),
                "reduction" => self.reduction.to_string(),
                "saliency_bias_init" => self.saliency_bias_init.to_string(),
                "gumbel_temperature" => self.gumbel_temperature.to_string(),
                "lambda" => self.lambda.to_string(),
                "tau_end" => self.tau_end.to_string(),
                "warm_fraction" => self.warm_fraction.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr_mlp" => self.lr_mlp.to_string(),
                "lr_backbone" => self.lr_backbone.to_string(),
                "momentum" => self.momentum.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "seed" => self.seed.to_string(),
                "augment" => self.augment.to_string(),
                _ => unreachable!(),
            };
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_all_defaults() {
        let (c, defaulted) = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(defaulted.len(), CONFIG_KEYS.len());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.dataset = Some("data/train.msgd".into());
        c.lambda = 10.0;
        c.tau_end = 0.7;
        c.gumbel_temperature = 0.123456789012345;
        c.attention = vec![2];
        c.widths = vec![8, 16];
        c.strides = vec![1, 2];
        c.augment = false;
        let (back, defaulted) = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(defaulted.is_empty());
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("lamda = 3").unwrap_err();
        assert!(matches!(&err, MsgcError::UnknownKey(k) if k == "lamda"));
        assert_eq!(err.category(), "unknown-key");
        assert!(matches!(RunConfig::parse("epochs = two"), Err(MsgcError::InvalidValue { key, .. }) if key == "epochs"));
        assert!(matches!(RunConfig::parse("tau_end = 1.5"), Err(MsgcError::InvalidValue { key, .. }) if key == "tau_end"));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(MsgcError::InvalidValue { key, .. }) if key == "seed"));
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("lambda = inf").is_err());
    }

    #[test]
    fn comments_and_whitespace() {
        let (c, _) = RunConfig::parse("  lambda=60 # strong\n groups = 2, 4\nattention =\n").unwrap();
        assert_eq!(c.lambda, 60.0);
        assert_eq!(c.groups, [2, 4]);
        assert!(c.attention.is_empty());
    }
}
