//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::extractors::{ExtractorConfig, ExtractorKind};
use crate::model::ModelConfig;
use crate::training::{Precision, TrainConfig};

/// Keys describing the architecture, in serialization order.
pub const MODEL_KEYS: &[&str] = &[
    "num_classes",
    "frames",
    "height",
    "width",
    "channels",
    "extractor",
    "frozen",
    "conv_filters",
    "conv_kernel",
    "vit_patch",
    "vit_dim",
    "vit_heads",
    "vit_depth",
    "vit_mlp",
    "res_channels",
    "res_mid",
    "eff_channels",
    "eff_expand",
    "eff_kernel",
    "eff_se_reduction",
    "feature_dim",
    "lstm_hidden",
    "attn_dim",
    "pool_mode",
];

pub const TRAIN_KEYS: &[&str] =
    &["learning_rate", "batch_size", "max_epochs", "patience", "min_delta", "seed", "precision"];

pub const PATH_KEYS: &[&str] = &["labels"];

/// Parsed `key = value` pairs with their line numbers.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if entries.insert(key.to_string(), (value.trim().to_string(), line_no)).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn reject_unknown(&self, allowed: &[&[&str]]) -> Result<()> {
        for (key, (_, line)) in &self.entries {
            if !allowed.iter().any(|set| set.contains(&key.as_str())) {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value `{v}` for `{key}`: {e}"))),
        }
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_bool(&self, key: &str, slot: &mut bool) -> Result<()> {
        match self.entries.get(key) {
            None => Ok(()),
            Some((v, line)) => {
                *slot = match v.as_str() {
                    "true" => true,
                    "false" => false,
                    _ => return Err(Error::Config(format!("line {line}: `{key}` must be true or false"))),
                };
                Ok(())
            }
        }
    }

    fn set_list(&self, key: &str, slot: &mut Vec<usize>) -> Result<()> {
        if let Some((v, line)) = self.entries.get(key) {
            *slot = v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("line {line}: bad list `{v}` for `{key}`: {e}")))?;
        }
        Ok(())
    }

    pub fn require(&self, keys: &[&str]) -> Result<()> {
        let missing: Vec<&str> = keys.iter().copied().filter(|k| !self.contains(k)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("missing required keys: {}", missing.join(", "))))
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

pub fn model_config_from(kv: &KeyValues) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    let mut e = ExtractorConfig::default();
    kv.set("num_classes", &mut m.num_classes)?;
    kv.set("frames", &mut m.frames)?;
    kv.set("height", &mut m.height)?;
    kv.set("width", &mut m.width)?;
    kv.set("channels", &mut m.channels)?;
    kv.set::<ExtractorKind>("extractor", &mut e.kind)?;
    kv.set_bool("frozen", &mut e.frozen)?;
    kv.set_list("conv_filters", &mut e.conv_filters)?;
    kv.set("conv_kernel", &mut e.conv_kernel)?;
    kv.set("vit_patch", &mut e.vit_patch)?;
    kv.set("vit_dim", &mut e.vit_dim)?;
    kv.set("vit_heads", &mut e.vit_heads)?;
    kv.set("vit_depth", &mut e.vit_depth)?;
    kv.set("vit_mlp", &mut e.vit_mlp)?;
    kv.set("res_channels", &mut e.res_channels)?;
    kv.set("res_mid", &mut e.res_mid)?;
    kv.set("eff_channels", &mut e.eff_channels)?;
    kv.set("eff_expand", &mut e.eff_expand)?;
    kv.set("eff_kernel", &mut e.eff_kernel)?;
    kv.set("eff_se_reduction", &mut e.eff_se_reduction)?;
    kv.set("feature_dim", &mut e.feature_dim)?;
    kv.set("lstm_hidden", &mut m.lstm_hidden)?;
    kv.set("attn_dim", &mut m.attn_dim)?;
    kv.set("pool_mode", &mut m.pool_mode)?;
    m.extractor = e;
    m.validate()?;
    Ok(m)
}

pub fn train_config_from(kv: &KeyValues) -> Result<TrainConfig> {
    let mut t = TrainConfig::default();
    kv.set("learning_rate", &mut t.learning_rate)?;
    kv.set("batch_size", &mut t.batch_size)?;
    kv.set("max_epochs", &mut t.max_epochs)?;
    kv.set("patience", &mut t.patience)?;
    kv.set("min_delta", &mut t.min_delta)?;
    kv.set("seed", &mut t.seed)?;
    kv.set("precision", &mut t.precision)?;
    t.validate()?;
    Ok(t)
}

/// Serializes every architecture key in a fixed order.
pub fn model_config_to_string(m: &ModelConfig) -> String {
    let e = &m.extractor;
    let filters: Vec<String> = e.conv_filters.iter().map(usize::to_string).collect();
    let values: [String; 24] = [
        m.num_classes.to_string(),
        m.frames.to_string(),
        m.height.to_string(),
        m.width.to_string(),
        m.channels.to_string(),
        e.kind.to_string(),
        e.frozen.to_string(),
        filters.join(","),
        e.conv_kernel.to_string(),
        e.vit_patch.to_string(),
        e.vit_dim.to_string(),
        e.vit_heads.to_string(),
        e.vit_depth.to_string(),
        e.vit_mlp.to_string(),
        e.res_channels.to_string(),
        e.res_mid.to_string(),
        e.eff_channels.to_string(),
        e.eff_expand.to_string(),
        e.eff_kernel.to_string(),
        e.eff_se_reduction.to_string(),
        e.feature_dim.to_string(),
        m.lstm_hidden.to_string(),
        m.attn_dim.to_string(),
        m.pool_mode.to_string(),
    ];
    let mut out = String::new();
    for (k, v) in MODEL_KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

pub fn model_config_from_str(text: &str) -> Result<ModelConfig> {
    let kv = KeyValues::parse(text)?;
    kv.reject_unknown(&[MODEL_KEYS])?;
    model_config_from(&kv)
}

/// A full run configuration: architecture, training and paths.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Class-name file; relative paths resolve against the config file.
    pub labels: Option<PathBuf>,
    pub keys: KeyValues,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let keys = KeyValues::parse(text)?;
        keys.reject_unknown(&[MODEL_KEYS, TRAIN_KEYS, PATH_KEYS])?;
        Ok(Self {
            model: model_config_from(&keys)?,
            train: train_config_from(&keys)?,
            labels: keys.raw("labels").map(PathBuf::from),
            keys,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(labels), Some(dir)) = (&config.labels, path.parent()) {
            if labels.is_relative() {
                config.labels = Some(dir.join(labels));
            }
        }
        Ok(config)
    }

    /// Keys every model-building subcommand needs.
    pub fn require_model_keys(&self) -> Result<()> {
        self.keys.require(&["num_classes", "frames"])?;
        if self.model.extractor.kind == ExtractorKind::Precomputed {
            self.keys.require(&["feature_dim"])
        } else {
            self.keys.require(&["height", "width", "channels"])
        }
    }

    pub fn require_train_keys(&self) -> Result<()> {
        self.require_model_keys()?;
        self.keys.require(&["seed", "max_epochs"])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::PoolMode;

    #[test]
    fn parses_comments_and_defaults() {
        let c = RunConfig::parse(
            "# toy run\nnum_classes = 4\nframes = 20 # sampled\nheight=16\nwidth = 16\nchannels = 1\n\nseed = 9\nmax_epochs = 3\nconv_filters = 4, 8\npool_mode = mean_of_attended\n",
        )
        .unwrap();
        assert_eq!(c.model.num_classes, 4);
        assert_eq!(c.model.extractor.conv_filters, vec![4, 8]);
        assert_eq!(c.model.pool_mode, PoolMode::MeanOfAttended);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.batch_size, 32);
        c.require_train_keys().unwrap();
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(RunConfig::parse("learning_rat = 0.1\n").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("seed 1\n").is_err());
        assert!(RunConfig::parse("batch_size = -1\n").is_err());
        assert!(RunConfig::parse("frozen = yes\n").is_err());
        assert!(RunConfig::parse("learning_rate = 0\n").is_err());
    }

    #[test]
    fn missing_required_keys_reported() {
        let c = RunConfig::parse("num_classes = 3\n").unwrap();
        let err = c.require_train_keys().unwrap_err().to_string();
        assert!(err.contains("frames"), "{err}");
    }

    #[test]
    fn model_config_round_trips_through_text() {
        let mut m = ModelConfig::default();
        m.extractor.kind = ExtractorKind::VitToy;
        m.extractor.frozen = true;
        m.extractor.conv_filters = vec![3, 5];
        m.pool_mode = PoolMode::MeanOfAttended;
        let text = model_config_to_string(&m);
        assert_eq!(model_config_from_str(&text).unwrap(), m);
        assert!(model_config_from_str("seed = 3\n").is_err());
    }
}
