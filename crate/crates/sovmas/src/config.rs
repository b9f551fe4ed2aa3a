//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. The optional `preset` key
//! picks the base model (`desk`, `tiny` or `paper`). Values resolve with the
//! precedence command-line flags > file > preset defaults, and layout keys
//! left unset (`n_images`, `regions_per_image`, `d_visual`,
//! `detector_classes`) follow the corpus dimensions when a corpus is known.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sovmas_core::data::FeatureDims;
use sovmas_core::model::ModelConfig;
use sovmas_core::objectives::LossWeights;
use sovmas_core::tensor::ScheduleKind;
use sovmas_core::train::{MaskSetting, TrainConfig, TrainMode};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{source_name}:{line}: expected `key = value`")]
    Syntax { source_name: String, line: usize },
    #[error("{source_name}:{line}: duplicate key `{key}`")]
    Duplicate { source_name: String, line: usize, key: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("missing configuration key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "d_model",
    "d_fusion",
    "d_visual",
    "text_layers",
    "visual_layers",
    "heads",
    "ffn_dim",
    "max_text_len",
    "max_summary_len",
    "n_images",
    "regions_per_image",
    "detector_classes",
    "dropout",
    "label_smoothing",
];

const TRAIN_KEYS: &[&str] = &[
    "mode",
    "steps",
    "batch_size",
    "alpha",
    "beta",
    "mas_weight",
    "schedule",
    "lr",
    "warmup_steps",
    "clip_norm",
    "seed",
    "mask_mode",
    "mrm_probability",
    "sampling_exponent",
    "checkpoint_every",
    "eval_every",
];

const LAYOUT_KEYS: &[&str] = &["n_images", "regions_per_image", "d_visual", "detector_classes"];

/// Ordered key-value pairs from one source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { source_name: source_name.into(), line: k + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { source_name: source_name.into(), line: k + 1 });
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::Duplicate { source_name: source_name.into(), line: k + 1, key: key.into() });
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Ok(Self::parse(&text, &path.display().to_string())?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }

    /// Entries of `over` replace those of `self`.
    pub fn overlay(mut self, over: &KeyValues) -> Self {
        for (k, v) in &over.0 {
            self.0.insert(k.clone(), v.clone());
        }
        self
    }

    fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>, ConfigError>
    where
        V::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| {
                v.parse().map_err(|e: V::Err| ConfigError::Value {
                    key: key.into(),
                    value: v.clone(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }
}

/// Model and training settings after resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Resolves `values` (already merged by precedence) on top of the preset.
    pub fn resolve(values: &KeyValues, dims: Option<&FeatureDims>) -> Result<Self, ConfigError> {
        for key in values.0.keys() {
            if key != "preset" && !MODEL_KEYS.contains(&key.as_str()) && !TRAIN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let mut values = values.clone();
        if let Some(d) = dims {
            let inferred = [d.n_images, d.regions, d.d_visual, d.classes];
            for (key, v) in LAYOUT_KEYS.iter().zip(inferred) {
                values.0.entry(key.to_string()).or_insert_with(|| v.to_string());
            }
        }
        let preset = values.0.get("preset").map_or("desk", String::as_str);
        let model = apply_model(preset_model(preset)?, &values)?;
        let train = apply_train(TrainConfig::default(), &values)?;
        model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Self { model, train })
    }

    /// Full snapshot in the file format; resolving it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = model_to_text(&self.model);
        s.push_str(&train_to_text(&self.train));
        s
    }
}

/// Small CPU-sized model.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 512,
        d_model: 32,
        d_fusion: 32,
        d_visual: 16,
        text_layers: 1,
        visual_layers: 2,
        heads: 2,
        ffn_dim: 64,
        max_text_len: 32,
        max_summary_len: 8,
        n_images: 5,
        regions_per_image: 4,
        detector_classes: 16,
        dropout: 0.0,
        label_smoothing: 0.1,
    }
}

fn preset_model(name: &str) -> Result<ModelConfig, ConfigError> {
    match name {
        "desk" => Ok(desk_model()),
        "tiny" => Ok(ModelConfig::tiny()),
        "paper" => Ok(ModelConfig::paper_default()),
        other => Err(ConfigError::Value { key: "preset".into(), value: other.into(), reason: "expected desk, tiny or paper".into() }),
    }
}

fn apply_model(mut m: ModelConfig, v: &KeyValues) -> Result<ModelConfig, ConfigError> {
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(x) = v.get(stringify!($field))? {
                m.$field = x;
            }
        )*};
    }
    take!(
        vocab_size,
        d_model,
        d_fusion,
        d_visual,
        text_layers,
        visual_layers,
        heads,
        ffn_dim,
        max_text_len,
        max_summary_len,
        n_images,
        regions_per_image,
        detector_classes,
        dropout,
        label_smoothing
    );
    Ok(m)
}

fn apply_train(mut t: TrainConfig, v: &KeyValues) -> Result<TrainConfig, ConfigError> {
    if let Some(x) = v.get::<String>("mode")? {
        t.mode = parse_mode(&x)?;
    }
    if let Some(x) = v.get::<String>("mask_mode")? {
        t.mask = parse_mask(&x)?;
    }
    if let Some(x) = v.get::<String>("schedule")? {
        t.schedule.kind = match x.as_str() {
            "inverse_sqrt" => ScheduleKind::InverseSqrtWarmup,
            "constant" => ScheduleKind::Constant,
            _ => return Err(bad("schedule", &x, "expected inverse_sqrt or constant")),
        };
    }
    let alpha = v.get("alpha")?.unwrap_or(t.weights.alpha);
    let beta = v.get("beta")?.unwrap_or(t.weights.beta);
    t.weights = LossWeights::new(alpha, beta).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    t.schedule.peak_lr = v.get("lr")?.unwrap_or(t.schedule.peak_lr);
    t.schedule.warmup_steps = v.get("warmup_steps")?.unwrap_or(t.schedule.warmup_steps);
    t.steps = v.get("steps")?.unwrap_or(t.steps);
    t.batch_size = v.get("batch_size")?.unwrap_or(t.batch_size);
    t.mas_weight = v.get("mas_weight")?.unwrap_or(t.mas_weight);
    t.clip_norm = v.get("clip_norm")?.unwrap_or(t.clip_norm);
    t.seed = v.get("seed")?.unwrap_or(t.seed);
    t.mrm_probability = v.get("mrm_probability")?.unwrap_or(t.mrm_probability);
    t.sampling_exponent = v.get("sampling_exponent")?.unwrap_or(t.sampling_exponent);
    t.checkpoint_every = v.get("checkpoint_every")?.unwrap_or(t.checkpoint_every);
    t.eval_every = v.get("eval_every")?.unwrap_or(t.eval_every);
    Ok(t)
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value { key: key.into(), value: value.into(), reason: reason.into() }
}

pub fn parse_mode(s: &str) -> Result<TrainMode, ConfigError> {
    match s {
        "mono" | "monolingual" => Ok(TrainMode::Monolingual),
        "multi" | "multilingual" => Ok(TrainMode::Multilingual),
        _ => Err(bad("mode", s, "expected mono or multi")),
    }
}

pub fn parse_mask(s: &str) -> Result<MaskSetting, ConfigError> {
    match s {
        "mim" => Ok(MaskSetting::Mim),
        "mrm" => Ok(MaskSetting::Mrm),
        "off" => Ok(MaskSetting::Off),
        _ => Err(bad("mask_mode", s, "expected mim, mrm or off")),
    }
}

pub fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let rows: [(&str, String); 15] = [
        ("vocab_size", m.vocab_size.to_string()),
        ("d_model", m.d_model.to_string()),
        ("d_fusion", m.d_fusion.to_string()),
        ("d_visual", m.d_visual.to_string()),
        ("text_layers", m.text_layers.to_string()),
        ("visual_layers", m.visual_layers.to_string()),
        ("heads", m.heads.to_string()),
        ("ffn_dim", m.ffn_dim.to_string()),
        ("max_text_len", m.max_text_len.to_string()),
        ("max_summary_len", m.max_summary_len.to_string()),
        ("n_images", m.n_images.to_string()),
        ("regions_per_image", m.regions_per_image.to_string()),
        ("detector_classes", m.detector_classes.to_string()),
        ("dropout", format!("{:?}", m.dropout)),
        ("label_smoothing", format!("{:?}", m.label_smoothing)),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn train_to_text(t: &TrainConfig) -> String {
    let mode = match t.mode {
        TrainMode::Monolingual => "mono",
        TrainMode::Multilingual => "multi",
    };
    let mask = match t.mask {
        MaskSetting::Mim => "mim",
        MaskSetting::Mrm => "mrm",
        MaskSetting::Off => "off",
    };
    let schedule = match t.schedule.kind {
        ScheduleKind::InverseSqrtWarmup => "inverse_sqrt",
        ScheduleKind::Constant => "constant",
    };
    let mut s = String::new();
    let _ = writeln!(s, "mode = {mode}");
    let _ = writeln!(s, "steps = {}", t.steps);
    let _ = writeln!(s, "batch_size = {}", t.batch_size);
    let _ = writeln!(s, "alpha = {:?}", t.weights.alpha);
    let _ = writeln!(s, "beta = {:?}", t.weights.beta);
    let _ = writeln!(s, "mas_weight = {:?}", t.mas_weight);
    let _ = writeln!(s, "schedule = {schedule}");
    let _ = writeln!(s, "lr = {:?}", t.schedule.peak_lr);
    let _ = writeln!(s, "warmup_steps = {}", t.schedule.warmup_steps);
    let _ = writeln!(s, "clip_norm = {:?}", t.clip_norm);
    let _ = writeln!(s, "seed = {}", t.seed);
    let _ = writeln!(s, "mask_mode = {mask}");
    let _ = writeln!(s, "mrm_probability = {:?}", t.mrm_probability);
    let _ = writeln!(s, "sampling_exponent = {:?}", t.sampling_exponent);
    let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
    let _ = writeln!(s, "eval_every = {}", t.eval_every);
    s
}

/// Parses a complete model section; every model key is required.
pub fn model_from_text(text: &str) -> Result<ModelConfig, ConfigError> {
    let values = KeyValues::parse(text, "checkpoint config")?;
    for key in MODEL_KEYS {
        if !values.0.contains_key(*key) {
            return Err(ConfigError::Missing(key.to_string()));
        }
    }
    let m = apply_model(ModelConfig::tiny(), &values)?;
    m.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = KeyValues::parse("# header\n\nsteps = 10 # trailing\n alpha=0.5\n", "t").unwrap();
        assert_eq!(kv.0["steps"], "10");
        assert_eq!(kv.0["alpha"], "0.5");
    }

    #[test]
    fn syntax_errors_name_the_line() {
        let e = KeyValues::parse("steps = 1\nbroken\n", "f.cfg").unwrap_err();
        assert_eq!(e, ConfigError::Syntax { source_name: "f.cfg".into(), line: 2 });
        assert!(matches!(KeyValues::parse("a=1\na=2", "f").unwrap_err(), ConfigError::Duplicate { line: 2, .. }));
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let file = KeyValues::parse("steps = 50\nalpha = 0.3\n", "f").unwrap();
        let mut flags = KeyValues::default();
        flags.set("alpha", 0.7);
        let rc = RunConfig::resolve(&file.overlay(&flags), None).unwrap();
        assert_eq!(rc.train.steps, 50);
        assert_eq!(rc.train.weights.alpha, 0.7);
        assert_eq!(rc.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn layout_follows_corpus_unless_set() {
        let dims = FeatureDims { n_images: 3, regions: 6, d_visual: 8, classes: 12 };
        let rc = RunConfig::resolve(&KeyValues::default(), Some(&dims)).unwrap();
        assert_eq!((rc.model.n_images, rc.model.regions_per_image, rc.model.d_visual, rc.model.detector_classes), (3, 6, 8, 12));
        let kv = KeyValues::parse("n_images = 2", "f").unwrap();
        assert_eq!(RunConfig::resolve(&kv, Some(&dims)).unwrap().model.n_images, 2);
    }

    #[test]
    fn rejects_bad_keys_and_combinations() {
        let kv = KeyValues::parse("bogus = 1", "f").unwrap();
        assert_eq!(RunConfig::resolve(&kv, None).unwrap_err(), ConfigError::UnknownKey("bogus".into()));
        let kv = KeyValues::parse("mask_mode = off\nbeta = 1", "f").unwrap();
        assert!(matches!(RunConfig::resolve(&kv, None), Err(ConfigError::Invalid(_))));
        let kv = KeyValues::parse("steps = many", "f").unwrap();
        assert!(matches!(RunConfig::resolve(&kv, None), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn snapshot_round_trips() {
        let kv = KeyValues::parse("preset = tiny\nmode = mono\nmask_mode = mrm\nlr = 0.002\ndropout = 0.15", "f").unwrap();
        let rc = RunConfig::resolve(&kv, None).unwrap();
        let again = RunConfig::resolve(&KeyValues::parse(&rc.to_text(), "snap").unwrap(), None).unwrap();
        assert_eq!(rc, again);
        assert_eq!(model_from_text(&model_to_text(&rc.model)).unwrap(), rc.model);
    }

    #[test]
    fn model_text_requires_every_key() {
        let text = model_to_text(&ModelConfig::tiny()).replace("heads = 2\n", "");
        assert_eq!(model_from_text(&text).unwrap_err(), ConfigError::Missing("heads".into()));
    }
}
