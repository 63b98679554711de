//! Pipeline configuration: one file covering every stage, each value
//! defaulting to the published recipe. Files may be JSON (the form the
//! manifest echoes) or `key = value` lines with optional dotted section
//! prefixes. Unknown keys are rejected with a nearest-known-key
//! suggestion; command-line flags override file values; the fully
//! resolved config lands in the run manifest, and a manifest file fed
//! back through `--config` resolves to the run it recorded.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spatok_core::codebook::{CodebookUpdate, VqVaeConfig};
use spatok_core::losses::LossWeights;
use spatok_core::model::ModelConfig;
use spatok_core::scene::SceneConfig;
use spatok_core::train::TrainConfig;

#[derive(Debug)]
pub enum ConfigError {
    Io { path: String, source: std::io::Error },
    /// Unknown key, type mismatch, or unreadable syntax: a usage error.
    Parse { message: String },
    /// Well-formed config with an unacceptable value.
    Invalid { message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => write!(f, "{path}: {source}"),
            ConfigError::Parse { message } => write!(f, "{message}"),
            ConfigError::Invalid { message } => write!(f, "{message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub depth_near: f64,
    pub depth_far: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let base = SceneConfig::default();
        SceneSection {
            height: base.height,
            width: base.width,
            min_objects: base.object_count_range.0,
            max_objects: base.object_count_range.1,
            depth_near: base.depth_range.0,
            depth_far: base.depth_range.1,
        }
    }
}

/// Dataset extent for `gen-data`: `offset` shifts the generator index
/// stream so train and eval sets never share a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    pub offset: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { count: 2000, offset: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqVaeSection {
    pub k: usize,
    pub e: usize,
    pub hidden: usize,
    pub patch_size: usize,
    pub steps: usize,
    pub batch_maps: usize,
    pub lr: f64,
    pub beta: f64,
    pub update: String,
}

impl Default for VqVaeSection {
    fn default() -> Self {
        let base = VqVaeConfig::default();
        VqVaeSection {
            k: base.k,
            e: base.e,
            hidden: base.hidden,
            patch_size: base.patch_size,
            steps: base.steps,
            batch_maps: base.batch_maps,
            lr: base.lr,
            beta: base.beta,
            update: String::from("loss"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub feedforward: usize,
    pub max_len: usize,
    pub d_feat: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::default();
        ModelSection {
            d_model: base.d_model,
            layers: base.layers,
            heads: base.heads,
            feedforward: base.feedforward,
            max_len: base.max_len,
            d_feat: base.d_feat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub accum: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub lambda_m: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_r: f64,
    pub seg_ce_weight: f64,
    pub seg_dice_weight: f64,
    pub exclude_depth_codes_from_llm: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        let w = base.weights;
        TrainSection {
            steps: base.steps,
            batch: base.batch,
            accum: base.accum,
            lr: base.lr,
            warmup_frac: base.warmup_frac,
            clip_norm: base.clip_norm,
            lambda_m: w.lambda_m,
            lambda_t: w.lambda_t,
            lambda_c: w.lambda_c,
            lambda_d: w.lambda_d,
            lambda_r: w.lambda_r,
            seg_ce_weight: w.seg_ce_weight,
            seg_dice_weight: w.seg_dice_weight,
            exclude_depth_codes_from_llm: base.exclude_depth_codes_from_llm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Generation budget: the depth block plus the longest answer, with
    /// slack.
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { max_new: 112 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSection,
    pub scene: SceneSection,
    pub vqvae: VqVaeSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.scene.height,
            width: self.scene.width,
            object_count_range: (self.scene.min_objects, self.scene.max_objects),
            depth_range: (self.scene.depth_near, self.scene.depth_far),
            seed: self.seed,
            ..SceneConfig::default()
        }
    }

    pub fn vqvae_config(&self) -> Result<VqVaeConfig, ConfigError> {
        let update = match self.vqvae.update.as_str() {
            "loss" => CodebookUpdate::Loss,
            "ema" => CodebookUpdate::Ema,
            other => {
                return Err(ConfigError::Invalid {
                    message: format!("vqvae.update must be \"loss\" or \"ema\", got \"{other}\""),
                })
            }
        };
        Ok(VqVaeConfig {
            k: self.vqvae.k,
            e: self.vqvae.e,
            hidden: self.vqvae.hidden,
            patch_size: self.vqvae.patch_size,
            steps: self.vqvae.steps,
            batch_maps: self.vqvae.batch_maps,
            lr: self.vqvae.lr,
            beta: self.vqvae.beta,
            update,
            seed: self.seed,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            layers: self.model.layers,
            heads: self.model.heads,
            feedforward: self.model.feedforward,
            image_patch: self.vqvae.patch_size,
            max_len: self.model.max_len,
            d_feat: self.model.d_feat,
            dropout: 0.0,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            accum: t.accum,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            clip_norm: t.clip_norm,
            seed: self.seed,
            weights: LossWeights {
                lambda_m: t.lambda_m,
                lambda_t: t.lambda_t,
                lambda_c: t.lambda_c,
                lambda_d: t.lambda_d,
                lambda_r: t.lambda_r,
                seg_ce_weight: t.seg_ce_weight,
                seg_dice_weight: t.seg_dice_weight,
            },
            exclude_depth_codes_from_llm: t.exclude_depth_codes_from_llm,
        }
    }
}

/// Section names paired with their field names; "" is the top level.
/// Drives bare-key placement in key=value files and typo suggestions.
const SECTION_FIELDS: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    ("data", &["count", "offset"]),
    (
        "scene",
        &["height", "width", "min_objects", "max_objects", "depth_near", "depth_far"],
    ),
    (
        "vqvae",
        &["k", "e", "hidden", "patch_size", "steps", "batch_maps", "lr", "beta", "update"],
    ),
    ("model", &["d_model", "layers", "heads", "feedforward", "max_len", "d_feat"]),
    (
        "train",
        &[
            "steps",
            "batch",
            "accum",
            "lr",
            "warmup_frac",
            "clip_norm",
            "lambda_m",
            "lambda_t",
            "lambda_c",
            "lambda_d",
            "lambda_r",
            "seg_ce_weight",
            "seg_dice_weight",
            "exclude_depth_codes_from_llm",
        ],
    ),
    ("eval", &["max_new"]),
];

fn known_keys() -> impl Iterator<Item = &'static str> {
    SECTION_FIELDS
        .iter()
        .flat_map(|(section, fields)| {
            core::iter::once(*section).chain(fields.iter().copied())
        })
        .filter(|k| !k.is_empty())
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut row = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            row.push(sub.min(prev[j + 1] + 1).min(row[j] + 1));
        }
        prev = row;
    }
    prev[b.len()]
}

fn suggest(key: &str) -> Option<&'static str> {
    known_keys()
        .map(|k| (edit_distance(key, k), k))
        .filter(|&(d, _)| d <= 2)
        .min_by_key(|&(d, _)| d)
        .map(|(_, k)| k)
}

fn unknown_key(key: &str) -> String {
    match suggest(key) {
        Some(s) => format!("unknown config key `{key}` (did you mean `{s}`?)"),
        None => format!("unknown config key `{key}`"),
    }
}

/// Turn serde's "unknown field `x`" into a named rejection with a
/// did-you-mean hint.
fn describe_parse_error(err: &serde_json::Error) -> String {
    let text = err.to_string();
    if let Some(rest) = text.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return unknown_key(&rest[..end]);
        }
    }
    text
}

/// Sections owning `field`, for bare keys in key=value files.
fn owners_of(field: &str) -> Vec<&'static str> {
    SECTION_FIELDS
        .iter()
        .filter(|(_, fields)| fields.contains(&field))
        .map(|(section, _)| *section)
        .collect()
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    match serde_json::from_str::<serde_json::Value>(raw) {
        Ok(v) if !v.is_object() && !v.is_array() => v,
        _ => serde_json::Value::String(raw.to_string()),
    }
}

/// Parse `key = value` lines (`#` comments allowed) into the same JSON
/// tree the JSON form uses. Keys are `section.field` or a bare field
/// name when only one section owns it.
fn parse_key_value(text: &str, path: &Path) -> Result<serde_json::Value, ConfigError> {
    let parse_err = |line: usize, message: String| ConfigError::Parse {
        message: format!("{} line {line}: {message}", path.display()),
    };
    let mut root = serde_json::Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected `key = value`, got {stripped:?}")))?;
        let key = key.trim();
        let value = parse_scalar(value.trim());
        let (section, field) = match key.split_once('.') {
            Some((s, f)) => {
                let s = s.trim();
                let f = f.trim();
                if !SECTION_FIELDS.iter().any(|(name, _)| *name == s) {
                    return Err(parse_err(line, unknown_key(s)));
                }
                (s, f)
            }
            None => match owners_of(key)[..] {
                [section] => (section, key),
                [] => return Err(parse_err(line, unknown_key(key))),
                ref owners => {
                    let options: Vec<String> =
                        owners.iter().map(|s| format!("{s}.{key}")).collect();
                    return Err(parse_err(
                        line,
                        format!("ambiguous key `{key}`: write {}", options.join(" or ")),
                    ));
                }
            },
        };
        if section.is_empty() {
            root.insert(field.to_string(), value);
        } else {
            root.entry(section.to_string())
                .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()))
                .as_object_mut()
                .expect("section node is an object")
                .insert(field.to_string(), value);
        }
    }
    Ok(serde_json::Value::Object(root))
}

pub fn config_from_value(
    value: serde_json::Value,
    origin: &Path,
) -> Result<PipelineConfig, ConfigError> {
    // A run manifest fed back as --config resolves to the run's config.
    let value = match value {
        serde_json::Value::Object(mut map)
            if map.contains_key("command") && map.contains_key("config") =>
        {
            map.remove("config").expect("checked present")
        }
        other => other,
    };
    let config: PipelineConfig = serde_json::from_value(value).map_err(|e| ConfigError::Parse {
        message: format!("{}: {}", origin.display(), describe_parse_error(&e)),
    })?;
    validate(&config)?;
    Ok(config)
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    let Some(p) = path else {
        let config = PipelineConfig::default();
        validate(&config)?;
        return Ok(config);
    };
    let text = fs::read_to_string(p)
        .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            message: format!("{}: {}", p.display(), e),
        })?
    } else {
        parse_key_value(&text, p)?
    };
    config_from_value(value, p)
}

fn validate(config: &PipelineConfig) -> Result<(), ConfigError> {
    let invalid = |message: String| Err(ConfigError::Invalid { message });
    if let Err(e) = config.scene_config().validate() {
        return invalid(format!("scene: {e}"));
    }
    if let Err(e) = config.model_config().validate() {
        return invalid(format!("model: {e}"));
    }
    if let Err(e) = config.train_config().validate() {
        return invalid(format!("train: {e}"));
    }
    config.vqvae_config()?;
    if config.data.count == 0 {
        return invalid(String::from("data.count must be positive"));
    }
    if config.eval.max_new == 0 {
        return invalid(String::from("eval.max_new must be positive"));
    }
    Ok(())
}

/// Flag-level overrides shared by the subcommands; `None` keeps the
/// file (or default) value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Run seed feeding every named child stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step budget for the stage being run (VQ-VAE or model training).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate for the stage being run.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training micro-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
}

impl Overrides {
    /// Stage-aware application: `steps`/`lr` target the VQ-VAE section
    /// when `vq_stage` is set, the train section otherwise.
    pub fn apply(&self, config: &mut PipelineConfig, vq_stage: bool) -> Result<(), ConfigError> {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(steps) = self.steps {
            if vq_stage {
                config.vqvae.steps = steps;
            } else {
                config.train.steps = steps;
            }
        }
        if let Some(lr) = self.lr {
            if vq_stage {
                config.vqvae.lr = lr;
            } else {
                config.train.lr = lr;
            }
        }
        if let Some(batch) = self.batch {
            config.train.batch = batch;
        }
        if let Some(v) = self.lambda_d {
            config.train.lambda_d = v;
        }
        if let Some(v) = self.lambda_r {
            config.train.lambda_r = v;
        }
        validate(config)
    }
}
