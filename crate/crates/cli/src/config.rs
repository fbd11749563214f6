//! Flat `key = value` training-config files.
//!
//! One dotted key per line; `#` starts a comment; blank lines are ignored.
//! Unknown keys are a hard error so typos cannot silently fall back to
//! defaults. Later lines override earlier ones.

use peftlab::lora::{DEFAULT_ALPHA, DEFAULT_DROPOUT, DEFAULT_RANK, DEFAULT_TARGETS};
use peftlab::model::ModelConfig;
use peftlab::quant::{QuantSpec, DEFAULT_BLOCK_SIZE, DEFAULT_DQ_GROUP_SIZE};
use peftlab::train::{TrainConfig, DEFAULT_TEMPLATE_ID};

/// Adapter-injection settings from a config file.
#[derive(Debug, Clone)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            dropout: DEFAULT_DROPOUT,
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            seed: 42,
        }
    }
}

/// Everything a `train` run needs, assembled from defaults plus the file.
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub lora: LoraSettings,
    /// `Some` only when `quant.enabled = true`.
    pub quant: Option<QuantSpec>,
    pub train: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            init_seed: 1234,
            lora: LoraSettings::default(),
            quant: None,
            train: TrainConfig::default(),
        }
    }
}

/// Parses config text; the error string is a user-facing diagnostic.
pub fn parse_config(text: &str) -> Result<FileConfig, String> {
    let mut cfg = FileConfig::default();
    let mut quant_enabled = false;
    let mut quant_spec = QuantSpec {
        block_size: DEFAULT_BLOCK_SIZE,
        double_quant: true,
        dq_group_size: DEFAULT_DQ_GROUP_SIZE,
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {line_no}: expected 'key = value', got {line:?}"))?;
        let key = key.trim();
        let value = value.trim();
        set_key(&mut cfg, &mut quant_enabled, &mut quant_spec, key, value)
            .map_err(|msg| format!("line {line_no}: {msg}"))?;
    }

    if quant_enabled {
        cfg.quant = Some(quant_spec);
    }
    Ok(cfg)
}

fn set_key(
    cfg: &mut FileConfig,
    quant_enabled: &mut bool,
    quant_spec: &mut QuantSpec,
    key: &str,
    value: &str,
) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        value
            .parse::<T>()
            .map_err(|e| format!("invalid value {value:?} for '{key}': {e}"))
    }
    fn boolean(key: &str, value: &str) -> Result<bool, String> {
        match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!(
                "invalid value {value:?} for '{key}': expected 'true' or 'false'"
            )),
        }
    }

    match key {
        "model.vocab_size" => cfg.model.vocab_size = num(key, value)?,
        "model.d_model" => cfg.model.d_model = num(key, value)?,
        "model.n_layers" => cfg.model.n_layers = num(key, value)?,
        "model.n_query_heads" => cfg.model.n_query_heads = num(key, value)?,
        "model.n_kv_heads" => cfg.model.n_kv_heads = num(key, value)?,
        "model.d_ff" => cfg.model.d_ff = num(key, value)?,
        "model.max_seq_len" => cfg.model.max_seq_len = num(key, value)?,
        "model.tie_embeddings" => cfg.model.tie_embeddings = boolean(key, value)?,
        "model.init_seed" => cfg.init_seed = num(key, value)?,
        "lora.rank" => cfg.lora.rank = num(key, value)?,
        "lora.alpha" => cfg.lora.alpha = num(key, value)?,
        "lora.dropout" => cfg.lora.dropout = num(key, value)?,
        "lora.seed" => cfg.lora.seed = num(key, value)?,
        "lora.targets" => {
            let targets: Vec<String> = value
                .split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect();
            if targets.is_empty() {
                return Err(format!("'{key}' needs at least one target name"));
            }
            cfg.lora.targets = targets;
        }
        "quant.enabled" => *quant_enabled = boolean(key, value)?,
        "quant.block_size" => quant_spec.block_size = num(key, value)?,
        "quant.double_quant" => quant_spec.double_quant = boolean(key, value)?,
        "quant.dq_group_size" => quant_spec.dq_group_size = num(key, value)?,
        "train.lr" => cfg.train.learning_rate = num(key, value)?,
        "train.beta1" => cfg.train.beta1 = num(key, value)?,
        "train.beta2" => cfg.train.beta2 = num(key, value)?,
        "train.eps" => cfg.train.eps = num(key, value)?,
        "train.weight_decay" => cfg.train.weight_decay = num(key, value)?,
        "train.steps" => cfg.train.steps = num(key, value)?,
        "train.batch_size" => cfg.train.batch_size = num(key, value)?,
        "train.grad_clip_norm" => cfg.train.grad_clip_norm = num(key, value)?,
        "train.seed" => cfg.train.seed = num(key, value)?,
        "train.max_seq_len" => cfg.train.max_seq_len = num(key, value)?,
        "data.template" => cfg.train.template_id = value.to_string(),
        _ => return Err(format!("unknown config key '{key}'")),
    }
    Ok(())
}

impl FileConfig {
    /// Cross-field validation beyond per-line parsing.
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.lora.rank == 0 {
            return Err("lora.rank must be positive".into());
        }
        if let Some(spec) = &self.quant {
            if spec.block_size == 0 || spec.block_size % 2 != 0 {
                return Err("quant.block_size must be a positive even number".into());
            }
            if spec.dq_group_size == 0 {
                return Err("quant.dq_group_size must be positive".into());
            }
        }
        let _ = DEFAULT_TEMPLATE_ID; // template id is validated by the trainer
        Ok(())
    }
}
