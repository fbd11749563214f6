//! One module per subcommand, plus shared checkpoint-loading helpers.

pub mod chat;
pub mod generate;
pub mod ingest;
pub mod quantize;
pub mod stats;
pub mod train;

use std::path::Path;

use peftlab::gen::DecodeConfig;
use peftlab::model::ModelHandle;
use peftlab::train::{load_checkpoint, CheckpointError, LoadedCheckpoint};

use crate::{CliError, CliResult, DecodeArgs};

/// Maps a checkpoint failure so missing files exit 66, everything else 70.
pub fn classify_checkpoint(err: CheckpointError, path: &Path) -> CliError {
    match err {
        CheckpointError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => {
            CliError::MissingInput(format!("{}: no such file or directory", path.display()))
        }
        other => CliError::Internal(
            anyhow::Error::new(other).context(format!("loading checkpoint {}", path.display())),
        ),
    }
}

/// Loads `ckpt`, pairing an adapters-only file with `base` when given.
pub fn load_model(ckpt: &Path, base: Option<&Path>) -> CliResult<LoadedCheckpoint> {
    let base_model: Option<ModelHandle> = match base {
        Some(path) => Some(
            load_checkpoint(path, None)
                .map_err(|e| classify_checkpoint(e, path))?
                .model,
        ),
        None => None,
    };
    load_checkpoint(ckpt, base_model.as_ref()).map_err(|e| classify_checkpoint(e, ckpt))
}

/// Builds the decode configuration from shared CLI flags.
pub fn decode_config(args: &DecodeArgs) -> CliResult<DecodeConfig> {
    use peftlab::gen::DecodeMode;
    let mut cfg = DecodeConfig::default();
    if let Some(k) = args.top_k {
        cfg.mode = DecodeMode::TopK;
        cfg.k = k;
    } else if let Some(p) = args.top_p {
        cfg.mode = DecodeMode::Nucleus;
        cfg.p = p;
    } else {
        cfg.mode = DecodeMode::Greedy;
    }
    cfg.seed = args.seed;
    cfg.temperature = args.temperature;
    cfg.max_new_tokens = args.max_new_tokens;
    cfg.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}
