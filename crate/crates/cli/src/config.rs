//! JSON configuration loading with key suggestions.

use std::path::Path;

use eco_core::harness::TrainConfig;
use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Invalid {
        path: String,
        source: eco_core::EcoError,
    },
}

/// Extract `(unknown, expected)` from a serde unknown-field/variant message.
fn unknown_key(message: &str) -> Option<(String, Vec<String>)> {
    let rest = message
        .strip_prefix("unknown field `")
        .or_else(|| message.strip_prefix("unknown variant `"))?;
    let end = rest.find('`')?;
    let unknown = rest[..end].to_string();
    let expected = rest[end + 1..]
        .split('`')
        .skip(1)
        .step_by(2)
        .map(str::to_string)
        .collect();
    Some((unknown, expected))
}

/// Closest candidate by edit distance, if any is within 3 edits.
pub fn nearest<'a>(key: &str, candidates: &'a [String]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(key, c), c))
        .filter(|(d, _)| *d <= 3)
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c.as_str())
}

fn describe(err: &serde_json::Error) -> String {
    let text = err.to_string();
    // serde_json appends " at line L column C"
    let core = text.split(" at line ").next().unwrap_or(&text);
    match unknown_key(core) {
        Some((key, expected)) => match nearest(&key, &expected) {
            Some(best) => format!("{text}; did you mean `{best}`?"),
            None => text,
        },
        None => text,
    }
}

/// Parse a value from JSON text, naming the nearest known key on typos.
pub fn parse_json<T: DeserializeOwned>(text: &str, path: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_string(),
        message: describe(&e),
    })
}

pub fn parse_train_config(text: &str, path: &str) -> Result<TrainConfig, ConfigError> {
    let cfg: TrainConfig = parse_json(text, path)?;
    cfg.validate().map_err(|source| ConfigError::Invalid {
        path: path.to_string(),
        source,
    })?;
    Ok(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig, ConfigError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: shown.clone(),
        source,
    })?;
    parse_train_config(&text, &shown)
}
