//! `key = value` config files, expanded into long flags ahead of the
//! command-line flags so the command line wins.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("--config needs a file path")]
    MissingPath,
}

/// Parse config text into `(key, value)` pairs; `#` starts a comment.
pub fn parse_config(text: &str, path: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            path: path.to_string(),
            line: i + 1,
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                path: path.to_string(),
                line: i + 1,
            });
        }
        pairs.push((k.replace('_', "-"), v.to_string()));
    }
    Ok(pairs)
}

/// Pairs as flags. `true` makes a bare switch and `false` drops it.
fn pairs_to_flags(pairs: Vec<(String, String)>) -> Vec<String> {
    let mut out = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => {
                out.push(format!("--{k}"));
                out.push(v);
            }
        }
    }
    out
}

/// Strip `--config PATH` from argv and splice the file's flags in right
/// after the subcommand name.
pub fn expand_argv(argv: Vec<String>) -> Result<Vec<String>, ConfigError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--config" {
            config = Some(it.next().ok_or(ConfigError::MissingPath)?);
        } else if let Some(path) = arg.strip_prefix("--config=") {
            config = Some(path.to_string());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(Path::new(&path)).map_err(|source| ConfigError::Read {
        path: path.clone(),
        source,
    })?;
    let flags = pairs_to_flags(parse_config(&text, &path)?);
    let at = rest.len().min(2);
    rest.splice(at..at, flags);
    Ok(rest)
}
