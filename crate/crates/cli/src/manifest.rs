//! Run manifests and the small file helpers shared by the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUT_ROOT_ENV: &str = "MAXMATCH_OUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SeedTriple {
    pub model: u64,
    pub data: u64,
    pub augment: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunManifest {
    pub subcommand: String,
    /// The resolved configuration with every default filled in.
    pub config: serde_json::Value,
    pub seeds: SeedTriple,
    #[serde(default = "one")]
    pub folds: usize,
    /// Milliseconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub tool_version: String,
}

fn one() -> usize {
    1
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize, seeds: SeedTriple) -> CliResult<Self> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?,
            seeds,
            folds: 1,
            started_at: now_ms(),
            finished_at: None,
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    /// The stored configuration, decoded as `T`.
    pub fn config_as<T: DeserializeOwned>(&self, path: &Path) -> CliResult<T> {
        serde_json::from_value(self.config.clone()).map_err(|source| CliError::BadJson {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::BadJson {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `path` when given, otherwise returns the default.
pub fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

/// `--out` if given, else a fresh directory under `root`.
pub fn output_dir(out: Option<&Path>, root: &Path, subcommand: &str) -> CliResult<PathBuf> {
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => root.join(format!("{subcommand}-{}", now_ms())),
    };
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    Ok(dir)
}

/// Writes a line to stdout; a closed pipe (`| head`) is not an error.
pub fn emit(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>")(e)),
        _ => Ok(()),
    }
}

/// Pretty JSON on stdout.
pub fn emit_json(value: &impl Serialize) -> CliResult<()> {
    emit(&serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?)
}
