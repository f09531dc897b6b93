//! Flat `key = value` configuration files and run manifests.
//!
//! Every command resolves each setting as CLI flag > config file > built-in
//! default, then writes the fully resolved set back out as a `manifest` file
//! in its output directory. A manifest is itself a valid config file, so
//! `--config <manifest>` re-runs the command with identical settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    /// Line without a `=` or with an empty key.
    Malformed { line: usize, text: String },
    /// A value failed to parse as the expected type.
    BadValue { key: String, value: String, expected: &'static str },
    /// Keys the current command does not understand (typo guard).
    UnknownKeys(Vec<String>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Malformed { line, text } => {
                write!(f, "config line {line}: expected `key = value`, got `{text}`")
            }
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "config key `{key}`: `{value}` is not a valid {expected}")
            }
            ConfigError::UnknownKeys(keys) => {
                write!(f, "unknown config keys: {}", keys.join(", "))
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Parses flat `key = value` text. `#` starts a comment, blank lines are
/// skipped, later duplicates of a key win.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Malformed { line: idx + 1, text: raw.to_string() })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Malformed { line: idx + 1, text: raw.to_string() });
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Layered lookup helper. Each `get` records the key as known and the
/// resolved value for the manifest; [`Resolver::finish`] then rejects any
/// file key that no `get` ever consumed.
pub struct Resolver {
    file: BTreeMap<String, String>,
    known: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

/// Keys every manifest carries that are not settings.
const META_KEYS: [&str; 2] = ["command", "version"];

impl Resolver {
    pub fn new(config_path: Option<&Path>) -> Result<Self, ConfigError> {
        let file = match config_path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(ConfigError::Io)?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Resolver { file, known: BTreeSet::new(), resolved: BTreeMap::new() })
    }

    /// CLI value if given, else the file value, else the default.
    pub fn get<T: FromStr + ToString>(
        &mut self,
        key: &str,
        cli: Option<T>,
        default: T,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        self.known.insert(key.to_string());
        let value = match cli {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw.parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: raw.clone(),
                    expected,
                })?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`Resolver::get`] but with no default: the setting must come
    /// from the CLI or the file.
    pub fn require<T: FromStr + ToString>(
        &mut self,
        key: &str,
        cli: Option<T>,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        self.known.insert(key.to_string());
        let value = match cli {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw.parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: raw.clone(),
                    expected,
                })?,
                None => {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        value: String::from("(missing)"),
                        expected,
                    })
                }
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Presence-style CLI flag (`--no-consistency`): the flag wins when set,
    /// otherwise the file's boolean, otherwise the default.
    pub fn get_bool(
        &mut self,
        key: &str,
        cli_override: Option<bool>,
        default: bool,
    ) -> Result<bool, ConfigError> {
        self.known.insert(key.to_string());
        let value = match cli_override {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => match raw.as_str() {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: raw.clone(),
                            expected: "boolean (true/false)",
                        })
                    }
                },
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Fails on unconsumed file keys and returns the resolved settings in
    /// manifest order.
    pub fn finish(self) -> Result<BTreeMap<String, String>, ConfigError> {
        let unknown: Vec<String> = self
            .file
            .keys()
            .filter(|k| !self.known.contains(*k) && !META_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        Ok(self.resolved)
    }
}

/// Renders the manifest text: command, code version, then the resolved
/// settings sorted by key. Deterministic for a given resolution, so a re-run
/// regenerates the same bytes.
pub fn manifest_text(command: &str, resolved: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    out.push_str(&format!("command = {command}\n"));
    out.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    for (k, v) in resolved {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    resolved: &BTreeMap<String, String>,
) -> std::io::Result<()> {
    fs::write(dir.join("manifest"), manifest_text(command, resolved))
}
