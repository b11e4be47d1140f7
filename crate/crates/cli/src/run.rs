//! Config resolution and run directories with their manifests.

use std::path::{Component, Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{Classify, CliError};

pub type ConfigMap = Map<String, Value>;

/// Reads a flat JSON config. A run manifest is accepted too, in which case
/// its config snapshot is used.
pub fn load_config_file(path: Option<&Path>) -> Result<ConfigMap, CliError> {
    let Some(path) = path else { return Ok(ConfigMap::new()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    match value {
        Value::Object(mut map) => match map.remove("config") {
            Some(Value::Object(inner)) if map.contains_key("command") => Ok(inner),
            Some(other) => {
                map.insert("config".into(), other);
                Ok(map)
            }
            None => Ok(map),
        },
        _ => Err(CliError::Invalid(format!("{}: config must be a JSON object", path.display()))),
    }
}

/// Overlays the flags that were given on the file values and deserializes
/// the result; flags always win.
pub fn resolve<A: Serialize, C: DeserializeOwned>(flags: &A, mut file: ConfigMap) -> Result<C, CliError> {
    if let Value::Object(given) = serde_json::to_value(flags).failed()? {
        for (k, v) in given {
            if !v.is_null() && v != Value::Bool(false) {
                file.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(file)).invalid()
}

/// Joins `rel` to `root`, refusing absolute paths and parent components.
pub fn inside(root: &Path, rel: &Path) -> Result<PathBuf, CliError> {
    if rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(CliError::Invalid(format!("`{}` must be a relative path inside the output directory", rel.display())));
    }
    Ok(root.join(rel))
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub status: String,
    pub config: Value,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

/// An output directory owned by one run. The manifest is written when the
/// run starts and rewritten with the file index when it finishes.
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn create<C: Serialize>(root: &Path, command: &str, config: &C) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).invalid()?;
        let manifest = RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            status: "running".into(),
            config: serde_json::to_value(config).failed()?,
            started_unix: now(),
            finished_unix: None,
            files: Vec::new(),
        };
        let dir = Self { root: root.to_path_buf(), manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    /// Absolute path of `rel`, recorded in the file index.
    pub fn file(&mut self, rel: &str) -> Result<PathBuf, CliError> {
        let path = inside(&self.root, Path::new(rel))?;
        if !self.manifest.files.iter().any(|f| f == rel) {
            self.manifest.files.push(rel.to_string());
        }
        Ok(path)
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.file(rel)?;
        std::fs::write(path, contents).failed()
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).failed()?;
        text.push('\n');
        self.write(rel, text)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.manifest.status = "completed".into();
        self.manifest.finished_unix = Some(now());
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        let tmp = self.root.join(".manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(&self.manifest).failed()?;
        text.push('\n');
        std::fs::write(&tmp, text).failed()?;
        std::fs::rename(&tmp, self.root.join("manifest.json")).failed()
    }
}
