//! One directory per run: content-addressed weights, a role manifest and a
//! resolved-config snapshot for every command that wrote into it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spvt::neural::{encode_weights, load_weights, write_metadata, MlpNetwork, ModelMetadata};
use spvt::verify::content_hash;

use crate::config::RunConfig;
use crate::error::CliError;

const MANIFEST: &str = "manifest.json";

/// Role name to file name, relative to the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub models: BTreeMap<String, String>,
}

/// Refuses to replace `path` unless `force` is set.
pub fn guard(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        Err(CliError::Exists(path.to_path_buf()))
    } else {
        Ok(())
    }
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e)),
        _ => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `<file>.config.toml` next to an output file.
pub fn snapshot_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

pub fn write_snapshot(output: &Path, cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let p = snapshot_path(output);
    guard(&p, force)?;
    write_text(&p, &cfg.snapshot())
}

pub struct RunDir {
    pub root: PathBuf,
    pub force: bool,
}

impl RunDir {
    pub fn create(root: &Path, force: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            force,
        })
    }

    /// An existing run directory, for commands that only read models.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        if !root.is_dir() {
            return Err(CliError::Config(format!("run directory {} does not exist", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            force: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of a new output, refused if it exists and `--force` is off.
    pub fn output(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        guard(&p, self.force)?;
        Ok(p)
    }

    pub fn manifest(&self) -> Result<Manifest, CliError> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }

    fn record(&self, role: &str, file: &str) -> Result<(), CliError> {
        let mut m = self.manifest()?;
        m.models.insert(role.to_string(), file.to_string());
        let text = serde_json::to_string_pretty(&m).expect("manifest is serializable") + "\n";
        write_text(&self.path(MANIFEST), &text)
    }

    /// Writes `<role>-<12 hex>.spvn` with its metadata sidecar and points
    /// the role at it. A role that already names a file needs `--force`.
    pub fn save_model(&self, role: &str, net: &MlpNetwork, cfg: &RunConfig) -> Result<PathBuf, CliError> {
        if let Some(old) = self.manifest()?.models.get(role) {
            guard(&self.path(old), self.force)?;
        }
        let name = format!("{role}-{}.spvn", &content_hash(net)[..12]);
        let path = self.path(&name);
        write_text_bytes(&path, &encode_weights(net))?;
        write_metadata(
            &path,
            &ModelMetadata {
                role: role.to_string(),
                config_hash: cfg.hash(),
                seed: cfg.run.seed,
            },
        )?;
        self.record(role, &name)?;
        Ok(path)
    }

    /// A role from the manifest, or else a path to a weight file.
    pub fn resolve(&self, role_or_path: &str) -> Result<PathBuf, CliError> {
        if let Some(file) = self.manifest()?.models.get(role_or_path) {
            return Ok(self.path(file));
        }
        let p = PathBuf::from(role_or_path);
        if p.is_file() {
            return Ok(p);
        }
        Err(CliError::Config(format!(
            "no model with role {role_or_path:?} in {} and no such file",
            self.root.display()
        )))
    }

    pub fn load(&self, role_or_path: &str) -> Result<MlpNetwork, CliError> {
        let p = self.resolve(role_or_path)?;
        Ok(load_weights(&p)?)
    }

    /// Registers a non-model artifact under `role`.
    pub fn register(&self, role: &str, file: &str) -> Result<(), CliError> {
        self.record(role, file)
    }
}

fn write_text_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
