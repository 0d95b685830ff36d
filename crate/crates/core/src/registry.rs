//! Model manifests and the registry that resolves route names to them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::ApiKeyRecord;
use crate::runtime::ResourceLimits;
use crate::wire::is_valid_model_name;

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Public,
    Restricted,
}

fn default_isolation() -> String {
    "process".into()
}

/// Registration record of one model, read from `<name>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub name: String,
    pub version: String,
    /// Plugin executable followed by its arguments.
    pub command: Vec<String>,
    #[serde(default)]
    pub supports_async: bool,
    pub visibility: Visibility,
    #[serde(default)]
    pub limits: ResourceLimits,
    #[serde(default)]
    pub description: String,
    /// Sandbox backend. Only `"process"` is implemented.
    #[serde(default = "default_isolation")]
    pub isolation: String,
    /// Directory the manifest was loaded from; relative commands resolve
    /// against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if !is_valid_model_name(&self.name) {
            return Err((
                "name".into(),
                format!("`{}` does not match [a-z0-9_-]{{1,64}}", self.name),
            ));
        }
        if self.command.is_empty() || self.command[0].is_empty() {
            return Err(("command".into(), "must name an executable".into()));
        }
        if self.isolation != "process" {
            return Err((
                "isolation".into(),
                format!("unsupported isolation backend `{}`", self.isolation),
            ));
        }
        self.limits
            .validate()
            .map_err(|m| ("limits".into(), m))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub version: String,
    pub description: String,
    pub supports_async: bool,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model `{name}` is defined in both {first} and {second}")]
    DuplicateModelName {
        name: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("{file}: field `{field}`: {message}")]
    ManifestParseError {
        file: PathBuf,
        field: String,
        message: String,
    },
    #[error("cannot read models directory {dir}: {source}")]
    Io {
        dir: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model `{0}` not found")]
    ModelNotFound(String),
}

/// Immutable snapshot of the loaded manifests.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<ModelManifest>>,
}

impl Registry {
    pub fn from_manifests(manifests: Vec<ModelManifest>) -> Result<Self, RegistryError> {
        let mut models = BTreeMap::new();
        for m in manifests {
            if models.contains_key(&m.name) {
                return Err(RegistryError::DuplicateModelName {
                    name: m.name.clone(),
                    first: PathBuf::new(),
                    second: PathBuf::new(),
                });
            }
            models.insert(m.name.clone(), Arc::new(m));
        }
        Ok(Self { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn manifests(&self) -> impl Iterator<Item = &Arc<ModelManifest>> {
        self.models.values()
    }

    pub fn resolve(&self, model: &str) -> Result<Arc<ModelManifest>, RegistryError> {
        self.models
            .get(model)
            .cloned()
            .ok_or_else(|| RegistryError::ModelNotFound(model.into()))
    }

    /// Public models, plus restricted ones the caller's ACL names.
    pub fn list_models(&self, caller: Option<&ApiKeyRecord>) -> Vec<ModelSummary> {
        self.models
            .values()
            .filter(|m| match m.visibility {
                Visibility::Public => true,
                Visibility::Restricted => caller
                    .map(|k| k.acl.allows(&m.name))
                    .unwrap_or(false),
            })
            .map(|m| ModelSummary {
                name: m.name.clone(),
                version: m.version.clone(),
                description: m.description.clone(),
                supports_async: m.supports_async,
            })
            .collect()
    }
}

fn parse_manifest(path: &Path) -> Result<ModelManifest, RegistryError> {
    let parse_err = |field: String, message: String| RegistryError::ManifestParseError {
        file: path.to_path_buf(),
        field,
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| parse_err(String::new(), e.to_string()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut manifest: ModelManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        parse_err(field, e.into_inner().to_string())
    })?;
    manifest.validate().map_err(|(f, m)| parse_err(f, m))?;
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    Ok(manifest)
}

/// Loads one manifest per `*.manifest.json` file in `dir`.
pub fn load_registry(dir: &Path) -> Result<Registry, RegistryError> {
    let io_err = |source| RegistryError::Io {
        dir: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(MANIFEST_SUFFIX))
        })
        .collect();
    files.sort();

    let mut models: BTreeMap<String, (PathBuf, Arc<ModelManifest>)> = BTreeMap::new();
    for file in files {
        let manifest = parse_manifest(&file)?;
        if let Some((first, _)) = models.get(&manifest.name) {
            return Err(RegistryError::DuplicateModelName {
                name: manifest.name.clone(),
                first: first.clone(),
                second: file,
            });
        }
        models.insert(manifest.name.clone(), (file, Arc::new(manifest)));
    }
    Ok(Registry {
        models: models.into_iter().map(|(k, (_, m))| (k, m)).collect(),
    })
}

/// Shared handle whose snapshot can be swapped by an explicit reload.
/// Readers holding an older snapshot are unaffected.
pub struct RegistryHandle {
    dir: PathBuf,
    current: RwLock<Arc<Registry>>,
}

impl RegistryHandle {
    pub fn load(dir: &Path) -> Result<Self, RegistryError> {
        let registry = load_registry(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            current: RwLock::new(Arc::new(registry)),
        })
    }

    pub fn snapshot(&self) -> Arc<Registry> {
        self.current.read().unwrap().clone()
    }

    pub fn reload(&self) -> Result<Arc<Registry>, RegistryError> {
        let fresh = Arc::new(load_registry(&self.dir)?);
        *self.current.write().unwrap() = fresh.clone();
        Ok(fresh)
    }
}
