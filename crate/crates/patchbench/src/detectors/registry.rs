//! Adapter registry: a config file mapping adapter names to backend plugin
//! identifiers. The core ships the `toy` backend; real model-zoo backends
//! register themselves at runtime via [`register_backend`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use serde::Deserialize;

use crate::detectors::{builtin_template, DetectorAdapter, ToyDetector};
use crate::error::{Error, Result};
use crate::patch::ArchGroup;

/// One registry entry, as parsed from `adapters.toml`.
#[derive(Debug, Clone, Deserialize)]
pub struct AdapterEntry {
    pub backend: String,
    pub group: ArchGroup,
    pub weights_id: String,
    /// (height, width)
    pub input_size: [usize; 2],
    /// Backend-specific settings, e.g. `template` for the toy backend.
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub skip_nms: bool,
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    adapters: BTreeMap<String, AdapterEntry>,
}

/// Loaded adapter registry.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, AdapterEntry>,
}

pub type BackendFactory =
    fn(name: &str, entry: &AdapterEntry) -> Result<Box<dyn DetectorAdapter>>;

fn backends() -> &'static Mutex<BTreeMap<String, BackendFactory>> {
    static BACKENDS: OnceLock<Mutex<BTreeMap<String, BackendFactory>>> = OnceLock::new();
    BACKENDS.get_or_init(|| Mutex::new(BTreeMap::new()))
}

/// Register a backend plugin for adapters with a matching `backend` field.
pub fn register_backend(backend: &str, factory: BackendFactory) {
    backends().lock().unwrap().insert(backend.to_string(), factory);
}

fn toy_factory(name: &str, entry: &AdapterEntry) -> Result<Box<dyn DetectorAdapter>> {
    let template_name = entry
        .template
        .as_deref()
        .ok_or_else(|| Error::Config(format!("adapter {name}: toy backend needs a template")))?;
    let template = builtin_template(template_name)?;
    let adapter = ToyDetector::new(name, template, (entry.input_size[0], entry.input_size[1]))?;
    Ok(Box::new(adapter))
}

impl Registry {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| Error::Parse {
            file: origin.to_path_buf(),
            line: None,
            msg: e.to_string(),
        })?;
        Ok(Registry { entries: file.adapters })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::NotFound(format!("adapter registry {}", path.display())))?;
        Self::from_toml_str(&text, path)
    }

    /// The default desk-scale registry: two toy detectors with different
    /// templates.
    pub fn builtin_toys() -> Self {
        let text = r#"
            [adapters.toy-red]
            backend = "toy"
            group = "objectness_v7"
            weights_id = "builtin:rings-red"
            input_size = [96, 96]
            template = "rings-red"

            [adapters.toy-blue]
            backend = "toy"
            group = "objectness_v7"
            weights_id = "builtin:rings-blue"
            input_size = [96, 96]
            template = "rings-blue"
        "#;
        Self::from_toml_str(text, Path::new("<builtin>")).expect("builtin registry parses")
    }

    pub fn entries(&self) -> &BTreeMap<String, AdapterEntry> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&AdapterEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("adapter {name} in registry")))
    }

    /// Instantiate a named adapter through its backend.
    pub fn instantiate(&self, name: &str) -> Result<Box<dyn DetectorAdapter>> {
        let entry = self.get(name)?;
        if entry.backend == "toy" {
            return toy_factory(name, entry);
        }
        let factory = backends()
            .lock()
            .unwrap()
            .get(&entry.backend)
            .copied()
            .ok_or_else(|| {
                Error::Backend(format!(
                    "backend {} for adapter {name} is not available; \
                     register a backend plugin",
                    entry.backend
                ))
            })?;
        factory(name, entry)
    }
}

/// Stable, sorted listing of available adapters.
pub fn list_adapters(registry: &Registry) -> Vec<(String, ArchGroup, String)> {
    registry
        .entries
        .iter()
        .map(|(name, e)| (name.clone(), e.group, e.weights_id.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_lists_sorted() {
        let reg = Registry::builtin_toys();
        let list = list_adapters(&reg);
        assert_eq!(list.len(), 2);
        assert_eq!(list[0].0, "toy-blue");
        assert_eq!(list[1].0, "toy-red");
        assert!(list.iter().all(|(_, g, _)| *g == ArchGroup::ObjectnessV7));
    }

    #[test]
    fn empty_registry_lists_empty() {
        let reg = Registry::from_toml_str("[adapters]", Path::new("t")).unwrap();
        assert!(list_adapters(&reg).is_empty());
    }

    #[test]
    fn dualhead_entry_round_trips_group() {
        let text = r#"
            [adapters.v10-ish]
            backend = "zoo"
            group = "dualhead_v10"
            weights_id = "official:v10"
            input_size = [640, 640]
            skip_nms = false
        "#;
        let reg = Registry::from_toml_str(text, Path::new("t")).unwrap();
        let list = list_adapters(&reg);
        assert_eq!(list[0].1, ArchGroup::DualHeadV10);
        // no such backend registered: instantiation is a backend error
        match reg.instantiate("v10-ish") {
            Err(Error::Backend(_)) => {}
            other => panic!("expected backend error, got {other:?}"),
        }
    }

    #[test]
    fn toy_adapters_instantiate() {
        let reg = Registry::builtin_toys();
        let a = reg.instantiate("toy-red").unwrap();
        assert_eq!(a.name(), "toy-red");
        assert_eq!(a.input_size(), (96, 96));
    }
}
