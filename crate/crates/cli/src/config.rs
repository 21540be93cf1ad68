//! Settings resolution: config file, then flags, then `SCOPEX_*` variables.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use scopex_core::orchestrator::OrchestratorConfig;
use scopex_core::Templates;

use crate::{CliError, GlobalArgs};

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendSpec {
    Scripted(PathBuf),
    Http,
}

impl BackendSpec {
    /// `http`, `scripted:PATH`, or a bare path to a scripted rule file.
    pub fn parse(text: &str) -> BackendSpec {
        match text.trim() {
            "http" => BackendSpec::Http,
            other => BackendSpec::Scripted(PathBuf::from(other.strip_prefix("scripted:").unwrap_or(other))),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub intuition: Option<f64>,
    pub reuse: Option<f64>,
    pub borrow_k: Option<usize>,
}

/// On-disk configuration. Relative paths are taken from the file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub store_path: Option<PathBuf>,
    pub backend: Option<BackendSpec>,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub templates_path: Option<PathBuf>,
    pub registry_path: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let mut config: CliConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        config.store_path.as_mut().map(rebase);
        config.templates_path.as_mut().map(rebase);
        config.registry_path.as_mut().map(rebase);
        if let Some(BackendSpec::Scripted(p)) = config.backend.as_mut() {
            rebase(p);
        }
        Ok(config)
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    store_path: Option<PathBuf>,
    backend: Option<BackendSpec>,
    pub orchestrator: OrchestratorConfig,
    pub templates: Templates,
    pub registry_path: Option<PathBuf>,
}

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, CliError> {
    env(name)
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{name}: cannot parse {v:?}")))
        })
        .transpose()
}

pub fn resolve(args: &GlobalArgs) -> Result<Settings, CliError> {
    let file = match &args.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let store_path = env("SCOPEX_STORE")
        .map(PathBuf::from)
        .or_else(|| args.store.clone())
        .or(file.store_path);
    let backend = env("SCOPEX_BACKEND")
        .map(|v| BackendSpec::parse(&v))
        .or_else(|| args.backend.as_deref().map(BackendSpec::parse))
        .or(file.backend);
    if let Some(BackendSpec::Scripted(path)) = &backend {
        if !path.is_file() {
            return Err(CliError::usage(format!("scripted backend file {} does not exist", path.display())));
        }
    }
    let templates_path = env("SCOPEX_TEMPLATES")
        .map(PathBuf::from)
        .or_else(|| args.templates.clone())
        .or(file.templates_path);
    let templates = match templates_path {
        Some(path) => Templates::load(&path).map_err(CliError::usage)?,
        None => Templates::default(),
    };
    let registry_path = env("SCOPEX_REGISTRY")
        .map(PathBuf::from)
        .or_else(|| args.registry.clone())
        .or(file.registry_path);

    let mut orchestrator = OrchestratorConfig::default();
    if let Some(v) = env_parse("SCOPEX_INTUITION_THRESHOLD")?
        .or(args.intuition_threshold)
        .or(file.thresholds.intuition)
    {
        orchestrator.intuition_threshold = v;
    }
    if let Some(v) = env_parse("SCOPEX_REUSE_THRESHOLD")?
        .or(args.reuse_threshold)
        .or(file.thresholds.reuse)
    {
        orchestrator.reuse_threshold = v;
    }
    if let Some(v) = env_parse("SCOPEX_BORROW_K")?.or(args.borrow_k).or(file.thresholds.borrow_k) {
        orchestrator.borrow_k = v;
    }
    orchestrator
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(Settings {
        store_path,
        backend,
        orchestrator,
        templates,
        registry_path,
    })
}

impl Settings {
    pub fn store_path(&self) -> Result<&Path, CliError> {
        self.store_path
            .as_deref()
            .ok_or_else(|| CliError::usage("no method store given (--store, SCOPEX_STORE or config store_path)"))
    }

    pub fn backend(&self) -> Result<&BackendSpec, CliError> {
        self.backend
            .as_ref()
            .ok_or_else(|| CliError::usage("no backend given (--backend, SCOPEX_BACKEND or config backend)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_spec_forms() {
        assert_eq!(BackendSpec::parse("http"), BackendSpec::Http);
        assert_eq!(BackendSpec::parse("scripted:a.json"), BackendSpec::Scripted("a.json".into()));
        assert_eq!(BackendSpec::parse("b.json"), BackendSpec::Scripted("b.json".into()));
    }

    #[test]
    fn config_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"store_path": "store.jsonl", "backend": {"scripted": "rules.json"}, "thresholds": {"reuse": 0.1}}"#,
        )
        .unwrap();
        let config = CliConfig::load(&path).unwrap();
        assert_eq!(config.store_path, Some(dir.path().join("store.jsonl")));
        assert_eq!(config.backend, Some(BackendSpec::Scripted(dir.path().join("rules.json"))));
        assert_eq!(config.thresholds.reuse, Some(0.1));
    }

    #[test]
    fn http_backend_in_config() {
        let config: CliConfig = serde_json::from_str(r#"{"backend": "http"}"#).unwrap();
        assert_eq!(config.backend, Some(BackendSpec::Http));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(serde_json::from_str::<CliConfig>(r#"{"stor_path": "x"}"#).is_err());
    }
}
