//! Run manifests: one `key=value` pair per line.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ExperimentConfig, Scale};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT: &str = "sgl-manifest-1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn for_config(cfg: &ExperimentConfig, origin: &str) -> Self {
        let join = |v: &[String]| v.join(",");
        let mut m = Manifest::default();
        m.push("format", FORMAT);
        m.push("code_version", env!("CARGO_PKG_VERSION"));
        m.push("origin", origin);
        m.push("name", &cfg.name);
        m.push("scale", cfg.scale.unwrap_or(Scale::Paper).as_str());
        m.push("kind", &serde_json::to_string(&cfg.kind).expect("kind").replace('"', ""));
        m.push("seeds", &join(&cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>()));
        if let Ok(d) = cfg.resolved_depths() {
            m.push("depths", &join(&d.iter().map(usize::to_string).collect::<Vec<_>>()));
        }
        m.push("sampling", "with-replacement");
        m.push("config", &cfg.to_json());
        m
    }

    pub fn push(&mut self, key: &str, value: &str) {
        debug_assert!(!key.contains('=') && !value.contains('\n'));
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// `source.*` checksum entries.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with("source."))
            .cloned()
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: missing '='", i + 1)))?;
            m.push(k, v);
        }
        if m.get("format") != Some(FORMAT) {
            return Err(Error::Config(format!(
                "not a manifest (expected format={FORMAT})"
            )));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// The exact config the run used.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let scale: Scale = self
            .get("scale")
            .ok_or_else(|| Error::Config("manifest has no scale".into()))?
            .parse()?;
        let json = self
            .get("config")
            .ok_or_else(|| Error::Config("manifest has no config".into()))?;
        ExperimentConfig::from_json(json, scale)
    }
}
