use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one evaluation protocol.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(protocol: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            protocol: protocol.into(),
            config_hash: config_hash.into(),
            ..Self::default()
        }
    }

    pub fn metric(mut self, name: impl Into<String>, value: f64) -> Self {
        self.metrics.insert(name.into(), value);
        self
    }

    pub fn count(mut self, name: impl Into<String>, value: usize) -> Self {
        self.counts.insert(name.into(), value);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: e.column(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Two-column table of metrics then counts.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![("protocol".into(), self.protocol.clone())];
        rows.extend(self.metrics.iter().map(|(k, v)| (k.clone(), format!("{v:.4}"))));
        rows.extend(self.counts.iter().map(|(k, v)| (k.clone(), v.to_string())));
        rows.push(("config".into(), self.config_hash.clone()));
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}
