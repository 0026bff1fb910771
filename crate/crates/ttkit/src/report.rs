//! Run manifests and report rendering.
//!
//! Every command writes a manifest next to its outputs: the command line, a
//! hash of the effective configuration, digests of all inputs and outputs,
//! the tool version, and the seed. Re-running with an equal manifest input
//! set must reproduce equal output digests; the determinism checks compare
//! manifests byte for byte.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub input_digests: BTreeMap<String, String>,
    pub tool_version: String,
    pub seed: u64,
    pub output_digests: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: String, config_json: &str, seed: u64) -> Self {
        Self {
            command,
            config_hash: sha256_hex(config_json.as_bytes()),
            input_digests: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            output_digests: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.input_digests.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> std::io::Result<()> {
        self.output_digests.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("manifest json"))
    }
}

/// Output format of reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ReportFormat {
    #[default]
    Table,
    Json,
}

/// A flat key/value report section rendered as an aligned table or merged
/// into a JSON object. Keys keep insertion order in tables; JSON sorts them.
#[derive(Debug, Default, Clone)]
pub struct Section {
    pub title: String,
    pub rows: Vec<(String, String)>,
}

impl Section {
    pub fn new(title: impl Into<String>) -> Self {
        Self { title: title.into(), rows: Vec::new() }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.rows.push((key.into(), value.to_string()));
    }

    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("== {} ==\n", self.title);
        for (k, v) in &self.rows {
            let _ = writeln!(out, "  {k:<width$}  {v}");
        }
        out
    }
}

/// Render sections plus a machine payload in the requested format. The JSON
/// side ignores table sections and prints the payload, so machine consumers
/// get typed values rather than formatted strings.
pub fn render<T: Serialize>(
    format: ReportFormat,
    sections: &[Section],
    payload: &T,
) -> String {
    match format {
        ReportFormat::Table => {
            let mut out = String::new();
            for s in sections {
                out.push_str(&s.render_table());
            }
            out
        }
        ReportFormat::Json => serde_json::to_string_pretty(payload).expect("report json"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"ttkit"),
            sha256_hex(b"ttkit"),
        );
        assert_ne!(sha256_hex(b"a"), sha256_hex(b"b"));
    }

    #[test]
    fn manifest_roundtrips_and_orders_keys() {
        let mut m = RunManifest::new("ttkit gen".into(), "{}", 7);
        m.output_digests.insert("b".into(), "2".into());
        m.output_digests.insert("a".into(), "1".into());
        let json = serde_json::to_string(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        let a = json.find("\"a\"").unwrap();
        let b = json.find("\"b\"").unwrap();
        assert!(a < b, "output digests must serialize sorted");
    }

    #[test]
    fn table_aligns_keys() {
        let mut s = Section::new("stats");
        s.push("tasks", 3);
        s.push("redundancy_ratio", 1.5);
        let table = s.render_table();
        assert!(table.contains("== stats =="));
        assert!(table.contains("tasks"));
        assert!(table.contains("1.5"));
    }
}
