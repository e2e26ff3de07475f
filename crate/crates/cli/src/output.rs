//! Artifacts are assembled in memory and written only once a command has
//! finished, so a failed run leaves nothing behind.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// One output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Artifacts {
    pub files: Vec<Artifact>,
}

impl Artifacts {
    pub fn push(&mut self, name: impl Into<String>, contents: String) {
        self.files.push(Artifact {
            name: name.into(),
            contents,
        });
    }

    pub fn push_json(&mut self, name: impl Into<String>, value: &Value) {
        let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialise");
        text.push('\n');
        self.push(name, text);
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|a| a.name == name).map(|a| a.contents.as_str())
    }

    /// Writes every file plus a manifest with SHA-256 digests.
    pub fn write(mut self, dir: &Path, manifest_name: &str, mut manifest: Value) -> Result<(), CliError> {
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
        let outputs: Vec<Value> = self
            .files
            .iter()
            .map(|a| {
                json!({
                    "file": a.name,
                    "bytes": a.contents.len(),
                    "sha256": sha256_hex(a.contents.as_bytes()),
                })
            })
            .collect();
        manifest["outputs"] = Value::Array(outputs);
        self.push_json(manifest_name, &manifest);
        std::fs::create_dir_all(dir).map_err(io)?;
        for a in &self.files {
            std::fs::write(dir.join(&a.name), &a.contents).map_err(io)?;
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    s
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_number(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn csv<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.as_ref().iter().map(|x| format_number(*x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
