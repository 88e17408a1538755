//! Container Structure Test documents and their YAML form.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effect::{MetadataKey, MetadataValue};
use crate::probe::ResolvedTest;

pub const SCHEMA_VERSION: &str = "2.0.0";

/// JSON Schema for the subset of the test file format this crate emits
/// (plus the neighbouring fields of the same sections).
pub const CST_SCHEMA: &str = include_str!("../schema/cst-v2.0.0.schema.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommandTest {
    pub name: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expected_output: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expected_error: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_output: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileExistenceTest {
    pub name: String,
    pub path: String,
    pub should_exist: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permissions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetadataTest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub env_vars: Vec<KeyValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmd: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entrypoint: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exposed_ports: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<KeyValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volumes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

impl MetadataTest {
    /// Number of metadata items asserted.
    pub fn item_count(&self) -> usize {
        [
            !self.env_vars.is_empty(),
            self.cmd.is_some(),
            self.entrypoint.is_some(),
            !self.exposed_ports.is_empty(),
            !self.labels.is_empty(),
            !self.volumes.is_empty(),
            self.workdir.is_some(),
            self.user.is_some(),
        ]
        .into_iter()
        .filter(|b| *b)
        .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CstDocument {
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub command_tests: Vec<CommandTest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub file_existence_tests: Vec<FileExistenceTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata_test: Option<MetadataTest>,
}

impl Default for CstDocument {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            command_tests: Vec::new(),
            file_existence_tests: Vec::new(),
            metadata_test: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CstError {
    #[error("cannot make test name `{0}` unique")]
    DuplicateUnresolvable(String),
}

/// Escapes every regular expression metacharacter, so the pattern matches
/// `s` literally.
pub fn escape_regex_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if "\\.+*?()|[]{}^$".contains(c) {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn unique_names<'a>(names: impl Iterator<Item = &'a mut String>) -> Result<(), CstError> {
    let mut seen = HashSet::new();
    for name in names {
        if seen.insert(name.clone()) {
            continue;
        }
        let base = name.clone();
        let found = (2..=10_000)
            .map(|n| format!("{base} ({n})"))
            .find(|candidate| !seen.contains(candidate))
            .ok_or_else(|| CstError::DuplicateUnresolvable(base.clone()))?;
        seen.insert(found.clone());
        *name = found;
    }
    Ok(())
}

/// Assembles resolved tests into a document. Sections are ordered by
/// subject; metadata checks merge into a single block.
pub fn build_cst_document(resolved: &[ResolvedTest]) -> Result<CstDocument, CstError> {
    let mut doc = CstDocument::default();
    let mut commands: Vec<(String, u8, CommandTest)> = Vec::new();
    let mut meta = MetadataTest::default();
    let mut any_meta = false;
    for t in resolved {
        match t {
            ResolvedTest::CommandExistence { name, pattern, .. } => commands.push((
                name.clone(),
                0,
                CommandTest {
                    name: format!("existence: {name}"),
                    command: "which".into(),
                    args: vec![name.clone()],
                    expected_output: vec![pattern.clone()],
                    expected_error: vec![],
                    excluded_output: vec![],
                },
            )),
            ResolvedTest::CommandVersion { name, flag, pattern, on_stderr, .. } => commands.push((
                name.clone(),
                1,
                CommandTest {
                    name: format!("version: {name}"),
                    command: name.clone(),
                    args: vec![flag.clone()],
                    expected_output: if *on_stderr { vec![] } else { vec![pattern.clone()] },
                    expected_error: if *on_stderr { vec![pattern.clone()] } else { vec![] },
                    excluded_output: vec![],
                },
            )),
            ResolvedTest::FileExistence { path } => doc.file_existence_tests.push(FileExistenceTest {
                name: format!("file: {path}"),
                path: path.clone(),
                should_exist: true,
                permissions: None,
            }),
            ResolvedTest::Metadata { key, value } => {
                any_meta = true;
                apply_metadata(&mut meta, *key, value);
            }
        }
    }
    commands.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    doc.command_tests = commands.into_iter().map(|(_, _, c)| c).collect();
    doc.file_existence_tests.sort_by(|a, b| a.path.cmp(&b.path));
    unique_names(doc.command_tests.iter_mut().map(|c| &mut c.name))?;
    unique_names(doc.file_existence_tests.iter_mut().map(|c| &mut c.name))?;
    if any_meta {
        doc.metadata_test = Some(meta);
    }
    Ok(doc)
}

fn pairs(value: &MetadataValue) -> Vec<KeyValue> {
    match value {
        MetadataValue::Pairs(p) => {
            p.iter().map(|(k, v)| KeyValue { key: k.clone(), value: v.clone() }).collect()
        }
        _ => Vec::new(),
    }
}

fn list(value: &MetadataValue) -> Vec<String> {
    match value {
        MetadataValue::List(l) => l.clone(),
        MetadataValue::Text(t) => vec![t.clone()],
        MetadataValue::Pairs(_) => Vec::new(),
    }
}

fn text(value: &MetadataValue) -> String {
    match value {
        MetadataValue::Text(t) => t.clone(),
        other => list(other).join(" "),
    }
}

fn apply_metadata(meta: &mut MetadataTest, key: MetadataKey, value: &MetadataValue) {
    match key {
        MetadataKey::Env => meta.env_vars = pairs(value),
        MetadataKey::Cmd => meta.cmd = Some(list(value)),
        MetadataKey::Entrypoint => meta.entrypoint = Some(list(value)),
        // the test driver compares port numbers without the protocol
        MetadataKey::ExposedPorts => {
            meta.exposed_ports =
                list(value).iter().map(|p| p.split('/').next().unwrap_or_default().to_owned()).collect()
        }
        MetadataKey::Labels => meta.labels = pairs(value),
        MetadataKey::Volumes => meta.volumes = list(value),
        MetadataKey::Workdir => meta.workdir = Some(text(value)),
        MetadataKey::User => meta.user = Some(text(value)),
    }
}

const AMBIGUOUS: &[&str] = &["y", "n", "yes", "no", "true", "false", "on", "off", "null", "~"];

/// Scalar as YAML: plain when unambiguous, double-quoted otherwise.
fn scalar(s: &str) -> String {
    let plain = s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '/')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || "_./-".contains(c))
        && !AMBIGUOUS.contains(&s.to_ascii_lowercase().as_str());
    if plain {
        return s.to_owned();
    }
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control()
                || matches!(c, '\u{2028}' | '\u{2029}' | '\u{feff}' | '\u{fffe}' | '\u{ffff}') =>
            {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn push_list(out: &mut String, indent: usize, key: &str, items: &[String]) {
    let pad = " ".repeat(indent);
    if items.is_empty() {
        let _ = writeln!(out, "{pad}{key}: []");
        return;
    }
    let _ = writeln!(out, "{pad}{key}:");
    for item in items {
        let _ = writeln!(out, "{pad}  - {}", scalar(item));
    }
}

fn push_pairs(out: &mut String, indent: usize, key: &str, items: &[KeyValue]) {
    let pad = " ".repeat(indent);
    let _ = writeln!(out, "{pad}{key}:");
    for kv in items {
        let _ = writeln!(out, "{pad}  - key: {}", scalar(&kv.key));
        let _ = writeln!(out, "{pad}    value: {}", scalar(&kv.value));
    }
}

/// Renders the document as YAML with two-space indentation and a fixed
/// key order. Empty sections are omitted.
pub fn serialize_cst(doc: &CstDocument) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "schemaVersion: \"{}\"", doc.schema_version);
    if !doc.command_tests.is_empty() {
        out.push_str("commandTests:\n");
        for t in &doc.command_tests {
            let _ = writeln!(out, "  - name: {}", scalar(&t.name));
            let _ = writeln!(out, "    command: {}", scalar(&t.command));
            for (key, items) in [
                ("args", &t.args),
                ("expectedOutput", &t.expected_output),
                ("expectedError", &t.expected_error),
                ("excludedOutput", &t.excluded_output),
            ] {
                if !items.is_empty() {
                    push_list(&mut out, 4, key, items);
                }
            }
        }
    }
    if !doc.file_existence_tests.is_empty() {
        out.push_str("fileExistenceTests:\n");
        for t in &doc.file_existence_tests {
            let _ = writeln!(out, "  - name: {}", scalar(&t.name));
            let _ = writeln!(out, "    path: {}", scalar(&t.path));
            let _ = writeln!(out, "    shouldExist: {}", t.should_exist);
            if let Some(p) = &t.permissions {
                let _ = writeln!(out, "    permissions: {}", scalar(p));
            }
        }
    }
    if let Some(m) = &doc.metadata_test {
        if m.item_count() == 0 {
            out.push_str("metadataTest: {}\n");
            return out;
        }
        out.push_str("metadataTest:\n");
        if !m.env_vars.is_empty() {
            push_pairs(&mut out, 2, "envVars", &m.env_vars);
        }
        if let Some(cmd) = &m.cmd {
            push_list(&mut out, 2, "cmd", cmd);
        }
        if let Some(ep) = &m.entrypoint {
            push_list(&mut out, 2, "entrypoint", ep);
        }
        if !m.exposed_ports.is_empty() {
            push_list(&mut out, 2, "exposedPorts", &m.exposed_ports);
        }
        if !m.labels.is_empty() {
            push_pairs(&mut out, 2, "labels", &m.labels);
        }
        if !m.volumes.is_empty() {
            push_list(&mut out, 2, "volumes", &m.volumes);
        }
        if let Some(w) = &m.workdir {
            let _ = writeln!(out, "  workdir: {}", scalar(w));
        }
        if let Some(u) = &m.user {
            let _ = writeln!(out, "  user: {}", scalar(u));
        }
    }
    out
}
