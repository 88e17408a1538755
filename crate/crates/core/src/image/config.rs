use std::collections::BTreeMap;

use serde::Deserialize;

use super::IngestError;

/// `PATH` assumed when the image config does not set one.
pub const DEFAULT_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub created_by: String,
    pub empty_layer: bool,
}

/// The metadata part of an image config plus its build history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageConfig {
    /// `KEY=value` strings.
    pub env: Vec<String>,
    pub cmd: Option<Vec<String>>,
    pub entrypoint: Option<Vec<String>>,
    pub labels: BTreeMap<String, String>,
    pub workdir: Option<String>,
    pub user: Option<String>,
    /// `port/proto`, sorted.
    pub exposed_ports: Vec<String>,
    pub volumes: Vec<String>,
    pub history: Vec<HistoryEntry>,
    /// `rootfs.diff_ids`, base to top.
    pub diff_ids: Vec<String>,
}

impl ImageConfig {
    pub fn env_var(&self, name: &str) -> Option<&str> {
        self.env.iter().rev().find_map(|kv| kv.split_once('=').filter(|(k, _)| *k == name).map(|(_, v)| v))
    }

    /// Directories listed in `PATH`, without trailing slashes.
    pub fn path_dirs(&self) -> Vec<String> {
        self.env_var("PATH")
            .unwrap_or(DEFAULT_PATH)
            .split(':')
            .filter(|d| d.starts_with('/'))
            .map(super::normalize_path)
            .collect()
    }

    /// History entries that produced a filesystem layer.
    pub fn layer_history(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.history.iter().filter(|h| !h.empty_layer)
    }
}

#[derive(Deserialize)]
struct RawConfigFile {
    #[serde(default)]
    config: Option<RawContainerConfig>,
    #[serde(default)]
    rootfs: Option<RawRootfs>,
    #[serde(default)]
    history: Option<Vec<RawHistory>>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "PascalCase")]
struct RawContainerConfig {
    #[serde(default)]
    env: Option<Vec<String>>,
    #[serde(default)]
    cmd: Option<Vec<String>>,
    #[serde(default)]
    entrypoint: Option<Vec<String>>,
    #[serde(default)]
    labels: Option<BTreeMap<String, String>>,
    #[serde(default)]
    working_dir: Option<String>,
    #[serde(default)]
    user: Option<String>,
    #[serde(default)]
    exposed_ports: Option<BTreeMap<String, serde_json::Value>>,
    #[serde(default)]
    volumes: Option<BTreeMap<String, serde_json::Value>>,
}

#[derive(Deserialize)]
struct RawRootfs {
    #[serde(default)]
    diff_ids: Vec<String>,
}

#[derive(Deserialize)]
struct RawHistory {
    #[serde(default)]
    created_by: String,
    #[serde(default)]
    empty_layer: bool,
}

/// Parses an image config JSON document (the blob `docker inspect` reports
/// as `Config` plus `RootFS` and history).
pub fn read_image_config(json: &[u8]) -> Result<ImageConfig, IngestError> {
    let raw: RawConfigFile =
        serde_json::from_slice(json).map_err(|e| IngestError::MalformedConfig(e.to_string()))?;
    let c = raw.config.unwrap_or_default();
    let non_empty = |s: Option<String>| s.filter(|s| !s.is_empty());
    Ok(ImageConfig {
        env: c.env.unwrap_or_default(),
        cmd: c.cmd,
        entrypoint: c.entrypoint,
        labels: c.labels.unwrap_or_default(),
        workdir: non_empty(c.working_dir),
        user: non_empty(c.user),
        exposed_ports: c.exposed_ports.unwrap_or_default().into_keys().collect(),
        volumes: c.volumes.unwrap_or_default().into_keys().collect(),
        history: raw
            .history
            .unwrap_or_default()
            .into_iter()
            .map(|h| HistoryEntry { created_by: h.created_by, empty_layer: h.empty_layer })
            .collect(),
        diff_ids: raw.rootfs.map(|r| r.diff_ids).unwrap_or_default(),
    })
}
