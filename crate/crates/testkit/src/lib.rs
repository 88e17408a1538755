//! Synthetic container images for tests.
//!
//! An [`ImageSpec`] describes an image as a build history whose steps may
//! carry a layer. It can be written as a `docker save` tarball, as the
//! extracted tarball directory, or as an OCI image layout, without a
//! container engine.

pub mod fixtures;

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Member {
    File {
        path: String,
        mode: u32,
        data: Vec<u8>,
    },
    Dir {
        path: String,
        mode: u32,
    },
    Symlink {
        path: String,
        target: String,
    },
    Hardlink {
        path: String,
        target: String,
    },
    /// Deletes `path` from lower layers (`.wh.` marker).
    Whiteout {
        path: String,
    },
    /// Hides all lower-layer content of `dir` (`.wh..wh..opq` marker).
    Opaque {
        dir: String,
    },
}

impl Member {
    pub fn file(path: &str, mode: u32, data: impl Into<Vec<u8>>) -> Self {
        Member::File { path: path.into(), mode, data: data.into() }
    }

    pub fn dir(path: &str) -> Self {
        Member::Dir { path: path.into(), mode: 0o755 }
    }

    pub fn symlink(path: &str, target: &str) -> Self {
        Member::Symlink { path: path.into(), target: target.into() }
    }

    pub fn hardlink(path: &str, target: &str) -> Self {
        Member::Hardlink { path: path.into(), target: target.into() }
    }

    pub fn whiteout(path: &str) -> Self {
        Member::Whiteout { path: path.into() }
    }

    pub fn opaque(dir: &str) -> Self {
        Member::Opaque { dir: dir.into() }
    }

    fn path(&self) -> &str {
        match self {
            Member::File { path, .. }
            | Member::Dir { path, .. }
            | Member::Symlink { path, .. }
            | Member::Hardlink { path, .. }
            | Member::Whiteout { path } => path,
            Member::Opaque { dir } => dir,
        }
    }
}

/// One history step; `layer` is `None` for metadata-only steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub created_by: String,
    pub layer: Option<Vec<Member>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    None,
    Gzip,
    Zstd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSpec {
    pub steps: Vec<Step>,
    /// The `config` object of the image config JSON (`Env`, `Cmd`, ...).
    pub container_config: Value,
    pub repo_tag: String,
}

impl ImageSpec {
    pub fn new(repo_tag: &str) -> Self {
        Self { steps: Vec::new(), container_config: json!({}), repo_tag: repo_tag.into() }
    }

    /// Adds a layer-producing step. Missing parent directories of every
    /// member are added to the layer, as image builders do.
    pub fn layer(mut self, created_by: &str, members: Vec<Member>) -> Self {
        self.steps.push(Step { created_by: created_by.into(), layer: Some(with_parents(members)) });
        self
    }

    /// Adds a layer-producing step verbatim.
    pub fn raw_layer(mut self, created_by: &str, members: Vec<Member>) -> Self {
        self.steps.push(Step { created_by: created_by.into(), layer: Some(members) });
        self
    }

    pub fn empty(mut self, created_by: &str) -> Self {
        self.steps.push(Step { created_by: created_by.into(), layer: None });
        self
    }

    pub fn config(mut self, config: Value) -> Self {
        self.container_config = config;
        self
    }

    pub fn layers(&self) -> impl Iterator<Item = &Vec<Member>> {
        self.steps.iter().filter_map(|s| s.layer.as_ref())
    }

    /// Uncompressed tar bytes of every layer, base to top.
    pub fn layer_tars(&self) -> Vec<Vec<u8>> {
        self.layers().map(|l| layer_tar(l)).collect()
    }

    pub fn diff_ids(&self) -> Vec<String> {
        self.layer_tars().iter().map(|t| sha256(t)).collect()
    }

    pub fn config_json(&self) -> Vec<u8> {
        let history: Vec<Value> = self
            .steps
            .iter()
            .map(|s| {
                if s.layer.is_some() {
                    json!({"created": "2024-01-01T00:00:00Z", "created_by": s.created_by})
                } else {
                    json!({"created": "2024-01-01T00:00:00Z", "created_by": s.created_by, "empty_layer": true})
                }
            })
            .collect();
        let doc = json!({
            "architecture": "amd64",
            "os": "linux",
            "config": self.container_config,
            "rootfs": {"type": "layers", "diff_ids": self.diff_ids()},
            "history": history,
        });
        serde_json::to_vec(&doc).expect("serializable")
    }

    fn docker_save_members(&self, compression: Compression) -> Vec<(String, Vec<u8>)> {
        let config = self.config_json();
        let config_name = format!("{}.json", hex_digest(&config));
        let mut members = Vec::new();
        let mut layer_names = Vec::new();
        for tar in self.layer_tars() {
            let name = format!("{}/layer.tar", hex_digest(&tar));
            layer_names.push(name.clone());
            members.push((name, compress(&tar, compression)));
        }
        let manifest = json!([{
            "Config": config_name,
            "RepoTags": [self.repo_tag],
            "Layers": layer_names,
        }]);
        members.push((config_name, config));
        members.push(("manifest.json".into(), serde_json::to_vec(&manifest).unwrap()));
        members
    }

    /// Writes a `docker save` style tarball.
    pub fn write_docker_save(&self, path: &Path, compression: Compression) -> io::Result<()> {
        write_tar(path, &self.docker_save_members(compression))
    }

    /// Writes the contents of a `docker save` tarball into a directory.
    pub fn write_docker_save_dir(&self, dir: &Path) -> io::Result<()> {
        write_dir(dir, &self.docker_save_members(Compression::None))
    }

    fn oci_members(&self, compression: Compression) -> Vec<(String, Vec<u8>)> {
        let media = match compression {
            Compression::None => "application/vnd.oci.image.layer.v1.tar",
            Compression::Gzip => "application/vnd.oci.image.layer.v1.tar+gzip",
            Compression::Zstd => "application/vnd.oci.image.layer.v1.tar+zstd",
        };
        let mut members = Vec::new();
        let mut blob = |bytes: Vec<u8>| -> (String, usize) {
            let digest = sha256(&bytes);
            let size = bytes.len();
            members.push((format!("blobs/sha256/{}", hex_digest(&bytes)), bytes));
            (digest, size)
        };
        let layers: Vec<Value> = self
            .layer_tars()
            .iter()
            .map(|t| {
                let (digest, size) = blob(compress(t, compression));
                json!({"mediaType": media, "digest": digest, "size": size})
            })
            .collect();
        let (config_digest, config_size) = blob(self.config_json());
        let manifest = json!({
            "schemaVersion": 2,
            "mediaType": "application/vnd.oci.image.manifest.v1+json",
            "config": {
                "mediaType": "application/vnd.oci.image.config.v1+json",
                "digest": config_digest,
                "size": config_size,
            },
            "layers": layers,
        });
        let (manifest_digest, manifest_size) = blob(serde_json::to_vec(&manifest).unwrap());
        let index = json!({
            "schemaVersion": 2,
            "manifests": [{
                "mediaType": "application/vnd.oci.image.manifest.v1+json",
                "digest": manifest_digest,
                "size": manifest_size,
                "annotations": {"org.opencontainers.image.ref.name": self.repo_tag},
                "platform": {"architecture": "amd64", "os": "linux"},
            }],
        });
        members.push(("index.json".into(), serde_json::to_vec(&index).unwrap()));
        members.push(("oci-layout".into(), br#"{"imageLayoutVersion":"1.0.0"}"#.to_vec()));
        members
    }

    /// Writes an OCI image layout directory.
    pub fn write_oci_layout(&self, dir: &Path, compression: Compression) -> io::Result<()> {
        write_dir(dir, &self.oci_members(compression))
    }

    /// Writes an OCI image layout packed into a tarball.
    pub fn write_oci_tar(&self, path: &Path, compression: Compression) -> io::Result<()> {
        write_tar(path, &self.oci_members(compression))
    }
}

fn with_parents(members: Vec<Member>) -> Vec<Member> {
    let explicit: BTreeSet<String> = members.iter().map(|m| norm(m.path())).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for m in members {
        let path = norm(m.path());
        let mut parents = Vec::new();
        let mut cur = path.as_str();
        while let Some(i) = cur.rfind('/') {
            cur = &cur[..i];
            if cur.is_empty() {
                break;
            }
            parents.push(cur.to_owned());
        }
        for p in parents.into_iter().rev() {
            if !explicit.contains(&p) && seen.insert(p.clone()) {
                out.push(Member::dir(&p));
            }
        }
        out.push(m);
    }
    out
}

fn norm(p: &str) -> String {
    format!("/{}", p.trim_matches('/'))
}

/// Serializes one layer as an uncompressed tar, the way image builders
/// store layers: relative member names, directories with a trailing slash.
pub fn layer_tar(members: &[Member]) -> Vec<u8> {
    let mut b = tar::Builder::new(Vec::new());
    for m in members {
        let mut h = tar::Header::new_gnu();
        h.set_mtime(0);
        h.set_uid(0);
        h.set_gid(0);
        let rel = |p: &str| p.trim_start_matches('/').to_owned();
        let (name, data): (String, &[u8]) = match m {
            Member::File { path, mode, data } => {
                h.set_entry_type(tar::EntryType::Regular);
                h.set_mode(*mode);
                (rel(path), data)
            }
            Member::Dir { path, mode } => {
                h.set_entry_type(tar::EntryType::Directory);
                h.set_mode(*mode);
                (format!("{}/", rel(path)), &[])
            }
            Member::Symlink { path, target } => {
                h.set_entry_type(tar::EntryType::Symlink);
                h.set_mode(0o777);
                h.set_link_name(target).unwrap();
                (rel(path), &[])
            }
            Member::Hardlink { path, target } => {
                h.set_entry_type(tar::EntryType::Link);
                h.set_mode(0o644);
                h.set_link_name(rel(target)).unwrap();
                (rel(path), &[])
            }
            Member::Whiteout { path } => {
                h.set_entry_type(tar::EntryType::Regular);
                h.set_mode(0);
                let p = rel(path);
                let name = match p.rfind('/') {
                    Some(i) => format!("{}/.wh.{}", &p[..i], &p[i + 1..]),
                    None => format!(".wh.{p}"),
                };
                (name, &[])
            }
            Member::Opaque { dir } => {
                h.set_entry_type(tar::EntryType::Regular);
                h.set_mode(0);
                (format!("{}/.wh..wh..opq", rel(dir)), &[])
            }
        };
        h.set_size(data.len() as u64);
        b.append_data(&mut h, name, data).expect("in-memory tar");
    }
    b.into_inner().expect("in-memory tar")
}

pub fn sha256(bytes: &[u8]) -> String {
    format!("sha256:{}", hex_digest(bytes))
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn compress(bytes: &[u8], compression: Compression) -> Vec<u8> {
    match compression {
        Compression::None => bytes.to_vec(),
        Compression::Gzip => {
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap()
        }
        Compression::Zstd => zstd::stream::encode_all(bytes, 3).unwrap(),
    }
}

fn write_tar(path: &Path, members: &[(String, Vec<u8>)]) -> io::Result<()> {
    let mut b = tar::Builder::new(fs::File::create(path)?);
    for (name, data) in members {
        let mut h = tar::Header::new_gnu();
        h.set_entry_type(tar::EntryType::Regular);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_size(data.len() as u64);
        b.append_data(&mut h, name, data.as_slice())?;
    }
    b.into_inner()?.sync_all()
}

fn write_dir(dir: &Path, members: &[(String, Vec<u8>)]) -> io::Result<()> {
    for (name, data) in members {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, data)?;
    }
    Ok(())
}
