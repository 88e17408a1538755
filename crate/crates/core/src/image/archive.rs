use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{
    enumerate_layer_entries, normalize_path, read_image_config, FileEntry, ImageConfig, IngestError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    DockerSave,
    OciLayout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDiff {
    /// `sha256:<hex>` of the uncompressed layer tar.
    pub diff_id: String,
    pub entries: Vec<FileEntry>,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageArchive {
    /// Base to top.
    pub layers: Vec<LayerDiff>,
    pub config: ImageConfig,
    pub source_format: SourceFormat,
    /// Image references recorded in the archive (`RepoTags`, or the OCI
    /// `org.opencontainers.image.ref.name` annotation).
    pub repo_tags: Vec<String>,
}

const GZIP_MAGIC: &[u8] = &[0x1f, 0x8b];
const ZSTD_MAGIC: &[u8] = &[0x28, 0xb5, 0x2f, 0xfd];

enum Source {
    Dir(PathBuf),
    Tar(HashMap<String, Vec<u8>>),
}

impl Source {
    fn key(name: &str) -> String {
        normalize_path(name).trim_start_matches('/').to_owned()
    }

    fn exists(&self, name: &str) -> bool {
        match self {
            Source::Dir(root) => root.join(Self::key(name)).is_file(),
            Source::Tar(members) => members.contains_key(&Self::key(name)),
        }
    }

    fn read(&self, name: &str, origin: &Path) -> Result<Vec<u8>, IngestError> {
        let missing =
            |reason: String| IngestError::UnreadableArchive { path: origin.display().to_string(), reason };
        match self {
            Source::Dir(root) => {
                fs::read(root.join(Self::key(name))).map_err(|e| missing(format!("{name}: {e}")))
            }
            Source::Tar(members) => members
                .get(&Self::key(name))
                .cloned()
                .ok_or_else(|| missing(format!("missing member {name}"))),
        }
    }
}

fn read_tarball(path: &Path) -> Result<Source, IngestError> {
    let unreadable =
        |reason: String| IngestError::UnreadableArchive { path: path.display().to_string(), reason };
    let mut bytes = fs::read(path).map_err(|e| unreadable(e.to_string()))?;
    if bytes.starts_with(GZIP_MAGIC) {
        bytes = decompress(&bytes).map_err(|e| unreadable(e.to_string()))?;
    }
    let mut archive = tar::Archive::new(bytes.as_slice());
    let mut members = HashMap::new();
    for member in archive.entries().map_err(|e| unreadable(e.to_string()))? {
        let mut member = member.map_err(|e| unreadable(e.to_string()))?;
        if !member.header().entry_type().is_file() {
            continue;
        }
        let name = String::from_utf8_lossy(&member.path_bytes()).into_owned();
        let expected = member.header().size().map_err(|e| unreadable(e.to_string()))?;
        let mut data = Vec::with_capacity(expected as usize);
        member.read_to_end(&mut data).map_err(|e| unreadable(format!("{name}: {e}")))?;
        if data.len() as u64 != expected {
            return Err(unreadable(format!("{name}: truncated ({} of {expected} bytes)", data.len())));
        }
        members.insert(Source::key(&name), data);
    }
    if members.is_empty() {
        return Err(unreadable("no members".into()));
    }
    Ok(Source::Tar(members))
}

fn decompress(bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    if bytes.starts_with(GZIP_MAGIC) {
        let mut out = Vec::new();
        flate2::read::MultiGzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(out)
    } else if bytes.starts_with(ZSTD_MAGIC) {
        zstd::stream::decode_all(bytes)
    } else {
        Ok(bytes.to_vec())
    }
}

fn sha256_digest(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct SaveManifestEntry {
    config: String,
    #[serde(default)]
    repo_tags: Option<Vec<String>>,
    layers: Vec<String>,
}

#[derive(Deserialize)]
struct OciIndex {
    manifests: Vec<OciDescriptor>,
}

#[derive(Deserialize)]
struct OciDescriptor {
    #[serde(rename = "mediaType", default)]
    media_type: String,
    digest: String,
    #[serde(default)]
    annotations: HashMap<String, String>,
    #[serde(default)]
    platform: Option<OciPlatform>,
}

#[derive(Deserialize)]
struct OciPlatform {
    #[serde(default)]
    architecture: String,
    #[serde(default)]
    os: String,
}

#[derive(Deserialize)]
struct OciManifest {
    config: OciDescriptor,
    layers: Vec<OciDescriptor>,
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T, IngestError> {
    serde_json::from_slice(bytes).map_err(|e| IngestError::UnsupportedFormat(format!("{what}: {e}")))
}

fn blob_name(digest: &str) -> Result<String, IngestError> {
    let (algo, hash) = digest
        .split_once(':')
        .ok_or_else(|| IngestError::UnsupportedFormat(format!("bad digest {digest}")))?;
    if algo.is_empty()
        || !algo.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        || hash.is_empty()
        || !hash.chars().all(|c| c.is_ascii_hexdigit())
    {
        return Err(IngestError::UnsupportedFormat(format!("bad digest {digest}")));
    }
    Ok(format!("blobs/{algo}/{hash}"))
}

fn read_blob(src: &Source, digest: &str, origin: &Path) -> Result<Vec<u8>, IngestError> {
    let bytes = src.read(&blob_name(digest)?, origin)?;
    if digest.starts_with("sha256:") {
        let computed = sha256_digest(&bytes);
        if computed != digest {
            return Err(IngestError::DigestMismatch {
                subject: format!("blob {digest}"),
                declared: digest.to_owned(),
                computed,
            });
        }
    }
    Ok(bytes)
}

struct RawImage {
    config_json: Vec<u8>,
    layer_blobs: Vec<Vec<u8>>,
    repo_tags: Vec<String>,
}

fn read_docker_save(src: &Source, origin: &Path) -> Result<RawImage, IngestError> {
    let manifest: Vec<SaveManifestEntry> = parse_json(&src.read("manifest.json", origin)?, "manifest.json")?;
    let entry = manifest
        .into_iter()
        .next()
        .ok_or_else(|| IngestError::UnsupportedFormat("manifest.json lists no images".into()))?;
    let layer_blobs = entry.layers.iter().map(|l| src.read(l, origin)).collect::<Result<_, _>>()?;
    Ok(RawImage {
        config_json: src.read(&entry.config, origin)?,
        layer_blobs,
        repo_tags: entry.repo_tags.unwrap_or_default(),
    })
}

const INDEX_MEDIA_TYPES: &[&str] =
    &["application/vnd.oci.image.index.v1+json", "application/vnd.docker.distribution.manifest.list.v2+json"];

fn read_oci_layout(src: &Source, origin: &Path) -> Result<RawImage, IngestError> {
    let index: OciIndex = parse_json(&src.read("index.json", origin)?, "index.json")?;
    let mut desc = pick_manifest(index.manifests)?;
    let mut repo_tags: Vec<String> =
        desc.annotations.get("org.opencontainers.image.ref.name").cloned().into_iter().collect();
    // follow nested indexes (bounded)
    for _ in 0..4 {
        let blob = read_blob(src, &desc.digest, origin)?;
        let value: serde_json::Value = parse_json(&blob, "manifest")?;
        let nested =
            INDEX_MEDIA_TYPES.contains(&desc.media_type.as_str()) || value.get("manifests").is_some();
        if nested {
            let nested: OciIndex = parse_json(&blob, "image index")?;
            desc = pick_manifest(nested.manifests)?;
            if let Some(name) = desc.annotations.get("org.opencontainers.image.ref.name") {
                repo_tags.push(name.clone());
            }
            continue;
        }
        let manifest: OciManifest = parse_json(&blob, "image manifest")?;
        let layer_blobs =
            manifest.layers.iter().map(|l| read_blob(src, &l.digest, origin)).collect::<Result<_, _>>()?;
        return Ok(RawImage {
            config_json: read_blob(src, &manifest.config.digest, origin)?,
            layer_blobs,
            repo_tags,
        });
    }
    Err(IngestError::UnsupportedFormat("image index nesting too deep".into()))
}

fn pick_manifest(manifests: Vec<OciDescriptor>) -> Result<OciDescriptor, IngestError> {
    let preferred = manifests
        .iter()
        .position(|m| m.platform.as_ref().is_some_and(|p| p.os == "linux" && p.architecture == "amd64"));
    let mut manifests = manifests;
    if manifests.is_empty() {
        return Err(IngestError::UnsupportedFormat("index lists no manifests".into()));
    }
    Ok(manifests.swap_remove(preferred.unwrap_or(0)))
}

/// Loads an image from a `docker save` tarball (optionally gzipped), an
/// extracted tarball directory, or an OCI image layout (directory or tar).
pub fn load_image_archive(path: impl AsRef<Path>) -> Result<ImageArchive, IngestError> {
    let path = path.as_ref();
    let src = if path.is_dir() {
        Source::Dir(path.to_owned())
    } else if path.is_file() {
        read_tarball(path)?
    } else {
        return Err(IngestError::UnreadableArchive {
            path: path.display().to_string(),
            reason: "no such file or directory".into(),
        });
    };

    let (source_format, raw) = if src.exists("manifest.json") {
        (SourceFormat::DockerSave, read_docker_save(&src, path)?)
    } else if src.exists("oci-layout") && src.exists("index.json") {
        (SourceFormat::OciLayout, read_oci_layout(&src, path)?)
    } else {
        return Err(IngestError::UnsupportedFormat(format!(
            "{}: neither manifest.json nor an OCI layout",
            path.display()
        )));
    };

    let config = read_image_config(&raw.config_json)?;
    let layers = raw
        .layer_blobs
        .par_iter()
        .enumerate()
        .map(|(index, blob)| {
            let tar = decompress(blob).map_err(|e| IngestError::UnreadableArchive {
                path: path.display().to_string(),
                reason: format!("layer {index}: {e}"),
            })?;
            let diff_id = sha256_digest(&tar);
            if let Some(declared) = config.diff_ids.get(index) {
                if *declared != diff_id {
                    return Err(IngestError::DigestMismatch {
                        subject: format!("layer {index}"),
                        declared: declared.clone(),
                        computed: diff_id,
                    });
                }
            }
            let entries = enumerate_layer_entries(&tar)?;
            Ok(LayerDiff { diff_id, entries, index })
        })
        .collect::<Result<Vec<_>, _>>()?;

    if !config.diff_ids.is_empty() && config.diff_ids.len() != layers.len() {
        return Err(IngestError::MalformedConfig(format!(
            "config declares {} diff_ids but the archive has {} layers",
            config.diff_ids.len(),
            layers.len()
        )));
    }
    let history_layers = config.layer_history().count();
    if !config.history.is_empty() && history_layers != layers.len() {
        return Err(IngestError::MalformedConfig(format!(
            "history records {history_layers} layers but the archive has {}",
            layers.len()
        )));
    }

    Ok(ImageArchive { layers, config, source_format, repo_tags: raw.repo_tags })
}
