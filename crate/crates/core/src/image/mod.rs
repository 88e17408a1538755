//! Image ingestion: `docker save` tarballs and OCI image layouts.

mod archive;
mod config;
mod layer;
mod lifecycle;

use thiserror::Error;

pub use archive::{load_image_archive, ImageArchive, LayerDiff, SourceFormat};
pub use config::{read_image_config, HistoryEntry, ImageConfig, DEFAULT_PATH};
pub use layer::{enumerate_layer_entries, normalize_path, EntryType, FileEntry};
pub use lifecycle::{resolve_file_lifecycles, FileLifecycle, Lifecycles};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read image archive {path}: {reason}")]
    UnreadableArchive { path: String, reason: String },
    #[error("{subject}: computed digest {computed} does not match declared {declared}")]
    DigestMismatch { subject: String, declared: String, computed: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed layer tar: {0}")]
    MalformedTar(String),
    #[error("malformed image config: {0}")]
    MalformedConfig(String),
}
