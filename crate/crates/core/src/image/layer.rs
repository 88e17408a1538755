use super::IngestError;
use std::collections::HashMap;

const WHITEOUT_PREFIX: &str = ".wh.";
const OPAQUE_MARKER: &str = ".wh..wh..opq";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntryType {
    Regular,
    Directory,
    Symlink,
    Hardlink,
    Device,
    WhiteoutMarker,
    OpaqueDirMarker,
}

impl EntryType {
    pub fn is_marker(self) -> bool {
        matches!(self, EntryType::WhiteoutMarker | EntryType::OpaqueDirMarker)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEntry {
    /// Absolute, normalized. For an opaque marker this is the directory made
    /// opaque; for a whiteout it is the marker's own path.
    pub path: String,
    pub entry_type: EntryType,
    pub mode_bits: u32,
    pub size_bytes: u64,
    pub link_target: Option<String>,
}

impl FileEntry {
    /// Path hidden by a whiteout marker (`/dir/.wh.name` hides `/dir/name`).
    pub fn whiteout_target(&self) -> Option<String> {
        if self.entry_type != EntryType::WhiteoutMarker {
            return None;
        }
        let (dir, base) = split_parent(&self.path);
        let name = base.strip_prefix(WHITEOUT_PREFIX)?;
        Some(join(dir, name))
    }
}

/// Lexically normalizes a tar member name to an absolute path: strips
/// leading `./` and `/`, collapses `//`, resolves `.` and `..`, drops any
/// trailing slash. No Unicode normalization or case folding is applied.
pub fn normalize_path(raw: &str) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for part in raw.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            p => parts.push(p),
        }
    }
    let mut out = String::with_capacity(raw.len() + 1);
    for p in &parts {
        out.push('/');
        out.push_str(p);
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

pub(crate) fn split_parent(path: &str) -> (&str, &str) {
    match path.rfind('/') {
        Some(0) => ("/", &path[1..]),
        Some(i) => (&path[..i], &path[i + 1..]),
        None => ("/", path),
    }
}

pub(crate) fn join(dir: &str, name: &str) -> String {
    if dir == "/" {
        format!("/{name}")
    } else {
        format!("{dir}/{name}")
    }
}

/// Lists the entries of an uncompressed layer tar, one per member.
///
/// The filesystem root itself is skipped. When a member name repeats, the
/// later header wins (tar extraction semantics).
pub fn enumerate_layer_entries(layer_tar: &[u8]) -> Result<Vec<FileEntry>, IngestError> {
    let malformed = |e: std::io::Error| IngestError::MalformedTar(e.to_string());
    let mut archive = tar::Archive::new(layer_tar);
    let mut entries: Vec<FileEntry> = Vec::new();
    let mut by_path: HashMap<String, usize> = HashMap::new();

    for member in archive.entries().map_err(malformed)? {
        let mut member = member.map_err(malformed)?;
        let raw = String::from_utf8_lossy(&member.path_bytes()).into_owned();
        let path = normalize_path(&raw);
        if path == "/" {
            continue;
        }
        let header = member.header();
        let mode_bits = header.mode().map_err(malformed)? & 0o7777;
        let size_bytes = header.size().map_err(malformed)?;
        let link_target = member.link_name_bytes().map(|l| String::from_utf8_lossy(&l).into_owned());

        let (_, base) = split_parent(&path);
        let mut entry = if base == OPAQUE_MARKER {
            FileEntry {
                path: split_parent(&path).0.to_owned(),
                entry_type: EntryType::OpaqueDirMarker,
                mode_bits,
                size_bytes: 0,
                link_target: None,
            }
        } else if base.starts_with(WHITEOUT_PREFIX) {
            FileEntry {
                path,
                entry_type: EntryType::WhiteoutMarker,
                mode_bits,
                size_bytes: 0,
                link_target: None,
            }
        } else {
            use tar::EntryType as T;
            let entry_type = match header.entry_type() {
                T::Directory => EntryType::Directory,
                T::Symlink => EntryType::Symlink,
                T::Link => EntryType::Hardlink,
                T::Char | T::Block | T::Fifo => EntryType::Device,
                _ => EntryType::Regular,
            };
            let link_target = match entry_type {
                EntryType::Symlink => link_target,
                EntryType::Hardlink => link_target.map(|l| normalize_path(&l)),
                _ => None,
            };
            FileEntry { path, entry_type, mode_bits, size_bytes, link_target }
        };

        if entry.entry_type == EntryType::Regular {
            // detect truncated content early rather than yielding bogus sizes
            let read = std::io::copy(&mut member, &mut std::io::sink()).map_err(malformed)?;
            if read != size_bytes {
                return Err(IngestError::MalformedTar(format!(
                    "{}: expected {size_bytes} bytes, found {read}",
                    entry.path
                )));
            }
        }

        if entry.entry_type == EntryType::Hardlink {
            let target = entry.link_target.as_ref().and_then(|t| by_path.get(t)).map(|&i| &entries[i]);
            if let Some(target) = target {
                entry.mode_bits = target.mode_bits;
                entry.size_bytes = target.size_bytes;
            }
        }

        let key = match entry.entry_type {
            // an opaque marker and its directory share a path
            EntryType::OpaqueDirMarker => format!("{}\0opq", entry.path),
            _ => entry.path.clone(),
        };
        match by_path.get(&key) {
            Some(&i) => entries[i] = entry,
            None => {
                by_path.insert(key, entries.len());
                entries.push(entry);
            }
        }
    }
    Ok(entries)
}
