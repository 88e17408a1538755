//! Which kind of test each selected effect gets.

use std::collections::{HashMap, HashSet};

use crate::effect::{EffectSet, FileEffect};
use crate::image::{EntryType, Lifecycles};
use crate::scoring::{EffectRef, ScoreBreakdown};

/// Symlink hops followed before a path is considered unresolvable.
pub const MAX_SYMLINK_HOPS: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    entry_type: EntryType,
    mode_bits: u32,
    link_target: Option<String>,
}

/// The flattened filesystem of the image, for path resolution.
#[derive(Debug, Clone, Default)]
pub struct FinalFs {
    nodes: HashMap<String, Node>,
    /// Directories implied by deeper entries but absent from every layer.
    implied_dirs: HashSet<String>,
}

impl FinalFs {
    pub fn from_lifecycles(lifecycles: &Lifecycles) -> Self {
        Self::from_entries(
            lifecycles.alive().map(|l| (l.path.clone(), l.entry_type, l.last_mode, l.link_target.clone())),
        )
    }

    pub fn from_effects(effects: &EffectSet) -> Self {
        Self::from_entries(
            effects
                .file_effects
                .iter()
                .filter(|e| !e.deleted)
                .map(|e| (e.path.clone(), e.entry_type, e.mode_bits, e.link_target.clone())),
        )
    }

    fn from_entries(entries: impl Iterator<Item = (String, EntryType, u32, Option<String>)>) -> Self {
        let mut fs = FinalFs::default();
        for (path, entry_type, mode_bits, link_target) in entries {
            let mut p = path.as_str();
            while let Some(i) = p.rfind('/') {
                p = &p[..i];
                if p.is_empty() || !fs.implied_dirs.insert(p.to_owned()) {
                    break;
                }
            }
            fs.nodes.insert(path, Node { entry_type, mode_bits, link_target });
        }
        fs
    }

    fn is_dir(&self, path: &str) -> bool {
        path == "/"
            || self.implied_dirs.contains(path)
            || self.nodes.get(path).is_some_and(|n| n.entry_type == EntryType::Directory)
    }

    /// Resolves every symlink in `path`, including the last component.
    /// Returns the absolute path of the entry it names, or `None` when a
    /// component is missing or the hop limit is exceeded.
    pub fn resolve(&self, path: &str) -> Option<String> {
        let mut pending: Vec<String> = components(path).rev().map(str::to_owned).collect();
        let mut cur: Vec<String> = Vec::new();
        let mut hops = 0;
        while let Some(comp) = pending.pop() {
            match comp.as_str() {
                "." => continue,
                ".." => {
                    cur.pop();
                    continue;
                }
                _ => {}
            }
            let parent = format!("/{}", cur.join("/"));
            if !self.is_dir(&parent) {
                return None;
            }
            cur.push(comp);
            let here = format!("/{}", cur.join("/"));
            match self.nodes.get(&here) {
                Some(Node { entry_type: EntryType::Symlink, link_target: Some(target), .. }) => {
                    hops += 1;
                    if hops > MAX_SYMLINK_HOPS {
                        return None;
                    }
                    cur.pop();
                    if target.starts_with('/') {
                        cur.clear();
                    }
                    pending.extend(components(target).rev().map(str::to_owned));
                }
                Some(_) => {}
                None if self.implied_dirs.contains(&here) => {}
                None => return None,
            }
        }
        Some(format!("/{}", cur.join("/")))
    }

    /// Whether the entry `path` resolves to is a regular file with an
    /// execute bit.
    pub fn is_executable_file(&self, path: &str) -> bool {
        let Some(resolved) = self.resolve(path) else {
            return false;
        };
        self.nodes.get(&resolved).is_some_and(|n| {
            matches!(n.entry_type, EntryType::Regular | EntryType::Hardlink) && n.mode_bits & 0o111 != 0
        })
    }
}

fn components(path: &str) -> impl DoubleEndedIterator<Item = &str> {
    path.split('/').filter(|c| !c.is_empty())
}

fn parent(path: &str) -> &str {
    match path.rfind('/') {
        Some(0) => "/",
        Some(i) => &path[..i],
        None => "",
    }
}

/// An executable is a live file whose parent directory is on `PATH` and
/// which resolves, through symlinks, to a regular file with an execute bit.
pub fn classify_executable(effect: &FileEffect, path_dirs: &[String], fs: &FinalFs) -> bool {
    if effect.deleted || effect.entry_type == EntryType::Directory {
        return false;
    }
    let dir = parent(&effect.path);
    path_dirs.iter().any(|d| d.trim_end_matches('/') == dir || (d == "/" && dir == "/"))
        && fs.is_executable_file(&effect.path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Viewpoint {
    MetadataCheck,
    ExecutableExistence,
    ExecutableVersion,
    FileExistence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedTest {
    pub viewpoint: Viewpoint,
    pub subject: EffectRef,
    /// Basename of the executable, for the executable viewpoints.
    pub executable_name: Option<String>,
}

pub fn basename(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or_default()
}

/// Plans tests for the selected effects, in selection order: a metadata
/// check per metadata effect, existence and version checks per executable,
/// and an existence check per other file.
pub fn assign_viewpoints(
    selected: &[ScoreBreakdown],
    effects: &EffectSet,
    path_dirs: &[String],
    fs: &FinalFs,
) -> Vec<PlannedTest> {
    let mut out = Vec::with_capacity(selected.len() * 2);
    for b in selected {
        match b.effect {
            EffectRef::Metadata(_) => out.push(PlannedTest {
                viewpoint: Viewpoint::MetadataCheck,
                subject: b.effect,
                executable_name: None,
            }),
            EffectRef::File(i) => {
                let effect = &effects.file_effects[i];
                if classify_executable(effect, path_dirs, fs) {
                    let name = Some(basename(&effect.path).to_owned());
                    for viewpoint in [Viewpoint::ExecutableExistence, Viewpoint::ExecutableVersion] {
                        out.push(PlannedTest { viewpoint, subject: b.effect, executable_name: name.clone() });
                    }
                } else {
                    out.push(PlannedTest {
                        viewpoint: Viewpoint::FileExistence,
                        subject: b.effect,
                        executable_name: None,
                    });
                }
            }
        }
    }
    out
}
