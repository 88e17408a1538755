use std::collections::BTreeMap;

use super::{EntryType, LayerDiff};

/// One stretch of existence of a path: from the layer that added (or last
/// overwrote) it to the layer that deleted it, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileLifecycle {
    pub path: String,
    pub added_layer: usize,
    pub deleted_layer: Option<usize>,
    pub last_mode: u32,
    pub entry_type: EntryType,
    pub size_bytes: u64,
    pub link_target: Option<String>,
}

impl FileLifecycle {
    pub fn is_alive(&self) -> bool {
        self.deleted_layer.is_none()
    }
}

/// All lifecycles of an image, ordered by path then `added_layer`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lifecycles {
    items: Vec<FileLifecycle>,
    alive: BTreeMap<String, usize>,
}

impl Lifecycles {
    pub fn iter(&self) -> std::slice::Iter<'_, FileLifecycle> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn alive(&self) -> impl Iterator<Item = &FileLifecycle> {
        self.alive.values().map(|&i| &self.items[i])
    }

    /// The alive lifecycle at `path`, i.e. the entry of the final filesystem.
    pub fn get_alive(&self, path: &str) -> Option<&FileLifecycle> {
        self.alive.get(path).map(|&i| &self.items[i])
    }
}

impl<'a> IntoIterator for &'a Lifecycles {
    type Item = &'a FileLifecycle;
    type IntoIter = std::slice::Iter<'a, FileLifecycle>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

struct Overlay {
    items: Vec<FileLifecycle>,
    alive: BTreeMap<String, usize>,
}

impl Overlay {
    fn delete(&mut self, path: &str, layer: usize) {
        if let Some(i) = self.alive.remove(path) {
            self.items[i].deleted_layer = Some(layer);
        }
    }

    /// Deletes everything strictly beneath `dir`.
    fn delete_below(&mut self, dir: &str, layer: usize) {
        let prefix = if dir == "/" { "/".to_owned() } else { format!("{dir}/") };
        let doomed: Vec<String> = self
            .alive
            .range(prefix.clone()..)
            .take_while(|(p, _)| p.starts_with(&prefix))
            .filter(|(p, _)| p.as_str() != dir)
            .map(|(p, _)| p.clone())
            .collect();
        for p in doomed {
            self.delete(&p, layer);
        }
    }
}

/// Folds layers base-to-top into per-path lifecycles using the OCI
/// whiteout rules. Markers in a layer only affect lower layers, so they are
/// applied before that layer's own entries.
pub fn resolve_file_lifecycles(layers: &[LayerDiff]) -> Lifecycles {
    let mut ov = Overlay { items: Vec::new(), alive: BTreeMap::new() };
    for layer in layers {
        let k = layer.index;
        for e in layer.entries.iter().filter(|e| e.entry_type.is_marker()) {
            match e.entry_type {
                EntryType::WhiteoutMarker => {
                    if let Some(target) = e.whiteout_target() {
                        ov.delete(&target, k);
                        ov.delete_below(&target, k);
                    }
                }
                EntryType::OpaqueDirMarker => ov.delete_below(&e.path, k),
                _ => unreachable!(),
            }
        }
        for e in layer.entries.iter().filter(|e| !e.entry_type.is_marker()) {
            match ov.alive.get(&e.path).copied() {
                Some(i) => {
                    let replaces_dir = ov.items[i].entry_type == EntryType::Directory
                        && e.entry_type != EntryType::Directory;
                    if replaces_dir {
                        ov.delete_below(&e.path, k);
                    }
                    let lc = &mut ov.items[i];
                    lc.added_layer = k;
                    lc.last_mode = e.mode_bits;
                    lc.entry_type = e.entry_type;
                    lc.size_bytes = e.size_bytes;
                    lc.link_target = e.link_target.clone();
                }
                None => {
                    ov.alive.insert(e.path.clone(), ov.items.len());
                    ov.items.push(FileLifecycle {
                        path: e.path.clone(),
                        added_layer: k,
                        deleted_layer: None,
                        last_mode: e.mode_bits,
                        entry_type: e.entry_type,
                        size_bytes: e.size_bytes,
                        link_target: e.link_target.clone(),
                    });
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..ov.items.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&ov.items[a], &ov.items[b]);
        x.path.as_bytes().cmp(y.path.as_bytes()).then(x.added_layer.cmp(&y.added_layer))
    });
    let mut remap = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let mut slots: Vec<Option<FileLifecycle>> = ov.items.into_iter().map(Some).collect();
    let items = order.iter().map(|&i| slots[i].take().expect("each once")).collect();
    let alive = ov.alive.into_iter().map(|(p, i)| (p, remap[i])).collect();
    Lifecycles { items, alive }
}
