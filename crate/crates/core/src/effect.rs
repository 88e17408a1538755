//! Effects of a Dockerfile: the files its layers left behind and the image
//! metadata it configures, each tied to the instruction responsible.

use thiserror::Error;

use crate::dockerfile::{DockerfileAst, InstructionKind};
use crate::image::{resolve_file_lifecycles, EntryType, HistoryEntry, ImageArchive, ImageConfig};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EffectError {
    #[error("image history cannot be aligned with the Dockerfile: {0}")]
    LayerInstructionMismatch(String),
}

/// Origin instruction of every layer, by layer index. Values index into
/// `DockerfileAst::instructions`; base image layers map to 0 (`FROM`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    pub origins: Vec<usize>,
}

impl LayerMap {
    pub fn origin(&self, layer: usize) -> usize {
        self.origins[layer]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEffect {
    pub path: String,
    /// Index into `DockerfileAst::instructions`.
    pub instruction: usize,
    pub origin_kind: InstructionKind,
    pub layer_index: usize,
    pub deleted: bool,
    pub mode_bits: u32,
    pub entry_type: EntryType,
    pub size_bytes: u64,
    pub link_target: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetadataKey {
    Cmd,
    Entrypoint,
    Env,
    ExposedPorts,
    Labels,
    User,
    Volumes,
    Workdir,
}

impl MetadataKey {
    pub const ALL: [MetadataKey; 8] = [
        MetadataKey::Cmd,
        MetadataKey::Entrypoint,
        MetadataKey::Env,
        MetadataKey::ExposedPorts,
        MetadataKey::Labels,
        MetadataKey::User,
        MetadataKey::Volumes,
        MetadataKey::Workdir,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetadataKey::Cmd => "Cmd",
            MetadataKey::Entrypoint => "Entrypoint",
            MetadataKey::Env => "Env",
            MetadataKey::ExposedPorts => "ExposedPorts",
            MetadataKey::Labels => "Labels",
            MetadataKey::User => "User",
            MetadataKey::Volumes => "Volumes",
            MetadataKey::Workdir => "Workdir",
        }
    }

    /// The instruction that sets this key.
    pub fn instruction(self) -> InstructionKind {
        match self {
            MetadataKey::Cmd => InstructionKind::Cmd,
            MetadataKey::Entrypoint => InstructionKind::Entrypoint,
            MetadataKey::Env => InstructionKind::Env,
            MetadataKey::ExposedPorts => InstructionKind::Expose,
            MetadataKey::Labels => InstructionKind::Label,
            MetadataKey::User => InstructionKind::User,
            MetadataKey::Volumes => InstructionKind::Volume,
            MetadataKey::Workdir => InstructionKind::Workdir,
        }
    }
}

impl std::fmt::Display for MetadataKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetadataValue {
    List(Vec<String>),
    Pairs(Vec<(String, String)>),
    Text(String),
}

impl MetadataValue {
    pub fn is_empty(&self) -> bool {
        match self {
            MetadataValue::List(v) => v.is_empty(),
            MetadataValue::Pairs(v) => v.is_empty(),
            MetadataValue::Text(s) => s.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataEffect {
    pub key: MetadataKey,
    pub value: MetadataValue,
    pub set_by_instruction: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectSet {
    pub file_effects: Vec<FileEffect>,
    pub metadata_effects: Vec<MetadataEffect>,
    pub base_image_keywords: Vec<String>,
}

/// Instruction keyword recorded in a history `created_by` line, if it can
/// be recognized. Handles both the classic builder (`/bin/sh -c #(nop) ...`)
/// and BuildKit (`RUN /bin/sh -c ... # buildkit`) styles.
fn history_keyword(created_by: &str) -> Option<String> {
    let s = created_by.trim();
    if let Some(rest) = s.strip_prefix("/bin/sh -c #(nop)") {
        return first_keyword(rest.trim_start());
    }
    if s.starts_with("/bin/sh -c ") || s.starts_with("cmd /S /C ") {
        return Some("RUN".into());
    }
    // classic builder RUN with build args: `|2 A=1 B=2 /bin/sh -c ...`
    if s.starts_with('|') && s.contains("/bin/sh -c") {
        return Some("RUN".into());
    }
    first_keyword(s)
}

fn first_keyword(s: &str) -> Option<String> {
    let word = s.split_whitespace().next()?;
    let known = InstructionKind::from_keyword(word) != InstructionKind::Other
        || matches!(word, "ONBUILD" | "SHELL" | "HEALTHCHECK" | "STOPSIGNAL" | "MAINTAINER");
    (known && word.chars().all(|c| c.is_ascii_uppercase())).then(|| word.to_owned())
}

fn mismatch(msg: impl Into<String>) -> EffectError {
    EffectError::LayerInstructionMismatch(msg.into())
}

/// Assigns each image layer to the Dockerfile instruction that created it.
///
/// History entries that carry a layer are paired, newest first, with the
/// `RUN`, `COPY`, `ADD` and `WORKDIR` instructions after `FROM`; a
/// `WORKDIR` whose directory already existed may have left no layer.
/// Recorded keywords must agree with their instruction. Every earlier layer
/// belongs to `FROM`. Without history, the top layers are assumed to come
/// from the `RUN`, `COPY` and `ADD` instructions, one each.
pub fn map_instructions_to_layers(
    ast: &DockerfileAst,
    config: &ImageConfig,
    layer_count: usize,
) -> Result<LayerMap, EffectError> {
    let mut origins = vec![0usize; layer_count];
    if config.history.is_empty() {
        let creating: Vec<usize> =
            (1..ast.instructions.len()).filter(|&i| ast.instructions[i].kind.creates_layer()).collect();
        if creating.len() > layer_count {
            return Err(mismatch(format!(
                "{} layer-creating instructions but only {layer_count} layers",
                creating.len()
            )));
        }
        let base = layer_count - creating.len();
        for (k, ins) in creating.into_iter().enumerate() {
            origins[base + k] = ins;
        }
        return Ok(LayerMap { origins });
    }

    let layers_recorded = config.history.iter().filter(|e| !e.empty_layer).count();
    if layers_recorded != layer_count {
        return Err(mismatch(format!(
            "history records {layers_recorded} layers but the image has {layer_count}"
        )));
    }
    // entries that hold a layer or come from an instruction that could have
    // made one (BuildKit marks a RUN that changed nothing as empty)
    let candidates: Vec<(&HistoryEntry, Option<String>)> = config
        .history
        .iter()
        .map(|e| (e, history_keyword(&e.created_by)))
        .filter(|(e, k)| !e.empty_layer || matches!(k.as_deref(), Some("RUN" | "COPY" | "ADD" | "WORKDIR")))
        .collect();
    let mut next = candidates.len();
    let mut layer = layer_count;
    for i in (1..ast.instructions.len()).rev() {
        let ins = &ast.instructions[i];
        let optional = ins.kind == InstructionKind::Workdir;
        if !(ins.kind.creates_layer() || optional) {
            continue;
        }
        let keyword = ins.keyword.to_ascii_uppercase();
        let Some((entry, recorded)) = next.checked_sub(1).map(|n| &candidates[n]) else {
            if optional {
                continue;
            }
            return Err(mismatch(format!("history ends before line {} ({keyword})", ins.line_span.0)));
        };
        if let Some(recorded) = recorded.as_deref().filter(|r| *r != keyword) {
            if optional {
                continue;
            }
            return Err(mismatch(format!(
                "line {} is {keyword} but history records {recorded}: {}",
                ins.line_span.0, entry.created_by
            )));
        }
        next -= 1;
        if !entry.empty_layer {
            layer -= 1;
            origins[layer] = i;
        }
    }
    Ok(LayerMap { origins })
}

/// Keywords naming the base image: the repository basename, lowercased,
/// and its `-` separated parts.
pub fn base_image_keywords(reference: &str) -> Vec<String> {
    let reference = reference.split('@').next().unwrap_or_default();
    let mut parts: Vec<&str> = reference.split('/').collect();
    let last = parts.pop().unwrap_or_default();
    let name = last.split(':').next().unwrap_or_default().to_lowercase();
    if name.is_empty() || name == "scratch" || name.contains('$') {
        return Vec::new();
    }
    let mut out = vec![name.clone()];
    if name.contains('-') {
        for p in name.split('-').filter(|p| !p.is_empty()) {
            if !out.iter().any(|o| o == p) {
                out.push(p.to_owned());
            }
        }
    }
    out
}

fn metadata_value(key: MetadataKey, config: &ImageConfig) -> MetadataValue {
    match key {
        MetadataKey::Cmd => MetadataValue::List(config.cmd.clone().unwrap_or_default()),
        MetadataKey::Entrypoint => MetadataValue::List(config.entrypoint.clone().unwrap_or_default()),
        MetadataKey::Env => MetadataValue::Pairs(
            config
                .env
                .iter()
                .map(|e| match e.split_once('=') {
                    Some((k, v)) => (k.to_owned(), v.to_owned()),
                    None => (e.clone(), String::new()),
                })
                .collect(),
        ),
        MetadataKey::ExposedPorts => MetadataValue::List(config.exposed_ports.clone()),
        MetadataKey::Labels => {
            MetadataValue::Pairs(config.labels.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        }
        MetadataKey::User => MetadataValue::Text(config.user.clone().unwrap_or_default()),
        MetadataKey::Volumes => MetadataValue::List(config.volumes.clone()),
        MetadataKey::Workdir => MetadataValue::Text(config.workdir.clone().unwrap_or_default()),
    }
}

/// Enumerates every file lifecycle of the image and the eight metadata
/// fields, attributing each to the Dockerfile.
pub fn enumerate_effects(archive: &ImageArchive, ast: &DockerfileAst) -> Result<EffectSet, EffectError> {
    let map = map_instructions_to_layers(ast, &archive.config, archive.layers.len())?;
    let lifecycles = resolve_file_lifecycles(&archive.layers);
    let file_effects = lifecycles
        .iter()
        .map(|l| {
            let instruction = map.origin(l.added_layer);
            FileEffect {
                path: l.path.clone(),
                instruction,
                origin_kind: ast.instructions[instruction].kind,
                layer_index: l.added_layer,
                deleted: !l.is_alive(),
                mode_bits: l.last_mode,
                entry_type: l.entry_type,
                size_bytes: l.size_bytes,
                link_target: l.link_target.clone(),
            }
        })
        .collect();

    let metadata_effects = MetadataKey::ALL
        .iter()
        .filter_map(|&key| {
            let set_by_instruction = ast.instructions.iter().any(|i| i.kind == key.instruction());
            let value = metadata_value(key, &archive.config);
            (set_by_instruction || !value.is_empty()).then_some(MetadataEffect {
                key,
                value,
                set_by_instruction,
            })
        })
        .collect();

    Ok(EffectSet {
        file_effects,
        metadata_effects,
        base_image_keywords: base_image_keywords(&ast.base_image),
    })
}
