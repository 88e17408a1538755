//! Heuristic importance scores for effects, and selection of test targets.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::dockerfile::{extract_run_arguments, DockerfileAst, InstructionKind};
use crate::effect::{EffectSet, FileEffect, MetadataEffect};
use crate::image::{EntryType, ImageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RuleId {
    MetaSetByInstruction,
    MetaFromInspect,
    CopyDestination,
    UnderCopyDirectory,
    BasenameIsRunArgument,
    PathContainsRunArgument,
    BaseImageKeyword,
    WorkingDirectory,
    InEnvValue,
    ParentOnPath,
    ContainsBin,
    ContainsEtc,
    ContainsConf,
    ShellScript,
    FromBaseImage,
    Deleted,
    AptLists,
    ContainsTmp,
    ContainsCache,
    ContainsLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleTarget {
    Metadata,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringRule {
    pub id: RuleId,
    pub target: RuleTarget,
    pub score: i64,
    pub description: &'static str,
}

impl RuleId {
    pub const ALL: [RuleId; 20] = [
        RuleId::MetaSetByInstruction,
        RuleId::MetaFromInspect,
        RuleId::CopyDestination,
        RuleId::UnderCopyDirectory,
        RuleId::BasenameIsRunArgument,
        RuleId::PathContainsRunArgument,
        RuleId::BaseImageKeyword,
        RuleId::WorkingDirectory,
        RuleId::InEnvValue,
        RuleId::ParentOnPath,
        RuleId::ContainsBin,
        RuleId::ContainsEtc,
        RuleId::ContainsConf,
        RuleId::ShellScript,
        RuleId::FromBaseImage,
        RuleId::Deleted,
        RuleId::AptLists,
        RuleId::ContainsTmp,
        RuleId::ContainsCache,
        RuleId::ContainsLog,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::MetaSetByInstruction => "meta-set-by-instruction",
            RuleId::MetaFromInspect => "meta-from-inspect",
            RuleId::CopyDestination => "copy-destination",
            RuleId::UnderCopyDirectory => "under-copy-directory",
            RuleId::BasenameIsRunArgument => "basename-is-run-argument",
            RuleId::PathContainsRunArgument => "path-contains-run-argument",
            RuleId::BaseImageKeyword => "base-image-keyword",
            RuleId::WorkingDirectory => "working-directory",
            RuleId::InEnvValue => "in-env-value",
            RuleId::ParentOnPath => "parent-on-path",
            RuleId::ContainsBin => "contains-bin",
            RuleId::ContainsEtc => "contains-etc",
            RuleId::ContainsConf => "contains-conf",
            RuleId::ShellScript => "shell-script",
            RuleId::FromBaseImage => "from-base-image",
            RuleId::Deleted => "deleted",
            RuleId::AptLists => "apt-lists",
            RuleId::ContainsTmp => "contains-tmp",
            RuleId::ContainsCache => "contains-cache",
            RuleId::ContainsLog => "contains-log",
        }
    }

    pub fn parse(s: &str) -> Option<RuleId> {
        RuleId::ALL.into_iter().find(|r| r.as_str() == s)
    }

    pub fn target(self) -> RuleTarget {
        match self {
            RuleId::MetaSetByInstruction | RuleId::MetaFromInspect => RuleTarget::Metadata,
            _ => RuleTarget::File,
        }
    }

    pub fn default_score(self) -> i64 {
        match self {
            RuleId::MetaSetByInstruction => 10,
            RuleId::MetaFromInspect => 8,
            RuleId::CopyDestination => 9,
            RuleId::BasenameIsRunArgument => 5,
            RuleId::PathContainsRunArgument | RuleId::InEnvValue | RuleId::ParentOnPath => 2,
            RuleId::UnderCopyDirectory
            | RuleId::BaseImageKeyword
            | RuleId::WorkingDirectory
            | RuleId::ContainsBin
            | RuleId::ContainsEtc
            | RuleId::ContainsConf
            | RuleId::ShellScript => 3,
            RuleId::FromBaseImage => -5,
            RuleId::Deleted
            | RuleId::AptLists
            | RuleId::ContainsTmp
            | RuleId::ContainsCache
            | RuleId::ContainsLog => -10,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            RuleId::MetaSetByInstruction => "set by a Dockerfile instruction",
            RuleId::MetaFromInspect => "obtained from the image configuration",
            RuleId::CopyDestination => "path matches an ADD or COPY destination",
            RuleId::UnderCopyDirectory => "path is under an ADD or COPY destination directory",
            RuleId::BasenameIsRunArgument => "file name matches a RUN argument",
            RuleId::PathContainsRunArgument => "path includes a RUN argument",
            RuleId::BaseImageKeyword => "path includes the base image name",
            RuleId::WorkingDirectory => "path is the working directory or under it",
            RuleId::InEnvValue => "path appears in an environment variable",
            RuleId::ParentOnPath => "parent directory is on PATH",
            RuleId::ContainsBin => "path includes /bin/",
            RuleId::ContainsEtc => "path includes /etc/",
            RuleId::ContainsConf => "path includes /conf/",
            RuleId::ShellScript => "file name ends with .sh",
            RuleId::FromBaseImage => "created by FROM",
            RuleId::Deleted => "deleted in a later layer",
            RuleId::AptLists => "path starts with /var/lib/apt/lists/",
            RuleId::ContainsTmp => "path includes /tmp/",
            RuleId::ContainsCache => "path includes /cache/",
            RuleId::ContainsLog => "path includes /log/",
        }
    }
}

impl std::fmt::Display for RuleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RulesError {
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    scores: [i64; 20],
}

impl Default for RuleSet {
    fn default() -> Self {
        Self { scores: RuleId::ALL.map(RuleId::default_score) }
    }
}

impl RuleSet {
    pub fn score(&self, id: RuleId) -> i64 {
        self.scores[id as usize]
    }

    pub fn set_score(&mut self, id: RuleId, score: i64) {
        self.scores[id as usize] = score;
    }

    pub fn rules(&self) -> Vec<ScoringRule> {
        RuleId::ALL
            .iter()
            .map(|&id| ScoringRule {
                id,
                target: id.target(),
                score: self.score(id),
                description: id.description(),
            })
            .collect()
    }

    /// Applies an override file: one `<rule-id> <score>` pair per line;
    /// blank lines and `#` comments are ignored.
    pub fn apply_overrides(&mut self, text: &str) -> Result<(), RulesError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let invalid = |reason: String| RulesError::Invalid { line: n + 1, reason };
            let mut words = line.split_whitespace();
            let (Some(id), Some(score), None) = (words.next(), words.next(), words.next()) else {
                return Err(invalid(format!("expected `<rule-id> <score>`, got `{line}`")));
            };
            let id = RuleId::parse(id).ok_or_else(|| invalid(format!("unknown rule `{id}`")))?;
            let score = score.parse().map_err(|_| invalid(format!("score `{score}` is not an integer")))?;
            self.set_score(id, score);
        }
        Ok(())
    }
}

/// Facts from the Dockerfile and image that the file rules consult.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScoringContext {
    /// Destination file paths of ADD and COPY, resolved to absolute paths.
    pub copy_files: BTreeSet<String>,
    /// Destination directories of ADD and COPY.
    pub copy_dirs: BTreeSet<String>,
    pub run_arguments: Vec<String>,
    pub base_image_keywords: Vec<String>,
    pub workdir: Option<String>,
    pub env_values: Vec<String>,
    pub path_dirs: Vec<String>,
}

fn parent(path: &str) -> &str {
    match path.rfind('/') {
        Some(0) => "/",
        Some(i) => &path[..i],
        None => "",
    }
}

fn basename(path: &str) -> &str {
    path.trim_end_matches('/').rsplit('/').next().unwrap_or_default()
}

fn normalize(path: &str) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for p in path.split('/') {
        match p {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            p => parts.push(p),
        }
    }
    format!("/{}", parts.join("/"))
}

fn join(dir: &str, rel: &str) -> String {
    if rel.starts_with('/') {
        normalize(rel)
    } else {
        normalize(&format!("{dir}/{rel}"))
    }
}

/// Expands `$VAR` and `${VAR}` from `vars`; unknown variables are kept.
fn expand(s: &str, vars: &HashMap<String, String>) -> String {
    let re = regex_lite_var();
    re.replace_all(s, |c: &regex::Captures| {
        let name = c.get(1).or_else(|| c.get(2)).map(|m| m.as_str()).unwrap_or_default();
        vars.get(name).cloned().unwrap_or_else(|| c[0].to_owned())
    })
    .into_owned()
}

fn regex_lite_var() -> &'static regex::Regex {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}|\$([A-Za-z_][A-Za-z0-9_]*)").unwrap()
    })
}

impl ScoringContext {
    /// Collects the context from the final stage of the Dockerfile, the
    /// image configuration and the enumerated effects (which tell whether
    /// a destination ended up as a directory).
    pub fn build(ast: &DockerfileAst, config: &ImageConfig, effects: &EffectSet) -> Self {
        let dirs: BTreeSet<&str> = effects
            .file_effects
            .iter()
            .filter(|e| !e.deleted && e.entry_type == EntryType::Directory)
            .map(|e| e.path.as_str())
            .collect();
        let sets_workdir = ast.instructions.iter().any(|i| i.kind == InstructionKind::Workdir);
        let mut cwd =
            if sets_workdir { "/".to_owned() } else { config.workdir.clone().unwrap_or_else(|| "/".into()) };
        let mut vars: HashMap<String, String> = HashMap::new();
        let mut ctx = ScoringContext::default();
        let mut run_args = BTreeSet::new();

        for ins in &ast.instructions {
            match ins.kind {
                InstructionKind::Env | InstructionKind::Arg => {
                    for kv in &ins.arguments {
                        if let Some((k, v)) = kv.split_once('=') {
                            vars.insert(k.to_owned(), expand(v, &vars));
                        }
                    }
                }
                InstructionKind::Workdir => {
                    if let Some(dir) = ins.arguments.first() {
                        cwd = join(&cwd, &expand(dir, &vars));
                    }
                }
                InstructionKind::Run => {
                    for a in extract_run_arguments(ins) {
                        if a.chars().count() >= 2 && run_args.insert(a.clone()) {
                            ctx.run_arguments.push(a);
                        }
                    }
                }
                InstructionKind::Copy | InstructionKind::Add if ins.arguments.len() >= 2 && !ins.heredoc => {
                    let (dest_raw, sources) = ins.arguments.split_last().unwrap();
                    let dest_raw = expand(dest_raw, &vars);
                    let dest = join(&cwd, &dest_raw);
                    let is_dir = dest_raw.ends_with('/')
                        || dest_raw == "."
                        || sources.len() > 1
                        || dirs.contains(dest.as_str());
                    if !is_dir {
                        ctx.copy_files.insert(dest);
                        continue;
                    }
                    for src in sources {
                        let name = basename(src.split(['?', '#']).next().unwrap_or_default());
                        if !name.is_empty() && !name.contains(['*', '?', '[']) && name != "." {
                            ctx.copy_files.insert(join(&dest, name));
                        }
                    }
                    if dest != "/" {
                        ctx.copy_dirs.insert(dest);
                    }
                }
                _ => {}
            }
        }

        ctx.base_image_keywords = effects.base_image_keywords.clone();
        ctx.workdir = config.workdir.clone().map(|w| normalize(&w)).filter(|w| w != "/");
        ctx.env_values = config
            .env
            .iter()
            .filter_map(|e| e.split_once('=').map(|(_, v)| v.to_owned()))
            .filter(|v| !v.is_empty())
            .collect();
        ctx.path_dirs = config.path_dirs();
        ctx
    }
}

/// Identifies an effect within an [`EffectSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EffectRef {
    File(usize),
    Metadata(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreBreakdown {
    pub effect: EffectRef,
    /// File path or metadata key.
    pub subject: String,
    pub matched_rules: Vec<RuleId>,
    pub total: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionConfig {
    pub threshold: i64,
    pub filter_enabled: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { threshold: 5, filter_enabled: true }
    }
}

pub fn score_metadata_effect(effect: &MetadataEffect, index: usize, rules: &RuleSet) -> ScoreBreakdown {
    let rule = if effect.set_by_instruction { RuleId::MetaSetByInstruction } else { RuleId::MetaFromInspect };
    ScoreBreakdown {
        effect: EffectRef::Metadata(index),
        subject: effect.key.as_str().to_owned(),
        matched_rules: vec![rule],
        total: rules.score(rule),
    }
}

/// Which file rules match `effect`, in rule order.
pub fn matching_file_rules(effect: &FileEffect, ctx: &ScoringContext) -> Vec<RuleId> {
    let path = effect.path.as_str();
    let name = basename(path);
    let mut out = Vec::new();
    let mut push = |cond: bool, id: RuleId| {
        if cond {
            out.push(id);
        }
    };

    push(ctx.copy_files.contains(path), RuleId::CopyDestination);
    push(
        ctx.copy_dirs.iter().any(|d| {
            path.len() > d.len() && path.starts_with(d.as_str()) && path.as_bytes()[d.len()] == b'/'
        }),
        RuleId::UnderCopyDirectory,
    );
    let exact = |a: &str| name == a || (a.contains('/') && name == basename(a) && !basename(a).is_empty());
    let args = ctx.run_arguments.iter().filter(|a| a.chars().count() >= 2);
    push(args.clone().any(|a| exact(a)), RuleId::BasenameIsRunArgument);
    push(args.clone().any(|a| !exact(a) && path.contains(a.as_str())), RuleId::PathContainsRunArgument);
    push(
        ctx.base_image_keywords.iter().any(|k| !k.is_empty() && path.contains(k.as_str())),
        RuleId::BaseImageKeyword,
    );
    push(
        ctx.workdir.as_deref().is_some_and(|w| {
            path == w || (path.starts_with(w) && path.as_bytes().get(w.len()) == Some(&b'/'))
        }),
        RuleId::WorkingDirectory,
    );
    push(ctx.env_values.iter().any(|v| v.contains(path)), RuleId::InEnvValue);
    push(ctx.path_dirs.iter().any(|d| d == parent(path)), RuleId::ParentOnPath);
    push(path.contains("/bin/"), RuleId::ContainsBin);
    push(path.contains("/etc/"), RuleId::ContainsEtc);
    push(path.contains("/conf/"), RuleId::ContainsConf);
    push(name.ends_with(".sh"), RuleId::ShellScript);
    push(effect.origin_kind == InstructionKind::From, RuleId::FromBaseImage);
    push(effect.deleted, RuleId::Deleted);
    push(path.starts_with("/var/lib/apt/lists/"), RuleId::AptLists);
    push(path.contains("/tmp/"), RuleId::ContainsTmp);
    push(path.contains("/cache/"), RuleId::ContainsCache);
    push(path.contains("/log/"), RuleId::ContainsLog);
    out
}

pub fn score_file_effect(
    effect: &FileEffect,
    index: usize,
    ctx: &ScoringContext,
    rules: &RuleSet,
) -> ScoreBreakdown {
    let matched_rules = matching_file_rules(effect, ctx);
    let total = matched_rules.iter().map(|&r| rules.score(r)).sum();
    ScoreBreakdown { effect: EffectRef::File(index), subject: effect.path.clone(), matched_rules, total }
}

/// Scores of every effect, metadata first, in effect-set order.
pub fn score_all(effects: &EffectSet, ctx: &ScoringContext, rules: &RuleSet) -> Vec<ScoreBreakdown> {
    let mut out: Vec<ScoreBreakdown> = effects
        .metadata_effects
        .iter()
        .enumerate()
        .map(|(i, m)| score_metadata_effect(m, i, rules))
        .collect();
    out.par_extend(
        effects.file_effects.par_iter().enumerate().map(|(i, f)| score_file_effect(f, i, ctx, rules)),
    );
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Selected effects, highest score first.
    pub selected: Vec<ScoreBreakdown>,
    /// Every score, in effect-set order.
    pub report: Vec<ScoreBreakdown>,
}

fn is_deleted(effects: &EffectSet, r: EffectRef) -> bool {
    matches!(r, EffectRef::File(i) if effects.file_effects[i].deleted)
}

/// Selects effects scoring strictly above the threshold (or every effect
/// when filtering is disabled). Deleted files are never selected.
pub fn select_effects(
    effects: &EffectSet,
    ctx: &ScoringContext,
    rules: &RuleSet,
    config: SelectionConfig,
) -> Selection {
    let report = score_all(effects, ctx, rules);
    let mut selected: Vec<ScoreBreakdown> = report
        .iter()
        .filter(|b| !is_deleted(effects, b.effect))
        .filter(|b| !config.filter_enabled || b.total > config.threshold)
        .cloned()
        .collect();
    selected.sort_by(|a, b| {
        b.total.cmp(&a.total).then_with(|| a.subject.cmp(&b.subject)).then_with(|| a.effect.cmp(&b.effect))
    });
    Selection { selected, report }
}

/// Tab-separated report of every score: subject, matched rules, total and
/// whether the effect was selected.
pub fn explain_report(selection: &Selection) -> String {
    let chosen: BTreeSet<EffectRef> = selection.selected.iter().map(|b| b.effect).collect();
    let mut rows: Vec<&ScoreBreakdown> = selection.report.iter().collect();
    rows.sort_by(|a, b| b.total.cmp(&a.total).then_with(|| a.subject.cmp(&b.subject)));
    let mut out = String::from("subject\trules\ttotal\tselected\n");
    for b in rows {
        let rules: Vec<&str> = b.matched_rules.iter().map(|r| r.as_str()).collect();
        let rules = if rules.is_empty() { "-".to_owned() } else { rules.join(",") };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", b.subject, rules, b.total, chosen.contains(&b.effect));
    }
    out
}
