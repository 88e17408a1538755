//! Helpers shared by the integration test targets: fixture runs, an
//! independent scoring oracle and input generators.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dockergen_core::cst::{CommandTest, CstDocument, FileExistenceTest, KeyValue, MetadataTest};
use dockergen_core::dockerfile::{parse_dockerfile, split_run_chains, DockerfileAst, InstructionKind};
use dockergen_core::effect::{enumerate_effects, EffectSet, FileEffect, MetadataKey, MetadataValue};
use dockergen_core::image::{load_image_archive, EntryType, ImageArchive};
use dockergen_core::pipeline::{
    run_pipeline, ExecutorMode, ImageSource, PipelineError, RunConfig, RunOutput,
};
use dockergen_core::probe::ResolvedTest;
use dockergen_core::scoring::{ScoringContext, SelectionConfig};
use dockergen_testkit::fixtures::Fixture;
use dockergen_testkit::{Compression, ImageSpec, Member};
use proptest::prelude::*;
use proptest::sample::{select, subsequence};

pub fn write_archive(fx: &Fixture, dir: &Path) -> PathBuf {
    let p = dir.join(format!("{}.tar", fx.name));
    fx.image.write_docker_save(&p, Compression::None).unwrap();
    p
}

/// Runs the whole pipeline on a fixture with a strict replay executor.
/// `transcript` replaces the fixture's own recording when given.
pub fn run_fixture(
    fx: &Fixture,
    selection: SelectionConfig,
    transcript: Option<&str>,
) -> Result<RunOutput, PipelineError> {
    let tmp = tempfile::tempdir().unwrap();
    let archive = write_archive(fx, tmp.path());
    let transcript = match transcript {
        Some(text) => {
            let p = tmp.path().join("transcript.jsonl");
            std::fs::write(&p, text).unwrap();
            p
        }
        None => fx.transcript_path(),
    };
    let mut cfg = RunConfig::new(
        fx.dockerfile_path(),
        ImageSource::Archive(archive),
        ExecutorMode::Replay { transcript, strict: true },
    );
    cfg.selection = selection;
    run_pipeline(&cfg)
}

pub fn no_filter() -> SelectionConfig {
    SelectionConfig { threshold: 0, filter_enabled: false }
}

pub fn threshold(t: i64) -> SelectionConfig {
    SelectionConfig { threshold: t, filter_enabled: true }
}

/// Archive, split AST and effects of a fixture, as the pipeline sees them.
pub fn load(fx: &Fixture) -> (ImageArchive, DockerfileAst, EffectSet) {
    let tmp = tempfile::tempdir().unwrap();
    let archive = load_image_archive(write_archive(fx, tmp.path())).unwrap();
    let ast = split_run_chains(parse_dockerfile(&fx.dockerfile()).unwrap());
    let effects = enumerate_effects(&archive, &ast).unwrap();
    (archive, ast, effects)
}

// ---------------------------------------------------------------------
// scoring oracle

/// Rules matched by a file effect, worked out directly from each rule's
/// wording with plain string operations, plus the summed score.
pub fn oracle_file_score(e: &FileEffect, ctx: &ScoringContext) -> (Vec<&'static str>, i64) {
    let path = e.path.as_str();
    let last = |s: &str| -> String {
        let s = s.trim_end_matches('/');
        match s.rfind('/') {
            Some(i) => s[i + 1..].to_string(),
            None => s.to_string(),
        }
    };
    let name = last(path);
    let parent = match path.rfind('/') {
        Some(0) => "/".to_string(),
        Some(i) => path[..i].to_string(),
        None => String::new(),
    };

    let mut basename_hit = false;
    let mut substring_hit = false;
    for arg in &ctx.run_arguments {
        let same_name = name == *arg || (arg.contains('/') && !last(arg).is_empty() && last(arg) == name);
        if same_name {
            basename_hit = true;
        } else if path.contains(arg.as_str()) {
            substring_hit = true;
        }
    }

    let table: Vec<(&'static str, i64, bool)> = vec![
        ("copy-destination", 9, ctx.copy_files.iter().any(|f| f == path)),
        ("under-copy-directory", 3, ctx.copy_dirs.iter().any(|d| path.starts_with(&format!("{d}/")))),
        ("basename-is-run-argument", 5, basename_hit),
        ("path-contains-run-argument", 2, substring_hit),
        ("base-image-keyword", 3, ctx.base_image_keywords.iter().any(|k| path.contains(k.as_str()))),
        (
            "working-directory",
            3,
            match &ctx.workdir {
                Some(w) => path == w || path.starts_with(&format!("{w}/")),
                None => false,
            },
        ),
        ("in-env-value", 2, ctx.env_values.iter().any(|v| v.contains(path))),
        ("parent-on-path", 2, ctx.path_dirs.contains(&parent)),
        ("contains-bin", 3, path.contains("/bin/")),
        ("contains-etc", 3, path.contains("/etc/")),
        ("contains-conf", 3, path.contains("/conf/")),
        ("shell-script", 3, name.ends_with(".sh")),
        ("from-base-image", -5, e.origin_kind == InstructionKind::From),
        ("deleted", -10, e.deleted),
        ("apt-lists", -10, path.starts_with("/var/lib/apt/lists/")),
        ("contains-tmp", -10, path.contains("/tmp/")),
        ("contains-cache", -10, path.contains("/cache/")),
        ("contains-log", -10, path.contains("/log/")),
    ];
    let hits: Vec<(&'static str, i64)> = table.into_iter().filter(|t| t.2).map(|t| (t.0, t.1)).collect();
    let total = hits.iter().map(|h| h.1).sum();
    (hits.into_iter().map(|h| h.0).collect(), total)
}

const SEGMENTS: &[&str] = &[
    "usr", "bin", "sbin", "local", "etc", "conf", "tmp", "cache", "log", "var", "lib", "apt", "lists", "app",
    "opt", "jq", "curl", "python3", "main.py", "init.sh", "debian", "tool", "share", "doc",
];

const LOOSE_ARGS: &[&str] = &[
    "jq",
    "curl",
    "python3",
    "apt",
    "lists",
    "app",
    "conf",
    "bin",
    "ca-certificates",
    "lib/",
    "/usr/bin/jq",
    "https://example.org/dl/tool.tar.gz",
    "./init.sh",
    "main.py",
];

const KEYWORDS: &[&str] = &["debian", "python", "alpine", "app", "ubuntu"];

const REAL_PATHS: &[&str] = &[
    "/var/lib/apt/lists/deb.debian.org_debian_dists_bookworm_InRelease",
    "/etc/app/conf/init.sh",
    "/usr/bin/jq",
    "/usr/local/bin/python3",
    "/var/log/apt/history.log",
    "/tmp/build-cache/obj.o",
    "/opt/app/scripts/start.sh",
];

fn abs_path() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => prop::collection::vec(select(SEGMENTS), 1..5).prop_map(|v| format!("/{}", v.join("/"))),
        1 => select(REAL_PATHS).prop_map(String::from),
    ]
}

fn ancestors(p: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = p;
    while let Some(i) = cur.rfind('/') {
        if i == 0 {
            break;
        }
        cur = &cur[..i];
        out.push(cur.to_string());
    }
    out
}

fn file_effect(path: String, kind: InstructionKind, deleted: bool) -> FileEffect {
    FileEffect {
        path,
        instruction: 0,
        origin_kind: kind,
        layer_index: 0,
        deleted,
        mode_bits: 0o644,
        entry_type: EntryType::Regular,
        size_bytes: 0,
        link_target: None,
    }
}

/// A file effect with a scoring context whose facts overlap its path often
/// enough to exercise every rule.
pub fn scoring_case() -> impl Strategy<Value = (FileEffect, ScoringContext)> {
    prop::collection::vec(abs_path(), 2..8).prop_flat_map(|pool| {
        let mut dirs: Vec<String> = pool.iter().flat_map(|p| ancestors(p)).collect();
        dirs.sort();
        dirs.dedup();
        if dirs.is_empty() {
            dirs.push("/opt".into());
        }
        let names: Vec<String> = pool.iter().map(|p| p.rsplit('/').next().unwrap().to_string()).collect();
        let arg =
            prop_oneof![select(names), select(pool.clone()), select(LOOSE_ARGS).prop_map(String::from),];
        let env_value = prop::collection::vec(prop_oneof![select(pool.clone()), select(dirs.clone())], 1..4)
            .prop_map(|v| v.join(":"));
        let kind = select(vec![
            InstructionKind::From,
            InstructionKind::Run,
            InstructionKind::Copy,
            InstructionKind::Add,
        ]);
        let n = pool.len();
        let nd = dirs.len().min(3);
        (
            (select(pool.clone()), kind, any::<bool>()),
            subsequence(pool, 0..=n),
            subsequence(dirs.clone(), 0..=nd),
            prop::collection::vec(arg, 0..6),
            subsequence(KEYWORDS, 0..=2),
            prop::option::of(select(dirs.clone())),
            prop::collection::vec(env_value, 0..3),
            subsequence(dirs, 0..=nd),
        )
            .prop_map(
                |((path, kind, deleted), files, copy_dirs, args, kws, workdir, env, path_dirs)| {
                    let ctx = ScoringContext {
                        copy_files: files.into_iter().collect(),
                        copy_dirs: copy_dirs.into_iter().collect(),
                        run_arguments: args,
                        base_image_keywords: kws.into_iter().map(String::from).collect(),
                        workdir,
                        env_values: env,
                        path_dirs,
                    };
                    (file_effect(path, kind, deleted), ctx)
                },
            )
    })
}

// ---------------------------------------------------------------------
// RUN chains

fn plain_word() -> impl Strategy<Value = String> {
    "[a-z0-9][a-z0-9_./=-]{0,7}"
}

/// One shell word as it would be written in a Dockerfile, with quoting,
/// escapes or nested substitutions.
fn shell_word() -> impl Strategy<Value = String> {
    prop_oneof![
        6 => plain_word(),
        1 => "[a-z &;|]{0,8}".prop_map(|s| format!("'{s}'")),
        1 => "[a-z &;|$]{0,8}".prop_map(|s| format!("\"{s} \\\"q\\\"\"")),
        1 => plain_word().prop_map(|w| format!("{w}\\ x")),
        1 => Just("\\&\\&".to_string()),
        1 => (plain_word(), plain_word()).prop_map(|(a, b)| format!("$(echo {a} && echo {b})")),
        1 => (plain_word(), plain_word()).prop_map(|(a, b)| format!("`{a} {b}`")),
        1 => plain_word().prop_map(|w| format!("${{{}}}", w.replace(['.', '/', '=', '-'], "_"))),
        1 => (plain_word(), plain_word()).prop_map(|(a, b)| format!("({a} && {b} || true)")),
    ]
}

fn command_name() -> impl Strategy<Value = String> {
    prop_oneof![
        8 => select(vec!["apt-get", "curl", "make", "pip", "echo", "mkdir", "rm", "ln", "tar", "wget"])
            .prop_map(String::from),
        1 => select(vec!["cd", "export", "set", "source"]).prop_map(String::from),
        1 => "[A-Z]{1,4}=[a-z]{0,4} (make|echo)",
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Command,
    Builtin,
    Assignment,
}

fn segment() -> impl Strategy<Value = (String, Head)> {
    prop_oneof![
        9 => (command_name(), prop::collection::vec(shell_word(), 0..5)).prop_map(|(c, ws)| {
            let head = if ["cd", "export", "set", "source"].contains(&c.as_str()) {
                Head::Builtin
            } else {
                Head::Command
            };
            let mut parts = vec![c];
            parts.extend(ws);
            (parts.join(" "), head)
        }),
        1 => "[A-Z]{1,4}=[a-z]{0,4}".prop_map(|a| (a, Head::Assignment)),
    ]
}

fn spacing() -> impl Strategy<Value = &'static str> {
    select(vec![" ", "  ", "\t", " \\\n    "])
}

/// A generated `RUN` body with what the generator knows about it.
#[derive(Debug, Clone)]
pub struct Chain {
    pub text: String,
    pub and_count: usize,
    /// Has `;` or `||`, or an `&&` segment that starts with a
    /// state-changing builtin or holds nothing but assignments.
    pub blocked: bool,
}

/// Body of a `RUN` instruction: segments joined by `&&`, now and then by
/// `;`, `||` or a pipe. May span lines through backslash continuations.
pub fn run_chain() -> impl Strategy<Value = Chain> {
    (
        segment(),
        prop::collection::vec(
            (
                spacing(),
                prop_oneof![12 => Just("&&"), 1 => Just(";"), 1 => Just("||"), 1 => Just("|")],
                spacing(),
                segment(),
            ),
            0..5,
        ),
    )
        .prop_map(|((first, head), rest)| {
            let mut text = first;
            // pipe stages of each `&&` segment
            let mut groups: Vec<Vec<Head>> = vec![vec![head]];
            let mut and_count = 0;
            let mut blocked = false;
            for (a, op, b, (seg, head)) in rest {
                text.push_str(a);
                text.push_str(op);
                text.push_str(b);
                text.push_str(&seg);
                match op {
                    "|" => groups.last_mut().unwrap().push(head),
                    _ => {
                        and_count += usize::from(op == "&&");
                        blocked |= op != "&&";
                        groups.push(vec![head]);
                    }
                }
            }
            blocked |=
                groups.iter().any(|g| g[0] == Head::Builtin || g.iter().all(|h| *h == Head::Assignment));
            Chain { text, and_count, blocked }
        })
}

/// Dockerfile with a few metadata instructions around one `RUN` chain,
/// optionally with a mount flag.
pub fn chain_dockerfile() -> impl Strategy<Value = (String, Chain)> {
    (run_chain(), any::<bool>(), 0..3usize).prop_map(|(chain, flag, at)| {
        let mut lines = vec!["ENV A=1".to_string(), "LABEL x=y".to_string(), "WORKDIR /w".to_string()];
        let run = if flag {
            format!("RUN --mount=type=cache,target=/root/.cache {}", chain.text)
        } else {
            format!("RUN {}", chain.text)
        };
        lines.insert(at, run);
        let text = format!("FROM debian:12\n{}\nCMD [\"sh\"]\n", lines.join("\n"));
        (text, chain)
    })
}

/// Command made of unquoted words and operators only, with irregular
/// spacing (sometimes none) around the operators.
pub fn plain_command() -> impl Strategy<Value = String> {
    let word = "[a-zA-Z0-9_./=:,+-]{1,8}";
    let gap = select(vec!["", " ", "  ", "\t"]);
    let op = select(vec!["&&", "||", ";", "|"]);
    (
        prop::collection::vec(word, 1..4),
        prop::collection::vec((gap.clone(), op, gap, prop::collection::vec(word, 1..4)), 0..4),
    )
        .prop_map(|(first, rest)| {
            let mut s = first.join(" ");
            for (g1, op, g2, ws) in rest {
                s.push_str(g1);
                s.push_str(op);
                s.push_str(g2);
                s.push_str(&ws.join(" "));
            }
            s
        })
}

// ---------------------------------------------------------------------
// CST documents

const TRICKY: &[&str] = &[
    "",
    "yes",
    "No",
    "TRUE",
    "off",
    "null",
    "~",
    "y",
    "-",
    "- a",
    "a: b",
    "#x",
    "*ref",
    "&a",
    "!tag",
    "%x",
    "@x",
    "`x",
    "'q'",
    "\"d\"",
    "\\",
    "0x10",
    "1.5",
    "1e3",
    "012",
    ".inf",
    "a\nb",
    " lead",
    "trail ",
    "\t",
    "{a}",
    "[a]",
    "é",
    "😀",
    "\u{85}",
    "\u{2028}",
    "\u{feff}",
    "\u{0}",
    "\u{7f}",
    "?",
    "---",
    "...",
    "<<",
    "|",
    ">",
    "8080",
    "/usr/bin/jq",
    "3\\.11\\.4",
];

pub fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        3 => any::<String>(),
        2 => select(TRICKY).prop_map(String::from),
        2 => "[a-z/._-]{1,12}",
    ]
}

fn nonempty() -> impl Strategy<Value = String> {
    text().prop_filter("empty", |s| !s.is_empty())
}

fn texts() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(text(), 0..3)
}

fn key_values() -> impl Strategy<Value = Vec<KeyValue>> {
    prop::collection::vec((text(), text()).prop_map(|(key, value)| KeyValue { key, value }), 0..3)
}

pub fn cst_document() -> impl Strategy<Value = CstDocument> {
    let command = (nonempty(), nonempty(), texts(), texts(), texts(), texts()).prop_map(
        |(name, command, args, expected_output, expected_error, excluded_output)| CommandTest {
            name,
            command,
            args,
            expected_output,
            expected_error,
            excluded_output,
        },
    );
    let file = (nonempty(), text(), any::<bool>(), prop::option::of(text())).prop_map(
        |(name, path, should_exist, permissions)| FileExistenceTest {
            name,
            path: format!("/{path}"),
            should_exist,
            permissions,
        },
    );
    let meta = (
        key_values(),
        prop::option::of(texts()),
        prop::option::of(texts()),
        texts(),
        key_values(),
        texts(),
        prop::option::of(text()),
        prop::option::of(text()),
    )
        .prop_map(|(env_vars, cmd, entrypoint, exposed_ports, labels, volumes, workdir, user)| {
            MetadataTest { env_vars, cmd, entrypoint, exposed_ports, labels, volumes, workdir, user }
        });
    (prop::collection::vec(command, 0..4), prop::collection::vec(file, 0..4), prop::option::of(meta))
        .prop_map(|(command_tests, file_existence_tests, metadata_test)| CstDocument {
            command_tests,
            file_existence_tests,
            metadata_test,
            ..CstDocument::default()
        })
}

fn metadata_value() -> impl Strategy<Value = MetadataValue> {
    prop_oneof![
        texts().prop_map(MetadataValue::List),
        prop::collection::vec((text(), text()), 0..3).prop_map(MetadataValue::Pairs),
        text().prop_map(MetadataValue::Text),
    ]
}

/// Resolved tests as the expectation step could produce them, including
/// repeated names.
pub fn resolved_tests() -> impl Strategy<Value = Vec<ResolvedTest>> {
    let name =
        prop_oneof![2 => select(vec!["jq", "curl", "python3"]).prop_map(String::from), 1 => nonempty()];
    let test = prop_oneof![
        (select(MetadataKey::ALL.to_vec()), metadata_value())
            .prop_map(|(key, value)| ResolvedTest::Metadata { key, value }),
        (name.clone(), text()).prop_map(|(name, path)| ResolvedTest::CommandExistence {
            pattern: format!("^{}$", dockergen_core::cst::escape_regex_literal(&path)),
            name,
            path,
        }),
        (name.clone(), select(vec!["--version", "-version", "-V"]), text(), any::<bool>()).prop_map(
            |(name, flag, version, on_stderr)| ResolvedTest::CommandVersion {
                pattern: dockergen_core::cst::escape_regex_literal(&version),
                name,
                flag: flag.into(),
                version,
                on_stderr,
            }
        ),
        text().prop_map(|p| ResolvedTest::FileExistence { path: format!("/{p}") }),
    ];
    prop::collection::vec(test, 0..10)
}

// ---------------------------------------------------------------------
// checks shared by the property tests and the acceptance run

fn squeeze(s: &str) -> String {
    s.replace("\\\n", " ").chars().filter(|c| !c.is_whitespace()).collect()
}

/// Split round-trip, flag preservation, idempotence and order preservation
/// for one generated Dockerfile.
pub fn check_split(text: &str, chain: &Chain) -> Result<(), String> {
    use dockergen_core::shell::shell_tokenize;

    let original = parse_dockerfile(text).map_err(|e| format!("parse: {e}"))?;
    let run =
        original.instructions.iter().find(|i| i.kind == InstructionKind::Run).ok_or("no RUN parsed")?.clone();
    let split = split_run_chains(original.clone());
    let pieces: Vec<_> = split.instructions.iter().filter(|i| i.synthetic).collect();

    if pieces.is_empty() {
        if chain.and_count > 0 && !chain.blocked {
            return Err(format!("splittable chain left whole: {:?}", chain.text));
        }
        if split != original {
            return Err("unsplit Dockerfile changed".into());
        }
    } else {
        if chain.blocked {
            return Err(format!("blocked chain was split: {:?}", chain.text));
        }
        if pieces.len() != chain.and_count + 1 {
            return Err(format!("{} pieces for {} `&&` in {:?}", pieces.len(), chain.and_count, chain.text));
        }
        let joined = pieces.iter().map(|p| p.body.as_str()).collect::<Vec<_>>().join(" && ");
        if squeeze(&joined) != squeeze(&run.body) {
            return Err(format!("round-trip: {joined:?} vs {:?}", run.body));
        }
        let want = shell_tokenize(&run.body).map_err(|e| e.to_string())?;
        let got = shell_tokenize(&joined).map_err(|e| e.to_string())?;
        if want != got {
            return Err(format!("tokens differ: {got:?} vs {want:?}"));
        }
        for p in &pieces {
            let prefix: String = run.flags.iter().map(|f| format!("{f} ")).collect();
            if p.flags != run.flags || p.raw_text != format!("RUN {prefix}{}", p.body) {
                return Err(format!("piece {:?} lost its flags {:?}", p.raw_text, run.flags));
            }
        }
    }

    let twice = split_run_chains(split.clone());
    if twice != split {
        return Err("second split changed the result".into());
    }
    let others = |ast: &DockerfileAst| -> Vec<String> {
        ast.instructions
            .iter()
            .filter(|i| i.kind != InstructionKind::Run)
            .map(|i| i.raw_text.clone())
            .collect()
    };
    if others(&split) != others(&original) {
        return Err("non-RUN instructions reordered".into());
    }
    Ok(())
}

/// Tokens of a quote-free command: whitespace split after padding the
/// operators with spaces.
pub fn naive_tokens(cmd: &str) -> Vec<String> {
    let re = regex::Regex::new(r"&&|\|\||;|\|").unwrap();
    re.replace_all(cmd, " $0 ").split_whitespace().map(String::from).collect()
}

pub fn check_yaml_round_trip(doc: &CstDocument, validator: &jsonschema::Validator) -> Result<(), String> {
    let yaml = dockergen_core::cst::serialize_cst(doc);
    let back: CstDocument = serde_yaml::from_str(&yaml).map_err(|e| format!("{e}\n{yaml}"))?;
    if &back != doc {
        return Err(format!("round-trip mismatch:\n{yaml}\n{back:?}\n{doc:?}"));
    }
    let value: serde_json::Value = serde_yaml::from_str(&yaml).map_err(|e| e.to_string())?;
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    if !errors.is_empty() {
        return Err(format!("schema: {errors:?}\n{yaml}"));
    }
    Ok(())
}

pub fn schema_validator() -> jsonschema::Validator {
    let schema: serde_json::Value = serde_json::from_str(dockergen_core::cst::CST_SCHEMA).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

pub fn check_scoring(effect: &FileEffect, ctx: &ScoringContext) -> Result<(), String> {
    use dockergen_core::scoring::{score_file_effect, RuleSet};
    let engine = score_file_effect(effect, 0, ctx, &RuleSet::default());
    let (names, total) = oracle_file_score(effect, ctx);
    let engine_names: Vec<&str> = engine.matched_rules.iter().map(|r| r.as_str()).collect();
    if engine.total != total || engine_names != names {
        return Err(format!(
            "{}: engine {} {:?}, oracle {} {:?}\n{ctx:?}",
            effect.path, engine.total, engine_names, total, names
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// overlay oracle

/// Applies each layer to a real directory tree, overlay style, and lists
/// what is left. Markers of a layer are applied before its additions.
pub fn materialize(spec: &ImageSpec, root: &Path) -> Vec<String> {
    let host = |p: &str| root.join(p.trim_start_matches('/'));
    for layer in spec.layers() {
        for m in layer {
            match m {
                Member::Whiteout { path } => remove(&host(path)),
                Member::Opaque { dir } => {
                    if let Ok(rd) = fs::read_dir(host(dir)) {
                        for e in rd {
                            remove(&e.unwrap().path());
                        }
                    }
                }
                _ => {}
            }
        }
        for m in layer {
            match m {
                Member::File { path, data, .. } => {
                    let p = host(path);
                    replace_with_leaf(&p);
                    fs::write(p, data).unwrap();
                }
                Member::Dir { path, .. } => {
                    let p = host(path);
                    if p.symlink_metadata().is_ok_and(|m| !m.is_dir()) {
                        fs::remove_file(&p).unwrap();
                    }
                    fs::create_dir_all(p).unwrap();
                }
                Member::Symlink { path, target } => {
                    let p = host(path);
                    replace_with_leaf(&p);
                    std::os::unix::fs::symlink(target, p).unwrap();
                }
                Member::Hardlink { path, target } => {
                    let p = host(path);
                    replace_with_leaf(&p);
                    fs::hard_link(host(target), p).unwrap();
                }
                Member::Whiteout { .. } | Member::Opaque { .. } => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn remove(p: &Path) {
    match p.symlink_metadata() {
        Ok(m) if m.is_dir() => fs::remove_dir_all(p).unwrap(),
        Ok(_) => fs::remove_file(p).unwrap(),
        Err(_) => {}
    }
}

fn replace_with_leaf(p: &Path) {
    remove(p);
    fs::create_dir_all(p.parent().unwrap()).unwrap();
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.push(format!("/{}", p.strip_prefix(root).unwrap().display()));
        if p.symlink_metadata().unwrap().is_dir() {
            walk(root, &p, out);
        }
    }
}

// ---------------------------------------------------------------------
// end-to-end checks

pub const THRESHOLDS: [i64; 8] = [-20, -10, 0, 3, 5, 9, 15, 10000];

pub const DELETED_LIST: &str = "/var/lib/apt/lists/deb.debian.org_debian_dists_bookworm_InRelease";

/// Whether a `which <name>` test in `doc` expects exactly `path`.
fn which_expects(doc: &CstDocument, path: &str) -> bool {
    let name = path.rsplit('/').next().unwrap_or_default();
    doc.command_tests.iter().any(|t| {
        t.command == "which"
            && t.args == [name]
            && !t.expected_output.is_empty()
            && t.expected_output.iter().all(|p| regex::Regex::new(p).is_ok_and(|re| re.is_match(path)))
    })
}

/// Every test in `doc` that mentions `needle` anywhere.
pub fn mentions(doc: &CstDocument, needle: &str) -> usize {
    let cmd = doc.command_tests.iter().filter(|t| {
        std::iter::once(&t.command)
            .chain(&t.args)
            .chain(&t.expected_output)
            .chain(&t.expected_error)
            .any(|s| s.contains(needle))
    });
    let files = doc.file_existence_tests.iter().filter(|t| t.path.contains(needle));
    cmd.count() + files.count()
}

/// No-filter run with the fixture's full transcript: each alive file is
/// covered by exactly one test and every metadata key is asserted.
pub fn check_sufficiency(fx: &Fixture) -> Result<String, String> {
    let start = Instant::now();
    let out = run_fixture(fx, no_filter(), None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if let Some(e) = &out.executor_error {
        return Err(format!("executor error: {e}"));
    }
    let doc = &out.document;
    let mut execs = 0;
    for e in out.effects.file_effects.iter().filter(|e| !e.deleted) {
        let by_file = doc.file_existence_tests.iter().filter(|t| t.path == e.path).count();
        let by_command = usize::from(which_expects(doc, &e.path));
        if by_file + by_command != 1 {
            return Err(format!("{} covered by {by_file} file and {by_command} command tests", e.path));
        }
        execs += by_command;
    }
    let meta = doc.metadata_test.as_ref().map_or(0, |m| m.item_count());
    if meta != out.effects.metadata_effects.len() {
        return Err(format!("{meta} metadata items for {} effects", out.effects.metadata_effects.len()));
    }
    let c = &out.coverage;
    if c.nonexec_ratio() != 1.0 || c.exec_ratio() != 1.0 {
        return Err(format!("coverage report: {}", c.to_text().trim()));
    }
    if elapsed >= Duration::from_secs(10) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!(
        "{}: {}/{} non-executables, {}/{} executables ({} by command), {} metadata, {} ms",
        fx.name,
        c.nonexec_tested,
        c.nonexec_total,
        c.exec_tested_command + c.exec_tested_existence_only,
        c.exec_total,
        execs,
        meta,
        elapsed.as_millis()
    ))
}

pub fn golden_python() -> String {
    fs::read_to_string(dockergen_testkit::fixtures::python().dir().join("expected.yaml")).unwrap()
}

pub fn check_python() -> Result<String, String> {
    let fx = dockergen_testkit::fixtures::python();
    let a = run_fixture(&fx, SelectionConfig::default(), None).map_err(|e| e.to_string())?;
    let b = run_fixture(&fx, SelectionConfig::default(), None).map_err(|e| e.to_string())?;
    if a.yaml != b.yaml {
        return Err("two runs differ".into());
    }
    if a.yaml != golden_python() {
        return Err(format!("differs from expected.yaml:\n{}", a.yaml));
    }
    let doc = &a.document;
    let version = doc.command_tests.iter().any(|t| {
        t.command == "python3"
            && t.args == ["--version"]
            && t.expected_output
                .iter()
                .any(|p| regex::Regex::new(p).is_ok_and(|re| re.is_match("Python 3.11.4")))
    });
    let main_py = doc.file_existence_tests.iter().any(|t| t.path == "/main.py" && t.should_exist);
    let cmd = doc.metadata_test.as_ref().and_then(|m| m.cmd.clone());
    match (version, main_py, cmd) {
        (true, true, Some(c)) if c == ["python3", "main.py"] => {
            Ok(format!("{} bytes, python3 --version, /main.py, cmd {c:?}", a.yaml.len()))
        }
        (v, f, c) => Err(format!("version test {v}, main.py test {f}, cmd {c:?}")),
    }
}

/// Selections on the apt fixture across [`THRESHOLDS`]: an inclusion
/// chain whose size drops at every step, from every alive effect to none.
pub fn check_monotonicity() -> Result<String, String> {
    use dockergen_core::scoring::{select_effects, RuleSet};
    let fx = dockergen_testkit::fixtures::apt();
    let (archive, ast, effects) = load(&fx);
    let ctx = ScoringContext::build(&ast, &archive.config, &effects);
    let alive = effects.metadata_effects.len() + effects.file_effects.iter().filter(|e| !e.deleted).count();
    let sets: Vec<BTreeSet<_>> = THRESHOLDS
        .iter()
        .map(|&t| {
            select_effects(&effects, &ctx, &RuleSet::default(), threshold(t))
                .selected
                .iter()
                .map(|b| b.effect)
                .collect()
        })
        .collect();
    let counts: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
    if counts[0] != alive {
        return Err(format!("{} selected at {}, {alive} alive", counts[0], THRESHOLDS[0]));
    }
    if *counts.last().unwrap() != 0 {
        return Err(format!("{} selected at 10000", counts.last().unwrap()));
    }
    for (i, w) in sets.windows(2).enumerate() {
        if !w[1].is_subset(&w[0]) {
            return Err(format!("selection at {} not within {}", THRESHOLDS[i + 1], THRESHOLDS[i]));
        }
        if w[1].len() >= w[0].len() {
            return Err(format!("no shrink from {} to {}: {counts:?}", THRESHOLDS[i], THRESHOLDS[i + 1]));
        }
    }
    Ok(format!("counts {counts:?} over {THRESHOLDS:?}"))
}

/// Overlay of the apt fixture equals its listing; the removed apt list
/// carries both negative rules and is never tested.
pub fn check_whiteouts() -> Result<String, String> {
    use dockergen_core::image::resolve_file_lifecycles;
    use dockergen_core::scoring::{score_file_effect, RuleId, RuleSet};
    let fx = dockergen_testkit::fixtures::apt();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("rootfs");
    fs::create_dir(&root).unwrap();
    let overlay = materialize(&fx.image, &root);
    if overlay != fx.listing() {
        return Err("overlay differs from listing.txt".into());
    }
    let (archive, ast, effects) = load(&fx);
    let lc = resolve_file_lifecycles(&archive.layers);
    let mut alive: Vec<String> = lc.alive().map(|l| l.path.clone()).collect();
    alive.sort();
    if alive != overlay {
        return Err("lifecycles differ from overlay".into());
    }
    let (i, e) = effects
        .file_effects
        .iter()
        .enumerate()
        .find(|(_, e)| e.path == DELETED_LIST)
        .ok_or("apt list effect missing")?;
    let ctx = ScoringContext::build(&ast, &archive.config, &effects);
    let b = score_file_effect(e, i, &ctx, &RuleSet::default());
    if !e.deleted
        || !b.matched_rules.contains(&RuleId::Deleted)
        || !b.matched_rules.contains(&RuleId::AptLists)
    {
        return Err(format!("deleted {} rules {:?}", e.deleted, b.matched_rules));
    }
    let mut runs = 0;
    for sel in THRESHOLDS.iter().map(|&t| threshold(t)).chain([no_filter()]) {
        let out = run_fixture(&fx, sel, None).map_err(|e| e.to_string())?;
        if mentions(&out.document, DELETED_LIST) != 0 || out.yaml.contains(DELETED_LIST) {
            return Err(format!("apt list tested at {sel:?}"));
        }
        runs += 1;
    }
    Ok(format!(
        "{} paths, score {} ({}), absent from {runs} runs",
        overlay.len(),
        b.total,
        rule_names(&b.matched_rules)
    ))
}

fn rule_names(rules: &[dockergen_core::scoring::RuleId]) -> String {
    rules.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(",")
}

/// `which jq` answering another path downgrades jq to one file test.
pub fn check_path_mismatch() -> Result<String, String> {
    let fx = dockergen_testkit::fixtures::apt();
    let transcript = format!(
        "{}{{\"cmd\":\"which\",\"args\":[\"jq\"],\"stdout\":\"/usr/local/bin/jq\\n\",\"stderr\":\"\",\"exit\":0}}\n",
        fx.transcript()
    );
    let out = run_fixture(&fx, SelectionConfig::default(), Some(&transcript)).map_err(|e| e.to_string())?;
    let doc = &out.document;
    let files = doc.file_existence_tests.iter().filter(|t| t.path == "/usr/bin/jq").count();
    let commands =
        doc.command_tests.iter().filter(|t| t.command == "jq" || t.args.iter().any(|a| a == "jq")).count();
    let curl = doc.command_tests.iter().filter(|t| t.command == "curl" || t.args == ["curl"]).count();
    if files != 1 || commands != 0 || curl != 2 {
        return Err(format!("jq: {files} file tests, {commands} command tests; curl: {curl} command tests"));
    }
    Ok(format!("1 fileExistenceTests entry, 0 commandTests for jq; warning: {}", out.warnings.join("; ")))
}

/// Moving any instruction that creates no layer to any other position
/// leaves every file effect attributed to the same instruction.
pub fn check_mapping_stability(fx: &Fixture) -> Result<usize, String> {
    let (archive, ast, effects) = load(fx);
    let attribution = |ast: &DockerfileAst, effects: &EffectSet| -> Vec<(String, String)> {
        effects
            .file_effects
            .iter()
            .map(|e| (e.path.clone(), ast.instructions[e.instruction].raw_text.clone()))
            .collect()
    };
    let want = attribution(&ast, &effects);
    let movable = |k: InstructionKind| {
        !matches!(
            k,
            InstructionKind::From
                | InstructionKind::Run
                | InstructionKind::Copy
                | InstructionKind::Add
                | InstructionKind::Workdir
        )
    };
    let mut variants = 0;
    for i in 1..ast.instructions.len() {
        if !movable(ast.instructions[i].kind) {
            continue;
        }
        for j in 1..ast.instructions.len() {
            if i == j {
                continue;
            }
            let mut moved = ast.clone();
            let ins = moved.instructions.remove(i);
            moved.instructions.insert(j, ins);
            let got = enumerate_effects(&archive, &moved).map_err(|e| format!("move {i}->{j}: {e}"))?;
            if attribution(&moved, &got) != want {
                return Err(format!("moving {:?} to {j} changed attribution", ast.instructions[i].raw_text));
            }
            variants += 1;
        }
    }
    Ok(variants)
}
