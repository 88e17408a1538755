//! Running commands in a container to learn what the tests should expect.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::cst::escape_regex_literal;
use crate::effect::{EffectSet, MetadataKey, MetadataValue};
use crate::scoring::EffectRef;
use crate::viewpoint::{FinalFs, PlannedTest, Viewpoint};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const VERSION_FLAGS: [&str; 3] = ["--version", "-version", "-V"];
pub const DEFAULT_WORKERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExecResult {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("`{command}` timed out after {timeout:?}")]
    Timeout { command: String, timeout: Duration },
    #[error("executor failure: {0}")]
    Failure(String),
}

/// Runs one command in a fresh container of the image under test.
pub trait ContainerExecutor: Send + Sync {
    fn run(&self, command: &str, args: &[String], timeout: Duration) -> Result<ExecResult, ExecError>;
}

#[derive(Debug, Deserialize)]
struct Record {
    cmd: String,
    #[serde(default)]
    args: Vec<String>,
    #[serde(default)]
    stdout: String,
    #[serde(default)]
    stderr: String,
    #[serde(default)]
    exit: i32,
    #[serde(default)]
    timeout: bool,
}

#[derive(Debug, Clone)]
enum Outcome {
    Done(ExecResult),
    Timeout,
}

/// Answers commands from a recorded transcript: one JSON object per line
/// with `cmd`, `args`, `stdout`, `stderr`, `exit` and an optional
/// `timeout` flag. Later records for the same invocation replace earlier
/// ones.
#[derive(Debug)]
pub struct ReplayExecutor {
    records: HashMap<(String, Vec<String>), Outcome>,
    strict: bool,
    calls: AtomicUsize,
}

impl ReplayExecutor {
    /// `strict` makes unrecorded invocations an executor failure; otherwise
    /// they exit 127 as if the command did not exist.
    pub fn from_jsonl(text: &str, strict: bool) -> Result<Self, ExecError> {
        let mut records = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line)
                .map_err(|e| ExecError::Failure(format!("transcript line {}: {e}", n + 1)))?;
            let outcome = if r.timeout {
                Outcome::Timeout
            } else {
                Outcome::Done(ExecResult { stdout: r.stdout, stderr: r.stderr, exit_code: r.exit })
            };
            records.insert((r.cmd, r.args), outcome);
        }
        Ok(Self { records, strict, calls: AtomicUsize::new(0) })
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ContainerExecutor for ReplayExecutor {
    fn run(&self, command: &str, args: &[String], timeout: Duration) -> Result<ExecResult, ExecError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.records.get(&(command.to_owned(), args.to_vec())) {
            Some(Outcome::Done(r)) => Ok(r.clone()),
            Some(Outcome::Timeout) => Err(ExecError::Timeout { command: command.to_owned(), timeout }),
            None if self.strict => {
                Err(ExecError::Failure(format!("no transcript record for `{command} {}`", args.join(" "))))
            }
            None => Ok(ExecResult {
                stdout: String::new(),
                stderr: format!("{command}: not found\n"),
                exit_code: 127,
            }),
        }
    }
}

/// Runs `<runtime> run --rm --entrypoint <command> <image> <args...>`.
#[derive(Debug, Clone)]
pub struct RealExecutor {
    pub runtime: String,
    pub image: String,
}

impl RealExecutor {
    pub fn new(runtime: impl Into<String>, image: impl Into<String>) -> Self {
        Self { runtime: runtime.into(), image: image.into() }
    }
}

fn drain(mut r: impl Read + Send + 'static) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

impl ContainerExecutor for RealExecutor {
    fn run(&self, command: &str, args: &[String], timeout: Duration) -> Result<ExecResult, ExecError> {
        let mut child = Command::new(&self.runtime)
            .args(["run", "--rm", "--entrypoint", command, &self.image])
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ExecError::Failure(format!("cannot start `{}`: {e}", self.runtime)))?;
        let out = drain(child.stdout.take().expect("piped"));
        let err = drain(child.stderr.take().expect("piped"));
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(ExecError::Timeout { command: command.to_owned(), timeout });
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(10)),
                Err(e) => return Err(ExecError::Failure(e.to_string())),
            }
        };
        Ok(ExecResult {
            stdout: out.join().unwrap_or_default(),
            stderr: err.join().unwrap_or_default(),
            exit_code: status.code().unwrap_or(-1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WhichOutcome {
    Confirmed,
    PathMismatch(String),
    NotFound,
}

/// Asks the container where `name` is found on `PATH` and compares the
/// answer with `expected_path`, resolving symlinks on both sides.
pub fn probe_which(
    executor: &dyn ContainerExecutor,
    fs: &FinalFs,
    name: &str,
    expected_path: &str,
    timeout: Duration,
) -> Result<WhichOutcome, ExecError> {
    let r = executor.run("which", &[name.to_owned()], timeout)?;
    if r.exit_code != 0 {
        return Ok(WhichOutcome::NotFound);
    }
    let found = r.stdout.lines().next().unwrap_or_default().trim();
    if found.is_empty() {
        return Ok(WhichOutcome::NotFound);
    }
    if found == expected_path {
        return Ok(WhichOutcome::Confirmed);
    }
    match (fs.resolve(found), fs.resolve(expected_path)) {
        (Some(a), Some(b)) if a == b => Ok(WhichOutcome::Confirmed),
        _ => Ok(WhichOutcome::PathMismatch(found.to_owned())),
    }
}

fn version_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(\.\d+)+").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionProbe {
    pub flag: String,
    pub version: String,
    /// The version was printed on stderr rather than stdout.
    pub on_stderr: bool,
}

/// Tries each version flag in turn. A flag works when the command exits 0
/// and prints something shaped like a version. A timed-out flag counts as
/// not working.
pub fn probe_version(
    executor: &dyn ContainerExecutor,
    name: &str,
    timeout: Duration,
) -> Result<Option<VersionProbe>, ExecError> {
    for flag in VERSION_FLAGS {
        let r = match executor.run(name, &[flag.to_owned()], timeout) {
            Ok(r) => r,
            Err(ExecError::Timeout { .. }) => continue,
            Err(e) => return Err(e),
        };
        if r.exit_code != 0 {
            continue;
        }
        let found = [(&r.stdout, false), (&r.stderr, true)]
            .into_iter()
            .find_map(|(text, on_stderr)| version_regex().find(text).map(|m| (m.as_str(), on_stderr)));
        if let Some((version, on_stderr)) = found {
            return Ok(Some(VersionProbe { flag: flag.to_owned(), version: version.to_owned(), on_stderr }));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolvedTest {
    Metadata { key: MetadataKey, value: MetadataValue },
    CommandExistence { name: String, path: String, pattern: String },
    CommandVersion { name: String, flag: String, version: String, pattern: String, on_stderr: bool },
    FileExistence { path: String },
}

impl ResolvedTest {
    /// Identity used to drop duplicates: kind plus command and arguments,
    /// path, or metadata key.
    fn identity(&self) -> (u8, String, String) {
        match self {
            ResolvedTest::Metadata { key, .. } => (0, key.as_str().into(), String::new()),
            ResolvedTest::CommandExistence { name, .. } => (1, "which".into(), name.clone()),
            ResolvedTest::CommandVersion { name, flag, .. } => (2, name.clone(), flag.clone()),
            ResolvedTest::FileExistence { path } => (3, path.clone(), String::new()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Expectations {
    pub tests: Vec<ResolvedTest>,
    /// Non-fatal findings, such as executables that fell back to file
    /// existence checks.
    pub warnings: Vec<String>,
    /// First executor failure, in planned order. Executables it affected
    /// fell back to file existence checks.
    pub executor_error: Option<ExecError>,
}

struct Chain<'a> {
    path: &'a str,
    name: &'a str,
    with_version: bool,
}

fn resolve_chain(
    executor: &dyn ContainerExecutor,
    fs: &FinalFs,
    chain: &Chain<'_>,
    timeout: Duration,
) -> (Vec<ResolvedTest>, Option<String>, Option<ExecError>) {
    let fallback = || vec![ResolvedTest::FileExistence { path: chain.path.to_owned() }];
    match probe_which(executor, fs, chain.name, chain.path, timeout) {
        Err(e) => (fallback(), Some(format!("{}: {e}", chain.path)), Some(e)),
        Ok(WhichOutcome::NotFound) => {
            (fallback(), Some(format!("{}: `which {}` found nothing", chain.path, chain.name)), None)
        }
        Ok(WhichOutcome::PathMismatch(found)) => {
            (fallback(), Some(format!("{}: `which {}` points to {found}", chain.path, chain.name)), None)
        }
        Ok(WhichOutcome::Confirmed) => {
            let mut tests = vec![ResolvedTest::CommandExistence {
                name: chain.name.to_owned(),
                path: chain.path.to_owned(),
                pattern: escape_regex_literal(chain.path),
            }];
            if !chain.with_version {
                return (tests, None, None);
            }
            match probe_version(executor, chain.name, timeout) {
                Ok(Some(v)) => {
                    tests.push(ResolvedTest::CommandVersion {
                        name: chain.name.to_owned(),
                        flag: v.flag,
                        pattern: escape_regex_literal(&v.version),
                        version: v.version,
                        on_stderr: v.on_stderr,
                    });
                    (tests, None, None)
                }
                Ok(None) => (tests, Some(format!("{}: no version detected", chain.path)), None),
                Err(e) => (tests, Some(format!("{}: {e}", chain.path)), Some(e)),
            }
        }
    }
}

/// Resolves planned tests into concrete expectations. Metadata and file
/// checks need no container. Executables are probed concurrently on a
/// bounded pool; results keep the planned order.
pub fn acquire_expectations(
    executor: &dyn ContainerExecutor,
    planned: &[PlannedTest],
    effects: &EffectSet,
    fs: &FinalFs,
    workers: usize,
    timeout: Duration,
) -> Expectations {
    enum Item<'a> {
        Ready(ResolvedTest),
        Probe(Chain<'a>),
    }
    let mut items: Vec<Item<'_>> = Vec::new();
    let mut chain_of: HashMap<EffectRef, usize> = HashMap::new();
    for p in planned {
        match (p.viewpoint, p.subject) {
            (Viewpoint::MetadataCheck, EffectRef::Metadata(i)) => {
                let m = &effects.metadata_effects[i];
                items.push(Item::Ready(ResolvedTest::Metadata { key: m.key, value: m.value.clone() }));
            }
            (Viewpoint::FileExistence, EffectRef::File(i)) => {
                items.push(Item::Ready(ResolvedTest::FileExistence {
                    path: effects.file_effects[i].path.clone(),
                }));
            }
            (Viewpoint::ExecutableExistence, EffectRef::File(i)) => {
                let e = &effects.file_effects[i];
                let name =
                    p.executable_name.as_deref().unwrap_or_else(|| crate::viewpoint::basename(&e.path));
                chain_of.insert(p.subject, items.len());
                items.push(Item::Probe(Chain { path: &e.path, name, with_version: false }));
            }
            (Viewpoint::ExecutableVersion, subject) => {
                if let Some(Item::Probe(c)) = chain_of.get(&subject).map(|&k| &mut items[k]) {
                    c.with_version = true;
                }
            }
            _ => {}
        }
    }

    let probe = |item: &Item<'_>| match item {
        Item::Ready(t) => (vec![t.clone()], None, None),
        Item::Probe(chain) => resolve_chain(executor, fs, chain, timeout),
    };
    let results: Vec<_> = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(probe).collect()),
        Err(_) => items.iter().map(probe).collect(),
    };

    let mut out = Expectations::default();
    let mut seen = HashSet::new();
    for (tests, warning, error) in results {
        for t in tests {
            if seen.insert(t.identity()) {
                out.tests.push(t);
            }
        }
        out.warnings.extend(warning);
        if out.executor_error.is_none() {
            out.executor_error = error;
        }
    }
    out
}
