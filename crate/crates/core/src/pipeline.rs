//! The whole generation run: parse, ingest, score, plan, probe, emit.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::cst::{build_cst_document, serialize_cst, CstDocument, CstError};
use crate::dockerfile::{parse_dockerfile, split_run_chains, DockerfileAst, DockerfileError};
use crate::effect::{enumerate_effects, EffectError, EffectSet};
use crate::image::{load_image_archive, ImageArchive, IngestError};
use crate::probe::{
    acquire_expectations, ContainerExecutor, ExecError, RealExecutor, ReplayExecutor, DEFAULT_TIMEOUT,
    DEFAULT_WORKERS,
};
use crate::scoring::{explain_report, select_effects, RuleSet, RulesError, ScoringContext, SelectionConfig};
use crate::viewpoint::{assign_viewpoints, classify_executable, FinalFs};

pub const DEFAULT_BUILD_COMMAND: &str = "docker build -f {dockerfile} -t {tag} {context}";
pub const DEFAULT_SAVE_COMMAND: &str = "docker save -o {archive} {tag}";
pub const BUILD_TAG: &str = "dockergen-build:latest";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Archive(PathBuf),
    /// Builds the split Dockerfile with `build_command`, then exports the
    /// image with `save_command`. Both are templates over `{dockerfile}`,
    /// `{context}`, `{tag}` and `{archive}`, split on whitespace.
    Build {
        context: PathBuf,
        build_command: String,
        save_command: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecutorMode {
    /// Container runtime binary; the image reference defaults to the
    /// archive's first repository tag.
    Real {
        runtime: String,
        image: Option<String>,
    },
    Replay {
        transcript: PathBuf,
        strict: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub dockerfile_path: PathBuf,
    pub image_source: ImageSource,
    pub selection: SelectionConfig,
    pub executor: ExecutorMode,
    pub rules_override: Option<PathBuf>,
    pub timeout: Duration,
    pub workers: usize,
}

impl RunConfig {
    pub fn new(
        dockerfile_path: impl Into<PathBuf>,
        image_source: ImageSource,
        executor: ExecutorMode,
    ) -> Self {
        Self {
            dockerfile_path: dockerfile_path.into(),
            image_source,
            selection: SelectionConfig::default(),
            executor,
            rules_override: None,
            timeout: DEFAULT_TIMEOUT,
            workers: DEFAULT_WORKERS,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read {path}: {source}")]
    ReadInput { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Parse(#[from] DockerfileError),
    #[error("rules override: {0}")]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("image build failed: {0}")]
    Build(String),
    #[error(transparent)]
    Mapping(#[from] EffectError),
    #[error(transparent)]
    Executor(#[from] ExecError),
    #[error(transparent)]
    Cst(#[from] CstError),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 1 input or parse, 2 image ingest, 3 layer mapping, 4 executor,
    /// 5 output.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ReadInput { .. } | PipelineError::Parse(_) | PipelineError::Rules(_) => 1,
            PipelineError::Ingest(_) | PipelineError::Build(_) => 2,
            PipelineError::Mapping(_) => 3,
            PipelineError::Executor(_) => 4,
            PipelineError::Cst(_) | PipelineError::Output { .. } => 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    pub nonexec_total: usize,
    pub nonexec_tested: usize,
    pub exec_total: usize,
    pub exec_tested_command: usize,
    pub exec_tested_existence_only: usize,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        1.0
    } else {
        n as f64 / d as f64
    }
}

impl CoverageReport {
    pub fn nonexec_ratio(&self) -> f64 {
        ratio(self.nonexec_tested, self.nonexec_total)
    }

    pub fn exec_ratio(&self) -> f64 {
        ratio(self.exec_tested_command + self.exec_tested_existence_only, self.exec_total)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "non-executable files: {}/{} tested by fileExistenceTests ({:.1}%)",
            self.nonexec_tested,
            self.nonexec_total,
            100.0 * self.nonexec_ratio()
        );
        let _ = writeln!(
            s,
            "executables: {}/{} tested ({} by commandTests, {} by fileExistenceTests only) ({:.1}%)",
            self.exec_tested_command + self.exec_tested_existence_only,
            self.exec_total,
            self.exec_tested_command,
            self.exec_tested_existence_only,
            100.0 * self.exec_ratio()
        );
        s
    }

    pub fn to_json_line(&self) -> String {
        let v = serde_json::json!({
            "nonexec_total": self.nonexec_total,
            "nonexec_tested": self.nonexec_tested,
            "nonexec_ratio": self.nonexec_ratio(),
            "exec_total": self.exec_total,
            "exec_tested_command": self.exec_tested_command,
            "exec_tested_existence_only": self.exec_tested_existence_only,
            "exec_ratio": self.exec_ratio(),
        });
        format!("{v}\n")
    }
}

/// Counts how many live files the document covers. An executable is
/// command-tested when a `which` test for its name expects its path.
pub fn compute_coverage(
    effects: &EffectSet,
    doc: &CstDocument,
    path_dirs: &[String],
    fs: &FinalFs,
) -> CoverageReport {
    let file_paths: BTreeSet<&str> = doc.file_existence_tests.iter().map(|t| t.path.as_str()).collect();
    let which: Vec<(&str, Vec<regex::Regex>)> = doc
        .command_tests
        .iter()
        .filter(|t| t.command == "which" && t.args.len() == 1)
        .map(|t| {
            let res = t.expected_output.iter().filter_map(|p| regex::Regex::new(p).ok()).collect();
            (t.args[0].as_str(), res)
        })
        .collect();
    let mut r = CoverageReport::default();
    for e in effects.file_effects.iter().filter(|e| !e.deleted) {
        if classify_executable(e, path_dirs, fs) {
            r.exec_total += 1;
            let name = crate::viewpoint::basename(&e.path);
            let commanded = which
                .iter()
                .any(|(n, res)| *n == name && !res.is_empty() && res.iter().all(|re| re.is_match(&e.path)));
            if commanded {
                r.exec_tested_command += 1;
            } else if file_paths.contains(e.path.as_str()) {
                r.exec_tested_existence_only += 1;
            }
        } else {
            r.nonexec_total += 1;
            if file_paths.contains(e.path.as_str()) {
                r.nonexec_tested += 1;
            }
        }
    }
    r
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub yaml: String,
    pub document: CstDocument,
    pub explain: String,
    pub coverage: CoverageReport,
    pub effects: EffectSet,
    pub warnings: Vec<String>,
    /// Set when the executor failed; the document is still complete, with
    /// affected executables checked by file existence only.
    pub executor_error: Option<ExecError>,
    /// The Dockerfile after `RUN` splitting, as it must be built.
    pub split_dockerfile: String,
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|source| PipelineError::ReadInput { path: path.into(), source })
}

fn expand_template(template: &str, vars: &[(&str, &str)]) -> Vec<String> {
    template
        .split_whitespace()
        .map(|word| vars.iter().fold(word.to_owned(), |w, (k, v)| w.replace(&format!("{{{k}}}"), v)))
        .collect()
}

fn run_command(argv: &[String]) -> Result<(), PipelineError> {
    let (program, args) = argv.split_first().ok_or_else(|| PipelineError::Build("empty command".into()))?;
    let out = Command::new(program)
        .args(args)
        .output()
        .map_err(|e| PipelineError::Build(format!("cannot run `{program}`: {e}")))?;
    if !out.status.success() {
        return Err(PipelineError::Build(format!(
            "`{}` exited with {}: {}",
            argv.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(())
}

fn build_image(
    split: &str,
    context: &Path,
    build_command: &str,
    save_command: &str,
    work: &Path,
) -> Result<ImageArchive, PipelineError> {
    let dockerfile = work.join("Dockerfile.split");
    let archive = work.join("image.tar");
    std::fs::write(&dockerfile, split).map_err(|e| PipelineError::Build(e.to_string()))?;
    let dockerfile = dockerfile.to_string_lossy().into_owned();
    let archive_s = archive.to_string_lossy().into_owned();
    let context = context.to_string_lossy().into_owned();
    let vars = [
        ("dockerfile", dockerfile.as_str()),
        ("context", &context),
        ("tag", BUILD_TAG),
        ("archive", &archive_s),
    ];
    run_command(&expand_template(build_command, &vars))?;
    run_command(&expand_template(save_command, &vars))?;
    Ok(load_image_archive(&archive)?)
}

/// Runs the pipeline. Nothing is written to disk; the caller decides
/// where the YAML and reports go.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutput, PipelineError> {
    let source = read(&config.dockerfile_path)?;
    let ast: DockerfileAst = split_run_chains(parse_dockerfile(&source)?);
    let split_dockerfile = ast.render();

    let mut rules = RuleSet::default();
    if let Some(p) = &config.rules_override {
        rules.apply_overrides(&read(p)?)?;
    }

    let work = tempfile::tempdir().map_err(|e| PipelineError::Build(e.to_string()))?;
    let archive = match &config.image_source {
        ImageSource::Archive(p) => load_image_archive(p)?,
        ImageSource::Build { context, build_command, save_command } => {
            build_image(&split_dockerfile, context, build_command, save_command, work.path())?
        }
    };

    let effects = enumerate_effects(&archive, &ast)?;
    let ctx = ScoringContext::build(&ast, &archive.config, &effects);
    let selection = select_effects(&effects, &ctx, &rules, config.selection);
    let explain = explain_report(&selection);

    let fs = FinalFs::from_effects(&effects);
    let path_dirs = archive.config.path_dirs();
    let planned = assign_viewpoints(&selection.selected, &effects, &path_dirs, &fs);

    let executor: Box<dyn ContainerExecutor> = match &config.executor {
        ExecutorMode::Replay { transcript, strict } => {
            Box::new(ReplayExecutor::from_jsonl(&read(transcript)?, *strict)?)
        }
        ExecutorMode::Real { runtime, image } => {
            let image = image
                .clone()
                .or_else(|| archive.repo_tags.first().cloned())
                .or_else(|| {
                    matches!(config.image_source, ImageSource::Build { .. }).then(|| BUILD_TAG.to_owned())
                })
                .ok_or_else(|| ExecError::Failure("no image reference to run; pass one explicitly".into()))?;
            Box::new(RealExecutor::new(runtime.clone(), image))
        }
    };
    let expectations =
        acquire_expectations(executor.as_ref(), &planned, &effects, &fs, config.workers, config.timeout);

    let document = build_cst_document(&expectations.tests)?;
    let yaml = serialize_cst(&document);
    let coverage = compute_coverage(&effects, &document, &path_dirs, &fs);
    Ok(RunOutput {
        yaml,
        document,
        explain,
        coverage,
        effects,
        warnings: expectations.warnings,
        executor_error: expectations.executor_error,
        split_dockerfile,
    })
}
