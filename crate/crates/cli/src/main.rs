//! `dockergen`: generate Container Structure Tests for a Dockerfile from
//! the image it builds.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{ArgGroup, Parser};
use dockergen_core::pipeline::{
    run_pipeline, ExecutorMode, ImageSource, PipelineError, RunConfig, DEFAULT_BUILD_COMMAND,
    DEFAULT_SAVE_COMMAND,
};
use dockergen_core::scoring::SelectionConfig;

/// Exit codes: 0 success, 1 usage or Dockerfile error, 2 image error,
/// 3 image/Dockerfile mismatch, 4 container executor error (the test file
/// is still written), 5 output error.
#[derive(Debug, Parser)]
#[command(name = "dockergen", version, about, long_about = None)]
#[command(group(ArgGroup::new("source").required(true).args(["image_archive", "build_context"])))]
struct Cli {
    /// Dockerfile the image was built from.
    #[arg(long)]
    dockerfile: PathBuf,

    /// Image exported with `docker save` (tarball or directory) or an OCI
    /// image layout.
    #[arg(long)]
    image_archive: Option<PathBuf>,

    /// Build the image from this context instead. The Dockerfile is built
    /// with its RUN chains split, one layer per command.
    #[arg(long)]
    build_context: Option<PathBuf>,

    /// Build command template ({dockerfile}, {context}, {tag}).
    #[arg(long, default_value = DEFAULT_BUILD_COMMAND, requires = "build_context")]
    build_command: String,

    /// Export command template ({archive}, {tag}).
    #[arg(long, default_value = DEFAULT_SAVE_COMMAND, requires = "build_context")]
    save_command: String,

    /// Effects scoring strictly above this value become test targets.
    #[arg(long, default_value_t = 5, allow_negative_numbers = true)]
    threshold: i64,

    /// Generate tests for every live effect, skipping score selection.
    #[arg(long)]
    no_filter: bool,

    /// `real[:<runtime>]` to run probes in containers, or
    /// `replay:<transcript.jsonl>` to answer them from a recording.
    #[arg(long, default_value = "real")]
    executor: String,

    /// Container runtime for `--executor real`.
    #[arg(long, env = "DOCKERGEN_RUNTIME", default_value = "docker")]
    runtime: String,

    /// Image reference the real executor runs (defaults to the archive's tag).
    #[arg(long)]
    image: Option<String>,

    /// Treat commands missing from a replay transcript as not found instead
    /// of failing.
    #[arg(long)]
    lenient_replay: bool,

    /// Per-command timeout, in seconds.
    #[arg(long, default_value_t = 10)]
    timeout: u64,

    /// Where to write the test file; `-` for stdout.
    #[arg(long, short, default_value = "-")]
    output: PathBuf,

    /// Write the score of every effect as tab-separated text (to stderr
    /// without a file).
    #[arg(long, value_name = "FILE", num_args = 0..=1, default_missing_value = "-")]
    explain: Option<PathBuf>,

    /// Print file coverage of the generated tests to stderr; with a file,
    /// also append it there as a JSON line.
    #[arg(long, value_name = "FILE", num_args = 0..=1, default_missing_value = "-")]
    coverage_report: Option<PathBuf>,

    /// Rule score overrides, one `<rule-id> <score>` per line.
    #[arg(long, value_name = "FILE")]
    rules_override: Option<PathBuf>,
}

fn executor_mode(cli: &Cli) -> anyhow::Result<ExecutorMode> {
    let (kind, rest) = match cli.executor.split_once(':') {
        Some((k, r)) => (k, Some(r)),
        None => (cli.executor.as_str(), None),
    };
    Ok(match (kind, rest) {
        ("real", None) => ExecutorMode::Real { runtime: cli.runtime.clone(), image: cli.image.clone() },
        ("real", Some(rt)) if !rt.is_empty() => {
            ExecutorMode::Real { runtime: rt.to_owned(), image: cli.image.clone() }
        }
        ("replay", Some(file)) if !file.is_empty() => {
            ExecutorMode::Replay { transcript: file.into(), strict: !cli.lenient_replay }
        }
        _ => bail!("--executor must be `real`, `real:<runtime>` or `replay:<file>`, not `{}`", cli.executor),
    })
}

fn is_stdio(p: &Path) -> bool {
    p.as_os_str() == "-"
}

fn write_to(path: &Path, text: &str) -> std::io::Result<()> {
    if is_stdio(path) {
        std::io::stdout().write_all(text.as_bytes())
    } else {
        std::fs::write(path, text)
    }
}

fn run(cli: Cli) -> Result<(), (u8, anyhow::Error)> {
    let usage = |e: anyhow::Error| (1, e);
    let image_source = match (&cli.image_archive, &cli.build_context) {
        (Some(a), None) => ImageSource::Archive(a.clone()),
        (None, Some(c)) => ImageSource::Build {
            context: c.clone(),
            build_command: cli.build_command.clone(),
            save_command: cli.save_command.clone(),
        },
        _ => unreachable!("clap enforces exactly one image source"),
    };
    let mut config = RunConfig::new(&cli.dockerfile, image_source, executor_mode(&cli).map_err(usage)?);
    config.selection = SelectionConfig { threshold: cli.threshold, filter_enabled: !cli.no_filter };
    config.rules_override = cli.rules_override.clone();
    config.timeout = std::time::Duration::from_secs(cli.timeout);

    let out = run_pipeline(&config).map_err(|e: PipelineError| (e.exit_code() as u8, e.into()))?;

    let output_err = |e: std::io::Error, what: &Path| {
        (5, anyhow::Error::new(e).context(format!("writing {}", what.display())))
    };
    write_to(&cli.output, &out.yaml).map_err(|e| output_err(e, &cli.output))?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(p) = &cli.explain {
        if is_stdio(p) {
            eprint!("{}", out.explain);
        } else {
            std::fs::write(p, &out.explain).map_err(|e| output_err(e, p))?;
        }
    }
    if let Some(p) = &cli.coverage_report {
        eprint!("{}", out.coverage.to_text());
        if !is_stdio(p) {
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .and_then(|mut f| f.write_all(out.coverage.to_json_line().as_bytes()))
                .map_err(|e| output_err(e, p))?;
        }
    }
    if let Some(e) = out.executor_error {
        let err = anyhow::Error::new(e).context("executables were checked by file existence only");
        return Err((4, err));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
