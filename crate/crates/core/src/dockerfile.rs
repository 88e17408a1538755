//! Dockerfile parsing and `RUN` chain splitting.
//!
//! Only the final build stage is analysed; everything before it is kept
//! verbatim so the split Dockerfile can still be rendered and built.

use std::collections::HashMap;
use std::fmt;

use regex::Regex;
use std::sync::LazyLock;
use thiserror::Error;

use crate::shell::{segments, tokenize_spanned, Operator, ShellError, Token};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DockerfileError {
    #[error("malformed Dockerfile (line {line}): {reason}")]
    Malformed { line: usize, reason: String },
}

impl DockerfileError {
    fn at(line: usize, reason: impl Into<String>) -> Self {
        DockerfileError::Malformed { line, reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstructionKind {
    From,
    Run,
    Copy,
    Add,
    Cmd,
    Entrypoint,
    Env,
    Expose,
    Label,
    User,
    Volume,
    Workdir,
    Arg,
    Other,
}

impl InstructionKind {
    pub fn from_keyword(keyword: &str) -> Self {
        match keyword.to_ascii_uppercase().as_str() {
            "FROM" => Self::From,
            "RUN" => Self::Run,
            "COPY" => Self::Copy,
            "ADD" => Self::Add,
            "CMD" => Self::Cmd,
            "ENTRYPOINT" => Self::Entrypoint,
            "ENV" => Self::Env,
            "EXPOSE" => Self::Expose,
            "LABEL" => Self::Label,
            "USER" => Self::User,
            "VOLUME" => Self::Volume,
            "WORKDIR" => Self::Workdir,
            "ARG" => Self::Arg,
            _ => Self::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::From => "FROM",
            Self::Run => "RUN",
            Self::Copy => "COPY",
            Self::Add => "ADD",
            Self::Cmd => "CMD",
            Self::Entrypoint => "ENTRYPOINT",
            Self::Env => "ENV",
            Self::Expose => "EXPOSE",
            Self::Label => "LABEL",
            Self::User => "USER",
            Self::Volume => "VOLUME",
            Self::Workdir => "WORKDIR",
            Self::Arg => "ARG",
            Self::Other => "OTHER",
        }
    }

    /// Kinds that may add a filesystem layer on top of the base image.
    pub fn creates_layer(self) -> bool {
        matches!(self, Self::Run | Self::Copy | Self::Add)
    }
}

impl fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandForm {
    Shell,
    /// JSON array form, e.g. `CMD ["python3", "main.py"]`.
    Exec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub kind: InstructionKind,
    /// Keyword as written in the source (useful for `OTHER`).
    pub keyword: String,
    /// Full instruction text with line continuations joined. Heredoc bodies
    /// follow on subsequent lines.
    pub raw_text: String,
    /// Instruction text after the keyword and any `--flag` options.
    pub body: String,
    /// Leading `--name=value` options (`--from`, `--chown`, `--mount`, ...).
    pub flags: Vec<String>,
    pub arguments: Vec<String>,
    pub form: CommandForm,
    /// 1-based, inclusive.
    pub line_span: (usize, usize),
    pub synthetic: bool,
    pub heredoc: bool,
}

impl Instruction {
    pub fn flag(&self, name: &str) -> Option<&str> {
        self.flags.iter().find_map(|f| {
            f.strip_prefix("--").and_then(|f| f.strip_prefix(name)).and_then(|rest| rest.strip_prefix('='))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DockerfileAst {
    /// Parser directives (`# syntax=...`, `# escape=...`), kind `OTHER`.
    pub directives: Vec<Instruction>,
    /// Global `ARG`s and all instructions of earlier build stages.
    pub preamble: Vec<Instruction>,
    /// Instructions of the final stage, starting with its `FROM`.
    pub instructions: Vec<Instruction>,
    /// Image reference the final stage is based on, with stage aliases and
    /// literal `ARG` defaults resolved.
    pub base_image: String,
}

impl DockerfileAst {
    /// Renders the Dockerfile back to text, one instruction per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for ins in self.directives.iter().chain(&self.preamble).chain(&self.instructions) {
            out.push_str(&ins.raw_text);
            out.push('\n');
        }
        out
    }
}

static DIRECTIVE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^#\s*([A-Za-z]+)\s*=\s*(\S.*?)\s*$").unwrap());
static HEREDOC: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"<<(-?)(["']?)([A-Za-z_][A-Za-z0-9_]*)(["']?)"#).unwrap());
static ARG_REF: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::?-([^}]*))?\}|\$([A-Za-z_][A-Za-z0-9_]*)").unwrap()
});

/// Parses Dockerfile source text.
pub fn parse_dockerfile(source_text: &str) -> Result<DockerfileAst, DockerfileError> {
    let text = source_text.replace("\r\n", "\n");
    let lines: Vec<&str> = text.split('\n').collect();

    let mut directives = Vec::new();
    let mut escape = '\\';
    let mut idx = 0;
    while idx < lines.len() {
        let Some(caps) = DIRECTIVE.captures(lines[idx].trim()) else { break };
        let key = caps[1].to_ascii_lowercase();
        if !matches!(key.as_str(), "syntax" | "escape" | "check") {
            break;
        }
        if key == "escape" {
            escape = match &caps[2] {
                "`" => '`',
                "\\" => '\\',
                other => return Err(DockerfileError::at(idx + 1, format!("invalid escape token {other:?}"))),
            };
        }
        directives.push(Instruction {
            kind: InstructionKind::Other,
            keyword: "#".into(),
            raw_text: lines[idx].trim().to_owned(),
            body: caps[0].to_owned(),
            flags: Vec::new(),
            arguments: vec![key, caps[2].to_owned()],
            form: CommandForm::Shell,
            line_span: (idx + 1, idx + 1),
            synthetic: false,
            heredoc: false,
        });
        idx += 1;
    }

    let mut all = Vec::new();
    while idx < lines.len() {
        let trimmed = lines[idx].trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            idx += 1;
            continue;
        }
        let start = idx + 1;
        let mut logical = String::new();
        let mut line = lines[idx].trim_end();
        loop {
            match line.strip_suffix(escape) {
                Some(head) => {
                    logical.push_str(head);
                    idx += 1;
                    // comment and blank lines inside a continuation are dropped
                    while idx < lines.len() {
                        let t = lines[idx].trim();
                        if t.is_empty() || t.starts_with('#') {
                            idx += 1;
                        } else {
                            break;
                        }
                    }
                    if idx >= lines.len() {
                        break;
                    }
                    line = lines[idx].trim_end();
                }
                None => {
                    logical.push_str(line);
                    break;
                }
            }
        }
        let end = idx.min(lines.len() - 1) + 1;
        idx += 1;
        let logical = logical.trim().to_owned();
        let mut ins = build_instruction(&logical, (start, end.max(start)), escape)?;

        if matches!(ins.kind, InstructionKind::Run | InstructionKind::Copy | InstructionKind::Add) {
            let terminators: Vec<(String, bool)> = HEREDOC
                .captures_iter(&ins.body)
                .filter(|c| c[2] == c[4])
                .map(|c| (c[3].to_owned(), &c[1] == "-"))
                .collect();
            for (terminator, strip_tabs) in terminators {
                loop {
                    let Some(body_line) = lines.get(idx) else {
                        return Err(DockerfileError::at(
                            start,
                            format!("unterminated heredoc `{terminator}`"),
                        ));
                    };
                    idx += 1;
                    ins.raw_text.push('\n');
                    ins.raw_text.push_str(body_line);
                    let candidate = if strip_tabs { body_line.trim_start_matches('\t') } else { body_line };
                    if candidate == terminator {
                        break;
                    }
                }
                ins.heredoc = true;
                ins.line_span.1 = idx;
            }
        }
        all.push(ins);
    }

    assemble(directives, all)
}

fn build_instruction(
    logical: &str,
    line_span: (usize, usize),
    escape: char,
) -> Result<Instruction, DockerfileError> {
    let line = line_span.0;
    let (keyword, rest) = match logical.find(char::is_whitespace) {
        Some(i) => (&logical[..i], logical[i..].trim_start()),
        None => (logical, ""),
    };
    let kind = InstructionKind::from_keyword(keyword);

    let mut flags = Vec::new();
    let mut body = rest;
    if matches!(
        kind,
        InstructionKind::From | InstructionKind::Run | InstructionKind::Copy | InstructionKind::Add
    ) {
        while body.starts_with("--") {
            let end = body.find(char::is_whitespace).unwrap_or(body.len());
            flags.push(body[..end].to_owned());
            body = body[end..].trim_start();
        }
    }

    let exec_list = if body.starts_with('[') { serde_json::from_str::<Vec<String>>(body).ok() } else { None };
    let form = if exec_list.is_some() { CommandForm::Exec } else { CommandForm::Shell };

    let quote_err = |e: ShellError| DockerfileError::at(line, format!("{kind}: {e}"));
    let words = |s: &str| -> Result<Vec<String>, DockerfileError> {
        let s = if escape == '\\' { s.to_owned() } else { swap_escape(s, escape) };
        Ok(tokenize_spanned(&s).map_err(quote_err)?.into_iter().map(|t| t.text).collect())
    };

    // heredoc instructions are tokenized on their first line only
    let arguments = match (kind, exec_list) {
        (_, Some(list)) => list,
        (InstructionKind::Env | InstructionKind::Label, None) => key_values(body, &words, line)?,
        (InstructionKind::Workdir | InstructionKind::User, None) => {
            let mut w = words(body)?;
            if w.len() > 1 {
                w = vec![body.to_owned()];
            }
            w
        }
        (InstructionKind::Other, None) => body.split_whitespace().map(str::to_owned).collect(),
        (_, None) => words(body)?,
    };

    match kind {
        InstructionKind::Run if arguments.is_empty() => {
            return Err(DockerfileError::at(line, "RUN without a command"))
        }
        InstructionKind::From if arguments.is_empty() => {
            return Err(DockerfileError::at(line, "FROM without an image"))
        }
        InstructionKind::Copy | InstructionKind::Add if arguments.len() < 2 && !HEREDOC.is_match(body) => {
            return Err(DockerfileError::at(line, format!("{kind} needs a source and a destination")))
        }
        _ => {}
    }

    Ok(Instruction {
        kind,
        keyword: keyword.to_owned(),
        raw_text: logical.to_owned(),
        body: body.to_owned(),
        flags,
        arguments,
        form,
        line_span,
        synthetic: false,
        heredoc: false,
    })
}

fn swap_escape(s: &str, escape: char) -> String {
    // with `# escape=`\``, backslashes are literal and backticks escape
    s.chars()
        .flat_map(|c| match c {
            '\\' => vec!['\\', '\\'],
            c if c == escape => vec!['\\'],
            c => vec![c],
        })
        .collect()
}

fn key_values(
    body: &str,
    words: &dyn Fn(&str) -> Result<Vec<String>, DockerfileError>,
    line: usize,
) -> Result<Vec<String>, DockerfileError> {
    let first = body.split_whitespace().next().unwrap_or("");
    if first.contains('=') {
        let pairs = words(body)?;
        if let Some(bad) = pairs.iter().find(|p| !p.contains('=')) {
            return Err(DockerfileError::at(line, format!("expected KEY=value, found {bad:?}")));
        }
        Ok(pairs)
    } else if first.is_empty() {
        Ok(Vec::new())
    } else {
        // legacy `ENV KEY value with spaces`
        let value = body[first.len()..].trim();
        let value = words(value)?.join(" ");
        Ok(vec![format!("{first}={value}")])
    }
}

struct Stage {
    name: Option<String>,
    image: String,
    instructions: Vec<Instruction>,
}

fn assemble(directives: Vec<Instruction>, all: Vec<Instruction>) -> Result<DockerfileAst, DockerfileError> {
    let mut preamble = Vec::new();
    let mut global_args: HashMap<String, String> = HashMap::new();
    let mut stages: Vec<Stage> = Vec::new();

    for ins in all {
        match ins.kind {
            InstructionKind::From => {
                let image = substitute_args(&ins.arguments[0], &global_args);
                let name = match ins.arguments.as_slice() {
                    [_, as_kw, name] if as_kw.eq_ignore_ascii_case("as") => Some(name.to_lowercase()),
                    [_] => None,
                    _ => {
                        return Err(DockerfileError::at(
                            ins.line_span.0,
                            format!("unexpected FROM arguments: {}", ins.body),
                        ))
                    }
                };
                if let Some(prev) = stages.last_mut() {
                    preamble.append(&mut prev.instructions);
                }
                stages.push(Stage { name, image, instructions: vec![ins] });
            }
            _ if stages.is_empty() => {
                if ins.kind != InstructionKind::Arg {
                    return Err(DockerfileError::at(
                        ins.line_span.0,
                        format!("{} before the first FROM", ins.keyword),
                    ));
                }
                for decl in &ins.arguments {
                    if let Some((k, v)) = decl.split_once('=') {
                        global_args.insert(k.to_owned(), v.to_owned());
                    }
                }
                preamble.push(ins);
            }
            _ => stages.last_mut().expect("non-empty").instructions.push(ins),
        }
    }

    let Some(last) = stages.last() else {
        return Err(DockerfileError::at(1, "no FROM instruction"));
    };

    // follow `FROM <stage>` aliases down to a real image
    let mut base_image = last.image.clone();
    for _ in 0..stages.len() {
        let lowered = base_image.to_lowercase();
        match stages[..stages.len() - 1].iter().find(|s| s.name.as_deref() == Some(&lowered)) {
            Some(stage) => base_image = stage.image.clone(),
            None => break,
        }
    }

    let instructions = stages.pop().expect("non-empty").instructions;
    Ok(DockerfileAst { directives, preamble, instructions, base_image })
}

fn substitute_args(value: &str, args: &HashMap<String, String>) -> String {
    ARG_REF
        .replace_all(value, |caps: &regex::Captures<'_>| {
            let name = caps.get(1).or_else(|| caps.get(3)).expect("one name group").as_str();
            match args.get(name) {
                Some(v) if !v.is_empty() => v.clone(),
                _ => caps.get(2).map_or(String::new(), |d| d.as_str().to_owned()),
            }
        })
        .into_owned()
}

/// Builtins whose effect on shell state would be lost if the chain were
/// run as separate `RUN` instructions.
const STATEFUL_BUILTINS: &[&str] =
    &["cd", "export", "pushd", "popd", "source", ".", "set", "unset", "umask", "shopt", "alias"];

fn is_assignment(word: &str) -> bool {
    match word.split_once('=') {
        Some((name, _)) => {
            !name.is_empty()
                && !name.starts_with(|c: char| c.is_ascii_digit())
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        }
        None => false,
    }
}

/// Replaces every splittable `&&` chain in the final stage with one
/// synthetic `RUN` per segment.
pub fn split_run_chains(ast: DockerfileAst) -> DockerfileAst {
    let DockerfileAst { directives, preamble, instructions, base_image } = ast;
    let mut out = Vec::with_capacity(instructions.len());
    for ins in instructions {
        match split_segments(&ins) {
            Some(parts) => {
                let prefix = if ins.flags.is_empty() {
                    "RUN ".to_owned()
                } else {
                    format!("RUN {} ", ins.flags.join(" "))
                };
                for (text, tokens) in parts {
                    out.push(Instruction {
                        kind: InstructionKind::Run,
                        keyword: "RUN".into(),
                        raw_text: format!("{prefix}{text}"),
                        body: text,
                        flags: ins.flags.clone(),
                        arguments: tokens,
                        form: CommandForm::Shell,
                        line_span: ins.line_span,
                        synthetic: true,
                        heredoc: false,
                    });
                }
            }
            None => out.push(ins),
        }
    }
    DockerfileAst { directives, preamble, instructions: out, base_image }
}

/// Returns the `(text, words)` of each `&&` segment, or `None` when the
/// instruction must stay intact.
fn split_segments(ins: &Instruction) -> Option<Vec<(String, Vec<String>)>> {
    if ins.kind != InstructionKind::Run || ins.form != CommandForm::Shell || ins.heredoc {
        return None;
    }
    let tokens = tokenize_spanned(&ins.body).ok()?;
    let ops: Vec<Operator> = tokens.iter().filter_map(Token::operator).collect();
    if !ops.contains(&Operator::And) || ops.iter().any(|op| matches!(op, Operator::Or | Operator::Semicolon))
    {
        return None;
    }

    // byte ranges of the segments between top-level `&&`
    let mut bounds = Vec::new();
    let mut seg_start = 0;
    for tok in tokens.iter().filter(|t| t.operator() == Some(Operator::And)) {
        bounds.push((seg_start, tok.start));
        seg_start = tok.end;
    }
    bounds.push((seg_start, ins.body.len()));

    let mut parts = Vec::with_capacity(bounds.len());
    for (from, to) in bounds {
        let words: Vec<&Token> = tokens.iter().filter(|t| t.start >= from && t.end <= to).collect();
        let first = words.iter().find(|t| t.is_word())?;
        if STATEFUL_BUILTINS.contains(&first.text.as_str())
            || words.iter().filter(|t| t.is_word()).all(|t| is_assignment(&t.text))
        {
            return None;
        }
        let text = ins.body[from..to].trim().to_owned();
        parts.push((text, words.iter().map(|t| t.text.clone()).collect()));
    }
    Some(parts)
}

/// Subcommands and shell keywords that never name an installed artifact.
const ARGUMENT_STOPLIST: &[&str] = &[
    "install",
    "update",
    "upgrade",
    "dist-upgrade",
    "add",
    "remove",
    "del",
    "delete",
    "purge",
    "autoremove",
    "autoclean",
    "clean",
    "reinstall",
    "get",
    "download",
    "fetch",
    "sync",
    "build",
    "run",
    "exec",
    "init",
    "config",
    "enable",
    "disable",
    "start",
    "stop",
    "restart",
    "then",
    "else",
    "elif",
    "fi",
    "do",
    "done",
    "if",
    "for",
    "while",
    "in",
    "true",
    "false",
    "/dev/null",
];

fn is_redirection(word: &str) -> bool {
    let rest = word.trim_start_matches(|c: char| c.is_ascii_digit() || c == '&');
    rest.starts_with('>') || rest.starts_with('<')
}

/// Words of a `RUN` command that may name files it produces.
pub fn extract_run_arguments(instruction: &Instruction) -> Vec<String> {
    if instruction.kind != InstructionKind::Run {
        return Vec::new();
    }
    let mut candidates: Vec<String> = Vec::new();
    match instruction.form {
        CommandForm::Exec => candidates.extend(instruction.arguments.iter().skip(1).cloned()),
        CommandForm::Shell => {
            let first_line = instruction.body.lines().next().unwrap_or("");
            let Ok(tokens) = tokenize_spanned(first_line) else {
                return Vec::new();
            };
            for segment in segments(&tokens) {
                let mut words = segment.iter().map(|t| t.text.as_str()).skip_while(|w| is_assignment(w));
                // command name
                words.next();
                candidates.extend(words.map(str::to_owned));
            }
        }
    }

    let mut out: Vec<String> = Vec::new();
    for word in candidates {
        if word.starts_with('-')
            || word.chars().count() < 2
            || ARGUMENT_STOPLIST.contains(&word.as_str())
            || is_redirection(&word)
            || out.contains(&word)
        {
            continue;
        }
        out.push(word);
    }
    out
}
