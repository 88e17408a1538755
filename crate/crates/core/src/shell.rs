//! Quote-aware tokenizer for POSIX-like shell command lines.
//!
//! Only the subset needed to reason about `RUN` instructions is modelled:
//! words, quoting, backslash escapes, the list operators `&&`, `||`, `;`
//! and the pipe `|`. Command substitutions (`$(...)`, backticks), parameter
//! expansions (`${...}`) and parenthesised subshells are kept as opaque
//! nested regions inside a single word and are never split.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShellError {
    #[error("unterminated {quote} quote starting at byte {offset}")]
    UnterminatedQuote { quote: char, offset: usize },
    #[error("unbalanced `{open}` starting at byte {offset}")]
    UnbalancedGroup { open: char, offset: usize },
}

/// Top-level control operators recognised by the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operator {
    And,
    Or,
    Semicolon,
    Pipe,
}

impl Operator {
    pub fn as_str(self) -> &'static str {
        match self {
            Operator::And => "&&",
            Operator::Or => "||",
            Operator::Semicolon => ";",
            Operator::Pipe => "|",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Word,
    Operator(Operator),
}

/// A token with its unquoted text and the byte range it occupied in the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn is_word(&self) -> bool {
        matches!(self.kind, TokenKind::Word)
    }

    pub fn operator(&self) -> Option<Operator> {
        match self.kind {
            TokenKind::Operator(op) => Some(op),
            TokenKind::Word => None,
        }
    }
}

/// Splits `command` into words and operators.
///
/// Quotes are removed from words; operator tokens carry their literal
/// spelling (`"&&"`, `"||"`, `";"`, `"|"`).
pub fn shell_tokenize(command: &str) -> Result<Vec<String>, ShellError> {
    Ok(tokenize_spanned(command)?.into_iter().map(|t| t.text).collect())
}

/// Like [`shell_tokenize`] but keeps token kinds and source offsets.
pub fn tokenize_spanned(command: &str) -> Result<Vec<Token>, ShellError> {
    Lexer::new(command).run()
}

struct Lexer<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
    tokens: Vec<Token>,
    word: String,
    word_start: Option<usize>,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            chars: src.char_indices().collect(),
            pos: 0,
            tokens: Vec::new(),
            word: String::new(),
            word_start: None,
        }
    }

    fn peek(&self, ahead: usize) -> Option<char> {
        self.chars.get(self.pos + ahead).map(|&(_, c)| c)
    }

    fn offset(&self, idx: usize) -> usize {
        self.chars.get(idx).map_or(self.src.len(), |&(o, _)| o)
    }

    fn begin_word(&mut self) {
        if self.word_start.is_none() {
            self.word_start = Some(self.offset(self.pos));
        }
    }

    fn finish_word(&mut self) {
        if let Some(start) = self.word_start.take() {
            let end = self.offset(self.pos);
            self.tokens.push(Token {
                kind: TokenKind::Word,
                text: std::mem::take(&mut self.word),
                start,
                end,
            });
        }
    }

    fn push_operator(&mut self, op: Operator, width: usize) {
        self.finish_word();
        let start = self.offset(self.pos);
        self.pos += width;
        let end = self.offset(self.pos);
        self.tokens.push(Token { kind: TokenKind::Operator(op), text: op.as_str().to_owned(), start, end });
    }

    fn run(mut self) -> Result<Vec<Token>, ShellError> {
        while let Some(c) = self.peek(0) {
            match c {
                c if c.is_whitespace() => {
                    self.finish_word();
                    self.pos += 1;
                }
                '&' if self.peek(1) == Some('&') => self.push_operator(Operator::And, 2),
                '|' if self.peek(1) == Some('|') => self.push_operator(Operator::Or, 2),
                '|' => self.push_operator(Operator::Pipe, 1),
                ';' => self.push_operator(Operator::Semicolon, 1),
                '\'' => {
                    self.begin_word();
                    self.single_quoted()?;
                }
                '"' => {
                    self.begin_word();
                    self.double_quoted()?;
                }
                // line continuation
                '\\' if self.peek(1) == Some('\n') => self.pos += 2,
                '\\' => {
                    self.begin_word();
                    self.pos += 1;
                    match self.peek(0) {
                        Some(next) => {
                            self.word.push(next);
                            self.pos += 1;
                        }
                        None => self.word.push('\\'),
                    }
                }
                '$' if matches!(self.peek(1), Some('(') | Some('{')) => {
                    self.begin_word();
                    self.word.push('$');
                    self.pos += 1;
                    self.nested_region()?;
                }
                '(' | '`' => {
                    self.begin_word();
                    self.nested_region()?;
                }
                _ => {
                    self.begin_word();
                    self.word.push(c);
                    self.pos += 1;
                }
            }
        }
        self.finish_word();
        Ok(self.tokens)
    }

    fn single_quoted(&mut self) -> Result<(), ShellError> {
        let open = self.offset(self.pos);
        self.pos += 1;
        loop {
            match self.peek(0) {
                None => return Err(ShellError::UnterminatedQuote { quote: '\'', offset: open }),
                Some('\'') => {
                    self.pos += 1;
                    return Ok(());
                }
                Some(c) => {
                    self.word.push(c);
                    self.pos += 1;
                }
            }
        }
    }

    fn double_quoted(&mut self) -> Result<(), ShellError> {
        let open = self.offset(self.pos);
        self.pos += 1;
        loop {
            match self.peek(0) {
                None => return Err(ShellError::UnterminatedQuote { quote: '"', offset: open }),
                Some('"') => {
                    self.pos += 1;
                    return Ok(());
                }
                Some('\\') => match self.peek(1) {
                    Some(next @ ('"' | '\\' | '$' | '`')) => {
                        self.word.push(next);
                        self.pos += 2;
                    }
                    Some('\n') => self.pos += 2,
                    _ => {
                        self.word.push('\\');
                        self.pos += 1;
                    }
                },
                Some('$') if matches!(self.peek(1), Some('(') | Some('{')) => {
                    self.word.push('$');
                    self.pos += 1;
                    self.nested_region()?;
                }
                Some('`') => self.nested_region()?,
                Some(c) => {
                    self.word.push(c);
                    self.pos += 1;
                }
            }
        }
    }

    /// Copies a bracketed region verbatim, starting at an opening `(`, `{` or
    /// backtick, up to and including its matching closer.
    fn nested_region(&mut self) -> Result<(), ShellError> {
        let open_char = self.peek(0).expect("caller checked opener");
        let open_at = self.offset(self.pos);
        let mut stack = vec![closer(open_char)];
        self.word.push(open_char);
        self.pos += 1;
        while let Some(&expected) = stack.last() {
            let Some(c) = self.peek(0) else {
                return Err(ShellError::UnbalancedGroup { open: open_char, offset: open_at });
            };
            self.word.push(c);
            self.pos += 1;
            match c {
                '\\' => {
                    if let Some(next) = self.peek(0) {
                        self.word.push(next);
                        self.pos += 1;
                    }
                }
                '\'' if expected != '`' => {
                    let quote_at = self.offset(self.pos - 1);
                    loop {
                        match self.peek(0) {
                            None => {
                                return Err(ShellError::UnterminatedQuote { quote: '\'', offset: quote_at })
                            }
                            Some(q) => {
                                self.word.push(q);
                                self.pos += 1;
                                if q == '\'' {
                                    break;
                                }
                            }
                        }
                    }
                }
                '"' if expected != '`' => {
                    let quote_at = self.offset(self.pos - 1);
                    loop {
                        match self.peek(0) {
                            None => {
                                return Err(ShellError::UnterminatedQuote { quote: '"', offset: quote_at })
                            }
                            Some('\\') => {
                                self.word.push('\\');
                                self.pos += 1;
                                if let Some(next) = self.peek(0) {
                                    self.word.push(next);
                                    self.pos += 1;
                                }
                            }
                            Some(q) => {
                                self.word.push(q);
                                self.pos += 1;
                                if q == '"' {
                                    break;
                                }
                            }
                        }
                    }
                }
                c if c == expected => {
                    stack.pop();
                }
                '(' | '{' if expected != '`' => stack.push(closer(c)),
                '`' => stack.push('`'),
                _ => {}
            }
        }
        Ok(())
    }
}

fn closer(open: char) -> char {
    match open {
        '(' => ')',
        '{' => '}',
        _ => '`',
    }
}

/// Splits a token stream into commands separated by top-level operators.
pub fn segments(tokens: &[Token]) -> impl Iterator<Item = &[Token]> {
    tokens.split(|t| t.operator().is_some())
}
