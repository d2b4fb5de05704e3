//! Block-based fuzz configuration scripts.
//!
//! A config file is a sequence of test-case blocks. Each block carries
//! optional `#` comment lines, one or more command lines that are joined
//! into a single template, and a terminating `--` line. The token `FUZZ`
//! marks a placeholder:
//!
//! ```text
//! @charset=!/09:@AZ['az{~
//! @maxlen=1025
//! # Nova Test Case 03
//! # Fuzz nova add-fixed-ip (two arguments)
//! nova --os_username admin
//!       --os_password adminpassword
//!       add-fixed-ip FUZZ FUZZ
//! --
//! ```
//!
//! `@charset=` and `@maxlen=` directives are only accepted before the first
//! command line and override the per-run defaults.

use std::fmt;

use thiserror::Error;

/// Placeholder token recognised inside command templates.
pub const PLACEHOLDER: &str = "FUZZ";

/// Line terminating a test-case block.
pub const TERMINATOR: &str = "--";

/// The fourteen ASCII characters used for the OpenStack command-line sweeps.
pub const STANDARD_CHARSET: [char; 14] = [
    '!', '/', '0', '9', ':', '@', 'A', 'Z', '[', '\'', 'a', 'z', '{', '~',
];

/// Longest fuzz string used for the OpenStack command-line sweeps.
pub const STANDARD_MAX_LEN: usize = 1025;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("config contains no test cases")]
    EmptyConfig,
    #[error("test case {0} has no FUZZ placeholder")]
    NoPlaceholder(usize),
    #[error("charset lists {0:?} more than once")]
    DuplicateCharsetEntry(char),
    #[error("charset is empty")]
    EmptyCharset,
    #[error("max length must be at least 1")]
    ZeroMaxLen,
    #[error("line {line}: invalid directive: {detail}")]
    InvalidDirective { line: usize, detail: String },
    #[error("line {0}: directives must precede the first test case")]
    LateDirective(usize),
    #[error("test case {0} is missing its `--` terminator")]
    Unterminated(usize),
}

/// Per-run charset and length bounds, used unless the file overrides them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Defaults {
    pub charset: Vec<char>,
    pub max_len: usize,
}

impl Defaults {
    pub fn standard() -> Self {
        Defaults {
            charset: STANDARD_CHARSET.to_vec(),
            max_len: STANDARD_MAX_LEN,
        }
    }
}

impl Default for Defaults {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Literal(String),
    Placeholder,
}

/// A command template split into literal runs and placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Template {
    tokens: Vec<Token>,
}

impl Template {
    /// Splits `command` at every occurrence of `FUZZ`.
    pub fn parse(command: &str) -> Self {
        let mut tokens = Vec::new();
        let mut rest = command;
        while let Some(pos) = rest.find(PLACEHOLDER) {
            if pos > 0 {
                tokens.push(Token::Literal(rest[..pos].to_string()));
            }
            tokens.push(Token::Placeholder);
            rest = &rest[pos + PLACEHOLDER.len()..];
        }
        if !rest.is_empty() {
            tokens.push(Token::Literal(rest.to_string()));
        }
        Template { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn placeholder_count(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, Token::Placeholder))
            .count()
    }

    /// Substitutes `fill` at every placeholder.
    pub fn render(&self, fill: &str) -> String {
        let mut out = String::with_capacity(self.literal_len() + fill.len() * self.placeholder_count());
        self.render_into(fill, &mut out);
        out
    }

    pub fn render_into(&self, fill: &str, out: &mut String) {
        for token in &self.tokens {
            match token {
                Token::Literal(text) => out.push_str(text),
                Token::Placeholder => out.push_str(fill),
            }
        }
    }

    /// Recovers the fill string from a command rendered with one fill at
    /// every placeholder, or `None` if `rendered` is not such a rendering.
    pub fn extract_uniform<'a>(&self, rendered: &'a str) -> Option<&'a str> {
        let k = self.placeholder_count();
        let literal = self.literal_len();
        if k == 0 || rendered.len() < literal || (rendered.len() - literal) % k != 0 {
            return None;
        }
        let fill_len = (rendered.len() - literal) / k;
        let start = match self.tokens.first()? {
            Token::Literal(text) => text.len(),
            Token::Placeholder => 0,
        };
        let fill = rendered.get(start..start + fill_len)?;
        (self.render(fill) == rendered).then_some(fill)
    }

    fn literal_len(&self) -> usize {
        self.tokens
            .iter()
            .map(|t| match t {
                Token::Literal(text) => text.len(),
                Token::Placeholder => 0,
            })
            .sum()
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(PLACEHOLDER))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    /// 1-based position in the file.
    pub index: usize,
    /// Comment lines, each including its leading `#`.
    pub comment_lines: Vec<String>,
    pub template: Template,
}

impl TestCase {
    pub fn placeholder_count(&self) -> usize {
        self.template.placeholder_count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzConfig {
    name: String,
    charset: Vec<char>,
    max_len: usize,
    test_cases: Vec<TestCase>,
}

impl FuzzConfig {
    /// Builds a config, checking charset, length and placeholder invariants.
    pub fn new(
        name: impl Into<String>,
        charset: Vec<char>,
        max_len: usize,
        test_cases: Vec<TestCase>,
    ) -> Result<Self, GrammarError> {
        validate_charset(&charset)?;
        if max_len == 0 {
            return Err(GrammarError::ZeroMaxLen);
        }
        if test_cases.is_empty() {
            return Err(GrammarError::EmptyConfig);
        }
        if let Some(case) = test_cases.iter().find(|c| c.placeholder_count() == 0) {
            return Err(GrammarError::NoPlaceholder(case.index));
        }
        Ok(FuzzConfig {
            name: name.into(),
            charset,
            max_len,
            test_cases,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn charset(&self) -> &[char] {
        &self.charset
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn test_cases(&self) -> &[TestCase] {
        &self.test_cases
    }

    /// Same test cases with a different sweep.
    pub fn with_sweep(&self, charset: Vec<char>, max_len: usize) -> Result<Self, GrammarError> {
        FuzzConfig::new(self.name.clone(), charset, max_len, self.test_cases.clone())
    }

    /// Serializes back into config-file syntax, directives included.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        out.push_str("@charset=");
        out.extend(self.charset.iter());
        out.push('\n');
        out.push_str(&format!("@maxlen={}\n", self.max_len));
        for case in &self.test_cases {
            for comment in &case.comment_lines {
                out.push_str(comment);
                out.push('\n');
            }
            out.push_str(&case.template.to_string());
            out.push('\n');
            out.push_str(TERMINATOR);
            out.push('\n');
        }
        out
    }
}

fn validate_charset(charset: &[char]) -> Result<(), GrammarError> {
    if charset.is_empty() {
        return Err(GrammarError::EmptyCharset);
    }
    for (i, c) in charset.iter().enumerate() {
        if charset[..i].contains(c) {
            return Err(GrammarError::DuplicateCharsetEntry(*c));
        }
    }
    Ok(())
}

#[derive(Default)]
struct Block {
    comments: Vec<String>,
    command: Vec<String>,
}

/// Parses a config script. `name` is usually the file stem (`nova`).
pub fn parse_config(name: &str, source: &str, defaults: &Defaults) -> Result<FuzzConfig, GrammarError> {
    let source = source.strip_prefix('\u{feff}').unwrap_or(source);
    let mut charset = defaults.charset.clone();
    let mut max_len = defaults.max_len;
    let mut cases = Vec::new();
    let mut block = Block::default();
    let mut seen_command = false;

    for (n, raw) in source.split('\n').enumerate() {
        let line_no = n + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);

        if let Some(directive) = line.strip_prefix('@') {
            if seen_command {
                return Err(GrammarError::LateDirective(line_no));
            }
            apply_directive(directive, line_no, &mut charset, &mut max_len)?;
            continue;
        }
        if line.trim_end() == TERMINATOR {
            let index = cases.len() + 1;
            let block = std::mem::take(&mut block);
            let command = normalize(&block.command);
            let template = Template::parse(&command);
            if template.placeholder_count() == 0 {
                return Err(GrammarError::NoPlaceholder(index));
            }
            cases.push(TestCase {
                index,
                comment_lines: block.comments,
                template,
            });
            continue;
        }
        if line.starts_with('#') {
            block.comments.push(line.trim_end().to_string());
        } else if !line.trim().is_empty() {
            seen_command = true;
            block.command.push(line.to_string());
        }
    }

    if !block.command.is_empty() {
        return Err(GrammarError::Unterminated(cases.len() + 1));
    }
    FuzzConfig::new(name, charset, max_len, cases)
}

fn apply_directive(
    directive: &str,
    line: usize,
    charset: &mut Vec<char>,
    max_len: &mut usize,
) -> Result<(), GrammarError> {
    if let Some(chars) = directive.strip_prefix("charset=") {
        let parsed: Vec<char> = chars.chars().collect();
        validate_charset(&parsed)?;
        *charset = parsed;
        Ok(())
    } else if let Some(value) = directive.strip_prefix("maxlen=") {
        let parsed: usize = value.trim().parse().map_err(|_| GrammarError::InvalidDirective {
            line,
            detail: format!("maxlen {value:?} is not an integer"),
        })?;
        if parsed == 0 {
            return Err(GrammarError::ZeroMaxLen);
        }
        *max_len = parsed;
        Ok(())
    } else {
        Err(GrammarError::InvalidDirective {
            line,
            detail: format!("unknown directive @{directive}"),
        })
    }
}

fn normalize(lines: &[String]) -> String {
    lines
        .iter()
        .flat_map(|l| l.split_whitespace())
        .collect::<Vec<_>>()
        .join(" ")
}
