//! Expansion of a [`FuzzConfig`] into its full command sweep.
//!
//! Every test case is expanded once per (character, length) pair. All
//! placeholders in one command receive the same fuzz string, which is a
//! single character repeated `length` times. Iteration order is test cases
//! outermost, then charset in config order, then lengths `1..=max_len`.

use std::io::{self, Write};

use thiserror::Error;

use crate::grammar::{FuzzConfig, TestCase};

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("failed writing script: {0}")]
    SinkWrite(#[from] io::Error),
}

/// Command counts for a config, computed without generating anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FuzzPlan {
    pub test_cases: u64,
    pub charset_len: u64,
    pub max_len: u64,
    pub per_case_count: u64,
    pub total_count: u64,
}

pub fn plan(config: &FuzzConfig) -> FuzzPlan {
    let charset_len = config.charset().len() as u64;
    let max_len = config.max_len() as u64;
    let test_cases = config.test_cases().len() as u64;
    let per_case_count = charset_len * max_len;
    FuzzPlan {
        test_cases,
        charset_len,
        max_len,
        per_case_count,
        total_count: per_case_count * test_cases,
    }
}

/// Sum of plan totals across several configs.
pub fn campaign_total(configs: &[FuzzConfig]) -> u64 {
    configs.iter().map(|c| plan(c).total_count).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCommand {
    pub case_index: usize,
    pub ch: char,
    pub length: usize,
    pub rendered: String,
}

impl GeneratedCommand {
    pub fn fuzz_string(&self) -> String {
        std::iter::repeat(self.ch).take(self.length).collect()
    }
}

/// Streaming iterator over a config's sweep. Holds one fuzz string in memory.
#[derive(Debug, Clone)]
pub struct Commands<'a> {
    config: &'a FuzzConfig,
    case: usize,
    char_idx: usize,
    fill: String,
    fill_len: usize,
    remaining: u64,
}

pub fn generate(config: &FuzzConfig) -> Commands<'_> {
    Commands {
        config,
        case: 0,
        char_idx: 0,
        fill: String::new(),
        fill_len: 0,
        remaining: plan(config).total_count,
    }
}

impl<'a> Commands<'a> {
    /// Advances the cursor and returns the case and current fill, without
    /// rendering.
    fn advance(&mut self) -> Option<(&'a TestCase, char)> {
        let cases = self.config.test_cases();
        let charset = self.config.charset();
        if self.case >= cases.len() {
            return None;
        }
        if self.fill_len == self.config.max_len() {
            self.fill.clear();
            self.fill_len = 0;
            self.char_idx += 1;
            if self.char_idx == charset.len() {
                self.char_idx = 0;
                self.case += 1;
                if self.case == cases.len() {
                    return None;
                }
            }
        }
        let ch = charset[self.char_idx];
        self.fill.push(ch);
        self.fill_len += 1;
        self.remaining -= 1;
        Some((&cases[self.case], ch))
    }
}

impl Iterator for Commands<'_> {
    type Item = GeneratedCommand;

    fn next(&mut self) -> Option<GeneratedCommand> {
        let (case, ch) = self.advance()?;
        Some(GeneratedCommand {
            case_index: case.index,
            ch,
            length: self.fill_len,
            rendered: case.template.render(&self.fill),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Commands<'_> {}

/// Writes the sweep as a shell script: each test case's comment lines once,
/// then one command per line. Returns the number of command lines.
pub fn emit_script<W: Write>(config: &FuzzConfig, sink: W) -> Result<u64, EmitError> {
    let mut sink = io::BufWriter::with_capacity(1 << 16, sink);
    let mut commands = generate(config);
    let mut line = String::new();
    let mut written = 0u64;
    let mut current_case = None;
    while let Some((case, _)) = commands.advance() {
        if current_case != Some(case.index) {
            current_case = Some(case.index);
            for comment in &case.comment_lines {
                sink.write_all(comment.as_bytes())?;
                sink.write_all(b"\n")?;
            }
        }
        line.clear();
        case.template.render_into(&commands.fill, &mut line);
        line.push('\n');
        sink.write_all(line.as_bytes())?;
        written += 1;
    }
    sink.flush()?;
    Ok(written)
}
