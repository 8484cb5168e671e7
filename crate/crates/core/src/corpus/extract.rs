//! Brace-matching function extractor for C and C++.
//!
//! Not a parser. The scanner blanks out comments, string/char literals and
//! preprocessor lines, then walks the remaining text tracking brace depth.
//! A `{` opened at file scope (or inside a namespace, `extern "C"`, class or
//! struct body) whose preceding declaration looks like `name(...)` starts a
//! function; its matching `}` ends it. Bodies nested inside a function are
//! never reported separately.

use super::Language;
use crate::diag::{Diagnostic, DiagnosticKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSpan {
    pub name: String,
    /// 1-based, inclusive.
    pub start_line: usize,
    /// 1-based, inclusive.
    pub end_line: usize,
    pub body: String,
}

impl FunctionSpan {
    pub fn contains_line(&self, line: usize) -> bool {
        (self.start_line..=self.end_line).contains(&line)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub spans: Vec<FunctionSpan>,
    pub diagnostics: Vec<Diagnostic>,
}

const NOT_A_FUNCTION_NAME: &[&str] = &[
    "if", "for", "while", "switch", "return", "sizeof", "catch", "do", "else", "case",
];
const ATTRIBUTE_WORDS: &[&str] = &[
    "__attribute__",
    "__attribute",
    "__declspec",
    "alignas",
    "_Alignas",
    "__asm__",
    "asm",
];
const SCOPE_WORDS: &[&str] = &["namespace", "extern", "class", "struct", "union", "inline"];

/// Replaces comments, literals and preprocessor directives with spaces,
/// keeping newlines so character positions still map to source lines.
fn blank_noise(src: &[char], language: Language) -> Vec<char> {
    let mut out = src.to_vec();
    let n = src.len();
    let blank = |out: &mut [char], from: usize, to: usize| {
        for c in &mut out[from..to.min(n)] {
            if *c != '\n' {
                *c = ' ';
            }
        }
    };
    let mut i = 0;
    let mut line_has_code = false;
    while i < n {
        let c = src[i];
        let next = src.get(i + 1).copied();
        match c {
            '\n' => {
                line_has_code = false;
                i += 1;
            }
            '/' if next == Some('/') => {
                let end = src[i..].iter().position(|&c| c == '\n').map_or(n, |p| i + p);
                blank(&mut out, i, end);
                i = end;
            }
            '/' if next == Some('*') => {
                let mut j = i + 2;
                while j < n && !(src[j] == '*' && src.get(j + 1) == Some(&'/')) {
                    j += 1;
                }
                let end = (j + 2).min(n);
                blank(&mut out, i, end);
                i = end;
            }
            '#' if !line_has_code => {
                // directive runs to the first newline not escaped by a backslash
                let mut j = i;
                while j < n {
                    if src[j] == '\n' && (j == 0 || src[j - 1] != '\\') {
                        break;
                    }
                    j += 1;
                }
                blank(&mut out, i, j);
                i = j;
            }
            '"' => {
                let raw = language == Language::Cpp && i > 0 && src[i - 1] == 'R';
                let end = if raw {
                    raw_string_end(src, i)
                } else {
                    quoted_end(src, i, '"')
                };
                blank(&mut out, i, end);
                line_has_code = true;
                i = end;
            }
            '\'' => {
                let digit_separator = language == Language::Cpp
                    && i > 0
                    && src[i - 1].is_ascii_hexdigit()
                    && next.is_some_and(|c| c.is_ascii_hexdigit());
                if digit_separator {
                    i += 1;
                } else {
                    let end = quoted_end(src, i, '\'');
                    blank(&mut out, i, end);
                    i = end;
                }
                line_has_code = true;
            }
            c => {
                if !c.is_whitespace() {
                    line_has_code = true;
                }
                i += 1;
            }
        }
    }
    out
}

/// Index one past the closing quote; unterminated literals stop at the newline.
fn quoted_end(src: &[char], open: usize, quote: char) -> usize {
    let mut j = open + 1;
    while j < src.len() {
        match src[j] {
            '\\' => j += 2,
            '\n' => return j,
            c if c == quote => return j + 1,
            _ => j += 1,
        }
    }
    src.len()
}

/// `R"delim( ... )delim"`
fn raw_string_end(src: &[char], open: usize) -> usize {
    let Some(paren) = src[open + 1..].iter().position(|&c| c == '(') else {
        return quoted_end(src, open, '"');
    };
    let delim: String = src[open + 1..open + 1 + paren].iter().collect();
    if delim.len() > 16 || delim.contains(|c: char| c.is_whitespace() || c == ')' || c == '\\') {
        return quoted_end(src, open, '"');
    }
    let closing: Vec<char> = format!("){delim}\"").chars().collect();
    let body_start = open + 1 + paren + 1;
    let mut j = body_start;
    while j + closing.len() <= src.len() {
        if src[j..j + closing.len()] == closing[..] {
            return j + closing.len();
        }
        j += 1;
    }
    src.len()
}

enum Block {
    Function(String),
    Scope,
    Other,
}

fn matching(text: &[char], open: usize, open_c: char, close_c: char) -> Option<usize> {
    let mut depth = 0usize;
    for (j, &c) in text.iter().enumerate().skip(open) {
        if c == open_c {
            depth += 1;
        } else if c == close_c {
            depth -= 1;
            if depth == 0 {
                return Some(j);
            }
        }
    }
    None
}

fn token_before(header: &[char], paren: usize) -> String {
    let mut end = paren;
    while end > 0 && header[end - 1].is_whitespace() {
        end -= 1;
    }
    let mut start = end;
    while start > 0 {
        let c = header[start - 1];
        if c.is_alphanumeric() || c == '_' || c == ':' || c == '~' {
            start -= 1;
        } else {
            break;
        }
    }
    if start == end {
        // operator overloads: take the whole whitespace-delimited token
        while start > 0 && !header[start - 1].is_whitespace() {
            start -= 1;
        }
    }
    let token: String = header[start..end].iter().collect();
    token.trim_start_matches(['*', '&']).to_string()
}

fn first_word(header: &str) -> &str {
    let header = header.trim_start();
    let end = header
        .find(|c: char| !(c.is_alphanumeric() || c == '_'))
        .unwrap_or(header.len());
    &header[..end]
}

fn strip_template_prefix(header: &str) -> &str {
    let trimmed = header.trim_start();
    if let Some(rest) = trimmed.strip_prefix("template") {
        let rest = rest.trim_start();
        if rest.starts_with('<') {
            let mut depth = 0i32;
            for (i, c) in rest.char_indices() {
                match c {
                    '<' => depth += 1,
                    '>' => {
                        depth -= 1;
                        if depth == 0 {
                            return &rest[i + 1..];
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    trimmed
}

fn classify(header: &[char]) -> Block {
    let text: String = header.iter().collect();
    let header: Vec<char> = strip_template_prefix(&text).chars().collect();
    let header = &header[..];
    let mut depth = 0i32;
    let mut saw_assign = false;
    let mut i = 0;
    while i < header.len() {
        let c = header[i];
        match c {
            '(' if depth == 0 => {
                let name = token_before(header, i);
                let Some(close) = matching(header, i, '(', ')') else {
                    return Block::Other;
                };
                if ATTRIBUTE_WORDS.contains(&name.as_str()) {
                    i = close + 1;
                    continue;
                }
                if name.is_empty()
                    || NOT_A_FUNCTION_NAME.contains(&name.as_str())
                    || (saw_assign && !name.contains("operator"))
                {
                    return Block::Other;
                }
                return Block::Function(name);
            }
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            '=' if depth <= 0 => saw_assign = true,
            _ => {}
        }
        i += 1;
    }
    let word = first_word(strip_template_prefix(&text));
    if !saw_assign && SCOPE_WORDS.contains(&word) {
        Block::Scope
    } else {
        Block::Other
    }
}

/// Finds top-level function definitions in C or C++ source.
///
/// Never fails: unbalanced braces end the scan and are reported as a
/// diagnostic alongside the spans found up to that point.
pub fn extract_functions(source: &str, language: Language) -> Extraction {
    let chars: Vec<char> = source.chars().collect();
    let clean = blank_noise(&chars, language);
    let mut line_of = Vec::with_capacity(clean.len());
    let mut line = 1usize;
    for &c in &chars {
        line_of.push(line);
        if c == '\n' {
            line += 1;
        }
    }
    let source_lines: Vec<&str> = source.split('\n').collect();

    let mut result = Extraction::default();
    let mut scope_depth = 0usize;
    let mut header_start: Option<usize> = None;
    let mut i = 0;
    while i < clean.len() {
        let c = clean[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        match c {
            ';' => header_start = None,
            ':' if clean.get(i + 1) != Some(&':')
                && (i == 0 || clean[i - 1] != ':')
                && header_start.is_some_and(|s| {
                    let word: String = clean[s..i].iter().collect();
                    matches!(word.trim(), "public" | "private" | "protected")
                }) =>
            {
                header_start = None;
            }
            '}' => {
                if scope_depth == 0 {
                    result.diagnostics.push(Diagnostic::new(
                        DiagnosticKind::UnbalancedBraces,
                        format!("unmatched '}}' on line {}", line_of[i]),
                    ));
                } else {
                    scope_depth -= 1;
                }
                header_start = None;
            }
            '{' => {
                let start = header_start.unwrap_or(i);
                let block = classify(&clean[start..i]);
                header_start = None;
                if let Block::Scope = block {
                    scope_depth += 1;
                    i += 1;
                    continue;
                }
                let Some(close) = matching(&clean, i, '{', '}') else {
                    result.diagnostics.push(Diagnostic::new(
                        DiagnosticKind::UnbalancedBraces,
                        format!("'{{' on line {} is never closed", line_of[i]),
                    ));
                    return result;
                };
                if let Block::Function(name) = block {
                    let start_line = line_of[start];
                    let end_line = line_of[close];
                    match result.spans.last() {
                        Some(prev) if prev.end_line >= start_line => {
                            result.diagnostics.push(Diagnostic::new(
                                DiagnosticKind::OverlappingSpan,
                                format!(
                                    "function {name} on line {start_line} shares a line with {}",
                                    prev.name
                                ),
                            ));
                        }
                        _ => result.spans.push(FunctionSpan {
                            name,
                            start_line,
                            end_line,
                            body: source_lines[start_line - 1..end_line].join("\n"),
                        }),
                    }
                }
                i = close + 1;
                continue;
            }
            _ => {
                if header_start.is_none() {
                    header_start = Some(i);
                }
            }
        }
        i += 1;
    }
    if scope_depth > 0 {
        result.diagnostics.push(Diagnostic::new(
            DiagnosticKind::UnbalancedBraces,
            format!("{scope_depth} scope block(s) not closed at end of file"),
        ));
    }
    result
}
