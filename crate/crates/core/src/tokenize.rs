//! Injected tokenization and character-offset conversion.

use crate::error::{Error, Result};

/// A token with its byte offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;

    fn words(&self, text: &str) -> Vec<String> {
        self.tokenize(text).into_iter().map(|t| t.text).collect()
    }
}

/// Splits on whitespace and detaches ASCII punctuation into its own tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        let flush = |out: &mut Vec<Token>, s: usize, e: usize| {
            if s < e {
                out.push(Token { text: text[s..e].to_string(), start: s, end: e });
            }
        };
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    flush(&mut out, s, i);
                }
            } else if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' {
                if let Some(s) = start.take() {
                    flush(&mut out, s, i);
                }
                flush(&mut out, i, i + ch.len_utf8());
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            flush(&mut out, s, text.len());
        }
        out
    }
}

/// Maps a character-offset span `[start, end)` onto the covering token range.
pub fn char_span_to_tokens(tokens: &[Token], start: usize, end: usize) -> Result<(usize, usize)> {
    let first = tokens.iter().position(|t| t.end > start);
    let last = tokens.iter().rposition(|t| t.start < end);
    match (first, last) {
        (Some(a), Some(b)) if a <= b => Ok((a, b + 1)),
        _ => Err(Error::InvalidArgument(format!("character span [{start}, {end}) covers no token"))),
    }
}
