use std::collections::BTreeSet;

use crate::data::{EntitySpan, SpanSource};
use crate::error::{Error, Result};
use crate::tokenize::Tokenizer;

/// Named-entity recognizer contract: tokens in, entity spans out.
pub trait NerInterface: Send + Sync {
    fn recognize(&self, tokens: &[String]) -> Result<Vec<EntitySpan>>;
}

/// Exact token-sequence matcher over a word list.
///
/// Matching is greedy left to right, preferring the longest entry at each
/// position, so hits never overlap.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: BTreeSet<Vec<String>>,
    max_len: usize,
}

impl Gazetteer {
    pub fn new<I, S>(entries: I, tokenizer: &dyn Tokenizer) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = Gazetteer::default();
        for e in entries {
            g.insert(tokenizer.words(e.as_ref()));
        }
        g
    }

    /// Parses a newline-separated word list; blank lines and `#` comments are skipped.
    pub fn from_wordlist(text: &str, tokenizer: &dyn Tokenizer) -> Self {
        Gazetteer::new(
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')),
            tokenizer,
        )
    }

    pub fn insert(&mut self, entry: Vec<String>) {
        if !entry.is_empty() {
            self.max_len = self.max_len.max(entry.len());
            self.entries.insert(entry);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl NerInterface for Gazetteer {
    fn recognize(&self, tokens: &[String]) -> Result<Vec<EntitySpan>> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = (1..=self.max_len.min(tokens.len() - i))
                .rev()
                .find(|&len| self.entries.contains(&tokens[i..i + len]));
            match longest {
                Some(len) => {
                    spans.push(EntitySpan::from_tokens(tokens, i, i + len, SpanSource::NerExtracted)?);
                    i += len;
                }
                None => i += 1,
            }
        }
        Ok(spans)
    }
}

/// Runs `ner` and normalizes its output: in-range, non-empty, sorted by start,
/// tagged as extracted.
pub fn extract_entities(tokens: &[String], ner: &dyn NerInterface) -> Result<Vec<EntitySpan>> {
    if tokens.is_empty() {
        return Err(Error::Extraction("empty token sequence".into()));
    }
    let mut spans: Vec<EntitySpan> = ner
        .recognize(tokens)?
        .into_iter()
        .filter(|s| s.start < s.end && s.end <= tokens.len())
        .map(|s| EntitySpan::from_tokens(tokens, s.start, s.end, SpanSource::NerExtracted))
        .collect::<Result<_>>()?;
    spans.sort_by_key(|s| (s.start, s.end));
    spans.dedup_by(|a, b| a.same_range(b));
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::WhitespaceTokenizer;

    const EXAMPLE: &str = "Spearhafoc was succeeded by William the Norman and was the last Bishop of London of English descent for an extended period, likely until Roger Niger's appointment in 1228.";

    fn words(s: &str) -> Vec<String> {
        WhitespaceTokenizer.words(s)
    }

    #[test]
    fn gazetteer_finds_example_entity() {
        let g = Gazetteer::new(["Spearhafoc"], &WhitespaceTokenizer);
        let spans = extract_entities(&words(EXAMPLE), &g).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text, "Spearhafoc");
        assert_eq!(spans[0].range(), (0, 1));
        assert_eq!(spans[0].source, SpanSource::NerExtracted);
    }

    #[test]
    fn empty_gazetteer_finds_nothing() {
        let g = Gazetteer::default();
        assert!(extract_entities(&words(EXAMPLE), &g).unwrap().is_empty());
    }

    #[test]
    fn two_disjoint_hits_match_brute_force_scan() {
        let entries = ["Bishop of London", "William the Norman", "London"];
        let g = Gazetteer::new(entries, &WhitespaceTokenizer);
        let toks = words(EXAMPLE);
        let spans = extract_entities(&toks, &g).unwrap();

        // every substring that is an entry, then keep maximal non-nested ones
        let entry_words: Vec<Vec<String>> = entries.iter().map(|e| words(e)).collect();
        let mut brute = Vec::new();
        for s in 0..toks.len() {
            for e in s + 1..=toks.len() {
                if entry_words.contains(&toks[s..e].to_vec()) {
                    brute.push((s, e));
                }
            }
        }
        let maximal: Vec<(usize, usize)> = brute
            .iter()
            .copied()
            .filter(|&(s, e)| !brute.iter().any(|&(s2, e2)| (s2, e2) != (s, e) && s2 <= s && e <= e2))
            .collect();
        let got: Vec<(usize, usize)> = spans.iter().map(EntitySpan::range).collect();
        assert_eq!(got, maximal);
        assert_eq!(got.len(), 2);
        assert!(got[0].1 <= got[1].0);
    }

    #[test]
    fn empty_tokens_is_an_extraction_error() {
        let g = Gazetteer::default();
        assert!(matches!(extract_entities(&[], &g), Err(Error::Extraction(_))));
    }
}
