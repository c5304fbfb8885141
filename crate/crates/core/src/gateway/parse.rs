//! Tolerant parsers for LLM completions.

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A parsed `[subject, trigger, object]`; `None` trigger means no relation.
pub type RawTriplet = (String, Option<String>, String);

/// A definition with its example sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionSample {
    pub definition: String,
    #[serde(default)]
    pub examples: Vec<String>,
}

impl DescriptionSample {
    /// Flattened text used for embedding and storage.
    pub fn render(&self) -> String {
        let mut s = self.definition.trim().to_string();
        if !self.examples.is_empty() {
            s.push_str("\nExamples:");
            for e in &self.examples {
                s.push_str("\n- ");
                s.push_str(e.trim());
            }
        }
        s
    }
}

fn strip_quotes(s: &str) -> &str {
    s.trim().trim_matches(|c| matches!(c, '"' | '\'' | '\u{201c}' | '\u{201d}' | '`')).trim()
}

fn null_like(s: &str) -> bool {
    let s = strip_quotes(s);
    s.is_empty() || s.eq_ignore_ascii_case("null") || s.eq_ignore_ascii_case("none")
}

/// Parses the first bracketed triplet in `completion`.
///
/// JSON is tried first; otherwise the bracket body is split at its first and
/// last comma and each part is unquoted.
pub fn parse_triplet(completion: &str) -> Option<RawTriplet> {
    let open = completion.find('[')?;
    let close = open + completion[open..].find(']')?;
    let body = &completion[open..=close];
    if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(body) {
        if items.len() == 3 {
            let text = |v: &Value| match v {
                Value::String(s) => Some(s.trim().to_string()),
                Value::Null => None,
                other => Some(other.to_string()),
            };
            let subject = text(&items[0])?;
            let object = text(&items[2])?;
            let trigger = text(&items[1]).filter(|t| !null_like(t));
            return Some((subject, trigger, object));
        }
        return None;
    }
    let inner = &body[1..body.len() - 1];
    let first = inner.find(',')?;
    let last = inner.rfind(',')?;
    if first == last {
        return None;
    }
    let subject = strip_quotes(&inner[..first]).to_string();
    let middle = &inner[first + 1..last];
    let object = strip_quotes(&inner[last + 1..]).to_string();
    if subject.is_empty() || object.is_empty() {
        return None;
    }
    let trigger = (!null_like(middle)).then(|| strip_quotes(middle).to_string());
    Some((subject, trigger, object))
}

/// Extracts every `{"definition": ..., "examples": [...]}` object.
pub fn parse_definition_objects(completion: &str) -> Vec<DescriptionSample> {
    let mut out = Vec::new();
    let bytes = completion.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut end = None;
        for (j, &c) in bytes.iter().enumerate().skip(i) {
            if in_str {
                match c {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match c {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(j);
                        break;
                    }
                }
                _ => {}
            }
        }
        let Some(end) = end else { break };
        if let Ok(sample) = serde_json::from_str::<DescriptionSample>(&completion[i..=end]) {
            if !sample.definition.trim().is_empty() {
                out.push(sample);
            }
        }
        i = end + 1;
    }
    out
}

/// Parses the paragraph form: a description line (or lines), an `Examples:`
/// line and `- ` bulleted examples, repeated. Blocks without examples are
/// dropped.
pub fn parse_description_blocks(completion: &str) -> Vec<DescriptionSample> {
    let mut out = Vec::new();
    let mut current: Option<DescriptionSample> = None;
    for line in completion.lines().map(str::trim) {
        if line.is_empty() || line.eq_ignore_ascii_case("examples:") {
            continue;
        }
        if let Some(example) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) {
            if let Some(c) = current.as_mut() {
                c.examples.push(example.trim().to_string());
            }
            continue;
        }
        match current.as_mut() {
            Some(c) if c.examples.is_empty() => {
                c.definition.push(' ');
                c.definition.push_str(line);
            }
            _ => {
                if let Some(done) = current.take() {
                    out.push(done);
                }
                current = Some(DescriptionSample { definition: line.to_string(), examples: Vec::new() });
            }
        }
    }
    out.extend(current);
    out.retain(|s| !s.examples.is_empty());
    out
}
