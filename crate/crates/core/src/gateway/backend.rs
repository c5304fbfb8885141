//! Completion backends: a scripted offline mock and an optional HTTP client.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::parse::DescriptionSample;
use super::prompts::{AUGMENT_HEADER, CANDIDATE_HEADER, OIE_HEADER};
use crate::error::{Error, Result};

/// Prompt in, completion out. `tag` identifies the backend in cache keys.
pub trait GatewayBackend: Send + Sync {
    fn tag(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Deterministic backend: exact-prompt scripts first, then rule-based
/// generators keyed on the prompt family.
///
/// The rules are pure functions of the prompt:
/// - triplet extraction returns the words between the two entities as the
///   trigger (null when they are adjacent, missing or more than six words apart);
/// - candidate and augmentation prompts return the requested number of
///   definitions built from the slots in the prompt.
#[derive(Debug, Default)]
pub struct MockBackend {
    scripts: HashMap<String, String>,
    calls: AtomicUsize,
}

const MAX_TRIGGER_WORDS: usize = 6;

impl MockBackend {
    pub fn new() -> Self {
        MockBackend::default()
    }

    pub fn script(&mut self, prompt: impl Into<String>, completion: impl Into<String>) {
        self.scripts.insert(prompt.into(), completion.into());
    }

    /// Invocations of `complete` so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn rule(&self, prompt: &str) -> String {
        if prompt.starts_with(OIE_HEADER) {
            oie_rule(prompt)
        } else if prompt.starts_with(CANDIDATE_HEADER) {
            candidate_rule(prompt)
        } else if prompt.starts_with(AUGMENT_HEADER) {
            augment_rule(prompt)
        } else {
            String::new()
        }
    }
}

impl GatewayBackend for MockBackend {
    fn tag(&self) -> &str {
        "mock"
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.scripts.get(prompt).cloned().unwrap_or_else(|| self.rule(prompt)))
    }
}

/// Value of the last line starting with `prefix`.
fn last_line_value<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix(prefix)).map(str::trim)
}

/// Splits `"a", "b", "c"` (JSON strings) into owned values.
fn json_strings(s: &str) -> Vec<String> {
    serde_json::from_str::<Vec<String>>(&format!("[{s}]")).unwrap_or_default()
}

fn requested_count(prompt: &str, before: &str, after: &str) -> usize {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(before).and_then(|r| r.split_once(after)).map(|(n, _)| n.trim().to_string()))
        .and_then(|n| n.parse().ok())
        .unwrap_or(1)
}

fn oie_rule(prompt: &str) -> String {
    let text = last_line_value(prompt, "Text:").map(json_strings).and_then(|v| v.into_iter().next());
    let pair = last_line_value(prompt, "Subject, Object (not ordered):").map(json_strings);
    let (Some(text), Some(pair)) = (text, pair) else {
        return "[]".into();
    };
    if pair.len() != 2 {
        return "[]".into();
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    let locate = |entity: &str| {
        let e: Vec<&str> = entity.split_whitespace().collect();
        (!e.is_empty())
            .then(|| words.windows(e.len()).position(|w| w == e.as_slice()).map(|p| (p, p + e.len())))
            .flatten()
    };
    let render = |s: &str, r: Option<&str>, o: &str| {
        serde_json::to_string(&(s, r, o)).expect("triplet serializes")
    };
    match (locate(&pair[0]), locate(&pair[1])) {
        (Some(a), Some(b)) => {
            let ((first, fa), (second, fb)) = if a.0 <= b.0 { ((&pair[0], a), (&pair[1], b)) } else { ((&pair[1], b), (&pair[0], a)) };
            let between = if fa.1 <= fb.0 { &words[fa.1..fb.0] } else { &[][..] };
            let trigger = (!between.is_empty() && between.len() <= MAX_TRIGGER_WORDS).then(|| between.join(" "));
            render(first, trigger.as_deref(), second)
        }
        _ => render(&pair[0], None, &pair[1]),
    }
}

fn candidate_rule(prompt: &str) -> String {
    let k = requested_count(prompt, "You must generate ", " diverse samples");
    let triplet = last_line_value(prompt, "Triplet:")
        .map(|t| json_strings(t.trim_start_matches('[').trim_end_matches(']')))
        .unwrap_or_default();
    let relation_type = last_line_value(prompt, "Relation type:")
        .and_then(|t| json_strings(t).into_iter().next())
        .unwrap_or_default();
    let [s, r, o] = <[String; 3]>::try_from(triplet).unwrap_or_default();
    let templates = [
        format!("The relationship expressed by \"{r}\" that holds for {relation_type}."),
        format!("A {relation_type} connection in which the subject {r} the object."),
        format!("The link signalled by the phrase \"{r}\" between two entities of a {relation_type} pair."),
        format!("An association where one entity {r} another, typical of {relation_type}."),
        format!("The {relation_type} relationship stated through \"{r}\"."),
    ];
    (0..k)
        .map(|i| {
            let sample = DescriptionSample {
                definition: templates[i % templates.len()].clone(),
                examples: vec![format!("{s} {r} {o}."), format!("It is known that {s} {r} {o}.")],
            };
            let body = serde_json::to_string_pretty(&sample).expect("sample serializes");
            format!("Sample {}:\n{body}", i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn augment_rule(prompt: &str) -> String {
    let k = requested_count(prompt, "Please provide ", " distinct");
    let relation = last_line_value(prompt, "The relation is:").unwrap_or_default();
    let description = last_line_value(prompt, "The description is:").unwrap_or_default();
    let description = description.trim_end_matches('.');
    let leads = [
        "This relation indicates",
        "This relation describes",
        "This relation captures",
        "This relation expresses",
        "This relation denotes",
    ];
    (0..k)
        .map(|i| {
            format!(
                "{} {description}, as used for {relation}.\nExamples:\n- In one report, {description}.\n- A second sentence where {description} holds.",
                leads[i % leads.len()]
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Always fails with a transport error; counts attempts.
#[derive(Debug, Default)]
pub struct UnreachableBackend {
    attempts: AtomicUsize,
}

impl UnreachableBackend {
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl GatewayBackend for UnreachableBackend {
    fn tag(&self) -> &str {
        "unreachable"
    }

    fn complete(&self, _prompt: &str) -> Result<String> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(Error::Gateway("connection refused".into()))
    }
}

#[cfg(feature = "http")]
pub use http::HttpBackend;

#[cfg(feature = "http")]
mod http {
    use super::GatewayBackend;
    use crate::error::{Error, Result};

    /// OpenAI-compatible chat-completion client.
    pub struct HttpBackend {
        client: reqwest::blocking::Client,
        endpoint: String,
        model: String,
        api_key: String,
        tag: String,
    }

    impl HttpBackend {
        /// Reads the API key from the environment variable `key_var`.
        pub fn from_env(endpoint: &str, model: &str, key_var: &str) -> Result<Self> {
            let api_key = std::env::var(key_var)
                .map_err(|_| Error::Config(format!("environment variable {key_var} is not set")))?;
            Ok(HttpBackend {
                client: reqwest::blocking::Client::new(),
                endpoint: endpoint.trim_end_matches('/').to_string(),
                model: model.to_string(),
                api_key,
                tag: format!("http:{model}"),
            })
        }
    }

    impl GatewayBackend for HttpBackend {
        fn tag(&self) -> &str {
            &self.tag
        }

        fn complete(&self, prompt: &str) -> Result<String> {
            let body = serde_json::json!({
                "model": self.model,
                "temperature": 0,
                "messages": [{"role": "user", "content": prompt}],
            });
            let resp = self
                .client
                .post(format!("{}/chat/completions", self.endpoint))
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
                .map_err(|e| Error::Gateway(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(Error::Gateway(format!("HTTP {}", resp.status())));
            }
            let v: serde_json::Value = resp.json().map_err(|e| Error::Gateway(e.to_string()))?;
            v["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Gateway("response without message content".into()))
        }
    }
}
