//! LLM-backed open information extraction and description generation.
//!
//! Every completion goes through [`Gateway::complete`], which consults the
//! content-addressed cache before invoking the backend and retries transport
//! failures with exponential backoff.

mod backend;
mod cache;
pub mod parse;
pub mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

pub use backend::{GatewayBackend, MockBackend, UnreachableBackend};
#[cfg(feature = "http")]
pub use backend::HttpBackend;
pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use parse::DescriptionSample;

use crate::data::{canonical_text, EntitySpan, Instance, RelationId, RelationInfo};
use crate::error::{Error, Result};

/// An OIE result; a `None` trigger marks the pair as non-relational (NA).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTriplet {
    pub subject: String,
    pub relation_trigger: Option<String>,
    pub object: String,
}

impl CandidateTriplet {
    pub fn is_na(&self) -> bool {
        self.relation_trigger.is_none()
    }

    /// Bracketed form used in prompts and scripted completions.
    pub fn render(&self) -> String {
        serde_json::to_string(&(&self.subject, &self.relation_trigger, &self.object)).expect("triplet serializes")
    }
}

pub struct Gateway {
    backend: Box<dyn GatewayBackend>,
    cache: ResponseCache,
    retries: usize,
    backoff: Duration,
    backend_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Box<dyn GatewayBackend>, cache: ResponseCache) -> Self {
        Gateway { backend, cache, retries: 3, backoff: Duration::from_millis(500), backend_calls: AtomicUsize::new(0) }
    }

    /// Mock backend with an in-memory cache.
    pub fn mock(backend: MockBackend) -> Self {
        Gateway::new(Box::new(backend), ResponseCache::in_memory()).with_backoff(Duration::ZERO)
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn backend_tag(&self) -> &str {
        self.backend.tag()
    }

    /// Backend invocations made through this gateway (cache misses, retries included).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        let tag = self.backend.tag();
        if let Some(hit) = self.cache.get(tag, prompt) {
            return Ok(hit);
        }
        let mut delay = self.backoff;
        let mut attempt = 0;
        let completion = loop {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(prompt) {
                Ok(c) => break c,
                Err(e) if attempt < self.retries => {
                    warn!("backend {tag} failed (attempt {}): {e}", attempt + 1);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(Error::Gateway(format!("{tag}: {e} after {} attempts", attempt + 1))),
            }
        };
        self.cache.put(tag, prompt, &completion)?;
        Ok(completion)
    }

    /// Asks for the relation trigger between two entities of a sentence.
    ///
    /// Subject and object are always the two entity texts; the backend only
    /// decides their order. A completion that cannot be parsed after one
    /// reprompt is treated as NA.
    pub fn extract_triplet(&self, tokens: &[String], a: &EntitySpan, b: &EntitySpan) -> Result<CandidateTriplet> {
        for span in [a, b] {
            if span.start >= span.end || span.end > tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "span [{}, {}) outside sentence of {} tokens",
                    span.start,
                    span.end,
                    tokens.len()
                )));
            }
        }
        let text = canonical_text(tokens);
        let prompt = prompts::render_oie_prompt(&text, &a.text, &b.text);
        let mut parsed = parse::parse_triplet(&self.complete(&prompt)?);
        if parsed.is_none() {
            let retry = prompts::with_reprompt(&prompt, prompts::OIE_REPROMPT);
            parsed = parse::parse_triplet(&self.complete(&retry)?);
        }
        let Some((subject, trigger, _)) = parsed else {
            warn!("unparseable triplet for ({}, {}); treating as NA", a.text, b.text);
            return Ok(CandidateTriplet { subject: a.text.clone(), relation_trigger: None, object: b.text.clone() });
        };
        let (s, o) = if subject == b.text && subject != a.text { (b, a) } else { (a, b) };
        Ok(CandidateTriplet { subject: s.text.clone(), relation_trigger: trigger, object: o.text.clone() })
    }

    /// Definitions (with examples) of the trigger of a non-NA triplet.
    pub fn generate_candidate_descriptions(
        &self,
        text: &str,
        triplet: &CandidateTriplet,
        relation_name: &str,
        k_desc: usize,
    ) -> Result<Vec<DescriptionSample>> {
        let trigger = triplet.relation_trigger.as_deref().ok_or_else(|| {
            Error::Precondition(format!("triplet ({}, {}) has no relation trigger", triplet.subject, triplet.object))
        })?;
        let prompt =
            prompts::render_candidate_prompt(text, &triplet.subject, trigger, &triplet.object, relation_name, k_desc);
        let completion = self.complete(&prompt)?;
        let mut samples = parse::parse_definition_objects(&completion);
        if samples.is_empty() {
            samples = parse::parse_description_blocks(&completion);
        }
        if samples.is_empty() {
            warn!("no definitions parsed for trigger `{trigger}`; using raw completion");
            samples = fallback(&completion);
        }
        samples.truncate(k_desc);
        Ok(samples)
    }

    /// Expanded descriptions of a seen determined relation, rendered as text.
    pub fn augment_relation_description(&self, relation: &RelationInfo, k_desc: usize) -> Result<Vec<String>> {
        if relation.id.is_undetermined() {
            return Err(Error::Precondition("description augmentation does not apply to the undetermined relation".into()));
        }
        let prompt = prompts::render_augmentation_prompt(&relation.name, &relation.original_description, k_desc);
        let completion = self.complete(&prompt)?;
        let mut samples = parse::parse_description_blocks(&completion);
        if samples.is_empty() {
            let retry = prompts::with_reprompt(&prompt, prompts::DESCRIPTION_REPROMPT);
            let second = self.complete(&retry)?;
            samples = parse::parse_description_blocks(&second);
            if samples.is_empty() {
                warn!("augmentation for `{}` unparseable; using raw completion", relation.id);
                samples = fallback(&completion);
            }
        }
        samples.truncate(k_desc);
        Ok(samples.iter().map(DescriptionSample::render).collect())
    }

    /// Fills `augmented_descriptions` of every determined relation.
    pub fn augment_relations<'a>(
        &self,
        relations: impl IntoIterator<Item = &'a mut RelationInfo>,
        k_desc: usize,
    ) -> Result<()> {
        for r in relations {
            if !r.id.is_undetermined() {
                r.augmented_descriptions = self.augment_relation_description(r, k_desc)?;
            }
        }
        Ok(())
    }

    /// Candidate descriptions per relation from its training instances.
    ///
    /// Instances are visited in id order; each distinct trigger is defined once
    /// and definitions accumulate until `k_desc` are collected.
    pub fn candidate_descriptions(
        &self,
        relations: &BTreeMap<RelationId, RelationInfo>,
        train: &[Instance],
        k_desc: usize,
    ) -> Result<BTreeMap<RelationId, Vec<String>>> {
        let mut by_relation: BTreeMap<&RelationId, Vec<&Instance>> = BTreeMap::new();
        for inst in train.iter().filter(|i| i.is_determined()) {
            by_relation.entry(&inst.label).or_default().push(inst);
        }
        let mut out = BTreeMap::new();
        for (rel, mut instances) in by_relation {
            instances.sort_by(|a, b| a.id.cmp(&b.id));
            let name = relations.get(rel).map_or(rel.as_str(), |r| r.name.as_str());
            let mut triggers = BTreeSet::new();
            let mut texts = Vec::new();
            for inst in instances {
                if texts.len() >= k_desc {
                    break;
                }
                let triplet = self.extract_triplet(&inst.tokens, &inst.head, &inst.tail)?;
                let Some(trigger) = triplet.relation_trigger.clone() else { continue };
                if !triggers.insert(trigger) {
                    continue;
                }
                let samples = self.generate_candidate_descriptions(&canonical_text(&inst.tokens), &triplet, name, k_desc)?;
                texts.extend(samples.iter().map(DescriptionSample::render));
            }
            texts.truncate(k_desc);
            out.insert(rel.clone(), texts);
        }
        Ok(out)
    }
}

fn fallback(completion: &str) -> Vec<DescriptionSample> {
    let text = completion.trim();
    if text.is_empty() {
        Vec::new()
    } else {
        vec![DescriptionSample { definition: text.to_string(), examples: Vec::new() }]
    }
}

/// Completions shown alongside the prompt examples, keyed by their prompts.
pub fn reference_scripts() -> Vec<(String, String)> {
    let oie = prompts::render_oie_prompt("Elon Musk founded SpaceX in 2002.", "Elon Musk", "SpaceX");
    let oie_out = r#"["Elon Musk", "founded", "SpaceX"]"#.to_string();

    let cand = prompts::render_candidate_prompt(
        "Elon Musk founded SpaceX in 2002.",
        "Elon Musk",
        "founded",
        "SpaceX",
        "organization founder",
        2,
    );
    let cand_out = r#"Sample 1:
{
    "definition": "The relationship between a person and an organization they established.",
    "examples": [
        "Bill Gates founded Microsoft in 1975.",
        "Steve Jobs founded Apple in 1976.",
        "Mark Zuckerberg founded Facebook while studying at Harvard."
    ]
}

Sample 2:
{
    "definition": "The connection between an individual and the company or organization they initiated, often as its creator or co-founder.",
    "examples": [
        "Larry Page and Sergey Brin founded Google in 1998.",
        "Jeff Bezos founded Amazon in 1994.",
        "Jack Ma founded Alibaba in 1999."
    ]
}"#
    .to_string();

    let aug = prompts::render_augmentation_prompt(
        "headquarters location",
        "location where an organization's central administration is based.",
        2,
    );
    let aug_out = "This relation indicates the primary location where an organization, corporation, or institution's central administrative functions are managed. The headquarters serves as the main hub for decision-making, strategic planning, and coordination of business operations.
Examples:
- The headquarters of Apple Inc. is located in Cupertino, California, where key corporate decisions and product development take place.
- The United Nations Headquarters is based in New York City, serving as the central meeting place for international diplomatic activities.
- Toyota's global headquarters is situated in Toyota City, Japan, overseeing its worldwide automobile manufacturing and business operations.

This relation describes the official site of an organization's main offices, which serves as the administrative center and often houses executives and key departments.
Examples:
- Google's headquarters, known as the Googleplex, is in Mountain View, California, hosting thousands of employees working on technology and innovation.
- The European Central Bank has its headquarters in Frankfurt, Germany, where major financial policies for the Eurozone are formulated.
- The headquarters of Amazon is located in Seattle, Washington, guiding the company's global e-commerce and cloud computing strategies."
        .to_string();

    vec![(oie, oie_out), (cand, cand_out), (aug, aug_out)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpanSource;
    use crate::tokenize::{Tokenizer, WhitespaceTokenizer};

    fn reference_mock() -> MockBackend {
        let mut m = MockBackend::new();
        for (p, c) in reference_scripts() {
            m.script(p, c);
        }
        m
    }

    fn spans(tokens: &[String], a: (usize, usize), b: (usize, usize)) -> (EntitySpan, EntitySpan) {
        (
            EntitySpan::from_tokens(tokens, a.0, a.1, SpanSource::Annotated).unwrap(),
            EntitySpan::from_tokens(tokens, b.0, b.1, SpanSource::Annotated).unwrap(),
        )
    }

    #[test]
    fn extracts_prompt_example_triplets() {
        let gw = Gateway::mock(reference_mock());
        let toks = WhitespaceTokenizer.words("he passed away on saturday .");
        let (a, b) = spans(&toks, (0, 1), (4, 5));
        let t = gw.extract_triplet(&toks, &a, &b).unwrap();
        assert_eq!(t.render(), r#"["he","passed away on","saturday"]"#);

        let toks: Vec<String> = "Elon Musk founded SpaceX in 2002.".split(' ').map(String::from).collect();
        let (a, b) = spans(&toks, (0, 2), (3, 4));
        let t = gw.extract_triplet(&toks, &a, &b).unwrap();
        assert_eq!((t.subject.as_str(), t.relation_trigger.as_deref(), t.object.as_str()), ("Elon Musk", Some("founded"), "SpaceX"));
    }

    #[test]
    fn scripted_null_is_na() {
        let toks = WhitespaceTokenizer.words("Roger Niger met Spearhafoc .");
        let (a, b) = spans(&toks, (0, 2), (3, 4));
        let mut m = MockBackend::new();
        m.script(prompts::render_oie_prompt(&canonical_text(&toks), &a.text, &b.text), r#"["Roger Niger", null, "Spearhafoc"]"#);
        let t = Gateway::mock(m).extract_triplet(&toks, &a, &b).unwrap();
        assert!(t.is_na());
    }

    #[test]
    fn unparseable_triplet_reprompts_then_na() {
        let toks = WhitespaceTokenizer.words("A x B");
        let (a, b) = spans(&toks, (0, 1), (2, 3));
        let prompt = prompts::render_oie_prompt("A x B", "A", "B");
        let mut m = MockBackend::new();
        m.script(prompt.clone(), "no idea");
        m.script(prompts::with_reprompt(&prompt, prompts::OIE_REPROMPT), "still no idea");
        let gw = Gateway::mock(m);
        assert!(gw.extract_triplet(&toks, &a, &b).unwrap().is_na());
        assert_eq!(gw.backend_calls(), 2);
    }

    #[test]
    fn transport_failure_is_distinct_from_na() {
        let gw = Gateway::new(Box::new(UnreachableBackend::default()), ResponseCache::in_memory())
            .with_backoff(Duration::ZERO);
        let toks = WhitespaceTokenizer.words("A x B");
        let (a, b) = spans(&toks, (0, 1), (2, 3));
        assert!(matches!(gw.extract_triplet(&toks, &a, &b), Err(Error::Gateway(_))));
        assert_eq!(gw.backend_calls(), 4);
    }

    fn founded() -> CandidateTriplet {
        CandidateTriplet { subject: "Elon Musk".into(), relation_trigger: Some("founded".into()), object: "SpaceX".into() }
    }

    #[test]
    fn candidate_descriptions_reference_output() {
        let gw = Gateway::mock(reference_mock());
        let got = gw
            .generate_candidate_descriptions("Elon Musk founded SpaceX in 2002.", &founded(), "organization founder", 2)
            .unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].definition, "The relationship between a person and an organization they established.");
        assert_eq!(got[0].examples.len(), 3);
    }

    #[test]
    fn candidate_descriptions_truncate_and_cache() {
        let gw = Gateway::mock(MockBackend::new());
        let one = gw.generate_candidate_descriptions("t", &founded(), "organization founder", 1).unwrap();
        assert_eq!(one.len(), 1);
        let again = gw.generate_candidate_descriptions("t", &founded(), "organization founder", 1).unwrap();
        assert_eq!(one, again);
        assert_eq!(gw.backend_calls(), 1);
    }

    #[test]
    fn candidate_descriptions_need_a_trigger() {
        let gw = Gateway::mock(MockBackend::new());
        let na = CandidateTriplet { relation_trigger: None, ..founded() };
        assert!(matches!(gw.generate_candidate_descriptions("t", &na, "x", 2), Err(Error::Precondition(_))));
    }

    fn hq() -> RelationInfo {
        RelationInfo::new("P159", "headquarters location", "location where an organization's central administration is based.")
    }

    #[test]
    fn augmentation_reference_output() {
        let gw = Gateway::mock(reference_mock());
        let got = gw.augment_relation_description(&hq(), 2).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got[0].contains("central administrative functions are managed"));
        assert!(got.iter().all(|d| d.contains("\n- ")));
    }

    #[test]
    fn augmentation_malformed_retries_then_falls_back() {
        let mut m = MockBackend::new();
        let prompt = prompts::render_augmentation_prompt(&hq().name, &hq().original_description, 3);
        m.script(prompt.clone(), "Headquarters means the main office.");
        m.script(prompts::with_reprompt(&prompt, prompts::DESCRIPTION_REPROMPT), "still prose");
        let gw = Gateway::mock(m);
        let got = gw.augment_relation_description(&hq(), 3).unwrap();
        assert_eq!(got, ["Headquarters means the main office."]);
        assert_eq!(gw.backend_calls(), 2);
    }

    #[test]
    fn augmentation_rejects_ur_and_isolates_cache_keys() {
        let gw = Gateway::mock(MockBackend::new());
        assert!(matches!(gw.augment_relation_description(&RelationInfo::undetermined(), 2), Err(Error::Precondition(_))));
        let other = RelationInfo::new("P112", "founded by", "founder or co-founder of this organization.");
        let a = gw.augment_relation_description(&hq(), 2).unwrap();
        let b = gw.augment_relation_description(&other, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(gw.cache().len(), 2);
        assert_eq!(gw.augment_relation_description(&hq(), 2).unwrap(), a);
        assert_eq!(gw.backend_calls(), 2);
    }
}
