//! Cloze-style templates: `x v[0:n0] e_h v[n0:n1] MASK v[n1:n2] e_t v[n2:n3]`.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Instance;
use crate::error::{Error, Result};

/// Cumulative soft-prompt boundaries and the sequence budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub boundaries: [usize; 4],
    pub max_seq_len: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { boundaries: [3, 6, 9, 12], max_seq_len: 256 }
    }
}

impl PromptConfig {
    pub fn from_experiment(c: &ExperimentConfig) -> Self {
        PromptConfig { boundaries: [c.prompt_n0, c.prompt_n1, c.prompt_n2, c.prompt_n3], max_seq_len: c.max_seq_len }
    }

    pub fn num_prompts(&self) -> usize {
        self.boundaries[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundaries.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!("prompt boundaries must be non-decreasing, got {:?}", self.boundaries)));
        }
        Ok(())
    }

    fn range(&self, group: usize) -> std::ops::Range<usize> {
        let lo = if group == 0 { 0 } else { self.boundaries[group - 1] };
        lo..self.boundaries[group]
    }
}

/// Which pooled group a template position feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    /// Sentence tokens outside the stretch between the two entities.
    Context,
    /// Sentence tokens strictly between head and tail.
    Between,
    Head,
    Tail,
    Prompt(u8),
    Mask,
}

pub const NUM_SEGMENTS: usize = 9;

impl Segment {
    pub fn is_entity(self) -> bool {
        matches!(self, Segment::Head | Segment::Tail)
    }

    pub fn index(self) -> usize {
        match self {
            Segment::Context => 0,
            Segment::Between => 1,
            Segment::Head => 2,
            Segment::Tail => 3,
            Segment::Prompt(g) => 4 + g as usize,
            Segment::Mask => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Word(String),
    /// Soft-prompt token `v_i`.
    Prompt(usize),
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub kind: SlotKind,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSequence {
    pub slots: Vec<Slot>,
    pub mask_index: usize,
    /// Leading slots holding sentence tokens.
    pub sentence_len: usize,
    /// Sentence tokens were dropped from the right to fit the budget.
    pub truncated: bool,
}

impl TemplateSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Human-readable rendering: words verbatim, `[v3]`, `[MASK]`.
    pub fn render(&self) -> Vec<String> {
        self.slots
            .iter()
            .map(|s| match &s.kind {
                SlotKind::Word(w) => w.clone(),
                SlotKind::Prompt(i) => format!("[v{i}]"),
                SlotKind::Mask => "[MASK]".into(),
            })
            .collect()
    }
}

fn words(tokens: &[String], segment: Segment) -> impl Iterator<Item = Slot> + '_ {
    tokens.iter().map(move |t| Slot { kind: SlotKind::Word(t.clone()), segment })
}

fn prompts(cfg: &PromptConfig, group: usize) -> impl Iterator<Item = Slot> {
    cfg.range(group).map(move |i| Slot { kind: SlotKind::Prompt(i), segment: Segment::Prompt(group as u8) })
}

fn assemble(
    sentence: Vec<Slot>,
    head: &[String],
    tail: &[String],
    cfg: &PromptConfig,
    truncated: bool,
) -> TemplateSequence {
    let sentence_len = sentence.len();
    let mut slots = sentence;
    slots.extend(prompts(cfg, 0));
    slots.extend(words(head, Segment::Head));
    slots.extend(prompts(cfg, 1));
    let mask_index = slots.len();
    slots.push(Slot { kind: SlotKind::Mask, segment: Segment::Mask });
    slots.extend(prompts(cfg, 2));
    slots.extend(words(tail, Segment::Tail));
    slots.extend(prompts(cfg, 3));
    TemplateSequence { slots, mask_index, sentence_len, truncated }
}

/// Sentence budget left after the fixed template tail, or an error if the
/// tail alone does not fit.
fn sentence_budget(fixed: usize, cfg: &PromptConfig) -> Result<usize> {
    cfg.max_seq_len.checked_sub(fixed).ok_or_else(|| {
        Error::InvalidArgument(format!("template tail of {fixed} slots exceeds max_seq_len {}", cfg.max_seq_len))
    })
}

pub fn build_template(inst: &Instance, cfg: &PromptConfig) -> Result<TemplateSequence> {
    let head = &inst.tokens[inst.head.start..inst.head.end];
    let tail = &inst.tokens[inst.tail.start..inst.tail.end];
    let budget = sentence_budget(head.len() + tail.len() + cfg.num_prompts() + 1, cfg)?;
    let (lo, hi) = if inst.head.start <= inst.tail.start {
        (inst.head.end, inst.tail.start)
    } else {
        (inst.tail.end, inst.head.start)
    };
    let keep = inst.tokens.len().min(budget);
    let sentence = inst.tokens[..keep]
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let segment = if inst.head.contains(i) {
                Segment::Head
            } else if inst.tail.contains(i) {
                Segment::Tail
            } else if i >= lo && i < hi {
                Segment::Between
            } else {
                Segment::Context
            };
            Slot { kind: SlotKind::Word(t.clone()), segment }
        })
        .collect();
    Ok(assemble(sentence, head, tail, cfg, keep < inst.tokens.len()))
}

/// Description wrapper: the description words take the sentence position and
/// both entity slots are empty, leaving a single MASK summary slot.
pub fn build_description_template(tokens: &[String], cfg: &PromptConfig) -> Result<TemplateSequence> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty description".into()));
    }
    let budget = sentence_budget(cfg.num_prompts() + 1, cfg)?;
    let keep = tokens.len().min(budget);
    Ok(assemble(words(&tokens[..keep], Segment::Context).collect(), &[], &[], cfg, keep < tokens.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EntitySpan, InstanceKind, Origin, RelationId, SpanSource};
    use proptest::prelude::*;

    fn inst(tokens: &[&str], h: (usize, usize), t: (usize, usize)) -> Instance {
        let tokens: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        Instance {
            id: "s/0".into(),
            head: EntitySpan::from_tokens(&tokens, h.0, h.1, SpanSource::Annotated).unwrap(),
            tail: EntitySpan::from_tokens(&tokens, t.0, t.1, SpanSource::Annotated).unwrap(),
            tokens,
            label: RelationId::new("r"),
            kind: InstanceKind::Determined,
            origin: Origin::OriginalAnnotation,
        }
    }

    #[test]
    fn default_layout() {
        let t = build_template(&inst(&["t1", "t2", "t3", "t4"], (1, 2), (3, 4)), &PromptConfig::default()).unwrap();
        let expected = "t1 t2 t3 t4 [v0] [v1] [v2] t2 [v3] [v4] [v5] [MASK] [v6] [v7] [v8] t4 [v9] [v10] [v11]";
        assert_eq!(t.render().join(" "), expected);
        assert_eq!(t.mask_index, 11);
        assert!(!t.truncated);
        assert_eq!(t.sentence_len, 4);
        assert_eq!(t.slots[0].segment, Segment::Context);
        assert_eq!(t.slots[1].segment, Segment::Head);
        assert_eq!(t.slots[2].segment, Segment::Between);
        assert_eq!(t.slots[3].segment, Segment::Tail);
    }

    #[test]
    fn no_prompts() {
        let cfg = PromptConfig { boundaries: [0; 4], max_seq_len: 256 };
        let t = build_template(&inst(&["a", "b", "c"], (0, 1), (2, 3)), &cfg).unwrap();
        assert_eq!(t.render().join(" "), "a b c a [MASK] c");
    }

    #[test]
    fn pair_specific_same_prefix() {
        let cfg = PromptConfig::default();
        let a = build_template(&inst(&["a", "b", "c"], (0, 1), (2, 3)), &cfg).unwrap();
        let b = build_template(&inst(&["a", "b", "c"], (0, 1), (1, 2)), &cfg).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.render()[..3], b.render()[..3]);
    }

    #[test]
    fn truncates_sentence_only() {
        let cfg = PromptConfig { boundaries: [1, 2, 3, 4], max_seq_len: 9 };
        let t = build_template(&inst(&["a", "b", "c", "d", "e", "f"], (0, 1), (5, 6)), &cfg).unwrap();
        assert!(t.truncated);
        assert_eq!(t.len(), 9);
        assert_eq!(t.render().join(" "), "a b [v0] a [v1] [MASK] [v2] f [v3]");

        let tight = PromptConfig { boundaries: [1, 2, 3, 4], max_seq_len: 6 };
        assert!(build_template(&inst(&["a", "b"], (0, 1), (1, 2)), &tight).is_err());
    }

    #[test]
    fn description_wrapper() {
        let cfg = PromptConfig { boundaries: [1, 1, 2, 2], max_seq_len: 256 };
        let toks: Vec<String> = ["born", "in"].iter().map(|s| s.to_string()).collect();
        let t = build_description_template(&toks, &cfg).unwrap();
        assert_eq!(t.render().join(" "), "born in [v0] [MASK] [v1]");
        assert!(build_description_template(&[], &cfg).is_err());
    }

    proptest! {
        #[test]
        fn single_mask_and_ordered_layout(
            len in 2usize..30,
            a in 0usize..30, al in 1usize..4,
            b in 0usize..30, bl in 1usize..4,
            n in proptest::array::uniform4(0usize..5),
            max in 10usize..60,
        ) {
            let mut bounds = n;
            for i in 1..4 { bounds[i] += bounds[i - 1]; }
            let cfg = PromptConfig { boundaries: bounds, max_seq_len: max };
            let toks: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
            let (hs, he) = (a % len, (a % len + al).min(len));
            let (ts, te) = (b % len, (b % len + bl).min(len));
            prop_assume!(he <= ts || te <= hs);
            let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
            let Ok(t) = build_template(&inst(&refs, (hs, he), (ts, te)), &cfg) else {
                prop_assert!(he - hs + te - ts + bounds[3] + 1 > max);
                return Ok(());
            };
            prop_assert!(t.len() <= max);
            prop_assert_eq!(t.slots.iter().filter(|s| s.kind == SlotKind::Mask).count(), 1);
            prop_assert_eq!(&t.slots[t.mask_index].kind, &SlotKind::Mask);
            prop_assert!(t.slots[..t.sentence_len].iter().all(|s| matches!(s.kind, SlotKind::Word(_))));
            let order: Vec<usize> = t.slots.iter().enumerate().map(|(i, s)| match s.segment {
                _ if i < t.sentence_len => 0,
                Segment::Prompt(0) => 1,
                Segment::Head => 2,
                Segment::Prompt(1) => 3,
                Segment::Mask => 4,
                Segment::Prompt(2) => 5,
                Segment::Tail => 6,
                _ => 7,
            }).collect();
            prop_assert!(order.windows(2).all(|w| w[0] <= w[1]));
            let prompts: Vec<usize> = t.slots.iter().filter_map(|s| match s.kind { SlotKind::Prompt(i) => Some(i), _ => None }).collect();
            prop_assert_eq!(prompts, (0..bounds[3]).collect::<Vec<_>>());
        }
    }
}
