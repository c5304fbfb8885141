//! Toy encoder with hand-written gradients.
//!
//! Every template position contributes an input vector (hashed word
//! embedding, soft prompt or the mask embedding). Positions are mean-pooled
//! per [`Segment`] (words between the entities count towards both the
//! between and the context pool; entity mentions are skipped when
//! `mask_entities` is set), mixed into a hidden state at the mask slot
//!
//! ```text
//! h = tanh(Σ_g A_g · mean_g + b0)
//! z = P2 · tanh(P1 · h + c1) + c2
//! ```
//!
//! and `z` is the representation used by the losses and the classifier.
//! All parameters live in one flat vector so optimizers and checkpoints see a
//! single tensor.

use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::template::{build_description_template, PromptConfig, Segment, SlotKind, TemplateSequence, NUM_SEGMENTS};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tokenize::{Tokenizer, WhitespaceTokenizer};

pub const CHECKPOINT_FORMAT: &str = "ofcre-toy-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Raw,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub vocab_size: usize,
    pub prompts: PromptConfig,
    pub tau: f64,
    pub single_w: bool,
    /// Skip entity-mention words (head/tail segments) in the forward pass.
    #[serde(default = "yes")]
    pub mask_entities: bool,
}

fn yes() -> bool {
    true
}

impl EncoderConfig {
    pub fn from_experiment(c: &ExperimentConfig) -> Self {
        EncoderConfig {
            dim: c.hidden_dim,
            vocab_size: c.vocab_size,
            prompts: PromptConfig::from_experiment(c),
            tau: c.tau,
            single_w: c.single_w,
            mask_entities: c.mask_entities,
        }
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    dim: usize,
    pub embeddings: usize,
    pub prompts: usize,
    pub mask: usize,
    pub mixers: usize,
    pub b0: usize,
    pub p1: usize,
    pub c1: usize,
    pub p2: usize,
    pub c2: usize,
    pub w_raw: usize,
    pub w_cand: usize,
    pub total: usize,
}

impl Layout {
    fn new(c: &EncoderConfig) -> Self {
        let d = c.dim;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let embeddings = take(c.vocab_size * d);
        let prompts = take(c.prompts.num_prompts() * d);
        let mask = take(d);
        let mixers = take(NUM_SEGMENTS * d * d);
        let b0 = take(d);
        let p1 = take(d * d);
        let c1 = take(d);
        let p2 = take(d * d);
        let c2 = take(d);
        let w_raw = take(d * d);
        let w_cand = if c.single_w { w_raw } else { take(d * d) };
        Layout { dim: d, embeddings, prompts, mask, mixers, b0, p1, c1, p2, c2, w_raw, w_cand, total: off }
    }

    pub fn mixer(&self, g: usize) -> usize {
        self.mixers + g * self.dim * self.dim
    }

    pub fn w(&self, channel: Channel) -> usize {
        match channel {
            Channel::Raw => self.w_raw,
            Channel::Candidate => self.w_cand,
        }
    }
}

/// Where a position's input vector comes from (offset into the flat vector).
type Source = usize;

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    sources: [Vec<Source>; NUM_SEGMENTS],
    means: [Array1<f64>; NUM_SEGMENTS],
    h: Array1<f64>,
    a: Array1<f64>,
}

/// Trainable parameters plus their configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub params: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: ModelState,
}

/// Stable vocabulary id of a word (case-insensitive).
pub fn token_id(word: &str, vocab_size: usize) -> usize {
    let digest = Sha256::digest(word.to_lowercase().as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(b) % vocab_size as u64) as usize
}

impl ModelState {
    /// Seeded initialization: unit-variance inputs, `1/sqrt(d)` scaled maps,
    /// identity bilinear matrices and zero biases.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.vocab_size == 0 {
            return Err(Error::Config("encoder dim and vocab_size must be positive".into()));
        }
        if !(config.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", config.tau)));
        }
        config.prompts.validate()?;
        let layout = Layout::new(&config);
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let scaled = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let mut params = Array1::zeros(layout.total);
        // prompts and mask are shared by every input: keep them small so they
        // do not saturate the first layer; mixers share fan-in across segments
        let small = Normal::new(0.0, 0.1).expect("valid normal");
        let mixer = Normal::new(0.0, 1.0 / (3.0 * d as f64).sqrt()).expect("valid normal");
        for i in layout.embeddings..layout.prompts {
            params[i] = unit.sample(&mut rng);
        }
        for i in layout.prompts..layout.mixers {
            params[i] = small.sample(&mut rng);
        }
        for i in layout.mixers..layout.b0 {
            params[i] = mixer.sample(&mut rng);
        }
        for block in [layout.p1, layout.p2] {
            for i in block..block + d * d {
                params[i] = scaled.sample(&mut rng);
            }
        }
        for block in [layout.w_raw, layout.w_cand] {
            for k in 0..d {
                params[block + k * d + k] = 1.0;
            }
        }
        Ok(ModelState { config, params })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn vec_at(&self, off: usize) -> ArrayView1<'_, f64> {
        self.params.slice(ndarray::s![off..off + self.config.dim])
    }

    fn mat_at(&self, off: usize) -> ArrayView2<'_, f64> {
        let d = self.config.dim;
        self.params.slice(ndarray::s![off..off + d * d]).into_shape_with_order((d, d)).expect("square block")
    }

    pub fn w(&self, channel: Channel) -> ArrayView2<'_, f64> {
        self.mat_at(self.layout().w(channel))
    }

    /// Zeroes the output map so every representation is the zero vector.
    pub fn zero_projection(&mut self) {
        let l = self.layout();
        let d = self.config.dim;
        self.params.slice_mut(ndarray::s![l.p2..l.p2 + d * d]).fill(0.0);
        self.params.slice_mut(ndarray::s![l.c2..l.c2 + d]).fill(0.0);
    }

    fn source(&self, kind: &SlotKind, l: &Layout) -> Result<Source> {
        let d = self.config.dim;
        Ok(match kind {
            SlotKind::Word(w) => l.embeddings + token_id(w, self.config.vocab_size) * d,
            SlotKind::Prompt(i) if *i < self.config.prompts.num_prompts() => l.prompts + i * d,
            SlotKind::Prompt(i) => {
                return Err(Error::InvalidArgument(format!(
                    "soft prompt v{i} beyond configured {}",
                    self.config.prompts.num_prompts()
                )))
            }
            SlotKind::Mask => l.mask,
        })
    }

    pub fn forward(&self, t: &TemplateSequence) -> Result<(Array1<f64>, ForwardCache)> {
        if t.slots.get(t.mask_index).map(|s| &s.kind) != Some(&SlotKind::Mask) {
            return Err(Error::InvalidArgument("template mask index does not point at MASK".into()));
        }
        let l = self.layout();
        let d = self.config.dim;
        let mut sources: [Vec<Source>; NUM_SEGMENTS] = Default::default();
        for slot in &t.slots {
            if self.config.mask_entities && slot.segment.is_entity() {
                continue;
            }
            let src = self.source(&slot.kind, &l)?;
            // between words also belong to the sentence context, which keeps
            // them on the same path as description words
            if slot.segment == Segment::Between {
                sources[Segment::Context.index()].push(src);
            }
            sources[slot.segment.index()].push(src);
        }
        let means: [Array1<f64>; NUM_SEGMENTS] = std::array::from_fn(|g| {
            let mut m = Array1::zeros(d);
            for &s in &sources[g] {
                m += &self.vec_at(s);
            }
            if !sources[g].is_empty() {
                m /= sources[g].len() as f64;
            }
            m
        });
        let mut pre = self.vec_at(l.b0).to_owned();
        for (g, m) in means.iter().enumerate() {
            pre += &self.mat_at(l.mixer(g)).dot(m);
        }
        let h = pre.mapv(f64::tanh);
        let a = (self.mat_at(l.p1).dot(&h) + self.vec_at(l.c1)).mapv(f64::tanh);
        let z = self.mat_at(l.p2).dot(&a) + self.vec_at(l.c2);
        if z.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: z.len() });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite representation".into()));
        }
        Ok((z, ForwardCache { sources, means, h, a }))
    }

    /// Accumulates `∂(gzᵀ z)/∂θ` into `grad` (same layout as `params`).
    pub fn backward(&self, cache: &ForwardCache, gz: ArrayView1<f64>, grad: &mut Array1<f64>) -> Result<()> {
        let d = self.config.dim;
        if gz.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: gz.len() });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), actual: grad.len() });
        }
        let l = self.layout();
        add_outer(grad, l.p2, d, gz, cache.a.view());
        add_vec(grad, l.c2, gz);
        let ga = self.mat_at(l.p2).t().dot(&gz);
        let gu = &ga * &cache.a.mapv(|v| 1.0 - v * v);
        add_outer(grad, l.p1, d, gu.view(), cache.h.view());
        add_vec(grad, l.c1, gu.view());
        let gh = self.mat_at(l.p1).t().dot(&gu);
        let gpre = &gh * &cache.h.mapv(|v| 1.0 - v * v);
        add_vec(grad, l.b0, gpre.view());
        for g in 0..NUM_SEGMENTS {
            if cache.sources[g].is_empty() {
                continue;
            }
            add_outer(grad, l.mixer(g), d, gpre.view(), cache.means[g].view());
            let gmean = self.mat_at(l.mixer(g)).t().dot(&gpre) / cache.sources[g].len() as f64;
            for &s in &cache.sources[g] {
                add_vec(grad, s, gmean.view());
            }
        }
        Ok(())
    }

    /// Gradient of `zᵀ W d` style terms w.r.t. a bilinear block.
    pub fn accumulate_w_grad(&self, channel: Channel, gw: ArrayView2<f64>, grad: &mut Array1<f64>) {
        let d = self.config.dim;
        let off = self.layout().w(channel);
        let mut block = grad
            .slice_mut(ndarray::s![off..off + d * d])
            .into_shape_with_order((d, d))
            .expect("square block");
        block += &gw;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, model: self.clone() };
        let json = serde_json::to_string(&ck).map_err(|e| Error::json("checkpoint", e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("checkpoint {}", path.display()), e))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let expected = Layout::new(&ck.model.config).total;
        if ck.model.params.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: ck.model.params.len() });
        }
        Ok(ck.model)
    }
}

fn add_vec(grad: &mut Array1<f64>, off: usize, v: ArrayView1<f64>) {
    let mut s = grad.slice_mut(ndarray::s![off..off + v.len()]);
    s += &v;
}

fn add_outer(grad: &mut Array1<f64>, off: usize, d: usize, left: ArrayView1<f64>, right: ArrayView1<f64>) {
    let mut block: ArrayViewMut2<f64> =
        grad.slice_mut(ndarray::s![off..off + d * d]).into_shape_with_order((d, d)).expect("square block");
    for (i, mut row) in block.axis_iter_mut(Axis(0)).enumerate() {
        row.scaled_add(left[i], &right);
    }
}

/// Encoder contract used by the trainer and the classifier.
pub trait EncoderInterface {
    fn dim(&self) -> usize;
    fn prompt_config(&self) -> &PromptConfig;
    fn encode(&self, template: &TemplateSequence) -> Result<Array1<f64>>;
    fn encode_description(&self, text: &str) -> Result<Array1<f64>>;
    fn parameters(&self) -> &Array1<f64>;
    fn parameters_mut(&mut self) -> &mut Array1<f64>;
}

/// Tokenizes and wraps a description in its mask template.
pub fn description_template(text: &str, prompts: &PromptConfig) -> Result<TemplateSequence> {
    let words = WhitespaceTokenizer.words(text);
    build_description_template(&words, prompts)
}

impl EncoderInterface for ModelState {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn prompt_config(&self) -> &PromptConfig {
        &self.config.prompts
    }

    fn encode(&self, template: &TemplateSequence) -> Result<Array1<f64>> {
        self.forward(template).map(|(z, _)| z)
    }

    fn encode_description(&self, text: &str) -> Result<Array1<f64>> {
        self.encode(&description_template(text, &self.config.prompts)?)
    }

    fn parameters(&self) -> &Array1<f64> {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut Array1<f64> {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EntitySpan, Instance, InstanceKind, Origin, RelationId, SpanSource};
    use crate::encoding::template::build_template;
    use ndarray::Array2;

    fn cfg(d: usize) -> EncoderConfig {
        EncoderConfig {
            dim: d,
            vocab_size: 64,
            prompts: PromptConfig { boundaries: [1, 2, 3, 4], max_seq_len: 64 },
            tau: 0.1,
            single_w: false,
            mask_entities: false,
        }
    }

    fn sample() -> Instance {
        let tokens: Vec<String> = "Alice quietly founded Acme in Paris .".split(' ').map(String::from).collect();
        Instance {
            id: "s/0".into(),
            head: EntitySpan::from_tokens(&tokens, 0, 1, SpanSource::Annotated).unwrap(),
            tail: EntitySpan::from_tokens(&tokens, 3, 4, SpanSource::Annotated).unwrap(),
            tokens,
            label: RelationId::new("founded"),
            kind: InstanceKind::Determined,
            origin: Origin::OriginalAnnotation,
        }
    }

    /// Straight-line re-implementation of the forward pass from the layout.
    fn oracle_forward(m: &ModelState, t: &TemplateSequence) -> Vec<f64> {
        let d = m.config.dim;
        let p = m.params.as_slice().unwrap();
        let l = m.layout();
        let input = |k: &SlotKind| -> Vec<f64> {
            let off = match k {
                SlotKind::Word(w) => l.embeddings + token_id(w, m.config.vocab_size) * d,
                SlotKind::Prompt(i) => l.prompts + i * d,
                SlotKind::Mask => l.mask,
            };
            p[off..off + d].to_vec()
        };
        let mut pre: Vec<f64> = p[l.b0..l.b0 + d].to_vec();
        for g in 0..NUM_SEGMENTS {
            let members: Vec<Vec<f64>> =
                t.slots.iter().filter(|s| s.segment.index() == g || (g == 0 && s.segment.index() == 1)).map(|s| input(&s.kind)).collect();
            if members.is_empty() || (m.config.mask_entities && (g == 2 || g == 3)) {
                continue;
            }
            for i in 0..d {
                for j in 0..d {
                    let mean = members.iter().map(|v| v[j]).sum::<f64>() / members.len() as f64;
                    pre[i] += p[l.mixer(g) + i * d + j] * mean;
                }
            }
        }
        let h: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let a: Vec<f64> =
            (0..d).map(|i| (p[l.c1 + i] + (0..d).map(|j| p[l.p1 + i * d + j] * h[j]).sum::<f64>()).tanh()).collect();
        (0..d).map(|i| p[l.c2 + i] + (0..d).map(|j| p[l.p2 + i * d + j] * a[j]).sum::<f64>()).collect()
    }

    #[test]
    fn masked_entities_do_not_matter() {
        let m = ModelState::new(EncoderConfig { mask_entities: true, ..cfg(8) }, 3).unwrap();
        let t = build_template(&sample(), &m.config.prompts).unwrap();
        let z = m.encode(&t).unwrap();
        for (a, b) in z.iter().zip(&oracle_forward(&m, &t)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let mut other = sample();
        other.tokens[0] = "Bob".into();
        other.head.text = "Bob".into();
        assert_eq!(m.encode(&build_template(&other, &m.config.prompts).unwrap()).unwrap(), z);
    }

    #[test]
    fn forward_matches_oracle() {
        let m = ModelState::new(cfg(8), 3).unwrap();
        let t = build_template(&sample(), &m.config.prompts).unwrap();
        let z = m.encode(&t).unwrap();
        let want = oracle_forward(&m, &t);
        assert_eq!(z.len(), 8);
        for (a, b) in z.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(z, m.encode(&t).unwrap());
    }

    #[test]
    fn zero_projection_gives_zero() {
        let mut m = ModelState::new(cfg(8), 3).unwrap();
        m.zero_projection();
        let t = build_template(&sample(), &m.config.prompts).unwrap();
        assert!(m.encode(&t).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = ModelState::new(cfg(5), 11).unwrap();
        let t = build_template(&sample(), &m.config.prompts).unwrap();
        let c = Array1::from_iter((0..5).map(|i| (i as f64 * 0.7).sin() + 0.3));
        let (_, cache) = m.forward(&t).unwrap();
        let mut grad = Array1::zeros(m.num_params());
        m.backward(&cache, c.view(), &mut grad).unwrap();
        let used: Vec<usize> = (0..m.num_params()).filter(|&i| grad[i] != 0.0).collect();
        assert!(used.len() > 100);
        let h = 1e-5;
        for &i in used.iter().step_by(7) {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = c.dot(&m.encode(&t).unwrap());
            m.params[i] = orig - h;
            let down = c.dot(&m.encode(&t).unwrap());
            m.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-3 || (fd - grad[i]).abs() < 1e-9, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn descriptions_share_output_space() {
        let m = ModelState::new(cfg(8), 3).unwrap();
        let a = m.encode_description(crate::data::UR_DESCRIPTION).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.encode_description(crate::data::UR_DESCRIPTION).unwrap());
        assert!(m.encode_description("  ").is_err());
    }

    #[test]
    fn single_w_shares_block() {
        let mut c = cfg(4);
        c.single_w = true;
        let m = ModelState::new(c, 0).unwrap();
        assert_eq!(m.layout().w_raw, m.layout().w_cand);
        assert_eq!(m.w(Channel::Raw), Array2::<f64>::eye(4));
        assert_eq!(m.num_params() + 16, ModelState::new(cfg(4), 0).unwrap().num_params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = ModelState::new(cfg(4), 9).unwrap();
        m.save(&path).unwrap();
        assert_eq!(ModelState::load(&path).unwrap(), m);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"format":"ofcre-toy-encoder","version":1"#));
    }
}
