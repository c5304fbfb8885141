//! Per-task continual training: fit on the task, pick memory exemplars
//! closest to each relation's centroid, build prototypes, replay memory
//! together with the task data, and rebuild prototypes.

use std::collections::BTreeMap;

use log::debug;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{ContinualState, Instance, RelationId, RelationInfo, TaskStream};
use crate::encoding::{
    build_template, description_template, Channel, EncoderConfig, EncoderInterface, ForwardCache, ModelState,
};
use crate::error::{Error, Result};
use crate::objectives::{total_loss_with_grad, Batch, BatchItem, LossReport, LossWeights, Scorer};
use crate::objectives::euclidean_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Replay,
}

/// One optimizer step, as written to the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub total: f64,
    pub hsmt: f64,
    pub wmi_sd: f64,
    pub wmi_sc: f64,
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Array1<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd { learning_rate, momentum, velocity: None }
    }

    pub fn step(&mut self, params: &mut Array1<f64>, grad: &Array1<f64>) {
        if self.momentum == 0.0 {
            params.scaled_add(-self.learning_rate, grad);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| Array1::zeros(params.len()));
        *v *= self.momentum;
        *v += grad;
        params.scaled_add(-self.learning_rate, v);
    }
}

/// Receives progress while a stream runs; used for logging and for
/// flushing partial results.
pub trait RunObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    fn on_task_end(&mut self, _snapshot: &TaskSnapshot) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

/// Collects step logs in memory.
impl RunObserver for Vec<StepLog> {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        self.push(log.clone());
        Ok(())
    }
}

pub struct Trainer<'o> {
    weights: LossWeights,
    batch_size: usize,
    optimizer: Sgd,
    grad_clip: Option<f64>,
    step: usize,
    observer: &'o mut dyn RunObserver,
}

struct EncodedText {
    z: Array1<f64>,
    cache: ForwardCache,
}

fn embed_all(model: &ModelState, instances: &[&Instance]) -> Result<Vec<Array1<f64>>> {
    instances.iter().map(|i| model.encode(&build_template(i, model.prompt_config())?)).collect()
}

fn mean(vectors: &[Array1<f64>]) -> Option<Array1<f64>> {
    let first = vectors.first()?;
    let mut m = Array1::zeros(first.len());
    for v in vectors {
        m += v;
    }
    Some(m / vectors.len() as f64)
}

/// Loss of `batch` and its gradient with respect to every model parameter:
/// samples and descriptions are encoded with the current weights and the
/// loss gradient is pushed back through both. A description text shared by
/// several slots is encoded once and receives the summed gradient.
pub fn batch_loss_and_grad(
    model: &ModelState,
    batch: &[&Instance],
    relations: &BTreeMap<RelationId, RelationInfo>,
    weights: &LossWeights,
) -> Result<(LossReport, Array1<f64>)> {
    let prompts = *model.prompt_config();
    let mut items = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for inst in batch {
        let (z, cache) = model.forward(&build_template(inst, &prompts)?)?;
        items.push(BatchItem { id: inst.id.clone(), z, label: inst.label.clone() });
        caches.push(cache);
    }

    let mut texts: BTreeMap<String, EncodedText> = BTreeMap::new();
    let mut channel_texts: BTreeMap<(Channel, RelationId), Vec<String>> = BTreeMap::new();
    let mut loss_batch = Batch { items, ..Default::default() };
    let labels: std::collections::BTreeSet<&RelationId> = batch.iter().map(|i| &i.label).collect();
    for label in labels {
        let info = relations.get(label).ok_or_else(|| Error::MissingDescriptions(label.to_string()))?;
        for (channel, list) in [(Channel::Raw, info.raw_texts()), (Channel::Candidate, info.candidate_texts())] {
            let mut vecs = Vec::with_capacity(list.len());
            for text in &list {
                if !texts.contains_key(*text) {
                    let (z, cache) = model.forward(&description_template(text, &prompts)?)?;
                    texts.insert(text.to_string(), EncodedText { z, cache });
                }
                vecs.push(texts[*text].z.clone());
            }
            match channel {
                Channel::Raw => loss_batch.raw.insert(label.clone(), vecs),
                Channel::Candidate => loss_batch.candidate.insert(label.clone(), vecs),
            };
            channel_texts.insert((channel, label.clone()), list.iter().map(|s| s.to_string()).collect());
        }
    }

    let scorer = Scorer { w_raw: model.w(Channel::Raw), w_cand: model.w(Channel::Candidate), tau: model.config.tau };
    let (report, grad) = total_loss_with_grad(&loss_batch, &scorer, weights)?;

    let mut g = Array1::zeros(model.num_params());
    for (cache, gz) in caches.iter().zip(&grad.z) {
        model.backward(cache, gz.view(), &mut g)?;
    }
    let mut text_grads: BTreeMap<&str, Array1<f64>> = BTreeMap::new();
    for channel in [Channel::Raw, Channel::Candidate] {
        for (label, gs) in grad.descriptions(channel) {
            for (text, gd) in channel_texts[&(channel, label.clone())].iter().zip(gs) {
                *text_grads.entry(text).or_insert_with(|| Array1::zeros(gd.len())) += gd;
            }
        }
    }
    for (text, gd) in &text_grads {
        model.backward(&texts[*text].cache, gd.view(), &mut g)?;
    }
    model.accumulate_w_grad(Channel::Raw, grad.w_raw.view(), &mut g);
    model.accumulate_w_grad(Channel::Candidate, grad.w_cand.view(), &mut g);
    Ok((report, g))
}

impl<'o> Trainer<'o> {
    pub fn new(config: &ExperimentConfig, observer: &'o mut dyn RunObserver) -> Self {
        Trainer {
            weights: LossWeights::from_config(config),
            batch_size: config.batch_size.max(1),
            optimizer: Sgd::new(config.learning_rate, config.momentum),
            grad_clip: config.grad_clip,
            step: 0,
            observer,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One gradient step on `batch`; returns the loss before the update.
    pub fn step(
        &mut self,
        model: &mut ModelState,
        batch: &[&Instance],
        relations: &BTreeMap<RelationId, RelationInfo>,
    ) -> Result<LossReport> {
        let non_finite = |step| Error::NonFiniteLoss { step, batch_ids: batch.iter().map(|i| i.id.clone()).collect() };
        let (report, mut g) = batch_loss_and_grad(model, batch, relations, &self.weights)?;
        if !report.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(self.step));
        }
        if let Some(clip) = self.grad_clip {
            let norm = g.dot(&g).sqrt();
            if norm > clip {
                g *= clip / norm;
            }
        }
        self.optimizer.step(&mut model.params, &g);
        self.step += 1;
        Ok(report)
    }

    /// `epochs` shuffled passes over `data`; returns the mean loss per epoch.
    #[allow(clippy::too_many_arguments)]
    fn run_epochs(
        &mut self,
        model: &mut ModelState,
        data: &[&Instance],
        relations: &BTreeMap<RelationId, RelationInfo>,
        epochs: usize,
        rng: &mut ChaCha8Rng,
        task: usize,
        phase: Phase,
    ) -> Result<Vec<f64>> {
        let mut order: Vec<&Instance> = data.to_vec();
        let mut means = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(rng);
            let mut sum = 0.0;
            let mut n = 0;
            for chunk in order.chunks(self.batch_size) {
                let r = self.step(model, chunk, relations)?;
                self.observer.on_step(&StepLog {
                    task,
                    phase,
                    epoch,
                    step: self.step - 1,
                    batch_size: chunk.len(),
                    total: r.total,
                    hsmt: r.hsmt,
                    wmi_sd: r.wmi_sd,
                    wmi_sc: r.wmi_sc,
                })?;
                sum += r.total;
                n += 1;
            }
            means.push(if n == 0 { 0.0 } else { sum / n as f64 });
            debug!("task {task} {phase:?} epoch {epoch}: mean loss {:.5}", means[epoch]);
        }
        Ok(means)
    }

    pub fn train_task(
        &mut self,
        model: &mut ModelState,
        data: &[Instance],
        relations: &BTreeMap<RelationId, RelationInfo>,
        epochs: usize,
        rng: &mut ChaCha8Rng,
        task: usize,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument(format!("task {task} has no training data")));
        }
        let refs: Vec<&Instance> = data.iter().collect();
        self.run_epochs(model, &refs, relations, epochs, rng, task, Phase::Train)
    }

    /// Trains on the union of memory and the current task data.
    pub fn replay_train(
        &mut self,
        model: &mut ModelState,
        state: &ContinualState,
        data: &[Instance],
        epochs: usize,
        rng: &mut ChaCha8Rng,
        task: usize,
    ) -> Result<Vec<f64>> {
        let mut union: BTreeMap<&str, &Instance> = BTreeMap::new();
        for inst in state.memory_instances().chain(data) {
            union.entry(&inst.id).or_insert(inst);
        }
        let refs: Vec<&Instance> = union.into_values().collect();
        self.run_epochs(model, &refs, &state.relations, epochs, rng, task, Phase::Replay)
    }
}

/// The `size` instances of `relation` closest to the relation's centroid;
/// ties go to the smaller id.
pub fn select_memory(
    data: &[Instance],
    relation: &RelationId,
    size: usize,
    model: &ModelState,
) -> Result<Vec<Instance>> {
    let members: Vec<&Instance> = data.iter().filter(|i| &i.label == relation).collect();
    let embeddings = embed_all(model, &members)?;
    select_by_embedding(&members, &embeddings, size)
}

/// Selection rule on precomputed embeddings.
pub fn select_by_embedding(members: &[&Instance], embeddings: &[Array1<f64>], size: usize) -> Result<Vec<Instance>> {
    let Some(centroid) = mean(embeddings) else { return Ok(Vec::new()) };
    let mut ranked = Vec::with_capacity(members.len());
    for (inst, z) in members.iter().zip(embeddings) {
        ranked.push((euclidean_distance(z.view(), centroid.view())?, *inst));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Ok(ranked.into_iter().take(size).map(|(_, i)| i.clone()).collect())
}

/// Prototype per seen determined relation (mean memory embedding) plus the
/// undetermined relation's mean description embedding.
pub fn build_prototypes(state: &ContinualState, model: &ModelState) -> Result<BTreeMap<RelationId, Array1<f64>>> {
    let mut out = BTreeMap::new();
    for r in state.seen.iter().filter(|r| !r.is_undetermined()) {
        let members: Vec<&Instance> = state.memory.get(r).map(|m| m.iter().collect()).unwrap_or_default();
        let embeddings = embed_all(model, &members)?;
        let proto = mean(&embeddings).ok_or_else(|| Error::EmptyMemory(r.to_string()))?;
        out.insert(r.clone(), proto);
    }
    let ur = RelationId::undetermined();
    let info = state.relations.get(&ur).cloned().unwrap_or_else(RelationInfo::undetermined);
    let descs: Vec<Array1<f64>> =
        info.raw_texts().iter().map(|t| model.encode_description(t)).collect::<Result<_>>()?;
    out.insert(ur, mean(&descs).ok_or_else(|| Error::MissingDescriptions(info.id.to_string()))?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSnapshot {
    pub task: usize,
    pub relations: Vec<RelationId>,
    pub train_losses: Vec<f64>,
    pub replay_losses: Vec<f64>,
    pub state: ContinualState,
    pub checkpoint: ModelState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub seed: u64,
    pub snapshots: Vec<TaskSnapshot>,
}

impl TrainRunRecord {
    pub fn final_snapshot(&self) -> Option<&TaskSnapshot> {
        self.snapshots.last()
    }
}

/// Runs the whole stream. `relations` must describe every relation of the
/// stream (augmented and candidate descriptions already attached).
pub fn run_stream(
    stream: &TaskStream,
    relations: &BTreeMap<RelationId, RelationInfo>,
    config: &ExperimentConfig,
    seed: u64,
    observer: &mut dyn RunObserver,
) -> Result<TrainRunRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelState::new(EncoderConfig::from_experiment(config), seed)?;
    let mut state = ContinualState::new(config.memory_size);
    let ur = RelationId::undetermined();
    state.seen.insert(ur.clone());
    let mut record = TrainRunRecord { seed, snapshots: Vec::with_capacity(stream.tasks.len()) };

    for task in &stream.tasks {
        for r in &task.relations {
            let info = relations.get(r).ok_or_else(|| Error::MissingDescriptions(r.to_string()))?;
            state.relations.insert(r.clone(), info.clone());
        }
        let mut trainer = Trainer::new(config, observer);
        let train_losses =
            trainer.train_task(&mut model, &task.train, &state.relations, config.epochs, &mut rng, task.index)?;

        for r in task.relations.iter().chain(std::iter::once(&ur)) {
            let picked = select_memory(&task.train, r, config.memory_size, &model)?;
            if picked.is_empty() && !r.is_undetermined() {
                return Err(Error::EmptyMemory(r.to_string()));
            }
            state.memory.entry(r.clone()).or_default().extend(picked);
        }
        state.seen.extend(task.relations.iter().cloned());
        state.prototypes = build_prototypes(&state, &model)?;

        let replay_losses =
            trainer.replay_train(&mut model, &state, &task.train, config.memory_epochs, &mut rng, task.index)?;
        state.prototypes = build_prototypes(&state, &model)?;

        let snapshot = TaskSnapshot {
            task: task.index,
            relations: task.relations.clone(),
            train_losses,
            replay_losses,
            state: state.clone(),
            checkpoint: model.clone(),
        };
        observer.on_task_end(&snapshot)?;
        record.snapshots.push(snapshot);
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EntitySpan, InstanceKind, Origin, SpanSource};
    use crate::encoding::PromptConfig;

    fn toy_config() -> ExperimentConfig {
        ExperimentConfig {
            hidden_dim: 8,
            vocab_size: 97,
            prompt_n0: 1,
            prompt_n1: 2,
            prompt_n2: 3,
            prompt_n3: 4,
            max_seq_len: 64,
            learning_rate: 0.05,
            batch_size: 8,
            epochs: 10,
            memory_epochs: 2,
            memory_size: 2,
            k_desc: 2,
            ..Default::default()
        }
    }

    fn inst(id: &str, words: &str, label: &str) -> Instance {
        let tokens: Vec<String> = words.split(' ').map(String::from).collect();
        let n = tokens.len();
        let ur = label == crate::data::UR_LABEL;
        Instance {
            id: id.into(),
            head: EntitySpan::from_tokens(&tokens, 0, 1, SpanSource::Annotated).unwrap(),
            tail: EntitySpan::from_tokens(&tokens, n - 1, n, SpanSource::Annotated).unwrap(),
            tokens,
            label: RelationId::new(label),
            kind: if ur { InstanceKind::Undetermined } else { InstanceKind::Determined },
            origin: if ur { Origin::PairEnumeration } else { Origin::OriginalAnnotation },
        }
    }

    fn two_relation_task() -> (Vec<Instance>, BTreeMap<RelationId, RelationInfo>) {
        let mut data = Vec::new();
        for i in 0..6 {
            data.push(inst(&format!("a{i}"), &format!("e{i} founded built x{i}"), "A"));
            data.push(inst(&format!("b{i}"), &format!("p{i} born in q{i}"), "B"));
        }
        let mut rel = BTreeMap::new();
        let mut a = RelationInfo::new("A", "founder", "the head founded the tail");
        a.augmented_descriptions = vec!["someone founded an organization".into(), "creator built it".into()];
        rel.insert(a.id.clone(), a);
        rel.insert(RelationId::new("B"), RelationInfo::new("B", "birthplace", "the head was born in the tail"));
        rel.insert(RelationId::undetermined(), RelationInfo::undetermined());
        (data, rel)
    }

    fn model(c: &ExperimentConfig) -> ModelState {
        ModelState::new(EncoderConfig::from_experiment(c), 1).unwrap()
    }

    #[test]
    fn training_reduces_loss() {
        let c = toy_config();
        let (data, rel) = two_relation_task();
        let mut m = model(&c);
        let mut log = Vec::new();
        let mut t = Trainer::new(&c, &mut log);
        let losses = t.train_task(&mut m, &data, &rel, 10, &mut ChaCha8Rng::seed_from_u64(0), 0).unwrap();
        assert!(losses[9] < losses[0], "{losses:?}");
        assert_eq!(log.len(), 20);
    }

    #[test]
    fn zero_step_size_is_noop() {
        let c = ExperimentConfig { learning_rate: 0.0, ..toy_config() };
        let (data, rel) = two_relation_task();
        let mut m = model(&c);
        let before = m.clone();
        let mut obs = ();
        Trainer::new(&c, &mut obs).train_task(&mut m, &data, &rel, 2, &mut ChaCha8Rng::seed_from_u64(0), 0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn missing_descriptions_are_reported() {
        let c = toy_config();
        let (data, mut rel) = two_relation_task();
        rel.remove(&RelationId::new("B"));
        let mut m = model(&c);
        let mut obs = ();
        let err = Trainer::new(&c, &mut obs).train_task(&mut m, &data, &rel, 1, &mut ChaCha8Rng::seed_from_u64(0), 0);
        assert!(matches!(err, Err(Error::MissingDescriptions(l)) if l == "B"));
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_ids() {
        let c = ExperimentConfig { learning_rate: 1e300, ..toy_config() };
        let (data, rel) = two_relation_task();
        let mut m = model(&c);
        let mut obs = ();
        let err = Trainer::new(&c, &mut obs).train_task(&mut m, &data, &rel, 3, &mut ChaCha8Rng::seed_from_u64(0), 0);
        match err {
            Err(Error::NonFiniteLoss { batch_ids, .. }) => assert!(!batch_ids.is_empty()),
            Err(Error::InvalidArgument(m)) => assert!(m.contains("non-finite")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn memory_selection_fixture() {
        let members: Vec<Instance> = (0..4).map(|i| inst(&format!("i{i}"), "a b", "A")).collect();
        let refs: Vec<&Instance> = members.iter().collect();
        let z: Vec<Array1<f64>> = [0.0, 1.0, 2.0, 10.0].iter().map(|&v| Array1::from_elem(1, v)).collect();
        let picked = select_by_embedding(&refs, &z, 2).unwrap();
        assert_eq!(picked.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["i2", "i1"]);
        assert_eq!(select_by_embedding(&refs, &z, 10).unwrap().len(), 4);
        assert_eq!(select_by_embedding(&refs[..1], &z[..1], 1).unwrap()[0].id, "i0");
    }

    #[test]
    fn prototypes_are_means_and_cover_seen() {
        let c = toy_config();
        let m = model(&c);
        let (data, rel) = two_relation_task();
        let mut state = ContinualState::new(2);
        state.relations = rel;
        state.seen.extend([RelationId::new("A"), RelationId::undetermined()]);
        state.memory.insert(RelationId::new("A"), vec![data[0].clone(), data[2].clone()]);
        let p = build_prototypes(&state, &m).unwrap();
        assert_eq!(p.keys().cloned().collect::<Vec<_>>(), [RelationId::new("A"), RelationId::undetermined()]);
        let z0 = m.encode(&build_template(&data[0], &PromptConfig::from_experiment(&c)).unwrap()).unwrap();
        let z2 = m.encode(&build_template(&data[2], &PromptConfig::from_experiment(&c)).unwrap()).unwrap();
        let want = (&z0 + &z2) / 2.0;
        assert!((&p[&RelationId::new("A")] - &want).iter().all(|v| v.abs() < 1e-12));

        state.memory.get_mut(&RelationId::new("A")).unwrap().reverse();
        assert_eq!(build_prototypes(&state, &m).unwrap(), p);

        state.seen.insert(RelationId::new("B"));
        assert!(matches!(build_prototypes(&state, &m), Err(Error::EmptyMemory(r)) if r == "B"));
    }

    #[test]
    fn sgd_momentum() {
        let mut p = Array1::from_elem(1, 1.0);
        let g = Array1::from_elem(1, 1.0);
        let mut opt = Sgd::new(0.1, 0.5);
        opt.step(&mut p, &g);
        opt.step(&mut p, &g);
        assert!((p[0] - (1.0 - 0.1 - 0.15)).abs() < 1e-12);
    }
}
