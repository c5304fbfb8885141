//! End-to-end orchestration: dataset build → description augmentation →
//! per-seed training with per-task evaluation → report.
//!
//! Everything a run produces lives under one run directory:
//!
//! ```text
//! run_dir/
//!   .lock                      held while a pipeline runs
//!   cache.jsonl                gateway completions
//!   dataset.jsonl              open dataset instances
//!   relations.json             relations with augmented descriptions
//!   run/<seed>/stream.json     sampled task stream
//!   run/<seed>/relations.json  relations with candidate descriptions
//!   run/<seed>/log.jsonl       one line per optimizer step
//!   run/<seed>/task<j>/        model.json, state.json
//!   run/<seed>/record.json     losses and snapshots summary
//!   run/<seed>/metrics.json    per-mode scores after each task
//!   report.md, report.csv, summary.json
//!   manifest.json              written last
//! ```

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::{canonical_text, read_jsonl, write_jsonl, Instance, RelationId, RelationInfo, TaskStream};
use crate::dataset::ingest::{load_sentences, InputFormat};
use crate::dataset::synth::{SyntheticCorpus, SyntheticSpec};
use crate::dataset::{
    build_open_dataset, compute_stats, sample_task_stream, AnnotatedSentence, DatasetStats, Gazetteer, OpenDataset,
};
use crate::encoding::ModelState;
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_seeds, cumulative_test, evaluate, render_csv, render_markdown, F1Kind, MetricTable, PredictionMode,
    SeedSummary,
};
use crate::gateway::{prompts, Gateway, GatewayBackend, MockBackend, ResponseCache};
use crate::tokenize::WhitespaceTokenizer;
use crate::trainer::{run_stream, RunObserver, StepLog, TaskSnapshot, TrainRunRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        /// Script the mock OIE step with the generator's gold triplets.
        #[serde(default = "yes")]
        gold_oie: bool,
    },
    Files {
        sentences: PathBuf,
        format: String,
        /// JSON array of relations, or a `{id: [name, description]}` map.
        relations: PathBuf,
        /// One entity per line; without it only annotated entities are used.
        #[serde(default)]
        gazetteer: Option<PathBuf>,
        /// JSONL `{prompt, completion}` pairs scripted into the mock backend.
        #[serde(default)]
        scripts: Option<PathBuf>,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    #[default]
    Mock,
    Http { endpoint: String, model: String, api_key_env: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_dir: PathBuf,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default = "all_modes")]
    pub modes: Vec<PredictionMode>,
    #[serde(default)]
    pub f1: F1Kind,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    pub data: DataSource,
}

fn all_modes() -> Vec<PredictionMode> {
    PredictionMode::ALL.to_vec()
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.experiment.validate()?;
        Ok(c)
    }

    /// Loads a config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = PipelineConfig::from_toml_str(&text)?;
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            c.resolve_paths(base);
        }
        Ok(c)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        if let DataSource::Files { sentences, relations, gazetteer, scripts, .. } = &mut self.data {
            fix(sentences);
            fix(relations);
            gazetteer.iter_mut().for_each(fix);
            scripts.iter_mut().for_each(fix);
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Artifact index of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub label: String,
    pub dataset_sha256: String,
    pub backend_tags: Vec<String>,
    pub backend_calls: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunEntry>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub dir: PathBuf,
    pub record: PathBuf,
    pub metrics: PathBuf,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: name.to_string(), source: Box::new(other) },
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Exclusive run-directory lock, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Loaded inputs: annotated sentences, base relations, NER gazetteer and any
/// completions to script into the mock backend.
pub struct Inputs {
    pub sentences: Vec<AnnotatedSentence>,
    pub relations: Vec<RelationInfo>,
    pub gazetteer: Gazetteer,
    pub scripts: Vec<(String, String)>,
    /// Set for synthetic data when gold triplets should drive the mock.
    corpus: Option<SyntheticCorpus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub prompt: String,
    pub completion: String,
}

/// Relations file: a JSON array of relations or a `{id: [name, description]}` map.
pub fn load_relations(path: &Path) -> Result<Vec<RelationInfo>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    } else {
        crate::dataset::ingest::parse_pid2name(&text)
    }
}

pub fn load_inputs(source: &DataSource) -> Result<Inputs> {
    match source {
        DataSource::Synthetic { spec, gold_oie } => {
            let corpus = SyntheticCorpus::generate(spec);
            Ok(Inputs {
                sentences: corpus.sentences.clone(),
                relations: corpus.relations.clone(),
                gazetteer: corpus.gazetteer(),
                scripts: Vec::new(),
                corpus: gold_oie.then_some(corpus),
            })
        }
        DataSource::Files { sentences, format, relations, gazetteer, scripts } => {
            let format: InputFormat = format.parse()?;
            let gazetteer = match gazetteer {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    Gazetteer::from_wordlist(&text, &WhitespaceTokenizer)
                }
                None => Gazetteer::default(),
            };
            let scripts = match scripts {
                Some(p) => read_jsonl::<ScriptEntry>(p)?.into_iter().map(|e| (e.prompt, e.completion)).collect(),
                None => Vec::new(),
            };
            Ok(Inputs {
                sentences: load_sentences(sentences, format)?,
                relations: load_relations(relations)?,
                gazetteer,
                scripts,
                corpus: None,
            })
        }
    }
}

/// OIE prompts and completions a perfect extractor would give for every
/// pair of the dataset.
pub fn gold_oie_scripts(corpus: &SyntheticCorpus, dataset: &OpenDataset) -> Vec<(String, String)> {
    dataset
        .instances()
        .map(|inst| {
            let prompt = prompts::render_oie_prompt(&canonical_text(&inst.tokens), &inst.head.text, &inst.tail.text);
            (prompt, corpus.gold_triplet(inst).render())
        })
        .collect()
}

pub fn build_gateway(
    backend: &BackendConfig,
    cache_path: Option<&Path>,
    scripts: &[(String, String)],
) -> Result<Gateway> {
    let cache = match cache_path {
        Some(p) => ResponseCache::open(p)?,
        None => ResponseCache::in_memory(),
    };
    let backend: Box<dyn GatewayBackend> = match backend {
        BackendConfig::Mock => {
            let mut m = MockBackend::new();
            for (p, c) in scripts {
                m.script(p.clone(), c.clone());
            }
            Box::new(m)
        }
        #[cfg(feature = "http")]
        BackendConfig::Http { endpoint, model, api_key_env } => {
            Box::new(crate::gateway::HttpBackend::from_env(endpoint, model, api_key_env)?)
        }
        #[cfg(not(feature = "http"))]
        BackendConfig::Http { .. } => {
            return Err(Error::Config("http backend requires building with the `http` feature".into()))
        }
    };
    let gw = Gateway::new(backend, cache);
    Ok(if matches!(gw.backend_tag(), "mock") { gw.with_backoff(std::time::Duration::ZERO) } else { gw })
}

/// Relations keyed by id with augmented descriptions.
pub fn augment(
    gateway: &Gateway,
    relations: &[RelationInfo],
    k_desc: usize,
) -> Result<BTreeMap<RelationId, RelationInfo>> {
    let mut out: BTreeMap<RelationId, RelationInfo> = relations.iter().map(|r| (r.id.clone(), r.clone())).collect();
    gateway.augment_relations(out.values_mut(), k_desc)?;
    Ok(out)
}

/// Attaches candidate descriptions computed from each task's training data.
pub fn attach_candidates(
    gateway: &Gateway,
    stream: &TaskStream,
    relations: &BTreeMap<RelationId, RelationInfo>,
    k_desc: usize,
) -> Result<BTreeMap<RelationId, RelationInfo>> {
    let mut out = relations.clone();
    for task in &stream.tasks {
        for r in &task.relations {
            if !out.contains_key(r) {
                out.insert(r.clone(), RelationInfo::new(r.as_str(), r.as_str(), r.as_str()));
            }
        }
        for (r, cands) in gateway.candidate_descriptions(relations, &task.train, k_desc)? {
            if let Some(info) = out.get_mut(&r) {
                info.candidate_descriptions = cands;
            }
        }
    }
    Ok(out)
}

/// Per-mode F1 (percent) on the cumulative test set after each task.
pub fn evaluate_snapshots<'a>(
    snapshots: impl IntoIterator<Item = &'a TaskSnapshot>,
    stream: &TaskStream,
    modes: &[PredictionMode],
    gateway: Option<&Gateway>,
    kind: F1Kind,
    seed: u64,
) -> Result<BTreeMap<PredictionMode, MetricTable>> {
    let mut tables: BTreeMap<PredictionMode, MetricTable> =
        modes.iter().map(|&m| (m, MetricTable { mode: m, seed, scores: Vec::new() })).collect();
    for (j, snap) in snapshots.into_iter().enumerate() {
        let test = cumulative_test(stream, j);
        for (&mode, table) in tables.iter_mut() {
            let ev = evaluate(&snap.checkpoint, &snap.state, &test, mode, gateway, kind)?;
            table.scores.push(ev.f1 * 100.0);
        }
    }
    Ok(tables)
}

/// Writes the step log and per-task checkpoints as training progresses.
struct DiskObserver {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl DiskObserver {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("log.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(DiskObserver { dir: dir.to_path_buf(), log: BufWriter::new(file) })
    }
}

impl RunObserver for DiskObserver {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        let line = serde_json::to_string(log).map_err(|e| Error::json("step log", e))?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("log.jsonl"), e))
    }

    fn on_task_end(&mut self, snap: &TaskSnapshot) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(self.dir.join("log.jsonl"), e))?;
        let dir = self.dir.join(format!("task{}", snap.task + 1));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        snap.checkpoint.save(&dir.join("model.json"))?;
        write_json(&dir.join("state.json"), &snap.state)
    }
}

/// Compact per-task summary kept in `record.json`; full checkpoints and
/// states sit in the task directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub seed: u64,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub relations: Vec<RelationId>,
    pub seen: Vec<RelationId>,
    pub memory: BTreeMap<RelationId, Vec<String>>,
    pub train_losses: Vec<f64>,
    pub replay_losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub state: PathBuf,
}

impl RecordSummary {
    pub fn from_record(record: &TrainRunRecord) -> Self {
        RecordSummary {
            seed: record.seed,
            tasks: record
                .snapshots
                .iter()
                .map(|s| {
                    let dir = PathBuf::from(format!("task{}", s.task + 1));
                    TaskSummary {
                        task: s.task,
                        relations: s.relations.clone(),
                        seen: s.state.seen.iter().cloned().collect(),
                        memory: s
                            .state
                            .memory
                            .iter()
                            .map(|(r, m)| (r.clone(), m.iter().map(|i| i.id.clone()).collect()))
                            .collect(),
                        train_losses: s.train_losses.clone(),
                        replay_losses: s.replay_losses.clone(),
                        checkpoint: dir.join("model.json"),
                        state: dir.join("state.json"),
                    }
                })
                .collect(),
        }
    }

    /// Reloads full snapshots from a seed directory.
    pub fn load_snapshots(&self, seed_dir: &Path) -> Result<Vec<TaskSnapshot>> {
        self.tasks
            .iter()
            .map(|t| {
                Ok(TaskSnapshot {
                    task: t.task,
                    relations: t.relations.clone(),
                    train_losses: t.train_losses.clone(),
                    replay_losses: t.replay_losses.clone(),
                    state: read_json(&seed_dir.join(&t.state))?,
                    checkpoint: ModelState::load(&seed_dir.join(&t.checkpoint))?,
                })
            })
            .collect()
    }
}

/// Samples the stream, attaches candidate descriptions, trains and writes
/// everything under `seed_dir`.
pub fn train_seed(
    dataset: &OpenDataset,
    relations: &BTreeMap<RelationId, RelationInfo>,
    config: &ExperimentConfig,
    seed: u64,
    gateway: &Gateway,
    seed_dir: &Path,
) -> Result<(TaskStream, TrainRunRecord)> {
    let stream = sample_task_stream(dataset, config, seed)?;
    write_json(&seed_dir.join("stream.json"), &stream)?;
    let relations = attach_candidates(gateway, &stream, relations, config.k_desc)?;
    write_json(&seed_dir.join("relations.json"), &relations.values().collect::<Vec<_>>())?;
    let mut observer = DiskObserver::new(seed_dir)?;
    let record = run_stream(&stream, &relations, config, seed, &mut observer)?;
    write_json(&seed_dir.join("record.json"), &RecordSummary::from_record(&record))?;
    Ok((stream, record))
}

pub struct RunOptions {
    pub dry_run: bool,
}

/// Executes every stage; the manifest is written last, atomically.
pub fn run_pipeline(config: &PipelineConfig, opts: &RunOptions) -> Result<RunManifest> {
    let started_at = now();
    stage("config", config.experiment.validate())?;
    if config.modes.is_empty() {
        return Err(Error::Stage { stage: "config".into(), source: Box::new(Error::Config("no modes".into())) });
    }
    let inputs = stage("inputs", load_inputs(&config.data))?;
    let label = config.experiment.ablation_label();
    if opts.dry_run {
        info!("dry run: {} sentences, {} relations", inputs.sentences.len(), inputs.relations.len());
        return Ok(RunManifest {
            config: config.clone(),
            label,
            dataset_sha256: String::new(),
            backend_tags: Vec::new(),
            backend_calls: 0,
            seeds: config.experiment.seeds.clone(),
            runs: Vec::new(),
            artifacts: BTreeMap::new(),
            started_at,
            finished_at: now(),
        });
    }

    let run_dir = &config.run_dir;
    let _lock = RunLock::acquire(run_dir)?;
    let manifest_path = run_dir.join("manifest.json");
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let mut artifacts = BTreeMap::new();

    let dataset = stage("build-dataset", build_open_dataset(&inputs.sentences, &inputs.gazetteer))?;
    let dataset_path = run_dir.join("dataset.jsonl");
    stage("build-dataset", write_jsonl(&dataset_path, dataset.instances()))?;
    let dataset_sha256 = stage("build-dataset", sha256_file(&dataset_path))?;
    artifacts.insert("dataset".to_string(), PathBuf::from("dataset.jsonl"));

    let gateway = stage("augment", open_gateway(config, &inputs, &dataset))?;
    artifacts.insert("cache".to_string(), PathBuf::from("cache.jsonl"));
    let relations = stage("augment", augment(&gateway, &inputs.relations, config.experiment.k_desc))?;
    stage("augment", write_json(&run_dir.join("relations.json"), &relations.values().collect::<Vec<_>>()))?;
    artifacts.insert("relations".to_string(), PathBuf::from("relations.json"));

    let mut runs = Vec::new();
    let mut per_mode: BTreeMap<PredictionMode, Vec<MetricTable>> = BTreeMap::new();
    for &seed in &config.experiment.seeds {
        let rel_dir = PathBuf::from("run").join(seed.to_string());
        let seed_dir = run_dir.join(&rel_dir);
        info!("seed {seed}: training");
        let (stream, record) =
            stage("train", train_seed(&dataset, &relations, &config.experiment, seed, &gateway, &seed_dir))?;
        info!("seed {seed}: evaluating");
        let tables = stage(
            "evaluate",
            evaluate_snapshots(&record.snapshots, &stream, &config.modes, Some(&gateway), config.f1, seed),
        )?;
        stage("evaluate", write_json(&seed_dir.join("metrics.json"), &tables.values().collect::<Vec<_>>()))?;
        for (mode, t) in tables {
            per_mode.entry(mode).or_default().push(t);
        }
        runs.push(RunEntry {
            seed,
            dir: rel_dir.clone(),
            record: rel_dir.join("record.json"),
            metrics: rel_dir.join("metrics.json"),
        });
    }

    let summaries = stage("report", summarize(&label, &per_mode))?;
    stage("report", write_report(run_dir, &summaries))?;
    for name in ["report.md", "report.csv", "summary.json"] {
        artifacts.insert(name.trim_end_matches(".md").replace('.', "_"), PathBuf::from(name));
    }

    let manifest = RunManifest {
        config: config.clone(),
        label,
        dataset_sha256,
        backend_tags: vec![gateway.backend_tag().to_string()],
        backend_calls: gateway.backend_calls(),
        seeds: config.experiment.seeds.clone(),
        runs,
        artifacts,
        started_at,
        finished_at: now(),
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    stage("manifest", write_atomic(&manifest_path, &bytes))?;
    Ok(manifest)
}

pub fn summarize(
    label: &str,
    per_mode: &BTreeMap<PredictionMode, Vec<MetricTable>>,
) -> Result<Vec<(String, SeedSummary)>> {
    per_mode.values().map(|tables| Ok((label.to_string(), aggregate_seeds(tables)?))).collect()
}

pub fn write_report(dir: &Path, rows: &[(String, SeedSummary)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let md = format!("# Results\n\nF1 (%) on all seen relations after each task.\n\n{}", render_markdown(rows));
    std::fs::write(dir.join("report.md"), md).map_err(|e| Error::io(dir.join("report.md"), e))?;
    std::fs::write(dir.join("report.csv"), render_csv(rows)).map_err(|e| Error::io(dir.join("report.csv"), e))?;
    write_json(&dir.join("summary.json"), &rows)
}

/// Loads the instances written by the dataset stage.
pub fn load_dataset(path: &Path) -> Result<OpenDataset> {
    Ok(OpenDataset::from_instances(read_jsonl::<Instance>(path)?))
}

impl Inputs {
    /// Completions to script into the mock: the configured script file plus,
    /// for synthetic data with gold OIE, a perfect extractor over `dataset`.
    pub fn mock_scripts(&self, dataset: &OpenDataset) -> Vec<(String, String)> {
        let mut scripts = self.scripts.clone();
        if let Some(corpus) = &self.corpus {
            scripts.extend(gold_oie_scripts(corpus, dataset));
        }
        scripts
    }
}

/// Gateway backed by the run directory's cache.
pub fn open_gateway(config: &PipelineConfig, inputs: &Inputs, dataset: &OpenDataset) -> Result<Gateway> {
    build_gateway(&config.backend, Some(&config.run_dir.join("cache.jsonl")), &inputs.mock_scripts(dataset))
}

fn seed_dir(config: &PipelineConfig, seed: u64) -> PathBuf {
    config.run_dir.join("run").join(seed.to_string())
}

/// Builds the open dataset and writes `dataset.jsonl`.
pub fn stage_build_dataset(config: &PipelineConfig) -> Result<DatasetStats> {
    let inputs = stage("inputs", load_inputs(&config.data))?;
    let _lock = RunLock::acquire(&config.run_dir)?;
    let dataset = stage("build-dataset", build_open_dataset(&inputs.sentences, &inputs.gazetteer))?;
    stage("build-dataset", write_jsonl(&config.run_dir.join("dataset.jsonl"), dataset.instances()))?;
    Ok(compute_stats(&dataset))
}

fn stage_prerequisites(config: &PipelineConfig) -> Result<(Inputs, OpenDataset)> {
    let inputs = stage("inputs", load_inputs(&config.data))?;
    let path = config.run_dir.join("dataset.jsonl");
    if !path.exists() {
        return Err(Error::Precondition(format!("{} missing; run build-dataset first", path.display())));
    }
    Ok((inputs, load_dataset(&path)?))
}

/// Augments the relation descriptions and writes `relations.json`; returns
/// the number of backend calls made.
pub fn stage_augment(config: &PipelineConfig) -> Result<usize> {
    let (inputs, dataset) = stage_prerequisites(config)?;
    let _lock = RunLock::acquire(&config.run_dir)?;
    let gateway = stage("augment", open_gateway(config, &inputs, &dataset))?;
    let relations = stage("augment", augment(&gateway, &inputs.relations, config.experiment.k_desc))?;
    stage("augment", write_json(&config.run_dir.join("relations.json"), &relations.values().collect::<Vec<_>>()))?;
    Ok(gateway.backend_calls())
}

/// Trains every configured seed from the stored dataset and relations.
pub fn stage_train(config: &PipelineConfig) -> Result<Vec<TrainRunRecord>> {
    stage("config", config.experiment.validate())?;
    let (inputs, dataset) = stage_prerequisites(config)?;
    let rel_path = config.run_dir.join("relations.json");
    if !rel_path.exists() {
        return Err(Error::Precondition(format!("{} missing; run augment first", rel_path.display())));
    }
    let relations: BTreeMap<RelationId, RelationInfo> =
        load_relations(&rel_path)?.into_iter().map(|r| (r.id.clone(), r)).collect();
    let _lock = RunLock::acquire(&config.run_dir)?;
    let gateway = stage("train", open_gateway(config, &inputs, &dataset))?;
    let mut records = Vec::new();
    for &seed in &config.experiment.seeds {
        info!("seed {seed}: training");
        let (_, record) = stage(
            "train",
            train_seed(&dataset, &relations, &config.experiment, seed, &gateway, &seed_dir(config, seed)),
        )?;
        records.push(record);
    }
    Ok(records)
}

/// Scores the stored checkpoints of every seed and writes `metrics.json`.
pub fn stage_evaluate(config: &PipelineConfig) -> Result<BTreeMap<u64, Vec<MetricTable>>> {
    let (inputs, dataset) = stage_prerequisites(config)?;
    let _lock = RunLock::acquire(&config.run_dir)?;
    let gateway = stage("evaluate", open_gateway(config, &inputs, &dataset))?;
    let mut out = BTreeMap::new();
    for &seed in &config.experiment.seeds {
        let dir = seed_dir(config, seed);
        let stream: TaskStream = stage("evaluate", read_json(&dir.join("stream.json")))?;
        let summary: RecordSummary = stage("evaluate", read_json(&dir.join("record.json")))?;
        let snapshots = stage("evaluate", summary.load_snapshots(&dir))?;
        let tables =
            stage("evaluate", evaluate_snapshots(&snapshots, &stream, &config.modes, Some(&gateway), config.f1, seed))?;
        let tables: Vec<MetricTable> = tables.into_values().collect();
        stage("evaluate", write_json(&dir.join("metrics.json"), &tables))?;
        out.insert(seed, tables);
    }
    Ok(out)
}

/// Aggregates the stored per-seed metrics into the report files.
pub fn stage_report(config: &PipelineConfig) -> Result<Vec<(String, SeedSummary)>> {
    let mut per_mode: BTreeMap<PredictionMode, Vec<MetricTable>> = BTreeMap::new();
    for &seed in &config.experiment.seeds {
        let tables: Vec<MetricTable> = stage("report", read_json(&seed_dir(config, seed).join("metrics.json")))?;
        for t in tables.into_iter().filter(|t| config.modes.contains(&t.mode)) {
            per_mode.entry(t.mode).or_default().push(t);
        }
    }
    let rows = stage("report", summarize(&config.experiment.ablation_label(), &per_mode))?;
    stage("report", write_report(&config.run_dir, &rows))?;
    Ok(rows)
}
