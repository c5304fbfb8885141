use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ofcre::config::ExperimentConfig;
use ofcre::data::write_jsonl;
use ofcre::dataset::synth::{SyntheticCorpus, SyntheticSpec};
use ofcre::dataset::{build_open_dataset, compute_stats};
use ofcre::eval::{F1Kind, PredictionMode};
use ofcre::pipeline::{
    gold_oie_scripts, load_dataset, run_pipeline, stage_augment, stage_build_dataset, stage_evaluate, stage_report,
    stage_train, write_json, BackendConfig, DataSource, PipelineConfig, RunOptions, ScriptEntry,
};

#[derive(Parser)]
#[command(name = "ofcre", version, about = "Open few-shot continual relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write the manifest.
    Run(Common),
    /// Build the open dataset (entity merging and pair enumeration).
    BuildDataset(Common),
    /// Generate augmented relation descriptions.
    Augment(Common),
    /// Train every seed over its sampled task stream.
    Train(Common),
    /// Score stored checkpoints on the cumulative test sets.
    Evaluate(Common),
    /// Aggregate per-seed metrics into report.md / report.csv.
    Report(Common),
    /// Print DR/UR counts of a built dataset.
    Stats {
        /// A dataset.jsonl, or a run directory containing one.
        path: PathBuf,
    },
    /// Write a synthetic corpus plus a ready-to-run config.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Generator seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Use the noisier default generator instead of well-separated triggers.
        #[arg(long)]
        noisy: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Override the evaluation modes; repeatable.
    #[arg(long = "mode", value_parser = parse_mode)]
    modes: Vec<PredictionMode>,
    /// Force a backend; `http` needs an http section in the config.
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    /// Validate the config and inputs without executing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Mock,
    Http,
}

fn parse_mode(s: &str) -> Result<PredictionMode, String> {
    s.parse().map_err(|e: ofcre::Error| e.to_string())
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut config = PipelineConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if !self.seeds.is_empty() {
            config.experiment.seeds = self.seeds.clone();
        }
        if !self.modes.is_empty() {
            config.modes = self.modes.clone();
        }
        match (self.backend, &config.backend) {
            (Some(BackendChoice::Mock), _) => config.backend = BackendConfig::Mock,
            (Some(BackendChoice::Http), BackendConfig::Mock) => {
                bail!("--backend http: the config has no [backend] section with kind = \"http\"")
            }
            _ => {}
        }
        config.experiment.validate()?;
        Ok(config)
    }

    /// Loads the config; on `--dry-run` also checks the inputs and reports
    /// `None` so the caller stops.
    fn prepare(&self) -> Result<Option<PipelineConfig>> {
        let config = self.load()?;
        if self.dry_run {
            run_pipeline(&config, &RunOptions { dry_run: true })?;
            println!("config and inputs OK ({})", self.config.display());
            return Ok(None);
        }
        Ok(Some(config))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(common) => {
            let Some(config) = common.prepare()? else { return Ok(()) };
            let manifest = run_pipeline(&config, &RunOptions { dry_run: false })?;
            info!("{} backend calls, {} seeds", manifest.backend_calls, manifest.runs.len());
            print_report(&config.run_dir)?;
            println!("manifest: {}", config.run_dir.join("manifest.json").display());
        }
        Command::BuildDataset(common) => {
            let Some(config) = common.prepare()? else { return Ok(()) };
            let stats = stage_build_dataset(&config)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Augment(common) => {
            let Some(config) = common.prepare()? else { return Ok(()) };
            let calls = stage_augment(&config)?;
            println!("relations written to {} ({calls} backend calls)", config.run_dir.join("relations.json").display());
        }
        Command::Train(common) => {
            let Some(config) = common.prepare()? else { return Ok(()) };
            for record in stage_train(&config)? {
                let last = record.final_snapshot().map(|s| s.train_losses.last().copied().unwrap_or(f64::NAN));
                println!("seed {}: {} tasks, final train loss {:.4}", record.seed, record.snapshots.len(), last.unwrap_or(f64::NAN));
            }
        }
        Command::Evaluate(common) => {
            let Some(config) = common.prepare()? else { return Ok(()) };
            for (seed, tables) in stage_evaluate(&config)? {
                for t in tables {
                    let scores: Vec<String> = t.scores.iter().map(|s| format!("{s:.2}")).collect();
                    println!("seed {seed} {}: {}", t.mode, scores.join(" "));
                }
            }
        }
        Command::Report(common) => {
            let Some(config) = common.prepare()? else { return Ok(()) };
            stage_report(&config)?;
            print_report(&config.run_dir)?;
        }
        Command::Stats { path } => {
            let file = if path.is_dir() { path.join("dataset.jsonl") } else { path };
            let dataset = load_dataset(&file)?;
            println!("{}", serde_json::to_string_pretty(&compute_stats(&dataset))?);
        }
        Command::Generate { out, seed, noisy } => generate(&out, seed, noisy)?,
    }
    Ok(())
}

fn print_report(run_dir: &Path) -> Result<()> {
    let path = run_dir.join("report.md");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    print!("{text}");
    Ok(())
}

/// Writes sentences, relations, gazetteer and gold OIE scripts as plain files
/// plus a config that reads them, so the file-based input path can be
/// exercised without external data.
fn generate(out: &Path, seed: u64, noisy: bool) -> Result<()> {
    let base = if noisy { SyntheticSpec::default() } else { SyntheticSpec::well_separated() };
    let corpus = SyntheticCorpus::generate(&SyntheticSpec { seed, ..base });
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    write_jsonl(&out.join("sentences.jsonl"), &corpus.sentences)?;
    write_json(&out.join("relations.json"), &corpus.relations)?;
    std::fs::write(out.join("gazetteer.txt"), corpus.gazetteer_entries.join("\n") + "\n")?;
    let dataset = build_open_dataset(&corpus.sentences, &corpus.gazetteer())?;
    let scripts: Vec<ScriptEntry> = gold_oie_scripts(&corpus, &dataset)
        .into_iter()
        .map(|(prompt, completion)| ScriptEntry { prompt, completion })
        .collect();
    write_jsonl(&out.join("scripts.jsonl"), &scripts)?;

    let config = PipelineConfig {
        run_dir: PathBuf::from("run"),
        backend: BackendConfig::Mock,
        modes: PredictionMode::ALL.to_vec(),
        f1: F1Kind::Micro,
        experiment: ExperimentConfig::toy(),
        data: DataSource::Files {
            sentences: PathBuf::from("sentences.jsonl"),
            format: "sentences".into(),
            relations: PathBuf::from("relations.json"),
            gazetteer: Some(PathBuf::from("gazetteer.txt")),
            scripts: Some(PathBuf::from("scripts.jsonl")),
        },
    };
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, config.to_toml_string())?;
    println!(
        "{} sentences, {} relations, {} scripted completions; run with `ofcre run --config {}`",
        corpus.sentences.len(),
        corpus.relations.len(),
        scripts.len(),
        config_path.display()
    );
    Ok(())
}
