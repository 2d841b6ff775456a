//! Command implementations behind the `set2seq` binary. Everything here is
//! a plain function over paths and parsed configs so integration tests can
//! drive the commands without spawning processes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use set2seq_core::checkpoint;
use set2seq_core::data::{
    self, load_manifest, read_ranking_csv, save_manifest, stratified_split, time_series_split,
    write_ranking_csv, LoadOptions, Manifest, SplitAssignment, SplitLabel, SynthConfig,
};
use set2seq_core::model::Model;
use set2seq_core::ranking::{borda_aggregate, pairwise_cosine_matrix, Ranking, TiePolicy};
use set2seq_core::seq_encoder::SetSequence;
use set2seq_core::train::{evaluate, train, TrainOutcome};

use crate::config::{RunConfig, SplitKind};

/// Everything `train` leaves on disk.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub run_manifest: PathBuf,
    pub outcome: TrainOutcome,
}

/// Self-describing record of a training run. Wall-clock time lives only
/// here; checkpoints and epoch metrics are byte-reproducible.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub provenance: String,
    pub created_unix_ms: u128,
    pub temporal_years: Vec<i32>,
    pub train_entities: usize,
    pub val_entities: usize,
    pub test_entities: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn load_corpus(config: &RunConfig, manifest_path: &Path) -> Result<Manifest> {
    load_manifest(
        manifest_path,
        LoadOptions {
            min_instances: config.data.min_instances,
        },
    )
    .with_context(|| format!("loading manifest {}", manifest_path.display()))
}

fn build_split(config: &RunConfig, manifest: &Manifest) -> Result<SplitAssignment> {
    match config.data.split {
        SplitKind::Stratified => {
            let ranking = manifest
                .ranking(&config.data.ranking)
                .context("stratified split needs the target ranking")?;
            Ok(stratified_split(
                manifest,
                ranking,
                config.data.split_seed,
                config.data.strata,
            )?)
        }
        SplitKind::TimeSeries => Ok(time_series_split(
            manifest,
            config.data.val_start_year,
            config.data.test_start_year,
        )),
    }
}

/// Sequences for the entities of one split bucket, in manifest order.
fn split_sequences(
    manifest: &Manifest,
    split: &SplitAssignment,
    label: SplitLabel,
    ranking_name: &str,
) -> Result<Vec<SetSequence>> {
    let targets = manifest.targets(ranking_name)?;
    let members = split.of(label);
    manifest
        .entities
        .iter()
        .filter(|e| members.contains(&e.entity_id))
        .map(|e| Ok(e.to_sequence(targets[&e.entity_id])?))
        .collect()
}

fn init_model(config: &RunConfig, manifest: &Manifest, years: &[i32]) -> Result<Model> {
    let spec = config.model_spec(manifest.feature_dim);
    Ok(Model::init(
        spec,
        years,
        config.model.oov_policy,
        config.train.seed,
    )?)
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainArtifacts> {
    let manifest = load_corpus(config, &config.data.manifest)?;
    let split = build_split(config, &manifest)?;
    let train_samples = split_sequences(&manifest, &split, SplitLabel::Train, &config.data.ranking)?;
    let val_samples = split_sequences(&manifest, &split, SplitLabel::Val, &config.data.ranking)?;
    let years = manifest.years_of(&split.train);

    let mut model = init_model(config, &manifest, &years)?;
    let outcome = train(&mut model, &train_samples, &val_samples, &config.train_settings())?;

    let out_dir = config.output.dir.clone();
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let checkpoint_path = out_dir.join("best.ckpt");
    checkpoint::save(&checkpoint_path, &model.store)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut lines = String::new();
    for record in &outcome.epochs {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    fs::write(&metrics_path, lines)?;

    let run_manifest = RunManifest {
        config: config.clone(),
        config_hash: config.config_hash(),
        seed: config.train.seed,
        provenance: format!(
            "set2seq-cli {} config {}",
            env!("CARGO_PKG_VERSION"),
            &config.config_hash()[..12]
        ),
        created_unix_ms: now_ms(),
        temporal_years: years,
        train_entities: split.train.len(),
        val_entities: split.val.len(),
        test_entities: split.test.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        epochs_run: outcome.epochs.len(),
    };
    let run_manifest_path = out_dir.join("run_manifest.json");
    fs::write(&run_manifest_path, serde_json::to_string_pretty(&run_manifest)?)?;

    log::info!(
        "trained {} epochs, best epoch {} (val loss {:.6})",
        outcome.epochs.len(),
        outcome.best_epoch,
        outcome.best_val_loss
    );
    Ok(TrainArtifacts {
        out_dir,
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        run_manifest: run_manifest_path,
        outcome,
    })
}

/// One evaluation record per ranking, as emitted on stdout (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub ranking_name: String,
    pub tau: f64,
    pub mae: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub tie_policy: TiePolicy,
    pub mse: f64,
}

#[derive(Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: SplitLabel,
    pub rankings: Vec<String>,
    pub config: Option<PathBuf>,
    pub tie_policy: Option<TiePolicy>,
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
}

/// Loads the run config for a checkpoint: an explicit `--config` TOML or
/// the `run_manifest.json` sitting next to the checkpoint. The run
/// manifest also pins the temporal-table years exactly as trained.
fn config_for_checkpoint(args: &EvalArgs) -> Result<(RunConfig, Option<Vec<i32>>)> {
    if let Some(path) = &args.config {
        return Ok((RunConfig::from_path(path)?, None));
    }
    let sibling = args
        .checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("run_manifest.json");
    let text = fs::read_to_string(&sibling).with_context(|| {
        format!(
            "no --config given and {} is missing; pass --config or point at a run directory",
            sibling.display()
        )
    })?;
    let run: RunManifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", sibling.display()))?;
    Ok((run.config, Some(run.temporal_years)))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<MetricRecord>> {
    let (config, years_override) = config_for_checkpoint(args)?;
    let manifest = load_corpus(&config, &args.manifest)?;
    let split = build_split(&config, &manifest)?;
    let years = years_override.unwrap_or_else(|| manifest.years_of(&split.train));

    let mut model = init_model(&config, &manifest, &years)?;
    let loaded = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    model
        .store
        .load_values_from(&loaded)
        .context("checkpoint does not match the configured architecture")?;

    let tie_policy = args.tie_policy.unwrap_or(config.output.tie_policy);
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| args.checkpoint.parent().map(|p| p.to_path_buf()))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;

    let mut records = Vec::new();
    for name in &args.rankings {
        let samples = split_sequences(&manifest, &split, args.split, name)?;
        if samples.is_empty() {
            bail!("split '{}' holds no entities", args.split);
        }
        let (pairs, metrics) = evaluate(&model, &samples, tie_policy, args.threads)?;

        let mut csv = String::from("entity_id,target,prediction\n");
        for p in &pairs {
            csv.push_str(&format!("{},{},{}\n", p.entity_id, p.y, p.y_hat));
        }
        let csv_path = out_dir.join(format!("predictions.{}.{}.csv", args.split, name));
        fs::write(&csv_path, csv)?;

        records.push(MetricRecord {
            ranking_name: name.clone(),
            tau: metrics.tau,
            mae: metrics.mae,
            k: metrics.k,
            tie_policy,
            mse: metrics.mse,
        });
    }
    let metrics_path = out_dir.join(format!("metrics_eval.{}.json", args.split));
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(metrics_path, lines)?;
    Ok(records)
}

pub fn cmd_split(
    manifest_path: &Path,
    config: &RunConfig,
    out: &Path,
) -> Result<String> {
    let manifest = load_corpus(config, manifest_path)?;
    let split = build_split(config, &manifest)?;
    let csv = split.to_csv_string();
    fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    Ok(csv)
}

pub fn cmd_aggregate(inputs: &[PathBuf], out: &Path) -> Result<Ranking> {
    if inputs.is_empty() {
        bail!("aggregate needs at least one ranking CSV");
    }
    let mut rankings = Vec::with_capacity(inputs.len());
    for path in inputs {
        rankings.push(read_ranking_csv(path)?);
    }
    let universe: BTreeSet<String> = rankings
        .iter()
        .flat_map(|r| r.ids().map(|s| s.to_string()))
        .collect();
    let aggregated = borda_aggregate(&rankings, &universe)?;
    write_ranking_csv(out, &aggregated)?;
    Ok(aggregated)
}

pub fn cmd_synth(config: &SynthConfig, out: &Path) -> Result<()> {
    let manifest = data::synthesize(config)?;
    save_manifest(out, &manifest)?;
    log::info!(
        "wrote {} entities ({} rankings) to {}",
        manifest.entities.len(),
        manifest.rankings.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug)]
pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub config: Option<PathBuf>,
    pub entity_a: String,
    pub entity_b: String,
    pub first_n: usize,
    pub out_dir: PathBuf,
}

/// The five panels of the embedding analysis, in pipeline order.
pub const ANALYSIS_PANELS: [&str; 5] = ["set_repr", "positional", "temporal", "composed", "transformer"];

#[derive(Debug)]
pub struct AnalyzeArtifacts {
    /// Panel name → first_n x first_n cosine-distance matrix.
    pub panels: Vec<(String, Vec<Vec<f64>>)>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalyzeArtifacts> {
    let eval_args = EvalArgs {
        checkpoint: args.checkpoint.clone(),
        manifest: args.manifest.clone(),
        split: SplitLabel::Test,
        rankings: vec![],
        config: args.config.clone(),
        tie_policy: None,
        out_dir: None,
        threads: 1,
    };
    let (config, years_override) = config_for_checkpoint(&eval_args)?;
    if !(config.model.use_positional && config.model.use_temporal) {
        bail!("analysis requires a set2seq model with positional and temporal channels enabled");
    }
    let manifest = load_corpus(&config, &args.manifest)?;
    let split = build_split(&config, &manifest)?;
    let years = years_override.unwrap_or_else(|| manifest.years_of(&split.train));
    let mut model = init_model(&config, &manifest, &years)?;
    let loaded = checkpoint::load(&args.checkpoint)?;
    model
        .store
        .load_values_from(&loaded)
        .context("checkpoint does not match the configured architecture")?;

    let sequence_of = |id: &str| -> Result<SetSequence> {
        let record = manifest
            .entity(id)
            .ok_or_else(|| anyhow!("entity '{id}' not in manifest"))?;
        Ok(record.to_sequence(0.0)?)
    };
    let seq_a = sequence_of(&args.entity_a)?;
    let seq_b = sequence_of(&args.entity_b)?;
    let va = model.analysis_vectors(&seq_a, args.first_n)?;
    let vb = model.analysis_vectors(&seq_b, args.first_n)?;

    let stages = [
        (&va.set_repr, &vb.set_repr),
        (&va.positional, &vb.positional),
        (&va.temporal, &vb.temporal),
        (&va.composed, &vb.composed),
        (&va.transformed, &vb.transformed),
    ];
    fs::create_dir_all(&args.out_dir)?;
    let mut panels = Vec::new();
    let mut files = Vec::new();
    for (name, (a, b)) in ANALYSIS_PANELS.iter().zip(stages) {
        let matrix = pairwise_cosine_matrix(a, b)?;
        let path = args.out_dir.join(format!(
            "analysis.{}.{}.{}.csv",
            args.entity_a, args.entity_b, name
        ));
        let mut csv = String::new();
        for row in &matrix {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        fs::write(&path, csv)?;
        panels.push((name.to_string(), matrix));
        files.push(path);
    }
    Ok(AnalyzeArtifacts { panels, files })
}

/// Worker-thread cap for evaluation, from `SET2SEQ_THREADS` (default 1).
pub fn eval_threads_from_env() -> usize {
    std::env::var("SET2SEQ_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
