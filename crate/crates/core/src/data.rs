//! Dataset protocol: JSONL manifests with inline feature vectors, ranking
//! sidecar CSVs, synthetic corpus generation, the stratified and
//! time-series split strategies, and the deterministic toy featurizer that
//! stands in for a visual backbone.
//!
//! Manifest format (one JSON object per line):
//!
//! ```text
//! {"schema":"set2seq-manifest-v1","feature_dim":8,"min_instances":1,
//!  "rankings":{"target":"corpus.ranking.target.csv"},"metadata":{...}}
//! {"entity_id":"e0000","career":[{"year":1901,"instances":[[...],...]},...]}
//! ...
//! ```
//!
//! Ranking sidecars are `entity_id,rank` CSVs resolved relative to the
//! manifest file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ranking::{Ranking, RankingError};
use crate::seq_encoder::{ModelError, SetSequence};
use crate::set_encoders::InstanceSet;

pub const MANIFEST_SCHEMA: &str = "set2seq-manifest-v1";
/// Default minimum artworks per entity, mirroring the source corpus rule.
pub const DEFAULT_MIN_INSTANCES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("entity '{entity_id}' has {found} instances, below the minimum of {required}")]
    TooFewInstances {
        entity_id: String,
        found: usize,
        required: usize,
    },
    #[error("entity '{entity_id}', year {year}: feature vector has {found} dims, manifest declares {expected}")]
    FeatureDim {
        entity_id: String,
        year: i32,
        expected: usize,
        found: usize,
    },
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("unknown ranking '{name}'; available: {}", available.join(", "))]
    UnknownRanking {
        name: String,
        available: Vec<String>,
    },
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("featurizer input is empty")]
    EmptyFeaturizerInput,
}

fn io_err(path: &Path, source: io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ── Manifest ─────────────────────────────────────────────────────────

/// One entity's career: years sorted ascending, one instance set per year.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub entity_id: String,
    pub career: Vec<(i32, InstanceSet)>,
}

impl EntityRecord {
    pub fn start_year(&self) -> i32 {
        self.career.first().expect("careers are non-empty").0
    }

    pub fn total_instances(&self) -> usize {
        self.career.iter().map(|(_, s)| s.n_instances()).sum()
    }

    pub fn to_sequence(&self, target: f64) -> Result<SetSequence, ModelError> {
        SetSequence::from_years(self.entity_id.clone(), self.career.clone(), target)
    }
}

/// A fully validated dataset: entity careers plus named rankings.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub feature_dim: usize,
    pub min_instances: usize,
    pub metadata: BTreeMap<String, String>,
    pub entities: Vec<EntityRecord>,
    pub rankings: BTreeMap<String, Ranking>,
}

impl Manifest {
    pub fn universe(&self) -> BTreeSet<String> {
        self.entities.iter().map(|e| e.entity_id.clone()).collect()
    }

    pub fn entity(&self, id: &str) -> Option<&EntityRecord> {
        self.entities.iter().find(|e| e.entity_id == id)
    }

    pub fn ranking(&self, name: &str) -> Result<&Ranking, DataError> {
        self.rankings.get(name).ok_or_else(|| DataError::UnknownRanking {
            name: name.to_string(),
            available: self.rankings.keys().cloned().collect(),
        })
    }

    /// Regression targets in [0, 1] for the named ranking over the full
    /// entity universe (rank 1 maps to 1).
    pub fn targets(&self, ranking_name: &str) -> Result<BTreeMap<String, f64>, DataError> {
        let ranking = self.ranking(ranking_name)?;
        let universe = self.universe();
        Ok(ranking.to_targets(universe.iter().map(|s| s.as_str())))
    }

    /// All entities as sequences with targets from the named ranking.
    pub fn sequences(&self, ranking_name: &str) -> Result<Vec<SetSequence>, DataError> {
        let targets = self.targets(ranking_name)?;
        self.entities
            .iter()
            .map(|e| Ok(e.to_sequence(targets[&e.entity_id])?))
            .collect()
    }

    /// Distinct years observed over a set of entities (temporal table rows).
    pub fn years_of(&self, ids: &BTreeSet<String>) -> Vec<i32> {
        let mut years: Vec<i32> = self
            .entities
            .iter()
            .filter(|e| ids.contains(&e.entity_id))
            .flat_map(|e| e.career.iter().map(|(y, _)| *y))
            .collect();
        years.sort_unstable();
        years.dedup();
        years
    }
}

// ── JSONL wire types ─────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    schema: String,
    feature_dim: usize,
    #[serde(default)]
    min_instances: Option<usize>,
    #[serde(default)]
    rankings: BTreeMap<String, String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EntityLine {
    entity_id: String,
    career: Vec<CareerLine>,
}

#[derive(Serialize, Deserialize)]
struct CareerLine {
    year: i32,
    instances: Vec<Vec<f64>>,
}

/// Loader knobs; `min_instances` overrides the manifest header when set.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub min_instances: Option<usize>,
}

pub fn load_manifest(path: &Path, options: LoadOptions) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let path_str = path.display().to_string();
    let mut lines = text.lines().enumerate();

    let (_, header_text) = lines.next().ok_or_else(|| DataError::Parse {
        path: path_str.clone(),
        line: 1,
        message: "empty manifest".into(),
    })?;
    let header: HeaderLine = serde_json::from_str(header_text).map_err(|e| DataError::Parse {
        path: path_str.clone(),
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(DataError::Parse {
            path: path_str,
            line: 1,
            message: format!("unknown schema '{}', expected '{MANIFEST_SCHEMA}'", header.schema),
        });
    }
    if header.feature_dim == 0 {
        return Err(DataError::Parse {
            path: path_str,
            line: 1,
            message: "feature_dim must be at least 1".into(),
        });
    }
    let min_instances = options
        .min_instances
        .or(header.min_instances)
        .unwrap_or(DEFAULT_MIN_INSTANCES);

    let mut entities = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line_text) in lines {
        let line_no = idx + 1;
        if line_text.trim().is_empty() {
            continue;
        }
        let parsed: EntityLine = serde_json::from_str(line_text).map_err(|e| DataError::Parse {
            path: path_str.clone(),
            line: line_no,
            message: format!("bad entity record: {e}"),
        })?;
        let entity = validate_entity(parsed, header.feature_dim, min_instances, &path_str, line_no)?;
        if !seen.insert(entity.entity_id.clone()) {
            return Err(DataError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: format!("duplicate entity_id '{}'", entity.entity_id),
            });
        }
        entities.push(entity);
    }

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rankings = BTreeMap::new();
    for (name, rel) in &header.rankings {
        let csv_path = base.join(rel);
        rankings.insert(name.clone(), read_ranking_csv(&csv_path)?);
    }

    Ok(Manifest {
        feature_dim: header.feature_dim,
        min_instances,
        metadata: header.metadata,
        entities,
        rankings,
    })
}

fn validate_entity(
    line: EntityLine,
    feature_dim: usize,
    min_instances: usize,
    path: &str,
    line_no: usize,
) -> Result<EntityRecord, DataError> {
    let schema_err = |message: String| DataError::Parse {
        path: path.to_string(),
        line: line_no,
        message,
    };
    if line.entity_id.is_empty() {
        return Err(schema_err("empty entity_id".into()));
    }
    if line.entity_id.contains(',') || line.entity_id.contains('\n') {
        return Err(schema_err(format!(
            "entity_id '{}' contains a comma or newline",
            line.entity_id
        )));
    }
    if line.career.is_empty() {
        return Err(schema_err(format!("entity '{}' has no career years", line.entity_id)));
    }
    // group instances by year, then sort years ascending
    let mut by_year: BTreeMap<i32, Vec<Vec<f64>>> = BTreeMap::new();
    for c in line.career {
        if c.instances.is_empty() {
            return Err(schema_err(format!(
                "entity '{}', year {} has no instances",
                line.entity_id, c.year
            )));
        }
        for inst in &c.instances {
            if inst.len() != feature_dim {
                return Err(DataError::FeatureDim {
                    entity_id: line.entity_id.clone(),
                    year: c.year,
                    expected: feature_dim,
                    found: inst.len(),
                });
            }
            if inst.iter().any(|v| !v.is_finite()) {
                return Err(schema_err(format!(
                    "entity '{}', year {} has a non-finite feature value",
                    line.entity_id, c.year
                )));
            }
        }
        by_year.entry(c.year).or_default().extend(c.instances);
    }
    let career: Vec<(i32, InstanceSet)> = by_year
        .into_iter()
        .map(|(year, rows)| {
            let set = InstanceSet::from_rows(&rows).expect("rows validated above");
            (year, set)
        })
        .collect();
    let record = EntityRecord {
        entity_id: line.entity_id,
        career,
    };
    let found = record.total_instances();
    if found < min_instances {
        return Err(DataError::TooFewInstances {
            entity_id: record.entity_id,
            found,
            required: min_instances,
        });
    }
    Ok(record)
}

/// Serializes the manifest; ranking sidecars are written next to `path` as
/// `<stem>.ranking.<name>.csv`.
pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "manifest".to_string());
    let mut ranking_files = BTreeMap::new();
    for name in manifest.rankings.keys() {
        ranking_files.insert(name.clone(), format!("{stem}.ranking.{name}.csv"));
    }
    let header = HeaderLine {
        schema: MANIFEST_SCHEMA.to_string(),
        feature_dim: manifest.feature_dim,
        min_instances: Some(manifest.min_instances),
        rankings: ranking_files.clone(),
        metadata: manifest.metadata.clone(),
    };
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for e in &manifest.entities {
        let line = EntityLine {
            entity_id: e.entity_id.clone(),
            career: e
                .career
                .iter()
                .map(|(year, set)| CareerLine {
                    year: *year,
                    instances: set.rows().map(|r| r.to_vec()).collect(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("entity serializes"));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for (name, rel) in &ranking_files {
        write_ranking_csv(&base.join(rel), &manifest.rankings[name])?;
    }
    Ok(())
}

// ── Ranking CSVs ─────────────────────────────────────────────────────

/// Reads an `entity_id,rank` CSV (header required, ranks >= 1).
pub fn read_ranking_csv(path: &Path) -> Result<Ranking, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let path_str = path.display().to_string();
    let mut entries = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line_no == 1 {
            if line.trim() != "entity_id,rank" {
                return Err(DataError::Parse {
                    path: path_str,
                    line: 1,
                    message: format!("expected header 'entity_id,rank', got '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, rank_text) = line.split_once(',').ok_or_else(|| DataError::Parse {
            path: path_str.clone(),
            line: line_no,
            message: "expected 'entity_id,rank'".into(),
        })?;
        let rank: u32 = rank_text.trim().parse().map_err(|e| DataError::Parse {
            path: path_str.clone(),
            line: line_no,
            message: format!("bad rank '{rank_text}': {e}"),
        })?;
        if rank == 0 {
            return Err(DataError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: "ranks start at 1".into(),
            });
        }
        if entries.insert(id.to_string(), rank).is_some() {
            return Err(DataError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: format!("duplicate entity '{id}'"),
            });
        }
    }
    if entries.is_empty() {
        return Err(DataError::Parse {
            path: path_str,
            line: 1,
            message: "ranking has no entries".into(),
        });
    }
    Ok(Ranking::new(entries)?)
}

/// Writes an `entity_id,rank` CSV, rows ordered by (rank, id).
pub fn write_ranking_csv(path: &Path, ranking: &Ranking) -> Result<(), DataError> {
    let mut rows: Vec<(u32, &str)> = ranking.entries().map(|(id, r)| (r, id)).collect();
    rows.sort();
    let mut out = String::from("entity_id,rank\n");
    for (rank, id) in rows {
        out.push_str(&format!("{id},{rank}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

// ── Splits ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Stratified,
    TimeSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitLabel::Train => write!(f, "train"),
            SplitLabel::Val => write!(f, "val"),
            SplitLabel::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for SplitLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "val" => Ok(SplitLabel::Val),
            "test" => Ok(SplitLabel::Test),
            other => Err(format!("unknown split label '{other}'")),
        }
    }
}

/// Disjoint train/val/test entity sets covering the manifest universe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub strategy: SplitStrategy,
    pub seed: Option<u64>,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn of(&self, label: SplitLabel) -> &BTreeSet<String> {
        match label {
            SplitLabel::Train => &self.train,
            SplitLabel::Val => &self.val,
            SplitLabel::Test => &self.test,
        }
    }

    pub fn label_of(&self, id: &str) -> Option<SplitLabel> {
        if self.train.contains(id) {
            Some(SplitLabel::Train)
        } else if self.val.contains(id) {
            Some(SplitLabel::Val)
        } else if self.test.contains(id) {
            Some(SplitLabel::Test)
        } else {
            None
        }
    }

    /// `entity_id,split` CSV body, rows sorted by entity id.
    pub fn to_csv_string(&self) -> String {
        let mut rows: Vec<(String, SplitLabel)> = Vec::new();
        for (set, label) in [
            (&self.train, SplitLabel::Train),
            (&self.val, SplitLabel::Val),
            (&self.test, SplitLabel::Test),
        ] {
            rows.extend(set.iter().map(|id| (id.clone(), label)));
        }
        rows.sort();
        let mut out = String::from("entity_id,split\n");
        for (id, label) in rows {
            out.push_str(&format!("{id},{label}\n"));
        }
        out
    }
}

/// 70/10/20 counts with train absorbing the rounding remainder.
fn split_counts(n: usize) -> (usize, usize, usize) {
    let n_test = (0.2 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let n_train = n - n_val - n_test;
    (n_train, n_val, n_test)
}

/// Ranking-based stratified split: entities are bucketed into
/// rank-quantile strata and each stratum is split 70/10/20 by a seeded
/// shuffle. Falls back to fewer strata (with a warning) when there are
/// fewer entities than strata.
pub fn stratified_split(
    manifest: &Manifest,
    ranking: &Ranking,
    seed: u64,
    n_strata: usize,
) -> Result<SplitAssignment, DataError> {
    let universe = manifest.universe();
    if universe.is_empty() {
        return Err(RankingError::EmptyUniverse.into());
    }
    let extended = ranking.extended_over(universe.iter().map(|s| s.as_str()));
    let mut ordered: Vec<(u32, String)> = universe
        .iter()
        .map(|id| (extended.rank_of(id).expect("extended covers universe"), id.clone()))
        .collect();
    ordered.sort();

    let n = ordered.len();
    let strata = n_strata.max(1).min(n);
    if strata < n_strata {
        log::warn!("only {n} entities for {n_strata} strata; falling back to {strata}");
    }
    let base = n / strata;
    let remainder = n % strata;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = SplitAssignment {
        strategy: SplitStrategy::Stratified,
        seed: Some(seed),
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    let mut cursor = 0;
    for s in 0..strata {
        let size = base + usize::from(s < remainder);
        let mut stratum: Vec<String> = ordered[cursor..cursor + size]
            .iter()
            .map(|(_, id)| id.clone())
            .collect();
        cursor += size;
        stratum.shuffle(&mut rng);
        let (n_train, n_val, _n_test) = split_counts(stratum.len());
        for (i, id) in stratum.into_iter().enumerate() {
            if i < n_train {
                assignment.train.insert(id);
            } else if i < n_train + n_val {
                assignment.val.insert(id);
            } else {
                assignment.test.insert(id);
            }
        }
    }
    Ok(assignment)
}

/// Career-start-year split: train before `val_start` (exclusive), val in
/// `[val_start, test_start)`, test at or after `test_start`. The reference
/// boundaries are 1930 and 1951.
pub fn time_series_split(manifest: &Manifest, val_start: i32, test_start: i32) -> SplitAssignment {
    let mut assignment = SplitAssignment {
        strategy: SplitStrategy::TimeSeries,
        seed: None,
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for e in &manifest.entities {
        let start = e.start_year();
        if start < val_start {
            assignment.train.insert(e.entity_id.clone());
        } else if start < test_start {
            assignment.val.insert(e.entity_id.clone());
        } else {
            assignment.test.insert(e.entity_id.clone());
        }
    }
    for (set, name) in [
        (&assignment.train, "train"),
        (&assignment.val, "val"),
        (&assignment.test, "test"),
    ] {
        if set.is_empty() {
            log::warn!("time-series split produced an empty {name} set");
        }
    }
    assignment
}

pub const TIME_SERIES_VAL_START: i32 = 1930;
pub const TIME_SERIES_TEST_START: i32 = 1951;

// ── Synthesis ────────────────────────────────────────────────────────

/// Closed-form rules mapping a career to its raw target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Mean of per-year signals: order-free.
    StaticMean,
    /// Position-decayed sum of per-year signals (weight 0.5^position):
    /// the target depends on WHEN the high-signal years occur.
    EarlyBurst,
    /// Mean of per-year signals plus a hidden per-calendar-year offset:
    /// the target depends on the years themselves.
    EpochDrift,
}

impl TargetRule {
    pub fn describe(&self) -> &'static str {
        match self {
            TargetRule::StaticMean => "mean_i(mean_j(w.x_ij))",
            TargetRule::EarlyBurst => "sum_i(0.5^i * mean_j(w.x_ij))",
            TargetRule::EpochDrift => "mean_i(mean_j(w.x_ij) + offset(year_i))",
        }
    }
}

/// Synthetic corpus configuration. Start years are uniform over
/// `year_range` (inclusive), careers span consecutive years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub year_range: (i32, i32),
    pub career_len_range: (usize, usize),
    pub instances_range: (usize, usize),
    pub d_in: usize,
    pub target_rule: TargetRule,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.n_entities == 0 {
            return Err(DataError::InvalidConfig("n_entities must be >= 1".into()));
        }
        if self.d_in == 0 {
            return Err(DataError::InvalidConfig("d_in must be >= 1".into()));
        }
        if self.year_range.0 > self.year_range.1 {
            return Err(DataError::InvalidConfig(format!(
                "empty year range {:?}",
                self.year_range
            )));
        }
        if self.career_len_range.0 == 0 || self.career_len_range.0 > self.career_len_range.1 {
            return Err(DataError::InvalidConfig(format!(
                "bad career length range {:?}",
                self.career_len_range
            )));
        }
        if self.instances_range.0 == 0 || self.instances_range.0 > self.instances_range.1 {
            return Err(DataError::InvalidConfig(format!(
                "bad instances range {:?}",
                self.instances_range
            )));
        }
        Ok(())
    }
}

/// Evaluates the closed-form target rule on one career given the latent
/// signal direction and (for epoch drift) the per-year offsets.
pub fn evaluate_target_rule(
    rule: TargetRule,
    career: &[(i32, InstanceSet)],
    signal: &[f64],
    year_offsets: &BTreeMap<i32, f64>,
) -> f64 {
    let per_year: Vec<(i32, f64)> = career
        .iter()
        .map(|(year, set)| {
            let mean_signal = set
                .rows()
                .map(|r| r.iter().zip(signal).map(|(x, w)| x * w).sum::<f64>())
                .sum::<f64>()
                / set.n_instances() as f64;
            (*year, mean_signal)
        })
        .collect();
    let n = per_year.len() as f64;
    match rule {
        TargetRule::StaticMean => per_year.iter().map(|(_, s)| s).sum::<f64>() / n,
        TargetRule::EarlyBurst => per_year
            .iter()
            .enumerate()
            .map(|(i, (_, s))| 0.5_f64.powi(i as i32) * s)
            .sum(),
        TargetRule::EpochDrift => {
            per_year
                .iter()
                .map(|(y, s)| s + year_offsets.get(y).copied().unwrap_or(0.0))
                .sum::<f64>()
                / n
        }
    }
}

/// Deterministic synthetic corpus: careers of instance sets with targets
/// from the configured rule, rank-converted into a `target` ranking.
pub fn synthesize(config: &SynthConfig) -> Result<Manifest, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");

    // latent signal direction, unit norm
    let mut signal: Vec<f64> = (0..config.d_in).map(|_| rng.sample(normal)).collect();
    let norm = signal.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut signal {
        *v /= norm;
    }

    // hidden per-year offsets over every reachable year
    let last_year = config.year_range.1 + config.career_len_range.1 as i32;
    let year_offsets: BTreeMap<i32, f64> = (config.year_range.0..=last_year)
        .map(|y| (y, rng.sample(normal)))
        .collect();

    let width = (config.n_entities.max(2) - 1).to_string().len().max(4);
    let mut entities = Vec::with_capacity(config.n_entities);
    let mut raw_targets: Vec<(String, f64)> = Vec::with_capacity(config.n_entities);
    for i in 0..config.n_entities {
        let entity_id = format!("e{i:0width$}");
        let start = rng.random_range(config.year_range.0..=config.year_range.1);
        let len = rng.random_range(config.career_len_range.0..=config.career_len_range.1);
        let mut career = Vec::with_capacity(len);
        for k in 0..len {
            let n_inst = rng.random_range(config.instances_range.0..=config.instances_range.1);
            let rows: Vec<Vec<f64>> = (0..n_inst)
                .map(|_| (0..config.d_in).map(|_| rng.sample(normal)).collect())
                .collect();
            career.push((start + k as i32, InstanceSet::from_rows(&rows).expect("non-empty rows")));
        }
        let raw = evaluate_target_rule(config.target_rule, &career, &signal, &year_offsets);
        raw_targets.push((entity_id.clone(), raw));
        entities.push(EntityRecord { entity_id, career });
    }

    let target_ranking = Ranking::from_scores(raw_targets)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), "synthesize".into());
    metadata.insert("target_rule".into(), format!("{:?}", config.target_rule));
    metadata.insert("target_rule_formula".into(), config.target_rule.describe().into());
    metadata.insert("seed".into(), config.seed.to_string());
    metadata.insert(
        "config".into(),
        serde_json::to_string(config).expect("config serializes"),
    );

    let mut rankings = BTreeMap::new();
    rankings.insert("target".to_string(), target_ranking);
    Ok(Manifest {
        feature_dim: config.d_in,
        min_instances: 1,
        metadata,
        entities,
        rankings,
    })
}

// ── Toy featurizer ───────────────────────────────────────────────────

/// Deterministic stand-in for a visual backbone: hashes the input bytes,
/// seeds a generator, and emits a unit-norm pseudo-random vector. The same
/// bytes always produce the same vector.
pub fn toy_featurizer(image_stub: &[u8], d_in: usize) -> Result<Vec<f64>, DataError> {
    if image_stub.is_empty() {
        return Err(DataError::EmptyFeaturizerInput);
    }
    if d_in == 0 {
        return Err(DataError::InvalidConfig("featurizer d_in must be >= 1".into()));
    }
    let digest = Sha256::digest(image_stub);
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d_in).map(|_| rng.sample(normal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
}
