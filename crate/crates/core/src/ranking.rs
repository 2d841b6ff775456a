//! Pointwise learning-to-rank: the MSE objective, rank/score scaling,
//! Kendall's tau and MAE evaluation, Borda-count rank aggregation, and the
//! cosine-distance utilities used by the embedding analysis.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankingError {
    #[error("metric needs at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("length mismatch: target has {target} values, predicted has {predicted}")]
    LengthMismatch { target: usize, predicted: usize },
    #[error("vector for '{0}' has zero norm")]
    ZeroNorm(String),
    #[error("k = {k} exceeds corpus size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("empty entity universe")]
    EmptyUniverse,
    #[error("ranking is empty")]
    EmptyRanking,
}

// ── Rankings ─────────────────────────────────────────────────────────

/// A mapping entity → rank position with 1 as the best position and ties
/// allowed. Positions are canonicalized to dense ranking on construction
/// (1,2,2,3 — never 1,2,2,4). Entities outside a ranking are treated as
/// tied in one extra last position wherever a total ranking is needed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    entries: BTreeMap<String, u32>,
}

impl Ranking {
    /// Canonicalizes arbitrary positive positions into dense ranks.
    pub fn new(raw: BTreeMap<String, u32>) -> Result<Self, RankingError> {
        if raw.is_empty() {
            return Err(RankingError::EmptyRanking);
        }
        let distinct: BTreeSet<u32> = raw.values().copied().collect();
        let remap: BTreeMap<u32, u32> = distinct
            .into_iter()
            .enumerate()
            .map(|(i, r)| (r, i as u32 + 1))
            .collect();
        let entries = raw.into_iter().map(|(id, r)| (id, remap[&r])).collect();
        Ok(Ranking { entries })
    }

    /// Builds a dense ranking from scores, higher score = better rank.
    /// Exactly equal scores share a position.
    pub fn from_scores<I: IntoIterator<Item = (String, f64)>>(scores: I) -> Result<Self, RankingError> {
        let mut items: Vec<(String, f64)> = scores.into_iter().collect();
        if items.is_empty() {
            return Err(RankingError::EmptyRanking);
        }
        items.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are comparable").then(a.0.cmp(&b.0)));
        let mut entries = BTreeMap::new();
        let mut rank = 0u32;
        let mut prev: Option<f64> = None;
        for (id, score) in items {
            if prev != Some(score) {
                rank += 1;
                prev = Some(score);
            }
            entries.insert(id, rank);
        }
        Ok(Ranking { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rank_of(&self, id: &str) -> Option<u32> {
        self.entries.get(id).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u32)> {
        self.entries.iter().map(|(id, r)| (id.as_str(), *r))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Highest (worst) position value.
    pub fn max_position(&self) -> u32 {
        self.entries.values().copied().max().unwrap_or(0)
    }

    /// Extends the ranking over `universe`: entities not ranked share one
    /// extra last position. Entities already ranked keep their positions.
    pub fn extended_over<'a, I: IntoIterator<Item = &'a str>>(&self, universe: I) -> Ranking {
        let mut entries = self.entries.clone();
        let last = self.max_position() + 1;
        for id in universe {
            entries.entry(id.to_string()).or_insert(last);
        }
        Ranking { entries }
    }

    /// Regression targets in [0, 1] over `universe`: rank 1 maps to 1
    /// (score = max_rank - rank, then min-max scaled).
    pub fn to_targets<'a, I: IntoIterator<Item = &'a str>>(&self, universe: I) -> BTreeMap<String, f64> {
        let extended = self.extended_over(universe);
        let max_rank = extended.max_position();
        let scores: Vec<f64> = extended
            .entries
            .values()
            .map(|&r| (max_rank - r) as f64)
            .collect();
        let scaled = minmax_scale(&scores);
        extended
            .entries
            .keys()
            .cloned()
            .zip(scaled)
            .collect()
    }
}

// ── Losses and scaling ───────────────────────────────────────────────

/// One evaluated sample: target in [0, 1] and the model's prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub entity_id: String,
    pub y: f64,
    pub y_hat: f64,
}

/// Mean squared error over the pairs.
pub fn mse_loss(pairs: &[EvalPair]) -> Result<f64, RankingError> {
    if pairs.is_empty() {
        return Err(RankingError::TooFewValues { needed: 1, got: 0 });
    }
    let k = pairs.len() as f64;
    Ok(pairs.iter().map(|p| (p.y - p.y_hat) * (p.y - p.y_hat)).sum::<f64>() / k)
}

/// MSE assembled on the graph over prediction nodes (each shape `[1]`),
/// differentiable w.r.t. the predictions: gradient is 2(ŷ_k − y_k)/K.
pub fn mse_loss_node(g: &mut Graph, preds: &[NodeId], targets: &[f64]) -> Result<NodeId, TensorError> {
    assert_eq!(preds.len(), targets.len());
    let stacked = g.stack_rows(preds)?;
    let flat = g.reshape(stacked, vec![preds.len()])?;
    let t = g.constant(vec![targets.len()], targets.to_vec())?;
    let d = g.sub(flat, t)?;
    let sq = g.mul(d, d)?;
    let total = g.sum_all(sq);
    Ok(g.scale(total, 1.0 / preds.len() as f64))
}

/// Min-max scaling into [0, 1]; a constant list maps to all 0.5.
pub fn minmax_scale(values: &[f64]) -> Vec<f64> {
    let min = values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !(max > min) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

// ── Rank correlation and error ───────────────────────────────────────

/// How pairs tied in the target are treated by Kendall's tau.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Target-tied pairs are excluded from numerator and denominator
    /// (concordant − discordant over tie-free pairs).
    SkipTies,
    /// Literal form: denominator K(K−1)/2 over all pairs, strictly
    /// discordant pairs count as inversions.
    StrictEq9,
}

/// Kendall's tau between the orderings induced by `target` and
/// `predicted`, in [-1, 1].
pub fn kendall_tau(target: &[f64], predicted: &[f64], policy: TiePolicy) -> Result<f64, RankingError> {
    if target.len() != predicted.len() {
        return Err(RankingError::LengthMismatch {
            target: target.len(),
            predicted: predicted.len(),
        });
    }
    if target.len() < 2 {
        return Err(RankingError::TooFewValues {
            needed: 2,
            got: target.len(),
        });
    }
    // f64::signum maps 0.0 to 1.0, so spell out the three-way sign
    fn sign(x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
    let k = target.len();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut target_untied = 0u64;
    for i in 0..k {
        for j in i + 1..k {
            let st = sign(target[i] - target[j]);
            let sp = sign(predicted[i] - predicted[j]);
            if st != 0.0 {
                target_untied += 1;
            }
            let prod = st * sp;
            if prod > 0.0 {
                concordant += 1;
            } else if prod < 0.0 {
                discordant += 1;
            }
        }
    }
    let all_pairs = (k * (k - 1) / 2) as f64;
    match policy {
        TiePolicy::SkipTies => {
            if target_untied == 0 {
                // a fully tied target carries no ordering information
                return Ok(0.0);
            }
            Ok((concordant as f64 - discordant as f64) / target_untied as f64)
        }
        TiePolicy::StrictEq9 => Ok(1.0 - 2.0 * discordant as f64 / all_pairs),
    }
}

/// Mean absolute error over [0, 1]-scaled values.
pub fn mae(target: &[f64], predicted: &[f64]) -> Result<f64, RankingError> {
    if target.len() != predicted.len() {
        return Err(RankingError::LengthMismatch {
            target: target.len(),
            predicted: predicted.len(),
        });
    }
    if target.is_empty() {
        return Err(RankingError::TooFewValues { needed: 1, got: 0 });
    }
    Ok(target
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p).abs())
        .sum::<f64>()
        / target.len() as f64)
}

// ── Borda aggregation ────────────────────────────────────────────────

/// Borda-count aggregation over `universe`. Every input ranking is
/// extended so unranked entities tie in one extra last position; an entity
/// at dense position p in a ranking with P positions scores P − p; total
/// scores are summed over rankings and the result is dense-ranked with
/// score ties sharing a position.
pub fn borda_aggregate(rankings: &[Ranking], universe: &BTreeSet<String>) -> Result<Ranking, RankingError> {
    if universe.is_empty() {
        return Err(RankingError::EmptyUniverse);
    }
    if rankings.is_empty() {
        return Err(RankingError::EmptyRanking);
    }
    let mut totals: BTreeMap<String, f64> = universe.iter().map(|id| (id.clone(), 0.0)).collect();
    for ranking in rankings {
        let extended = ranking.extended_over(universe.iter().map(|s| s.as_str()));
        let n_positions = extended.max_position();
        for (id, rank) in extended.entries() {
            if let Some(total) = totals.get_mut(id) {
                *total += (n_positions - rank) as f64;
            }
        }
    }
    Ranking::from_scores(totals)
}

// ── Cosine analysis ──────────────────────────────────────────────────

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        // identical vectors are at distance exactly 0
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn check_norm(id: &str, v: &[f64]) -> Result<(), RankingError> {
    if v.iter().all(|x| *x == 0.0) {
        return Err(RankingError::ZeroNorm(id.to_string()));
    }
    Ok(())
}

/// Ids of the `k` corpus vectors nearest to `query` by cosine distance,
/// ascending; exact distance ties break lexicographically by id.
pub fn cosine_knn(
    query: &[f64],
    corpus: &[(String, Vec<f64>)],
    k: usize,
) -> Result<Vec<String>, RankingError> {
    if k > corpus.len() {
        return Err(RankingError::KTooLarge { k, n: corpus.len() });
    }
    check_norm("<query>", query)?;
    let mut scored: Vec<(f64, &str)> = Vec::with_capacity(corpus.len());
    for (id, v) in corpus {
        check_norm(id, v)?;
        scored.push((cosine_distance(query, v), id));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("distances are comparable").then(a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
}

/// M[i][j] = cosine distance(a_i, b_j). Identical vectors (in particular
/// the diagonal when `a == b`) are at distance exactly 0.
pub fn pairwise_cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, RankingError> {
    for (i, v) in a.iter().enumerate() {
        check_norm(&format!("a[{i}]"), v)?;
    }
    for (j, v) in b.iter().enumerate() {
        check_norm(&format!("b[{j}]"), v)?;
    }
    Ok(a.iter()
        .map(|va| b.iter().map(|vb| cosine_distance(va, vb)).collect())
        .collect())
}
