//! The permutation-variant sequential stage: sinusoidal positional
//! encodings over career positions, learnable per-year temporal embeddings
//! shared across entities, their elementwise composition with set
//! representations, and the Transformer encoder with mean pooling over
//! timesteps.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attn::{self, BlockIdx};
use crate::graph::{Graph, NodeId, PoolMode};
use crate::optim::{Init, ParamStore};
use crate::set_encoders::{InstanceSet, SetEncoderSpec};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("year {0} is not in the temporal table and no out-of-vocabulary policy applies")]
    UnknownYear(i32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence '{0}' has no timesteps")]
    EmptySequence(String),
}

// ── Sequence data ────────────────────────────────────────────────────

/// One timestep of a career: its relative position, calendar year, and the
/// unordered set of instances observed that year.
#[derive(Debug, Clone, PartialEq)]
pub struct Timestep {
    pub position_index: usize,
    pub temporal_value: i32,
    pub instances: InstanceSet,
}

/// One sample: an ordered sequence of timesteps plus the scalar target
/// (already scaled to [0, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct SetSequence {
    pub entity_id: String,
    pub timesteps: Vec<Timestep>,
    pub target: f64,
}

impl SetSequence {
    /// Builds a validated sequence from (year, instances) pairs, sorted by
    /// year, with positions assigned 0..N.
    pub fn from_years(
        entity_id: impl Into<String>,
        mut years: Vec<(i32, InstanceSet)>,
        target: f64,
    ) -> Result<Self, ModelError> {
        let entity_id = entity_id.into();
        if years.is_empty() {
            return Err(ModelError::EmptySequence(entity_id));
        }
        years.sort_by_key(|(y, _)| *y);
        let timesteps = years
            .into_iter()
            .enumerate()
            .map(|(i, (year, instances))| Timestep {
                position_index: i,
                temporal_value: year,
                instances,
            })
            .collect();
        Ok(SetSequence {
            entity_id,
            timesteps,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn start_year(&self) -> i32 {
        self.timesteps
            .iter()
            .map(|t| t.temporal_value)
            .min()
            .expect("sequences have at least one timestep")
    }

    pub fn total_instances(&self) -> usize {
        self.timesteps.iter().map(|t| t.instances.n_instances()).sum()
    }

    /// All instances of the career as one unordered set (static baselines).
    pub fn union_set(&self) -> InstanceSet {
        let rows: Vec<Vec<f64>> = self
            .timesteps
            .iter()
            .flat_map(|t| t.instances.rows().map(|r| r.to_vec()))
            .collect();
        InstanceSet::from_rows(&rows).expect("sequences have at least one instance")
    }

    /// Counterfactual career with timesteps rearranged by `perm`: content
    /// (instances and year) moves, positions are reassigned 0..N. Year
    /// ordering is deliberately not re-validated.
    pub fn permuted_timesteps(&self, perm: &[usize]) -> SetSequence {
        debug_assert_eq!(perm.len(), self.timesteps.len());
        let timesteps = perm
            .iter()
            .enumerate()
            .map(|(i, &src)| Timestep {
                position_index: i,
                temporal_value: self.timesteps[src].temporal_value,
                instances: self.timesteps[src].instances.clone(),
            })
            .collect();
        SetSequence {
            entity_id: self.entity_id.clone(),
            timesteps,
            target: self.target,
        }
    }
}

// ── Positional encoding ──────────────────────────────────────────────

/// Sinusoidal encoding of a relative position:
/// `u[2l] = sin(p / k^(2l/H))`, `u[2l+1] = cos(p / k^(2l/H))`.
/// Deterministic and non-learnable; `h` must be even.
pub fn positional_encoding(position: usize, h: usize, k: f64) -> Result<Vec<f64>, ModelError> {
    if h == 0 || h % 2 != 0 {
        return Err(ModelError::Config(format!(
            "positional encoding needs an even hidden size, got {h}"
        )));
    }
    let mut u = vec![0.0; h];
    let p = position as f64;
    for l in 0..h / 2 {
        let angle = p / k.powf(2.0 * l as f64 / h as f64);
        u[2 * l] = angle.sin();
        u[2 * l + 1] = angle.cos();
    }
    Ok(u)
}

// ── Temporal embeddings ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Unseen years are an error.
    Error,
    /// Unseen years map to the zero vector.
    Zero,
    /// Unseen years borrow the nearest known year's row; equidistant ties
    /// resolve to the earlier year.
    NearestYear,
}

/// Learnable per-year embedding rows, shared by every entity: the same
/// calendar year always resolves to the same row. Rows exist for the years
/// observed in training data; other years follow the out-of-vocabulary
/// policy.
#[derive(Debug, Clone)]
pub struct TemporalEmbeddingTable {
    year_to_row: BTreeMap<i32, usize>,
    /// Slot of the `n_years x H` weight matrix in the parameter store.
    pub weights: usize,
    pub oov_policy: OovPolicy,
    h: usize,
}

/// Result of resolving a year against the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YearLookup {
    Row(usize),
    Zero,
}

impl TemporalEmbeddingTable {
    /// Registers the weight matrix (N(0, 0.02²) init) over the sorted
    /// distinct `years` and returns the lookup table.
    pub fn build(
        years: &[i32],
        h: usize,
        oov_policy: OovPolicy,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
    ) -> Result<Self, ModelError> {
        let mut sorted: Vec<i32> = years.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(ModelError::Config(
                "temporal table needs at least one training year".into(),
            ));
        }
        let year_to_row: BTreeMap<i32, usize> =
            sorted.iter().enumerate().map(|(i, &y)| (y, i)).collect();
        let weights = store.add(
            format!("{prefix}.table"),
            vec![sorted.len(), h],
            Init::Normal { std: 0.02 },
            rng,
        );
        Ok(TemporalEmbeddingTable {
            year_to_row,
            weights,
            oov_policy,
            h,
        })
    }

    pub fn years(&self) -> Vec<i32> {
        self.year_to_row.keys().copied().collect()
    }

    pub fn n_years(&self) -> usize {
        self.year_to_row.len()
    }

    pub fn hidden(&self) -> usize {
        self.h
    }

    pub fn lookup(&self, year: i32) -> Result<YearLookup, ModelError> {
        if let Some(&row) = self.year_to_row.get(&year) {
            return Ok(YearLookup::Row(row));
        }
        match self.oov_policy {
            OovPolicy::Error => Err(ModelError::UnknownYear(year)),
            OovPolicy::Zero => Ok(YearLookup::Zero),
            OovPolicy::NearestYear => {
                let below = self.year_to_row.range(..=year).next_back();
                let above = self.year_to_row.range(year..).next();
                let row = match (below, above) {
                    (Some((&yb, &rb)), Some((&ya, &ra))) => {
                        if year - yb <= ya - year {
                            rb
                        } else {
                            ra
                        }
                    }
                    (Some((_, &rb)), None) => rb,
                    (None, Some((_, &ra))) => ra,
                    (None, None) => unreachable!("table is never empty"),
                };
                Ok(YearLookup::Row(row))
            }
        }
    }

    /// The embedding vector for `year` as a rank-1 node of width H.
    pub fn embed(&self, g: &mut Graph, year: i32) -> Result<NodeId, ModelError> {
        match self.lookup(year)? {
            YearLookup::Row(row) => {
                let r = g.embed_rows(self.weights, &[row])?;
                Ok(g.reshape(r, vec![self.h])?)
            }
            YearLookup::Zero => Ok(g.constant(vec![self.h], vec![0.0; self.h])?),
        }
    }
}

// ── Composition and the Transformer encoder ──────────────────────────

/// Final input embedding for a timestep: the elementwise sum
/// `s_i + u_i + v_i`. Disabled positional/temporal channels enter as zero
/// vectors.
pub fn compose_timestep(g: &mut Graph, s: NodeId, u: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
    let su = g.add(s, u)?;
    g.add(su, v)
}

/// Architecture of the sequential model: the set encoder feeding it, the
/// positional/temporal switches, and the Transformer encoder dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModelSpec {
    pub set_encoder: SetEncoderSpec,
    pub use_positional: bool,
    pub use_temporal: bool,
    /// Encoder blocks L.
    pub n_layers: usize,
    /// Hidden size H; must be even and divisible by `n_heads`.
    pub hidden: usize,
    /// Attention heads A.
    pub n_heads: usize,
    /// Feed-forward width (2H in the reference configuration).
    pub ff_dim: usize,
    /// Positional encoding base k.
    pub pe_base: f64,
}

impl SeqModelSpec {
    /// Desk-scale defaults: L = 2, H = 64, A = 4, ff = 2H, k = 10000.
    pub fn new(set_encoder: SetEncoderSpec) -> Self {
        let hidden = set_encoder.d_out;
        SeqModelSpec {
            set_encoder,
            use_positional: true,
            use_temporal: true,
            n_layers: 2,
            hidden,
            n_heads: 4,
            ff_dim: 2 * hidden,
            pe_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.set_encoder.validate()?;
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(ModelError::Config(format!(
                "hidden size H must be even for sin/cos pairing, got {}",
                self.hidden
            )));
        }
        if self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden size {} is not divisible by {} attention heads",
                self.hidden, self.n_heads
            )));
        }
        if self.set_encoder.d_out != self.hidden {
            return Err(ModelError::Config(format!(
                "set encoder output width {} must equal hidden size {}",
                self.set_encoder.d_out, self.hidden
            )));
        }
        if self.n_layers == 0 || self.ff_dim == 0 {
            return Err(ModelError::Config(
                "n_layers and ff_dim must be at least 1".into(),
            ));
        }
        if !(self.pe_base > 0.0) {
            return Err(ModelError::Config(format!(
                "positional encoding base must be positive, got {}",
                self.pe_base
            )));
        }
        Ok(())
    }
}

/// Registers the L encoder blocks of the sequential Transformer.
pub fn build_transformer(
    spec: &SeqModelSpec,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
) -> Result<Vec<BlockIdx>, TensorError> {
    (0..spec.n_layers)
        .map(|i| {
            attn::add_block(
                store,
                rng,
                &format!("{prefix}.block{i}"),
                spec.hidden,
                spec.ff_dim,
                spec.n_heads,
            )
        })
        .collect()
}

/// The L self-attention blocks, before pooling: `N x H` in, `N x H` out.
pub fn transformer_block_outputs(
    g: &mut Graph,
    embeddings: NodeId,
    blocks: &[BlockIdx],
) -> Result<NodeId, TensorError> {
    let mut x = embeddings;
    for b in blocks {
        x = attn::attention_block(g, x, x, b)?;
    }
    Ok(x)
}

/// Full encoder stage: L blocks over the timestep embeddings, then mean
/// pooling over the N rows. The result is the fixed-size sequence
/// representation the scalar head consumes.
pub fn transformer_encoder_forward(
    g: &mut Graph,
    embeddings: NodeId,
    blocks: &[BlockIdx],
) -> Result<NodeId, TensorError> {
    let x = transformer_block_outputs(g, embeddings, blocks)?;
    g.reduce_pool(x, 0, PoolMode::Mean)
}
