//! Model assembly: parameter initialization and forward passes for the
//! sequential model and its baselines.
//!
//! Five kinds share one surface:
//!
//! * `vanilla` — pooled raw features through a linear head.
//! * `static_set` — the whole career as one unordered set through a set
//!   encoder and a linear head.
//! * `temporal_deepsets` — a DeepSets representation per timestep, mean
//!   pooled over timesteps (order-blind by construction).
//! * `flattened_transformer` — every instance becomes one sequence element
//!   (projected feature + positional encoding + temporal embedding) for a
//!   Transformer encoder over the whole career.
//! * `set2seq` — per-timestep set representations composed with positional
//!   encodings and temporal embeddings, then the Transformer encoder.
//!
//! All predictions are raw linear outputs trained against [0, 1]-scaled
//! targets; clamping into [0, 1] happens only at metric time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{self, BlockIdx, FcIdx};
use crate::graph::{Graph, NodeId, PoolMode};
use crate::optim::ParamStore;
use crate::seq_encoder::{
    self, compose_timestep, positional_encoding, ModelError, OovPolicy, SeqModelSpec, SetSequence,
    TemporalEmbeddingTable,
};
use crate::set_encoders::{self, SetEncoderLayout, SetEncoderSpec, SetEncoderVariant, SetPooling};

/// Which architecture a model instantiates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Vanilla {
        d_in: usize,
        pooling: SetPooling,
    },
    StaticSet {
        encoder: SetEncoderSpec,
    },
    TemporalDeepsets {
        encoder: SetEncoderSpec,
    },
    FlattenedTransformer {
        seq: SeqModelSpec,
    },
    Set2seq {
        seq: SeqModelSpec,
    },
}

impl ModelSpec {
    pub fn d_in(&self) -> usize {
        match self {
            ModelSpec::Vanilla { d_in, .. } => *d_in,
            ModelSpec::StaticSet { encoder } | ModelSpec::TemporalDeepsets { encoder } => encoder.d_in,
            ModelSpec::FlattenedTransformer { seq } | ModelSpec::Set2seq { seq } => seq.set_encoder.d_in,
        }
    }

    pub fn uses_temporal(&self) -> bool {
        match self {
            ModelSpec::FlattenedTransformer { seq } | ModelSpec::Set2seq { seq } => seq.use_temporal,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelSpec::Vanilla { d_in, .. } => {
                if *d_in == 0 {
                    return Err(ModelError::Config("vanilla model needs d_in >= 1".into()));
                }
                Ok(())
            }
            ModelSpec::StaticSet { encoder } => Ok(encoder.validate()?),
            ModelSpec::TemporalDeepsets { encoder } => {
                if encoder.variant != SetEncoderVariant::Deepsets {
                    return Err(ModelError::Config(
                        "temporal_deepsets requires the deepsets set encoder".into(),
                    ));
                }
                Ok(encoder.validate()?)
            }
            ModelSpec::FlattenedTransformer { seq } | ModelSpec::Set2seq { seq } => seq.validate(),
        }
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Vanilla {
        pooling: PoolMode,
        head: FcIdx,
    },
    StaticSet {
        enc: SetEncoderLayout,
        head: FcIdx,
    },
    TemporalDeepsets {
        enc: SetEncoderLayout,
        head: FcIdx,
    },
    Flattened {
        proj: FcIdx,
        blocks: Vec<BlockIdx>,
        head: FcIdx,
    },
    Set2seq {
        enc: SetEncoderLayout,
        blocks: Vec<BlockIdx>,
        head: FcIdx,
    },
}

/// A spec plus its initialized parameters and (when temporal embeddings are
/// enabled) the year lookup table.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub temporal: Option<TemporalEmbeddingTable>,
    layout: Layout,
}

impl Model {
    /// Initializes all parameters from `seed`. `train_years` feeds the
    /// temporal table and may be empty when the spec does not use temporal
    /// embeddings.
    pub fn init(
        spec: ModelSpec,
        train_years: &[i32],
        oov_policy: OovPolicy,
        seed: u64,
    ) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut temporal = None;
        let layout = match &spec {
            ModelSpec::Vanilla { d_in, pooling } => Layout::Vanilla {
                pooling: (*pooling).into(),
                head: attn::add_fc(&mut store, &mut rng, "head", *d_in, 1),
            },
            ModelSpec::StaticSet { encoder } => {
                let enc = set_encoders::build_set_encoder(encoder, &mut store, &mut rng, "set_enc")?;
                Layout::StaticSet {
                    enc,
                    head: attn::add_fc(&mut store, &mut rng, "head", encoder.d_out, 1),
                }
            }
            ModelSpec::TemporalDeepsets { encoder } => {
                let enc = set_encoders::build_set_encoder(encoder, &mut store, &mut rng, "set_enc")?;
                Layout::TemporalDeepsets {
                    enc,
                    head: attn::add_fc(&mut store, &mut rng, "head", encoder.d_out, 1),
                }
            }
            ModelSpec::FlattenedTransformer { seq } => {
                let proj = attn::add_fc(&mut store, &mut rng, "proj", seq.set_encoder.d_in, seq.hidden);
                let blocks = seq_encoder::build_transformer(seq, &mut store, &mut rng, "seq")?;
                if seq.use_temporal {
                    temporal = Some(TemporalEmbeddingTable::build(
                        train_years,
                        seq.hidden,
                        oov_policy,
                        &mut store,
                        &mut rng,
                        "temporal",
                    )?);
                }
                Layout::Flattened {
                    proj,
                    blocks,
                    head: attn::add_fc(&mut store, &mut rng, "head", seq.hidden, 1),
                }
            }
            ModelSpec::Set2seq { seq } => {
                let enc = set_encoders::build_set_encoder(&seq.set_encoder, &mut store, &mut rng, "set_enc")?;
                let blocks = seq_encoder::build_transformer(seq, &mut store, &mut rng, "seq")?;
                if seq.use_temporal {
                    temporal = Some(TemporalEmbeddingTable::build(
                        train_years,
                        seq.hidden,
                        oov_policy,
                        &mut store,
                        &mut rng,
                        "temporal",
                    )?);
                }
                Layout::Set2seq {
                    enc,
                    blocks,
                    head: attn::add_fc(&mut store, &mut rng, "head", seq.hidden, 1),
                }
            }
        };
        Ok(Model {
            spec,
            store,
            temporal,
            layout,
        })
    }

    /// Scalar prediction for one sample (batch size 1).
    pub fn predict(&self, sample: &SetSequence) -> Result<f64, ModelError> {
        let (g, pred) = self.forward_sample(sample)?;
        Ok(g.scalar_value(pred))
    }

    /// Builds the forward graph for one sample and returns it with the
    /// prediction node (shape `[1]`), so callers can attach a loss and run
    /// the backward pass.
    pub fn forward_sample(&self, sample: &SetSequence) -> Result<(Graph, NodeId), ModelError> {
        if sample.timesteps.is_empty() {
            return Err(ModelError::EmptySequence(sample.entity_id.clone()));
        }
        let mut g = Graph::from_params(&self.store);
        let pred = match &self.layout {
            Layout::Vanilla { pooling, head } => {
                let union = sample.union_set();
                let x = g.constant(vec![union.n_instances(), union.dim()], union.features().to_vec())?;
                let pooled = g.reduce_pool(x, 0, *pooling)?;
                let row = g.reshape(pooled, vec![1, union.dim()])?;
                attn::fc(&mut g, row, *head)?
            }
            Layout::StaticSet { enc, head } => {
                let union = sample.union_set();
                let s = set_encoders::encode_set(&mut g, enc, &union)?;
                let row = g.reshape(s, vec![1, g.shape(s)[0]])?;
                attn::fc(&mut g, row, *head)?
            }
            Layout::TemporalDeepsets { enc, head } => self.temporal_deepsets_forward(&mut g, sample, enc, *head)?,
            Layout::Flattened { proj, blocks, head } => {
                self.flattened_transformer_forward(&mut g, sample, *proj, blocks, *head)?
            }
            Layout::Set2seq { enc, blocks, head } => self.set2seq_forward(&mut g, sample, enc, blocks, *head)?,
        };
        let pred = g.reshape(pred, vec![1])?;
        Ok((g, pred))
    }

    fn seq_spec(&self) -> &SeqModelSpec {
        match &self.spec {
            ModelSpec::FlattenedTransformer { seq } | ModelSpec::Set2seq { seq } => seq,
            _ => unreachable!("seq_spec is only called for sequential kinds"),
        }
    }

    /// Positional-encoding leaf for one position (zeros when disabled).
    fn pe_leaf(&self, g: &mut Graph, position: usize) -> Result<NodeId, ModelError> {
        let seq = self.seq_spec();
        if seq.use_positional {
            let u = positional_encoding(position, seq.hidden, seq.pe_base)?;
            Ok(g.constant(vec![seq.hidden], u)?)
        } else {
            Ok(g.constant(vec![seq.hidden], vec![0.0; seq.hidden])?)
        }
    }

    /// Temporal-embedding node for one year (zeros when disabled).
    fn te_node(&self, g: &mut Graph, year: i32) -> Result<NodeId, ModelError> {
        let seq = self.seq_spec();
        if seq.use_temporal {
            let table = self
                .temporal
                .as_ref()
                .expect("temporal table exists when use_temporal is set");
            table.embed(g, year)
        } else {
            Ok(g.constant(vec![seq.hidden], vec![0.0; seq.hidden])?)
        }
    }

    /// Per-timestep set encoding, composition with u_i and v_i, Transformer
    /// encoder with mean pooling, scalar head.
    fn set2seq_forward(
        &self,
        g: &mut Graph,
        sample: &SetSequence,
        enc: &SetEncoderLayout,
        blocks: &[BlockIdx],
        head: FcIdx,
    ) -> Result<NodeId, ModelError> {
        let hidden = self.seq_spec().hidden;
        let mut embedded = Vec::with_capacity(sample.len());
        for t in &sample.timesteps {
            let s = set_encoders::encode_set(g, enc, &t.instances)?;
            let u = self.pe_leaf(g, t.position_index)?;
            let v = self.te_node(g, t.temporal_value)?;
            embedded.push(compose_timestep(g, s, u, v)?);
        }
        let stacked = g.stack_rows(&embedded)?;
        let pooled = seq_encoder::transformer_encoder_forward(g, stacked, blocks)?;
        let row = g.reshape(pooled, vec![1, hidden])?;
        Ok(attn::fc(g, row, head)?)
    }

    /// DeepSets per timestep, mean pooling over timesteps, scalar head.
    /// No positional or temporal channel: order-blind by design.
    fn temporal_deepsets_forward(
        &self,
        g: &mut Graph,
        sample: &SetSequence,
        enc: &SetEncoderLayout,
        head: FcIdx,
    ) -> Result<NodeId, ModelError> {
        let mut reps = Vec::with_capacity(sample.len());
        for t in &sample.timesteps {
            reps.push(set_encoders::encode_set(g, enc, &t.instances)?);
        }
        let stacked = g.stack_rows(&reps)?;
        let pooled = g.reduce_pool(stacked, 0, PoolMode::Mean)?;
        let row = g.reshape(pooled, vec![1, g.shape(pooled)[0]])?;
        Ok(attn::fc(g, row, head)?)
    }

    /// Every instance becomes one sequence element: projected feature plus
    /// its timestep's positional encoding and temporal embedding.
    fn flattened_transformer_forward(
        &self,
        g: &mut Graph,
        sample: &SetSequence,
        proj: FcIdx,
        blocks: &[BlockIdx],
        head: FcIdx,
    ) -> Result<NodeId, ModelError> {
        let seq = self.seq_spec();
        let d_in = seq.set_encoder.d_in;
        let mut rows: Vec<f64> = Vec::new();
        let mut pe_rows: Vec<f64> = Vec::new();
        let mut te_nodes: Vec<NodeId> = Vec::new();
        for t in &sample.timesteps {
            let u = if seq.use_positional {
                positional_encoding(t.position_index, seq.hidden, seq.pe_base)?
            } else {
                vec![0.0; seq.hidden]
            };
            for r in t.instances.rows() {
                rows.extend_from_slice(r);
                pe_rows.extend_from_slice(&u);
                te_nodes.push(self.te_node(g, t.temporal_value)?);
            }
        }
        let m = te_nodes.len();
        let x = g.constant(vec![m, d_in], rows)?;
        let projected = attn::fc(g, x, proj)?;
        let pe = g.constant(vec![m, seq.hidden], pe_rows)?;
        let te = g.stack_rows(&te_nodes)?;
        let with_pe = g.add(projected, pe)?;
        let embedded = g.add(with_pe, te)?;
        let pooled = seq_encoder::transformer_encoder_forward(g, embedded, blocks)?;
        let row = g.reshape(pooled, vec![1, seq.hidden])?;
        Ok(attn::fc(g, row, head)?)
    }

    /// Per-timestep vectors at each stage of the sequential pipeline for
    /// the first `first_n` timesteps: set representations, positional
    /// encodings, temporal embeddings, composed embeddings, and the
    /// post-Transformer rows (computed on the career truncated to
    /// `first_n`). Only meaningful for the `set2seq` kind.
    pub fn analysis_vectors(&self, sample: &SetSequence, first_n: usize) -> Result<AnalysisVectors, ModelError> {
        let (enc, blocks) = match &self.layout {
            Layout::Set2seq { enc, blocks, .. } => (enc, blocks),
            _ => {
                return Err(ModelError::Config(
                    "analysis requires a set2seq model".into(),
                ))
            }
        };
        if sample.len() < first_n || first_n == 0 {
            return Err(ModelError::Config(format!(
                "entity '{}' has {} timesteps, need {first_n}",
                sample.entity_id,
                sample.len()
            )));
        }
        let mut g = Graph::from_params(&self.store);
        let mut set_repr = Vec::with_capacity(first_n);
        let mut positional = Vec::with_capacity(first_n);
        let mut temporal = Vec::with_capacity(first_n);
        let mut composed = Vec::with_capacity(first_n);
        let mut embedded = Vec::with_capacity(first_n);
        for t in &sample.timesteps[..first_n] {
            let s = set_encoders::encode_set(&mut g, enc, &t.instances)?;
            let u = self.pe_leaf(&mut g, t.position_index)?;
            let v = self.te_node(&mut g, t.temporal_value)?;
            let e = compose_timestep(&mut g, s, u, v)?;
            set_repr.push(g.data(s).to_vec());
            positional.push(g.data(u).to_vec());
            temporal.push(g.data(v).to_vec());
            composed.push(g.data(e).to_vec());
            embedded.push(e);
        }
        let stacked = g.stack_rows(&embedded)?;
        let block_out = seq_encoder::transformer_block_outputs(&mut g, stacked, blocks)?;
        let h = g.shape(block_out)[1];
        let transformed: Vec<Vec<f64>> = (0..first_n)
            .map(|i| g.data(block_out)[i * h..(i + 1) * h].to_vec())
            .collect();
        Ok(AnalysisVectors {
            set_repr,
            positional,
            temporal,
            composed,
            transformed,
        })
    }
}

/// Stage-by-stage per-timestep vectors used by the embedding analysis.
#[derive(Debug, Clone)]
pub struct AnalysisVectors {
    pub set_repr: Vec<Vec<f64>>,
    pub positional: Vec<Vec<f64>>,
    pub temporal: Vec<Vec<f64>>,
    pub composed: Vec<Vec<f64>>,
    pub transformed: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::set_encoders::InstanceSet;
    use rand::{Rng, SeedableRng};

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> InstanceSet {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        InstanceSet::from_rows(&rows).unwrap()
    }

    fn sample_with_years(rng: &mut ChaCha8Rng, years: &[i32], d: usize) -> SetSequence {
        let pairs: Vec<(i32, InstanceSet)> = years
            .iter()
            .map(|&y| {
                let n = rng.random_range(2..5);
                (y, random_set(rng, n, d))
            })
            .collect();
        SetSequence::from_years("test_entity", pairs, 0.5).unwrap()
    }

    fn tiny_encoder(variant: SetEncoderVariant, d_in: usize) -> SetEncoderSpec {
        SetEncoderSpec {
            d_hidden: 6,
            d_out: 8,
            n_heads: 2,
            n_inducing: 3,
            n_blocks: 1,
            ..SetEncoderSpec::new(variant, d_in)
        }
    }

    fn tiny_seq(variant: SetEncoderVariant, d_in: usize, pe: bool, te: bool) -> SeqModelSpec {
        SeqModelSpec {
            use_positional: pe,
            use_temporal: te,
            n_layers: 1,
            hidden: 8,
            n_heads: 2,
            ff_dim: 16,
            ..SeqModelSpec::new(tiny_encoder(variant, d_in))
        }
    }

    fn years_range(a: i32, b: i32) -> Vec<i32> {
        (a..=b).collect()
    }

    #[test]
    fn instance_shuffle_within_a_timestep_never_changes_prediction() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let spec = ModelSpec::Set2seq {
            seq: tiny_seq(SetEncoderVariant::StSabPma, 4, true, true),
        };
        let model = Model::init(spec, &years_range(1900, 1910), OovPolicy::NearestYear, 7).unwrap();
        let sample = sample_with_years(&mut rng, &[1901, 1904, 1906], 4);
        let base = model.predict(&sample).unwrap();
        for _ in 0..5 {
            let mut shuffled = sample.clone();
            for t in &mut shuffled.timesteps {
                let n = t.instances.n_instances();
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                t.instances = t.instances.permuted(&perm);
            }
            let p = model.predict(&shuffled).unwrap();
            assert!((p - base).abs() < 1e-9, "{p} vs {base}");
        }
    }

    #[test]
    fn timestep_shuffle_changes_prediction_when_pe_enabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let sample = sample_with_years(&mut rng, &[1901, 1904, 1906, 1909], 4);
        let mut changed = 0;
        for seed in 0..20 {
            let spec = ModelSpec::Set2seq {
                seq: tiny_seq(SetEncoderVariant::Deepsets, 4, true, false),
            };
            let model = Model::init(spec, &[], OovPolicy::Zero, seed).unwrap();
            let base = model.predict(&sample).unwrap();
            let shuffled = sample.permuted_timesteps(&[2, 0, 3, 1]);
            let p = model.predict(&shuffled).unwrap();
            if (p - base).abs() > 1e-6 {
                changed += 1;
            }
        }
        assert!(changed >= 19, "only {changed}/20 draws changed");
    }

    #[test]
    fn disabling_pe_and_te_makes_timestep_order_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let sample = sample_with_years(&mut rng, &[1901, 1904, 1906, 1909], 4);
        let spec = ModelSpec::Set2seq {
            seq: tiny_seq(SetEncoderVariant::Deepsets, 4, false, false),
        };
        let model = Model::init(spec, &[], OovPolicy::Zero, 11).unwrap();
        let base = model.predict(&sample).unwrap();
        for perm in [[3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1]] {
            let p = model.predict(&sample.permuted_timesteps(&perm)).unwrap();
            assert!((p - base).abs() < 1e-9, "{p} vs {base}");
        }
    }

    #[test]
    fn years_matter_iff_temporal_embeddings_enabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let d = 4;
        let sets: Vec<InstanceSet> = (0..3).map(|_| random_set(&mut rng, 3, d)).collect();
        let build = |years: &[i32]| {
            let pairs: Vec<(i32, InstanceSet)> =
                years.iter().zip(&sets).map(|(&y, s)| (y, s.clone())).collect();
            SetSequence::from_years("e", pairs, 0.5).unwrap()
        };
        let a = build(&[1901, 1902, 1903]);
        let b = build(&[1950, 1951, 1952]);

        let all_years: Vec<i32> = years_range(1900, 1960);
        let with_te = Model::init(
            ModelSpec::Set2seq {
                seq: tiny_seq(SetEncoderVariant::Deepsets, d, true, true),
            },
            &all_years,
            OovPolicy::Error,
            3,
        )
        .unwrap();
        let pa = with_te.predict(&a).unwrap();
        let pb = with_te.predict(&b).unwrap();
        assert!((pa - pb).abs() > 1e-9, "temporal table should separate years");

        let without_te = Model::init(
            ModelSpec::Set2seq {
                seq: tiny_seq(SetEncoderVariant::Deepsets, d, true, false),
            },
            &[],
            OovPolicy::Zero,
            3,
        )
        .unwrap();
        let pa = without_te.predict(&a).unwrap();
        let pb = without_te.predict(&b).unwrap();
        assert!((pa - pb).abs() < 1e-12, "{pa} vs {pb}");
    }

    #[test]
    fn temporal_deepsets_is_timestep_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let sample = sample_with_years(&mut rng, &[1901, 1905, 1910], 4);
        let model = Model::init(
            ModelSpec::TemporalDeepsets {
                encoder: tiny_encoder(SetEncoderVariant::Deepsets, 4),
            },
            &[],
            OovPolicy::Zero,
            5,
        )
        .unwrap();
        let base = model.predict(&sample).unwrap();
        let p = model.predict(&sample.permuted_timesteps(&[2, 0, 1])).unwrap();
        assert!((p - base).abs() < 1e-9);
    }

    #[test]
    fn single_timestep_temporal_deepsets_reduces_to_static_deepsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let sample = sample_with_years(&mut rng, &[1907], 4);
        let enc = tiny_encoder(SetEncoderVariant::Deepsets, 4);
        // identical init seed → identical parameters for both kinds
        let temporal = Model::init(ModelSpec::TemporalDeepsets { encoder: enc }, &[], OovPolicy::Zero, 9).unwrap();
        let static_ = Model::init(ModelSpec::StaticSet { encoder: enc }, &[], OovPolicy::Zero, 9).unwrap();
        let a = temporal.predict(&sample).unwrap();
        let b = static_.predict(&sample).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn merging_two_timesteps_changes_temporal_deepsets_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let d = 4;
        let s1 = random_set(&mut rng, 3, d);
        let s2 = random_set(&mut rng, 2, d);
        let merged_rows: Vec<Vec<f64>> = s1.rows().chain(s2.rows()).map(|r| r.to_vec()).collect();
        let merged = InstanceSet::from_rows(&merged_rows).unwrap();
        let split = SetSequence::from_years("e", vec![(1901, s1), (1902, s2)], 0.5).unwrap();
        let fused = SetSequence::from_years("e", vec![(1901, merged)], 0.5).unwrap();
        let model = Model::init(
            ModelSpec::TemporalDeepsets {
                encoder: tiny_encoder(SetEncoderVariant::Deepsets, d),
            },
            &[],
            OovPolicy::Zero,
            13,
        )
        .unwrap();
        let a = model.predict(&split).unwrap();
        let b = model.predict(&fused).unwrap();
        assert!((a - b).abs() > 1e-9, "merging timesteps should matter: {a} vs {b}");
    }

    #[test]
    fn flattened_transformer_within_timestep_shuffle_is_invariant() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let sample = sample_with_years(&mut rng, &[1901, 1904], 4);
        let model = Model::init(
            ModelSpec::FlattenedTransformer {
                seq: tiny_seq(SetEncoderVariant::Deepsets, 4, true, true),
            },
            &years_range(1900, 1905),
            OovPolicy::NearestYear,
            15,
        )
        .unwrap();
        let base = model.predict(&sample).unwrap();
        let mut shuffled = sample.clone();
        for t in &mut shuffled.timesteps {
            let n = t.instances.n_instances();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            t.instances = t.instances.permuted(&perm);
        }
        let p = model.predict(&shuffled).unwrap();
        assert!((p - base).abs() < 1e-9, "{p} vs {base}");
    }

    #[test]
    fn flattened_transformer_cross_timestep_swap_changes_output_with_pe() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let d = 4;
        let s1 = random_set(&mut rng, 2, d);
        let s2 = random_set(&mut rng, 2, d);
        let swap_rows = |a: &InstanceSet, b: &InstanceSet| {
            // move one instance from timestep 0 to timestep 1 and vice versa
            let a_rows: Vec<Vec<f64>> = vec![b.row(0).to_vec(), a.row(1).to_vec()];
            let b_rows: Vec<Vec<f64>> = vec![a.row(0).to_vec(), b.row(1).to_vec()];
            (
                InstanceSet::from_rows(&a_rows).unwrap(),
                InstanceSet::from_rows(&b_rows).unwrap(),
            )
        };
        let (s1x, s2x) = swap_rows(&s1, &s2);
        let base_seq = SetSequence::from_years("e", vec![(1901, s1), (1902, s2)], 0.5).unwrap();
        let swapped_seq = SetSequence::from_years("e", vec![(1901, s1x), (1902, s2x)], 0.5).unwrap();
        let model = Model::init(
            ModelSpec::FlattenedTransformer {
                seq: tiny_seq(SetEncoderVariant::Deepsets, d, true, false),
            },
            &[],
            OovPolicy::Zero,
            17,
        )
        .unwrap();
        let a = model.predict(&base_seq).unwrap();
        let b = model.predict(&swapped_seq).unwrap();
        assert!((a - b).abs() > 1e-9, "cross-timestep swap should matter");
    }

    #[test]
    fn flattened_transformer_single_instance_timesteps_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let pairs: Vec<(i32, InstanceSet)> = (0..3)
            .map(|i| (1901 + i, random_set(&mut rng, 1, 4)))
            .collect();
        let sample = SetSequence::from_years("e", pairs, 0.5).unwrap();
        let model = Model::init(
            ModelSpec::FlattenedTransformer {
                seq: tiny_seq(SetEncoderVariant::Deepsets, 4, true, true),
            },
            &years_range(1901, 1903),
            OovPolicy::Error,
            19,
        )
        .unwrap();
        let p = model.predict(&sample).unwrap();
        assert!(p.is_finite());
    }

    #[test]
    fn vanilla_and_static_kinds_predict_finite_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let sample = sample_with_years(&mut rng, &[1901, 1905], 4);
        for spec in [
            ModelSpec::Vanilla { d_in: 4, pooling: SetPooling::Mean },
            ModelSpec::Vanilla { d_in: 4, pooling: SetPooling::Max },
            ModelSpec::StaticSet { encoder: tiny_encoder(SetEncoderVariant::StIsabPmaSab, 4) },
        ] {
            let model = Model::init(spec, &[], OovPolicy::Zero, 23).unwrap();
            assert!(model.predict(&sample).unwrap().is_finite());
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences_for_every_kind() {
        use crate::gradcheck;
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let sample = sample_with_years(&mut rng, &[1901, 1904], 3);
        let years = years_range(1900, 1905);
        let specs: Vec<ModelSpec> = vec![
            ModelSpec::Vanilla { d_in: 3, pooling: SetPooling::Max },
            ModelSpec::StaticSet { encoder: tiny_encoder(SetEncoderVariant::Deepsets, 3) },
            ModelSpec::TemporalDeepsets { encoder: tiny_encoder(SetEncoderVariant::Deepsets, 3) },
            ModelSpec::FlattenedTransformer { seq: tiny_seq(SetEncoderVariant::Deepsets, 3, true, true) },
            ModelSpec::Set2seq { seq: tiny_seq(SetEncoderVariant::StIsabPma, 3, true, true) },
        ];
        for spec in specs {
            let mut model = Model::init(spec.clone(), &years, OovPolicy::NearestYear, 29).unwrap();
            let (mut g, pred) = model.forward_sample(&sample).unwrap();
            let target = g.constant(vec![1], vec![sample.target]).unwrap();
            let diff = g.sub(pred, target).unwrap();
            let loss = g.mul(diff, diff).unwrap();
            g.backward(loss).unwrap();
            g.accumulate_param_grads(&mut model.store);
            let eval_model = model.clone();
            let eval_sample = sample.clone();
            let (err, at) = gradcheck::max_rel_error(
                &model.store,
                move |s| {
                    let mut m = eval_model.clone();
                    m.store = s.clone();
                    let p = m.predict(&eval_sample).unwrap();
                    (p - eval_sample.target) * (p - eval_sample.target)
                },
                gradcheck::DEFAULT_H,
            );
            assert!(err < 1e-4, "{spec:?}: max rel err {err} at {at}");
        }
    }
}
