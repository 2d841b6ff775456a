//! Permutation-invariant set encoders.
//!
//! Each encoder maps an unordered set of feature vectors to a single
//! H-dimensional representation. Two families are provided:
//!
//! * DeepSets — a four-layer fully-connected encoder per instance, a
//!   symmetric pooling operation (mean or max), and a three-layer decoder
//!   whose last layer projects to H.
//! * Set Transformer — stacked attention blocks over the instances,
//!   summarized by pooling-by-multi-head-attention (PMA) with a single
//!   learnable seed, in three arrangements: SAB+PMA, ISAB+PMA and
//!   ISAB+PMA+SAB. A final fully-connected layer projects to H.
//!
//! Invariance holds by construction: nothing downstream of the instance
//! axis depends on row order except through symmetric pooling or attention
//! over keys/values.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{self, BlockIdx, FcIdx};
use crate::graph::{Graph, NodeId, PoolMode};
use crate::optim::{Init, ParamStore};
use crate::tensor::TensorError;

/// One timestep's unordered collection of feature vectors, stored row-major
/// as an `n_instances x dim` matrix. Row order carries no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    features: Vec<f64>,
    n_instances: usize,
    dim: usize,
}

impl InstanceSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::ZeroDim(vec![0]));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(TensorError::ZeroDim(vec![rows.len(), 0]));
        }
        let mut features = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(TensorError::DimMismatch {
                    op: "instance_set",
                    left: vec![rows.len(), dim],
                    right: vec![rows.len(), r.len()],
                });
            }
            features.extend_from_slice(r);
        }
        Ok(InstanceSet {
            features,
            n_instances: rows.len(),
            dim,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_instances).map(|i| self.row(i))
    }

    /// Same set with rows rearranged by `perm` (a permutation of 0..n).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        debug_assert_eq!(perm.len(), self.n_instances);
        let mut features = Vec::with_capacity(self.features.len());
        for &i in perm {
            features.extend_from_slice(self.row(i));
        }
        InstanceSet {
            features,
            n_instances: self.n_instances,
            dim: self.dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetEncoderVariant {
    Deepsets,
    StSabPma,
    StIsabPma,
    StIsabPmaSab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetPooling {
    Mean,
    Max,
}

impl From<SetPooling> for PoolMode {
    fn from(p: SetPooling) -> PoolMode {
        match p {
            SetPooling::Mean => PoolMode::Mean,
            SetPooling::Max => PoolMode::Max,
        }
    }
}

/// Architecture configuration for a set encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetEncoderSpec {
    pub variant: SetEncoderVariant,
    /// DeepSets only.
    pub pooling: SetPooling,
    pub d_in: usize,
    pub d_hidden: usize,
    /// Output width H.
    pub d_out: usize,
    pub n_heads: usize,
    pub n_inducing: usize,
    /// Stacked SAB/ISAB blocks per stage.
    pub n_blocks: usize,
}

impl SetEncoderSpec {
    /// Desk-scale defaults: H = 64, hidden = 32, 4 heads, 16 inducing
    /// points, 2 blocks.
    pub fn new(variant: SetEncoderVariant, d_in: usize) -> Self {
        SetEncoderSpec {
            variant,
            pooling: SetPooling::Mean,
            d_in,
            d_hidden: 32,
            d_out: 64,
            n_heads: 4,
            n_inducing: 16,
            n_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 || self.n_blocks == 0 {
            return Err(TensorError::ZeroDim(vec![self.d_in, self.d_hidden, self.d_out, self.n_blocks]));
        }
        if self.variant != SetEncoderVariant::Deepsets {
            if self.n_heads == 0 || self.d_hidden % self.n_heads != 0 {
                return Err(TensorError::HeadDivisibility {
                    width: self.d_hidden,
                    n_heads: self.n_heads,
                });
            }
            if self.variant != SetEncoderVariant::StSabPma && self.n_inducing == 0 {
                return Err(TensorError::ZeroDim(vec![self.n_inducing]));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DeepSetsLayout {
    pooling: PoolMode,
    enc: [FcIdx; 4],
    dec: [FcIdx; 3],
}

#[derive(Debug, Clone)]
pub struct IsabLayout {
    /// Learnable inducing matrix, `n_inducing x d_hidden`.
    pub inducing: usize,
    mab_induce: BlockIdx,
    mab_expand: BlockIdx,
}

#[derive(Debug, Clone)]
pub struct PmaLayout {
    /// Learnable seed row, `1 x d_hidden`.
    pub seed: usize,
    rff1: FcIdx,
    rff2: FcIdx,
    mab: BlockIdx,
}

#[derive(Debug, Clone)]
enum StStage {
    Sab(Vec<BlockIdx>),
    Isab(Vec<IsabLayout>),
}

#[derive(Debug, Clone)]
pub struct SetTransformerLayout {
    input_proj: FcIdx,
    stage: StStage,
    pma: PmaLayout,
    /// SAB blocks applied to the pooled row (ISAB+PMA+SAB only).
    post: Vec<BlockIdx>,
    out: FcIdx,
}

#[derive(Debug, Clone)]
pub enum SetEncoderLayout {
    DeepSets(DeepSetsLayout),
    SetTransformer(SetTransformerLayout),
}

/// Registers all parameters of the encoder described by `spec` under
/// `prefix` and returns the layout used to drive the forward pass.
pub fn build_set_encoder(
    spec: &SetEncoderSpec,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
) -> Result<SetEncoderLayout, TensorError> {
    spec.validate()?;
    let d = spec.d_hidden;
    match spec.variant {
        SetEncoderVariant::Deepsets => {
            let enc = [
                attn::add_fc(store, rng, &format!("{prefix}.enc1"), spec.d_in, d),
                attn::add_fc(store, rng, &format!("{prefix}.enc2"), d, d),
                attn::add_fc(store, rng, &format!("{prefix}.enc3"), d, d),
                attn::add_fc(store, rng, &format!("{prefix}.enc4"), d, d),
            ];
            let dec = [
                attn::add_fc(store, rng, &format!("{prefix}.dec1"), d, d),
                attn::add_fc(store, rng, &format!("{prefix}.dec2"), d, d),
                attn::add_fc(store, rng, &format!("{prefix}.dec3"), d, spec.d_out),
            ];
            Ok(SetEncoderLayout::DeepSets(DeepSetsLayout {
                pooling: spec.pooling.into(),
                enc,
                dec,
            }))
        }
        variant => {
            let input_proj = attn::add_fc(store, rng, &format!("{prefix}.proj"), spec.d_in, d);
            let stage = if variant == SetEncoderVariant::StSabPma {
                let sabs = (0..spec.n_blocks)
                    .map(|i| attn::add_block(store, rng, &format!("{prefix}.sab{i}"), d, d, spec.n_heads))
                    .collect::<Result<Vec<_>, _>>()?;
                StStage::Sab(sabs)
            } else {
                let isabs = (0..spec.n_blocks)
                    .map(|i| {
                        Ok(IsabLayout {
                            inducing: store.add(
                                format!("{prefix}.isab{i}.inducing"),
                                vec![spec.n_inducing, d],
                                Init::GlorotUniform { fan_in: spec.n_inducing, fan_out: d },
                                rng,
                            ),
                            mab_induce: attn::add_block(
                                store,
                                rng,
                                &format!("{prefix}.isab{i}.induce"),
                                d,
                                d,
                                spec.n_heads,
                            )?,
                            mab_expand: attn::add_block(
                                store,
                                rng,
                                &format!("{prefix}.isab{i}.expand"),
                                d,
                                d,
                                spec.n_heads,
                            )?,
                        })
                    })
                    .collect::<Result<Vec<_>, TensorError>>()?;
                StStage::Isab(isabs)
            };
            let pma = PmaLayout {
                seed: store.add(
                    format!("{prefix}.pma.seed"),
                    vec![1, d],
                    Init::GlorotUniform { fan_in: 1, fan_out: d },
                    rng,
                ),
                rff1: attn::add_fc(store, rng, &format!("{prefix}.pma.rff1"), d, d),
                rff2: attn::add_fc(store, rng, &format!("{prefix}.pma.rff2"), d, d),
                mab: attn::add_block(store, rng, &format!("{prefix}.pma.mab"), d, d, spec.n_heads)?,
            };
            let post = if variant == SetEncoderVariant::StIsabPmaSab {
                (0..spec.n_blocks)
                    .map(|i| attn::add_block(store, rng, &format!("{prefix}.post_sab{i}"), d, d, spec.n_heads))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                Vec::new()
            };
            Ok(SetEncoderLayout::SetTransformer(SetTransformerLayout {
                input_proj,
                stage,
                pma,
                post,
                out: attn::add_fc(store, rng, &format!("{prefix}.out"), d, spec.d_out),
            }))
        }
    }
}

/// The MAB primitive: `LayerNorm(Hc + rFF(Hc))` with
/// `Hc = LayerNorm(X + MultiHead(X, Y, Y))`.
pub fn multihead_attention_block(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    block: &BlockIdx,
) -> Result<NodeId, TensorError> {
    attn::attention_block(g, x, y, block)
}

fn sab(g: &mut Graph, x: NodeId, block: &BlockIdx) -> Result<NodeId, TensorError> {
    attn::attention_block(g, x, x, block)
}

fn isab(g: &mut Graph, x: NodeId, layout: &IsabLayout) -> Result<NodeId, TensorError> {
    let hm = attn::attention_block(g, layout.inducing, x, &layout.mab_induce)?;
    attn::attention_block(g, x, hm, &layout.mab_expand)
}

fn pma(g: &mut Graph, x: NodeId, layout: &PmaLayout) -> Result<NodeId, TensorError> {
    let h = attn::fc(g, x, layout.rff1)?;
    let h = g.relu(h);
    let z = attn::fc(g, h, layout.rff2)?;
    attn::attention_block(g, layout.seed, z, &layout.mab)
}

/// Encodes an instance set into a rank-1 node of width H. The set enters
/// the graph as a non-learnable leaf.
pub fn encode_set(g: &mut Graph, layout: &SetEncoderLayout, set: &InstanceSet) -> Result<NodeId, TensorError> {
    let x = g.constant(vec![set.n_instances(), set.dim()], set.features().to_vec())?;
    encode_set_node(g, layout, x)
}

/// Encoder body over an existing `n x d_in` node.
pub fn encode_set_node(g: &mut Graph, layout: &SetEncoderLayout, x: NodeId) -> Result<NodeId, TensorError> {
    match layout {
        SetEncoderLayout::DeepSets(l) => {
            let mut h = x;
            for (i, fc) in l.enc.iter().enumerate() {
                h = attn::fc(g, h, *fc)?;
                if i + 1 < l.enc.len() {
                    h = g.relu(h);
                }
            }
            let pooled = g.reduce_pool(h, 0, l.pooling)?;
            let mut h = g.reshape(pooled, vec![1, g.shape(pooled)[0]])?;
            for (i, fc) in l.dec.iter().enumerate() {
                h = attn::fc(g, h, *fc)?;
                if i + 1 < l.dec.len() {
                    h = g.relu(h);
                }
            }
            let d_out = g.shape(h)[1];
            g.reshape(h, vec![d_out])
        }
        SetEncoderLayout::SetTransformer(l) => {
            let mut h = attn::fc(g, x, l.input_proj)?;
            match &l.stage {
                StStage::Sab(blocks) => {
                    for b in blocks {
                        h = sab(g, h, b)?;
                    }
                }
                StStage::Isab(layers) => {
                    for layer in layers {
                        h = isab(g, h, layer)?;
                    }
                }
            }
            let mut p = pma(g, h, &l.pma)?;
            for b in &l.post {
                p = sab(g, p, b)?;
            }
            let out = attn::fc(g, p, l.out)?;
            let d_out = g.shape(out)[1];
            g.reshape(out, vec![d_out])
        }
    }
}
