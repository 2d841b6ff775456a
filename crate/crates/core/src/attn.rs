//! Shared attention plumbing: fully-connected layers, layer-norm affines,
//! multi-head attention, and the post-norm residual block
//!
//! ```text
//! Hc  = LayerNorm(X + MultiHead(X, Y, Y))
//! out = LayerNorm(Hc + rFF(Hc))
//! ```
//!
//! used both by the set encoders (where it is the MAB primitive) and by the
//! sequence Transformer encoder (as self-attention, Y = X).

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::optim::{Init, ParamStore};
use crate::tensor::TensorError;

/// Parameter slots of one linear layer.
#[derive(Debug, Clone, Copy)]
pub struct FcIdx {
    pub w: usize,
    pub b: usize,
}

/// Parameter slots of one layer-norm affine.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormIdx {
    pub gain: usize,
    pub bias: usize,
}

/// Query/key/value/output projections of one attention module.
#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: FcIdx,
    pub wk: FcIdx,
    pub wv: FcIdx,
    pub wo: FcIdx,
}

/// One residual attention block (attention + feed-forward, post-norm).
#[derive(Debug, Clone, Copy)]
pub struct BlockIdx {
    pub attn: AttnIdx,
    pub ln1: LayerNormIdx,
    pub ff1: FcIdx,
    pub ff2: FcIdx,
    pub ln2: LayerNormIdx,
    pub n_heads: usize,
}

pub fn add_fc(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) -> FcIdx {
    let w = store.add(
        format!("{prefix}.w"),
        vec![d_in, d_out],
        Init::GlorotUniform { fan_in: d_in, fan_out: d_out },
        rng,
    );
    let b = store.add(format!("{prefix}.b"), vec![d_out], Init::Zeros, rng);
    FcIdx { w, b }
}

pub fn add_layer_norm(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> LayerNormIdx {
    let gain = store.add(format!("{prefix}.gain"), vec![d], Init::Ones, rng);
    let bias = store.add(format!("{prefix}.bias"), vec![d], Init::Zeros, rng);
    LayerNormIdx { gain, bias }
}

pub fn add_attn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> AttnIdx {
    AttnIdx {
        wq: add_fc(store, rng, &format!("{prefix}.q"), d, d),
        wk: add_fc(store, rng, &format!("{prefix}.k"), d, d),
        wv: add_fc(store, rng, &format!("{prefix}.v"), d, d),
        wo: add_fc(store, rng, &format!("{prefix}.o"), d, d),
    }
}

/// Residual block at width `d` with an rFF hidden width of `ff_hidden`.
pub fn add_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    ff_hidden: usize,
    n_heads: usize,
) -> Result<BlockIdx, TensorError> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::HeadDivisibility { width: d, n_heads });
    }
    Ok(BlockIdx {
        attn: add_attn(store, rng, &format!("{prefix}.attn"), d),
        ln1: add_layer_norm(store, rng, &format!("{prefix}.ln1"), d),
        ff1: add_fc(store, rng, &format!("{prefix}.ff1"), d, ff_hidden),
        ff2: add_fc(store, rng, &format!("{prefix}.ff2"), ff_hidden, d),
        ln2: add_layer_norm(store, rng, &format!("{prefix}.ln2"), d),
        n_heads,
    })
}

/// x·W + b.
pub fn fc(g: &mut Graph, x: NodeId, idx: FcIdx) -> Result<NodeId, TensorError> {
    let y = g.matmul(x, idx.w)?;
    g.add_bias(y, idx.b)
}

/// Scaled-dot-product multi-head attention with queries from `x` and
/// keys/values from `y`. Both operands must already be at the block width.
pub fn multi_head_attention(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    idx: AttnIdx,
    n_heads: usize,
) -> Result<NodeId, TensorError> {
    let d = g.shape(x)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::HeadDivisibility { width: d, n_heads });
    }
    let dh = d / n_heads;
    let q = fc(g, x, idx.wq)?;
    let k = fc(g, y, idx.wk)?;
    let v = fc(g, y, idx.wv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax_lastdim(scaled);
        heads.push(g.matmul(weights, vh)?);
    }
    let concat = g.concat_cols(&heads)?;
    fc(g, concat, idx.wo)
}

/// Post-norm residual block: `LayerNorm(Hc + rFF(Hc))` where
/// `Hc = LayerNorm(x + MultiHead(x, y, y))`. The rFF is a single ReLU
/// hidden layer.
pub fn attention_block(g: &mut Graph, x: NodeId, y: NodeId, block: &BlockIdx) -> Result<NodeId, TensorError> {
    let mha = multi_head_attention(g, x, y, block.attn, block.n_heads)?;
    let res1 = g.add(x, mha)?;
    let hc = g.layer_norm(res1, block.ln1.gain, block.ln1.bias)?;
    let ffh = fc(g, hc, block.ff1)?;
    let ffh = g.relu(ffh);
    let ffo = fc(g, ffh, block.ff2)?;
    let res2 = g.add(hc, ffo)?;
    g.layer_norm(res2, block.ln2.gain, block.ln2.bias)
}
