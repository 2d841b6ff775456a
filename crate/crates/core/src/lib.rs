//! Core library for sequential multiple-instance learning-to-rank:
//! a small fp64 autodiff substrate, permutation-invariant set encoders,
//! a position/temporal-aware Transformer sequence model with baselines,
//! ranking metrics and Borda aggregation, and the dataset protocol
//! (manifest loading, synthetic corpora, split strategies).

#![forbid(unsafe_code)]

pub mod attn;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod ranking;
pub mod seq_encoder;
pub mod set_encoders;
pub mod tensor;
pub mod train;
