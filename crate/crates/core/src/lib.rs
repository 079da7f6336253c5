//! Learned projection of word-image and text embeddings into a shared space,
//! used to rerank a recognizer's N-best hypotheses.
//!
//! The pipeline: load or synthesize a dataset ([`data`]), train
//! [`EmbedNetParams`] with online triplet mining ([`mining`], [`train`]),
//! rerank hypotheses by distance ([`rerank`]), optionally fuse recognizer
//! confidences ([`cab`]), and score with word recognition accuracy ([`eval`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cab;
pub mod data;
pub mod error;
pub mod eval;
pub mod mining;
pub mod models;
pub mod nn;
pub mod rerank;
pub mod train;

pub use cab::{cab_fuse, rerank_with_cab, CabConfig, DEFAULT_ALPHA};
pub use data::{
    load_dataset, parse_dataset, synth_generate, write_dataset, write_oracle, Hypothesis,
    LoadReport, SynthConfig, SynthDataset, SynthSplit, WordSample,
};
pub use error::{Error, Result};
pub use eval::{
    alpha_grid, evaluate_method, k_sweep, margin_sweep, wra, Method, SweepTable, TextMatch,
    WraReport,
};
pub use mining::{
    classify_triplet, epoch_seed, mine_triplets, triplet_loss, Margin, MinedTriplets, Triplet,
    TripletClass,
};
pub use models::{
    load_model, save_model, EmbedNetParams, MlpParams, Model, ModelFile, ModelKind, Parameters,
};
pub use rerank::{rerank_sample, RankedEntry, RankedList, RerankMode, Space};
pub use train::{train_embednet, train_mlp, AdamState, EpochRecord, TrainConfig, TrainHistory};
