//! Relation embedding toolkit.
//!
//! Learns strategy-tagged relation embeddings φ(s) for sentences with marked
//! head/tail entities, pre-trains encoders with an InfoNCE + MLM objective,
//! fine-tunes a softmax classifier on top, mines self-supervised positive
//! pairs from dual-source coreference chains, and evaluates with
//! TACRED-style micro-F1 and per-relation precision@k.
//!
//! The math core is generic over the scalar type ([`scalar::Scalar`]);
//! concrete f64 (default) and f32 aliases live below.

pub mod classifier;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod pairminer;
pub mod scalar;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};

/// f64 lane (default: checkpoints store 64-bit blocks natively).
pub type Mat64 = graph::Mat<f64>;
pub type Graph64 = graph::Graph<f64>;
pub type Encoder64 = encoder::ReferenceEncoder<f64>;
pub type Provider64 = encoder::FrozenEncoderProvider<f64>;
pub type Embedding64 = encoder::RelationEmbedding<f64>;
pub type Classifier64 = classifier::ClassifierHead<f64>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;

/// f32 lane for throughput-bound experiments.
pub type Mat32 = graph::Mat<f32>;
pub type Graph32 = graph::Graph<f32>;
pub type Encoder32 = encoder::ReferenceEncoder<f32>;
pub type Provider32 = encoder::FrozenEncoderProvider<f32>;
pub type Embedding32 = encoder::RelationEmbedding<f32>;
pub type Classifier32 = classifier::ClassifierHead<f32>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
