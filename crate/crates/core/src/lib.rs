//! Path-based product recommendation over a knowledge graph: data
//! preprocessing, user-centric random path sampling, a from-scratch causal
//! language model over the entity/relation vocabulary, graph-constrained
//! beam decoding, and recommendation/faithfulness evaluation.

pub mod config;
pub mod decode;
pub mod error;
pub mod ingest;
pub mod kg;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
pub use kg::{EntityId, EntityType, KnowledgeGraph, Path, PathToken, RelationId};
pub use vocab::{TokenId, TokenSequence, TokenType, Vocabulary};

/// Independent sub-seed for a keyed stream (per user, per stage) from one
/// base seed; splitmix64 finalizer, so nearby keys give unrelated streams.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
