//! Token-entropy scoring of chain-of-thought samples and the selection
//! strategies built on it.
//!
//! A sample's high-entropy sum (`hes_rel`) adds up the entropies of its top
//! `p` fraction of tokens. Scores feed corpus selection for fine-tuning
//! ([`selection`]), RL batch construction ([`rl`]) and reports ([`analysis`]).
//! [`synth`] generates corpora with known answers for testing all of them.

pub mod analysis;
pub mod corpus;
pub mod entropy;
pub mod manifest;
pub mod pipeline;
pub mod rl;
pub mod scores;
pub mod selection;
pub mod synth;

pub use corpus::{read_corpus, write_corpus, CorpusError, CorpusReader, SampleRecord};
pub use entropy::{
    compute_token_entropy, high_entropy_count, identify_high_entropy_tokens, score_sample, MetricConfig, SampleScore,
    ScoreError, TailMode, TokenError, TokenObservation, DEFAULT_ABSOLUTE_THRESHOLD, DEFAULT_HIGH_ENTROPY_FRACTION,
};
pub use manifest::{read_manifest, write_manifest, SelectionManifest};
pub use pipeline::{score_stream, PipelineError, ScoreOptions, ScoreRunStats};
pub use scores::{write_scores, ScoreTable};
