//! Classification of multi-page handwritten document images from their
//! probabilistic indexes, without transcription.
//!
//! The pipeline turns relevance probabilities of spotted pseudo-words into
//! expected word and document frequencies ([`expectation`]), ranks words by
//! information gain and builds standardized tf-idf vectors ([`features`]),
//! classifies them with small softmax MLPs ([`classifier`]) and evaluates with
//! leave-one-out at document and page level ([`evaluation`]). [`synth`]
//! generates collections with known ground truth and [`pipeline`] wires
//! everything into reproducible runs.

pub mod classifier;
pub mod evaluation;
pub mod expectation;
pub mod features;
pub mod ingest;
pub mod pipeline;
pub mod seed;
pub mod synth;
