//! Character vocabulary, identity corpus synthesis and padded batches.

mod batch;
mod corpus;
mod vocab;

pub use batch::{make_batches, Batch};
pub use corpus::{generate_corpus, read_corpus, write_corpus, CorpusSpec};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, PAYLOAD_SIZE, VOCAB_SIZE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("invalid corpus bounds: {0}")]
    Bounds(String),
    #[error("corpus I/O: {0}")]
    Io(#[from] std::io::Error),
}
