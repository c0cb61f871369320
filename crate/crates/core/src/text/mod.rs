//! Reading SQuAD data and GloVe vectors, tokenizing, and batching.

mod batch;
mod cache;
mod squad;
pub mod synthetic;
mod tokenize;
mod vocab;

pub use batch::{
    make_batches, BatchConfig, BatchMode, BatchStats, QABatch, DEFAULT_MAX_CONTEXT_LEN, DEFAULT_MAX_QUESTION_LEN,
};
pub use cache::{is_cache, load_examples, parse_cache, write_cache, CACHE_FORMAT, CACHE_VERSION};
pub use squad::{align_answer, load_squad, parse_squad, to_squad_json, AlignError, LoadStats, QAExample, Span};
pub use tokenize::{tokenize, tokenize_with_offsets, Token};
pub use vocab::{Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
