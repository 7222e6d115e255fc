//! SQuAD and GloVe ingestion, tokenization, batching and corpus statistics.

mod batch;
mod glove;
mod squad;
mod stats;
mod tokenize;

pub use batch::{build_batches, build_eval_batches, Batch, Batches, DEFAULT_CONTEXT_CAP};
pub use glove::{load_glove, EmbeddingTable, PAD_ID, UNK_ID};
pub use squad::{align_answer, load_squad, parse_squad, Context, QAExample, SquadData};
pub use stats::{answer_length, dataset_stats, DatasetStats, Histogram, ANSWER_LENGTH_LIMIT, CONTEXT_LENGTH_LIMIT};
pub use tokenize::{char_slice, tokenize, Token};
