use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::glove::{EmbeddingTable, PAD_ID, UNK_ID};
use super::squad::QAExample;
use crate::error::{QaError, Result};

pub const DEFAULT_CONTEXT_CAP: usize = 300;

/// Padded, masked token-id matrices for `size` examples, row-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub context_len: usize,
    pub question_len: usize,
    pub context_ids: Vec<usize>,
    pub context_mask: Vec<bool>,
    pub question_ids: Vec<usize>,
    pub question_mask: Vec<bool>,
    /// Inclusive gold spans; `None` only in evaluation batches.
    pub golds: Vec<Option<(usize, usize)>>,
    pub qids: Vec<String>,
    /// Position of each row's example in the list given to the builder.
    pub example_indices: Vec<usize>,
}

impl Batch {
    pub fn gold_starts(&self) -> Option<Vec<usize>> {
        self.golds.iter().map(|g| g.map(|(s, _)| s)).collect()
    }

    pub fn gold_ends(&self) -> Option<Vec<usize>> {
        self.golds.iter().map(|g| g.map(|(_, e)| e)).collect()
    }

    /// Unpadded context length of row `b`.
    pub fn context_length(&self, b: usize) -> usize {
        let row = &self.context_mask[b * self.context_len..(b + 1) * self.context_len];
        row.iter().filter(|&&m| m).count()
    }

    /// Builds one batch from the given example rows, truncating contexts at
    /// `context_cap`. Gold spans that would be clipped become `None`.
    pub fn from_examples(
        examples: &[QAExample],
        indices: &[usize],
        table: &EmbeddingTable,
        context_cap: usize,
    ) -> Self {
        let ids = |toks: &[super::tokenize::Token]| -> Vec<usize> {
            if toks.is_empty() {
                vec![UNK_ID]
            } else {
                toks.iter().map(|t| table.lookup(&t.text)).collect()
            }
        };
        let rows: Vec<(Vec<usize>, Vec<usize>)> = indices
            .iter()
            .map(|&i| {
                let e = &examples[i];
                let mut c = ids(e.context_tokens());
                c.truncate(context_cap);
                (c, ids(&e.question_tokens))
            })
            .collect();
        let context_len = rows.iter().map(|r| r.0.len()).max().unwrap_or(1);
        let question_len = rows.iter().map(|r| r.1.len()).max().unwrap_or(1);
        let size = indices.len();
        let mut batch = Batch {
            size,
            context_len,
            question_len,
            context_ids: vec![PAD_ID; size * context_len],
            context_mask: vec![false; size * context_len],
            question_ids: vec![PAD_ID; size * question_len],
            question_mask: vec![false; size * question_len],
            golds: Vec::with_capacity(size),
            qids: Vec::with_capacity(size),
            example_indices: indices.to_vec(),
        };
        for (b, ((c, q), &i)) in rows.iter().zip(indices).enumerate() {
            batch.context_ids[b * context_len..b * context_len + c.len()].copy_from_slice(c);
            batch.context_mask[b * context_len..b * context_len + c.len()].fill(true);
            batch.question_ids[b * question_len..b * question_len + q.len()].copy_from_slice(q);
            batch.question_mask[b * question_len..b * question_len + q.len()].fill(true);
            let e = &examples[i];
            batch.golds.push(e.gold_span.filter(|&(_, end)| end < c.len()));
            batch.qids.push(e.qid.clone());
        }
        batch
    }
}

#[derive(Debug)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Training examples left out: unaligned, or gold span beyond the cap.
    pub dropped: usize,
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size < 1 {
        return Err(QaError::Config("batch size must be at least 1".into()));
    }
    Ok(())
}

/// Training batches. Examples without a gold span, or whose gold span ends at
/// or beyond `context_cap`, are dropped and counted. With a seed the example
/// order is shuffled deterministically before chunking.
pub fn build_batches(
    examples: &[QAExample],
    table: &EmbeddingTable,
    batch_size: usize,
    context_cap: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches> {
    check_batch_size(batch_size)?;
    if context_cap < 1 {
        return Err(QaError::Config("context cap must be at least 1".into()));
    }
    let mut keep: Vec<usize> = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        if matches!(e.gold_span, Some((_, end)) if end < context_cap) {
            keep.push(i);
        }
    }
    let dropped = examples.len() - keep.len();
    if let Some(seed) = shuffle_seed {
        keep.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let batches = keep
        .chunks(batch_size)
        .map(|rows| Batch::from_examples(examples, rows, table, context_cap))
        .collect();
    Ok(Batches { batches, dropped })
}

/// Evaluation batches in input order; nothing is dropped.
pub fn build_eval_batches(
    examples: &[QAExample],
    table: &EmbeddingTable,
    batch_size: usize,
    context_cap: usize,
) -> Result<Vec<Batch>> {
    check_batch_size(batch_size)?;
    let all: Vec<usize> = (0..examples.len()).collect();
    Ok(all
        .chunks(batch_size)
        .map(|rows| Batch::from_examples(examples, rows, table, context_cap.max(1)))
        .collect())
}
