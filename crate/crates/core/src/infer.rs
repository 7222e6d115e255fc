use crate::data::{build_eval_batches, EmbeddingTable, QAExample};
use crate::error::Result;
use crate::eval::Predictions;
use crate::model::{predict_distributions, ModelConfig, ModelParams};
use crate::span::{best_span_with, DecodeOptions, SpanPrediction};

/// Decodes an answer span for every example, in input order.
pub fn predict_examples(
    params: &ModelParams,
    examples: &[QAExample],
    table: &EmbeddingTable,
    config: &ModelConfig,
    batch_size: usize,
    decode: DecodeOptions,
) -> Result<Vec<(String, SpanPrediction)>> {
    let mut out = Vec::with_capacity(examples.len());
    for batch in build_eval_batches(examples, table, batch_size, config.context_cap)? {
        let (p_start, p_end) = predict_distributions(params, &batch, table, config)?;
        let width = batch.context_len;
        for (row, &index) in batch.example_indices.iter().enumerate() {
            let cols = row * width..(row + 1) * width;
            let span = best_span_with(
                &p_start.data()[cols.clone()],
                &p_end.data()[cols.clone()],
                &batch.context_mask[cols],
                decode,
            )?;
            let example = &examples[index];
            out.push((example.qid.clone(), SpanPrediction::new(span, &example.context)));
        }
    }
    Ok(out)
}

pub fn to_predictions(spans: &[(String, SpanPrediction)]) -> Result<Predictions> {
    Predictions::from_pairs(spans.iter().map(|(q, s)| (q.clone(), s.answer_text.clone())))
}
