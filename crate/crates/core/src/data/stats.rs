use std::fmt;

use serde::Serialize;

use super::squad::QAExample;
use super::tokenize::tokenize;
use crate::error::{QaError, Result};

pub const ANSWER_LENGTH_LIMIT: usize = 20;
pub const CONTEXT_LENGTH_LIMIT: usize = 300;
const BUCKETS: usize = 10;

/// Ten equal-width buckets; the last one is open-ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bucket_width: usize,
    pub counts: [usize; BUCKETS],
}

impl Histogram {
    fn new(bucket_width: usize) -> Self {
        Self {
            bucket_width,
            counts: [0; BUCKETS],
        }
    }

    fn add(&mut self, value: usize) {
        self.counts[(value / self.bucket_width).min(BUCKETS - 1)] += 1;
    }
}

impl fmt::Display for Histogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total: usize = self.counts.iter().sum::<usize>().max(1);
        for (i, &count) in self.counts.iter().enumerate() {
            let lo = i * self.bucket_width;
            let label = if i + 1 == BUCKETS {
                format!("{lo}+")
            } else {
                format!("{lo}-{}", lo + self.bucket_width - 1)
            };
            let bar = "#".repeat((count * 50).div_ceil(total));
            writeln!(f, "  {label:>9} {count:>8} {bar}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub example_count: usize,
    /// Fraction of answers shorter than 20 tokens.
    pub answers_under_limit: f64,
    /// Fraction of contexts shorter than 300 tokens.
    pub contexts_under_limit: f64,
    pub answer_histogram: Histogram,
    pub context_histogram: Histogram,
}

/// Token length of an example's first answer: the aligned span when there is
/// one, otherwise the tokenized answer text.
pub fn answer_length(example: &QAExample) -> usize {
    match example.gold_span {
        Some((s, e)) => e - s + 1,
        None => tokenize(&example.answer_texts[0]).len(),
    }
}

pub fn dataset_stats<'a, I>(examples: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = &'a QAExample>,
{
    let mut count = 0usize;
    let mut short_answers = 0usize;
    let mut short_contexts = 0usize;
    let mut answer_histogram = Histogram::new(5);
    let mut context_histogram = Histogram::new(50);
    for e in examples {
        count += 1;
        let a = answer_length(e);
        let c = e.context_tokens().len();
        short_answers += usize::from(a < ANSWER_LENGTH_LIMIT);
        short_contexts += usize::from(c < CONTEXT_LENGTH_LIMIT);
        answer_histogram.add(a);
        context_histogram.add(c);
    }
    if count == 0 {
        return Err(QaError::EmptyStats);
    }
    Ok(DatasetStats {
        example_count: count,
        answers_under_limit: short_answers as f64 / count as f64,
        contexts_under_limit: short_contexts as f64 / count as f64,
        answer_histogram,
        context_histogram,
    })
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples: {}", self.example_count)?;
        writeln!(
            f,
            "answers  < {ANSWER_LENGTH_LIMIT} tokens: {:.2}%",
            100.0 * self.answers_under_limit
        )?;
        writeln!(
            f,
            "contexts < {CONTEXT_LENGTH_LIMIT} tokens: {:.2}%",
            100.0 * self.contexts_under_limit
        )?;
        writeln!(f, "answer length histogram (tokens):")?;
        write!(f, "{}", self.answer_histogram)?;
        writeln!(f, "context length histogram (tokens):")?;
        write!(f, "{}", self.context_histogram)
    }
}
