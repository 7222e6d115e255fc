//! Answer-span decoding from start/end distributions.
//!
//! The smart-span score divides the endpoint probability product by
//! `log(length) + 1`, so among spans with similar products the shorter one
//! wins.

use serde::Serialize;

use crate::data::Context;
use crate::error::{QaError, Result};

pub const DEFAULT_MAX_ANSWER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// Longest span considered, in tokens.
    pub max_len: usize,
    /// Base of the length penalty's logarithm.
    pub log_base: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_ANSWER_LEN,
            log_base: std::f64::consts::E,
        }
    }
}

/// Inclusive token span and its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub score: f64,
    /// Original-case context text under the span.
    pub answer_text: String,
}

impl SpanPrediction {
    pub fn new(span: Span, context: &Context) -> Self {
        Self {
            start: span.start,
            end: span.end,
            score: span.score,
            answer_text: context.span_text(span.start, span.end).to_string(),
        }
    }
}

/// `p_s·p_e / (ln(end − start + 1) + 1)`.
pub fn smart_span_score(p_s: f64, p_e: f64, start: usize, end: usize) -> Result<f64> {
    smart_span_score_base(p_s, p_e, start, end, std::f64::consts::E)
}

pub fn smart_span_score_base(p_s: f64, p_e: f64, start: usize, end: usize, log_base: f64) -> Result<f64> {
    if start > end {
        return Err(QaError::Ordering { start, end });
    }
    Ok(score_unchecked(p_s, p_e, end - start + 1, log_base))
}

fn score_unchecked(p_s: f64, p_e: f64, len: usize, log_base: f64) -> f64 {
    let penalty = if log_base == std::f64::consts::E {
        (len as f64).ln()
    } else {
        (len as f64).log(log_base)
    };
    p_s * p_e / (penalty + 1.0)
}

fn check_inputs(p_start: &[f64], p_end: &[f64], mask: &[bool]) -> Result<()> {
    if p_start.len() != p_end.len() || p_start.len() != mask.len() {
        return Err(QaError::Dimension {
            op: "span decoding",
            lhs: vec![p_start.len(), p_end.len()],
            rhs: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(QaError::DegenerateSpan);
    }
    Ok(())
}

/// Highest-scoring unmasked pair with `start ≤ end < start + max_len`, using
/// `score`. Ties go to the smaller start, then the smaller end.
fn argmax_span(
    p_start: &[f64],
    p_end: &[f64],
    mask: &[bool],
    max_len: usize,
    score: impl Fn(f64, f64, usize) -> f64,
) -> Result<Span> {
    check_inputs(p_start, p_end, mask)?;
    if max_len == 0 {
        return Err(QaError::Config("maximum answer length must be at least 1".into()));
    }
    let n = p_start.len();
    let mut best: Option<Span> = None;
    for s in (0..n).filter(|&s| mask[s]) {
        for e in (s..n.min(s + max_len)).filter(|&e| mask[e]) {
            let value = score(p_start[s], p_end[e], e - s + 1);
            if best.is_none_or(|b| value > b.score) {
                best = Some(Span { start: s, end: e, score: value });
            }
        }
    }
    Ok(best.expect("at least one unmasked position"))
}

/// Smart-span decoding with natural log and the given length cap.
pub fn best_span(p_start: &[f64], p_end: &[f64], mask: &[bool], max_len: usize) -> Result<Span> {
    best_span_with(
        p_start,
        p_end,
        mask,
        DecodeOptions {
            max_len,
            ..DecodeOptions::default()
        },
    )
}

pub fn best_span_with(p_start: &[f64], p_end: &[f64], mask: &[bool], options: DecodeOptions) -> Result<Span> {
    argmax_span(p_start, p_end, mask, options.max_len, |ps, pe, len| {
        score_unchecked(ps, pe, len, options.log_base)
    })
}

/// Exhaustive smart-span search over every ordered pair, no length cap.
pub fn oracle_best_span(p_start: &[f64], p_end: &[f64], mask: &[bool]) -> Result<Span> {
    check_inputs(p_start, p_end, mask)?;
    let mut best: Option<Span> = None;
    for s in 0..p_start.len() {
        for e in 0..p_end.len() {
            if e < s || !mask[s] || !mask[e] {
                continue;
            }
            let value = smart_span_score(p_start[s], p_end[e], s, e)?;
            let better = match best {
                None => true,
                Some(b) => value > b.score || (value == b.score && (s, e) < (b.start, b.end)),
            };
            if better {
                best = Some(Span { start: s, end: e, score: value });
            }
        }
    }
    Ok(best.expect("at least one unmasked position"))
}

/// Plain `p_start·p_end` argmax under the same cap and tie-break.
pub fn raw_product_span(p_start: &[f64], p_end: &[f64], mask: &[bool], max_len: usize) -> Result<Span> {
    argmax_span(p_start, p_end, mask, max_len, |ps, pe, _| ps * pe)
}
