//! Bidirectional attention flow between context and question encodings.

use crate::error::{QaError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Logit added to masked question positions before the row max.
const MASKED_LOGIT: f64 = -1e30;

/// `H: [B×Lc×2h]`, `U: [B×Lq×2h]`, `w_sim: [6h]` → `G: [B×Lc×8h]`.
///
/// Similarity `S[i][j] = w_sim · [cᵢ ; qⱼ ; cᵢ∘qⱼ]`. Context-to-question
/// attends over question words per context word; question-to-context attends
/// over context words using each word's best question match, and the single
/// resulting vector is tiled over all context positions. Output rows are
/// `[cᵢ ; ũᵢ ; cᵢ∘ũᵢ ; cᵢ∘h̃]`.
pub fn bidaf_attention(
    g: &mut Graph,
    context: Var,
    question: Var,
    w_sim: Var,
    context_mask: &[bool],
    question_mask: &[bool],
) -> Result<Var> {
    let (cs, qs) = (g.shape(context).to_vec(), g.shape(question).to_vec());
    if cs.len() != 3 || qs.len() != 3 || cs[0] != qs[0] || cs[2] != qs[2] || cs[2] % 2 != 0 {
        return Err(QaError::Dimension {
            op: "bidaf_attention",
            lhs: cs,
            rhs: qs,
        });
    }
    let (batch, lc, width) = (cs[0], cs[1], cs[2]);
    let lq = qs[1];
    if g.shape(w_sim) != [3 * width] {
        return Err(QaError::Dimension {
            op: "bidaf_attention w_sim",
            lhs: g.shape(w_sim).to_vec(),
            rhs: vec![3 * width],
        });
    }
    if context_mask.len() != batch * lc || question_mask.len() != batch * lq {
        return Err(QaError::Shape {
            op: "bidaf_attention",
            detail: "mask sizes do not match the encodings".into(),
        });
    }

    let w_context = g.slice(w_sim, 0, 0, width)?;
    let w_context = g.reshape(w_context, &[width, 1])?;
    let w_question = g.slice(w_sim, 0, width, width)?;
    let w_question = g.reshape(w_question, &[width, 1])?;
    let w_product = g.slice(w_sim, 0, 2 * width, width)?;

    let ones_q = g.constant(Tensor::ones(&[batch, 1, lq]));
    let ones_c = g.constant(Tensor::ones(&[batch, lc, 1]));

    let c2d = g.reshape(context, &[batch * lc, width])?;
    let q2d = g.reshape(question, &[batch * lq, width])?;

    // w_c · cᵢ, tiled over j
    let sc = g.matmul(c2d, w_context)?;
    let sc = g.reshape(sc, &[batch, lc, 1])?;
    let sc = g.batch_matmul(sc, ones_q)?;
    // w_q · qⱼ, tiled over i
    let sq = g.matmul(q2d, w_question)?;
    let sq = g.reshape(sq, &[batch, 1, lq])?;
    let sq = g.batch_matmul(ones_c, sq)?;
    // w_cq · (cᵢ∘qⱼ) = (cᵢ∘w_cq) · qⱼ
    let wp_rows = g.broadcast_rows(w_product, batch * lc)?;
    let cw = g.mul(c2d, wp_rows)?;
    let cw = g.reshape(cw, &[batch, lc, width])?;
    let qt = g.transpose(question)?;
    let sp = g.batch_matmul(cw, qt)?;

    let s = g.add(sc, sq)?;
    let s = g.add(s, sp)?;

    // context-to-question
    let c2q_mask: Vec<bool> = (0..batch)
        .flat_map(|b| {
            let row = &question_mask[b * lq..(b + 1) * lq];
            std::iter::repeat_n(row, lc).flatten().copied()
        })
        .collect();
    let a = g.masked_softmax(s, &c2q_mask)?;
    let attended_q = g.batch_matmul(a, question)?;

    // question-to-context
    let penalty: Vec<f64> = c2q_mask
        .iter()
        .map(|&m| if m { 0.0 } else { MASKED_LOGIT })
        .collect();
    let penalty = g.constant(Tensor::new(vec![batch, lc, lq], penalty)?);
    let s_masked = g.add(s, penalty)?;
    let best = g.max_last(s_masked);
    let b = g.masked_softmax(best, context_mask)?;
    let b = g.reshape(b, &[batch, 1, lc])?;
    let attended_c = g.batch_matmul(b, context)?;
    let attended_c = g.batch_matmul(ones_c, attended_c)?;

    let cu = g.mul(context, attended_q)?;
    let ch = g.mul(context, attended_c)?;
    g.concat(&[context, attended_q, cu, ch], 2)
}
