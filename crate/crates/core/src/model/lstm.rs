//! Masked bidirectional LSTM layers built from graph ops.
//!
//! Gate rows of the weight matrix are ordered input, forget, output,
//! candidate; its columns are `[hidden ; input]`.

use crate::error::{QaError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

use super::Dropout;

/// Per-row, per-step validity of a `[B×L]` sequence batch.
#[derive(Debug, Clone)]
pub struct SeqMask<'a> {
    pub batch: usize,
    pub len: usize,
    pub mask: &'a [bool],
}

impl SeqMask<'_> {
    fn step(&self, t: usize) -> Vec<bool> {
        (0..self.batch).map(|b| self.mask[b * self.len + t]).collect()
    }
}

/// Runs one direction over `x: [B×L×in]` and returns `[B×L×h]`.
///
/// Masked steps carry the previous cell and hidden state through unchanged
/// and emit a zero output.
pub fn lstm_direction(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Var,
    mask: &SeqMask<'_>,
    reverse: bool,
) -> Result<Var> {
    let (batch, len, input) = match g.shape(x) {
        [b, l, i] => (*b, *l, *i),
        s => {
            return Err(QaError::Shape {
                op: "lstm",
                detail: format!("expected [B×L×in] input, got {s:?}"),
            })
        }
    };
    let ws = g.shape(weight).to_vec();
    if ws.len() != 2 || !ws[0].is_multiple_of(4) || ws[1] != ws[0] / 4 + input {
        return Err(QaError::Dimension {
            op: "lstm",
            lhs: ws,
            rhs: vec![batch, len, input],
        });
    }
    if mask.batch != batch || mask.len != len || mask.mask.len() != batch * len {
        return Err(QaError::Dimension {
            op: "lstm mask",
            lhs: vec![mask.batch, mask.len],
            rhs: vec![batch, len],
        });
    }
    let h = ws[0] / 4;

    let w_hidden = g.slice(weight, 1, 0, h)?;
    let w_input = g.slice(weight, 1, h, input)?;
    let w_hidden_t = g.transpose(w_hidden)?;
    let w_input_t = g.transpose(w_input)?;

    let x2d = g.reshape(x, &[batch * len, input])?;
    let projected = g.matmul(x2d, w_input_t)?;
    let bias_rows = g.broadcast_rows(bias, batch * len)?;
    let projected = g.add(projected, bias_rows)?;
    let projected = g.reshape(projected, &[batch, len, 4 * h])?;

    let mut hidden = g.constant(Tensor::zeros(&[batch, h]));
    let mut cell = g.constant(Tensor::zeros(&[batch, h]));
    let mut outputs = vec![None; len];
    let steps: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in steps {
        let xt = g.slice(projected, 1, t, 1)?;
        let xt = g.reshape(xt, &[batch, 4 * h])?;
        let recurrent = g.matmul(hidden, w_hidden_t)?;
        let z = g.add(xt, recurrent)?;

        let gates = g.slice(z, 1, 0, 3 * h)?;
        let gates = g.sigmoid(gates);
        let i = g.slice(gates, 1, 0, h)?;
        let f = g.slice(gates, 1, h, h)?;
        let o = g.slice(gates, 1, 2 * h, h)?;
        let cand = g.slice(z, 1, 3 * h, h)?;
        let cand = g.tanh(cand);

        let kept = g.mul(f, cell)?;
        let written = g.mul(i, cand)?;
        let new_cell = g.add(kept, written)?;
        let squashed = g.tanh(new_cell);
        let new_hidden = g.mul(o, squashed)?;

        let valid = mask.step(t);
        let out = if valid.iter().all(|&v| v) {
            cell = new_cell;
            hidden = new_hidden;
            new_hidden
        } else {
            let keep: Vec<f64> = valid
                .iter()
                .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, h))
                .collect();
            let carry: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = g.constant(Tensor::new(vec![batch, h], keep)?);
            let carry = g.constant(Tensor::new(vec![batch, h], carry)?);

            let a = g.mul(keep, new_cell)?;
            let b = g.mul(carry, cell)?;
            cell = g.add(a, b)?;
            let a = g.mul(keep, new_hidden)?;
            let b = g.mul(carry, hidden)?;
            hidden = g.add(a, b)?;
            g.mul(keep, new_hidden)?
        };
        outputs[t] = Some(g.reshape(out, &[batch, 1, h])?);
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    g.concat(&outputs, 1)
}

/// Names of one bidirectional layer's tensors, e.g. `encoder.l0`.
pub struct BiLstmParams {
    pub fwd_w: Var,
    pub fwd_b: Var,
    pub bwd_w: Var,
    pub bwd_b: Var,
}

/// One bidirectional layer: `[B×L×in] → [B×L×2h]`, forward half first.
pub fn bilstm_layer(g: &mut Graph, x: Var, p: &BiLstmParams, mask: &SeqMask<'_>) -> Result<Var> {
    let fwd = lstm_direction(g, x, p.fwd_w, p.fwd_b, mask, false)?;
    let bwd = lstm_direction(g, x, p.bwd_w, p.bwd_b, mask, true)?;
    g.concat(&[fwd, bwd], 2)
}

/// Stacked bidirectional layers with dropout on every layer input.
pub fn bilstm(
    g: &mut Graph,
    inputs: Var,
    layers: &[BiLstmParams],
    mask: &SeqMask<'_>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut x = inputs;
    for layer in layers {
        let dropped = dropout.apply(g, x)?;
        x = bilstm_layer(g, dropped, layer, mask)?;
    }
    Ok(x)
}
