//! The span-prediction network: frozen embeddings, a two-layer BiLSTM
//! encoder shared by context and question, bidirectional attention, a start
//! decoder, an end decoder conditioned on the start decoder's hidden states,
//! and one FC-ReLU-FC head per decoder.

mod attention;
mod config;
mod lstm;
mod params;

pub use attention::bidaf_attention;
pub use config::{ModelConfig, ENCODER_LAYERS};
pub use lstm::{bilstm, bilstm_layer, lstm_direction, BiLstmParams, SeqMask};
pub use params::{init_params, layout, param_count, xavier_limit, ModelParams, ParamSpec, ParamVars};

use crate::data::{Batch, EmbeddingTable};
use crate::error::{QaError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    /// Dropout active; masks derive from `seed`.
    Training { seed: u64 },
}

/// Hands out a fresh deterministic seed to each dropout site.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    training: bool,
    seed: u64,
    sites: u64,
}

impl Dropout {
    pub fn new(rate: f64, mode: Mode) -> Self {
        let (training, seed) = match mode {
            Mode::Inference => (false, 0),
            Mode::Training { seed } => (true, seed),
        };
        Self {
            rate,
            training,
            seed,
            sites: 0,
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        self.sites += 1;
        let seed = splitmix64(self.seed.wrapping_add(self.sites.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        g.dropout(x, self.rate, self.training, seed)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Looks up `[B×L]` ids as a constant `[B×L×d]` tensor. The table never
/// enters the graph, so it cannot receive a gradient.
pub fn embed(g: &mut Graph, ids: &[usize], batch: usize, len: usize, table: &EmbeddingTable) -> Result<Var> {
    let d = table.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let row = table.row(id).ok_or(QaError::Index {
            what: "embedding table",
            index: id,
            size: table.vocab_size(),
        })?;
        data.extend_from_slice(row);
    }
    Ok(g.constant(Tensor::new(vec![batch, len, d], data)?))
}

fn bilstm_params(vars: &ParamVars, prefix: &str) -> BiLstmParams {
    BiLstmParams {
        fwd_w: vars.var(&format!("{prefix}.fwd.w")),
        fwd_b: vars.var(&format!("{prefix}.fwd.b")),
        bwd_w: vars.var(&format!("{prefix}.bwd.w")),
        bwd_b: vars.var(&format!("{prefix}.bwd.b")),
    }
}

/// `FC2(relu(FC1(x)))` applied per position of `[B×L×in]`, giving `[B×L]`.
fn output_head(g: &mut Graph, x: Var, vars: &ParamVars, prefix: &str, dropout: &mut Dropout) -> Result<Var> {
    let (batch, len, width) = match g.shape(x) {
        [b, l, w] => (*b, *l, *w),
        s => {
            return Err(QaError::Shape {
                op: "output head",
                detail: format!("expected rank 3, got {s:?}"),
            })
        }
    };
    let x2d = g.reshape(x, &[batch * len, width])?;
    let x2d = dropout.apply(g, x2d)?;
    let w1 = g.transpose(vars.var(&format!("{prefix}.fc1.w")))?;
    let b1 = g.broadcast_rows(vars.var(&format!("{prefix}.fc1.b")), batch * len)?;
    let w2 = g.transpose(vars.var(&format!("{prefix}.fc2.w")))?;
    let b2 = g.broadcast_rows(vars.var(&format!("{prefix}.fc2.b")), batch * len)?;
    let hidden = g.matmul(x2d, w1)?;
    let hidden = g.add(hidden, b1)?;
    let hidden = g.relu(hidden);
    let logits = g.matmul(hidden, w2)?;
    let logits = g.add(logits, b2)?;
    g.reshape(logits, &[batch, len])
}

/// Start decoder: one BiLSTM layer over `G`, head over `[G ; M_start]`.
/// Returns `(M_start, start_logits)`.
pub fn start_decoder(
    g: &mut Graph,
    attention: Var,
    vars: &ParamVars,
    mask: &SeqMask<'_>,
    dropout: &mut Dropout,
) -> Result<(Var, Var)> {
    let input = dropout.apply(g, attention)?;
    let m_start = bilstm_layer(g, input, &bilstm_params(vars, "start_decoder"), mask)?;
    let features = g.concat(&[attention, m_start], 2)?;
    let logits = output_head(g, features, vars, "start_head", dropout)?;
    Ok((m_start, logits))
}

/// End decoder: one BiLSTM layer over `[G ; M_start]`, head over
/// `[G ; M_end]`. Returns `(M_end, end_logits)`.
pub fn end_decoder(
    g: &mut Graph,
    attention: Var,
    m_start: Var,
    vars: &ParamVars,
    mask: &SeqMask<'_>,
    dropout: &mut Dropout,
) -> Result<(Var, Var)> {
    let input = g.concat(&[attention, m_start], 2)?;
    let input = dropout.apply(g, input)?;
    let m_end = bilstm_layer(g, input, &bilstm_params(vars, "end_decoder"), mask)?;
    let features = g.concat(&[attention, m_end], 2)?;
    let logits = output_head(g, features, vars, "end_head", dropout)?;
    Ok((m_end, logits))
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub p_start: Var,
    pub p_end: Var,
    pub start_logits: Var,
    pub end_logits: Var,
    /// Attention output `G`, `[B×Lc×8h]`.
    pub attention: Var,
    pub m_start: Var,
    pub m_end: Var,
}

pub fn forward(
    g: &mut Graph,
    batch: &Batch,
    vars: &ParamVars,
    table: &EmbeddingTable,
    config: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    if table.dim() != config.embedding_dim {
        return Err(QaError::Config(format!(
            "embedding table has width {}, model expects {}",
            table.dim(),
            config.embedding_dim
        )));
    }
    let mut dropout = Dropout::new(config.dropout_rate, mode);
    let (b, lc, lq) = (batch.size, batch.context_len, batch.question_len);
    let cmask = SeqMask {
        batch: b,
        len: lc,
        mask: &batch.context_mask,
    };
    let qmask = SeqMask {
        batch: b,
        len: lq,
        mask: &batch.question_mask,
    };

    let encoder: Vec<BiLstmParams> = (0..config.encoder_layers)
        .map(|l| bilstm_params(vars, &format!("encoder.l{l}")))
        .collect();
    let context = embed(g, &batch.context_ids, b, lc, table)?;
    let question = embed(g, &batch.question_ids, b, lq, table)?;
    let h_context = bilstm(g, context, &encoder, &cmask, &mut dropout)?;
    let u_question = bilstm(g, question, &encoder, &qmask, &mut dropout)?;

    let attention = bidaf_attention(
        g,
        h_context,
        u_question,
        vars.var("attention.w_sim"),
        &batch.context_mask,
        &batch.question_mask,
    )?;
    let (m_start, start_logits) = start_decoder(g, attention, vars, &cmask, &mut dropout)?;
    let (m_end, end_logits) = end_decoder(g, attention, m_start, vars, &cmask, &mut dropout)?;
    let p_start = g.masked_softmax(start_logits, &batch.context_mask)?;
    let p_end = g.masked_softmax(end_logits, &batch.context_mask)?;
    Ok(ForwardOutput {
        p_start,
        p_end,
        start_logits,
        end_logits,
        attention,
        m_start,
        m_end,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub total: Var,
    pub start: Var,
    pub end: Var,
}

/// Sum of the batch-mean start and end cross-entropies.
pub fn loss(g: &mut Graph, out: &ForwardOutput, batch: &Batch) -> Result<Loss> {
    let starts = batch
        .gold_starts()
        .ok_or_else(|| QaError::Label("batch has rows without a gold span".into()))?;
    let ends = batch.gold_ends().expect("starts and ends are present together");
    let start = g.cross_entropy(out.p_start, &starts, &batch.context_mask)?;
    let end = g.cross_entropy(out.p_end, &ends, &batch.context_mask)?;
    let total = g.add(start, end)?;
    Ok(Loss { total, start, end })
}

/// Start and end distributions for every row of `batch`, dropout off.
pub fn predict_distributions(
    params: &ModelParams,
    batch: &Batch,
    table: &EmbeddingTable,
    config: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward(&mut g, batch, &vars, table, config, Mode::Inference)?;
    Ok((g.value(out.p_start).clone(), g.value(out.p_end).clone()))
}
