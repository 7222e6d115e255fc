//! Optimization: Adam with global-norm clipping, single steps, and the
//! resumable training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, EmbeddingTable, QAExample};
use crate::error::{QaError, Result};
use crate::eval::evaluate;
use crate::graph::Graph;
use crate::infer::{predict_examples, to_predictions};
use crate::model::{forward, init_params, loss, ModelConfig, ModelParams, Mode};
use crate::span::{DecodeOptions, DEFAULT_MAX_ANSWER_LEN};
use crate::tensor::Tensor;

pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let correct1 = 1.0 - cfg.beta1.powi(t);
        let correct2 = 1.0 - cfg.beta2.powi(t);
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self.first.get_mut(name).expect("moment per parameter").data_mut();
            let v = self.second.get_mut(name).expect("moment per parameter").data_mut();
            for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Forward, loss, backward, clip, Adam update.
pub fn train_step(
    params: &mut ModelParams,
    batch: &Batch,
    table: &EmbeddingTable,
    adam: &mut AdamState,
    config: &ModelConfig,
    adam_config: &AdamConfig,
    dropout_seed: u64,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward(&mut g, batch, &vars, table, config, Mode::Training { seed: dropout_seed })?;
    let l = loss(&mut g, &out, batch)?;
    let loss_value = g.value(l.total).item();
    if !loss_value.is_finite() {
        let culprit = g
            .first_non_finite()
            .map(|(node, op)| {
                let name = vars
                    .iter()
                    .find(|(_, v)| v.id() == node)
                    .map(|(n, _)| format!(" (parameter {n})"))
                    .unwrap_or_default();
                format!("first non-finite tensor is node {node} [{op}]{name}")
            })
            .unwrap_or_else(|| "no non-finite tensor found".into());
        return Err(QaError::Diverged(format!("loss is {loss_value}; {culprit}")));
    }
    let grads = g.backward(l.total)?;
    let mut named: BTreeMap<String, Tensor> = vars.iter().map(|(n, v)| (n.clone(), grads.get(*v))).collect();
    if let Some((name, _)) = named.iter().find(|(_, t)| !t.is_finite()) {
        return Err(QaError::Diverged(format!("gradient of {name} is not finite")));
    }
    let grad_norm = clip_global_norm(&mut named, CLIP_NORM);
    adam.update(params, &named, adam_config);
    Ok(StepOutcome {
        loss: loss_value,
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub dev_f1: Option<f64>,
    pub dev_em: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub eval_every: u64,
    pub max_answer_len: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 40,
            eval_every: 500,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
        }
    }
}

/// Serializable ChaCha position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || QaError::Checkpoint("invalid RNG state".into());
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&self.seed, &mut seed).map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub adam: AdamState,
    pub rng: RngState,
    /// Batch visiting order of the current epoch and the next position in it.
    pub epoch_order: Vec<usize>,
    pub cursor: usize,
    pub best_dev_f1: Option<f64>,
}

pub struct Trainer {
    pub config: ModelConfig,
    pub options: TrainOptions,
    pub params: ModelParams,
    pub adam: AdamState,
    pub iteration: u64,
    pub best_dev_f1: Option<f64>,
    rng: ChaCha8Rng,
    epoch_order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: ModelConfig, options: TrainOptions) -> Result<Self> {
        let params = init_params(&config)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5_eed0_f7a1_u64);
        Ok(Self {
            adam: AdamState::new(&params),
            params,
            config,
            options,
            iteration: 0,
            best_dev_f1: None,
            rng,
            epoch_order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn resume(config: ModelConfig, options: TrainOptions, params: ModelParams, state: TrainState) -> Result<Self> {
        params.validate(&config)?;
        Ok(Self {
            rng: state.rng.restore()?,
            config,
            options,
            params,
            adam: state.adam,
            iteration: state.iteration,
            best_dev_f1: state.best_dev_f1,
            epoch_order: state.epoch_order,
            cursor: state.cursor,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            iteration: self.iteration,
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
            epoch_order: self.epoch_order.clone(),
            cursor: self.cursor,
            best_dev_f1: self.best_dev_f1,
        }
    }

    fn next_batch(&mut self, count: usize) -> usize {
        if self.cursor >= self.epoch_order.len() || self.epoch_order.len() != count {
            self.epoch_order = (0..count).collect();
            self.epoch_order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.epoch_order[self.cursor - 1]
    }

    /// One optimization step on the next batch of the epoch order.
    pub fn step(&mut self, batches: &[Batch], table: &EmbeddingTable) -> Result<StepOutcome> {
        if batches.is_empty() {
            return Err(QaError::Input("no training batches".into()));
        }
        let index = self.next_batch(batches.len());
        let seed = self.rng.next_u64();
        let outcome = train_step(
            &mut self.params,
            &batches[index],
            table,
            &mut self.adam,
            &self.config,
            &self.options.adam,
            seed,
        )?;
        self.iteration += 1;
        Ok(outcome)
    }

    /// Dev-set F1 and EM with smart-span decoding.
    pub fn evaluate(&self, examples: &[QAExample], table: &EmbeddingTable) -> Result<(f64, f64)> {
        let decode = DecodeOptions {
            max_len: self.options.max_answer_len,
            ..DecodeOptions::default()
        };
        let spans = predict_examples(&self.params, examples, table, &self.config, self.options.batch_size, decode)?;
        let report = evaluate(&to_predictions(&spans)?, examples);
        Ok((report.f1, report.em))
    }

    /// Runs until `iters` total iterations. `on_record` sees every log record;
    /// `on_improve` is called whenever dev F1 beats the best so far.
    pub fn run(
        &mut self,
        iters: u64,
        batches: &[Batch],
        table: &EmbeddingTable,
        dev: Option<&[QAExample]>,
        mut on_record: impl FnMut(&TrainLogRecord) -> Result<()>,
        mut on_improve: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < iters {
            let started = Instant::now();
            let outcome = self.step(batches, table)?;
            let mut record = TrainLogRecord {
                iteration: self.iteration,
                loss: outcome.loss,
                dev_f1: None,
                dev_em: None,
                seconds: 0.0,
            };
            let eval_due = self.options.eval_every > 0 && self.iteration.is_multiple_of(self.options.eval_every);
            if let (Some(dev), true) = (dev, eval_due) {
                let (f1, em) = self.evaluate(dev, table)?;
                record.dev_f1 = Some(f1);
                record.dev_em = Some(em);
                if self.best_dev_f1.is_none_or(|best| f1 > best) {
                    self.best_dev_f1 = Some(f1);
                    on_improve(self)?;
                }
            }
            record.seconds = started.elapsed().as_secs_f64();
            on_record(&record)?;
        }
        Ok(())
    }
}
