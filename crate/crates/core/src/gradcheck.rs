//! Central finite-difference verification of the backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::BTreeMap;

use crate::data::{Batch, EmbeddingTable};
use crate::error::Result;
use crate::graph::{Graph, OpTag, Var};
use crate::model::{forward, init_params, loss, ModelConfig, ModelParams, Mode, ParamVars};
use crate::tensor::Tensor;

/// Step used by the gradient suite.
pub const EPS: f64 = 1e-5;
/// Worst relative error tolerated for a single op.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Step for the end-to-end model check. At `EPS` the loss differences are
/// only a few ulps for gradients near 1e-8, which the relative-error floor
/// cannot absorb.
pub const MODEL_EPS: f64 = 1e-4;
/// Finite differences are only meaningful away from ReLU and max kinks; the
/// tiny model is drawn so that every kink is at least this far away.
pub const KINK_MARGIN: f64 = 1e-2;
/// Worst relative error tolerated for the end-to-end model loss.
pub const MODEL_TOLERANCE: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the analytic gradient of `f` at `x` and
/// central finite differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(f, xs, eps, None)
}

/// [`grad_check_many`] with an optional deliberately broken backward rule.
pub fn grad_check_with_fault<F>(f: F, xs: &[Tensor], eps: f64, fault: Option<OpTag>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    if let Some(tag) = fault {
        graph.inject_fault(tag);
    }
    let vars: Vec<Var> = xs.iter().map(|x| graph.param(x.clone())).collect();
    let root = f(&mut graph, &vars)?;
    let grads = graph.backward(root)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..inputs[slot].numel() {
            let original = inputs[slot].data()[i];
            inputs[slot].data_mut()[i] = original + eps;
            let plus = eval(&inputs)?;
            inputs[slot].data_mut()[i] = original - eps;
            let minus = eval(&inputs)?;
            inputs[slot].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero, for the relu kink.
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Reduces an arbitrary tensor to a scalar through a random weighting so that
/// every output coordinate carries a distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w);
    let weighted = g.mul(y, w)?;
    Ok(g.sum(weighted))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();

    cases.push((
        "matmul",
        vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "batch_matmul",
        vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 4, 2])],
        Box::new(move |g, v| {
            let y = g.batch_matmul(v[0], v[1])?;
            project(g, y, seed)
        }),
    ));
    for name in ["add", "sub", "mul"] {
        cases.push((
            name,
            vec![random(&mut rng, &[3, 3]), random(&mut rng, &[3, 3])],
            Box::new(move |g, v| {
                let y = match name {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                project(g, y, seed)
            }),
        ));
    }
    cases.push((
        "mul (scalar operand)",
        vec![random(&mut rng, &[2, 3]), random(&mut rng, &[1])],
        Box::new(move |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "scale",
        vec![random(&mut rng, &[4])],
        Box::new(move |g, v| {
            let y = g.scale(v[0], -2.5);
            project(g, y, seed)
        }),
    ));
    cases.push((
        "tanh",
        vec![random(&mut rng, &[3, 3])],
        Box::new(move |g, v| {
            let y = g.tanh(v[0]);
            project(g, y, seed)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![random(&mut rng, &[3, 3])],
        Box::new(move |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, seed)
        }),
    ));
    cases.push((
        "relu",
        vec![random_away_from_zero(&mut rng, &[3, 3])],
        Box::new(move |g, v| {
            let y = g.relu(v[0]);
            project(g, y, seed)
        }),
    ));
    cases.push((
        "concat",
        vec![random(&mut rng, &[2, 3, 2]), random(&mut rng, &[2, 1, 2])],
        Box::new(move |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "slice",
        vec![random(&mut rng, &[2, 5, 3])],
        Box::new(move |g, v| {
            let y = g.slice(v[0], 1, 1, 3)?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "reshape",
        vec![random(&mut rng, &[2, 6])],
        Box::new(move |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "transpose",
        vec![random(&mut rng, &[2, 3, 4])],
        Box::new(move |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "broadcast_rows",
        vec![random(&mut rng, &[4])],
        Box::new(move |g, v| {
            let y = g.broadcast_rows(v[0], 3)?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "max_last",
        vec![random(&mut rng, &[3, 5])],
        Box::new(move |g, v| {
            let y = g.max_last(v[0]);
            project(g, y, seed)
        }),
    ));
    cases.push((
        "masked_softmax",
        vec![random(&mut rng, &[3, 4])],
        Box::new(move |g, v| {
            let mask = [
                true, true, true, true, true, false, true, false, false, false, true, true,
            ];
            let y = g.masked_softmax(v[0], &mask)?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "cross_entropy",
        vec![random(&mut rng, &[3, 4]).map(|v| 0.55 + 0.4 * v)],
        Box::new(move |g, v| g.cross_entropy(v[0], &[0, 3, 1], &[true; 12])),
    ));
    cases.push((
        "dropout",
        vec![random(&mut rng, &[4, 4])],
        Box::new(move |g, v| {
            let y = g.dropout(v[0], 0.3, true, seed)?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "sum",
        vec![random(&mut rng, &[2, 3])],
        Box::new(move |g, v| Ok(g.sum(v[0]))),
    ));
    cases.push((
        "fan-out (shared node)",
        vec![random(&mut rng, &[3])],
        Box::new(move |g, v| {
            let t = g.tanh(v[0]);
            let s = g.sigmoid(t);
            let y = g.mul(t, s)?;
            let z = g.add(y, t)?;
            project(g, z, seed)
        }),
    ));
    cases
}

/// Runs every op case; `fault` breaks one backward rule on purpose.
pub fn op_suite(seed: u64, fault: Option<OpTag>) -> Result<Vec<CheckResult>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(CheckResult {
                name: name.to_string(),
                max_rel_error: grad_check_with_fault(f, &inputs, EPS, fault)?,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

/// A small complete network with a fixed two-row batch.
pub struct TinyModel {
    pub config: ModelConfig,
    pub table: EmbeddingTable,
    pub batch: Batch,
    pub params: ModelParams,
}

/// `h = 4`, `d = 6`, `Lc = 7`, `Lq = 5`, `B = 2`, no dropout. The second row
/// is padded in both context and question. Parameters are perturbed away from
/// their initial values so that no bias is exactly zero, and redrawn until
/// the point is at least [`KINK_MARGIN`] from any non-differentiable point.
pub fn tiny_model(seed: u64) -> Result<TinyModel> {
    let config = ModelConfig {
        hidden_size: 4,
        embedding_dim: 6,
        dropout_rate: 0.0,
        seed,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = EmbeddingTable::from_entries(
        6,
        (0..10).map(|i| (format!("w{i}"), (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())),
    )?;
    let (lc, lq) = (7, 5);
    let lengths = [(7, 5), (5, 4)];
    let mut batch = Batch {
        size: 2,
        context_len: lc,
        question_len: lq,
        context_ids: vec![0; 2 * lc],
        context_mask: vec![false; 2 * lc],
        question_ids: vec![0; 2 * lq],
        question_mask: vec![false; 2 * lq],
        golds: vec![Some((1, 3)), Some((0, 2))],
        qids: vec!["q0".into(), "q1".into()],
        example_indices: vec![0, 1],
    };
    for (b, &(c, q)) in lengths.iter().enumerate() {
        for i in 0..c {
            batch.context_ids[b * lc + i] = rng.gen_range(2..12);
            batch.context_mask[b * lc + i] = true;
        }
        for i in 0..q {
            batch.question_ids[b * lq + i] = rng.gen_range(2..12);
            batch.question_mask[b * lq + i] = true;
        }
    }
    let initial = init_params(&config)?;
    let params = loop {
        let mut params = initial.clone();
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        forward(&mut g, &batch, &vars, &table, &config, Mode::Inference)?;
        if g.kink_margin() > KINK_MARGIN {
            break params;
        }
    };
    Ok(TinyModel {
        config,
        table,
        batch,
        params,
    })
}

/// Checks the gradient of the full training loss with respect to every
/// parameter of [`tiny_model`].
pub fn model_check(seed: u64, fault: Option<OpTag>) -> Result<CheckResult> {
    let tiny = tiny_model(seed)?;
    let names: Vec<String> = tiny.params.names().cloned().collect();
    let inputs: Vec<Tensor> = tiny.params.iter().map(|(_, t)| t.clone()).collect();
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let bound: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let vars = ParamVars::from_map(bound);
        let out = forward(g, &tiny.batch, &vars, &tiny.table, &tiny.config, Mode::Inference)?;
        Ok(loss(g, &out, &tiny.batch)?.total)
    };
    Ok(CheckResult {
        name: "model".into(),
        max_rel_error: grad_check_with_fault(f, &inputs, MODEL_EPS, fault)?,
        tolerance: MODEL_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_tanh_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[3, 3]);
        let err = grad_check(|g, v| { let t = g.tanh(v); Ok(g.sum(t)) }, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_function_has_no_error() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn every_op_passes() {
        for r in op_suite(11, None).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let results = op_suite(11, Some(OpTag::Tanh)).unwrap();
        let tanh = results.iter().find(|r| r.name == "tanh").unwrap();
        assert!(!tanh.passed());
    }

    #[test]
    fn tiny_model_passes() {
        let r = model_check(5, None).unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }
}
