#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;

use qa_core::data::{Batch, EmbeddingTable};
use qa_core::graph::Graph;
use qa_core::model::{
    bidaf_attention, embed, forward, init_params, loss, lstm_direction, param_count, ModelConfig, ModelParams, Mode,
    SeqMask,
};
use qa_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line LSTM over one row: returns the per-step outputs.
fn lstm_oracle(x: &[Vec<f64>], valid: &[bool], w: &Tensor, b: &Tensor, reverse: bool) -> Vec<Vec<f64>> {
    let h = w.shape()[0] / 4;
    let cols = w.shape()[1];
    let mut hidden = vec![0.0; h];
    let mut cell = vec![0.0; h];
    let mut out = vec![vec![0.0; h]; x.len()];
    let order: Vec<usize> = if reverse { (0..x.len()).rev().collect() } else { (0..x.len()).collect() };
    for t in order {
        if !valid[t] {
            continue;
        }
        let z: Vec<f64> = hidden.iter().chain(&x[t]).copied().collect();
        let gate = |r: usize| -> f64 { b.data()[r] + (0..cols).map(|c| w.data()[r * cols + c] * z[c]).sum::<f64>() };
        for k in 0..h {
            let i = sigmoid(gate(k));
            let f = sigmoid(gate(h + k));
            let g = gate(3 * h + k).tanh();
            cell[k] = f * cell[k] + i * g;
        }
        for k in 0..h {
            let o = sigmoid(gate(2 * h + k));
            out[t][k] = o * cell[k].tanh();
        }
        hidden.copy_from_slice(&out[t]);
    }
    out
}

#[test]
fn lstm_matches_loop_oracle_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (batch, len, input, h) = (2, 4, 3, 2);
    let x = random(&mut rng, &[batch, len, input]);
    let w = random(&mut rng, &[4 * h, h + input]);
    let b = random(&mut rng, &[4 * h]);
    let mask = vec![true, true, true, true, true, true, false, false];
    for reverse in [false, true] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let bv = g.param(b.clone());
        let seq = SeqMask { batch, len, mask: &mask };
        let y = lstm_direction(&mut g, xv, wv, bv, &seq, reverse).unwrap();
        assert_eq!(g.shape(y), &[batch, len, h]);
        for row in 0..batch {
            let xs: Vec<Vec<f64>> = (0..len)
                .map(|t| x.data()[(row * len + t) * input..(row * len + t + 1) * input].to_vec())
                .collect();
            let expected = lstm_oracle(&xs, &mask[row * len..(row + 1) * len], &w, &b, reverse);
            for t in 0..len {
                for k in 0..h {
                    let got = g.value(y).data()[(row * len + t) * h + k];
                    assert!((got - expected[t][k]).abs() < 1e-12, "row {row} t {t} k {k}: {got} vs {}", expected[t][k]);
                }
            }
        }
    }
}

#[test]
fn lstm_single_step_by_hand() {
    // h = 1, input 1, W = [hidden | input] per gate, all gates see z = [0 ; 1]
    let w = Tensor::new(vec![4, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, -1.0, 0.0, 0.5]).unwrap();
    let b = Tensor::vector(vec![0.0, 0.0, 0.0, 0.0]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let wv = g.param(w);
    let bv = g.param(b);
    let y = lstm_direction(&mut g, x, wv, bv, &SeqMask { batch: 1, len: 1, mask: &[true] }, false).unwrap();
    let c = sigmoid(1.0) * 0.5f64.tanh();
    let expected = sigmoid(-1.0) * c.tanh();
    assert!((g.value(y).item() - expected).abs() < 1e-15);
}

/// Element-wise BiDAF over explicit loops.
fn bidaf_oracle(
    c: &Tensor,
    q: &Tensor,
    w: &[f64],
    cmask: &[bool],
    qmask: &[bool],
) -> Vec<f64> {
    let (batch, lc, d) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    let lq = q.shape()[1];
    let cv = |b: usize, i: usize| &c.data()[(b * lc + i) * d..(b * lc + i + 1) * d];
    let qv = |b: usize, j: usize| &q.data()[(b * lq + j) * d..(b * lq + j + 1) * d];
    let mut out = Vec::new();
    for b in 0..batch {
        let s: Vec<Vec<f64>> = (0..lc)
            .map(|i| {
                (0..lq)
                    .map(|j| {
                        (0..d)
                            .map(|k| w[k] * cv(b, i)[k] + w[d + k] * qv(b, j)[k] + w[2 * d + k] * cv(b, i)[k] * qv(b, j)[k])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let valid_j: Vec<usize> = (0..lq).filter(|&j| qmask[b * lq + j]).collect();
        let valid_i: Vec<usize> = (0..lc).filter(|&i| cmask[b * lc + i]).collect();
        let m: Vec<f64> = (0..lc)
            .map(|i| valid_j.iter().map(|&j| s[i][j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mmax = valid_i.iter().map(|&i| m[i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = valid_i.iter().map(|&i| (m[i] - mmax).exp()).sum();
        let mut h_tilde = vec![0.0; d];
        for &i in &valid_i {
            let p = (m[i] - mmax).exp() / z;
            for k in 0..d {
                h_tilde[k] += p * cv(b, i)[k];
            }
        }
        for i in 0..lc {
            let smax = valid_j.iter().map(|&j| s[i][j]).fold(f64::NEG_INFINITY, f64::max);
            let zj: f64 = valid_j.iter().map(|&j| (s[i][j] - smax).exp()).sum();
            let mut u = vec![0.0; d];
            for &j in &valid_j {
                let a = (s[i][j] - smax).exp() / zj;
                for k in 0..d {
                    u[k] += a * qv(b, j)[k];
                }
            }
            let ci = cv(b, i);
            out.extend_from_slice(ci);
            out.extend_from_slice(&u);
            out.extend((0..d).map(|k| ci[k] * u[k]));
            out.extend((0..d).map(|k| ci[k] * h_tilde[k]));
        }
    }
    out
}

fn run_bidaf(c: &Tensor, q: &Tensor, w: &Tensor, cmask: &[bool], qmask: &[bool]) -> Tensor {
    let mut g = Graph::new();
    let cv = g.constant(c.clone());
    let qv = g.constant(q.clone());
    let wv = g.param(w.clone());
    let y = bidaf_attention(&mut g, cv, qv, wv, cmask, qmask).unwrap();
    g.value(y).clone()
}

#[test]
fn bidaf_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, lc, lq, d) = (2, 4, 3, 4);
    let c = random(&mut rng, &[batch, lc, d]);
    let q = random(&mut rng, &[batch, lq, d]);
    let w = random(&mut rng, &[3 * d]);
    let cmask = [true, true, true, true, true, true, true, false];
    let qmask = [true, true, true, true, false, false];
    let got = run_bidaf(&c, &q, &w, &cmask, &qmask);
    assert_eq!(got.shape(), &[batch, lc, 4 * d]);
    let expected = bidaf_oracle(&c, &q, w.data(), &cmask, &qmask);
    for (a, e) in got.data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn bidaf_two_by_two_by_hand() {
    // h = 1: encodings have width 2; only the c·q product term is weighted.
    let c = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let q = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let w = Tensor::vector(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    let got = run_bidaf(&c, &q, &w, &[true; 2], &[true; 2]);
    // S = [[1, 0], [0, 2]]
    let e = std::f64::consts::E;
    let (a0, a1) = (e / (e + 1.0), 1.0 / (1.0 + e * e));
    let u0 = [a0, 2.0 * (1.0 - a0)];
    let u1 = [a1, 2.0 * (1.0 - a1)];
    // row maxima 1 and 2 → b = softmax([1, 2])
    let b0 = 1.0 / (1.0 + e);
    let h = [b0, 1.0 - b0];
    let expected = [
        1.0, 0.0, u0[0], u0[1], u0[0], 0.0, h[0], 0.0, //
        0.0, 1.0, u1[0], u1[1], 0.0, u1[1], 0.0, h[1],
    ];
    for (a, x) in got.data().iter().zip(expected) {
        assert!((a - x).abs() < 1e-15, "{a} vs {x}");
    }
}

#[test]
fn zero_similarity_weights_attend_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (lc, lq, d) = (3, 4, 2);
    let c = random(&mut rng, &[1, lc, d]);
    let q = random(&mut rng, &[1, lq, d]);
    let qmask = [true, true, true, false];
    let got = run_bidaf(&c, &q, &Tensor::zeros(&[3 * d]), &[true; 3], &qmask);
    for i in 0..lc {
        for k in 0..d {
            let mean = (0..3).map(|j| q.data()[j * d + k]).sum::<f64>() / 3.0;
            let u = got.data()[i * 4 * d + d + k];
            assert!((u - mean).abs() < 1e-15);
        }
    }
}

fn tiny_config(h: usize, d: usize) -> ModelConfig {
    ModelConfig {
        hidden_size: h,
        embedding_dim: d,
        dropout_rate: 0.0,
        seed: 4,
        ..ModelConfig::default()
    }
}

fn random_table(vocab: usize, d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingTable::from_entries(
        d,
        (0..vocab).map(|i| (format!("w{i}"), (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())),
    )
    .unwrap()
}

/// Rows with the given (context, question) lengths and gold spans.
fn random_batch(lengths: &[(usize, usize)], golds: &[(usize, usize)], vocab: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lc = lengths.iter().map(|l| l.0).max().unwrap();
    let lq = lengths.iter().map(|l| l.1).max().unwrap();
    let n = lengths.len();
    let mut batch = Batch {
        size: n,
        context_len: lc,
        question_len: lq,
        context_ids: vec![0; n * lc],
        context_mask: vec![false; n * lc],
        question_ids: vec![0; n * lq],
        question_mask: vec![false; n * lq],
        golds: golds.iter().map(|&g| Some(g)).collect(),
        qids: (0..n).map(|i| format!("q{i}")).collect(),
        example_indices: (0..n).collect(),
    };
    for (b, &(c, q)) in lengths.iter().enumerate() {
        for i in 0..c {
            batch.context_ids[b * lc + i] = rng.gen_range(2..vocab + 2);
            batch.context_mask[b * lc + i] = true;
        }
        for i in 0..q {
            batch.question_ids[b * lq + i] = rng.gen_range(2..vocab + 2);
            batch.question_mask[b * lq + i] = true;
        }
    }
    batch
}

fn zeroed(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    for (_, t) in p.iter_mut() {
        t.data_mut().fill(0.0);
    }
    p
}

#[test]
fn forward_shapes() {
    let config = tiny_config(3, 5);
    let table = random_table(10, 5, 1);
    let batch = random_batch(&[(6, 4), (4, 2)], &[(0, 1), (2, 3)], 10, 2);
    let params = init_params(&config).unwrap();
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward(&mut g, &batch, &vars, &table, &config, Mode::Inference).unwrap();
    assert_eq!(g.shape(out.attention), &[2, 6, 24]);
    assert_eq!(g.shape(out.m_start), &[2, 6, 6]);
    assert_eq!(g.shape(out.m_end), &[2, 6, 6]);
    assert_eq!(g.shape(out.p_start), &[2, 6]);
    assert_eq!(g.shape(out.p_end), &[2, 6]);
    for p in [out.p_start, out.p_end] {
        let v = g.value(p).data();
        assert!((v[..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v[6..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(&v[10..], &[0.0, 0.0]);
    }
}

#[test]
fn zero_weights_and_inputs_give_zero_encodings_and_uniform_output() {
    let config = tiny_config(3, 4);
    let table = EmbeddingTable::from_entries(4, (0..6).map(|i| (format!("w{i}"), vec![0.0; 4]))).unwrap();
    let batch = random_batch(&[(5, 3), (3, 2)], &[(0, 0), (1, 2)], 6, 3);
    let params = zeroed(&init_params(&config).unwrap());
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward(&mut g, &batch, &vars, &table, &config, Mode::Inference).unwrap();
    assert!(g.value(out.attention).data().iter().all(|&v| v == 0.0));
    assert!(g.value(out.m_start).data().iter().all(|&v| v == 0.0));
    let p = g.value(out.p_start).data();
    assert!(p[..5].iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert!(p[5..8].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn uniform_prediction_loss_is_twice_log_length() {
    let config = tiny_config(2, 3);
    let table = random_table(20, 3, 5);
    let batch = random_batch(&[(200, 5)], &[(10, 12)], 20, 6);
    let params = zeroed(&init_params(&config).unwrap());
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward(&mut g, &batch, &vars, &table, &config, Mode::Inference).unwrap();
    let l = loss(&mut g, &out, &batch).unwrap();
    let value = g.value(l.total).item();
    assert!((value - 2.0 * 200f64.ln()).abs() < 1e-9);
    assert!((value - 10.597).abs() < 1e-3);
}

fn named_grads(config: &ModelConfig, which: &str) -> BTreeMap<String, Tensor> {
    let table = random_table(10, config.embedding_dim, 7);
    let batch = random_batch(&[(7, 4), (5, 3)], &[(1, 3), (0, 2)], 10, 8);
    let params = init_params(config).unwrap();
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward(&mut g, &batch, &vars, &table, config, Mode::Inference).unwrap();
    let l = loss(&mut g, &out, &batch).unwrap();
    let root = match which {
        "start" => l.start,
        "end" => l.end,
        _ => l.total,
    };
    let grads = g.backward(root).unwrap();
    vars.iter().map(|(n, v)| (n.clone(), grads.get(*v))).collect()
}

#[test]
fn end_loss_reaches_the_start_decoder() {
    let grads = named_grads(&tiny_config(3, 4), "end");
    for name in ["start_decoder.fwd.w", "start_decoder.bwd.w", "start_decoder.fwd.b"] {
        assert!(grads[name].l2_norm_sq() > 0.0, "{name}");
    }
    // the start head does not feed the end distribution
    assert_eq!(grads["start_head.fc1.w"].l2_norm_sq(), 0.0);
}

#[test]
fn start_loss_never_reaches_the_end_decoder() {
    let grads = named_grads(&tiny_config(3, 4), "start");
    for (name, g) in &grads {
        if name.starts_with("end_decoder") || name.starts_with("end_head") {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(grads["start_head.fc1.w"].l2_norm_sq() > 0.0);
}

#[test]
fn heads_are_separate_tensors() {
    let params = init_params(&tiny_config(3, 4)).unwrap();
    for part in ["fc1.w", "fc2.w"] {
        let s = params.get(&format!("start_head.{part}")).unwrap();
        let e = params.get(&format!("end_head.{part}")).unwrap();
        assert_eq!(s.shape(), e.shape());
        assert_ne!(s.data(), e.data());
    }
}

#[test]
fn embeddings_are_constants() {
    let table = random_table(4, 3, 0);
    let mut g = Graph::new();
    let e = embed(&mut g, &[2, 3, 0, 1], 2, 2, &table).unwrap();
    assert!(!g.requires_grad(e));
    assert_eq!(&g.value(e).data()[..3], table.row(2).unwrap());
    assert!(embed(&mut g, &[99], 1, 1, &table).is_err());
}

#[test]
fn permuting_rows_permutes_outputs() {
    let config = tiny_config(3, 4);
    let table = random_table(10, 4, 1);
    let params = init_params(&config).unwrap();
    let lengths = [(6, 3), (4, 4), (6, 2)];
    let golds = [(0, 1), (1, 2), (3, 5)];
    let batch = random_batch(&lengths, &golds, 10, 9);

    let perm = [2usize, 0, 1];
    let mut permuted = batch.clone();
    let (lc, lq) = (batch.context_len, batch.question_len);
    for (dst, &src) in perm.iter().enumerate() {
        permuted.context_ids[dst * lc..(dst + 1) * lc].copy_from_slice(&batch.context_ids[src * lc..(src + 1) * lc]);
        permuted.context_mask[dst * lc..(dst + 1) * lc].copy_from_slice(&batch.context_mask[src * lc..(src + 1) * lc]);
        permuted.question_ids[dst * lq..(dst + 1) * lq].copy_from_slice(&batch.question_ids[src * lq..(src + 1) * lq]);
        permuted.question_mask[dst * lq..(dst + 1) * lq]
            .copy_from_slice(&batch.question_mask[src * lq..(src + 1) * lq]);
        permuted.golds[dst] = batch.golds[src];
    }
    let (ps, pe) = qa_core::model::predict_distributions(&params, &batch, &table, &config).unwrap();
    let (qs, qe) = qa_core::model::predict_distributions(&params, &permuted, &table, &config).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for i in 0..lc {
            assert!((qs.data()[dst * lc + i] - ps.data()[src * lc + i]).abs() < 1e-12);
            assert!((qe.data()[dst * lc + i] - pe.data()[src * lc + i]).abs() < 1e-12);
        }
    }
}

/// Closed-form count for the default layout.
fn expected_param_count(h: usize, d: usize) -> usize {
    let lstm = |input: usize| 2 * (4 * h * (h + input) + 4 * h);
    let head = h * 10 * h + h + h + 1;
    lstm(d) + lstm(2 * h) + 6 * h + lstm(8 * h) + lstm(10 * h) + 2 * head
}

#[test]
fn parameter_count_matches_formula() {
    let params = init_params(&ModelConfig::default()).unwrap();
    assert_eq!(param_count(&params), expected_param_count(150, 100));
    assert_eq!(param_count(&params), 4_896_302);
    let small = init_params(&tiny_config(4, 6)).unwrap();
    assert_eq!(param_count(&small), expected_param_count(4, 6));
}

#[test]
fn dropout_changes_training_forward_only() {
    let config = ModelConfig {
        dropout_rate: 0.3,
        ..tiny_config(3, 4)
    };
    let table = random_table(10, 4, 1);
    let batch = random_batch(&[(6, 3)], &[(0, 1)], 10, 4);
    let params = init_params(&config).unwrap();
    let run = |mode| {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let out = forward(&mut g, &batch, &vars, &table, &config, mode).unwrap();
        g.value(out.p_start).clone()
    };
    assert_eq!(run(Mode::Inference), run(Mode::Inference));
    assert_eq!(run(Mode::Training { seed: 1 }), run(Mode::Training { seed: 1 }));
    assert_ne!(run(Mode::Training { seed: 1 }), run(Mode::Inference));
    assert_ne!(run(Mode::Training { seed: 1 }), run(Mode::Training { seed: 2 }));
}
