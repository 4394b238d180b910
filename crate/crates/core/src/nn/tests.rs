use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::{sigmoid, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = r.random_range(-0.5..0.5);
        }
    }
}

fn seq_batch(lengths: &[usize], dim: usize, seed: u64) -> SequenceBatch {
    let mut r = rng(seed);
    let items: Vec<Tensor> = lengths.iter().map(|&l| rand_tensor(&[l, dim], &mut r)).collect();
    SequenceBatch::from_items(&items.iter().collect::<Vec<_>>()).unwrap()
}

// ---------------------------------------------------------------- linear

#[test]
fn linear_identity_and_zero_input() {
    let mut store = ParamStore::new(0);
    let lin = Linear::new(&mut store, "l", 3, 3);
    let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    *store.get_mut(lin.weight) = eye;
    let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5]).unwrap();
    let g = Graph::new();
    let y = lin.forward(&g, &store, g.input(x.clone())).unwrap();
    assert_eq!(g.value(y), x);

    *store.get_mut(lin.bias) = Tensor::vector(vec![0.1, 0.2, 0.3]);
    let g = Graph::new();
    let y = lin.forward(&g, &store, g.input(Tensor::zeros(&[2, 3]))).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
}

#[test]
fn linear_matches_triple_loop_and_gradcheck() {
    let mut r = rng(1);
    let x = rand_tensor(&[3, 4], &mut r);
    let w = rand_tensor(&[4, 5], &mut r);
    let b = rand_tensor(&[5], &mut r);
    let g = Graph::new();
    let y = g.add_bias(g.matmul(g.input(x.clone()), g.input(w.clone())).unwrap(), g.input(b.clone())).unwrap();
    let y = g.value(y);
    for i in 0..3 {
        for j in 0..5 {
            let mut acc = b.data()[j];
            for k in 0..4 {
                acc += x.data()[i * 4 + k] * w.data()[k * 5 + j];
            }
            assert!((y.data()[i * 5 + j] - acc).abs() < 1e-12);
        }
    }
    let report = grad_check(
        &[x, w, b],
        |g, v| {
            let y = g.add_bias(g.matmul(v[0], v[1])?, v[2])?;
            random_projection(g, y, 9)
        },
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn matmul_transposed_gradcheck() {
    let mut r = rng(2);
    let a = rand_tensor(&[3, 4], &mut r);
    let b = rand_tensor(&[5, 4], &mut r);
    let report = grad_check(
        &[a, b],
        |g, v| random_projection(g, g.matmul_t(v[0], v[1])?, 3),
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

// ------------------------------------------------------------- embedding

#[test]
fn embedding_gathers_rows_and_accumulates_repeats() {
    let mut store = ParamStore::new(3);
    let emb = Embedding::new(&mut store, "e", 4, 3);
    let g = Graph::new();
    let y = emb.forward(&g, &store, &[2, 0, 2]).unwrap();
    let table = store.get(emb.table).clone();
    let yv = g.value(y);
    assert_eq!(yv.row(0), table.row(2));
    assert_eq!(yv.row(1), table.row(0));

    let report = grad_check_params(
        &store,
        |g, s| {
            let y = emb.forward(g, s, &[2, 0, 2])?;
            random_projection(g, y, 4)
        },
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");

    // The repeated row's gradient is the sum of both uses.
    let g = Graph::new();
    let y = emb.forward(&g, &store, &[2, 2]).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(emb.table).unwrap().row(2).iter().all(|&v| v == 2.0));
    assert!(grads.param(emb.table).unwrap().row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_with_single_row_gives_identical_outputs() {
    let mut store = ParamStore::new(3);
    let emb = Embedding::new(&mut store, "e", 1, 5);
    let g = Graph::new();
    let y = g.value(emb.forward(&g, &store, &[0, 0, 0]).unwrap());
    assert_eq!(y.row(0), y.row(2));
}

#[test]
fn embedding_out_of_range_is_an_error() {
    let mut store = ParamStore::new(3);
    let emb = Embedding::new(&mut store, "e", 4, 3);
    let g = Graph::new();
    assert!(matches!(
        emb.forward(&g, &store, &[4]),
        Err(Error::IndexOutOfRange { index: 4, size: 4 })
    ));
}

// ---------------------------------------------------------------- conv1d

#[test]
fn conv1d_length_arithmetic() {
    let mut store = ParamStore::new(0);
    let conv = Conv1d::new(&mut store, "c", 39, 64, 6, 2);
    assert_eq!(conv.output_len(6), Some(1));
    assert_eq!(conv.output_len(100), Some(48));
    assert_eq!(conv.output_len(5), None);

    let batch = seq_batch(&[6, 100], 39, 1);
    let g = Graph::new();
    let out = conv.forward(&g, &store, &SeqVar::input(&g, &batch)).unwrap();
    assert_eq!(out.lengths, vec![1, 48]);
    assert_eq!(g.shape(out.data), vec![48 * 2, 64]);

    let short = seq_batch(&[5], 39, 1);
    let g = Graph::new();
    assert!(conv.forward(&g, &store, &SeqVar::input(&g, &short)).is_err());
}

#[test]
fn conv1d_matches_sliding_window_oracle() {
    let mut store = ParamStore::new(4);
    let (d, c, k, s) = (3, 4, 6, 2);
    let conv = Conv1d::new(&mut store, "c", d, c, k, s);
    randomize(&mut store, 5);
    let batch = seq_batch(&[11, 8], d, 2);
    let g = Graph::new();
    let out = conv.forward(&g, &store, &SeqVar::input(&g, &batch)).unwrap();
    let y = g.value(out.data);
    let w = store.get(conv.weight);
    let bias = store.get(conv.bias);
    for (b, &len) in batch.lengths.iter().enumerate() {
        let x = batch.item(b);
        for t in 0..out.lengths[b] {
            for o in 0..c {
                let mut acc = bias.data()[o];
                for j in 0..k {
                    for i in 0..d {
                        acc += x.data()[(t * s + j) * d + i] * w.data()[(j * d + i) * c + o];
                    }
                }
                assert!((y.row(t * 2 + b)[o] - acc).abs() < 1e-12);
            }
        }
        for t in out.lengths[b]..out.steps {
            assert!(y.row(t * 2 + b).iter().all(|&v| v == 0.0), "padding output must be zero (len {len})");
        }
    }
}

// ------------------------------------------------------------------- gru

#[test]
fn gru_with_zero_weights_stays_at_zero() {
    let mut store = ParamStore::new(0);
    let layer = GruLayer::new(&mut store, "g", 3, 4, Direction::Bidirectional);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let batch = seq_batch(&[5, 3], 3, 7);
    let g = Graph::new();
    let out = layer.forward(&g, &store, &SeqVar::input(&g, &batch)).unwrap();
    assert!(g.value(out.data).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_single_step_matches_hand_formula() {
    let mut store = ParamStore::new(0);
    let cell = GruCell::new(&mut store, "g", 1, 1);
    // gates [r, z, n]
    *store.get_mut(cell.w_input) = Tensor::matrix(1, 3, vec![0.3, -0.7, 1.1]).unwrap();
    *store.get_mut(cell.b_input) = Tensor::vector(vec![0.05, 0.1, -0.2]);
    *store.get_mut(cell.w_hidden) = Tensor::matrix(1, 3, vec![0.4, 0.2, -0.9]).unwrap();
    *store.get_mut(cell.b_hidden) = Tensor::vector(vec![-0.1, 0.3, 0.25]);
    let (x, h0) = (0.8, -0.6);
    let r = sigmoid(0.3 * x + 0.05 + 0.4 * h0 - 0.1);
    let z = sigmoid(-0.7 * x + 0.1 + 0.2 * h0 + 0.3);
    let n = (1.1 * x - 0.2 + r * (-0.9 * h0 + 0.25)).tanh();
    let expect = (1.0 - z) * n + z * h0;

    let g = Graph::new();
    let xp = cell.project(&g, &store, g.input(Tensor::matrix(1, 1, vec![x]).unwrap())).unwrap();
    let h = cell.step(&g, &store, xp, g.input(Tensor::matrix(1, 1, vec![h0]).unwrap()), Rc::new(vec![true])).unwrap();
    assert!((g.value(h).item() - expect).abs() < 1e-14);
}

#[test]
fn reversed_forward_equals_backward_layer() {
    let mut store = ParamStore::new(11);
    let cell = GruCell::new(&mut store, "g", 3, 4);
    let batch = seq_batch(&[6], 3, 3);
    let item = batch.item(0);
    let mut reversed = Vec::new();
    for t in (0..6).rev() {
        reversed.extend_from_slice(item.row(t));
    }
    let rev_batch = SequenceBatch::from_items(&[&Tensor::matrix(6, 3, reversed).unwrap()]).unwrap();
    let g = Graph::new();
    let bwd = g.value(cell.run(&g, &store, &SeqVar::input(&g, &batch), true).unwrap().data);
    let fwd = g.value(cell.run(&g, &store, &SeqVar::input(&g, &rev_batch), false).unwrap().data);
    for t in 0..6 {
        for (a, b) in bwd.row(t).iter().zip(fwd.row(5 - t)) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn gru_cell_gradcheck() {
    let mut r = rng(5);
    let (b, h) = (3, 4);
    let xp = rand_tensor(&[b, 3 * h], &mut r);
    let h0 = rand_tensor(&[b, h], &mut r);
    let wh = rand_tensor(&[h, 3 * h], &mut r);
    let bh = rand_tensor(&[3 * h], &mut r);
    let mask = Rc::new(vec![true, false, true]);
    let report = grad_check(
        &[xp, h0, wh, bh],
        |g, v| random_projection(g, g.gru_cell(v[0], v[1], v[2], v[3], mask.clone())?, 1),
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn bigru_stack_gradcheck_over_parameters() {
    let mut store = ParamStore::new(8);
    let net = BiGru::new(&mut store, "rnn", 3, 4, 2);
    let batch = seq_batch(&[5, 3], 3, 4);
    let report = grad_check_params(
        &store,
        |g, s| {
            let out = net.forward(g, s, &SeqVar::input(g, &batch))?;
            random_projection(g, out.data, 2)
        },
        1e-5,
        Some(60),
        1,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn padding_never_influences_outputs_or_gradients() {
    let mut store = ParamStore::new(21);
    let conv = Conv1d::new(&mut store, "c", 3, 4, 2, 1);
    let rnn = BiGru::new(&mut store, "rnn", 4, 3, 2);
    let attn = VectorialAttention::new(&mut store, "att", 6);
    let run = |batch: &SequenceBatch| {
        let g = Graph::new();
        let x = SeqVar::input(&g, batch);
        let h = conv.forward(&g, &store, &x).unwrap();
        let h = rnn.forward(&g, &store, &h).unwrap();
        let pooled = attn.forward(&g, &store, &h).unwrap();
        let loss = random_projection(&g, pooled, 5).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut gvals: Vec<f64> = Vec::new();
        for id in store.ids() {
            gvals.extend_from_slice(grads.param(id).unwrap().data());
        }
        (g.value(pooled), gvals, grads.wrt(x.data).unwrap().clone())
    };
    let batch = seq_batch(&[7, 4], 3, 9);
    let mut noisy = batch.clone();
    let mut r = rng(99);
    for t in 4..7 {
        for v in &mut noisy.data.data_mut()[(t * 2 + 1) * 3..(t * 2 + 2) * 3] {
            *v = r.random_range(-50.0..50.0);
        }
    }
    let (y1, g1, dx1) = run(&batch);
    let (y2, g2, dx2) = run(&noisy);
    assert_eq!(y1, y2);
    assert_eq!(g1, g2);
    assert_eq!(dx1, dx2);
    for t in 4..7 {
        assert!(dx1.row(t * 2 + 1).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn conv_and_gru_are_batch_invariant() {
    let mut store = ParamStore::new(31);
    let conv = Conv1d::new(&mut store, "c", 3, 4, 3, 2);
    let rnn = BiGru::new(&mut store, "rnn", 4, 5, 2);
    let batch = seq_batch(&[9, 12, 7, 10], 3, 12);
    let run = |b: &SequenceBatch| {
        let g = Graph::new();
        let h = conv.forward(&g, &store, &SeqVar::input(&g, b)).unwrap();
        let h = rnn.forward(&g, &store, &h).unwrap();
        let lengths = h.lengths.clone();
        SequenceBatch { data: g.value(h.data), lengths }
    };
    let full = run(&batch);
    for i in 0..4 {
        let single = run(&SequenceBatch::from_items(&[&batch.item(i)]).unwrap());
        assert!(single.item(0).max_abs_diff(&full.item(i)) < 1e-12);
    }
}

// ------------------------------------------------------------- attention

#[test]
fn vectorial_attention_with_flat_scores_is_a_masked_mean() {
    let mut store = ParamStore::new(0);
    let attn = VectorialAttention::new(&mut store, "a", 2);
    store.get_mut(attn.proj.weight).data_mut().fill(0.0);
    let batch = seq_batch(&[3, 1], 2, 4);
    let g = Graph::new();
    let out = g.value(attn.forward(&g, &store, &SeqVar::input(&g, &batch)).unwrap());
    let item = batch.item(0);
    for j in 0..2 {
        let mean = (0..3).map(|t| item.row(t)[j]).sum::<f64>() / 3.0;
        assert!((out.row(0)[j] - mean).abs() < 1e-14);
    }
    // a single valid step passes straight through
    assert!((out.row(1)[0] - batch.item(1).row(0)[0]).abs() < 1e-15);
}

#[test]
fn vectorial_attention_weights_sum_to_one_and_gradcheck() {
    let mut store = ParamStore::new(17);
    let attn = VectorialAttention::new(&mut store, "a", 4);
    randomize(&mut store, 3);
    let batch = seq_batch(&[6, 2, 4], 4, 8);
    let g = Graph::new();
    let x = SeqVar::input(&g, &batch);
    let w = g.value(attn.weights(&g, &store, &x).unwrap());
    for b in 0..3 {
        let total: f64 = (0..6).map(|t| w.data()[t * 3 + b]).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for t in batch.lengths[b]..6 {
            assert_eq!(w.data()[t * 3 + b], 0.0);
        }
    }
    let report = grad_check_params(
        &store,
        |g, s| random_projection(g, attn.forward(g, s, &SeqVar::input(g, &batch))?, 6),
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn bahdanau_single_step_and_duplicate_memory() {
    let mut store = ParamStore::new(5);
    let attn = BahdanauAttention::new(&mut store, "b", 3, 2, 4);
    randomize(&mut store, 6);
    let g = Graph::new();
    let one = seq_batch(&[1], 2, 1);
    let mem = attn.memory(&g, &store, &SeqVar::input(&g, &one)).unwrap();
    let q = g.input(Tensor::matrix(1, 3, vec![0.2, -0.1, 0.7]).unwrap());
    let (ctx, w) = attn.attend(&g, &store, q, &mem).unwrap();
    assert_eq!(g.value(w).data(), &[1.0]);
    assert_eq!(g.value(ctx).data(), one.data.data());

    let v = Tensor::matrix(1, 2, vec![0.4, -0.3]).unwrap();
    let dup = SequenceBatch::from_items(&[&Tensor::matrix(3, 2, [v.data(), v.data(), v.data()].concat()).unwrap()]).unwrap();
    let mem = attn.memory(&g, &store, &SeqVar::input(&g, &dup)).unwrap();
    let (ctx, _) = attn.attend(&g, &store, q, &mem).unwrap();
    assert!(g.value(ctx).max_abs_diff(&v) < 1e-15);
}

#[test]
fn bahdanau_weights_match_softmax_oracle() {
    let mut store = ParamStore::new(5);
    let attn = BahdanauAttention::new(&mut store, "b", 3, 2, 4);
    randomize(&mut store, 7);
    let mem_batch = seq_batch(&[5], 2, 2);
    let query = Tensor::matrix(1, 3, vec![0.5, 0.1, -0.4]).unwrap();
    let g = Graph::new();
    let mem = attn.memory(&g, &store, &SeqVar::input(&g, &mem_batch)).unwrap();
    let (_, w) = attn.attend(&g, &store, g.input(query.clone()), &mem).unwrap();
    let w = g.value(w);

    let wq = store.get(attn.w_query);
    let wk = store.get(attn.w_key.weight);
    let bk = store.get(attn.w_key.bias);
    let vv = store.get(attn.v);
    let item = mem_batch.item(0);
    let scores: Vec<f64> = (0..5)
        .map(|t| {
            (0..4)
                .map(|a| {
                    let qa: f64 = (0..3).map(|i| query.data()[i] * wq.data()[i * 4 + a]).sum();
                    let ka: f64 = (0..2).map(|i| item.row(t)[i] * wk.data()[i * 4 + a]).sum::<f64>() + bk.data()[a];
                    vv.data()[a] * (qa + ka).tanh()
                })
                .sum()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    for t in 0..5 {
        assert!((w.data()[t] - scores[t].exp() / z).abs() < 1e-12);
    }
    let report = grad_check_params(
        &store,
        |g, s| {
            let mem = attn.memory(g, s, &SeqVar::input(g, &mem_batch))?;
            let (ctx, _) = attn.attend(g, s, g.input(query.clone()), &mem)?;
            random_projection(g, ctx, 1)
        },
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

// ------------------------------------------------------------ l2 / loss

#[test]
fn l2_normalize_cases() {
    let g = Graph::new();
    let x = g.input(Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 1.0]).unwrap());
    let y = g.value(g.l2_normalize(x).unwrap());
    assert_eq!(y.data(), &[0.6, 0.8, 0.0, 1.0]);
    let z = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    assert!(matches!(g.l2_normalize(z), Err(Error::Degenerate(_))));

    let mut r = rng(3);
    let report = grad_check(
        &[rand_tensor(&[3, 5], &mut r)],
        |g, v| random_projection(g, g.l2_normalize(v[0])?, 2),
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn cross_entropy_uniform_limit_and_gradient() {
    let g = Graph::new();
    let logits = g.input(Tensor::zeros(&[2, 7]));
    let loss = g.cross_entropy(logits, Rc::new(vec![Some(3), Some(0)]), Reduction::Mean).unwrap();
    assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);

    let mut prev = f64::INFINITY;
    for margin in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let g = Graph::new();
        let l = g.input(Tensor::matrix(1, 3, vec![margin, 0.0, 0.0]).unwrap());
        let v = g.value(g.cross_entropy(l, Rc::new(vec![Some(0)]), Reduction::Sum).unwrap()).item();
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-6);

    let mut r = rng(4);
    let lt = rand_tensor(&[3, 5], &mut r);
    let g = Graph::new();
    let l = g.input(lt.clone());
    let loss = g.cross_entropy(l, Rc::new(vec![Some(1), Some(4), Some(0)]), Reduction::Sum).unwrap();
    let grad = g.backward(loss).unwrap().wrt(l).unwrap().clone();
    for (row, t) in [(0usize, 1usize), (1, 4), (2, 0)] {
        let x = lt.row(row);
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for j in 0..5 {
            let expect = x[j].exp() / z - if j == t { 1.0 } else { 0.0 };
            assert!((grad.row(row)[j] - expect).abs() < 1e-12);
        }
    }
    let report = grad_check(
        &[lt],
        |g, v| g.cross_entropy(v[0], Rc::new(vec![Some(1), None, Some(0)]), Reduction::Mean),
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn cross_entropy_rejects_invalid_target() {
    let g = Graph::new();
    let l = g.input(Tensor::zeros(&[1, 3]));
    assert!(g.cross_entropy(l, Rc::new(vec![Some(3)]), Reduction::Mean).is_err());
}

#[test]
fn structural_ops_gradcheck() {
    let mut r = rng(8);
    let a = rand_tensor(&[4, 3], &mut r);
    let b = rand_tensor(&[4, 2], &mut r);
    let c = rand_tensor(&[2, 3], &mut r);
    let report = grad_check(
        &[a, b, c],
        |g, v| {
            let cat = g.concat_cols(&[v[0], v[1]])?;
            let s = g.slice_cols(cat, 1, 3)?;
            let rows = g.concat_rows(&[s, v[2]])?;
            let mid = g.slice_rows(rows, 1, 4)?;
            let t = g.sigmoid(g.tanh(mid));
            let m = g.mul(t, g.scale_shift(mid, 2.0, 0.5))?;
            let d = g.sub(m, mid)?;
            let masked = g.mask_rows(d, Rc::new(vec![true, false, true, true]))?;
            random_projection(g, masked, 3)
        },
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn triplet_hinge_gradcheck_away_from_kinks() {
    let mut r = rng(9);
    let d = rand_tensor(&[4, 4], &mut r);
    let report = grad_check(&[d], |g, v| g.triplet_hinge(v[0], 0.2), 1e-6, None, 0).unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}
