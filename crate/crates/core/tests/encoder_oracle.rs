//! Oracle tests for the BiLSTM, self-attention, and the mixed encoder:
//! hand-rolled recurrences and brute-force weighted sums, written without
//! reusing any library forward code.

use dst_core::data::{Ontology, Turn};
use dst_core::encoder::{glsa_encode, mask_len, Ablation};
use dst_core::model::{Model, ModelConfig};
use dst_core::params::ParamStore;
use dst_core::tape::Tape;
use dst_core::tensor::Tensor;
use dst_core::vocab::Vocabulary;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line LSTM scan oracle over rows of x, one direction.
/// Weights stack gates as [i, f, g, o]; returns hidden states per step.
fn lstm_scan_oracle(
    x: &[Vec<f64>],
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
    hidden: usize,
) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = Vec::new();
    for xt in x {
        let mut z = b.data().to_vec();
        for r in 0..4 * hidden {
            for (j, v) in xt.iter().enumerate() {
                z[r] += wx.row(r)[j] * v;
            }
            for j in 0..hidden {
                z[r] += wh.row(r)[j] * h[j];
            }
        }
        let mut h_new = vec![0.0; hidden];
        for j in 0..hidden {
            let i_g = sig(z[j]);
            let f_g = sig(z[hidden + j]);
            let g_g = z[2 * hidden + j].tanh();
            let o_g = sig(z[3 * hidden + j]);
            c[j] = f_g * c[j] + i_g * g_g;
            h_new[j] = o_g * c[j].tanh();
        }
        h = h_new;
        out.push(h.clone());
    }
    out
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .unwrap()
}

struct BiLstmFixture {
    store: ParamStore,
    ids: [usize; 6],
    hidden: usize,
    d_in: usize,
}

fn bilstm_fixture(seed: u64, hidden: usize, d_in: usize, zero: bool) -> BiLstmFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut mk = |rows: usize, cols: usize| {
        if zero {
            Tensor::zeros(vec![rows, cols])
        } else {
            rand_matrix(&mut rng, rows, cols)
        }
    };
    let wx_f = mk(4 * hidden, d_in);
    let wh_f = mk(4 * hidden, hidden);
    let wx_b = mk(4 * hidden, d_in);
    let wh_b = mk(4 * hidden, hidden);
    let bias = |rng: &mut ChaCha8Rng| {
        if zero {
            Tensor::vector(vec![0.0; 4 * hidden])
        } else {
            Tensor::vector((0..4 * hidden).map(|_| rng.gen_range(-0.5..0.5)).collect())
        }
    };
    let b_f = bias(&mut rng);
    let b_b = bias(&mut rng);
    let ids = [
        store.add("wx_f", wx_f, true),
        store.add("wh_f", wh_f, true),
        store.add("b_f", b_f, true),
        store.add("wx_b", wx_b, true),
        store.add("wh_b", wh_b, true),
        store.add("b_b", b_b, true),
    ];
    BiLstmFixture { store, ids, hidden, d_in }
}

fn run_bilstm(fix: &BiLstmFixture, x: &Tensor, len: usize) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let p: Vec<usize> = fix.ids.iter().map(|&id| tape.param(&fix.store, id)).collect();
    let out = tape.bilstm(xv, p[0], p[1], p[2], p[3], p[4], p[5], len).unwrap();
    tape.value(out).clone()
}

#[test]
fn zero_parameter_bilstm_outputs_zeros() {
    let fix = bilstm_fixture(0, 3, 2, true);
    let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.2]).unwrap();
    let out = run_bilstm(&fix, &x, 3);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_step_matches_hand_oracle() {
    let fix = bilstm_fixture(11, 3, 2, false);
    let x = Tensor::matrix(1, 2, vec![0.7, -1.4]).unwrap();
    let out = run_bilstm(&fix, &x, 1);

    let xt = vec![vec![0.7, -1.4]];
    let fwd = lstm_scan_oracle(&xt, fix.store.get(fix.ids[0]), fix.store.get(fix.ids[1]),
        fix.store.get(fix.ids[2]), fix.hidden);
    let bwd = lstm_scan_oracle(&xt, fix.store.get(fix.ids[3]), fix.store.get(fix.ids[4]),
        fix.store.get(fix.ids[5]), fix.hidden);
    for j in 0..fix.hidden {
        assert!((out.row(0)[j] - fwd[0][j]).abs() < 1e-12);
        assert!((out.row(0)[fix.hidden + j] - bwd[0][j]).abs() < 1e-12);
    }
}

#[test]
fn three_step_matches_recurrence_oracle() {
    let fix = bilstm_fixture(23, 4, 3, false);
    let rows: Vec<Vec<f64>> = {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..3).map(|_| (0..fix.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let x = Tensor::matrix(3, fix.d_in, flat).unwrap();
    let out = run_bilstm(&fix, &x, 3);

    let fwd = lstm_scan_oracle(&rows, fix.store.get(fix.ids[0]), fix.store.get(fix.ids[1]),
        fix.store.get(fix.ids[2]), fix.hidden);
    let mut rev = rows.clone();
    rev.reverse();
    let mut bwd = lstm_scan_oracle(&rev, fix.store.get(fix.ids[3]), fix.store.get(fix.ids[4]),
        fix.store.get(fix.ids[5]), fix.hidden);
    bwd.reverse();
    for t in 0..3 {
        for j in 0..fix.hidden {
            assert!((out.row(t)[j] - fwd[t][j]).abs() < 1e-10, "fwd t={t} j={j}");
            assert!((out.row(t)[fix.hidden + j] - bwd[t][j]).abs() < 1e-10, "bwd t={t} j={j}");
        }
    }
}

#[test]
fn padded_rows_are_zero_and_do_not_affect_real_positions() {
    let fix = bilstm_fixture(31, 3, 2, false);
    let x3 = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.4, 9.0, -9.0]).unwrap();
    let x2 = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    let out3 = run_bilstm(&fix, &x3, 2);
    let out2 = run_bilstm(&fix, &x2, 2);
    assert!(out3.row(2).iter().all(|&v| v == 0.0));
    for t in 0..2 {
        for j in 0..2 * fix.hidden {
            assert_eq!(out3.row(t)[j], out2.row(t)[j]);
        }
    }
}

#[test]
fn bilstm_rejects_empty_sequence() {
    let fix = bilstm_fixture(1, 2, 2, false);
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let p: Vec<usize> = fix.ids.iter().map(|&id| tape.param(&fix.store, id)).collect();
    assert!(tape.bilstm(xv, p[0], p[1], p[2], p[3], p[4], p[5], 0).is_err());
}

fn attention_fixture(h: Tensor, w: Vec<f64>, b: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    // brute-force oracle: scores, probs, context
    let n = h.rows();
    let scores: Vec<f64> = (0..n)
        .map(|i| h.row(i).iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() + b)
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut ctx = vec![0.0; h.cols()];
    for i in 0..n {
        for j in 0..h.cols() {
            ctx[j] += probs[i] * h.row(i)[j];
        }
    }
    (h, probs, ctx)
}

fn run_attention(h: &Tensor, w: &[f64], b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut store = ParamStore::new();
    let wid = store.add("w", Tensor::vector(w.to_vec()), true);
    let bid = store.add("b", Tensor::scalar(b), true);
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let wv = tape.param(&store, wid);
    let bv = tape.param(&store, bid);
    let scores = tape.attn_scores(hv, wv, bv);
    let mask = vec![true; h.rows()];
    let probs = tape.masked_softmax_op(scores, &mask).unwrap();
    let ctx = tape.weighted_rows(probs, hv);
    (tape.value(probs).data().to_vec(), tape.value(ctx).data().to_vec())
}

#[test]
fn singleton_attention_returns_the_row() {
    let h = Tensor::matrix(1, 3, vec![0.4, -0.8, 1.6]).unwrap();
    let (p, c) = run_attention(&h, &[5.0, -2.0, 0.1], 7.0);
    assert_eq!(p, vec![1.0]);
    assert_eq!(c, vec![0.4, -0.8, 1.6]);
}

#[test]
fn identical_rows_give_that_row_back() {
    let h = Tensor::matrix(3, 2, vec![0.9, -0.1, 0.9, -0.1, 0.9, -0.1]).unwrap();
    let (p, c) = run_attention(&h, &[0.3, 0.6], -0.2);
    let total: f64 = p.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!((c[0] - 0.9).abs() < 1e-12 && (c[1] + 0.1).abs() < 1e-12);
}

#[test]
fn three_row_attention_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = rand_matrix(&mut rng, 3, 4);
    let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = rng.gen_range(-1.0..1.0);
    let (p, c) = run_attention(&h, &w, b);
    let (_, op, oc) = attention_fixture(h, w, b);
    for (a, e) in p.iter().zip(&op) {
        assert!((a - e).abs() < 1e-12);
    }
    for (a, e) in c.iter().zip(&oc) {
        assert!((a - e).abs() < 1e-12);
    }
}

fn tiny_ontology() -> Ontology {
    let mut informable = IndexMap::new();
    informable.insert("food".to_string(), vec!["french".to_string(), "thai".to_string()]);
    informable.insert("area".to_string(), vec!["south".to_string(), "north".to_string()]);
    Ontology { informable, requestable: vec![] }
}

fn tiny_model(ablation: Ablation, seed: u64) -> Model {
    let seqs: Vec<Vec<String>> = vec![
        "french food please".split(' ').map(String::from).collect(),
        "thai south north area = ( ) request confirm".split(' ').map(String::from).collect(),
    ];
    let refs: Vec<&[String]> = seqs.iter().map(|s| s.as_slice()).collect();
    let vocab = Vocabulary::build(refs.iter().copied(), 1).unwrap();
    let config = ModelConfig { d_emb: 4, d_rnn: 6, ablation, frozen_embeddings: false };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(tiny_ontology(), vocab, config, &mut rng, None).unwrap()
}

fn encode_tokens(model: &Model, slot: &str, text: &str) -> (Vec<f64>, Vec<f64>) {
    let indices = model.vocab.encode_text(text);
    let mask = vec![true; indices.len()];
    let mut tape = Tape::new();
    let table = tape.param(&model.store, model.embedding.param);
    let x = tape.gather(table, &indices).unwrap();
    let out = glsa_encode::<ChaCha8Rng>(
        &mut tape, &model.store, &model.encoder, slot, x, &mask, None,
    )
    .unwrap();
    (tape.value(out.h).data().to_vec(), tape.value(out.c).data().to_vec())
}

#[test]
fn gate_endpoints_collapse_to_single_branch() {
    // theta = -50: beta ~ 0, full output matches the global-only ablation
    let mut full = tiny_model(Ablation::Full, 3);
    let gate = full.encoder.locals["food"].gate.unwrap();
    *full.store.get_mut(gate) = Tensor::scalar(-50.0);
    let mut global_only = full.clone();
    global_only.encoder.ablation = Ablation::NoLocal;
    global_only.config.ablation = Ablation::NoLocal;
    let (hf, cf) = encode_tokens(&full, "food", "french food please");
    let (hg, cg) = encode_tokens(&global_only, "food", "french food please");
    for (a, b) in hf.iter().zip(&hg) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in cf.iter().zip(&cg) {
        assert!((a - b).abs() < 1e-10);
    }

    // theta = +50: beta ~ 1, matches the local-only ablation
    *full.store.get_mut(gate) = Tensor::scalar(50.0);
    let mut local_only = full.clone();
    local_only.encoder.ablation = Ablation::NoGlobal;
    local_only.config.ablation = Ablation::NoGlobal;
    let (hf, cf) = encode_tokens(&full, "food", "french food please");
    let (hl, cl) = encode_tokens(&local_only, "food", "french food please");
    for (a, b) in hf.iter().zip(&hl) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in cf.iter().zip(&cl) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn identical_branches_collapse_exactly() {
    // copy the global BiLSTM/attention into the slot's local modules: the
    // mixture of two equal branches equals either branch for any gate
    let mut model = tiny_model(Ablation::Full, 5);
    let global = model.encoder.global_lstm.clone().unwrap();
    let local = model.encoder.locals["food"].lstm.clone().unwrap();
    for (g, l) in [
        (global.wx_f, local.wx_f), (global.wh_f, local.wh_f), (global.b_f, local.b_f),
        (global.wx_b, local.wx_b), (global.wh_b, local.wh_b), (global.b_b, local.b_b),
    ] {
        *model.store.get_mut(l) = model.store.get(g).clone();
    }
    let (h, _) = encode_tokens(&model, "food", "french food please");

    let mut global_only = model.clone();
    global_only.encoder.ablation = Ablation::NoLocal;
    let (hg, _) = encode_tokens(&global_only, "food", "french food please");
    for (a, b) in h.iter().zip(&hg) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn mixture_is_elementwise_convex() {
    // every entry of the mixed H lies within the interval spanned by the
    // local and global branch entries
    let model = tiny_model(Ablation::Full, 9);
    let (h, _) = encode_tokens(&model, "food", "french food please");
    let mut local_only = model.clone();
    local_only.encoder.ablation = Ablation::NoGlobal;
    let (hs, _) = encode_tokens(&local_only, "food", "french food please");
    let mut global_only = model.clone();
    global_only.encoder.ablation = Ablation::NoLocal;
    let (hg, _) = encode_tokens(&global_only, "food", "french food please");
    for ((m, s), g) in h.iter().zip(&hs).zip(&hg) {
        let lo = s.min(*g) - 1e-12;
        let hi = s.max(*g) + 1e-12;
        assert!(*m >= lo && *m <= hi, "{m} outside [{lo}, {hi}]");
    }
}

#[test]
fn gate_endpoint_silences_inactive_branch_gradients() {
    let turn = Turn {
        system_acts: vec![],
        transcript: "french food please".into(),
        asr: None,
        turn_label: vec![("food".into(), "french".into())],
    };
    // beta ~ 0 for every slot: local-module gradients vanish
    let mut model = tiny_model(Ablation::Full, 17);
    for slot in ["area", "food"] {
        let gate = model.encoder.locals[slot].gate.unwrap();
        *model.store.get_mut(gate) = Tensor::scalar(-50.0);
    }
    let (_, grads) = dst_core::train::turn_loss_backward(&model, &turn).unwrap();
    for id in model.store.ids() {
        if model.store.name(id).starts_with("enc.local.") {
            if let Some(g) = grads.get(id) {
                for &v in g.data() {
                    assert!(v.abs() <= 1e-15, "{}: {v}", model.store.name(id));
                }
            }
        }
    }
    // beta ~ 1: global-module gradients vanish
    let mut model = tiny_model(Ablation::Full, 17);
    for slot in ["area", "food"] {
        let gate = model.encoder.locals[slot].gate.unwrap();
        *model.store.get_mut(gate) = Tensor::scalar(50.0);
    }
    let (_, grads) = dst_core::train::turn_loss_backward(&model, &turn).unwrap();
    for id in model.store.ids() {
        if model.store.name(id).starts_with("enc.global.") {
            if let Some(g) = grads.get(id) {
                for &v in g.data() {
                    assert!(v.abs() <= 1e-15, "{}: {v}", model.store.name(id));
                }
            }
        }
    }
}

#[test]
fn no_lstm_context_is_permutation_invariant() {
    let model = tiny_model(Ablation::NoLstm, 21);
    let (_, c1) = encode_tokens(&model, "food", "french food please north");
    let (_, c2) = encode_tokens(&model, "food", "north please food french");
    for (a, b) in c1.iter().zip(&c2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mask_len_contract() {
    assert_eq!(mask_len(&[true, true, false]).unwrap(), 2);
    assert!(mask_len(&[true, false, true]).is_err());
    assert!(mask_len(&[false, false]).is_err());
}
