//! Oracle tests for the scoring path: input encoding with the sentinel,
//! the utterance and action scorers, and the sigmoid combination.

use dst_core::data::Ontology;
use dst_core::encoder::{glsa_encode, Ablation};
use dst_core::model::{Model, ModelConfig};
use dst_core::scoring::{
    combine, combined_logit, encode_turn, encode_value, score_actions, score_candidate,
    score_utterance,
};
use dst_core::tape::{sigmoid, Tape};
use dst_core::tensor::Tensor;
use dst_core::vocab::Vocabulary;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model(seed: u64) -> Model {
    let mut informable = IndexMap::new();
    informable.insert("food".to_string(), vec!["french".to_string(), "thai".to_string()]);
    let ontology = Ontology { informable, requestable: vec!["phone".to_string()] };
    let seqs: Vec<Vec<String>> = vec![
        "french thai food phone please i want = ( ) request confirm"
            .split(' ')
            .map(String::from)
            .collect(),
    ];
    let refs: Vec<&[String]> = seqs.iter().map(|s| s.as_slice()).collect();
    let vocab = Vocabulary::build(refs.iter().copied(), 1).unwrap();
    let config = ModelConfig { d_emb: 4, d_rnn: 6, ablation: Ablation::Full, frozen_embeddings: false };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(ontology, vocab, config, &mut rng, None).unwrap()
}

#[test]
fn zero_actions_leave_only_the_sentinel_context() {
    let model = tiny_model(1);
    let mut tape = Tape::new();
    let utt = model.vocab.encode_text("i want french food");
    let enc = encode_turn(&mut tape, &model, "food", &utt, &[], None).unwrap();
    assert_eq!(enc.act_contexts.len(), 1);
}

#[test]
fn repeated_encoding_is_bitwise_identical() {
    let model = tiny_model(2);
    let utt = model.vocab.encode_text("i want thai food");
    let acts = vec![model.vocab.encode(&["request".into(), "(".into(), "food".into(), ")".into()])];
    let run = || {
        let mut tape = Tape::new();
        let enc = encode_turn(&mut tape, &model, "food", &utt, &acts, None).unwrap();
        let c_val = encode_value(&mut tape, &model, "food", "thai", None).unwrap();
        let logit = score_candidate(&mut tape, &model, "food", &enc, c_val).unwrap();
        tape.value(logit).scalar_value()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn action_contexts_match_direct_encoder_composition() {
    let model = tiny_model(3);
    let utt = model.vocab.encode_text("french please");
    let acts = vec![
        model.vocab.encode(&["request".into(), "(".into(), "food".into(), ")".into()]),
        model.vocab.encode(&["confirm".into(), "(".into(), "food".into(), "=".into(), "thai".into(), ")".into()]),
    ];
    let mut tape = Tape::new();
    let enc = encode_turn(&mut tape, &model, "food", &utt, &acts, None).unwrap();
    assert_eq!(enc.act_contexts.len(), 3);
    // each real action context equals glsa_encode applied directly
    for (act, &ctx) in acts.iter().zip(&enc.act_contexts) {
        let table = tape.param(&model.store, model.embedding.param);
        let x = tape.gather(table, act).unwrap();
        let mask = vec![true; act.len()];
        let direct = glsa_encode::<ChaCha8Rng>(
            &mut tape, &model.store, &model.encoder, "food", x, &mask, None,
        )
        .unwrap();
        assert_eq!(tape.value(ctx).data(), tape.value(direct.c).data());
    }
}

#[test]
fn zero_value_context_gives_uniform_attention() {
    // c_val = 0 makes all utterance attention logits zero, so q is the
    // mean of H's rows and y = w . mean + b
    let model = tiny_model(4);
    let head = model.head("food").unwrap().clone();
    let utt = model.vocab.encode_text("i want french food");
    let mut tape = Tape::new();
    let enc = encode_turn(&mut tape, &model, "food", &utt, &[], None).unwrap();
    let c_val = tape.leaf(Tensor::vector(vec![0.0; model.encoder.d_out()]));
    let y = score_utterance(&mut tape, &model, &head, enc.h_utt, &enc.utt_mask, c_val).unwrap();

    let h = tape.value(enc.h_utt).clone();
    let d = h.cols();
    let mut mean = vec![0.0; d];
    for i in 0..h.rows() {
        for j in 0..d {
            mean[j] += h.row(i)[j] / h.rows() as f64;
        }
    }
    let w = model.store.get(head.w);
    let b = model.store.get(head.b).scalar_value();
    let expected: f64 = w.data().iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() + b;
    assert!((tape.value(y).scalar_value() - expected).abs() < 1e-12);
}

#[test]
fn single_token_utterance_attends_to_its_only_row() {
    let model = tiny_model(5);
    let head = model.head("food").unwrap().clone();
    let utt = model.vocab.encode_text("french");
    let mut tape = Tape::new();
    let enc = encode_turn(&mut tape, &model, "food", &utt, &[], None).unwrap();
    let c_val = tape.leaf(Tensor::vector(vec![3.0, -1.0, 0.5, 2.0, 0.0, -4.0]));
    let y = score_utterance(&mut tape, &model, &head, enc.h_utt, &enc.utt_mask, c_val).unwrap();

    let h1 = tape.value(enc.h_utt).row(0).to_vec();
    let w = model.store.get(head.w);
    let b = model.store.get(head.b).scalar_value();
    let expected: f64 = w.data().iter().zip(&h1).map(|(a, b)| a * b).sum::<f64>() + b;
    assert!((tape.value(y).scalar_value() - expected).abs() < 1e-12);
}

#[test]
fn utterance_score_matches_brute_force_oracle() {
    let model = tiny_model(6);
    let head = model.head("food").unwrap().clone();
    let utt = model.vocab.encode_text("i want thai food please");
    let mut tape = Tape::new();
    let enc = encode_turn(&mut tape, &model, "food", &utt, &[], None).unwrap();
    let c_val = encode_value(&mut tape, &model, "food", "thai", None).unwrap();
    let y = score_utterance(&mut tape, &model, &head, enc.h_utt, &enc.utt_mask, c_val).unwrap();

    // brute force from the tape's H and c_val values
    let h = tape.value(enc.h_utt).clone();
    let cv = tape.value(c_val).data().to_vec();
    let scores: Vec<f64> = (0..h.rows())
        .map(|i| h.row(i).iter().zip(&cv).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut q = vec![0.0; h.cols()];
    for i in 0..h.rows() {
        for j in 0..h.cols() {
            q[j] += exps[i] / z * h.row(i)[j];
        }
    }
    let w = model.store.get(head.w);
    let b = model.store.get(head.b).scalar_value();
    let expected: f64 = w.data().iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() + b;
    assert!((tape.value(y).scalar_value() - expected).abs() < 1e-12);
}

#[test]
fn sentinel_only_zero_context_scores_zero() {
    let mut tape = Tape::new();
    let sent = tape.leaf(Tensor::vector(vec![0.0; 6]));
    let c_utt = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5, 0.1, 3.0, -1.0]));
    let c_val = tape.leaf(Tensor::vector(vec![0.3, 0.3, 0.3, 0.3, 0.3, 0.3]));
    let y = score_actions(&mut tape, &[sent], c_utt, c_val).unwrap();
    assert_eq!(tape.value(y).scalar_value(), 0.0);
}

#[test]
fn identical_action_contexts_collapse_to_that_context() {
    let mut tape = Tape::new();
    let ctx = vec![0.7, -0.2, 1.1, 0.0, 0.4, -0.9];
    let a1 = tape.leaf(Tensor::vector(ctx.clone()));
    let a2 = tape.leaf(Tensor::vector(ctx.clone()));
    let a3 = tape.leaf(Tensor::vector(ctx.clone()));
    let c_utt = tape.leaf(Tensor::vector(vec![5.0, 1.0, -3.0, 0.2, 0.0, 2.0]));
    let c_val = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = score_actions(&mut tape, &[a1, a2, a3], c_utt, c_val).unwrap();
    let expected: f64 = ctx.iter().zip([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).map(|(a, b)| a * b).sum();
    assert!((tape.value(y).scalar_value() - expected).abs() < 1e-12);
}

#[test]
fn two_action_score_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    use rand::Rng;
    let vec6 = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let (c1, c2, c3) = (vec6(&mut rng), vec6(&mut rng), vec6(&mut rng));
    let cu = vec6(&mut rng);
    let cv = vec6(&mut rng);
    let mut tape = Tape::new();
    let a1 = tape.leaf(Tensor::vector(c1.clone()));
    let a2 = tape.leaf(Tensor::vector(c2.clone()));
    let a3 = tape.leaf(Tensor::vector(c3.clone()));
    let c_utt = tape.leaf(Tensor::vector(cu.clone()));
    let c_val = tape.leaf(Tensor::vector(cv.clone()));
    let y = score_actions(&mut tape, &[a1, a2, a3], c_utt, c_val).unwrap();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let scores = [dot(&c1, &cu), dot(&c2, &cu), dot(&c3, &cu)];
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut q = vec![0.0; 6];
    for (p, c) in exps.iter().zip([&c1, &c2, &c3]) {
        for j in 0..6 {
            q[j] += p / z * c[j];
        }
    }
    assert!((tape.value(y).scalar_value() - dot(&q, &cv)).abs() < 1e-12);
}

#[test]
fn combine_analytic_points() {
    let mut model = tiny_model(9);
    let head = model.head("food").unwrap().clone();

    // y_utt = y_act = 0 -> 0.5 for any weight
    let mut tape = Tape::new();
    let zero_u = tape.leaf(Tensor::scalar(0.0));
    let zero_a = tape.leaf(Tensor::scalar(0.0));
    let y = combine(&mut tape, &model, &head, zero_u, zero_a);
    assert_eq!(tape.value(y).scalar_value(), 0.5);

    // w = 0 -> the action channel is off
    *model.store.get_mut(head.w_act) = Tensor::scalar(0.0);
    let mut tape = Tape::new();
    let yu = tape.leaf(Tensor::scalar(0.37));
    let ya = tape.leaf(Tensor::scalar(123.0));
    let y = combine(&mut tape, &model, &head, yu, ya);
    assert!((tape.value(y).scalar_value() - sigmoid(0.37)).abs() < 1e-15);

    // (1.2, -0.4, w = 0.5) -> sigmoid(1.0), frozen from a scalar oracle
    *model.store.get_mut(head.w_act) = Tensor::scalar(0.5);
    let mut tape = Tape::new();
    let yu = tape.leaf(Tensor::scalar(1.2));
    let ya = tape.leaf(Tensor::scalar(-0.4));
    let logit = combined_logit(&mut tape, &model, &head, yu, ya);
    assert!((tape.value(logit).scalar_value() - 1.0).abs() < 1e-15);
    let y = combine(&mut tape, &model, &head, yu, ya);
    assert!((tape.value(y).scalar_value() - 0.7310585786300049).abs() < 1e-15);
}
