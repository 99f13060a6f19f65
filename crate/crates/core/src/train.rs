//! Loss, the training loop (Adam, dropout, word dropout, early stopping on
//! dev joint goal accuracy), and ablation configuration.

use crate::adam::{AdamConfig, AdamState};
use crate::data::{Corpus, Ontology};
use crate::encoder::Ablation;
use crate::error::{DstError, Result};
use crate::metrics::{evaluate, DEFAULT_BUCKET_EDGES};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::scoring::{encode_turn, encode_value, score_candidate, Noise};
use crate::tape::{Tape, VarId};
use crate::tracker::PredictOptions;
use crate::vocab::Vocabulary;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// None = auto: 0.3 when the corpus has ASR hypotheses, 0 otherwise.
    pub word_dropout: Option<f64>,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub d_emb: usize,
    pub d_rnn: usize,
    /// Cap on sampled negative candidates per turn; None scores them all.
    pub max_negatives: Option<usize>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            dropout: 0.2,
            word_dropout: None,
            patience: 10,
            seed: 1,
            ablation: Ablation::Full,
            d_emb: 50,
            d_rnn: 100,
            max_negatives: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DstError::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if let Some(wd) = self.word_dropout {
            if !(0.0..1.0).contains(&wd) {
                return Err(DstError::Config(format!("word dropout must be in [0,1), got {wd}")));
            }
        }
        if self.patience == 0 {
            return Err(DstError::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DstError::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Set the ablation mode on a model configuration.
pub fn apply_ablation(mode: Ablation, mut config: ModelConfig) -> ModelConfig {
    config.ablation = mode;
    config
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_joint_goal: f64,
    pub dev_turn_goal: f64,
    pub dev_turn_request: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_dev_joint_goal: f64,
    /// Not serialized: written artifacts must be bit-reproducible across
    /// identical runs, and wall-clock time is not.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Mean binary cross-entropy over probability scores, with clamping so a
/// degenerate 0/1 score cannot produce infinities.
pub fn bce_loss(scores: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(scores.len(), targets.len());
    let eps = 1e-12;
    let total: f64 = scores
        .iter()
        .zip(targets)
        .map(|(&y, &t)| {
            let y = y.clamp(eps, 1.0 - eps);
            -(t * y.ln() + (1.0 - t) * (1.0 - y).ln())
        })
        .sum();
    total / scores.len() as f64
}

struct TurnBatchItem {
    utterances: Vec<Vec<usize>>,
    acts: Vec<Vec<usize>>,
    /// (slot, value, target) candidates for the loss.
    candidates: Vec<(String, String, f64)>,
}

fn prepare_turn(
    model: &Model,
    turn: &crate::data::Turn,
    max_negatives: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> TurnBatchItem {
    let utterances = turn
        .utterances()
        .iter()
        .map(|(text, _)| model.vocab.encode_text(text))
        .collect();
    let acts = turn
        .system_acts
        .iter()
        .map(|act| {
            let lowered: Vec<String> = act.iter().map(|t| t.to_lowercase()).collect();
            model.vocab.encode(&lowered)
        })
        .collect();
    let gold: std::collections::BTreeSet<(String, String)> =
        turn.turn_label.iter().cloned().collect();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (slot, value) in model.ontology.all_pairs() {
        if gold.contains(&(slot.clone(), value.clone())) {
            positives.push((slot, value, 1.0));
        } else {
            negatives.push((slot, value, 0.0));
        }
    }
    if let Some(k) = max_negatives {
        if negatives.len() > k {
            negatives.shuffle(rng);
            negatives.truncate(k);
            negatives.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        }
    }
    positives.extend(negatives);
    TurnBatchItem { utterances, acts, candidates: positives }
}

/// Build the loss graph for one turn on an existing tape. Value encodings
/// are cached across turns sharing the tape.
fn build_turn_loss(
    tape: &mut Tape,
    model: &Model,
    item: &TurnBatchItem,
    mut noise: Option<&mut Noise<'_>>,
    value_cache: &mut HashMap<(String, String), VarId>,
) -> Result<VarId> {
    // group candidates by slot so the turn is encoded once per slot
    let mut by_slot: Vec<(&str, Vec<&(String, String, f64)>)> = Vec::new();
    for cand in &item.candidates {
        match by_slot.iter_mut().find(|(s, _)| *s == cand.0) {
            Some((_, v)) => v.push(cand),
            None => by_slot.push((&cand.0, vec![cand])),
        }
    }
    let mut logits = Vec::with_capacity(item.candidates.len());
    let mut targets = Vec::with_capacity(item.candidates.len());
    for (slot, cands) in by_slot {
        let mut encs = Vec::with_capacity(item.utterances.len());
        for utt in &item.utterances {
            if utt.is_empty() {
                return Err(DstError::EmptySequence);
            }
            encs.push(encode_turn(tape, model, slot, utt, &item.acts, noise.as_deref_mut())?);
        }
        for (s, v, t) in cands {
            let key = (s.clone(), v.clone());
            let c_val = match value_cache.get(&key) {
                Some(&id) => id,
                None => {
                    let id = encode_value(tape, model, s, v, noise.as_deref_mut())?;
                    value_cache.insert(key, id);
                    id
                }
            };
            let mut hyp_logits = Vec::with_capacity(encs.len());
            for enc in &encs {
                hyp_logits.push(score_candidate(tape, model, slot, enc, c_val)?);
            }
            logits.push(tape.sum_scalars(&hyp_logits));
            targets.push(*t);
        }
    }
    let stacked = tape.stack_scalars(&logits);
    Ok(tape.bce_mean_logits(stacked, &targets))
}

/// Scalar loss for one turn under the current parameters (no noise).
/// Used by the finite-difference gradient check.
pub fn turn_loss_value(model: &Model, turn: &crate::data::Turn) -> Result<f64> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let item = prepare_turn(model, turn, None, &mut rng);
    let mut cache = HashMap::new();
    let loss = build_turn_loss(&mut tape, model, &item, None, &mut cache)?;
    Ok(tape.value(loss).scalar_value())
}

/// Loss and reverse-mode gradients for one turn (no noise).
pub fn turn_loss_backward(
    model: &Model,
    turn: &crate::data::Turn,
) -> Result<(f64, crate::params::Gradients)> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let item = prepare_turn(model, turn, None, &mut rng);
    let mut cache = HashMap::new();
    let loss = build_turn_loss(&mut tape, model, &item, None, &mut cache)?;
    let value = tape.value(loss).scalar_value();
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

pub fn train(
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    ontology: &Ontology,
    config: &TrainConfig,
    pretrained: Option<&[crate::embedding::PretrainedTable]>,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if train_corpus.num_turns() == 0 {
        return Err(DstError::Data("training split is empty".into()));
    }
    if dev_corpus.num_turns() == 0 {
        return Err(DstError::Data("dev split is empty".into()));
    }
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let seqs = crate::data::corpus_token_sequences(train_corpus, ontology);
    let refs: Vec<&[String]> = seqs.iter().map(|s| s.as_slice()).collect();
    let vocab = Vocabulary::build(refs.iter().copied(), 1)?;

    let model_config = ModelConfig {
        d_emb: config.d_emb,
        d_rnn: config.d_rnn,
        ablation: config.ablation,
        frozen_embeddings: pretrained.is_some(),
    };
    let mut model = Model::new(ontology.clone(), vocab, model_config, &mut rng, pretrained)?;

    let has_asr = train_corpus.turns().any(|t| t.asr.is_some());
    let word_dropout = config.word_dropout.unwrap_or(if has_asr { 0.3 } else { 0.0 });

    let adam_config = AdamConfig { learning_rate: config.learning_rate, ..Default::default() };
    let mut adam = AdamState::new(adam_config, model.store.len());

    let turns: Vec<&crate::data::Turn> = train_corpus.turns().collect();
    let mut order: Vec<usize> = (0..turns.len()).collect();
    let options =
        PredictOptions { threshold: config.threshold, asr_confidence_weighting: false };
    let train_counts = crate::data::pair_counts(train_corpus);

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_joint_goal: f64::NEG_INFINITY,
        wall_clock_secs: 0.0,
    };
    let mut best_store: Option<ParamStore> = None;
    let mut best_request = f64::NEG_INFINITY;
    let mut stale_epochs = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let mut cache = HashMap::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = prepare_turn(&model, turns[i], config.max_negatives, &mut rng);
                let mut noise =
                    Noise { rng: &mut rng, dropout: config.dropout, word_dropout };
                let loss =
                    build_turn_loss(&mut tape, &model, &item, Some(&mut noise), &mut cache)?;
                losses.push(loss);
            }
            let batch_loss = tape.mean_scalars(&losses);
            epoch_loss += tape.value(batch_loss).scalar_value();
            batches += 1;
            let mut grads = tape.backward(batch_loss)?;
            model.embedding.sanitize_grads(&mut grads);
            adam.step(&mut model.store, &grads)?;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;

        let dev = evaluate(&model, dev_corpus, &options, &train_counts, &DEFAULT_BUCKET_EDGES)?;
        report.epochs.push(EpochReport {
            epoch,
            train_loss,
            dev_joint_goal: dev.joint_goal_accuracy,
            dev_turn_goal: dev.turn_goal_accuracy,
            dev_turn_request: dev.turn_request_accuracy,
        });

        if dev.joint_goal_accuracy > report.best_dev_joint_goal {
            report.best_dev_joint_goal = dev.joint_goal_accuracy;
            report.best_epoch = epoch;
            best_request = dev.turn_request_accuracy;
            best_store = Some(model.store.clone());
            stale_epochs = 0;
        } else {
            // ties on the selection metric prefer the higher request
            // accuracy, but still count toward patience
            if dev.joint_goal_accuracy == report.best_dev_joint_goal
                && dev.turn_request_accuracy > best_request
            {
                report.best_epoch = epoch;
                best_request = dev.turn_request_accuracy;
                best_store = Some(model.store.clone());
            }
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }

    if let Some(store) = best_store {
        model.store = store;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Deterministic child seed derivation for multi-seed harnesses.
pub fn child_seed(base: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
