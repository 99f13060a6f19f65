//! Turn-level state prediction over the full ontology, ASR N-best
//! aggregation, and joint-goal accumulation across turns.

use crate::data::{Turn, REQUEST_SLOT};
use crate::error::{DstError, Result};
use crate::model::Model;
use crate::scoring::{encode_turn, encode_value, score_candidate};
use crate::tape::{sigmoid, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Accumulated goal: at most one value per slot, last writer wins.
pub type JointGoal = BTreeMap<String, String>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnState {
    pub requests: BTreeSet<String>,
    pub goal: BTreeMap<String, String>,
}

/// Scores for every ontology candidate of one turn, keyed by (slot, value).
pub type ScoreMap = BTreeMap<(String, String), f64>;

#[derive(Debug, Clone, Copy)]
pub struct PredictOptions {
    pub threshold: f64,
    /// Weight each ASR hypothesis's logit by its confidence before summing.
    pub asr_confidence_weighting: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { threshold: 0.5, asr_confidence_weighting: false }
    }
}

/// Sum pre-sigmoid scores across ASR hypotheses, then squash.
pub fn aggregate_asr(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(DstError::Data("no ASR hypotheses to aggregate".into()));
    }
    Ok(sigmoid(logits.iter().sum()))
}

/// Score every candidate pair and derive the turn state: requests are all
/// request values above threshold; each informable slot keeps its
/// argmax-scoring value if that score clears the threshold.
pub fn predict_turn(
    model: &Model,
    turn: &Turn,
    options: &PredictOptions,
) -> Result<(TurnState, ScoreMap)> {
    let mut tape = Tape::new();
    let utterances: Vec<(Vec<usize>, f64)> = turn
        .utterances()
        .iter()
        .map(|(text, conf)| (model.vocab.encode_text(text), *conf))
        .collect();
    let acts: Vec<Vec<usize>> = turn
        .system_acts
        .iter()
        .map(|act| {
            let lowered: Vec<String> = act.iter().map(|t| t.to_lowercase()).collect();
            model.vocab.encode(&lowered)
        })
        .collect();

    let mut scores = ScoreMap::new();
    for slot in model.ontology.slots() {
        // one turn encoding per hypothesis, value encodings shared
        let mut turn_encs = Vec::new();
        for (indices, _) in &utterances {
            if indices.is_empty() {
                return Err(DstError::EmptySequence);
            }
            turn_encs.push(encode_turn(&mut tape, model, &slot, indices, &acts, None)?);
        }
        for value in model.ontology.values(&slot)? {
            let c_val = encode_value(&mut tape, model, &slot, value, None)?;
            let mut hyp_logits = Vec::with_capacity(turn_encs.len());
            for (enc, (_, conf)) in turn_encs.iter().zip(&utterances) {
                let mut logit = score_candidate(&mut tape, model, &slot, enc, c_val)?;
                if options.asr_confidence_weighting {
                    logit = tape.mul_const(logit, Tensor::scalar(*conf));
                }
                hyp_logits.push(logit);
            }
            let total = tape.sum_scalars(&hyp_logits);
            let y = sigmoid(tape.value(total).scalar_value());
            scores.insert((slot.clone(), value.clone()), y);
        }
    }

    let state = decide_state(&scores, &model.ontology, options.threshold)?;
    Ok((state, scores))
}

/// Derive the turn state from a candidate score map: requests are all
/// request values above threshold; each informable slot keeps only its
/// argmax value, and only when that score clears the threshold.
pub fn decide_state(
    scores: &ScoreMap,
    ontology: &crate::data::Ontology,
    threshold: f64,
) -> Result<TurnState> {
    let mut state = TurnState::default();
    for ((slot, value), &y) in scores {
        if slot == REQUEST_SLOT && y > threshold {
            state.requests.insert(value.clone());
        }
    }
    for slot in ontology.slots() {
        if slot == REQUEST_SLOT {
            continue;
        }
        let best = ontology
            .values(&slot)?
            .iter()
            .map(|v| (v, scores[&(slot.clone(), v.clone())]))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(a.0)));
        if let Some((value, y)) = best {
            if y > threshold {
                state.goal.insert(slot.clone(), value.clone());
            }
        }
    }
    Ok(state)
}

/// Fold a turn goal into the accumulated joint goal; the new specification
/// takes precedence, the previous goal is untouched.
pub fn accumulate(prev: &JointGoal, turn_goal: &BTreeMap<String, String>) -> JointGoal {
    let mut next = prev.clone();
    for (slot, value) in turn_goal {
        next.insert(slot.clone(), value.clone());
    }
    next
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub requests: Vec<String>,
    pub goal: BTreeMap<String, String>,
    pub joint_goal: JointGoal,
    /// Full candidate score map, keyed "slot=value".
    pub scores: BTreeMap<String, f64>,
}

/// Run prediction over a whole dialogue, accumulating the joint goal.
pub fn track_dialogue(
    model: &Model,
    dialogue: &crate::data::Dialogue,
    options: &PredictOptions,
) -> Result<Vec<(TurnState, JointGoal)>> {
    let mut out = Vec::with_capacity(dialogue.turns.len());
    let mut joint = JointGoal::new();
    for turn in &dialogue.turns {
        let (state, _) = predict_turn(model, turn, options)?;
        joint = accumulate(&joint, &state.goal);
        out.push((state, joint.clone()));
    }
    Ok(out)
}

/// Like `track_dialogue` but keeps the per-turn score maps, for dumps.
pub fn track_dialogue_records(
    model: &Model,
    dialogue: &crate::data::Dialogue,
    options: &PredictOptions,
) -> Result<Vec<TurnRecord>> {
    let mut out = Vec::with_capacity(dialogue.turns.len());
    let mut joint = JointGoal::new();
    for (i, turn) in dialogue.turns.iter().enumerate() {
        let (state, scores) = predict_turn(model, turn, options)?;
        joint = accumulate(&joint, &state.goal);
        out.push(TurnRecord {
            turn: i,
            requests: state.requests.iter().cloned().collect(),
            goal: state.goal,
            joint_goal: joint.clone(),
            scores: scores
                .into_iter()
                .map(|((s, v), y)| (format!("{s}={v}"), y))
                .collect(),
        });
    }
    Ok(out)
}

/// Gold joint goals per turn, folded from gold turn labels.
pub fn gold_joint_goals(dialogue: &crate::data::Dialogue) -> Vec<JointGoal> {
    let mut out = Vec::with_capacity(dialogue.turns.len());
    let mut joint = JointGoal::new();
    for turn in &dialogue.turns {
        joint = accumulate(&joint, &turn.gold_goal());
        out.push(joint.clone());
    }
    out
}

/// Sanity helper used by tests and the ontology contract: an untrained or
/// degenerate model may legitimately emit an empty state.
pub fn empty_state() -> TurnState {
    TurnState::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn goal(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(s, v)| (s.to_string(), v.to_string())).collect()
    }

    #[test]
    fn accumulate_adds_new_slot() {
        let joint = accumulate(&JointGoal::new(), &goal(&[("food", "french")]));
        assert_eq!(joint, goal(&[("food", "french")]));
    }

    #[test]
    fn accumulate_overwrites_existing_slot() {
        let prev = goal(&[("food", "thai")]);
        let joint = accumulate(&prev, &goal(&[("food", "french")]));
        assert_eq!(joint, goal(&[("food", "french")]));
        // prev untouched
        assert_eq!(prev, goal(&[("food", "thai")]));
    }

    #[test]
    fn accumulate_empty_turn_is_noop_and_idempotent() {
        let prev = goal(&[("food", "french")]);
        assert_eq!(accumulate(&prev, &BTreeMap::new()), prev);
        let t = goal(&[("area", "south")]);
        let once = accumulate(&prev, &t);
        assert_eq!(accumulate(&once, &t), once);
    }

    #[test]
    fn aggregate_asr_basics() {
        assert!(aggregate_asr(&[]).is_err());
        let s = 0.73;
        assert!((aggregate_asr(&[s]).unwrap() - sigmoid(s)).abs() < 1e-15);
        assert!((aggregate_asr(&[0.9, -0.9]).unwrap() - 0.5).abs() < 1e-15);
        // frozen from the scalar oracle: sigmoid(0.3 + 0.3 - 0.1) = sigmoid(0.5)
        let y = aggregate_asr(&[0.3, 0.3, -0.1]).unwrap();
        assert!((y - 0.6224593312018546).abs() < 1e-12);
    }
}
