//! Evaluation: joint goal / turn goal / turn request accuracy, and
//! per-slot-value F1 bucketed by training-set frequency.

use crate::data::{Corpus, REQUEST_SLOT};
use crate::error::{DstError, Result};
use crate::model::Model;
use crate::tracker::{gold_joint_goals, track_dialogue, JointGoal, PredictOptions, TurnState};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_BUCKET_EDGES: [usize; 5] = [0, 20, 50, 100, 200];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketF1 {
    /// Inclusive lower edge of training-occurrence counts.
    pub lower: usize,
    /// Exclusive upper edge; None for the open top bucket.
    pub upper: Option<usize>,
    /// Candidate pairs whose training count falls in this bucket.
    pub num_pairs: usize,
    /// Micro-averaged F1; None when the bucket has no pairs or no
    /// positive decisions at all.
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint_goal_accuracy: f64,
    pub turn_goal_accuracy: f64,
    pub turn_request_accuracy: f64,
    pub num_turns: usize,
    pub buckets: Vec<BucketF1>,
}

impl EvalReport {
    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("turns                 {:>8}\n", self.num_turns));
        s.push_str(&format!("joint goal accuracy   {:>8.4}\n", self.joint_goal_accuracy));
        s.push_str(&format!("turn goal accuracy    {:>8.4}\n", self.turn_goal_accuracy));
        s.push_str(&format!("turn request accuracy {:>8.4}\n", self.turn_request_accuracy));
        s.push_str("train-count bucket    pairs      F1\n");
        for b in &self.buckets {
            let range = match b.upper {
                Some(u) => format!("[{}, {})", b.lower, u),
                None => format!("[{}, inf)", b.lower),
            };
            let f1 = b.f1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{range:<20} {:>6}  {f1:>6}\n", b.num_pairs));
        }
        s
    }

    /// Plot-ready (bucket midpoint, F1) series; the open bucket uses twice
    /// its lower edge as midpoint.
    pub fn f1_series(&self) -> Vec<(f64, f64)> {
        self.buckets
            .iter()
            .filter_map(|b| {
                let mid = match b.upper {
                    Some(u) => (b.lower + u) as f64 / 2.0,
                    None => (b.lower * 2).max(1) as f64,
                };
                b.f1.map(|f| (mid, f))
            })
            .collect()
    }
}

/// Fraction of turns whose predicted joint goal equals the gold joint goal.
pub fn joint_goal_accuracy(pred: &[JointGoal], gold: &[JointGoal]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(DstError::Data(format!(
            "joint goal sequences differ in length: {} vs {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of turns with exact goal-map equality.
pub fn turn_goal_accuracy(
    pred: &[BTreeMap<String, String>],
    gold: &[BTreeMap<String, String>],
) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(DstError::Data("turn goal sequences differ in length".into()));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of turns with exact request-set equality (both empty counts).
pub fn turn_request_accuracy(
    pred: &[BTreeSet<String>],
    gold: &[BTreeSet<String>],
) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(DstError::Data("request sequences differ in length".into()));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Turn-level binary decisions per candidate pair, for F1 bucketing.
/// `pred[i]` and `gold[i]` are the pair sets of turn i.
pub fn bucketed_f1(
    pred: &[BTreeSet<(String, String)>],
    gold: &[BTreeSet<(String, String)>],
    train_counts: &BTreeMap<(String, String), usize>,
    all_pairs: &[(String, String)],
    edges: &[usize],
) -> Result<Vec<BucketF1>> {
    if pred.len() != gold.len() {
        return Err(DstError::Data("prediction/gold turn counts differ".into()));
    }
    for w in edges.windows(2) {
        if w[0] >= w[1] {
            return Err(DstError::Data(format!("bucket edges must increase: {:?}", edges)));
        }
    }
    // per-pair confusion counts over turn-level decisions
    let mut confusion: BTreeMap<&(String, String), (usize, usize, usize)> = BTreeMap::new();
    for pair in all_pairs {
        confusion.insert(pair, (0, 0, 0));
    }
    for (p, g) in pred.iter().zip(gold) {
        for pair in p {
            if let Some(c) = confusion.get_mut(pair) {
                if g.contains(pair) {
                    c.0 += 1; // tp
                } else {
                    c.1 += 1; // fp
                }
            }
        }
        for pair in g {
            if !p.contains(pair) {
                if let Some(c) = confusion.get_mut(pair) {
                    c.2 += 1; // fn
                }
            }
        }
    }
    let mut buckets = Vec::new();
    for (i, &lower) in edges.iter().enumerate() {
        let upper = edges.get(i + 1).copied();
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        let mut num_pairs = 0usize;
        for pair in all_pairs {
            let count = train_counts.get(pair).copied().unwrap_or(0);
            let in_bucket = count >= lower && upper.map_or(true, |u| count < u);
            if in_bucket {
                num_pairs += 1;
                let c = confusion[pair];
                tp += c.0;
                fp += c.1;
                fneg += c.2;
            }
        }
        let denom = 2 * tp + fp + fneg;
        let (f1, precision, recall) = if num_pairs == 0 || denom == 0 {
            // empty bucket, or no positive decisions anywhere in it
            (None, None, None)
        } else {
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
            (Some(2.0 * tp as f64 / denom as f64), Some(p), Some(r))
        };
        buckets.push(BucketF1 { lower, upper, num_pairs, f1, precision, recall });
    }
    Ok(buckets)
}

/// Predicted turn-level pair set (goal entries plus requests).
pub fn state_pairs(state: &TurnState) -> BTreeSet<(String, String)> {
    let mut set: BTreeSet<(String, String)> =
        state.goal.iter().map(|(s, v)| (s.clone(), v.clone())).collect();
    for r in &state.requests {
        set.insert((REQUEST_SLOT.to_string(), r.clone()));
    }
    set
}

/// Evaluate a model over a corpus. `train_counts` come from the training
/// split and drive the F1 buckets.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    options: &PredictOptions,
    train_counts: &BTreeMap<(String, String), usize>,
    edges: &[usize],
) -> Result<EvalReport> {
    let mut pred_joint = Vec::new();
    let mut gold_joint = Vec::new();
    let mut pred_goal = Vec::new();
    let mut gold_goal = Vec::new();
    let mut pred_req = Vec::new();
    let mut gold_req = Vec::new();
    let mut pred_pairs = Vec::new();
    let mut gold_pairs = Vec::new();

    for dialogue in &corpus.dialogues {
        let tracked = track_dialogue(model, dialogue, options)?;
        let gold = gold_joint_goals(dialogue);
        for ((state, joint), (turn, gj)) in tracked.into_iter().zip(dialogue.turns.iter().zip(gold))
        {
            pred_joint.push(joint);
            gold_joint.push(gj);
            pred_goal.push(state.goal.clone());
            gold_goal.push(turn.gold_goal());
            pred_req.push(state.requests.clone());
            gold_req.push(turn.gold_requests());
            pred_pairs.push(state_pairs(&state));
            gold_pairs.push(
                turn.turn_label.iter().map(|(s, v)| (s.clone(), v.clone())).collect(),
            );
        }
    }

    let all_pairs = model.ontology.all_pairs();
    Ok(EvalReport {
        joint_goal_accuracy: joint_goal_accuracy(&pred_joint, &gold_joint)?,
        turn_goal_accuracy: turn_goal_accuracy(&pred_goal, &gold_goal)?,
        turn_request_accuracy: turn_request_accuracy(&pred_req, &gold_req)?,
        num_turns: pred_joint.len(),
        buckets: bucketed_f1(&pred_pairs, &gold_pairs, train_counts, &all_pairs, edges)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jg(pairs: &[(&str, &str)]) -> JointGoal {
        pairs.iter().map(|(s, v)| (s.to_string(), v.to_string())).collect()
    }

    #[test]
    fn joint_goal_counting() {
        let gold = vec![jg(&[("a", "1")]); 4];
        assert_eq!(joint_goal_accuracy(&gold, &gold).unwrap(), 1.0);
        let mut pred = gold.clone();
        pred[2] = jg(&[("a", "2")]);
        assert_eq!(joint_goal_accuracy(&pred, &gold).unwrap(), 0.75);
        assert!(joint_goal_accuracy(&pred[..3], &gold).is_err());
    }

    #[test]
    fn request_accuracy_counts_exact_sets() {
        let empty: Vec<BTreeSet<String>> = vec![BTreeSet::new(); 3];
        assert_eq!(turn_request_accuracy(&empty, &empty).unwrap(), 1.0);

        let pred = vec![["phone"].iter().map(|s| s.to_string()).collect::<BTreeSet<_>>()];
        let gold =
            vec![["phone", "address"].iter().map(|s| s.to_string()).collect::<BTreeSet<_>>()];
        assert_eq!(turn_request_accuracy(&pred, &gold).unwrap(), 0.0);
    }

    #[test]
    fn bucketed_f1_perfect_and_silent_predictors() {
        let pair = ("food".to_string(), "french".to_string());
        let rare = ("food".to_string(), "thai".to_string());
        let all = vec![pair.clone(), rare.clone()];
        let mut counts = BTreeMap::new();
        counts.insert(pair.clone(), 100);
        counts.insert(rare.clone(), 3);
        let gold: Vec<BTreeSet<_>> =
            vec![[pair.clone()].into_iter().collect(), [rare.clone()].into_iter().collect()];

        let perfect = bucketed_f1(&gold, &gold, &counts, &all, &[0, 20, 50]).unwrap();
        for b in &perfect {
            if b.num_pairs > 0 {
                assert_eq!(b.f1, Some(1.0));
            }
        }

        let silent: Vec<BTreeSet<(String, String)>> = vec![BTreeSet::new(); 2];
        let r = bucketed_f1(&silent, &gold, &counts, &all, &[0, 20, 50]).unwrap();
        // buckets with positives score zero
        assert_eq!(r[0].f1, Some(0.0));
        assert_eq!(r[0].recall, Some(0.0));

        assert!(bucketed_f1(&gold, &gold, &counts, &all, &[10, 10]).is_err());
    }

    #[test]
    fn empty_bucket_reports_absent_f1() {
        let pair = ("a".to_string(), "1".to_string());
        let all = vec![pair.clone()];
        let mut counts = BTreeMap::new();
        counts.insert(pair.clone(), 500);
        let gold: Vec<BTreeSet<_>> = vec![[pair].into_iter().collect()];
        let r = bucketed_f1(&gold, &gold, &counts, &all, &[0, 20, 400]).unwrap();
        assert_eq!(r[0].num_pairs, 0);
        assert_eq!(r[0].f1, None);
        assert_eq!(r[2].f1, Some(1.0));
    }
}
