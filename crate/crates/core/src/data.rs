//! Ontology and corpus ingestion.
//!
//! Corpus files are JSON: dialogues -> turns -> {system_acts, transcript,
//! asr (optional), turn_label}. System acts are stored pre-tokenized, e.g.
//! ["request", "(", "price", "range", ")"]. Labels use the reserved slot
//! "request" for requestable items.

use crate::error::{DstError, Result};
use crate::vocab::tokenize;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Reserved slot name under which requestable items live.
pub const REQUEST_SLOT: &str = "request";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Ontology {
    /// Informable slots and their candidate values, in declaration order.
    pub informable: IndexMap<String, Vec<String>>,
    /// Values of the reserved "request" slot.
    pub requestable: Vec<String>,
}

impl Ontology {
    pub fn validate(&self) -> Result<()> {
        for (slot, values) in &self.informable {
            if slot == REQUEST_SLOT {
                return Err(DstError::Data(format!("slot name '{REQUEST_SLOT}' is reserved")));
            }
            if values.is_empty() {
                return Err(DstError::Data(format!("slot '{slot}' has no values")));
            }
            let mut seen = std::collections::HashSet::new();
            for v in values {
                if !seen.insert(v) {
                    return Err(DstError::Data(format!("duplicate value '{v}' in slot '{slot}'")));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.requestable {
            if !seen.insert(v) {
                return Err(DstError::Data(format!("duplicate requestable '{v}'")));
            }
        }
        Ok(())
    }

    /// All slots the model needs estimators for: informables plus "request".
    pub fn slots(&self) -> Vec<String> {
        let mut s: Vec<String> = self.informable.keys().cloned().collect();
        if !self.requestable.is_empty() {
            s.push(REQUEST_SLOT.to_string());
        }
        s
    }

    pub fn values(&self, slot: &str) -> Result<&[String]> {
        if slot == REQUEST_SLOT {
            return Ok(&self.requestable);
        }
        self.informable
            .get(slot)
            .map(Vec::as_slice)
            .ok_or_else(|| DstError::UnknownSlot(slot.to_string()))
    }

    /// Every (slot, value) candidate pair, requests included.
    pub fn all_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (slot, values) in &self.informable {
            for v in values {
                out.push((slot.clone(), v.clone()));
            }
        }
        for v in &self.requestable {
            out.push((REQUEST_SLOT.to_string(), v.clone()));
        }
        out
    }

    pub fn contains_pair(&self, slot: &str, value: &str) -> bool {
        if slot == REQUEST_SLOT {
            self.requestable.iter().any(|v| v == value)
        } else {
            self.informable.get(slot).is_some_and(|vs| vs.iter().any(|v| v == value))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Turn {
    /// Previous system actions, each a token sequence.
    pub system_acts: Vec<Vec<String>>,
    pub transcript: String,
    /// ASR N-best hypotheses (text, confidence), best first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<Vec<(String, f64)>>,
    /// Gold label: (slot, value) pairs; requests use the "request" slot.
    pub turn_label: Vec<(String, String)>,
}

impl Turn {
    /// Gold inform entries as a slot -> value map.
    pub fn gold_goal(&self) -> BTreeMap<String, String> {
        self.turn_label
            .iter()
            .filter(|(s, _)| s != REQUEST_SLOT)
            .map(|(s, v)| (s.clone(), v.clone()))
            .collect()
    }

    /// Gold requested items.
    pub fn gold_requests(&self) -> std::collections::BTreeSet<String> {
        self.turn_label
            .iter()
            .filter(|(s, _)| s == REQUEST_SLOT)
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Utterance variants to score: the ASR N-best if present, otherwise
    /// the transcript with weight 1.
    pub fn utterances(&self) -> Vec<(String, f64)> {
        match &self.asr {
            Some(hyps) if !hyps.is_empty() => hyps.clone(),
            _ => vec![(self.transcript.clone(), 1.0)],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dialogue {
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.dialogues.iter().flat_map(|d| d.turns.iter())
    }

    pub fn num_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }
}

pub fn load_ontology(path: &Path) -> Result<Ontology> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DstError::io(format!("reading ontology {}", path.display()), e))?;
    let ontology: Ontology = serde_json::from_str(&text)
        .map_err(|e| DstError::parse(path.display().to_string(), e.to_string()))?;
    ontology.validate()?;
    Ok(ontology)
}

pub fn save_ontology(path: &Path, ontology: &Ontology) -> Result<()> {
    let text = serde_json::to_string_pretty(ontology)
        .map_err(|e| DstError::Data(format!("serializing ontology: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| DstError::io(format!("writing ontology {}", path.display()), e))
}

/// Load a corpus and validate every label entry against the ontology.
pub fn load_corpus(path: &Path, ontology: &Ontology) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DstError::io(format!("reading corpus {}", path.display()), e))?;
    let corpus: Corpus = serde_json::from_str(&text)
        .map_err(|e| DstError::parse(path.display().to_string(), e.to_string()))?;
    validate_corpus(&corpus, ontology)?;
    Ok(corpus)
}

pub fn validate_corpus(corpus: &Corpus, ontology: &Ontology) -> Result<()> {
    for (d, dialogue) in corpus.dialogues.iter().enumerate() {
        for (t, turn) in dialogue.turns.iter().enumerate() {
            for (slot, value) in &turn.turn_label {
                if !ontology.contains_pair(slot, value) {
                    return Err(DstError::Data(format!(
                        "dialogue {d} turn {t}: label ({slot}, {value}) not in ontology"
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let text = serde_json::to_string_pretty(corpus)
        .map_err(|e| DstError::Data(format!("serializing corpus: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| DstError::io(format!("writing corpus {}", path.display()), e))
}

/// Turn-level occurrence count per slot-value pair; the grouping key for
/// frequency-bucketed evaluation.
pub fn pair_counts(corpus: &Corpus) -> BTreeMap<(String, String), usize> {
    let mut counts = BTreeMap::new();
    for turn in corpus.turns() {
        let mut seen = std::collections::HashSet::new();
        for (slot, value) in &turn.turn_label {
            if seen.insert((slot, value)) {
                *counts.entry((slot.clone(), value.clone())).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Token sequences feeding vocabulary construction: utterances, ASR
/// hypotheses, action descriptions, slot names, and values.
pub fn corpus_token_sequences(corpus: &Corpus, ontology: &Ontology) -> Vec<Vec<String>> {
    let mut seqs = Vec::new();
    for turn in corpus.turns() {
        seqs.push(tokenize(&turn.transcript));
        if let Some(asr) = &turn.asr {
            for (text, _) in asr {
                seqs.push(tokenize(text));
            }
        }
        for act in &turn.system_acts {
            seqs.push(act.clone());
        }
    }
    for (slot, values) in &ontology.informable {
        seqs.push(tokenize(slot));
        for v in values {
            seqs.push(tokenize(v));
        }
    }
    seqs.push(vec![REQUEST_SLOT.to_string(), "=".to_string()]);
    for v in &ontology.requestable {
        seqs.push(tokenize(v));
    }
    seqs
}

/// Token sequence for a candidate pair: slot tokens, "=", value tokens.
pub fn slot_value_tokens(slot: &str, value: &str) -> Vec<String> {
    let mut toks = tokenize(slot);
    toks.push("=".to_string());
    toks.extend(tokenize(value));
    toks
}
