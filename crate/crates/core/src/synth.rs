//! Seeded synthetic task-oriented dialogue generator with controllable
//! slot-value frequency skew, for rare-value experiments.
//!
//! Values are unique single tokens across the ontology, so a gold label is
//! recoverable from its transcript (plus the confirmation prompt for bare
//! "yes" answers); `recover_label` is the reverse-template parser used to
//! verify that property.

use crate::data::{Corpus, Dialogue, Ontology, Turn, REQUEST_SLOT};
use crate::error::{DstError, Result};
use crate::vocab::tokenize;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrNoise {
    /// Number of hypotheses per turn.
    pub n_best: usize,
    /// Per-word deletion probability in non-top hypotheses.
    pub word_drop: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dialogues_train: usize,
    pub dialogues_dev: usize,
    pub dialogues_test: usize,
    pub turns_min: usize,
    pub turns_max: usize,
    pub num_slots: usize,
    pub values_per_slot: usize,
    pub num_requestable: usize,
    /// Zipf-like exponent over value ranks; 0 = uniform.
    pub skew: f64,
    pub seed: u64,
    #[serde(default)]
    pub asr: Option<AsrNoise>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dialogues_train: 200,
            dialogues_dev: 50,
            dialogues_test: 50,
            turns_min: 1,
            turns_max: 3,
            num_slots: 3,
            values_per_slot: 6,
            num_requestable: 4,
            skew: 1.0,
            seed: 1,
            asr: None,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dialogues_train == 0 {
            return Err(DstError::Config("dialogues_train must be positive".into()));
        }
        if self.turns_min == 0 || self.turns_max < self.turns_min {
            return Err(DstError::Config("invalid turns range".into()));
        }
        if self.num_slots == 0 || self.values_per_slot == 0 {
            return Err(DstError::Config("need at least one slot and value".into()));
        }
        if self.skew < 0.0 {
            return Err(DstError::Config("skew must be non-negative".into()));
        }
        Ok(())
    }
}

const SLOT_NAMES: [&str; 6] = ["food", "area", "pricerange", "type", "mood", "style"];
const REQUESTABLES: [&str; 6] = ["phone", "address", "postcode", "fee", "hours", "rating"];

/// Pseudo-word pool for values: CV syllable words, deterministic order.
fn value_words() -> Vec<String> {
    let consonants = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    let vowels = ["a", "e", "i", "o", "u"];
    let mut out = Vec::new();
    for c1 in consonants {
        for v1 in vowels {
            for c2 in consonants.iter().step_by(2) {
                out.push(format!("{c1}{v1}{c2}o"));
            }
        }
    }
    out
}

pub fn generate_ontology(config: &SyntheticConfig) -> Result<Ontology> {
    config.validate()?;
    let words = value_words();
    let needed = config.num_slots * config.values_per_slot;
    if needed > words.len() {
        return Err(DstError::Config(format!("too many values requested ({needed})")));
    }
    let mut informable = IndexMap::new();
    for s in 0..config.num_slots {
        let name = SLOT_NAMES
            .get(s)
            .map(|n| n.to_string())
            .unwrap_or_else(|| format!("slot{s}"));
        let values: Vec<String> = (0..config.values_per_slot)
            .map(|v| words[s * config.values_per_slot + v].clone())
            .collect();
        informable.insert(name, values);
    }
    let requestable: Vec<String> = (0..config.num_requestable)
        .map(|r| {
            REQUESTABLES
                .get(r)
                .map(|n| n.to_string())
                .unwrap_or_else(|| format!("req{r}"))
        })
        .collect();
    let ontology = Ontology { informable, requestable };
    ontology.validate()?;
    Ok(ontology)
}

/// Sample a value index with probability proportional to 1/(rank+1)^skew.
fn sample_rank(rng: &mut ChaCha8Rng, k: usize, skew: f64) -> usize {
    let weights: Vec<f64> = (0..k).map(|i| 1.0 / ((i + 1) as f64).powf(skew)).collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x <= 0.0 {
            return i;
        }
    }
    k - 1
}

/// Render an inform and return (phrase, labeled value).  Templates 5-8 are
/// order-ambiguous: the accepted and rejected values swap roles with equal
/// probability, so their token multiset carries no information about which
/// one is the label — only word order does.
fn inform_phrase<'a>(
    rng: &mut ChaCha8Rng,
    slot: &str,
    value: &'a str,
    distractor: &'a str,
) -> (String, &'a str) {
    let t = rng.gen_range(0..9);
    let (value, distractor) =
        if t >= 5 && rng.gen::<bool>() { (distractor, value) } else { (value, distractor) };
    let phrase = match t {
        0 => format!("i would like {value}"),
        1 => format!("i want the {slot} to be {value}"),
        2 => format!("looking for a {value} place"),
        3 => format!("{value} would be great"),
        4 => format!("something {value} for the {slot} please"),
        5 | 6 => format!("i want {value} not {distractor}"),
        _ => format!("not {distractor} i want {value}"),
    };
    (phrase, value)
}

fn request_phrase(rng: &mut ChaCha8Rng, req: &str) -> String {
    match rng.gen_range(0..3) {
        0 => format!("what is the {req}"),
        1 => format!("please send me the {req}"),
        _ => format!("can i get the {req}"),
    }
}

fn confirm_act(slot: &str, value: &str) -> Vec<String> {
    let mut act = vec!["confirm".to_string(), "(".to_string()];
    act.extend(tokenize(slot));
    act.push("=".to_string());
    act.extend(tokenize(value));
    act.push(")".to_string());
    act
}

fn request_act(slot: &str) -> Vec<String> {
    let mut act = vec!["request".to_string(), "(".to_string()];
    act.extend(tokenize(slot));
    act.push(")".to_string());
    act
}

fn asr_hypotheses(rng: &mut ChaCha8Rng, transcript: &str, noise: &AsrNoise) -> Vec<(String, f64)> {
    let tokens = tokenize(transcript);
    let mut hyps = vec![(transcript.to_string(), 1.0)];
    for k in 1..noise.n_best {
        let kept: Vec<&String> =
            tokens.iter().filter(|_| rng.gen::<f64>() >= noise.word_drop).collect();
        let text = if kept.is_empty() {
            tokens[0].clone()
        } else {
            kept.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ")
        };
        hyps.push((text, 1.0 / (k + 1) as f64));
    }
    hyps
}

fn generate_dialogue(rng: &mut ChaCha8Rng, ontology: &Ontology, config: &SyntheticConfig) -> Dialogue {
    let n_turns = rng.gen_range(config.turns_min..=config.turns_max);
    let slots: Vec<&String> = ontology.informable.keys().collect();
    let mut turns = Vec::with_capacity(n_turns);
    let mut prev_acts: Vec<Vec<String>> = Vec::new();

    for turn_idx in 0..n_turns {
        let mut label: Vec<(String, String)> = Vec::new();
        let mut phrases: Vec<String> = Vec::new();
        let mut acts = std::mem::take(&mut prev_acts);

        let confirm_turn = turn_idx > 0 && rng.gen::<f64>() < 0.3;
        if confirm_turn {
            let slot = slots[rng.gen_range(0..slots.len())];
            let values = &ontology.informable[slot];
            let v = sample_rank(rng, values.len(), config.skew);
            acts = vec![confirm_act(slot, &values[v])];
            if rng.gen::<f64>() < 0.6 {
                // affirm the prompted value; answer carries no value token
                phrases.push("yes please".to_string());
                label.push((slot.clone(), values[v].clone()));
            } else {
                let alt = (v + 1 + rng.gen_range(0..values.len() - 1)) % values.len();
                phrases.push(format!("no {} please", values[alt]));
                label.push((slot.clone(), values[alt].clone()));
            }
        } else {
            let slot = slots[rng.gen_range(0..slots.len())];
            let values = &ontology.informable[slot];
            let v = sample_rank(rng, values.len(), config.skew);
            let d = (v + 1 + rng.gen_range(0..values.len() - 1)) % values.len();
            let (phrase, labeled) = inform_phrase(rng, slot, &values[v], &values[d]);
            phrases.push(phrase);
            label.push((slot.clone(), labeled.to_string()));

            if slots.len() > 1 && rng.gen::<f64>() < 0.35 {
                let mut other = slots[rng.gen_range(0..slots.len())];
                while other == slot {
                    other = slots[rng.gen_range(0..slots.len())];
                }
                let values = &ontology.informable[other];
                let v2 = sample_rank(rng, values.len(), config.skew);
                let d2 = (v2 + 1 + rng.gen_range(0..values.len() - 1)) % values.len();
                let (phrase, labeled) = inform_phrase(rng, other, &values[v2], &values[d2]);
                phrases.push(format!("and {phrase}"));
                label.push((other.clone(), labeled.to_string()));
            }
        }

        if !ontology.requestable.is_empty() && rng.gen::<f64>() < 0.4 {
            let r = &ontology.requestable[rng.gen_range(0..ontology.requestable.len())];
            let phrase = request_phrase(rng, r);
            if phrases.is_empty() {
                phrases.push(phrase);
            } else {
                phrases.push(format!("also {phrase}"));
            }
            label.push((REQUEST_SLOT.to_string(), r.clone()));
        }

        let transcript = phrases.join(" ");
        let asr = config.asr.as_ref().map(|noise| asr_hypotheses(rng, &transcript, noise));
        turns.push(Turn { system_acts: acts, transcript, asr, turn_label: label });

        // the system follows up by asking about an unfilled slot
        let next_slot = slots[rng.gen_range(0..slots.len())];
        prev_acts = vec![request_act(next_slot)];
    }
    Dialogue { turns }
}

fn generate_split(ontology: &Ontology, config: &SyntheticConfig, split: u64, n: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(split);
    let dialogues = (0..n).map(|_| generate_dialogue(&mut rng, ontology, config)).collect();
    Corpus { dialogues }
}

/// Generate the ontology and train/dev/test splits, bit-reproducibly.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Ontology, Corpus, Corpus, Corpus)> {
    config.validate()?;
    let ontology = generate_ontology(config)?;
    let train = generate_split(&ontology, config, 1, config.dialogues_train);
    let dev = generate_split(&ontology, config, 2, config.dialogues_dev);
    let test = generate_split(&ontology, config, 3, config.dialogues_test);
    Ok((ontology, train, dev, test))
}

/// Reverse-template parser: recover the gold label of a generated turn from
/// its transcript and confirmation prompt alone.
pub fn recover_label(ontology: &Ontology, turn: &Turn) -> BTreeSet<(String, String)> {
    let tokens = tokenize(&turn.transcript);
    let mut label = BTreeSet::new();
    let mut skip_next_value = false;
    for tok in &tokens {
        if tok == "not" || tok == "no" {
            skip_next_value = true;
            continue;
        }
        let mut matched = false;
        for (slot, values) in &ontology.informable {
            if values.iter().any(|v| v == tok) {
                if skip_next_value {
                    // negated mention is a distractor unless it is the
                    // correction in a "no X please" answer
                    if turn.system_acts.iter().any(|a| a.first().map(String::as_str) == Some("confirm")) {
                        label.insert((slot.clone(), tok.clone()));
                    }
                } else {
                    label.insert((slot.clone(), tok.clone()));
                }
                matched = true;
            }
        }
        if ontology.requestable.iter().any(|r| r == tok) {
            label.insert((REQUEST_SLOT.to_string(), tok.clone()));
            matched = true;
        }
        if matched {
            skip_next_value = false;
        }
    }
    // bare affirmation: take the confirmed pair from the prompt
    if tokens.first().map(String::as_str) == Some("yes") {
        for act in &turn.system_acts {
            if act.first().map(String::as_str) == Some("confirm") {
                if let Some(eq) = act.iter().position(|t| t == "=") {
                    let slot = act[2..eq].join(" ");
                    let value = act[eq + 1..act.len() - 1].join(" ");
                    label.insert((slot, value));
                }
            }
        }
    }
    label
}
