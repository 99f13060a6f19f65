//! Per-slot-value scoring: encode the utterance, the previous system
//! actions (plus the sentinel), and the candidate slot-value pair, then
//! combine the utterance score and the action score into one logit.

use crate::data::slot_value_tokens;
use crate::embedding::{dropout_mask, word_dropout_mask};
use crate::encoder::{glsa_encode, mask_len, EncoderDropout, EncoderOutput};
use crate::error::Result;
use crate::model::{Model, ScoringHead};
use crate::tape::{Tape, VarId};
use rand_chacha::ChaCha8Rng;

/// Training-time noise: standard dropout on embeddings and module outputs,
/// plus optional word dropout on utterance embeddings.
pub struct Noise<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub dropout: f64,
    pub word_dropout: f64,
}

/// Embed a token sequence onto the tape, with optional noise.
fn embed_seq(
    tape: &mut Tape,
    model: &Model,
    indices: &[usize],
    noise: Option<&mut Noise<'_>>,
    apply_word_dropout: bool,
) -> Result<VarId> {
    let table = tape.param(&model.store, model.embedding.param);
    let mut x = tape.gather(table, indices)?;
    if let Some(n) = noise {
        let rows = indices.len();
        let cols = model.embedding.d_emb;
        if apply_word_dropout && n.word_dropout > 0.0 {
            let mask = word_dropout_mask(rows, cols, n.word_dropout, n.rng)?;
            x = tape.mul_const(x, mask);
        }
        if n.dropout > 0.0 {
            let mask = dropout_mask(rows, cols, n.dropout, n.rng)?;
            x = tape.mul_const(x, mask);
        }
    }
    Ok(x)
}

fn encode_seq(
    tape: &mut Tape,
    model: &Model,
    slot: &str,
    x: VarId,
    mask: &[bool],
    noise: &mut Option<&mut Noise<'_>>,
) -> Result<EncoderOutput> {
    match noise.as_deref_mut() {
        Some(n) if n.dropout > 0.0 => {
            let mut drop = EncoderDropout { rng: n.rng, rate: n.dropout };
            glsa_encode(tape, &model.store, &model.encoder, slot, x, mask, Some(&mut drop))
        }
        _ => glsa_encode::<ChaCha8Rng>(tape, &model.store, &model.encoder, slot, x, mask, None),
    }
}

/// Everything slot-level scoring needs for one utterance of one turn.
pub struct TurnEncoding {
    pub h_utt: VarId,
    pub c_utt: VarId,
    pub utt_mask: Vec<bool>,
    /// Action contexts, sentinel last.
    pub act_contexts: Vec<VarId>,
}

/// Encode one utterance and the previous system actions with respect to a
/// slot. The sentinel's context is appended after the real actions.
pub fn encode_turn(
    tape: &mut Tape,
    model: &Model,
    slot: &str,
    utterance: &[usize],
    system_acts: &[Vec<usize>],
    mut noise: Option<&mut Noise<'_>>,
) -> Result<TurnEncoding> {
    let utt_mask = vec![true; utterance.len()];
    let x_utt = embed_seq(tape, model, utterance, noise.as_deref_mut(), true)?;
    let utt = encode_seq(tape, model, slot, x_utt, &utt_mask, &mut noise)?;

    let mut act_contexts = Vec::with_capacity(system_acts.len() + 1);
    for act in system_acts {
        let mask = vec![true; act.len()];
        let x = embed_seq(tape, model, act, noise.as_deref_mut(), false)?;
        let enc = encode_seq(tape, model, slot, x, &mask, &mut noise)?;
        act_contexts.push(enc.c);
    }
    // sentinel: a learned pseudo-action run through the same encoder
    let sent = tape.param(&model.store, model.scoring.sentinel);
    let sent_x = tape.reshape(sent, vec![1, model.embedding.d_emb]);
    let sent_enc = encode_seq(tape, model, slot, sent_x, &[true], &mut noise)?;
    act_contexts.push(sent_enc.c);

    Ok(TurnEncoding { h_utt: utt.h, c_utt: utt.c, utt_mask, act_contexts })
}

/// Encode a candidate slot-value pair; returns its context vector.
pub fn encode_value(
    tape: &mut Tape,
    model: &Model,
    slot: &str,
    value: &str,
    mut noise: Option<&mut Noise<'_>>,
) -> Result<VarId> {
    let tokens = slot_value_tokens(slot, value);
    let indices = model.vocab.encode(&tokens);
    let mask = vec![true; indices.len()];
    let x = embed_seq(tape, model, &indices, noise.as_deref_mut(), false)?;
    let enc = encode_seq(tape, model, slot, x, &mask, &mut noise)?;
    Ok(enc.c)
}

/// Utterance score: attend over H^utt using the value context, then apply
/// the slot's affine head.
pub fn score_utterance(
    tape: &mut Tape,
    model: &Model,
    head: &ScoringHead,
    h_utt: VarId,
    utt_mask: &[bool],
    c_val: VarId,
) -> Result<VarId> {
    mask_len(utt_mask)?;
    let scores = tape.rows_dot_vec(h_utt, c_val);
    let probs = tape.masked_softmax_op(scores, utt_mask)?;
    let q = tape.weighted_rows(probs, h_utt);
    let w = tape.param(&model.store, head.w);
    let b = tape.param(&model.store, head.b);
    let wq = tape.dot(w, q);
    Ok(tape.add(wq, b))
}

/// Action score: attend over action contexts (sentinel included) using the
/// utterance context, then compare with the value context.
pub fn score_actions(
    tape: &mut Tape,
    act_contexts: &[VarId],
    c_utt: VarId,
    c_val: VarId,
) -> Result<VarId> {
    assert!(!act_contexts.is_empty(), "sentinel guarantees at least one action context");
    let c_mat = tape.stack_vecs(act_contexts);
    let scores = tape.rows_dot_vec(c_mat, c_utt);
    let mask = vec![true; act_contexts.len()];
    let probs = tape.masked_softmax_op(scores, &mask)?;
    let q = tape.weighted_rows(probs, c_mat);
    Ok(tape.dot(q, c_val))
}

/// Pre-sigmoid combination: y^utt + w * y^act.
pub fn combined_logit(
    tape: &mut Tape,
    model: &Model,
    head: &ScoringHead,
    y_utt: VarId,
    y_act: VarId,
) -> VarId {
    let w = tape.param(&model.store, head.w_act);
    let weighted = tape.mul(w, y_act);
    tape.add(y_utt, weighted)
}

/// Final probability for one candidate: sigmoid of the combined logit.
pub fn combine(
    tape: &mut Tape,
    model: &Model,
    head: &ScoringHead,
    y_utt: VarId,
    y_act: VarId,
) -> VarId {
    let logit = combined_logit(tape, model, head, y_utt, y_act);
    tape.sigmoid_op(logit)
}

/// Score one candidate value against an already-encoded turn.
pub fn score_candidate(
    tape: &mut Tape,
    model: &Model,
    slot: &str,
    enc: &TurnEncoding,
    c_val: VarId,
) -> Result<VarId> {
    let head = model.head(slot)?;
    let y_utt = score_utterance(tape, model, head, enc.h_utt, &enc.utt_mask, c_val)?;
    let y_act = score_actions(tape, &enc.act_contexts, enc.c_utt, c_val)?;
    Ok(combined_logit(tape, model, head, y_utt, y_act))
}
