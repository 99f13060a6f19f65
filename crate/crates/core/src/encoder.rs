//! The global-locally self-attentive encoder: a global BiLSTM shared across
//! slots and a per-slot local BiLSTM, mixed by a learned per-slot gate,
//! followed by global and local self-attention over the mixed encoding.
//!
//! Ablation variants swap pieces out: gate pinned to either end, mean
//! pooling instead of attention, or attention directly over embeddings.

use crate::error::{DstError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Local modules only (gate pinned to 1).
    NoGlobal,
    /// Global modules only (gate pinned to 0).
    NoLocal,
    /// Mean pooling instead of self-attention.
    NoSelfAttn,
    /// Self-attention directly over word embeddings.
    NoLstm,
}

impl std::str::FromStr for Ablation {
    type Err = DstError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-global" => Ok(Ablation::NoGlobal),
            "no-local" => Ok(Ablation::NoLocal),
            "no-selfattn" => Ok(Ablation::NoSelfAttn),
            "no-lstm" => Ok(Ablation::NoLstm),
            other => Err(DstError::Config(format!("unknown ablation mode: {other}"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Ablation::Full => "full",
            Ablation::NoGlobal => "no-global",
            Ablation::NoLocal => "no-local",
            Ablation::NoSelfAttn => "no-selfattn",
            Ablation::NoLstm => "no-lstm",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmIds {
    pub wx_f: ParamId,
    pub wh_f: ParamId,
    pub b_f: ParamId,
    pub wx_b: ParamId,
    pub wh_b: ParamId,
    pub b_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct AttnIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Default)]
pub struct SlotModules {
    pub lstm: Option<BiLstmIds>,
    pub attn: Option<AttnIds>,
    /// Raw gate scalar; the effective mixture weight is sigmoid(gate).
    pub gate: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub d_emb: usize,
    pub d_rnn: usize,
    pub ablation: Ablation,
    pub global_lstm: Option<BiLstmIds>,
    pub global_attn: Option<AttnIds>,
    pub locals: BTreeMap<String, SlotModules>,
}

fn init_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn init_vector(rng: &mut impl Rng, len: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::vector((0..len).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn init_bilstm(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> BiLstmIds {
    let bias = || {
        // forget gate bias starts at 1.0
        let mut b = vec![0.0; 4 * hidden];
        for v in &mut b[hidden..2 * hidden] {
            *v = 1.0;
        }
        Tensor::vector(b)
    };
    let wx_f = store.add(format!("{prefix}.wx_f"), init_matrix(rng, 4 * hidden, d_in), true);
    let wh_f = store.add(format!("{prefix}.wh_f"), init_matrix(rng, 4 * hidden, hidden), true);
    let b_f = store.add(format!("{prefix}.b_f"), bias(), true);
    let wx_b = store.add(format!("{prefix}.wx_b"), init_matrix(rng, 4 * hidden, d_in), true);
    let wh_b = store.add(format!("{prefix}.wh_b"), init_matrix(rng, 4 * hidden, hidden), true);
    let b_b = store.add(format!("{prefix}.b_b"), bias(), true);
    BiLstmIds { wx_f, wh_f, b_f, wx_b, wh_b, b_b }
}

fn init_attn(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> AttnIds {
    let w = store.add(format!("{prefix}.w"), init_vector(rng, dim, dim), true);
    let b = store.add(format!("{prefix}.b"), Tensor::scalar(0.0), true);
    AttnIds { w, b }
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        d_emb: usize,
        d_rnn: usize,
        ablation: Ablation,
        slots: &[String],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_rnn % 2 != 0 {
            return Err(DstError::Config(format!("d_rnn must be even, got {d_rnn}")));
        }
        let hidden = d_rnn / 2;
        let d_out = if ablation == Ablation::NoLstm { d_emb } else { d_rnn };

        let use_global = ablation != Ablation::NoGlobal;
        let use_local = ablation != Ablation::NoLocal;
        let use_lstm = ablation != Ablation::NoLstm;
        let use_attn = ablation != Ablation::NoSelfAttn;
        let use_gate = use_global && use_local;

        let global_lstm = (use_global && use_lstm)
            .then(|| init_bilstm(store, "enc.global.lstm", d_emb, hidden, rng));
        let global_attn =
            (use_global && use_attn).then(|| init_attn(store, "enc.global.attn", d_out, rng));

        let mut locals = BTreeMap::new();
        let mut ordered: Vec<&String> = slots.iter().collect();
        ordered.sort();
        for slot in ordered {
            let mut modules = SlotModules::default();
            if use_local && use_lstm {
                modules.lstm =
                    Some(init_bilstm(store, &format!("enc.local.{slot}.lstm"), d_emb, hidden, rng));
            }
            if use_local && use_attn {
                modules.attn = Some(init_attn(store, &format!("enc.local.{slot}.attn"), d_out, rng));
            }
            if use_gate {
                // sigmoid(0) = 0.5: start as an even mixture
                modules.gate = Some(store.add(format!("enc.gate.{slot}"), Tensor::scalar(0.0), true));
            }
            locals.insert(slot.clone(), modules);
        }
        Ok(EncoderParams { d_emb, d_rnn, ablation, global_lstm, global_attn, locals })
    }

    /// Output dimension of the encoding (d_rnn, or d_emb without LSTMs).
    pub fn d_out(&self) -> usize {
        if self.ablation == Ablation::NoLstm {
            self.d_emb
        } else {
            self.d_rnn
        }
    }

    pub fn slot(&self, slot: &str) -> Result<&SlotModules> {
        self.locals.get(slot).ok_or_else(|| DstError::UnknownSlot(slot.to_string()))
    }
}

pub struct EncoderOutput {
    /// Token-level encoding, n x d_out.
    pub h: VarId,
    /// Self-attention summary context, d_out.
    pub c: VarId,
}

/// True sequence length from a padding mask; padding must be a suffix.
pub fn mask_len(mask: &[bool]) -> Result<usize> {
    let len = mask.iter().take_while(|&&m| m).count();
    if mask[len..].iter().any(|&m| m) {
        return Err(DstError::Data("padding mask must be contiguous".into()));
    }
    if len == 0 {
        return Err(DstError::EmptySequence);
    }
    Ok(len)
}

/// Run a BiLSTM over `x`, padded rows coming out as zeros.
pub fn bilstm(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &BiLstmIds,
    x: VarId,
    mask: &[bool],
) -> Result<VarId> {
    let len = mask_len(mask)?;
    let wx_f = tape.param(store, ids.wx_f);
    let wh_f = tape.param(store, ids.wh_f);
    let b_f = tape.param(store, ids.b_f);
    let wx_b = tape.param(store, ids.wx_b);
    let wh_b = tape.param(store, ids.wh_b);
    let b_b = tape.param(store, ids.b_b);
    tape.bilstm(x, wx_f, wh_f, b_f, wx_b, wh_b, b_b, len)
}

/// Additive self-attention: scores, masked probabilities, and context.
pub fn self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &AttnIds,
    h: VarId,
    mask: &[bool],
) -> Result<(VarId, VarId, VarId)> {
    let w = tape.param(store, ids.w);
    let b = tape.param(store, ids.b);
    let scores = tape.attn_scores(h, w, b);
    let probs = tape.masked_softmax_op(scores, mask)?;
    let context = tape.weighted_rows(probs, h);
    Ok((scores, probs, context))
}

/// Optional dropout applied to branch outputs during training.
pub struct EncoderDropout<'r, R: Rng> {
    pub rng: &'r mut R,
    pub rate: f64,
}

/// Encode a sequence with respect to `slot`: mixed BiLSTM encoding plus the
/// mixed self-attention context.
pub fn glsa_encode<R: Rng>(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderParams,
    slot: &str,
    x: VarId,
    mask: &[bool],
    mut dropout: Option<&mut EncoderDropout<'_, R>>,
) -> Result<EncoderOutput> {
    let modules = enc.slot(slot)?;
    let gate = modules.gate.map(|g| {
        let raw = tape.param(store, g);
        tape.sigmoid_op(raw)
    });

    let mut apply_dropout = |tape: &mut Tape, h: VarId| -> Result<VarId> {
        match dropout.as_deref_mut() {
            Some(d) if d.rate > 0.0 => {
                let t = tape.value(h);
                let mask_t =
                    crate::embedding::dropout_mask(t.rows(), t.cols(), d.rate, d.rng)?;
                Ok(tape.mul_const(h, mask_t))
            }
            _ => Ok(h),
        }
    };

    // token-level encoding
    let h = match enc.ablation {
        Ablation::NoLstm => x,
        Ablation::NoGlobal => {
            let hs = bilstm(tape, store, modules.lstm.as_ref().unwrap(), x, mask)?;
            apply_dropout(tape, hs)?
        }
        Ablation::NoLocal => {
            let hg = bilstm(tape, store, enc.global_lstm.as_ref().unwrap(), x, mask)?;
            apply_dropout(tape, hg)?
        }
        Ablation::Full | Ablation::NoSelfAttn => {
            let hg = bilstm(tape, store, enc.global_lstm.as_ref().unwrap(), x, mask)?;
            let hg = apply_dropout(tape, hg)?;
            let hs = bilstm(tape, store, modules.lstm.as_ref().unwrap(), x, mask)?;
            let hs = apply_dropout(tape, hs)?;
            tape.mix(gate.unwrap(), hs, hg)
        }
    };

    // summary context
    let c = match enc.ablation {
        Ablation::NoSelfAttn => tape.mean_rows(h, mask)?,
        Ablation::NoGlobal => {
            let (_, _, cs) = self_attention(tape, store, modules.attn.as_ref().unwrap(), h, mask)?;
            cs
        }
        Ablation::NoLocal => {
            let (_, _, cg) = self_attention(tape, store, enc.global_attn.as_ref().unwrap(), h, mask)?;
            cg
        }
        Ablation::Full | Ablation::NoLstm => {
            let (_, _, cg) = self_attention(tape, store, enc.global_attn.as_ref().unwrap(), h, mask)?;
            let (_, _, cs) = self_attention(tape, store, modules.attn.as_ref().unwrap(), h, mask)?;
            tape.mix(gate.unwrap(), cs, cg)
        }
    };

    Ok(EncoderOutput { h, c })
}

/// No-dropout marker for inference-time encoding calls.
pub fn no_dropout() -> Option<&'static mut EncoderDropout<'static, rand_chacha::ChaCha8Rng>> {
    None
}
