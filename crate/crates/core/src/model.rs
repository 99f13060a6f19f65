//! The full tracker model: embedding table, encoder parameters, per-slot
//! scoring heads, and the sentinel action, plus checkpoint (de)serialization.

use crate::data::Ontology;
use crate::embedding::{EmbeddingTable, PretrainedTable};
use crate::encoder::{Ablation, EncoderParams};
use crate::error::{DstError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_rnn: usize,
    pub ablation: Ablation,
    pub frozen_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_emb: 50, d_rnn: 100, ablation: Ablation::Full, frozen_embeddings: false }
    }
}

#[derive(Debug, Clone)]
pub struct ScoringHead {
    pub w: ParamId,
    pub b: ParamId,
    pub w_act: ParamId,
}

#[derive(Debug, Clone)]
pub struct ScoringParams {
    pub heads: BTreeMap<String, ScoringHead>,
    /// One learned pseudo-action embedding, shared across slots.
    pub sentinel: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub ontology: Ontology,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub encoder: EncoderParams,
    pub scoring: ScoringParams,
}

impl Model {
    pub fn new(
        ontology: Ontology,
        vocab: Vocabulary,
        config: ModelConfig,
        rng: &mut impl Rng,
        pretrained: Option<&[PretrainedTable]>,
    ) -> Result<Self> {
        ontology.validate()?;
        let mut store = ParamStore::new();
        let embedding = match pretrained {
            Some(tables) => {
                let table = EmbeddingTable::pretrained(&mut store, &vocab, tables, rng)?;
                if table.d_emb != config.d_emb {
                    return Err(DstError::Config(format!(
                        "pretrained embeddings have dimension {}, config says {}",
                        table.d_emb, config.d_emb
                    )));
                }
                table
            }
            None => EmbeddingTable::random(&mut store, &vocab, config.d_emb, rng),
        };
        let slots = ontology.slots();
        let encoder = EncoderParams::init(
            &mut store,
            config.d_emb,
            config.d_rnn,
            config.ablation,
            &slots,
            rng,
        )?;
        let d_out = encoder.d_out();
        let mut heads = BTreeMap::new();
        let mut ordered = slots.clone();
        ordered.sort();
        for slot in &ordered {
            let bound = 1.0 / (d_out as f64).sqrt();
            let w_data: Vec<f64> = (0..d_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let w = store.add(format!("score.{slot}.w"), Tensor::vector(w_data), true);
            let b = store.add(format!("score.{slot}.b"), Tensor::scalar(0.0), true);
            let w_act = store.add(format!("score.{slot}.w_act"), Tensor::scalar(0.0), true);
            heads.insert(slot.clone(), ScoringHead { w, b, w_act });
        }
        let sentinel =
            store.add("score.sentinel", Tensor::vector(vec![0.0; config.d_emb]), true);
        let scoring = ScoringParams { heads, sentinel };
        Ok(Model { config, vocab, ontology, store, embedding, encoder, scoring })
    }

    pub fn head(&self, slot: &str) -> Result<&ScoringHead> {
        self.scoring.heads.get(slot).ok_or_else(|| DstError::UnknownSlot(slot.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params: Vec<CheckpointParam> = self
            .store
            .ids()
            .map(|id| CheckpointParam {
                name: self.store.name(id).to_string(),
                shape: self.store.get(id).shape().to_vec(),
                data: self.store.get(id).data().to_vec(),
            })
            .collect();
        let ckpt = Checkpoint {
            version: 1,
            config: self.config,
            vocab: self.vocab.tokens().to_vec(),
            ontology: self.ontology.clone(),
            params,
        };
        let text = serde_json::to_string(&ckpt)
            .map_err(|e| DstError::Data(format!("serializing checkpoint: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| DstError::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DstError::io(format!("reading checkpoint {}", path.display()), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| DstError::parse(path.display().to_string(), e.to_string()))?;
        if ckpt.version != 1 {
            return Err(DstError::Data(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let vocab = Vocabulary::from_tokens(ckpt.vocab)?;
        // Rebuild the parameter layout, then overwrite tensor contents.
        let mut cfg = ckpt.config;
        let frozen = cfg.frozen_embeddings;
        cfg.frozen_embeddings = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(ckpt.ontology, vocab, cfg, &mut rng, None)?;
        if frozen {
            model.config.frozen_embeddings = true;
            model.embedding.trainable = false;
            model.store.set_trainable(model.embedding.param, false);
        }
        if ckpt.params.len() != model.store.len() {
            return Err(DstError::Data(format!(
                "checkpoint has {} params, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for (id, p) in (0..model.store.len()).zip(&ckpt.params) {
            if model.store.name(id) != p.name {
                return Err(DstError::Data(format!(
                    "checkpoint param order mismatch: {} vs {}",
                    p.name,
                    model.store.name(id)
                )));
            }
            let t = Tensor::new(p.shape.clone(), p.data.clone())?;
            if !t.same_shape(model.store.get(id)) {
                return Err(DstError::ShapeMismatch {
                    expected: model.store.get(id).shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            *model.store.get_mut(id) = t;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    ontology: Ontology,
    params: Vec<CheckpointParam>,
}
