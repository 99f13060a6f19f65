//! Embedding table management: random init, loading/saving text-format
//! pretrained tables, and word dropout.
//!
//! The `<pad>` row is pinned to zero and never receives updates. Pretrained
//! tables are frozen; randomly initialized ones are trainable.

use crate::error::{DstError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, PAD_INDEX};
use rand::Rng;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub d_emb: usize,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Uniform init in [-0.1, 0.1], trainable. The <pad> row stays zero.
    pub fn random(
        store: &mut ParamStore,
        vocab: &Vocabulary,
        d_emb: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut data = vec![0.0; vocab.len() * d_emb];
        for (i, v) in data.iter_mut().enumerate() {
            if i / d_emb != PAD_INDEX {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        let t = Tensor::matrix(vocab.len(), d_emb, data).unwrap();
        let param = store.add("embedding", t, true);
        EmbeddingTable { param, d_emb, trainable: true }
    }

    /// Build from one or more pretrained tables; multiple tables are
    /// column-stacked. Tokens missing from a table get uniform random
    /// columns. The result is frozen.
    pub fn pretrained(
        store: &mut ParamStore,
        vocab: &Vocabulary,
        tables: &[PretrainedTable],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if tables.is_empty() {
            return Err(DstError::Config("no pretrained tables given".into()));
        }
        let d_emb: usize = tables.iter().map(|t| t.dim).sum();
        let mut data = vec![0.0; vocab.len() * d_emb];
        for row in 0..vocab.len() {
            if row == PAD_INDEX {
                continue;
            }
            let token = vocab.token(row);
            let mut col = 0;
            for table in tables {
                match table.vectors.get(token) {
                    Some(vec) => {
                        data[row * d_emb + col..row * d_emb + col + table.dim].copy_from_slice(vec);
                    }
                    None => {
                        for j in 0..table.dim {
                            data[row * d_emb + col + j] = rng.gen_range(-0.1..0.1);
                        }
                    }
                }
                col += table.dim;
            }
        }
        let t = Tensor::matrix(vocab.len(), d_emb, data).unwrap();
        let param = store.add("embedding", t, false);
        Ok(EmbeddingTable { param, d_emb, trainable: false })
    }

    /// Pure row lookup, matching the table exactly.
    pub fn embed(&self, store: &ParamStore, indices: &[usize]) -> Result<Tensor> {
        let table = store.get(self.param);
        let mut data = Vec::with_capacity(indices.len() * self.d_emb);
        for &i in indices {
            if i >= table.rows() {
                return Err(DstError::IndexOutOfBounds { index: i, rows: table.rows() });
            }
            data.extend_from_slice(table.row(i));
        }
        Tensor::matrix(indices.len(), self.d_emb, data)
    }

    /// Zero the <pad> row's gradient so it never drifts from zero.
    pub fn sanitize_grads(&self, grads: &mut crate::params::Gradients) {
        if let Some(g) = grads.get_mut(self.param) {
            for v in g.row_mut(PAD_INDEX) {
                *v = 0.0;
            }
        }
    }
}

/// Word dropout: zero whole rows with probability `p`, no rescaling.
pub fn word_dropout(x: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let mask = word_dropout_mask(x.rows(), x.cols(), p, rng)?;
    let data: Vec<f64> = x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// The 0/1 row mask behind `word_dropout`, usable as a tape constant.
pub fn word_dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(DstError::Config(format!("word dropout rate must be in [0,1), got {p}")));
    }
    let mut data = vec![1.0; rows * cols];
    for r in 0..rows {
        if rng.gen::<f64>() < p {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v = 0.0;
            }
        }
    }
    Tensor::matrix(rows, cols, data)
}

/// Standard inverted dropout mask: entries are 0 or 1/(1-p).
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(DstError::Config(format!("dropout rate must be in [0,1), got {p}")));
    }
    let scale = 1.0 / (1.0 - p);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    Tensor::matrix(rows, cols, data)
}

#[derive(Debug, Clone)]
pub struct PretrainedTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Parse a text-format embedding file: one token per line followed by its
/// space-separated float components.
pub fn load_embedding_file(path: &Path) -> Result<PretrainedTable> {
    let file = std::fs::File::open(path)
        .map_err(|e| DstError::io(format!("opening embedding file {}", path.display()), e))?;
    let reader = std::io::BufReader::new(file);
    let mut vectors = HashMap::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DstError::io("reading embedding file", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| DstError::parse(path.display().to_string(), format!("line {}: empty", lineno + 1)))?
            .to_string();
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let values = values.map_err(|e| {
            DstError::parse(path.display().to_string(), format!("line {}: {e}", lineno + 1))
        })?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(DstError::parse(
                    path.display().to_string(),
                    format!("line {}: expected {d} components, got {}", lineno + 1, values.len()),
                ));
            }
            _ => {}
        }
        vectors.insert(token, values);
    }
    let dim = dim.ok_or_else(|| DstError::parse(path.display().to_string(), "empty file"))?;
    Ok(PretrainedTable { dim, vectors })
}

/// Write the table rows for every vocabulary token (except <pad>/<unk>).
pub fn save_embedding_file(
    path: &Path,
    store: &ParamStore,
    table: &EmbeddingTable,
    vocab: &Vocabulary,
) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| DstError::io(format!("creating {}", path.display()), e))?;
    let t = store.get(table.param);
    for row in 2..vocab.len() {
        let mut line = vocab.token(row).to_string();
        for v in t.row(row) {
            line.push(' ');
            line.push_str(&format!("{v:.17e}"));
        }
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| DstError::io("writing embeddings", e))?;
    }
    Ok(())
}
