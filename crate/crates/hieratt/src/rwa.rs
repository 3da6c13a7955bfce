//! Region-word attention: the explainer's scorer.
//!
//! Caption words are vectorized by a bidirectional GRU over their
//! embeddings, regions by the (independent) visual encoder. Each pair is
//! scored v . tanh(u r_i + w w_j) and every region's scores are softmaxed
//! over the words, giving the row-stochastic relevance matrix P(w_j | r_i).

use crate::encoder::BBox;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{gru_cell_batched, GruNodes, GruParams, NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RwaConfig {
    /// Region vector dimension d_r.
    pub region_dim: usize,
    /// Bi-GRU hidden size per direction; the word vector is the
    /// concatenation of both, d_w = 2 * word_hidden.
    pub word_hidden: usize,
    /// Scorer dimension shared by u, w and v.
    pub score_dim: usize,
    /// Word embedding dimension fed to the Bi-GRU (matches the
    /// generator's embedding so the tables are interchangeable).
    pub embed_dim: usize,
    pub vocab_size: usize,
}

impl Default for RwaConfig {
    fn default() -> Self {
        RwaConfig { region_dim: 64, word_hidden: 32, score_dim: 32, embed_dim: 32, vocab_size: 0 }
    }
}

impl RwaConfig {
    pub fn word_dim(&self) -> usize {
        2 * self.word_hidden
    }
}

/// Scorer parameters: u projects regions, w projects words, v scales the
/// tanh combination; one GRU per direction plus the word embedding table.
#[derive(Clone)]
pub struct RwaParams {
    pub cfg: RwaConfig,
    pub u: Tensor, // [score_dim, region_dim]
    pub w: Tensor, // [score_dim, word_dim]
    pub v: Tensor, // [score_dim]
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub embedding: Tensor, // [vocab, embed_dim]
}

impl RwaParams {
    pub fn init(cfg: RwaConfig, rng: &mut SplitMix64) -> Result<Self> {
        if cfg.vocab_size == 0 {
            return Err(Error::invalid("rwa_config", "vocab_size must be set".to_string()));
        }
        Ok(RwaParams {
            u: Tensor::randn_fan_in(&[cfg.score_dim, cfg.region_dim], cfg.region_dim, rng),
            w: Tensor::randn_fan_in(&[cfg.score_dim, cfg.word_dim()], cfg.word_dim(), rng),
            v: Tensor::randn_fan_in(&[cfg.score_dim], cfg.score_dim, rng),
            gru_fwd: GruParams::init(cfg.embed_dim, cfg.word_hidden, rng),
            gru_bwd: GruParams::init(cfg.embed_dim, cfg.word_hidden, rng),
            embedding: Tensor::randn(&[cfg.vocab_size, cfg.embed_dim], 0.1, rng),
            cfg,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("u".to_string(), &self.u),
            ("w".to_string(), &self.w),
            ("v".to_string(), &self.v),
            ("embedding".to_string(), &self.embedding),
        ];
        for (n, t) in self.gru_fwd.named_tensors() {
            out.push((format!("gru_fwd.{n}"), t));
        }
        for (n, t) in self.gru_bwd.named_tensors() {
            out.push((format!("gru_bwd.{n}"), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("u".to_string(), &mut self.u),
            ("w".to_string(), &mut self.w),
            ("v".to_string(), &mut self.v),
            ("embedding".to_string(), &mut self.embedding),
        ];
        for (n, t) in self.gru_fwd.named_tensors_mut() {
            out.push((format!("gru_fwd.{n}"), t));
        }
        for (n, t) in self.gru_bwd.named_tensors_mut() {
            out.push((format!("gru_bwd.{n}"), t));
        }
        out
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> RwaNodes {
        RwaNodes {
            u: tape.leaf(&self.u, requires_grad),
            w: tape.leaf(&self.w, requires_grad),
            v: tape.leaf(&self.v, requires_grad),
            gru_fwd: GruNodes::register(tape, &self.gru_fwd, requires_grad),
            gru_bwd: GruNodes::register(tape, &self.gru_bwd, requires_grad),
            embedding: tape.leaf(&self.embedding, requires_grad),
        }
    }
}

pub struct RwaNodes {
    pub u: NodeId,
    pub w: NodeId,
    pub v: NodeId,
    pub gru_fwd: GruNodes,
    pub gru_bwd: GruNodes,
    pub embedding: NodeId,
}

impl RwaNodes {
    /// Ids in `RwaParams::named_tensors` order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.u, self.w, self.v, self.embedding];
        out.extend(self.gru_fwd.ids());
        out.extend(self.gru_bwd.ids());
        out
    }
}

/// Row-stochastic n-regions x k-words matrix of P(w_j | r_i), with the
/// boxes and word strings it scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelevanceMatrix {
    pub values: Vec<f64>,
    pub n_regions: usize,
    pub n_words: usize,
    pub boxes: Vec<BBox>,
    pub words: Vec<String>,
}

impl RelevanceMatrix {
    /// Rows must be approximately stochastic. The tolerance (1e-2) admits
    /// matrices transcribed from rounded presentations; freshly computed
    /// rows are exact to 1e-6 and tested as such.
    pub fn new(
        values: Vec<f64>,
        n_regions: usize,
        n_words: usize,
        boxes: Vec<BBox>,
        words: Vec<String>,
    ) -> Result<Self> {
        if values.len() != n_regions * n_words || boxes.len() != n_regions || words.len() != n_words
        {
            return Err(Error::shape(
                "relevance_matrix",
                format!(
                    "{} values, {} boxes, {} words for {n_regions}x{n_words}",
                    values.len(),
                    boxes.len(),
                    words.len()
                ),
            ));
        }
        for (i, row) in values.chunks_exact(n_words).enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(
                    "relevance_matrix",
                    format!("row {i} has entries outside [0,1]"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-2 {
                return Err(Error::invalid(
                    "relevance_matrix",
                    format!("row {i} sums to {s}, not ~1"),
                ));
            }
        }
        Ok(RelevanceMatrix { values, n_regions, n_words, boxes, words })
    }

    pub fn get(&self, region: usize, word: usize) -> f64 {
        self.values[region * self.n_words + word]
    }

    pub fn row(&self, region: usize) -> &[f64] {
        &self.values[region * self.n_words..(region + 1) * self.n_words]
    }
}

/// Bidirectional GRU over embedded tokens: word j is the concatenation of
/// the forward state after reading tokens 0..=j and the backward state
/// after reading tokens k-1..=j. Returns [k, 2*hidden].
pub fn encode_words_bidir(
    tape: &mut Tape,
    nodes: &RwaNodes,
    embedding: NodeId,
    token_ids: &[usize],
) -> Result<NodeId> {
    if token_ids.is_empty() {
        return Err(Error::Empty("encode_words_bidir"));
    }
    let k = token_ids.len();
    let embedded = tape.embedding_lookup(embedding, token_ids)?; // [k, E]
    let e = tape.shape(embedded)[1];
    let hidden = tape.shape(nodes.gru_fwd.w_update)[0];

    let step_inputs: Vec<NodeId> = (0..k)
        .map(|j| {
            let x = tape.gather(embedded, &(j * e..(j + 1) * e).collect::<Vec<_>>())?;
            tape.reshape(x, vec![1, e])
        })
        .collect::<Result<_>>()?;

    let mut fwd = Vec::with_capacity(k);
    let mut h = tape.constant(vec![0.0; hidden], vec![1, hidden]);
    for &x in &step_inputs {
        h = gru_cell_batched(tape, x, h, &nodes.gru_fwd)?;
        fwd.push(h);
    }
    let mut bwd = vec![NodeId(0); k];
    let mut hb = tape.constant(vec![0.0; hidden], vec![1, hidden]);
    for j in (0..k).rev() {
        hb = gru_cell_batched(tape, step_inputs[j], hb, &nodes.gru_bwd)?;
        bwd[j] = hb;
    }
    let rows: Vec<NodeId> =
        (0..k).map(|j| tape.concat(&[fwd[j], bwd[j]], 1)).collect::<Result<_>>()?;
    tape.concat(&rows, 0) // [k, 2*hidden]
}

/// Pre-softmax pair scores v . tanh(u r_i + w w_j) as an [n, k] node.
pub fn relevance_scores(
    tape: &mut Tape,
    nodes: &RwaNodes,
    region_vecs: NodeId,
    word_vecs: NodeId,
) -> Result<NodeId> {
    let rsh = tape.shape(region_vecs).to_vec();
    let wsh = tape.shape(word_vecs).to_vec();
    if rsh.len() != 2 || wsh.len() != 2 {
        return Err(Error::shape("relevance_matrix", format!("regions {rsh:?}, words {wsh:?}")));
    }
    let (n, k) = (rsh[0], wsh[0]);
    let ut = tape.transpose(nodes.u)?; // [d_r, d_a]
    let wt = tape.transpose(nodes.w)?; // [d_w, d_a]
    let ur = tape.matmul(region_vecs, ut)?; // [n, d_a]
    let ww = tape.matmul(word_vecs, wt)?; // [k, d_a]
    let da = tape.shape(ur)[1];
    let ur3 = tape.reshape(ur, vec![n, 1, da])?;
    let ww3 = tape.reshape(ww, vec![1, k, da])?;
    let sums = tape.add(ur3, ww3)?; // [n, k, d_a]
    let tanh = tape.tanh(sums)?;
    let flat = tape.reshape(tanh, vec![n * k, da])?;
    let v2 = tape.reshape(nodes.v, vec![da, 1])?;
    let scores = tape.matmul(flat, v2)?; // [n*k, 1]
    tape.reshape(scores, vec![n, k])
}

/// Scores softmaxed over words for each region: the relevance rows.
pub fn relevance_rows(tape: &mut Tape, scores: NodeId) -> Result<NodeId> {
    tape.softmax(scores)
}

/// Non-graph convenience: score region vectors against caption words and
/// package the result.
pub fn relevance_matrix_value(
    params: &RwaParams,
    region_vecs: &[Vec<f64>],
    boxes: &[BBox],
    word_ids: &[usize],
    words: &[String],
) -> Result<RelevanceMatrix> {
    if region_vecs.is_empty() {
        return Err(Error::Empty("relevance_matrix"));
    }
    if word_ids.is_empty() {
        return Err(Error::Empty("relevance_matrix"));
    }
    let n = region_vecs.len();
    let d = region_vecs[0].len();
    if region_vecs.iter().any(|r| r.len() != d) || d != params.cfg.region_dim {
        return Err(Error::shape(
            "relevance_matrix",
            format!("region vectors must all be {}-d", params.cfg.region_dim),
        ));
    }
    let mut tape = Tape::inference();
    let nodes = params.register(&mut tape, false);
    let flat: Vec<f64> = region_vecs.iter().flatten().copied().collect();
    let rv = tape.constant(flat, vec![n, d]);
    let wv = encode_words_bidir(&mut tape, &nodes, nodes.embedding, word_ids)?;
    let scores = relevance_scores(&mut tape, &nodes, rv, wv)?;
    let rows = relevance_rows(&mut tape, scores)?;
    RelevanceMatrix::new(
        tape.data(rows).to_vec(),
        n,
        word_ids.len(),
        boxes.to_vec(),
        words.to_vec(),
    )
}
