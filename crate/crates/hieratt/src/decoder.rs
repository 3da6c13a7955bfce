//! Caption generator: token embedding, a stack of causal 1-D conv layers,
//! per-layer multi-head attention over the visual grid, hierarchical
//! attention gates, and the prediction head.
//!
//! Layer l takes the token stream X [N,E] (N = batch x time positions) and
//! the per-position modulated feature map fm = fm0 ⊙ cumulative gates:
//!
//! ```text
//! C    = elu(causal_conv(X))
//! ctx  = multi-head attention(fm, C)            per position
//! s'   = gru(concat(ctx, C), s)                 state flows up the layers
//! g    = sigmoid(W_g s'), o = W_o s'
//! cg'  = cg ⊙ g                                  (the "dot map")
//! X'   = X + C + o
//! ```
//!
//! Nothing recurs along time, so teacher-forced training computes all
//! positions in one pass, while decoding replays single positions against
//! ring buffers of the last K-1 layer inputs.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{gru_cell_batched, GruNodes, GruParams, NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub visual_channels: usize,
    pub heads: usize,
    pub attn_dim: usize,
    pub gate_hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 6,
            kernel: 3,
            embed_dim: 32,
            vocab_size: 0, // set from the dataset vocabulary
            visual_channels: 64,
            heads: 2,
            attn_dim: 16,
            gate_hidden: 128,
            max_len: 16,
            dropout: 0.1,
        }
    }
}

impl DecoderConfig {
    /// Paper-reported dimensions (2048 visual channels, 300-d embedding,
    /// 512 gate hidden, 9489-word dictionary).
    pub fn paper_scale() -> Self {
        DecoderConfig {
            layers: 6,
            kernel: 3,
            embed_dim: 300,
            vocab_size: 9489,
            visual_channels: 2048,
            heads: 2,
            attn_dim: 64,
            gate_hidden: 512,
            max_len: 16,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.kernel < 2 || self.vocab_size == 0 {
            return Err(Error::invalid(
                "decoder_config",
                format!(
                    "layers {} (>=1), kernel {} (>=2), vocab {} (>0)",
                    self.layers, self.kernel, self.vocab_size
                ),
            ));
        }
        Ok(())
    }

    /// Gate GRU input width: visual context concatenated with the concept.
    pub fn gate_input(&self) -> usize {
        self.visual_channels + self.embed_dim
    }

    /// Past tokens that can influence one output: 1 + L(K-1).
    pub fn receptive_field(&self) -> usize {
        1 + self.layers * (self.kernel - 1)
    }

    fn pred_hidden(&self) -> usize {
        2 * self.embed_dim
    }
}

#[derive(Clone)]
pub struct LayerParams {
    pub conv_kernel: Tensor, // [E, E, K]
    pub conv_bias: Tensor,   // [E]
    pub attn_q: Vec<Tensor>, // per head [d_a, E]
    pub attn_k: Vec<Tensor>, // per head [d_a, V]
    pub attn_out: Tensor,    // [H*V, V]
    pub gate_gru: GruParams, // input V+E, hidden G
    pub gate_w: Tensor,      // [G, V]
    pub gate_b: Tensor,      // [V]
    pub concept_w: Tensor,   // [G, E]
    pub concept_b: Tensor,   // [E]
}

#[derive(Clone)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    pub embedding: Tensor, // [vocab, E]
    pub layers: Vec<LayerParams>,
    pub pred_w1: Tensor, // [E, P]
    pub pred_b1: Tensor, // [P]
    pub pred_w2: Tensor, // [P, vocab]
    pub pred_b2: Tensor, // [vocab]
}

impl DecoderParams {
    pub fn init(cfg: DecoderConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let (e, v, g, da) =
            (cfg.embed_dim, cfg.visual_channels, cfg.gate_hidden, cfg.attn_dim);
        let embedding = Tensor::randn(&[cfg.vocab_size, e], 0.1, rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                conv_kernel: Tensor::randn_fan_in(&[e, e, cfg.kernel], e * cfg.kernel, rng),
                conv_bias: Tensor::zeros(&[e]),
                attn_q: (0..cfg.heads).map(|_| Tensor::randn_fan_in(&[da, e], e, rng)).collect(),
                attn_k: (0..cfg.heads).map(|_| Tensor::randn_fan_in(&[da, v], v, rng)).collect(),
                attn_out: Tensor::randn_fan_in(&[cfg.heads * v, v], cfg.heads * v, rng),
                gate_gru: GruParams::init(cfg.gate_input(), g, rng),
                gate_w: Tensor::randn_fan_in(&[g, v], g, rng),
                gate_b: Tensor::zeros(&[v]),
                concept_w: Tensor::randn_fan_in(&[g, e], g, rng),
                concept_b: Tensor::zeros(&[e]),
            });
        }
        let p = cfg.pred_hidden();
        Ok(DecoderParams {
            embedding,
            pred_w1: Tensor::randn_fan_in(&[e, p], e, rng),
            pred_b1: Tensor::zeros(&[p]),
            pred_w2: Tensor::randn_fan_in(&[p, cfg.vocab_size], p, rng),
            pred_b2: Tensor::zeros(&[cfg.vocab_size]),
            layers,
            cfg,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.conv.kernel"), &l.conv_kernel));
            out.push((format!("layer{i}.conv.bias"), &l.conv_bias));
            for (h, q) in l.attn_q.iter().enumerate() {
                out.push((format!("layer{i}.attn.q{h}"), q));
            }
            for (h, k) in l.attn_k.iter().enumerate() {
                out.push((format!("layer{i}.attn.k{h}"), k));
            }
            out.push((format!("layer{i}.attn.out"), &l.attn_out));
            for (name, t) in l.gate_gru.named_tensors() {
                out.push((format!("layer{i}.gate.gru.{name}"), t));
            }
            out.push((format!("layer{i}.gate.w"), &l.gate_w));
            out.push((format!("layer{i}.gate.b"), &l.gate_b));
            out.push((format!("layer{i}.concept.w"), &l.concept_w));
            out.push((format!("layer{i}.concept.b"), &l.concept_b));
        }
        out.push(("pred.w1".to_string(), &self.pred_w1));
        out.push(("pred.b1".to_string(), &self.pred_b1));
        out.push(("pred.w2".to_string(), &self.pred_w2));
        out.push(("pred.b2".to_string(), &self.pred_b2));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("embedding".to_string(), &mut self.embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.conv.kernel"), &mut l.conv_kernel));
            out.push((format!("layer{i}.conv.bias"), &mut l.conv_bias));
            for (h, q) in l.attn_q.iter_mut().enumerate() {
                out.push((format!("layer{i}.attn.q{h}"), q));
            }
            for (h, k) in l.attn_k.iter_mut().enumerate() {
                out.push((format!("layer{i}.attn.k{h}"), k));
            }
            out.push((format!("layer{i}.attn.out"), &mut l.attn_out));
            for (name, t) in l.gate_gru.named_tensors_mut() {
                out.push((format!("layer{i}.gate.gru.{name}"), t));
            }
            out.push((format!("layer{i}.gate.w"), &mut l.gate_w));
            out.push((format!("layer{i}.gate.b"), &mut l.gate_b));
            out.push((format!("layer{i}.concept.w"), &mut l.concept_w));
            out.push((format!("layer{i}.concept.b"), &mut l.concept_b));
        }
        out.push(("pred.w1".to_string(), &mut self.pred_w1));
        out.push(("pred.b1".to_string(), &mut self.pred_b1));
        out.push(("pred.w2".to_string(), &mut self.pred_w2));
        out.push(("pred.b2".to_string(), &mut self.pred_b2));
        out
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> DecoderNodes {
        DecoderNodes {
            embedding: tape.leaf(&self.embedding, requires_grad),
            layers: self
                .layers
                .iter()
                .map(|l| LayerNodes {
                    conv_kernel: tape.leaf(&l.conv_kernel, requires_grad),
                    conv_bias: tape.leaf(&l.conv_bias, requires_grad),
                    attn_q: l.attn_q.iter().map(|t| tape.leaf(t, requires_grad)).collect(),
                    attn_k: l.attn_k.iter().map(|t| tape.leaf(t, requires_grad)).collect(),
                    attn_out: tape.leaf(&l.attn_out, requires_grad),
                    gate_gru: GruNodes::register(tape, &l.gate_gru, requires_grad),
                    gate_w: tape.leaf(&l.gate_w, requires_grad),
                    gate_b: tape.leaf(&l.gate_b, requires_grad),
                    concept_w: tape.leaf(&l.concept_w, requires_grad),
                    concept_b: tape.leaf(&l.concept_b, requires_grad),
                })
                .collect(),
            pred_w1: tape.leaf(&self.pred_w1, requires_grad),
            pred_b1: tape.leaf(&self.pred_b1, requires_grad),
            pred_w2: tape.leaf(&self.pred_w2, requires_grad),
            pred_b2: tape.leaf(&self.pred_b2, requires_grad),
        }
    }
}

pub struct LayerNodes {
    pub conv_kernel: NodeId,
    pub conv_bias: NodeId,
    pub attn_q: Vec<NodeId>,
    pub attn_k: Vec<NodeId>,
    pub attn_out: NodeId,
    pub gate_gru: GruNodes,
    pub gate_w: NodeId,
    pub gate_b: NodeId,
    pub concept_w: NodeId,
    pub concept_b: NodeId,
}

pub struct DecoderNodes {
    pub embedding: NodeId,
    pub layers: Vec<LayerNodes>,
    pub pred_w1: NodeId,
    pub pred_b1: NodeId,
    pub pred_w2: NodeId,
    pub pred_b2: NodeId,
}

impl DecoderNodes {
    /// Ids in `DecoderParams::named_tensors` order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.push(l.conv_kernel);
            out.push(l.conv_bias);
            out.extend(&l.attn_q);
            out.extend(&l.attn_k);
            out.push(l.attn_out);
            out.extend(l.gate_gru.ids());
            out.push(l.gate_w);
            out.push(l.gate_b);
            out.push(l.concept_w);
            out.push(l.concept_b);
        }
        out.extend([self.pred_w1, self.pred_b1, self.pred_w2, self.pred_b2]);
        out
    }
}

/// Dropout behaviour of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DropoutCtx {
    pub train: bool,
    pub seed: u64,
}

impl DropoutCtx {
    pub fn inference() -> Self {
        DropoutCtx { train: false, seed: 0 }
    }
}

/// Per-layer results of one pass; attention weights are [B, T, cells] per head.
pub struct ForwardAux {
    pub attn_weights: Vec<Vec<NodeId>>,
    pub gate_inputs: Vec<NodeId>,
    pub states: Vec<NodeId>,
    pub gates: Vec<NodeId>,
}

pub struct ForwardOut {
    /// [N, vocab] with N = batch * time, row-major by (b, t).
    pub logits: NodeId,
    pub batch: usize,
    pub time: usize,
    pub aux: ForwardAux,
}

/// Multi-head scaled-dot attention of concepts [N,E] over the modulated
/// grid (fm0 [B,V,S] scaled per position by cg [N,V]).
/// Returns the projected context [N,V] and per-head weights [B,T,S].
fn attention(
    tape: &mut Tape,
    layer: &LayerNodes,
    cfg: &DecoderConfig,
    fm0: NodeId,
    cg: NodeId,
    concepts: NodeId,
    batch: usize,
    time: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let fsh = tape.shape(fm0).to_vec();
    if fsh.len() != 3 || fsh[1] != cfg.visual_channels {
        return Err(Error::shape(
            "attention_layer",
            format!("feature map {fsh:?} vs V={}", cfg.visual_channels),
        ));
    }
    let cells = fsh[2];
    let n = batch * time;
    let scale = 1.0 / (cfg.attn_dim as f64).sqrt();
    let mut head_ctx = Vec::with_capacity(cfg.heads);
    let mut head_weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qt = tape.transpose(layer.attn_q[h])?; // [E, d_a]
        let q = tape.matmul(concepts, qt)?; // [N, d_a]
        let u = tape.matmul(q, layer.attn_k[h])?; // [N, V]
        let w = tape.mul(u, cg)?; // fold the per-position gate into the key side
        let w3 = tape.reshape(w, vec![batch, time, cfg.visual_channels])?;
        let scores = tape.bmm(w3, fm0, false, false)?; // [B, T, S]
        let scaled = tape.affine(scores, scale, 0.0)?;
        let weights = tape.softmax(scaled)?;
        let pooled = tape.bmm(weights, fm0, false, true)?; // [B, T, V]
        let pooled = tape.reshape(pooled, vec![n, cfg.visual_channels])?;
        let ctx_h = tape.mul(pooled, cg)?;
        head_ctx.push(ctx_h);
        head_weights.push(weights);
    }
    let cat = tape.concat(&head_ctx, 1)?; // [N, H*V]
    let ctx = tape.matmul(cat, layer.attn_out)?; // [N, V]
    let _ = cells;
    Ok((ctx, head_weights))
}

/// One hierarchical gate step: update the vertical GRU state from
/// (context, concept), emit the per-channel sigmoid gate and the concept
/// residual.
fn hier_gate(
    tape: &mut Tape,
    layer: &LayerNodes,
    ctx: NodeId,
    concepts: NodeId,
    state: NodeId,
) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
    let gin = tape.concat(&[ctx, concepts], 1)?; // [N, V+E]
    let new_state = gru_cell_batched(tape, gin, state, &layer.gate_gru)?;
    let gl = tape.matmul(new_state, layer.gate_w)?;
    let gl = tape.add(gl, layer.gate_b)?;
    let gate = tape.sigmoid(gl)?; // [N, V] in (0,1)
    let co = tape.matmul(new_state, layer.concept_w)?;
    let concept_out = tape.add(co, layer.concept_b)?; // [N, E]
    Ok((gin, new_state, gate, concept_out))
}

/// Full-sequence teacher-forced pass. `tokens` is row-major [batch, time];
/// every position is computed in parallel, causality comes from the convs.
pub fn forward_teacher_forced(
    tape: &mut Tape,
    nodes: &DecoderNodes,
    cfg: &DecoderConfig,
    fm0: NodeId,
    tokens: &[usize],
    batch: usize,
    dropout: DropoutCtx,
) -> Result<ForwardOut> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::invalid(
            "decode_teacher_forced",
            format!("{} tokens for batch {batch}", tokens.len()),
        ));
    }
    let time = tokens.len() / batch;
    if time > cfg.max_len {
        return Err(Error::invalid(
            "decode_teacher_forced",
            format!("sequence length {time} exceeds max length {}", cfg.max_len),
        ));
    }
    let n = batch * time;
    let (e, v, g) = (cfg.embed_dim, cfg.visual_channels, cfg.gate_hidden);

    let mut x = tape.embedding_lookup(nodes.embedding, tokens)?; // [N, E]
    let mut cg = tape.constant(vec![1.0; n * v], vec![n, v]);
    let mut state = tape.constant(vec![0.0; n * g], vec![n, g]);
    let mut aux = ForwardAux {
        attn_weights: Vec::new(),
        gate_inputs: Vec::new(),
        states: Vec::new(),
        gates: Vec::new(),
    };

    for layer in &nodes.layers {
        let x3 = tape.reshape(x, vec![batch, time, e])?;
        let c3 = tape.conv1d_causal_btc(x3, layer.conv_kernel, layer.conv_bias)?;
        let c3 = tape.elu(c3, 1.0)?;
        let concepts = tape.reshape(c3, vec![n, e])?;

        let (ctx, weights) = attention(tape, layer, cfg, fm0, cg, concepts, batch, time)?;
        let (gin, new_state, gate, concept_out) = hier_gate(tape, layer, ctx, concepts, state)?;

        cg = tape.mul(cg, gate)?;
        state = new_state;
        let xc = tape.add(x, concepts)?;
        x = tape.add(xc, concept_out)?;

        aux.attn_weights.push(weights);
        aux.gate_inputs.push(gin);
        aux.states.push(state);
        aux.gates.push(gate);
    }

    // prediction head: dropout, 1x1 conv, ELU, dropout, 1x1 conv
    let d1 = tape.dropout(x, cfg.dropout, dropout.train, dropout.seed ^ 0x5eed_0001)?;
    let p1 = tape.matmul(d1, nodes.pred_w1)?;
    let p1 = tape.add(p1, nodes.pred_b1)?;
    let p1 = tape.elu(p1, 1.0)?;
    let d2 = tape.dropout(p1, cfg.dropout, dropout.train, dropout.seed ^ 0x5eed_0002)?;
    let logits = tape.matmul(d2, nodes.pred_w2)?;
    let logits = tape.add(logits, nodes.pred_b2)?;

    Ok(ForwardOut { logits, batch, time, aux })
}

/// Inference-mode teacher-forced logits for a single sequence: T rows of
/// vocab scores.
pub fn teacher_forced_logits(
    params: &DecoderParams,
    fm0: &Tensor,
    tokens: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::inference();
    let nodes = params.register(&mut tape, false);
    let fm_flat = flatten_grid(fm0)?;
    let fm_node = tape.constant(fm_flat.data.clone(), vec![1, fm_flat.shape[0], fm_flat.shape[1]]);
    let out = forward_teacher_forced(
        &mut tape,
        &nodes,
        &params.cfg,
        fm_node,
        tokens,
        1,
        DropoutCtx::inference(),
    )?;
    let vc = params.cfg.vocab_size;
    let data = tape.data(out.logits);
    Ok((0..tokens.len()).map(|t| data[t * vc..(t + 1) * vc].to_vec()).collect())
}

/// Accepts [V, S] or [V, g, g] and returns [V, S].
pub fn flatten_grid(fm: &Tensor) -> Result<Tensor> {
    match fm.shape.len() {
        2 => Ok(fm.clone()),
        3 => Ok(Tensor::new(fm.data.clone(), vec![fm.shape[0], fm.shape[1] * fm.shape[2]])),
        _ => Err(Error::shape("decoder", format!("feature map shape {:?}", fm.shape))),
    }
}

// ── Incremental decoding ─────────────────────────────────────────────

/// Decoding session with bounded memory: parameters are registered on an
/// internal inference tape once; each step appends its scratch nodes and
/// truncates them away afterwards. Per layer only the last K-1 input
/// activations are buffered, plus the most recent vertical attention
/// state for inspection.
pub struct DecodeCache {
    cfg: DecoderConfig,
    tape: Tape,
    nodes: DecoderNodes,
    fm_node: NodeId,
    watermark: usize,
    buffers: Vec<VecDeque<Vec<f64>>>,
    capacity: usize,
    pos: usize,
    pub last_states: Vec<Vec<f64>>,
    pub last_gates: Vec<Vec<f64>>,
}

impl DecodeCache {
    pub fn new(params: &DecoderParams, fm0: &Tensor, capacity: usize) -> Result<Self> {
        let fm = flatten_grid(fm0)?;
        if fm.shape[0] != params.cfg.visual_channels {
            return Err(Error::shape(
                "decode_cache",
                format!("feature map {:?} vs V={}", fm0.shape, params.cfg.visual_channels),
            ));
        }
        let mut tape = Tape::inference();
        let nodes = params.register(&mut tape, false);
        let fm_node = tape.constant(fm.data.clone(), vec![1, fm.shape[0], fm.shape[1]]);
        let watermark = tape.len();
        Ok(DecodeCache {
            cfg: params.cfg.clone(),
            tape,
            nodes,
            fm_node,
            watermark,
            buffers: vec![VecDeque::new(); params.cfg.layers],
            capacity,
            pos: 0,
            last_states: Vec::new(),
            last_gates: Vec::new(),
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Buffered activations for one layer; never exceeds K-1.
    pub fn buffered_len(&self, layer: usize) -> usize {
        self.buffers[layer].len()
    }
}

/// Emit the logits for the next position given one input token, updating
/// the cache. Bit-identical per position to the full-sequence pass.
pub fn decode_step(cache: &mut DecodeCache, token: usize) -> Result<Vec<f64>> {
    if cache.pos >= cache.capacity {
        return Err(Error::invalid(
            "decode_step",
            format!("position {} past maximum length {}", cache.pos, cache.capacity),
        ));
    }
    let cfg = cache.cfg.clone();
    let (e, v, g) = (cfg.embed_dim, cfg.visual_channels, cfg.gate_hidden);
    let tape = &mut cache.tape;

    let mut x = tape.embedding_lookup(cache.nodes.embedding, &[token])?; // [1, E]
    let mut cg = tape.constant(vec![1.0; v], vec![1, v]);
    let mut state = tape.constant(vec![0.0; g], vec![1, g]);
    cache.last_states.clear();
    cache.last_gates.clear();

    let mut result = Vec::new();
    let mut new_fronts: Vec<Vec<f64>> = Vec::with_capacity(cfg.layers);
    for (li, layer) in cache.nodes.layers.iter().enumerate() {
        // window = buffered inputs ++ current input; conv output at the
        // last window position equals the full-sequence value.
        let buf = &cache.buffers[li];
        let win = buf.len() + 1;
        let mut wdata = Vec::with_capacity(win * e);
        for past in buf {
            wdata.extend_from_slice(past);
        }
        wdata.extend_from_slice(tape.data(x));
        let x_now = tape.data(x).to_vec();
        let w3 = tape.constant(wdata, vec![1, win, e]);
        let c3 = tape.conv1d_causal_btc(w3, layer.conv_kernel, layer.conv_bias)?;
        let c3 = tape.elu(c3, 1.0)?;
        let clast = tape.gather(c3, &((win - 1) * e..win * e).collect::<Vec<_>>())?;
        let concepts = tape.reshape(clast, vec![1, e])?;

        let (ctx, _weights) =
            attention(tape, layer, &cfg, cache.fm_node, cg, concepts, 1, 1)?;
        let (_gin, new_state, gate, concept_out) = hier_gate(tape, layer, ctx, concepts, state)?;

        cache.last_states.push(tape.data(new_state).to_vec());
        cache.last_gates.push(tape.data(gate).to_vec());

        cg = tape.mul(cg, gate)?;
        state = new_state;
        let xc = tape.add(x, concepts)?;
        let x_next = tape.add(xc, concept_out)?;
        new_fronts.push(x_now);
        x = x_next;
    }

    let p1 = tape.matmul(x, cache.nodes.pred_w1)?;
    let p1 = tape.add(p1, cache.nodes.pred_b1)?;
    let p1 = tape.elu(p1, 1.0)?;
    let logits = tape.matmul(p1, cache.nodes.pred_w2)?;
    let logits = tape.add(logits, cache.nodes.pred_b2)?;
    result.extend_from_slice(tape.data(logits));

    tape.truncate(cache.watermark);
    for (li, front) in new_fronts.into_iter().enumerate() {
        let ring = &mut cache.buffers[li];
        ring.push_back(front);
        while ring.len() > cfg.kernel - 1 {
            ring.pop_front();
        }
    }
    cache.pos += 1;
    Ok(result)
}

/// Argmax with ties broken toward the lowest token id.
pub fn argmax_tie_lowest(logits: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Repeated argmax decoding from the start token; stops at `end_id` or
/// after `max_len` emissions. The emitted sequence includes `end_id` when
/// it fires.
pub fn greedy_decode(
    params: &DecoderParams,
    fm0: &Tensor,
    start_id: usize,
    end_id: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut cache = DecodeCache::new(params, fm0, max_len)?;
    let mut out = Vec::new();
    let mut token = start_id;
    while out.len() < max_len {
        let logits = decode_step(&mut cache, token)?;
        let next = argmax_tie_lowest(&logits);
        out.push(next);
        if next == end_id {
            break;
        }
        token = next;
    }
    Ok(out)
}

/// Trainable parameter count for a decoder configuration, computed
/// arithmetically (nothing is allocated).
pub fn decoder_param_count(cfg: &DecoderConfig) -> u64 {
    let (e, v, g, da, h, k, vc) = (
        cfg.embed_dim as u64,
        cfg.visual_channels as u64,
        cfg.gate_hidden as u64,
        cfg.attn_dim as u64,
        cfg.heads as u64,
        cfg.kernel as u64,
        cfg.vocab_size as u64,
    );
    let gin = v + e;
    let per_layer = e * e * k + e                       // conv
        + h * (da * e + da * v) + h * v * v             // attention q, k, out
        + 3 * (g * gin) + 3 * (g * g) + 3 * g           // gate GRU
        + g * v + v + g * e + e; // gate + concept projections
    let p = 2 * e;
    vc * e + cfg.layers as u64 * per_layer + e * p + p + p * vc + vc
}
