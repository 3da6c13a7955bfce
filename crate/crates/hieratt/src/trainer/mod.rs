//! Training orchestration.
//!
//! The recipe runs in three stages: the region-word scorer trains first
//! on ground-truth alignments (distractor boxes target uniform rows);
//! the captioner then trains teacher-forced on cross entropy alone; and
//! finally it retrains with the interpretability loss blended in. During
//! retraining the scorer is frozen and reads its word inputs from the
//! captioner's embedding table, which is the one continuous path the IE
//! gradient has back into the generator (greedy-decoded tokens themselves
//! are discrete).
//!
//! Everything is deterministic under a fixed seed: batch shuffles,
//! dropout masks and parameter init all derive from it.

pub mod adam;
#[cfg(test)]
mod tests;
pub mod checkpoint;

use crate::dataset::{
    background_box, tokenize_caption, word_ids, SceneSample, Vocabulary, END_ID, PAD_ID, START_ID,
};
use crate::decoder::{
    decode_step, forward_teacher_forced, greedy_decode, DecodeCache, DecoderConfig, DecoderParams,
    DropoutCtx,
};
use crate::encoder::{
    crop_resize, encode_batch, pool_and_project, EncoderConfig, EncoderParams, ImageTensor,
    RegionHead,
};
use crate::error::{Error, Result};
use crate::interp::{ie_loss, ie_loss_node, select_pairs, PosteriorMode, Reduce, RegionPrior};
use crate::metrics::{corpus_report, words, MetricReport};
use crate::rng::{derive_seed, SplitMix64};
use crate::rwa::{
    encode_words_bidir, relevance_rows, relevance_scores, RelevanceMatrix, RwaConfig, RwaParams,
};
use crate::tensor::{NodeId, Tape, Tensor};
use adam::{clip_global_norm, Adam};
use checkpoint::{load_checkpoint, restore_named, save_checkpoint, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

const TAG_INIT: u64 = 0x01;
const TAG_SHUFFLE: u64 = 0x02;
const TAG_DROPOUT: u64 = 0x03;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// IE blend weight in phase 2.
    pub lambda_ie: f64,
    /// Pair-selection factor c; the threshold is c / word count.
    pub selection_factor: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub rwa_scenes: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 7,
            lambda_ie: 1.0,
            selection_factor: 2.0,
            train_scenes: 2000,
            eval_scenes: 200,
            rwa_scenes: 256,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::invalid(
                "train_config",
                format!(
                    "epochs {}, batch {}, lr {} must be positive",
                    self.epochs, self.batch_size, self.learning_rate
                ),
            ));
        }
        if self.lambda_ie < 0.0 {
            return Err(Error::invalid("train_config", "lambda_ie must be >= 0".to_string()));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(self.learning_rate, self.beta1, self.beta2, self.epsilon)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub ce_loss: f64,
    pub ie_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct LossCurve {
    pub rows: Vec<CurveRow>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,ce_loss,ie_loss,total\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.ce_loss, r.ie_loss, r.total));
        }
        out
    }
}

// ── Models ───────────────────────────────────────────────────────────

pub struct CaptionModel {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub vocab: Vocabulary,
}

impl CaptionModel {
    pub fn new(
        enc_cfg: EncoderConfig,
        mut dec_cfg: DecoderConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        dec_cfg.vocab_size = vocab.len();
        if dec_cfg.visual_channels != enc_cfg.feature_channels() {
            return Err(Error::invalid(
                "caption_model",
                format!(
                    "decoder expects {} visual channels, encoder yields {}",
                    dec_cfg.visual_channels,
                    enc_cfg.feature_channels()
                ),
            ));
        }
        let mut rng = SplitMix64::new(derive_seed(seed, TAG_INIT));
        Ok(CaptionModel {
            encoder: EncoderParams::init(enc_cfg, &mut rng),
            decoder: DecoderParams::init(dec_cfg, &mut rng)?,
            vocab,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(self.decoder.named_tensors().into_iter().map(|(n, t)| (format!("decoder.{n}"), t)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .encoder
            .named_tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(
            self.decoder.named_tensors_mut().into_iter().map(|(n, t)| (format!("decoder.{n}"), t)),
        );
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_tensors().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig::Caption {
            encoder: self.encoder.cfg.clone(),
            decoder: self.decoder.cfg.clone(),
            vocab: self.vocab.tokens().to_vec(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config(), &self.named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, tensors) = load_checkpoint(path)?;
        let ModelConfig::Caption { encoder, decoder, vocab } = cfg else {
            return Err(Error::Format("not a caption checkpoint".to_string()));
        };
        let vocab = Vocabulary::from_tokens(vocab)?;
        let mut model = CaptionModel::new(encoder, decoder, vocab, 0)?;
        restore_named(tensors, model.named_tensors_mut())?;
        Ok(model)
    }

    /// Initialize the embedding table from a scorer checkpoint so the two
    /// models start from the same word space.
    pub fn adopt_embedding(&mut self, rwa: &RwaModel) -> Result<()> {
        if rwa.rwa.embedding.shape != self.decoder.embedding.shape {
            return Err(Error::shape(
                "adopt_embedding",
                format!("{:?} vs {:?}", rwa.rwa.embedding.shape, self.decoder.embedding.shape),
            ));
        }
        self.decoder.embedding = rwa.rwa.embedding.clone();
        Ok(())
    }

    /// Feature grid [V, g, g] for one image, outside any training graph.
    pub fn encode_fm(&self, img: &ImageTensor) -> Result<Tensor> {
        crate::encoder::encode_image_value(&self.encoder, img)
    }

    /// Greedy caption for one image.
    pub fn caption(&self, img: &ImageTensor) -> Result<(String, Vec<usize>)> {
        let fm = self.encode_fm(img)?;
        let ids =
            greedy_decode(&self.decoder, &fm, START_ID, END_ID, self.decoder.cfg.max_len)?;
        Ok((crate::dataset::detokenize(&ids, &self.vocab), ids))
    }
}

pub struct RwaModel {
    pub encoder: EncoderParams,
    pub head: RegionHead,
    pub rwa: RwaParams,
    pub vocab: Vocabulary,
}

impl RwaModel {
    pub fn new(
        enc_cfg: EncoderConfig,
        mut rwa_cfg: RwaConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        rwa_cfg.vocab_size = vocab.len();
        if rwa_cfg.region_dim != enc_cfg.region_dim {
            return Err(Error::invalid(
                "rwa_model",
                format!("region dims differ: {} vs {}", rwa_cfg.region_dim, enc_cfg.region_dim),
            ));
        }
        let mut rng = SplitMix64::new(derive_seed(seed ^ 0x5ca1ab1e, TAG_INIT));
        let encoder = EncoderParams::init(enc_cfg, &mut rng);
        let head = RegionHead::init(&encoder.cfg, &mut rng);
        Ok(RwaModel { encoder, head, rwa: RwaParams::init(rwa_cfg, &mut rng)?, vocab })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(self.head.named_tensors().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
        out.extend(self.rwa.named_tensors().into_iter().map(|(n, t)| (format!("rwa.{n}"), t)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .encoder
            .named_tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(
            self.head.named_tensors_mut().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)),
        );
        out.extend(self.rwa.named_tensors_mut().into_iter().map(|(n, t)| (format!("rwa.{n}"), t)));
        out
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig::RegionWord {
            encoder: self.encoder.cfg.clone(),
            rwa: self.rwa.cfg.clone(),
            vocab: self.vocab.tokens().to_vec(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config(), &self.named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, tensors) = load_checkpoint(path)?;
        let ModelConfig::RegionWord { encoder, rwa, vocab } = cfg else {
            return Err(Error::Format("not a region-word checkpoint".to_string()));
        };
        let vocab = Vocabulary::from_tokens(vocab)?;
        let mut model = RwaModel::new(encoder, rwa, vocab, 0)?;
        restore_named(tensors, model.named_tensors_mut())?;
        Ok(model)
    }

    /// Relevance matrix for one image's boxes against caption words,
    /// using this model's own embedding table.
    pub fn score(&self, img: &ImageTensor, boxes: &[crate::encoder::BBox], caption: &str) -> Result<RelevanceMatrix> {
        let ids = word_ids(caption, &self.vocab);
        if ids.is_empty() {
            return Err(Error::Empty("score: caption has no words"));
        }
        let word_strings: Vec<String> = crate::dataset::normalize_words(caption);
        let mut tape = Tape::inference();
        let enc_nodes = self.encoder.register(&mut tape, false);
        let head_nodes = self.head.register(&mut tape, false);
        let rwa_nodes = self.rwa.register(&mut tape, false);
        let rv = crate::encoder::encode_regions(
            &mut tape,
            &enc_nodes,
            &head_nodes,
            &self.encoder.cfg,
            img,
            boxes,
        )?;
        let wv = encode_words_bidir(&mut tape, &rwa_nodes, rwa_nodes.embedding, &ids)?;
        let scores = relevance_scores(&mut tape, &rwa_nodes, rv, wv)?;
        let rows = relevance_rows(&mut tape, scores)?;
        RelevanceMatrix::new(
            tape.data(rows).to_vec(),
            boxes.len(),
            ids.len(),
            boxes.to_vec(),
            word_strings,
        )
    }
}

fn check_vocab_covers(data: &[SceneSample], vocab: &Vocabulary) -> Result<()> {
    for s in data {
        if word_ids(&s.caption, vocab).contains(&crate::dataset::UNK_ID) {
            return Err(Error::Vocab(format!(
                "vocabulary mismatch with checkpoint: caption {:?} has out-of-vocabulary words",
                s.caption
            )));
        }
    }
    Ok(())
}

// ── Region-word training ─────────────────────────────────────────────

/// Train the scorer on ground-truth alignments: each object region
/// targets its object word one-hot; one background distractor per scene
/// targets the uniform row.
pub fn train_rwa(model: &mut RwaModel, data: &[SceneSample], cfg: &TrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("train_rwa"));
    }
    check_vocab_covers(data, &model.vocab)?;
    let mut optimizer = cfg.adam();
    let mut curve = LossCurve::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng =
            SplitMix64::new(derive_seed(cfg.seed, TAG_SHUFFLE ^ (epoch as u64) << 8));
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let enc_nodes = model.encoder.register(&mut tape, true);
            let head_nodes = model.head.register(&mut tape, true);
            let rwa_nodes = model.rwa.register(&mut tape, true);

            // all crops of the batch go through the encoder in one pass
            let mut crops: Vec<ImageTensor> = Vec::new();
            let mut scene_plans = Vec::new();
            for &si in batch {
                let s = &data[si];
                let ids = word_ids(&s.caption, &model.vocab);
                let k = ids.len();
                let mut targets: Vec<f64> = Vec::new();
                let offset = crops.len();
                let mut rows = 0usize;
                for r in &s.regions {
                    let Some(obj_id) = model.vocab.id(&r.object) else { continue };
                    let Some(j) = ids.iter().position(|&w| w == obj_id) else { continue };
                    crops.push(crop_resize(&s.image, &r.bbox, model.encoder.cfg.canvas)?);
                    let mut onehot = vec![0.0; k];
                    onehot[j] = 1.0;
                    targets.extend(onehot);
                    rows += 1;
                }
                if let Some(bg) = background_box(s) {
                    crops.push(crop_resize(&s.image, &bg, model.encoder.cfg.canvas)?);
                    targets.extend(vec![1.0 / k as f64; k]);
                    rows += 1;
                }
                if rows > 0 {
                    scene_plans.push((offset, rows, ids, targets));
                }
            }
            if scene_plans.is_empty() {
                continue;
            }
            let crop_refs: Vec<&ImageTensor> = crops.iter().collect();
            let fm = encode_batch(&mut tape, &enc_nodes, &model.encoder.cfg, &crop_refs)?;
            let region_vecs = pool_and_project(&mut tape, &head_nodes, fm)?; // [total, d_r]
            let d_r = model.rwa.cfg.region_dim;

            let mut scene_losses = Vec::with_capacity(scene_plans.len());
            for (offset, rows, ids, targets) in &scene_plans {
                let idx: Vec<usize> = (offset * d_r..(offset + rows) * d_r).collect();
                let flat = tape.gather(region_vecs, &idx)?;
                let rv = tape.reshape(flat, vec![*rows, d_r])?;
                let wv = encode_words_bidir(&mut tape, &rwa_nodes, rwa_nodes.embedding, ids)?;
                let scores = relevance_scores(&mut tape, &rwa_nodes, rv, wv)?;
                scene_losses.push(tape.cross_entropy_soft(scores, targets)?);
            }
            let mut total = scene_losses[0];
            for &l in &scene_losses[1..] {
                total = tape.add(total, l)?;
            }
            let loss = tape.affine(total, 1.0 / scene_losses.len() as f64, 0.0)?;
            let loss_val = tape.data(loss)[0];
            tape.backward(loss)?;

            let ids: Vec<NodeId> = enc_nodes
                .ids()
                .into_iter()
                .chain(head_nodes.ids())
                .chain(rwa_nodes.ids())
                .collect();
            let mut grads = collect_grads(&tape, &ids);
            clip_global_norm(&mut grads, cfg.clip_norm);
            let mut params: Vec<&mut Tensor> =
                model.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
            optimizer.step(&mut params, &grads);

            loss_sum += loss_val * batch.len() as f64;
            seen += batch.len();
        }
        let mean = loss_sum / seen.max(1) as f64;
        curve.rows.push(CurveRow { epoch, ce_loss: mean, ie_loss: 0.0, total: mean });
    }
    Ok(curve)
}

/// Fraction of object regions whose relevance-row argmax is the
/// ground-truth word.
pub fn rwa_alignment_accuracy(model: &RwaModel, data: &[SceneSample]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in data {
        let ids = word_ids(&s.caption, &model.vocab);
        let boxes: Vec<_> = s.regions.iter().map(|r| r.bbox).collect();
        let m = model.score(&s.image, &boxes, &s.caption)?;
        for (i, r) in s.regions.iter().enumerate() {
            let Some(obj_id) = model.vocab.id(&r.object) else { continue };
            let Some(j) = ids.iter().position(|&w| w == obj_id) else { continue };
            let row = m.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(idx, _)| idx)
                .unwrap();
            if argmax == j {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("rwa_alignment_accuracy"));
    }
    Ok(hits as f64 / total as f64)
}

// ── Caption training ─────────────────────────────────────────────────

fn prepare_tokens(
    samples: &[&SceneSample],
    vocab: &Vocabulary,
    t_max: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(samples.len() * t_max);
    let mut targets = Vec::with_capacity(samples.len() * t_max);
    for s in samples {
        let mut ids = tokenize_caption(&s.caption, vocab);
        ids.truncate(t_max + 1);
        for t in 0..t_max {
            inputs.push(if t + 1 < ids.len() { ids[t] } else { PAD_ID });
            targets.push(if t + 1 < ids.len() { ids[t + 1] } else { PAD_ID });
        }
    }
    (inputs, targets)
}

fn collect_grads(tape: &Tape, ids: &[NodeId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect()
}

/// Phase 1: teacher-forced cross entropy only.
pub fn train_caption_phase1(
    model: &mut CaptionModel,
    data: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    run_caption_training(model, None, data, cfg)
}

/// Phase 2: cross entropy plus lambda times the IE loss; the scorer stays
/// frozen and reads word inputs from the captioner's embedding.
pub fn train_caption_phase2(
    model: &mut CaptionModel,
    rwa: &RwaModel,
    data: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    if model.vocab != rwa.vocab {
        return Err(Error::Vocab(
            "incompatible vocabularies between caption and region-word checkpoints".to_string(),
        ));
    }
    run_caption_training(model, Some(rwa), data, cfg)
}

fn run_caption_training(
    model: &mut CaptionModel,
    rwa: Option<&RwaModel>,
    data: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("train_caption"));
    }
    check_vocab_covers(data, &model.vocab)?;
    let use_ie = rwa.is_some() && cfg.lambda_ie > 0.0;
    let t_max = model.decoder.cfg.max_len;
    let v = model.decoder.cfg.visual_channels;
    let cells = model.encoder.cfg.cells();
    let mut optimizer = cfg.adam();
    let mut curve = LossCurve::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng =
            SplitMix64::new(derive_seed(cfg.seed, TAG_SHUFFLE ^ (epoch as u64) << 8));
        shuffle_rng.shuffle(&mut order);

        let mut ce_sum = 0.0;
        let mut ie_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&SceneSample> = batch.iter().map(|&i| &data[i]).collect();

            // IE inputs come from greedy decodes against the current
            // weights, before this step's update.
            let decoded: Vec<Option<(Vec<String>, Vec<usize>)>> = if use_ie {
                samples
                    .iter()
                    .map(|s| {
                        let (caption, _) = model.caption(&s.image).ok()?;
                        let w = crate::dataset::normalize_words(&caption);
                        if w.is_empty() {
                            return None;
                        }
                        let ids = word_ids(&caption, &model.vocab);
                        Some((w, ids))
                    })
                    .collect()
            } else {
                Vec::new()
            };

            let mut tape = Tape::new();
            let enc_nodes = model.encoder.register(&mut tape, true);
            let dec_nodes = model.decoder.register(&mut tape, true);

            let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
            let fm4 = encode_batch(&mut tape, &enc_nodes, &model.encoder.cfg, &images)?;
            let fm = tape.reshape(fm4, vec![samples.len(), v, cells])?;
            let (inputs, targets) = prepare_tokens(&samples, &model.vocab, t_max);
            let dropout = DropoutCtx {
                train: true,
                seed: derive_seed(cfg.seed, TAG_DROPOUT ^ ((epoch as u64) << 24) ^ batch_idx as u64),
            };
            let out = forward_teacher_forced(
                &mut tape,
                &dec_nodes,
                &model.decoder.cfg,
                fm,
                &inputs,
                samples.len(),
                dropout,
            )?;
            let ce = tape.cross_entropy(out.logits, &targets, Some(PAD_ID))?;
            let ce_val = tape.data(ce)[0];

            let (loss, ie_val) = if use_ie {
                let rwa_model = rwa.unwrap();
                let rwa_enc = rwa_model.encoder.register(&mut tape, false);
                let rwa_head = rwa_model.head.register(&mut tape, false);
                let rwa_nodes = rwa_model.rwa.register(&mut tape, false);
                let mut parts = Vec::new();
                for (s, dec) in samples.iter().zip(&decoded) {
                    let Some((decoded_words, decoded_ids)) = dec else { continue };
                    let boxes: Vec<_> = s.regions.iter().map(|r| r.bbox).collect();
                    let rv = crate::encoder::encode_regions(
                        &mut tape,
                        &rwa_enc,
                        &rwa_head,
                        &rwa_model.encoder.cfg,
                        &s.image,
                        &boxes,
                    )?;
                    // word inputs come from the captioner's table: the cut
                    // point where IE gradients enter the generator
                    let wv =
                        encode_words_bidir(&mut tape, &rwa_nodes, dec_nodes.embedding, decoded_ids)?;
                    let scores = relevance_scores(&mut tape, &rwa_nodes, rv, wv)?;
                    let rows = relevance_rows(&mut tape, scores)?;
                    let m = RelevanceMatrix::new(
                        tape.data(rows).to_vec(),
                        boxes.len(),
                        decoded_ids.len(),
                        boxes.clone(),
                        decoded_words.clone(),
                    )?;
                    let sel = select_pairs(&m, cfg.selection_factor);
                    let prior = RegionPrior::uniform(boxes.len());
                    parts.push(ie_loss_node(
                        &mut tape,
                        rows,
                        &sel,
                        &prior,
                        PosteriorMode::Verbatim,
                        Reduce::Mean,
                    )?);
                }
                let ie = if parts.is_empty() {
                    tape.scalar(0.0)
                } else {
                    let mut total = parts[0];
                    for &p in &parts[1..] {
                        total = tape.add(total, p)?;
                    }
                    tape.affine(total, 1.0 / parts.len() as f64, 0.0)?
                };
                let ie_val = tape.data(ie)[0];
                let loss = crate::interp::total_loss_node(&mut tape, ce, ie, cfg.lambda_ie)?;
                (loss, ie_val)
            } else {
                (ce, 0.0)
            };

            tape.backward(loss)?;
            let ids: Vec<NodeId> = enc_nodes.ids().into_iter().chain(dec_nodes.ids()).collect();
            let mut grads = collect_grads(&tape, &ids);
            clip_global_norm(&mut grads, cfg.clip_norm);
            let mut params: Vec<&mut Tensor> =
                model.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
            optimizer.step(&mut params, &grads);

            ce_sum += ce_val * samples.len() as f64;
            ie_sum += ie_val * samples.len() as f64;
            seen += samples.len();
        }
        let ce_mean = ce_sum / seen as f64;
        let ie_mean = ie_sum / seen as f64;
        curve.rows.push(CurveRow {
            epoch,
            ce_loss: ce_mean,
            ie_loss: ie_mean,
            total: ce_mean + cfg.lambda_ie * ie_mean,
        });
    }
    Ok(curve)
}

/// Mean IE loss of greedy captions over a dataset, scored exactly the way
/// phase 2 optimizes it (frozen scorer, captioner's embedding as the word
/// input). Samples whose decode has no words are skipped.
pub fn mean_ie_loss(
    model: &CaptionModel,
    rwa: &RwaModel,
    data: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in data {
        let (caption, _) = model.caption(&s.image)?;
        let decoded_words = crate::dataset::normalize_words(&caption);
        if decoded_words.is_empty() {
            continue;
        }
        let ids = word_ids(&caption, &model.vocab);
        let boxes: Vec<_> = s.regions.iter().map(|r| r.bbox).collect();

        let mut tape = Tape::inference();
        let enc_nodes = rwa.encoder.register(&mut tape, false);
        let head_nodes = rwa.head.register(&mut tape, false);
        let rwa_nodes = rwa.rwa.register(&mut tape, false);
        let cap_embed = tape.leaf(&model.decoder.embedding, false);
        let rv = crate::encoder::encode_regions(
            &mut tape,
            &enc_nodes,
            &head_nodes,
            &rwa.encoder.cfg,
            &s.image,
            &boxes,
        )?;
        let wv = encode_words_bidir(&mut tape, &rwa_nodes, cap_embed, &ids)?;
        let scores = relevance_scores(&mut tape, &rwa_nodes, rv, wv)?;
        let rows = relevance_rows(&mut tape, scores)?;
        let m = RelevanceMatrix::new(
            tape.data(rows).to_vec(),
            boxes.len(),
            ids.len(),
            boxes,
            decoded_words,
        )?;
        let sel = select_pairs(&m, cfg.selection_factor);
        let prior = RegionPrior::uniform(m.n_regions);
        total += ie_loss(&m, &sel, &prior, PosteriorMode::Verbatim, Reduce::Mean)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("mean_ie_loss"));
    }
    Ok(total / count as f64)
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Greedy-decode every image and score against the reference captions.
pub fn evaluate(model: &CaptionModel, data: &[SceneSample]) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let mut candidates = Vec::with_capacity(data.len());
    let mut references = Vec::with_capacity(data.len());
    for s in data {
        let (caption, _) = model.caption(&s.image)?;
        candidates.push(words(&caption));
        references.push(vec![words(&s.caption)]);
    }
    corpus_report(&candidates, &references)
}

/// Exact-match rate of greedy captions against references.
pub fn exact_match_rate(model: &CaptionModel, data: &[SceneSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("exact_match_rate"));
    }
    let mut hits = 0usize;
    for s in data {
        let (caption, _) = model.caption(&s.image)?;
        if caption == s.caption {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

// ── Benchmark ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    #[serde(rename = "T")]
    pub t: usize,
    pub reps: usize,
    pub t_parallel_ms: f64,
    pub t_sequential_ms: f64,
    pub speedup: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time one full-sequence forward against T sequential single-step
/// forwards of the same network. Aborts if the two paths disagree beyond
/// 1e-6 per logit.
pub fn benchmark_decoder(model: &CaptionModel, t: usize, reps: usize) -> Result<BenchReport> {
    if t == 0 || reps == 0 {
        return Err(Error::invalid("benchmark", "T and reps must be positive".to_string()));
    }
    let mut params = model.decoder.clone();
    params.cfg.max_len = params.cfg.max_len.max(t);
    let params_cfg = params.cfg.clone();
    let mut rng = SplitMix64::new(0xbe9c);
    let cells = model.encoder.cfg.cells();
    let fm = Tensor::randn(&[params_cfg.visual_channels, cells], 0.5, &mut rng);
    let tokens: Vec<usize> =
        (0..t).map(|_| rng.next_below(params_cfg.vocab_size as u64) as usize).collect();

    // parity gate before any timing
    let full = crate::decoder::teacher_forced_logits(&params, &fm, &tokens)?;
    let mut cache = DecodeCache::new(&params, &fm, t)?;
    let mut worst = 0.0f64;
    for (ti, &tok) in tokens.iter().enumerate() {
        let step = decode_step(&mut cache, tok)?;
        for (a, b) in step.iter().zip(&full[ti]) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-6 {
        return Err(Error::invalid(
            "benchmark",
            format!("parity check failed: max logit difference {worst:e} exceeds 1e-6"),
        ));
    }

    let fm_flat = crate::decoder::flatten_grid(&fm)?;
    let mut par_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = std::time::Instant::now();
        let mut tape = Tape::inference();
        let nodes = params.register(&mut tape, false);
        let fm_node =
            tape.constant(fm_flat.data.clone(), vec![1, fm_flat.shape[0], fm_flat.shape[1]]);
        let out = forward_teacher_forced(
            &mut tape,
            &nodes,
            &params_cfg,
            fm_node,
            &tokens,
            1,
            DropoutCtx::inference(),
        )?;
        std::hint::black_box(tape.data(out.logits));
        par_times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut seq_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = std::time::Instant::now();
        let mut cache = DecodeCache::new(&params, &fm, t)?;
        for &tok in &tokens {
            std::hint::black_box(decode_step(&mut cache, tok)?);
        }
        seq_times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let t_parallel_ms = median(par_times);
    let t_sequential_ms = median(seq_times);
    Ok(BenchReport { t, reps, t_parallel_ms, t_sequential_ms, speedup: t_sequential_ms / t_parallel_ms })
}
