//! Synthetic shape-scene dataset, vocabulary and tokenization.
//!
//! Scenes are 64x64 rasters of one to three colored shapes with a
//! template caption and tight ground-truth boxes. Generation is a pure
//! function of the seed (SplitMix64, byte-exact across platforms) and the
//! caption is a deterministic function of the rendered geometry, so the
//! image fully determines its caption.
//!
//! Caption templates:
//!   "a <color> <shape>"
//!   "a <color> <shape> and a <color> <shape>"        (diagonal layouts)
//!   "a <color> <shape> left of a <color> <shape>"    (horizontal layouts)
//!   "a <color> <shape> above a <color> <shape>"      (vertical layouts)
//! and the chained form "... and ... and ..." for three objects, read
//! left to right. Shapes never repeat within a scene, so every region's
//! object word appears in the caption exactly once.

pub mod coco;
pub mod manifest;

use crate::encoder::{BBox, ImageTensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const CANVAS: usize = 64;

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];

/// Palette as 8-bit triples so PNG round trips are lossless.
const COLOR_RGB: [[u8; 3]; 4] = [[220, 50, 47], [64, 160, 70], [50, 90, 220], [235, 200, 40]];
const BACKGROUND: [u8; 3] = [236, 236, 236];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Region {
    pub bbox: BBox,
    pub object: String,
    pub color: String,
}

#[derive(Clone, Debug)]
pub struct SceneSample {
    pub image: ImageTensor,
    pub caption: String,
    pub regions: Vec<Region>,
    pub seed: u64,
}

#[derive(Clone, Copy)]
struct PlacedObject {
    shape: usize,
    color: usize,
    bbox: BBox,
}

impl PlacedObject {
    fn center(&self) -> (f64, f64) {
        (self.bbox.x + self.bbox.w / 2.0, self.bbox.y + self.bbox.h / 2.0)
    }
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x < b.x + b.w + margin
        && b.x < a.x + a.w + margin
        && a.y < b.y + b.h + margin
        && b.y < a.y + a.h + margin
}

/// Fallback slots guaranteeing termination when rejection sampling fails.
const FALLBACK_SLOTS: [(f64, f64); 3] = [(4.0, 4.0), (36.0, 36.0), (36.0, 4.0)];

pub fn generate_scene(seed: u64) -> SceneSample {
    let mut rng = SplitMix64::new(seed);
    let n_objects = match rng.next_below(10) {
        0..=3 => 1,
        4..=7 => 2,
        _ => 3,
    };
    let mut shape_pool = vec![0usize, 1, 2];
    rng.shuffle(&mut shape_pool);

    let mut objects: Vec<PlacedObject> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let shape = shape_pool[i];
        let color = rng.next_below(COLORS.len() as u64) as usize;
        let side = 12.0 + rng.next_below(13) as f64; // 12..=24 px
        let mut placed = None;
        for _ in 0..64 {
            let x = rng.next_below((CANVAS as u64) - side as u64) as f64;
            let y = rng.next_below((CANVAS as u64) - side as u64) as f64;
            let candidate = BBox::new(x, y, side, side);
            if objects.iter().all(|o| !overlaps(&o.bbox, &candidate, 2.0)) {
                placed = Some(candidate);
                break;
            }
        }
        let bbox = placed.unwrap_or_else(|| {
            let (x, y) = FALLBACK_SLOTS[i];
            BBox::new(x, y, 20.0, 20.0)
        });
        objects.push(PlacedObject { shape, color, bbox });
    }

    let image = rasterize(&objects);
    let ordered = caption_order(&objects);
    let (caption, mentioned) = compose_caption(&ordered);
    let regions = mentioned
        .iter()
        .map(|o| Region {
            bbox: o.bbox,
            object: SHAPES[o.shape].to_string(),
            color: COLORS[o.color].to_string(),
        })
        .collect();
    SceneSample { image, caption, regions, seed }
}

/// Deterministic seed range: sample i of a split uses base + i.
pub fn generate_dataset(base_seed: u64, count: usize) -> Vec<SceneSample> {
    (0..count as u64).map(|i| generate_scene(base_seed + i)).collect()
}

fn rasterize(objects: &[PlacedObject]) -> ImageTensor {
    let bg = BACKGROUND.map(|v| v as f64 / 255.0);
    let mut img = ImageTensor::filled(CANVAS, bg);
    for o in objects {
        let rgb = COLOR_RGB[o.color].map(|v| v as f64 / 255.0);
        let (x0, y0) = (o.bbox.x as usize, o.bbox.y as usize);
        let (w, h) = (o.bbox.w as usize, o.bbox.h as usize);
        for py in 0..h {
            for px in 0..w {
                let inside = match SHAPES[o.shape] {
                    "circle" => {
                        let cx = (w as f64 - 1.0) / 2.0;
                        let cy = (h as f64 - 1.0) / 2.0;
                        let r = w.min(h) as f64 / 2.0;
                        let dx = px as f64 - cx;
                        let dy = py as f64 - cy;
                        dx * dx + dy * dy <= r * r
                    }
                    "square" => true,
                    _ => {
                        // triangle: apex at the top center, base on the
                        // bottom edge
                        let fy = py as f64 / (h as f64 - 1.0);
                        let cx = (w as f64 - 1.0) / 2.0;
                        let half = fy * (w as f64 - 1.0) / 2.0;
                        (px as f64 - cx).abs() <= half
                    }
                };
                if inside {
                    img.set_pixel(x0 + px, y0 + py, rgb);
                }
            }
        }
    }
    img
}

/// Reading order: left to right by box center, ties top first.
fn caption_order(objects: &[PlacedObject]) -> Vec<PlacedObject> {
    let mut ordered = objects.to_vec();
    ordered.sort_by(|a, b| {
        let (ax, ay) = a.center();
        let (bx, by) = b.center();
        ax.partial_cmp(&bx).unwrap().then(ay.partial_cmp(&by).unwrap())
    });
    ordered
}

fn phrase(o: &PlacedObject) -> String {
    format!("a {} {}", COLORS[o.color], SHAPES[o.shape])
}

/// The caption plus the objects in mention order (regions follow it).
fn compose_caption(ordered: &[PlacedObject]) -> (String, Vec<PlacedObject>) {
    match ordered {
        [single] => (phrase(single), vec![*single]),
        [first, second] => {
            let (ax, ay) = first.center();
            let (bx, by) = second.center();
            let ddx = (bx - ax).abs();
            let ddy = (by - ay).abs();
            if ddy <= 0.6 * ddx {
                (format!("{} left of {}", phrase(first), phrase(second)), vec![*first, *second])
            } else if ddx <= 0.6 * ddy {
                let (upper, lower) = if ay <= by { (first, second) } else { (second, first) };
                (format!("{} above {}", phrase(upper), phrase(lower)), vec![*upper, *lower])
            } else {
                (format!("{} and {}", phrase(first), phrase(second)), vec![*first, *second])
            }
        }
        many => (many.iter().map(phrase).collect::<Vec<_>>().join(" and "), many.to_vec()),
    }
}

/// A background box for distractor supervision: the largest-margin 16x16
/// box that avoids every object, scanned deterministically.
pub fn background_box(sample: &SceneSample) -> Option<BBox> {
    let size = 16.0;
    let mut best: Option<(f64, BBox)> = None;
    let steps = (CANVAS as f64 - size) as usize / 4;
    for gy in 0..=steps {
        for gx in 0..=steps {
            let b = BBox::new(gx as f64 * 4.0, gy as f64 * 4.0, size, size);
            let clear = sample.regions.iter().all(|r| !overlaps(&r.bbox, &b, 0.0));
            if clear {
                // prefer the box farthest from all objects
                let d: f64 = sample
                    .regions
                    .iter()
                    .map(|r| {
                        let (cx, cy) = (b.x + size / 2.0, b.y + size / 2.0);
                        let (ox, oy) = (r.bbox.x + r.bbox.w / 2.0, r.bbox.y + r.bbox.h / 2.0);
                        ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                if best.as_ref().map(|(bd, _)| d > *bd).unwrap_or(true) {
                    best = Some((d, b));
                }
            }
        }
    }
    best.map(|(_, b)| b)
}

// ── Vocabulary ───────────────────────────────────────────────────────

/// Token <-> id bijection with fixed specials <pad>=0, <start>=1,
/// <end>=2, <unk>=3.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(Error::Vocab("token list must start with the four specials".to_string()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuild the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

/// Tokens ordered by corpus frequency (descending, ties lexicographic),
/// after the four specials.
pub fn build_vocab(captions: &[String]) -> Result<Vocabulary> {
    if captions.is_empty() {
        return Err(Error::Empty("build_vocab"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in captions {
        for w in normalize_words(c) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.map(String::from).to_vec();
    tokens.extend(words.into_iter().map(|(w, _)| w));
    Vocabulary::from_tokens(tokens)
}

/// Lowercase, strip punctuation, split on whitespace, wrap in
/// <start>/<end>; out-of-vocabulary words map to <unk>.
pub fn tokenize_caption(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = vec![START_ID];
    for w in normalize_words(text) {
        ids.push(vocab.id(&w).unwrap_or(UNK_ID));
    }
    ids.push(END_ID);
    ids
}

/// Word ids without any specials, the explainer's view of a caption.
pub fn word_ids(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    normalize_words(text).iter().map(|w| vocab.id(w).unwrap_or(UNK_ID)).collect()
}

/// Words for a decoded id sequence; pad/start/end are dropped, unknown
/// ids render as the <unk> token.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| id != PAD_ID && id != START_ID && id != END_ID)
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}
