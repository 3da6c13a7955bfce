//! Compact convolutional image encoder.
//!
//! Four 3x3 stride-2 conv blocks with ELU take a 64x64 RGB canvas down to
//! the attention grid (default 64 channels over 4x4 cells). Regions are
//! encoded by cropping, bilinear-resizing back to the canvas, running the
//! same network and projecting the mean-pooled grid to a region vector.
//! The captioner and the region-word scorer each own an independent
//! parameter set of this architecture.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

pub const MIN_CROP: f64 = 4.0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    /// Square canvas edge in pixels.
    pub canvas: usize,
    /// Output channels of the four stride-2 blocks; the last is the
    /// feature-map channel count V.
    pub channels: Vec<usize>,
    /// Region vector dimension d_r.
    pub region_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { canvas: 64, channels: vec![12, 24, 48, 64], region_dim: 64 }
    }
}

impl EncoderConfig {
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("at least one conv block")
    }

    pub fn grid(&self) -> usize {
        self.canvas >> self.channels.len()
    }

    pub fn cells(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// RGB raster in [0,1], channels-first [3, canvas, canvas].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Vec<f64>,
    pub size: usize,
}

impl ImageTensor {
    pub fn new(data: Vec<f64>, size: usize) -> Self {
        assert_eq!(data.len(), 3 * size * size);
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ImageTensor { data, size }
    }

    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let mut data = vec![0.0; 3 * size * size];
        for c in 0..3 {
            data[c * size * size..(c + 1) * size * size].fill(rgb[c].clamp(0.0, 1.0));
        }
        ImageTensor { data, size }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let s = self.size;
        [self.data[y * s + x], self.data[s * s + y * s + x], self.data[2 * s * s + y * s + x]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let s = self.size;
        self.data[y * s + x] = rgb[0].clamp(0.0, 1.0);
        self.data[s * s + y * s + x] = rgb[1].clamp(0.0, 1.0);
        self.data[2 * s * s + y * s + x] = rgb[2].clamp(0.0, 1.0);
    }
}

/// Axis-aligned pixel box, corner + extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self, canvas: usize) -> Result<()> {
        let c = canvas as f64;
        if !(self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= c && self.y + self.h <= c) {
            return Err(Error::Region(format!(
                "box ({}, {}, {}, {}) outside {canvas}x{canvas} canvas",
                self.x, self.y, self.w, self.h
            )));
        }
        if self.w < MIN_CROP || self.h < MIN_CROP {
            return Err(Error::Region(format!(
                "box {}x{} below minimum crop size {MIN_CROP}",
                self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Pooled region embedding plus its source box.
#[derive(Clone, Debug)]
pub struct RegionVector {
    pub vec: Vec<f64>,
    pub bbox: BBox,
}

/// The convolutional trunk. The captioner uses it bare; the region branch
/// adds a [`RegionHead`] on top.
#[derive(Clone)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl EncoderParams {
    pub fn init(cfg: EncoderConfig, rng: &mut SplitMix64) -> Self {
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3usize;
        for &cout in &cfg.channels {
            kernels.push(Tensor::randn_fan_in(&[cout, cin, 3, 3], cin * 9, rng));
            biases.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        EncoderParams { cfg, kernels, biases }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            out.push((format!("conv{i}.kernel"), k));
            out.push((format!("conv{i}.bias"), b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.kernels.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("conv{i}.kernel"), k));
            out.push((format!("conv{i}.bias"), b));
        }
        out
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> EncoderNodes {
        EncoderNodes {
            kernels: self.kernels.iter().map(|k| tape.leaf(k, requires_grad)).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b, requires_grad)).collect(),
        }
    }
}

pub struct EncoderNodes {
    pub kernels: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl EncoderNodes {
    /// Ids in `EncoderParams::named_tensors` order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            out.push(*k);
            out.push(*b);
        }
        out
    }
}

/// Pooled-grid projection to the region vector space.
#[derive(Clone)]
pub struct RegionHead {
    pub proj: Tensor,      // [V, d_r]
    pub proj_bias: Tensor, // [d_r]
}

impl RegionHead {
    pub fn init(cfg: &EncoderConfig, rng: &mut SplitMix64) -> Self {
        let v = cfg.feature_channels();
        RegionHead {
            proj: Tensor::randn_fan_in(&[v, cfg.region_dim], v, rng),
            proj_bias: Tensor::zeros(&[cfg.region_dim]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("region_proj.weight".to_string(), &self.proj),
            ("region_proj.bias".to_string(), &self.proj_bias),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("region_proj.weight".to_string(), &mut self.proj),
            ("region_proj.bias".to_string(), &mut self.proj_bias),
        ]
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> RegionHeadNodes {
        RegionHeadNodes {
            proj: tape.leaf(&self.proj, requires_grad),
            proj_bias: tape.leaf(&self.proj_bias, requires_grad),
        }
    }
}

pub struct RegionHeadNodes {
    pub proj: NodeId,
    pub proj_bias: NodeId,
}

impl RegionHeadNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.proj, self.proj_bias]
    }
}

/// Encode a batch of canvas-sized images to the feature grid [B, V, g, g].
pub fn encode_batch(
    tape: &mut Tape,
    nodes: &EncoderNodes,
    cfg: &EncoderConfig,
    images: &[&ImageTensor],
) -> Result<NodeId> {
    if images.is_empty() {
        return Err(Error::Empty("encode_batch"));
    }
    for img in images {
        if img.size != cfg.canvas {
            return Err(Error::shape(
                "encode_image",
                format!("canvas {} expected, image is {}", cfg.canvas, img.size),
            ));
        }
    }
    let b = images.len();
    let plane = 3 * cfg.canvas * cfg.canvas;
    let mut data = Vec::with_capacity(b * plane);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    let mut x = tape.constant(data, vec![b, 3, cfg.canvas, cfg.canvas]);
    for (k, bias) in nodes.kernels.iter().zip(&nodes.biases) {
        x = tape.conv2d(x, *k, *bias, 2, 1)?;
        x = tape.elu(x, 1.0)?;
    }
    Ok(x)
}

/// Mean-pool a [B, V, g, g] grid and project to region vectors [B, d_r].
pub fn pool_and_project(tape: &mut Tape, head: &RegionHeadNodes, fm: NodeId) -> Result<NodeId> {
    let sh = tape.shape(fm).to_vec();
    let (b, v, cells) = (sh[0], sh[1], sh[2] * sh[3]);
    let flat = tape.reshape(fm, vec![b, v, cells])?;
    let pooled = tape.pool_mean(flat, 2)?; // [B, V]
    let p = tape.matmul(pooled, head.proj)?;
    tape.add(p, head.proj_bias)
}

/// Crop a box out of an image and bilinear-resize it back to canvas size.
/// The full-canvas box reproduces the image exactly.
pub fn crop_resize(img: &ImageTensor, bbox: &BBox, canvas: usize) -> Result<ImageTensor> {
    bbox.validate(img.size)?;
    let (x0, y0) = (bbox.x.round() as usize, bbox.y.round() as usize);
    let cw = (bbox.w.round() as usize).max(1);
    let ch = (bbox.h.round() as usize).max(1);
    let s = img.size;
    let mut out = vec![0.0; 3 * canvas * canvas];
    let sx = cw as f64 / canvas as f64;
    let sy = ch as f64 / canvas as f64;
    for oy in 0..canvas {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(ch - 1);
        let dy = fy - y_lo as f64;
        for ox in 0..canvas {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(cw - 1);
            let dx = fx - x_lo as f64;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| img.data[c * s * s + (y0 + yy) * s + (x0 + xx)];
                let v = if dx == 0.0 && dy == 0.0 {
                    at(y_lo, x_lo)
                } else {
                    at(y_lo, x_lo) * (1.0 - dx) * (1.0 - dy)
                        + at(y_lo, x_hi) * dx * (1.0 - dy)
                        + at(y_hi, x_lo) * (1.0 - dx) * dy
                        + at(y_hi, x_hi) * dx * dy
                };
                out[c * canvas * canvas + oy * canvas + ox] = v;
            }
        }
    }
    Ok(ImageTensor { data: out, size: canvas })
}

/// Encode one image outside any training graph.
pub fn encode_image_value(params: &EncoderParams, img: &ImageTensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let nodes = params.register(&mut tape, false);
    let fm = encode_batch(&mut tape, &nodes, &params.cfg, &[img])?;
    let sh = tape.shape(fm).to_vec();
    let t = tape.value(fm);
    Ok(Tensor::new(t.data, sh[1..].to_vec()))
}

/// Encode a region (crop, resize, encode, pool, project) outside any graph.
pub fn encode_region_value(
    params: &EncoderParams,
    head: &RegionHead,
    img: &ImageTensor,
    bbox: &BBox,
) -> Result<RegionVector> {
    let crop = crop_resize(img, bbox, params.cfg.canvas)?;
    let mut tape = Tape::inference();
    let nodes = params.register(&mut tape, false);
    let head_nodes = head.register(&mut tape, false);
    let fm = encode_batch(&mut tape, &nodes, &params.cfg, &[&crop])?;
    let rv = pool_and_project(&mut tape, &head_nodes, fm)?;
    Ok(RegionVector { vec: tape.data(rv).to_vec(), bbox: *bbox })
}

/// Crop+resize a batch of regions, encode and project them on the tape.
/// Returns [n, d_r].
pub fn encode_regions(
    tape: &mut Tape,
    nodes: &EncoderNodes,
    head: &RegionHeadNodes,
    cfg: &EncoderConfig,
    img: &ImageTensor,
    boxes: &[BBox],
) -> Result<NodeId> {
    if boxes.is_empty() {
        return Err(Error::Empty("encode_regions"));
    }
    let crops: Vec<ImageTensor> =
        boxes.iter().map(|b| crop_resize(img, b, cfg.canvas)).collect::<Result<_>>()?;
    let refs: Vec<&ImageTensor> = crops.iter().collect();
    let fm = encode_batch(tape, nodes, cfg, &refs)?;
    pool_and_project(tape, head, fm)
}
