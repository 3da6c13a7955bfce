//! Dataset manifest: JSON lines, one scene per line.
//!
//! Record fields: `seed` (u64), `caption` (string), `regions` (list of
//! `{box: [x, y, w, h], object, color}`), and exactly one of `image`
//! (PNG path relative to the manifest) or `image_b64` (base64 PNG).
//! The generator's palette is 8-bit, so PNG round trips are lossless.

use super::{Region, SceneSample};
use crate::encoder::{BBox, ImageTensor};
use crate::error::{Error, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    object: String,
    color: String,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    seed: u64,
    caption: String,
    regions: Vec<RegionRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let s = img.size as u32;
    let mut rgb = image::RgbImage::new(s, s);
    for y in 0..img.size {
        for x in 0..img.size {
            let px = img.pixel(x, y);
            rgb.put_pixel(
                x as u32,
                y as u32,
                image::Rgb(px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)),
            );
        }
    }
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    if w != h {
        return Err(Error::Image(format!("expected a square canvas, got {w}x{h}")));
    }
    let size = w as usize;
    let mut img = ImageTensor::filled(size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let p = decoded.get_pixel(x as u32, y as u32);
            img.set_pixel(x, y, [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]);
        }
    }
    Ok(img)
}

/// Write PNGs plus `manifest.jsonl` under `dir`; with `inline` the images
/// are embedded as base64 instead. Returns the manifest path.
pub fn write_manifest(
    dir: &Path,
    samples: &[SceneSample],
    inline: bool,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let png = encode_png(&s.image)?;
        let (image, image_b64) = if inline {
            (None, Some(B64.encode(&png)))
        } else {
            let name = format!("scene_{i:06}.png");
            std::fs::write(dir.join(&name), &png)?;
            (Some(name), None)
        };
        let record = SceneRecord {
            seed: s.seed,
            caption: s.caption.clone(),
            regions: s
                .regions
                .iter()
                .map(|r| RegionRecord {
                    bbox: [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h],
                    object: r.object.clone(),
                    color: r.color.clone(),
                })
                .collect(),
            image,
            image_b64,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    std::fs::write(&manifest_path, out)?;
    Ok(manifest_path)
}

pub fn load_manifest(manifest_path: &Path) -> Result<Vec<SceneSample>> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let file = std::fs::File::open(manifest_path)?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("manifest line {}: {e}", lineno + 1)))?;
        let png = match (&record.image, &record.image_b64) {
            (Some(rel), None) => std::fs::read(dir.join(rel))?,
            (None, Some(b64)) => B64
                .decode(b64)
                .map_err(|e| Error::Parse(format!("manifest line {}: {e}", lineno + 1)))?,
            _ => {
                return Err(Error::Parse(format!(
                    "manifest line {}: need exactly one of image/image_b64",
                    lineno + 1
                )))
            }
        };
        samples.push(SceneSample {
            image: decode_png(&png)?,
            caption: record.caption,
            regions: record
                .regions
                .into_iter()
                .map(|r| Region {
                    bbox: BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]),
                    object: r.object,
                    color: r.color,
                })
                .collect(),
            seed: record.seed,
        });
    }
    Ok(samples)
}
