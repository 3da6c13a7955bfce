//! COCO-style annotation ingestion: both captions files (annotations carry
//! a caption string) and instances files (annotations carry a bbox and
//! category) join against the image list by image_id.

use crate::error::{Error, Result};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    file_name: Option<String>,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    category_id: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// A box joined to its image, converted from [x, y, w, h] to corner form.
#[derive(Clone, Debug, PartialEq)]
pub struct CocoBox {
    /// (x1, y1, x2, y2)
    pub corners: (f64, f64, f64, f64),
    pub category_id: u64,
    pub category: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct CocoSample {
    pub image_id: u64,
    pub file_name: Option<String>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub captions: Vec<String>,
    pub boxes: Vec<CocoBox>,
}

pub fn load_coco_annotations(path: &Path) -> Result<Vec<CocoSample>> {
    let text = std::fs::read_to_string(path)?;
    parse_coco_annotations(&text)
}

pub fn parse_coco_annotations(text: &str) -> Result<Vec<CocoSample>> {
    let file: CocoFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("COCO json: {e}")))?;
    let categories: BTreeMap<u64, String> =
        file.categories.into_iter().map(|c| (c.id, c.name)).collect();
    let mut samples: BTreeMap<u64, CocoSample> = BTreeMap::new();
    for img in file.images {
        samples.insert(
            img.id,
            CocoSample {
                image_id: img.id,
                file_name: img.file_name,
                width: img.width,
                height: img.height,
                ..Default::default()
            },
        );
    }
    for ann in file.annotations {
        let sample = samples.get_mut(&ann.image_id).ok_or_else(|| {
            Error::Integrity(format!("annotation references missing image_id {}", ann.image_id))
        })?;
        if let Some(caption) = ann.caption {
            sample.captions.push(caption);
        }
        if let Some([x, y, w, h]) = ann.bbox {
            sample.boxes.push(CocoBox {
                corners: (x, y, x + w, y + h),
                category_id: ann.category_id.unwrap_or(0),
                category: ann.category_id.and_then(|id| categories.get(&id).cloned()),
            });
        }
    }
    Ok(samples.into_values().collect())
}
