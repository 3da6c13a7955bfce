//! SVG rendering of explanations and training curves.
//!
//! The explanation view embeds the raster, draws one colored rectangle per
//! selected region-word pair, re-prints the caption with the selected
//! words in their region's color, and appends a legend. Colors cycle
//! through a fixed 8-entry palette by region index, so identical inputs
//! render byte-identically.

use crate::dataset::manifest::encode_png;
use crate::encoder::{BBox, ImageTensor};
use crate::error::{Error, Result};
use crate::interp::{select_pairs, PairSelection};
use crate::rwa::RelevanceMatrix;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use std::fmt::Write as _;

pub const PALETTE: [&str; 8] =
    ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#2196c9", "#f032e6", "#808000"];
const NEUTRAL: &str = "#333333";
const SCALE: usize = 4;

pub fn region_color(region: usize) -> &'static str {
    PALETTE[region % PALETTE.len()]
}

/// Render the image, the boxes of the selected pairs, the color-matched
/// caption and a legend. The selection is exactly
/// `select_pairs(matrix, factor)`.
pub fn render_explanation(
    img: &ImageTensor,
    caption_words: &[String],
    boxes: &[BBox],
    matrix: &RelevanceMatrix,
    factor: f64,
) -> Result<String> {
    if caption_words.len() != matrix.n_words || boxes.len() != matrix.n_regions {
        return Err(Error::shape(
            "render_explanation",
            format!(
                "matrix is {}x{}, got {} boxes and {} words",
                matrix.n_regions,
                matrix.n_words,
                boxes.len(),
                caption_words.len()
            ),
        ));
    }
    let sel = select_pairs(matrix, factor);
    Ok(render_selection(img, caption_words, boxes, &sel))
}

fn render_selection(
    img: &ImageTensor,
    caption_words: &[String],
    boxes: &[BBox],
    sel: &PairSelection,
) -> String {
    let side = img.size * SCALE;
    let caption_y = side + 28;
    let legend_y0 = side + 56;
    let height = legend_y0 + 20 * sel.len().max(1);
    let png = encode_png(img).expect("raster encodes");
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{height}\" \
         viewBox=\"0 0 {side} {height}\">\n"
    );
    let _ = write!(
        svg,
        "  <image x=\"0\" y=\"0\" width=\"{side}\" height=\"{side}\" \
         href=\"data:image/png;base64,{}\"/>\n",
        B64.encode(&png)
    );
    for p in &sel.pairs {
        let b = &boxes[p.region];
        let _ = write!(
            svg,
            "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" \
             stroke=\"{}\" stroke-width=\"2\"/>\n",
            fmt(b.x * SCALE as f64),
            fmt(b.y * SCALE as f64),
            fmt(b.w * SCALE as f64),
            fmt(b.h * SCALE as f64),
            region_color(p.region)
        );
    }
    let _ = write!(svg, "  <text x=\"8\" y=\"{caption_y}\" font-family=\"monospace\" font-size=\"14\">");
    for (j, word) in caption_words.iter().enumerate() {
        let color = sel
            .pairs
            .iter()
            .find(|p| p.word == j)
            .map(|p| region_color(p.region))
            .unwrap_or(NEUTRAL);
        let _ = write!(svg, "<tspan fill=\"{}\">{}</tspan> ", color, escape(word));
    }
    svg.push_str("</text>\n");
    for (row, p) in sel.pairs.iter().enumerate() {
        let _ = write!(
            svg,
            "  <text x=\"8\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{}\">\
             region {} &#8596; {} (p={})</text>\n",
            legend_y0 + 20 * row,
            region_color(p.region),
            p.region,
            escape(&caption_words[p.word]),
            fmt(p.relevance)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

// ── Curves ───────────────────────────────────────────────────────────

pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or(Error::Empty("csv: missing header"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("csv row {}: {e}", i + 2)))?;
        if row.len() != header.len() {
            return Err(Error::Parse(format!(
                "csv row {}: {} fields, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Line chart of the requested columns against the first column, linear
/// scales, labels taken verbatim from the header.
pub fn render_curves(csv: &str, columns: &[String]) -> Result<String> {
    let (header, rows) = parse_csv(csv)?;
    if rows.is_empty() {
        return Err(Error::Empty("render_curves: no data rows"));
    }
    let mut idx = Vec::with_capacity(columns.len());
    for c in columns {
        let i = header
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| Error::invalid("render_curves", format!("unknown column {c:?}")))?;
        idx.push(i);
    }
    if idx.is_empty() {
        return Err(Error::invalid("render_curves", "no columns requested".to_string()));
    }

    let (w, h) = (480.0, 320.0);
    let (ml, mr, mt, mb) = (56.0, 16.0, 16.0, 48.0);
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let (x_min, x_max) = bounds(&xs);
    let mut ys = Vec::new();
    for &i in &idx {
        ys.extend(rows.iter().map(|r| r[i]));
    }
    let (y_min, y_max) = bounds(&ys);
    let sx = |x: f64| ml + (x - x_min) / (x_max - x_min).max(1e-12) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y_min) / (y_max - y_min).max(1e-12) * (h - mt - mb);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = write!(
        svg,
        "  <rect x=\"{ml}\" y=\"{mt}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
        w - ml - mr,
        h - mt - mb
    );
    for (k, &i) in idx.iter().enumerate() {
        let mut points = String::new();
        for r in &rows {
            let _ = write!(points, "{},{} ", fmt(sx(r[0])), fmt(sy(r[i])));
        }
        let color = PALETTE[k % PALETTE.len()];
        let _ = write!(
            svg,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.trim_end()
        );
        let _ = write!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
             fill=\"{color}\">{}</text>\n",
            ml + 8.0 + 110.0 * k as f64,
            mt + 14.0,
            escape(&header[i])
        );
    }
    // axis labels, verbatim from the header
    let _ = write!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\">{}</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0,
        escape(&header[0])
    );
    let _ = write!(
        svg,
        "  <text x=\"14\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        escape(&columns.join(" / "))
    );
    // min/max ticks
    let _ = write!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
        4.0,
        sy(y_min),
        fmt(y_min)
    );
    let _ = write!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
        4.0,
        sy(y_max) + 10.0,
        fmt(y_max)
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds(xs: &[f64]) -> (f64, f64) {
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (max - min).abs() < 1e-12 {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal well-formedness check: tags balance and nest properly.
    pub fn xml_well_formed(doc: &str) -> bool {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = doc;
        while let Some(open) = rest.find('<') {
            rest = &rest[open + 1..];
            let Some(close) = rest.find('>') else { return false };
            let tag = &rest[..close];
            rest = &rest[close + 1..];
            if tag.starts_with('?') || tag.starts_with('!') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                match stack.pop() {
                    Some(top) if top == name => {}
                    _ => return false,
                }
            } else if !tag.ends_with('/') {
                let name: String =
                    tag.chars().take_while(|c| !c.is_whitespace() && *c != '>').collect();
                stack.push(name);
            }
        }
        stack.is_empty()
    }

    fn fig4_matrix() -> RelevanceMatrix {
        let words: Vec<String> =
            ["a", "woman", "sitting", "in", "front", "of", "a", "laptop", "computer"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let boxes = vec![
            BBox::new(4.0, 4.0, 20.0, 20.0),
            BBox::new(30.0, 28.0, 24.0, 24.0),
            BBox::new(8.0, 40.0, 16.0, 16.0),
        ];
        let values = vec![
            0.152, 0.579, 0.056, 0.009, 0.006, 0.028, 0.152, 0.001, 0.012,
            0.005, 0.004, 0.953, 0.001, 0.020, 0.001, 0.005, 0.002, 0.003,
            0.111, 0.111, 0.111, 0.111, 0.111, 0.111, 0.111, 0.111, 0.111,
        ];
        RelevanceMatrix::new(values, 3, 9, boxes, words).unwrap()
    }

    #[test]
    fn uniform_matrix_renders_no_boxes_and_plain_caption() {
        let words: Vec<String> = (0..4).map(|i| format!("w{i}")).collect();
        let boxes = vec![BBox::new(0.0, 0.0, 16.0, 16.0), BBox::new(20.0, 20.0, 16.0, 16.0)];
        let m = RelevanceMatrix::new(vec![0.25; 8], 2, 4, boxes.clone(), words.clone()).unwrap();
        let img = ImageTensor::filled(64, [0.9; 3]);
        let svg = render_explanation(&img, &words, &boxes, &m, 2.0).unwrap();
        assert!(!svg.contains("<rect x="), "no boxes for an empty selection");
        assert!(!svg.contains("region 0 &#8596;"), "legend must be empty");
        assert_eq!(svg.matches(NEUTRAL).count(), 4, "all words neutral");
    }

    #[test]
    fn strong_pair_matrix_renders_two_boxes_and_two_colored_words() {
        let m = fig4_matrix();
        let img = ImageTensor::filled(64, [0.8; 3]);
        let words = m.words.clone();
        let boxes = m.boxes.clone();
        let svg = render_explanation(&img, &words, &boxes, &m, 2.0).unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 2);
        assert_eq!(svg.matches(region_color(0)).count(), 3, "box, word and legend share color");
        // "woman" is colored with region 0's color, "sitting" with region 1's
        assert!(svg.contains(&format!("<tspan fill=\"{}\">woman</tspan>", region_color(0))));
        assert!(svg.contains(&format!("<tspan fill=\"{}\">sitting</tspan>", region_color(1))));
        // the selected pairs in the render match select_pairs exactly
        let sel = select_pairs(&m, 2.0);
        assert_eq!(svg.matches("&#8596;").count(), sel.len());
    }

    #[test]
    fn svg_is_well_formed_and_deterministic() {
        let m = fig4_matrix();
        let img = ImageTensor::filled(64, [0.7, 0.8, 0.9]);
        let words = m.words.clone();
        let boxes = m.boxes.clone();
        let a = render_explanation(&img, &words, &boxes, &m, 2.0).unwrap();
        let b = render_explanation(&img, &words, &boxes, &m, 2.0).unwrap();
        assert_eq!(a, b, "identical inputs must render byte-identically");
        assert!(xml_well_formed(&a), "svg must be well-formed xml");
    }

    #[test]
    fn mismatched_dimensions_error() {
        let m = fig4_matrix();
        let img = ImageTensor::filled(64, [0.5; 3]);
        let words = m.words[..5].to_vec();
        let boxes = m.boxes.clone();
        assert!(render_explanation(&img, &words, &boxes, &m, 2.0).is_err());
    }

    #[test]
    fn curves_have_one_point_per_row_and_verbatim_labels() {
        let csv = "epoch,ce_loss,ie_loss,total\n0,2.5,0.5,3.0\n1,2.0,0.4,2.4\n2,1.5,0.3,1.8\n";
        let svg =
            render_curves(csv, &["ce_loss".to_string(), "total".to_string()]).unwrap();
        assert!(xml_well_formed(&svg));
        assert_eq!(svg.matches("<polyline").count(), 2);
        for line in svg.lines().filter(|l| l.contains("<polyline")) {
            let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            assert_eq!(pts.split(' ').count(), 3, "one point per data row");
        }
        assert!(svg.contains(">epoch</text>"));
        assert!(svg.contains(">ce_loss</text>"));
        assert!(svg.contains(">total</text>"));
    }

    #[test]
    fn empty_data_and_unknown_columns_error() {
        assert!(render_curves("epoch,loss\n", &["loss".to_string()]).is_err());
        let csv = "epoch,loss\n0,1.0\n";
        let err = render_curves(csv, &["nope".to_string()]).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
