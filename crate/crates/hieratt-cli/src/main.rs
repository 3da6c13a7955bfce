//! Command-line front end: dataset generation, the three training stages,
//! captioning, explanation rendering, evaluation and the decoder benchmark.
//!
//! Machine-readable outputs land under --out; every artifact is written
//! via a temp-file rename so failed runs leave nothing partial behind.

use clap::{Args, Parser, Subcommand};
use hieratt::dataset::manifest::{decode_png, load_manifest, write_manifest};
use hieratt::dataset::{build_vocab, generate_dataset, normalize_words, word_ids, SceneSample};
use hieratt::decoder::{decoder_param_count, DecoderConfig};
use hieratt::encoder::{BBox, EncoderConfig, ImageTensor};
use hieratt::error::{Error, Result};
use hieratt::render::{render_curves, render_explanation};
use hieratt::rwa::RwaConfig;
use hieratt::trainer::{
    benchmark_decoder, evaluate, train_caption_phase1, train_caption_phase2, train_rwa,
    CaptionModel, LossCurve, RwaModel, TrainConfig,
};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hieratt", version, about = "Explainable shape-scene captioning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset manifest (JSON lines) produced by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate this many scenes in memory instead of loading --data.
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Base seed for data generation, init, shuffling and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file with train/decoder/encoder/rwa sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// IE loss weight for retraining.
    #[arg(long)]
    lambda_ie: Option<f64>,
    /// Pair-selection factor c (threshold is c / word count).
    #[arg(long)]
    threshold_factor: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (PNGs + manifest.jsonl).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Embed images in the manifest as base64 instead of files.
        #[arg(long)]
        inline: bool,
    },
    /// Train the region-word attention scorer.
    TrainRwa {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Phase-1 caption training (cross entropy only).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Scorer checkpoint used to seed the shared embedding table.
        #[arg(long)]
        rwa: Option<PathBuf>,
        /// Resume from an existing caption checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Phase-2 retraining with the interpretability loss blended in.
    RetrainIe {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Phase-1 caption checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Trained scorer checkpoint (frozen during retraining).
        #[arg(long)]
        rwa: PathBuf,
    },
    /// Caption one PNG image.
    Caption {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Render the color-coded explanation for one scene.
    Explain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rwa: PathBuf,
        /// PNG to explain; requires --boxes.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Region boxes as "x,y,w,h;x,y,w,h".
        #[arg(long)]
        boxes: Option<String>,
        /// Manifest to pull a scene (with its ground-truth boxes) from.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scene index within --data.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Greedy-decode a split and report BLEU/ROUGE-L/CIDEr.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Time the full-sequence pass against sequential decoding.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 32)]
        t: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Print parameter counts for a configuration without training.
    Params {
        /// Use the published large-model dimensions (2048/300/512/9489).
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: Option<TrainConfig>,
    decoder: Option<DecoderConfig>,
    encoder: Option<EncoderConfig>,
    rwa: Option<RwaConfig>,
}

struct Resolved {
    train: TrainConfig,
    decoder: DecoderConfig,
    encoder: EncoderConfig,
    rwa: RwaConfig,
    out: PathBuf,
}

fn resolve(common: &CommonArgs) -> Result<Resolved> {
    let file: FileConfig = match &common.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))?,
        None => FileConfig::default(),
    };
    let mut train = file.train.unwrap_or_default();
    if let Some(seed) = common.seed {
        train.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        train.epochs = epochs;
    }
    if let Some(l) = common.lambda_ie {
        train.lambda_ie = l;
    }
    if let Some(c) = common.threshold_factor {
        train.selection_factor = c;
    }
    Ok(Resolved {
        train,
        decoder: file.decoder.unwrap_or_default(),
        encoder: file.encoder.unwrap_or_default(),
        rwa: file.rwa.unwrap_or_default(),
        out: common.out.clone(),
    })
}

fn load_data(args: &DataArgs, seed: u64) -> Result<Vec<SceneSample>> {
    match &args.data {
        Some(path) => load_manifest(path),
        None => Ok(generate_dataset(seed, args.scenes)),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn save_model_atomic(save: impl Fn(&Path) -> Result<()>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp~");
    save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn emit_curve(out: &Path, stem: &str, curve: &LossCurve) -> Result<()> {
    let csv = curve.to_csv();
    write_atomic(&out.join(format!("{stem}.csv")), csv.as_bytes())?;
    let svg = render_curves(
        &csv,
        &["ce_loss".to_string(), "ie_loss".to_string(), "total".to_string()],
    )?;
    write_atomic(&out.join(format!("{stem}.svg")), svg.as_bytes())?;
    Ok(())
}

fn load_png_image(path: &Path) -> Result<ImageTensor> {
    decode_png(&std::fs::read(path)?)
}

fn parse_boxes(spec: &str) -> Result<Vec<BBox>> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|b| {
            let parts: Vec<f64> = b
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("box {b:?}: {e}")))?;
            if parts.len() != 4 {
                return Err(Error::Parse(format!("box {b:?}: need x,y,w,h")));
            }
            Ok(BBox::new(parts[0], parts[1], parts[2], parts[3]))
        })
        .collect()
}

fn vocab_from(data: &[SceneSample]) -> Result<hieratt::dataset::Vocabulary> {
    let captions: Vec<String> = data.iter().map(|s| s.caption.clone()).collect();
    build_vocab(&captions)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, count, inline } => {
            let cfg = resolve(&common)?;
            let data = generate_dataset(cfg.train.seed, count);
            let manifest = write_manifest(&cfg.out, &data, inline)?;
            println!("wrote {count} scenes to {}", manifest.display());
        }

        Command::TrainRwa { common, data } => {
            let cfg = resolve(&common)?;
            let samples = load_data(&data, cfg.train.seed)?;
            // vocabulary from the whole split so downstream checkpoints share it
            let vocab = vocab_from(&samples)?;
            let samples = &samples[..samples.len().min(cfg.train.rwa_scenes.max(1))];
            let mut model = RwaModel::new(cfg.encoder, cfg.rwa, vocab, cfg.train.seed)?;
            let curve = train_rwa(&mut model, samples, &cfg.train)?;
            save_model_atomic(|p| model.save(p), &cfg.out.join("rwa.hck"))?;
            emit_curve(&cfg.out, "rwa_curve", &curve)?;
            println!(
                "trained scorer on {} scenes for {} epochs; final loss {:.6}",
                samples.len(),
                cfg.train.epochs,
                curve.rows.last().map(|r| r.total).unwrap_or(f64::NAN)
            );
        }

        Command::Train { common, data, rwa, resume } => {
            let cfg = resolve(&common)?;
            let samples = load_data(&data, cfg.train.seed)?;
            let mut model = match resume {
                Some(path) => CaptionModel::load(&path)?,
                None => {
                    let vocab = vocab_from(&samples)?;
                    let mut m =
                        CaptionModel::new(cfg.encoder, cfg.decoder, vocab, cfg.train.seed)?;
                    if let Some(rwa_path) = &rwa {
                        m.adopt_embedding(&RwaModel::load(rwa_path)?)?;
                    }
                    m
                }
            };
            let curve = train_caption_phase1(&mut model, &samples, &cfg.train)?;
            save_model_atomic(|p| model.save(p), &cfg.out.join("cap.hck"))?;
            emit_curve(&cfg.out, "phase1_curve", &curve)?;
            println!(
                "phase-1 trained on {} scenes for {} epochs; final CE {:.6}",
                samples.len(),
                cfg.train.epochs,
                curve.rows.last().map(|r| r.ce_loss).unwrap_or(f64::NAN)
            );
        }

        Command::RetrainIe { common, data, ckpt, rwa } => {
            let cfg = resolve(&common)?;
            let samples = load_data(&data, cfg.train.seed)?;
            let mut model = CaptionModel::load(&ckpt)?;
            let rwa_model = RwaModel::load(&rwa)?;
            let curve = train_caption_phase2(&mut model, &rwa_model, &samples, &cfg.train)?;
            save_model_atomic(|p| model.save(p), &cfg.out.join("cap_ie.hck"))?;
            emit_curve(&cfg.out, "phase2_curve", &curve)?;
            println!(
                "phase-2 retrained on {} scenes for {} epochs (lambda {}); final total {:.6}",
                samples.len(),
                cfg.train.epochs,
                cfg.train.lambda_ie,
                curve.rows.last().map(|r| r.total).unwrap_or(f64::NAN)
            );
        }

        Command::Caption { common, ckpt, image } => {
            let cfg = resolve(&common)?;
            let model = CaptionModel::load(&ckpt)?;
            let img = load_png_image(&image)?;
            let (caption, ids) = model.caption(&img)?;
            let payload = serde_json::json!({ "caption": caption, "token_ids": ids });
            write_atomic(&cfg.out.join("caption.json"), payload.to_string().as_bytes())?;
            println!("{caption}");
        }

        Command::Explain { common, ckpt, rwa, image, boxes, data, index } => {
            let cfg = resolve(&common)?;
            let model = CaptionModel::load(&ckpt)?;
            let rwa_model = RwaModel::load(&rwa)?;
            let (img, gt_boxes) = match (&image, &data) {
                (Some(path), None) => {
                    let spec = boxes.as_deref().ok_or_else(|| {
                        Error::invalid("explain", "--image needs --boxes".to_string())
                    })?;
                    (load_png_image(path)?, parse_boxes(spec)?)
                }
                (None, Some(manifest)) => {
                    let samples = load_manifest(manifest)?;
                    let s = samples.into_iter().nth(index).ok_or_else(|| {
                        Error::invalid("explain", format!("index {index} out of range"))
                    })?;
                    let bx = s.regions.iter().map(|r| r.bbox).collect();
                    (s.image, bx)
                }
                _ => {
                    return Err(Error::invalid(
                        "explain",
                        "pass either --image with --boxes, or --data with --index".to_string(),
                    ))
                }
            };
            let (caption, _) = model.caption(&img)?;
            let ids = word_ids(&caption, &rwa_model.vocab);
            if ids.is_empty() {
                return Err(Error::Empty("explain: decoded caption has no words"));
            }
            let matrix = rwa_model.score(&img, &gt_boxes, &caption)?;
            let words = normalize_words(&caption);
            let svg =
                render_explanation(&img, &words, &gt_boxes, &matrix, cfg.train.selection_factor)?;
            let sel = hieratt::interp::select_pairs(&matrix, cfg.train.selection_factor);
            write_atomic(&cfg.out.join("explanation.svg"), svg.as_bytes())?;
            write_atomic(
                &cfg.out.join("pairs.json"),
                serde_json::to_string_pretty(&sel)?.as_bytes(),
            )?;
            println!("{caption}");
            println!("{} pair(s) above threshold", sel.len());
        }

        Command::Eval { common, data, ckpt } => {
            let cfg = resolve(&common)?;
            let samples = load_data(&data, cfg.train.seed)?;
            let model = CaptionModel::load(&ckpt)?;
            let report = evaluate(&model, &samples)?;
            let json = serde_json::to_string_pretty(&report)?;
            write_atomic(&cfg.out.join("report.json"), json.as_bytes())?;
            println!("{json}");
        }

        Command::Bench { common, ckpt, t, reps } => {
            let cfg = resolve(&common)?;
            let model = CaptionModel::load(&ckpt)?;
            let report = benchmark_decoder(&model, t, reps)?;
            let json = serde_json::to_string_pretty(&report)?;
            write_atomic(&cfg.out.join("bench.json"), json.as_bytes())?;
            println!("{json}");
        }

        Command::Params { paper_scale, config } => {
            if paper_scale {
                let cfg = DecoderConfig::paper_scale();
                let payload = serde_json::json!({
                    "config": "paper-scale",
                    "decoder_params": decoder_param_count(&cfg),
                });
                println!("{}", serde_json::to_string_pretty(&payload)?);
            } else {
                let file: FileConfig = match &config {
                    Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
                        .map_err(|e| Error::Parse(format!("config: {e}")))?,
                    None => FileConfig::default(),
                };
                let enc = file.encoder.unwrap_or_default();
                let mut dec = file.decoder.unwrap_or_default();
                if dec.vocab_size == 0 {
                    // template grammar terminals plus the four specials
                    dec.vocab_size = 16;
                }
                let enc_params: u64 = {
                    let mut total = 0u64;
                    let mut cin = 3u64;
                    for &cout in &enc.channels {
                        total += cout as u64 * cin * 9 + cout as u64;
                        cin = cout as u64;
                    }
                    total
                };
                let dec_params = decoder_param_count(&dec);
                let payload = serde_json::json!({
                    "config": "desk",
                    "encoder_params": enc_params,
                    "decoder_params": dec_params,
                    "total": enc_params + dec_params,
                });
                println!("{}", serde_json::to_string_pretty(&payload)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
