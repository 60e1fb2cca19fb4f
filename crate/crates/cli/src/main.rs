//! `textsal` — synthesize data, inspect captions, precompute embeddings,
//! train and evaluate saliency networks, and run the verification suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 validation/usage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use textsal_core::dataio::{self, load_manifest, AugmentConfig, Split, SynthConfig};
use textsal_core::error::{Error, Result};
use textsal_core::metrics::{self, Aggregation, EvalConfig};
use textsal_core::nets::{self, NetConfig};
use textsal_core::text::{CaptionEncoder, EmbeddingFile, Lexicon};
use textsal_core::training::{
    self, encoder_for_ablation, run_comparison, train_variant, Ablation, TrainConfig, VariantSpec,
};

#[derive(Parser)]
#[command(name = "textsal", version, about = "Language-conditioned salient object detection, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct NetArgs {
    /// Network family: unet or mini-u2.
    #[arg(long, default_value = "unet")]
    arch: String,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    /// Sentence-embedding width the attention blocks expect.
    #[arg(long, default_value_t = 32)]
    d_text: usize,
}

impl NetArgs {
    fn config(&self) -> Result<NetConfig> {
        let cfg = NetConfig {
            arch: self.arch.parse()?,
            depth: self.depth,
            base_channels: self.base_channels,
            input_size: self.input_size,
            d_text: self.d_text,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Initial learning rate of the cosine schedule.
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attention attachment, e.g. "in:1", "in:1-3|out:1"; empty = baseline.
    #[arg(long, default_value = "")]
    attach: String,
    /// none | no-ese | no-res | no-color | no-objects.
    #[arg(long, default_value = "none")]
    ablation: String,
    /// Training crop ratio; the cropped side must stay divisible by the
    /// network's pooling factor.
    #[arg(long, default_value_t = 0.9)]
    crop_ratio: f64,
    /// Disable flips, contrast, and cropping.
    #[arg(long)]
    no_augment: bool,
    /// Precomputed embedding file (JSONL); defaults to the bundled hashing
    /// encoder at --d-text.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Entity lexicon for the no-objects ablation.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr0: self.lr,
            batch_size: self.batch,
            steps: self.steps,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ablation: self.ablation.parse()?,
            attachment: self.attach.clone(),
            augment: AugmentConfig {
                crop_ratio: self.crop_ratio,
                enabled: !self.no_augment,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn encoder(&self, d_text: usize) -> Result<CaptionEncoder> {
        match &self.embeddings {
            Some(path) => {
                let file = EmbeddingFile::load(path)?;
                if file.dim != d_text {
                    return Err(Error::Validation(format!(
                        "embedding file dim {} but the network expects {}",
                        file.dim, d_text
                    )));
                }
                Ok(CaptionEncoder::external(file))
            }
            None => Ok(CaptionEncoder::toy(d_text)),
        }
    }

    fn entity_lexicon(&self) -> Result<Option<Lexicon>> {
        self.lexicon.as_deref().map(Lexicon::load).transpose()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-blob benchmark dataset.
    Synth {
        /// Training samples.
        #[arg(long)]
        n: usize,
        /// Test samples.
        #[arg(long, default_value_t = 0)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a manifest and everything it references.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Caption length / color-word statistics.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the stats JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also write a CSV of the histograms here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Precompute sentence embeddings with the bundled hashing encoder.
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Apply word masking before encoding: none | no-color | no-objects.
        #[arg(long, default_value = "none")]
        ablation: String,
        /// Entity lexicon for no-objects.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Train one configuration and write trace + checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint or a directory of saved prediction maps.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "pred_dir")]
        checkpoint: Option<PathBuf>,
        /// Directory of <id>.pgm prediction maps.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Which split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        /// Write the pooled precision/recall curve as CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
        /// Aggregate MaxFb/MaxEm per image instead of per threshold.
        #[arg(long)]
        per_image_max: bool,
        #[arg(long, default_value_t = 256)]
        thresholds: usize,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        ablation: String,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Run one image through a checkpoint and write the saliency map.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Caption text (encoded with the bundled hashing encoder).
        #[arg(long, conflicts_with = "id")]
        caption: Option<String>,
        /// Embedding file + sample id as the text source.
        #[arg(long, requires = "id")]
        embeddings: Option<PathBuf>,
        #[arg(long, requires = "embeddings")]
        id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several variants from one seed and print a table.
    Compare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Repeatable: name=attachment[,ablation], e.g. "ecmsa=in:1" or
        /// "baseline=".
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long, default_value_t = 256)]
        thresholds: usize,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Finite-difference verification of every layer and the full network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Parse(format!("unknown split {:?}", other))),
    }
}

fn write_config_echo(path: &Path, value: serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            n_test,
            size,
            seed,
            out,
        } => {
            if n == 0 {
                return Err(Error::Usage("--n must be at least 1".into()));
            }
            let cfg = SynthConfig {
                n_train: n,
                n_test,
                size,
                seed,
            };
            let records = dataio::synth_crossmodal(&cfg, &out)?;
            write_config_echo(&out.join("synth.config.json"), serde_json::to_value(&cfg)?)?;
            println!(
                "wrote {} samples ({} train / {} test) under {}",
                records.len(),
                cfg.n_train,
                cfg.n_test,
                out.display()
            );
            Ok(())
        }
        Command::Validate { manifest } => {
            let records = load_manifest(&manifest)?;
            println!("manifest OK ({} records)", records.len());
            Ok(())
        }
        Command::Stats { manifest, json, csv } => {
            let records = load_manifest(&manifest)?;
            let stats = dataio::caption_stats(&records);
            let rendered = serde_json::to_string_pretty(&stats)?;
            println!("{}", rendered);
            if let Some(path) = json {
                std::fs::write(path, &rendered)?;
            }
            if let Some(path) = csv {
                std::fs::write(path, stats.to_csv())?;
            }
            Ok(())
        }
        Command::Embed {
            manifest,
            out,
            dim,
            ablation,
            lexicon,
        } => {
            let records = load_manifest(&manifest)?;
            let ablation: Ablation = ablation.parse()?;
            let entity = lexicon.as_deref().map(Lexicon::load).transpose()?;
            let encoder = encoder_for_ablation(CaptionEncoder::toy(dim), ablation, entity.as_ref())?;
            let mut entries = Vec::with_capacity(records.len());
            for r in &records {
                entries.push((r.id.clone(), encoder.encode(&r.id, &r.caption)?.values));
            }
            EmbeddingFile::save(
                &out,
                dim,
                entries.iter().map(|(id, v)| (id.as_str(), v.as_slice())),
            )?;
            let echo = out.with_extension("config.json");
            write_config_echo(
                &echo,
                serde_json::json!({"dim": dim, "ablation": ablation, "manifest": manifest}),
            )?;
            println!("wrote {} embeddings (dim {}) to {}", entries.len(), dim, out.display());
            Ok(())
        }
        Command::Train {
            manifest,
            out,
            net,
            train,
        } => {
            let records = load_manifest(&manifest)?;
            let net_cfg = net.config()?;
            let cfg = train.config()?;
            let encoder = train.encoder(net_cfg.d_text)?;
            let entity = train.entity_lexicon()?;
            let (_, trace, _) =
                train_variant(&records, &net_cfg, &encoder, &cfg, entity.as_ref(), Some(&out))?;
            let last = trace.steps.last().expect("at least one step");
            println!(
                "trained {} steps (final loss {:.4}); checkpoint at {}",
                trace.steps.len(),
                last.loss,
                trace.checkpoint.expect("out dir given").display()
            );
            Ok(())
        }
        Command::Eval {
            manifest,
            checkpoint,
            pred_dir,
            split,
            report,
            pr_csv,
            per_image_max,
            thresholds,
            embeddings,
            ablation,
            lexicon,
        } => {
            let records = load_manifest(&manifest)?;
            let split = parse_split(&split)?;
            let subset: Vec<_> = records.iter().filter(|r| r.split == split).cloned().collect();
            if subset.is_empty() {
                return Err(Error::Validation(format!("no records in the {:?} split", split)));
            }
            let eval_cfg = EvalConfig {
                thresholds,
                aggregation: if per_image_max {
                    Aggregation::PerImageMax
                } else {
                    Aggregation::ThresholdAveraged
                },
                ..EvalConfig::default()
            };
            let result = match (&checkpoint, &pred_dir) {
                (Some(ckpt), None) => {
                    let network = nets::load(ckpt)?;
                    let d_text = network.config().d_text;
                    let base = match &embeddings {
                        Some(path) => CaptionEncoder::external(EmbeddingFile::load(path)?),
                        None => CaptionEncoder::toy(d_text),
                    };
                    let ablation: Ablation = ablation.parse()?;
                    let entity = lexicon.as_deref().map(Lexicon::load).transpose()?;
                    let encoder = encoder_for_ablation(base, ablation, entity.as_ref())?;
                    training::evaluate_model(&network, &subset, &encoder, &eval_cfg)?
                }
                (None, Some(dir)) => metrics::evaluate_mask_dir(dir, &subset, &eval_cfg)?,
                _ => {
                    return Err(Error::Usage(
                        "exactly one of --checkpoint or --pred-dir is required".into(),
                    ))
                }
            };
            std::fs::write(&report, serde_json::to_string_pretty(&result.report)?)?;
            if let Some(path) = pr_csv {
                std::fs::write(path, metrics::pr_curve_csv(&result.pr_curve))?;
            }
            let r = &result.report;
            let timing = r
                .mean_infer_seconds
                .map(|t| format!("{:.6}", t))
                .unwrap_or_else(|| "-".into());
            println!(
                "MaxFb {:.4}  MAE {:.4}  MaxEm {:.4}  Sm {:.4}  infer time/s {}",
                r.max_f_beta, r.mae, r.max_e_m, r.s_m, timing
            );
            Ok(())
        }
        Command::Infer {
            checkpoint,
            image,
            caption,
            embeddings,
            id,
            out,
        } => {
            let network = nets::load(&checkpoint)?;
            let img = dataio::pnm::read_ppm(&image)?;
            let needs_text = !network.attachment().is_empty();
            let embedding = if let Some(caption) = &caption {
                Some(CaptionEncoder::toy(network.config().d_text).encode("", caption)?)
            } else if let (Some(path), Some(id)) = (&embeddings, &id) {
                Some(EmbeddingFile::load(path)?.get(id)?)
            } else if needs_text {
                return Err(Error::Usage(
                    "this checkpoint has attention attachments; pass --caption or --embeddings/--id".into(),
                ));
            } else {
                None
            };
            let result = network.forward(&img, embedding.as_ref())?;
            dataio::pnm::write_raster(&out, &result.mask)?;
            println!("wrote saliency map to {}", out.display());
            Ok(())
        }
        Command::Compare {
            manifest,
            out,
            variants,
            thresholds,
            net,
            train,
        } => {
            let records = load_manifest(&manifest)?;
            let specs: Vec<VariantSpec> = variants
                .iter()
                .map(|v| VariantSpec::parse(v))
                .collect::<Result<_>>()?;
            let net_cfg = net.config()?;
            let cfg = train.config()?;
            let encoder = train.encoder(net_cfg.d_text)?;
            let entity = train.entity_lexicon()?;
            let eval_cfg = EvalConfig {
                thresholds,
                ..EvalConfig::default()
            };
            let (report, _) = run_comparison(
                &records,
                &net_cfg,
                &encoder,
                &specs,
                &cfg,
                &eval_cfg,
                entity.as_ref(),
                Some(&out),
            )?;
            write_config_echo(
                &out.join("compare.config.json"),
                serde_json::json!({"net": net_cfg, "train": cfg, "variants": specs}),
            )?;
            print!("{}", report.render_text());
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let results = textsal_core::gradcheck::run_all(seed);
            let mut failures = 0;
            for r in &results {
                println!(
                    "{:32} max rel err {:10.3e}  (tol {:7.0e})  {}",
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
                if !r.passed() {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(Error::Validation(format!(
                    "{} of {} gradient checks failed",
                    failures,
                    results.len()
                )));
            }
            println!("all {} gradient checks passed", results.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
