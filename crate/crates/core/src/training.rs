//! Training protocol: AdamW with a cosine learning-rate schedule, seeded
//! shuffling and augmentation, loss logging, checkpointing, and the
//! baseline-vs-attention comparison driver.
//!
//! Every stochastic choice derives from `TrainConfig::seed`:
//! parameter init uses `seed XOR fnv1a64(param key)` (see [`crate::nets`]),
//! epoch shuffling uses `seed XOR fnv1a64("shuffle/<epoch>")`, and sample
//! augmentation uses `(seed XOR fnv1a64("epoch/<epoch>")) XOR fnv1a64(id)`.
//! Two runs with the same config are bitwise identical.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{AttnScale, EcmsaConfig};
use crate::dataio::{augment, sample_rng, AugmentConfig, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, EvalConfig, EvalResult, MetricReport};
use crate::nets::{build, parse_attachment, NetConfig, Network};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::Tensor;
use crate::text::{color_lexicon, CaptionEncoder, Lexicon, TextEmbedding};

/// Which experiment switch the run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoEse,
    NoRes,
    NoColor,
    NoObjects,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Ablation::None => "none",
            Ablation::NoEse => "no-ese",
            Ablation::NoRes => "no-res",
            Ablation::NoColor => "no-color",
            Ablation::NoObjects => "no-objects",
        };
        write!(f, "{}", s)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "no-ese" => Ok(Ablation::NoEse),
            "no-res" => Ok(Ablation::NoRes),
            "no-color" => Ok(Ablation::NoColor),
            "no-objects" => Ok(Ablation::NoObjects),
            other => Err(Error::Parse(format!("unknown ablation {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub attachment: String,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-5,
            batch_size: 8,
            steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            ablation: Ablation::None,
            attachment: String::new(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Validation("lr0 must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Validation("steps and batch_size must be positive".into()));
        }
        self.augment.validate()
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    assert!(total >= 1 && step <= total, "0 <= step <= total required");
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Decoupled-weight-decay Adam. One state pair per parameter tensor.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> AdamW {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// One update: `theta <- theta - lr * (mhat/(sqrt(vhat)+eps) + wd*theta)`
    /// with bias-corrected moments. Decay applies even at zero gradient.
    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Usage("optimizer state does not match the parameter list".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| {
                Error::Usage("parameter has no gradient; run backward first".into())
            })?;
            if grad.len() != self.m[idx].len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    detail: format!(
                        "state {} has {} entries but the gradient has {}",
                        idx,
                        self.m[idx].len(),
                        grad.len()
                    ),
                });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let theta = data[i];
                data[i] = theta - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * theta);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
}

pub fn write_trace(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in steps {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Attention switches implied by an ablation.
pub fn ecmsa_cfg_for(ablation: Ablation) -> EcmsaConfig {
    EcmsaConfig {
        use_ese: ablation != Ablation::NoEse,
        use_residual: ablation != Ablation::NoRes,
        attn_scale: AttnScale::InvSqrtDim,
    }
}

/// Wrap an encoder with the word masking an ablation calls for. The color
/// lexicon is bundled; `no-objects` needs a caller-supplied entity lexicon.
pub fn encoder_for_ablation(
    base: CaptionEncoder,
    ablation: Ablation,
    entity_lexicon: Option<&Lexicon>,
) -> Result<CaptionEncoder> {
    match ablation {
        Ablation::NoColor => base.with_mask(color_lexicon()),
        Ablation::NoObjects => {
            let lex = entity_lexicon.ok_or_else(|| {
                Error::Validation(
                    "the no-objects ablation needs an entity lexicon (--lexicon)".into(),
                )
            })?;
            base.with_mask(lex.clone())
        }
        _ => Ok(base),
    }
}

struct PreparedSample {
    id: String,
    image: Tensor,
    mask: Tensor,
    embedding: Option<TextEmbedding>,
}

fn prepare(
    records: &[SampleRecord],
    encoder: &CaptionEncoder,
    needs_text: bool,
) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        out.push(PreparedSample {
            id: r.id.clone(),
            image: r.load_image()?,
            mask: r.load_mask()?,
            embedding: if needs_text {
                Some(encoder.encode(&r.id, &r.caption)?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

fn sample_loss(net: &Network, image: &Tensor, mask: &Tensor, f2: Option<&TextEmbedding>) -> Result<Tensor> {
    let out = net.forward(image, f2)?;
    let gt = mask.reshape(&[1, mask.shape()[0], mask.shape()[1]])?;
    let mut loss = out.mask.bce_loss(&gt)?;
    for aux in &out.aux_masks {
        loss = loss.add(&aux.bce_loss(&gt)?.scale(0.5)?)?;
    }
    Ok(loss)
}

/// Run the optimization loop over the manifest's train split. The network
/// is updated in place; per-step learning rate and loss are returned (and
/// written to `<out_dir>/trace.jsonl` with a checkpoint when `out_dir` is
/// given).
pub fn train(
    net: &Network,
    records: &[SampleRecord],
    encoder: &CaptionEncoder,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let train_records: Vec<&SampleRecord> =
        records.iter().filter(|r| r.split == Split::Train).collect();
    if train_records.is_empty() {
        return Err(Error::Validation("the manifest has no train-split samples".into()));
    }
    let needs_text = !net.attachment().is_empty();
    let owned: Vec<SampleRecord> = train_records.into_iter().cloned().collect();
    let samples = prepare(&owned, encoder, needs_text)?;

    let params: Vec<Tensor> = net.params().into_iter().map(|(_, t)| t).collect();
    for p in &params {
        p.zero_grad();
    }
    let mut opt = AdamW::new(&params, cfg);

    let factor = net.config().spatial_factor();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut queue: Vec<usize> = Vec::new();
    let mut epoch = 0usize;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if queue.is_empty() {
                let mut order: Vec<usize> = (0..samples.len()).collect();
                Rng::derive(cfg.seed, &format!("shuffle/{}", epoch)).shuffle(&mut order);
                // Drain from the back; reverse to keep the shuffled order.
                order.reverse();
                queue = order;
                epoch += 1;
            }
            batch.push((epoch - 1, queue.pop().expect("queue refilled above")));
        }

        let mut batch_loss: Option<Tensor> = None;
        for (sample_epoch, idx) in &batch {
            let s = &samples[*idx];
            let epoch_seed = cfg.seed ^ fnv1a64(&format!("epoch/{}", sample_epoch));
            let mut rng = sample_rng(epoch_seed, &s.id);
            let (img, msk) = augment(&s.image, &s.mask, &cfg.augment, &mut rng)?;
            if img.shape()[1] % factor != 0 {
                return Err(Error::Validation(format!(
                    "augmented side {} is not divisible by the pooling factor {}; adjust crop_ratio",
                    img.shape()[1],
                    factor
                )));
            }
            let loss = sample_loss(net, &img, &msk, s.embedding.as_ref())?;
            batch_loss = Some(match batch_loss {
                Some(acc) => acc.add(&loss)?,
                None => loss,
            });
        }
        let loss = batch_loss
            .expect("batch is non-empty")
            .scale(1.0 / batch.len() as f64)?;
        let lr = cosine_lr(step, cfg.steps, cfg.lr0);
        loss.backward()?;
        opt.step(&params, lr)?;
        for p in &params {
            p.zero_grad();
        }
        steps.push(StepRecord {
            step,
            lr,
            loss: loss.item(),
        });
    }

    let checkpoint = if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_trace(&dir.join("trace.jsonl"), &steps)?;
        let ckpt = dir.join("checkpoint.ckpt");
        net.save(&ckpt)?;
        let echo = serde_json::json!({
            "train": cfg,
            "net": net.config(),
            "attachment": net.attachment().to_string(),
        });
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
        Some(ckpt)
    } else {
        None
    };

    Ok(TrainTrace { steps, checkpoint })
}

/// Build a network per the config's attachment/ablation, wrap the encoder
/// with the ablation's masking, and train on the manifest.
pub fn train_variant(
    records: &[SampleRecord],
    net_cfg: &NetConfig,
    base_encoder: &CaptionEncoder,
    cfg: &TrainConfig,
    entity_lexicon: Option<&Lexicon>,
    out_dir: Option<&Path>,
) -> Result<(Network, TrainTrace, CaptionEncoder)> {
    let attach = parse_attachment(&cfg.attachment)?;
    let net = build(net_cfg, &attach, &ecmsa_cfg_for(cfg.ablation), cfg.seed)?;
    let encoder = encoder_for_ablation(base_encoder.clone(), cfg.ablation, entity_lexicon)?;
    let trace = train(&net, records, &encoder, cfg, out_dir)?;
    Ok((net, trace, encoder))
}

/// Predict the test split with timing; returns the evaluation result with
/// `mean_infer_seconds` filled in.
pub fn evaluate_model(
    net: &Network,
    records: &[SampleRecord],
    encoder: &CaptionEncoder,
    eval_cfg: &EvalConfig,
) -> Result<EvalResult> {
    let test: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Validation("the manifest has no test-split samples".into()));
    }
    let needs_text = !net.attachment().is_empty();
    let mut items = Vec::with_capacity(test.len());
    let mut total_secs = 0.0f64;
    for r in &test {
        let image = r.load_image()?;
        let gt = r.load_mask()?;
        let embedding = if needs_text {
            Some(encoder.encode(&r.id, &r.caption)?)
        } else {
            None
        };
        let start = Instant::now();
        let out = net.forward(&image, embedding.as_ref())?;
        total_secs += start.elapsed().as_secs_f64();
        let (h, w) = (gt.shape()[0], gt.shape()[1]);
        let pred = out.mask.reshape(&[h, w])?;
        // Re-wrap as a plain value tensor for the metric kernels.
        let pred = Tensor::from_vec(&[h, w], pred.to_vec())?;
        items.push((r.id.clone(), pred, gt));
    }
    let mut result = evaluate_pairs(&items, eval_cfg)?;
    result.report.mean_infer_seconds = Some(total_secs / test.len() as f64);
    Ok(result)
}

/// One comparison row: a named attachment/ablation combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub attachment: String,
    pub ablation: Ablation,
}

impl VariantSpec {
    /// Parse `name=attachment[,ablation]`, e.g. `ecmsa=in:1` or
    /// `masked=in:1,no-color` or `baseline=`.
    pub fn parse(s: &str) -> Result<VariantSpec> {
        let (name, rest) = s
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("variant {:?} is not name=attachment[,ablation]", s)))?;
        if name.is_empty() {
            return Err(Error::Parse("variant name is empty".into()));
        }
        let (attachment, ablation) = match rest.split_once(',') {
            Some((a, abl)) => (a.to_owned(), abl.parse()?),
            None => (rest.to_owned(), Ablation::None),
        };
        Ok(VariantSpec {
            name: name.to_owned(),
            attachment,
            ablation,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub attachment: String,
    pub ablation: Ablation,
    pub max_f_beta: f64,
    pub mae: f64,
    pub max_e_m: f64,
    pub s_m: f64,
    pub infer_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    /// Aligned plain-text table, columns in the usual benchmark order.
    pub fn render_text(&self) -> String {
        let name_width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>12}\n",
            "method",
            "MaxFb",
            "MAE",
            "MaxEm",
            "Sm",
            "infer time/s",
            width = name_width
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>12.6}\n",
                r.name,
                r.max_f_beta,
                r.mae,
                r.max_e_m,
                r.s_m,
                r.infer_time_s,
                width = name_width
            ));
        }
        out
    }
}

/// Outcome of one comparison variant, with its full evaluation report.
pub struct VariantOutcome {
    pub spec: VariantSpec,
    pub report: MetricReport,
    pub trace: TrainTrace,
}

/// Train and evaluate each variant from the same seed, writing per-variant
/// artifacts (trace, checkpoint, config echo, timing-stripped report) plus
/// the comparison table under `out_dir` when given.
///
/// Wall-clock inference timing lands in the table and in
/// `<variant>/timing.json`, never in `report.json`, so reruns with the same
/// flags produce byte-identical traces, checkpoints, and reports.
pub fn run_comparison(
    records: &[SampleRecord],
    net_cfg: &NetConfig,
    base_encoder: &CaptionEncoder,
    variants: &[VariantSpec],
    base_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    entity_lexicon: Option<&Lexicon>,
    out_dir: Option<&Path>,
) -> Result<(ComparisonReport, Vec<VariantOutcome>)> {
    if variants.len() < 2 {
        return Err(Error::Usage("a comparison needs at least two variants".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    let mut outcomes = Vec::with_capacity(variants.len());
    for spec in variants {
        let cfg = TrainConfig {
            attachment: spec.attachment.clone(),
            ablation: spec.ablation,
            ..base_cfg.clone()
        };
        let variant_dir = out_dir.map(|d| d.join(&spec.name));
        let (net, trace, encoder) = train_variant(
            records,
            net_cfg,
            base_encoder,
            &cfg,
            entity_lexicon,
            variant_dir.as_deref(),
        )?;
        let result = evaluate_model(&net, records, &encoder, eval_cfg)?;
        let timing = result
            .report
            .mean_infer_seconds
            .expect("evaluate_model always times");
        if let Some(dir) = &variant_dir {
            let mut stripped = result.report.clone();
            stripped.mean_infer_seconds = None;
            std::fs::write(
                dir.join("report.json"),
                serde_json::to_string_pretty(&stripped)?,
            )?;
            std::fs::write(
                dir.join("timing.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "mean_infer_seconds": timing
                }))?,
            )?;
        }
        rows.push(ComparisonRow {
            name: spec.name.clone(),
            attachment: spec.attachment.clone(),
            ablation: spec.ablation,
            max_f_beta: result.report.max_f_beta,
            mae: result.report.mae,
            max_e_m: result.report.max_e_m,
            s_m: result.report.s_m,
            infer_time_s: timing,
        });
        outcomes.push(VariantOutcome {
            spec: spec.clone(),
            report: result.report,
            trace,
        });
    }
    let report = ComparisonReport { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.json"), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(dir.join("table.txt"), report.render_text())?;
    }
    Ok((report, outcomes))
}
