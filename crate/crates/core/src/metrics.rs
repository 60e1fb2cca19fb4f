//! Saliency evaluation: MaxFb, MAE, MaxEm, Sm, and dataset aggregation.
//!
//! Conventions pinned here (and mirrored by the brute-force oracles in the
//! tests):
//!
//! - Threshold sweep: `n` thresholds `t_i = i/(n-1)` (256 by default, i.e.
//!   `i/255`); a pixel is foreground iff `pred > t`.
//! - `F_beta = (1+b^2) P R / (b^2 P + R)` with `b^2 = 0.3`; undefined
//!   precision (no predicted foreground) counts as 0, and a zero
//!   denominator yields 0.
//! - E-measure: per threshold, bias both maps by their means, per-pixel
//!   alignment `2ab/(a^2+b^2)` (0 where the denominator vanishes, which
//!   only happens for degenerate inputs), enhanced as `(1+xi)^2/4`, then
//!   the plain mean. All-background / all-foreground ground truth collapses
//!   to the proportion special case of the reference definition.
//! - S-measure: `alpha * object + (1-alpha) * region` with `alpha = 0.5`,
//!   population (1/N) moments, exact-arithmetic case rules instead of
//!   epsilon fudge terms, result clamped to [0, 1]. Degenerate ground truth
//!   scores by mean intensity.
//!
//! Dataset aggregation averages precision/recall (and Em) over images per
//! threshold before maximizing; per-image maximization is available as an
//! alternative mode.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{pnm, SampleRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel counts at one binarization threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn precision(&self) -> f64 {
        let denom = self.true_pos + self.false_pos;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }
}

/// One point of a precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

fn validate_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() || pred.rank() != 2 {
        return Err(Error::Shape {
            op,
            detail: format!(
                "need matching [H,W] tensors, got {:?} and {:?}",
                pred.shape(),
                gt.shape()
            ),
        });
    }
    if !gt.data().iter().all(|v| *v == 0.0 || *v == 1.0) {
        return Err(Error::Validation(format!(
            "{}: ground truth must be binary",
            op
        )));
    }
    if !pred.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Validation(format!(
            "{}: predictions must lie in [0,1]",
            op
        )));
    }
    Ok(())
}

fn threshold_value(i: usize, n: usize) -> f64 {
    i as f64 / (n - 1) as f64
}

/// Confusion counts for every threshold in the sweep.
///
/// Sorts the predictions once and walks thresholds with a cursor; the
/// foreground set at `t` is exactly `{pred > t}`, bit-identical to a naive
/// per-threshold comparison.
pub fn threshold_sweep(pred: &Tensor, gt: &Tensor, thresholds: usize) -> Result<Vec<ConfusionCounts>> {
    validate_pair("threshold_sweep", pred, gt)?;
    assert!(thresholds >= 2, "need at least two thresholds");
    let pd = pred.data();
    let gd = gt.data();
    let n = pd.len();

    let mut order: Vec<(f64, bool)> = pd
        .iter()
        .zip(gd.iter())
        .map(|(p, g)| (*p, *g == 1.0))
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    // suffix_pos[i] = positives among order[i..]
    let mut suffix_pos = vec![0u64; n + 1];
    for i in (0..n).rev() {
        suffix_pos[i] = suffix_pos[i + 1] + u64::from(order[i].1);
    }
    let total_pos = suffix_pos[0];

    let mut out = Vec::with_capacity(thresholds);
    let mut cursor = 0usize; // first index with value > t
    for i in 0..thresholds {
        let t = threshold_value(i, thresholds);
        while cursor < n && order[cursor].0 <= t {
            cursor += 1;
        }
        let predicted_fg = (n - cursor) as u64;
        let tp = suffix_pos[cursor];
        let fp = predicted_fg - tp;
        let fn_count = total_pos - tp;
        let tn = n as u64 - predicted_fg - fn_count;
        out.push(ConfusionCounts {
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_count,
            true_neg: tn,
        });
    }
    Ok(out)
}

/// Mean absolute error between a [0,1] prediction and a binary mask.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    validate_pair("mae", pred, gt)?;
    let pd = pred.data();
    let gd = gt.data();
    let mut acc = 0.0;
    for (p, g) in pd.iter().zip(gd.iter()) {
        acc += (p - g).abs();
    }
    Ok(acc / pd.len() as f64)
}

pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// Maximum F-beta over the threshold sweep, with the full PR curve.
/// Errors with [`Error::DegenerateGroundTruth`] when the mask has no
/// foreground (recall is undefined everywhere).
pub fn max_f_beta(
    pred: &Tensor,
    gt: &Tensor,
    beta_sq: f64,
    thresholds: usize,
) -> Result<(f64, Vec<PrPoint>)> {
    let sweep = threshold_sweep(pred, gt, thresholds)?;
    if sweep[0].true_pos + sweep[0].false_neg == 0 {
        return Err(Error::DegenerateGroundTruth);
    }
    let mut best = 0.0f64;
    let mut curve = Vec::with_capacity(thresholds);
    for (i, counts) in sweep.iter().enumerate() {
        let p = counts.precision();
        let r = counts.recall();
        best = best.max(f_beta(p, r, beta_sq));
        curve.push(PrPoint {
            threshold: threshold_value(i, thresholds),
            precision: p,
            recall: r,
        });
    }
    Ok((best, curve))
}

/// Per-threshold E-measure values (the enhanced-alignment score of the
/// binarized prediction against the mask).
pub fn e_m_curve(pred: &Tensor, gt: &Tensor, thresholds: usize) -> Result<Vec<f64>> {
    validate_pair("e_measure", pred, gt)?;
    let pd = pred.data();
    let gd = gt.data();
    let n = pd.len();
    let fg: u64 = gd.iter().map(|g| *g as u64).sum();
    let mean_gt = fg as f64 / n as f64;

    let mut out = Vec::with_capacity(thresholds);
    for i in 0..thresholds {
        let t = threshold_value(i, thresholds);
        let fm_count = pd.iter().filter(|p| **p > t).count();
        let em = if fg == 0 {
            // All-background truth: score the background proportion.
            (n - fm_count) as f64 / n as f64
        } else if fg == n as u64 {
            fm_count as f64 / n as f64
        } else {
            let mean_fm = fm_count as f64 / n as f64;
            let mut acc = 0.0;
            for (p, g) in pd.iter().zip(gd.iter()) {
                let a = g - mean_gt;
                let b = f64::from(*p > t) - mean_fm;
                let denom = a * a + b * b;
                let xi = if denom == 0.0 { 0.0 } else { 2.0 * a * b / denom };
                let enhanced = (1.0 + xi) * (1.0 + xi) / 4.0;
                acc += enhanced;
            }
            acc / n as f64
        };
        out.push(em);
    }
    Ok(out)
}

/// Maximum E-measure over the threshold sweep.
pub fn max_e_m(pred: &Tensor, gt: &Tensor, thresholds: usize) -> Result<f64> {
    let curve = e_m_curve(pred, gt, thresholds)?;
    Ok(curve.iter().fold(0.0f64, |a, b| a.max(*b)))
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for v in values {
        acc += v;
    }
    acc / n as f64
}

/// Object-aware similarity of `values` over the pixels where `region` is 1:
/// `2m / (m^2 + 1 + s)` with mean `m` and population standard deviation `s`.
fn object_score(values: &[f64], region: &[f64]) -> f64 {
    let n: usize = region.iter().map(|r| *r as usize).sum();
    if n == 0 {
        return 0.0;
    }
    let mut m = 0.0;
    for (v, r) in values.iter().zip(region) {
        if *r == 1.0 {
            m += v;
        }
    }
    m /= n as f64;
    let mut var = 0.0;
    for (v, r) in values.iter().zip(region) {
        if *r == 1.0 {
            var += (v - m) * (v - m);
        }
    }
    let sigma = (var / n as f64).sqrt();
    2.0 * m / (m * m + 1.0 + sigma)
}

/// Object term: foreground similarity weighted by foreground share, plus
/// the complement on the background.
pub fn s_object(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    validate_pair("s_object", pred, gt)?;
    let pd = pred.data();
    let gd = gt.data();
    let u = mean(gd.iter().copied(), gd.len());
    let inverted: Vec<f64> = pd.iter().map(|p| 1.0 - p).collect();
    let bg: Vec<f64> = gd.iter().map(|g| 1.0 - g).collect();
    Ok(u * object_score(&pd, &gd) + (1.0 - u) * object_score(&inverted, &bg))
}

/// SSIM-style similarity of one region block, with population moments.
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 1.0;
    }
    let nf = n as f64;
    let x = mean(pred.iter().copied(), n);
    let y = mean(gt.iter().copied(), n);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    sx /= nf;
    sy /= nf;
    sxy /= nf;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn collect_block(data: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols.clone() {
            out.push(data[r * w + c]);
        }
    }
    out
}

/// Region term: split both maps into four blocks at the (rounded, 1-based)
/// foreground centroid and combine per-block SSIM weighted by block area.
pub fn s_region(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    validate_pair("s_region", pred, gt)?;
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let pd = pred.data();
    let gd = gt.data();
    let mut count = 0usize;
    let (mut row_sum, mut col_sum) = (0.0f64, 0.0f64);
    for r in 0..h {
        for c in 0..w {
            if gd[r * w + c] == 1.0 {
                count += 1;
                row_sum += (r + 1) as f64;
                col_sum += (c + 1) as f64;
            }
        }
    }
    if count == 0 {
        return Err(Error::DegenerateGroundTruth);
    }
    let cut_r = (row_sum / count as f64).round() as usize; // 1-based
    let cut_c = (col_sum / count as f64).round() as usize;

    let blocks = [
        (0..cut_r, 0..cut_c),
        (0..cut_r, cut_c..w),
        (cut_r..h, 0..cut_c),
        (cut_r..h, cut_c..w),
    ];
    let mut q = 0.0;
    for (rows, cols) in blocks {
        let area = rows.len() * cols.len();
        if area == 0 {
            continue;
        }
        let weight = area as f64 / (h * w) as f64;
        let pb = collect_block(&pd, w, rows.clone(), cols.clone());
        let gb = collect_block(&gd, w, rows, cols);
        q += weight * block_ssim(&pb, &gb);
    }
    Ok(q)
}

/// Structure measure: `alpha * object + (1 - alpha) * region`, clamped to
/// [0, 1]. Degenerate ground truth falls back to mean intensity.
pub fn s_measure_alpha(pred: &Tensor, gt: &Tensor, alpha: f64) -> Result<f64> {
    validate_pair("s_measure", pred, gt)?;
    let gd = gt.data();
    let y = mean(gd.iter().copied(), gd.len());
    drop(gd);
    let pd_mean = {
        let pd = pred.data();
        mean(pd.iter().copied(), pd.len())
    };
    if y == 0.0 {
        return Ok(1.0 - pd_mean);
    }
    if y == 1.0 {
        return Ok(pd_mean);
    }
    let q = alpha * s_object(pred, gt)? + (1.0 - alpha) * s_region(pred, gt)?;
    Ok(q.clamp(0.0, 1.0))
}

pub fn s_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    s_measure_alpha(pred, gt, 0.5)
}

/// How MaxFb / MaxEm are aggregated over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Average precision/recall (and Em) over images per threshold, then
    /// take the maximum of the averaged curve.
    #[default]
    ThresholdAveraged,
    /// Maximize per image, then average the maxima.
    PerImageMax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: usize,
    pub beta_sq: f64,
    pub alpha: f64,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: 256,
            beta_sq: 0.3,
            alpha: 0.5,
            aggregation: Aggregation::ThresholdAveraged,
        }
    }
}

/// Per-image metric values (threshold maxima taken per image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub id: String,
    pub max_f_beta: f64,
    pub mae: f64,
    pub max_e_m: f64,
    pub s_m: f64,
}

/// Dataset metrics. `mean_infer_seconds` is present only when a model was
/// timed; reports written by deterministic pipelines omit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub max_f_beta: f64,
    pub mae: f64,
    pub max_e_m: f64,
    pub s_m: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_infer_seconds: Option<f64>,
    pub thresholds_used: usize,
    pub aggregation: Aggregation,
    pub per_image: Vec<PerImageMetrics>,
}

/// Result of a dataset evaluation: the report plus the pooled PR curve
/// (averaged precision/recall per threshold).
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub report: MetricReport,
    pub pr_curve: Vec<PrPoint>,
}

/// Evaluate `(id, prediction, ground truth)` triples. Every ground truth
/// must contain at least one foreground pixel.
pub fn evaluate_pairs(items: &[(String, Tensor, Tensor)], cfg: &EvalConfig) -> Result<EvalResult> {
    if items.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let t = cfg.thresholds;
    let n_images = items.len() as f64;

    let mut sum_p = vec![0.0f64; t];
    let mut sum_r = vec![0.0f64; t];
    let mut sum_em = vec![0.0f64; t];
    let mut per_image = Vec::with_capacity(items.len());
    let mut sum_mae = 0.0;
    let mut sum_sm = 0.0;
    let mut sum_max_f = 0.0;
    let mut sum_max_em = 0.0;

    for (id, pred, gt) in items {
        let (max_f, curve) = max_f_beta(pred, gt, cfg.beta_sq, t).map_err(|e| match e {
            Error::DegenerateGroundTruth => {
                Error::Validation(format!("sample {:?}: ground truth has no foreground", id))
            }
            other => other,
        })?;
        let em_curve = e_m_curve(pred, gt, t)?;
        let max_em = em_curve.iter().fold(0.0f64, |a, b| a.max(*b));
        let image_mae = mae(pred, gt)?;
        let image_sm = s_measure_alpha(pred, gt, cfg.alpha)?;

        for i in 0..t {
            sum_p[i] += curve[i].precision;
            sum_r[i] += curve[i].recall;
            sum_em[i] += em_curve[i];
        }
        sum_mae += image_mae;
        sum_sm += image_sm;
        sum_max_f += max_f;
        sum_max_em += max_em;

        per_image.push(PerImageMetrics {
            id: id.clone(),
            max_f_beta: max_f,
            mae: image_mae,
            max_e_m: max_em,
            s_m: image_sm,
        });
    }

    let mut pr_curve = Vec::with_capacity(t);
    let mut pooled_max_f = 0.0f64;
    let mut pooled_max_em = 0.0f64;
    for i in 0..t {
        let p = sum_p[i] / n_images;
        let r = sum_r[i] / n_images;
        pooled_max_f = pooled_max_f.max(f_beta(p, r, cfg.beta_sq));
        pooled_max_em = pooled_max_em.max(sum_em[i] / n_images);
        pr_curve.push(PrPoint {
            threshold: threshold_value(i, t),
            precision: p,
            recall: r,
        });
    }

    let (agg_f, agg_em) = match cfg.aggregation {
        Aggregation::ThresholdAveraged => (pooled_max_f, pooled_max_em),
        Aggregation::PerImageMax => (sum_max_f / n_images, sum_max_em / n_images),
    };

    Ok(EvalResult {
        report: MetricReport {
            max_f_beta: agg_f,
            mae: sum_mae / n_images,
            max_e_m: agg_em,
            s_m: sum_sm / n_images,
            mean_infer_seconds: None,
            thresholds_used: t,
            aggregation: cfg.aggregation,
            per_image,
        },
        pr_curve,
    })
}

/// Evaluate saved prediction maps (`<dir>/<id>.pgm`) against the records'
/// ground-truth masks.
pub fn evaluate_mask_dir(
    dir: &Path,
    records: &[SampleRecord],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let path = dir.join(format!("{}.pgm", r.id));
        if !path.exists() {
            return Err(Error::MissingPrediction(r.id.clone()));
        }
        let pred = pnm::read_pgm(&path)?;
        let gt = r.load_mask()?;
        items.push((r.id.clone(), pred, gt));
    }
    evaluate_pairs(&items, cfg)
}

/// CSV rendering of a PR curve: `threshold,precision,recall` rows.
pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    out
}

/// A `method -> report` table for side-by-side comparison rendering.
pub type ReportTable = BTreeMap<String, MetricReport>;
