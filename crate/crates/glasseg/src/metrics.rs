//! Evaluation metrics: IoU, MAE, balanced error rate, weighted F-measure,
//! plus the location-prior "statistics" baseline.
//!
//! All metrics take a continuous prediction in [0, 1] and a binary ground
//! truth. Binarization, where needed, uses `p >= 0.5`. Images for which a
//! metric is undefined (BER with a one-class ground truth, weighted
//! F-measure with an empty ground truth) are excluded from the dataset mean
//! and counted in the report.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::bilinear_taps;

/// Binarization threshold for predictions and the statistics baseline.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Gaussian dependency kernel width used by the weighted F-measure.
const WF_KERNEL: usize = 7;
/// Gaussian sigma of the dependency kernel.
const WF_SIGMA: f64 = 5.0;
/// Background importance decay: 2 - exp(alpha * dist), alpha = ln(0.5)/5.
const WF_ALPHA: f64 = -0.138_629_436_111_989_06; // ln(0.5) / 5

pub fn binarize(pred: &Array2<f64>) -> Array2<bool> {
    pred.mapv(|p| p >= BINARIZE_THRESHOLD)
}

fn check_shapes(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty prediction map".into()));
    }
    Ok(())
}

/// Pixel counts of a binarized prediction against a binary ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_maps(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<Self> {
        check_shapes(pred, gt)?;
        let mut c = ConfusionCounts {
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 0,
        };
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p >= BINARIZE_THRESHOLD, g) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// Glass pixels in the ground truth.
    pub fn n_p(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Non-glass pixels in the ground truth.
    pub fn n_n(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Intersection over union in percent; 100 when prediction and ground truth
/// are both empty.
pub fn iou_metric(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<f64> {
    let c = ConfusionCounts::from_maps(pred, gt)?;
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * c.tp as f64 / union as f64)
}

/// Mean absolute error of the continuous prediction.
pub fn mae_metric(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut sum = KahanSum::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let g = if g { 1.0 } else { 0.0 };
        sum.add((p - g).abs());
    }
    Ok(sum.value() / pred.len() as f64)
}

/// Balanced error rate in percent. `None` when the ground truth has only one
/// class, in which case one of the two class accuracies is undefined.
pub fn ber_metric(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<Option<f64>> {
    let c = ConfusionCounts::from_maps(pred, gt)?;
    if c.n_p() == 0 || c.n_n() == 0 {
        return Ok(None);
    }
    let tpr = c.tp as f64 / c.n_p() as f64;
    let tnr = c.tn as f64 / c.n_n() as f64;
    Ok(Some((1.0 - 0.5 * (tpr + tnr)) * 100.0))
}

/// Exact nearest-foreground search: for every pixel, the squared Euclidean
/// distance to the closest ground-truth glass pixel and that pixel's
/// coordinates. Ties are broken toward the smallest (row, col). Returns
/// `None` when the ground truth has no glass pixels.
#[allow(clippy::type_complexity)]
fn nearest_foreground(gt: &Array2<bool>) -> Option<(Array2<f64>, Array2<(usize, usize)>)> {
    let (h, w) = gt.dim();
    // Foreground columns per row, sorted; rows without glass are skipped.
    let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..h {
        let cols: Vec<usize> = (0..w).filter(|&j| gt[(i, j)]).collect();
        if !cols.is_empty() {
            rows.push((i, cols));
        }
    }
    if rows.is_empty() {
        return None;
    }

    let mut dist = Array2::<f64>::zeros((h, w));
    let mut idx = Array2::<(usize, usize)>::from_elem((h, w), (0, 0));
    for i in 0..h {
        for j in 0..w {
            let mut best: Option<(u64, usize, usize)> = None;
            for (r, cols) in &rows {
                let dr = (*r as i64 - i as i64).unsigned_abs().pow(2);
                if let Some((bd, _, _)) = best {
                    if dr > bd {
                        continue;
                    }
                }
                // Nearest columns around j; on an exact distance tie the
                // left candidate wins via the lexicographic comparison.
                let p = cols.partition_point(|&c| c < j);
                for &c in cols[p.saturating_sub(1)..(p + 1).min(cols.len())].iter() {
                    let dc = (c as i64 - j as i64).unsigned_abs().pow(2);
                    let cand = (dr + dc, *r, c);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            let (d2, r, c) = best.unwrap();
            dist[(i, j)] = (d2 as f64).sqrt();
            idx[(i, j)] = (r, c);
        }
    }
    Some((dist, idx))
}

fn gaussian_kernel() -> Array2<f64> {
    let half = (WF_KERNEL / 2) as i64;
    let mut k = Array2::<f64>::zeros((WF_KERNEL, WF_KERNEL));
    let mut sum = 0.0;
    for i in 0..WF_KERNEL {
        for j in 0..WF_KERNEL {
            let di = i as i64 - half;
            let dj = j as i64 - half;
            let v = (-((di * di + dj * dj) as f64) / (2.0 * WF_SIGMA * WF_SIGMA)).exp();
            k[(i, j)] = v;
            sum += v;
        }
    }
    k.mapv_inplace(|v| v / sum);
    k
}

/// Correlation with the kernel renormalized over in-bounds pixels, so each
/// output is a convex combination of its neighborhood (the dependency matrix
/// is row stochastic even at the border).
fn filter_normalized(x: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (kh, kw) = kernel.dim();
    let (oh, ow) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for ki in 0..kh {
                for kj in 0..kw {
                    let si = i as i64 + ki as i64 - oh;
                    let sj = j as i64 + kj as i64 - ow;
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        acc += kernel[(ki, kj)] * x[(si as usize, sj as usize)];
                        wsum += kernel[(ki, kj)];
                    }
                }
            }
            out[(i, j)] = acc / wsum;
        }
    }
    out
}

/// Weighted F-measure with beta^2 = 1. `None` when the ground truth is empty.
///
/// Construction: error map E = |P - G|; background errors are replaced by the
/// raw error at the nearest glass pixel, smoothed with a 7x7 Gaussian
/// (sigma 5, zero padded); at glass pixels the smoothed value is taken only
/// where it is below the raw error; background weights decay with distance to
/// the nearest glass pixel as 2 - exp(ln(0.5)/5 * dist).
pub fn weighted_fmeasure(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    if pred.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::Data("prediction values outside [0, 1]".into()));
    }
    let Some((dist, idx)) = nearest_foreground(gt) else {
        return Ok(None);
    };

    let e = ndarray::Zip::from(pred)
        .and(gt)
        .map_collect(|&p, &g| (p - if g { 1.0 } else { 0.0 }).abs());

    let mut et = e.clone();
    ndarray::Zip::indexed(&mut et).and(gt).for_each(|ij, v, &g| {
        if !g {
            *v = e[idx[ij]];
        }
    });
    let ea = filter_normalized(&et, &gaussian_kernel());

    let mut ew = e.clone();
    ndarray::Zip::from(&mut ew)
        .and(&ea)
        .and(gt)
        .and(&dist)
        .for_each(|v, &sm, &g, &d| {
            if g {
                if sm < *v {
                    *v = sm;
                }
            } else {
                *v *= 2.0 - (WF_ALPHA * d).exp();
            }
        });

    let mut fg_err = KahanSum::default();
    let mut bg_err = KahanSum::default();
    let mut n_fg = 0u64;
    for (&w, &g) in ew.iter().zip(gt.iter()) {
        if g {
            fg_err.add(w);
            n_fg += 1;
        } else {
            bg_err.add(w);
        }
    }
    let tpw = n_fg as f64 - fg_err.value();
    let fpw = bg_err.value();
    let recall = 1.0 - fg_err.value() / n_fg as f64;
    let precision = tpw / (f64::EPSILON + tpw + fpw);
    Ok(Some(
        2.0 * recall * precision / (f64::EPSILON + recall + precision),
    ))
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (r0, r1, fr) = rows[i];
        let (c0, c1, fc) = cols[j];
        let top = src[(r0, c0)] * (1.0 - fc) + src[(r0, c1)] * fc;
        let bot = src[(r1, c0)] * (1.0 - fc) + src[(r1, c1)] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Location-prior baseline: resize all training masks to `target`, average
/// per pixel, threshold at 0.5 into one fixed prediction mask.
pub fn statistics_baseline(
    train_masks: &[Array2<bool>],
    target: (usize, usize),
) -> Result<Array2<bool>> {
    if train_masks.is_empty() {
        return Err(Error::Data("no training masks for the baseline".into()));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Config("baseline target size must be nonzero".into()));
    }
    let mut mean = Array2::<f64>::zeros(target);
    for m in train_masks {
        let as_f = m.mapv(|g| if g { 1.0 } else { 0.0 });
        mean += &resize_bilinear(&as_f, target.0, target.1);
    }
    let n = train_masks.len() as f64;
    Ok(mean.mapv(|v| v / n >= BINARIZE_THRESHOLD))
}

/// Per-image metric values; `None` marks exclusion.
#[derive(Debug, Clone, Serialize)]
pub struct ImageMetrics {
    pub iou: f64,
    pub mae: f64,
    pub ber: Option<f64>,
    pub wf: Option<f64>,
}

/// Dataset-level report: per-image values, unweighted means over the images
/// where each metric is defined, and the number excluded per metric.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_iou: f64,
    pub mean_mae: f64,
    pub mean_ber: Option<f64>,
    pub mean_wf: Option<f64>,
    pub ber_excluded: usize,
    pub wf_excluded: usize,
}

pub fn evaluate_dataset(preds: &[Array2<f64>], gts: &[Array2<bool>]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }

    let mut per_image = Vec::with_capacity(preds.len());
    let mut iou_sum = KahanSum::default();
    let mut mae_sum = KahanSum::default();
    let mut ber_sum = KahanSum::default();
    let mut wf_sum = KahanSum::default();
    let mut ber_n = 0usize;
    let mut wf_n = 0usize;
    for (pred, gt) in preds.iter().zip(gts) {
        let m = ImageMetrics {
            iou: iou_metric(pred, gt)?,
            mae: mae_metric(pred, gt)?,
            ber: ber_metric(pred, gt)?,
            wf: weighted_fmeasure(pred, gt)?,
        };
        iou_sum.add(m.iou);
        mae_sum.add(m.mae);
        if let Some(b) = m.ber {
            ber_sum.add(b);
            ber_n += 1;
        }
        if let Some(w) = m.wf {
            wf_sum.add(w);
            wf_n += 1;
        }
        per_image.push(m);
    }
    let n = preds.len() as f64;
    Ok(MetricReport {
        mean_iou: iou_sum.value() / n,
        mean_mae: mae_sum.value() / n,
        mean_ber: (ber_n > 0).then(|| ber_sum.value() / ber_n as f64),
        mean_wf: (wf_n > 0).then(|| wf_sum.value() / wf_n as f64),
        ber_excluded: preds.len() - ber_n,
        wf_excluded: preds.len() - wf_n,
        per_image,
    })
}

/// Compensated (Kahan) accumulator so reduction order does not leak into
/// reported means.
#[derive(Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}
