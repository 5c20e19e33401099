//! Evaluation: detection matching, TPR at fixed false-positive counts,
//! feature correlation, and the occlusion and training-set-size harnesses.

use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{crop_window, face_box, Jitter, SynthImage};
use crate::detector::network::{forward_window, Sample};
use crate::detector::{detect, DetectConfig, Detection, DetectorModel, WINDOW_PX};
use crate::error::{invalid, Result};
use crate::features::SHRINK;
use crate::regressor::{overlap_voc, refine_detection, Ellipse, RegressorModel, Shape};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};

/// Overlap a detection needs to count as a true positive.
pub const MATCH_OVERLAP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    Discrete,
    Continuous,
}

/// Per-image matching outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Detection scores, in input order.
    pub scores: Vec<f64>,
    /// True-positive mass of each detection: 1 or 0 (discrete), the overlap
    /// or 0 (continuous).
    pub tp_weight: Vec<f64>,
    pub is_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching by descending score: each detection takes the unmatched
/// ground truth it overlaps most, if that overlap exceeds 0.5.
pub fn match_detections(dets: &[(f64, Shape)], gts: &[Shape], mode: MatchMode) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.0).collect();
    let mut res = MatchResult {
        tp_weight: vec![0.0; dets.len()],
        is_tp: vec![false; dets.len()],
        gt_matched: vec![false; gts.len()],
        scores: scores.clone(),
    };
    for k in score_order(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if res.gt_matched[g] {
                continue;
            }
            let o = overlap_voc(&dets[k].1, gt);
            if o > MATCH_OVERLAP && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, o)) = best {
            res.gt_matched[g] = true;
            res.is_tp[k] = true;
            res.tp_weight[k] = match mode {
                MatchMode::Discrete => 1.0,
                MatchMode::Continuous => o,
            };
        }
    }
    res
}

/// TPR as a function of the allowed false-positive count.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<(usize, f64)>,
    /// Set when a requested count exceeds the false positives available, so
    /// that point only reflects every detection.
    pub truncated: bool,
}

/// For each `k`, the TPR at the lowest score threshold admitting at most `k`
/// false positives over all images. Tied scores enter together.
pub fn tpr_at_fp(results: &[MatchResult], total_gt: usize, fp_counts: &[usize]) -> EvalCurve {
    let mut all: Vec<(f64, f64, bool)> = results
        .iter()
        .flat_map(|r| r.scores.iter().zip(&r.tp_weight).zip(&r.is_tp).map(|((&s, &w), &tp)| (s, w, tp)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    // (fp, tp) after each complete score group.
    let mut steps = vec![(0usize, 0.0f64)];
    let (mut fp, mut tp) = (0usize, 0.0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].2 {
                tp += all[i].1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((fp, tp));
    }
    let denom = total_gt.max(1) as f64;
    let mut counts = fp_counts.to_vec();
    counts.sort_unstable();
    let points = counts
        .iter()
        .map(|&k| {
            let best = steps.iter().filter(|(f, _)| *f <= k).map(|(_, t)| *t).fold(0.0, f64::max);
            (k, if total_gt == 0 { 0.0 } else { best / denom })
        })
        .collect();
    EvalCurve {
        points,
        truncated: counts.iter().any(|&k| k > fp),
    }
}

/// Score threshold that admits at most `fppi * num_images` of
/// `negative_scores` (acceptance is `score > threshold`).
pub fn threshold_at_fppi(negative_scores: &[f64], num_images: usize, fppi: f64) -> f64 {
    let k = (fppi * num_images as f64).floor() as usize;
    let mut s = negative_scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if s.len() <= k {
        f64::NEG_INFINITY
    } else {
        s[k]
    }
}

fn pearson_abs_offdiag(x: &[f64], s: usize, f: usize) -> f64 {
    // x is [s, f] row-major.
    let mut mean = vec![0.0; f];
    for row in x.chunks(f) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / s as f64;
        }
    }
    let mut cov = vec![0.0; f * f];
    for row in x.chunks(f) {
        for i in 0..f {
            let di = row[i] - mean[i];
            if di == 0.0 {
                continue;
            }
            for j in i..f {
                cov[i * f + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let constant: Vec<bool> = (0..f).map(|c| x.chunks(f).all(|row| row[c] == x[c])).collect();
    let mut total = 0.0;
    for i in 0..f {
        for j in i + 1..f {
            let d = cov[i * f + i] * cov[j * f + j];
            if d > 0.0 && !constant[i] && !constant[j] {
                total += 2.0 * (cov[i * f + j] / d.sqrt()).abs();
            }
        }
    }
    total
}

/// `sum_{i != j} |rho_ij|` of the channel correlation matrix of `[S, F]`
/// activations. Constant channels contribute 0.
pub fn correlation_stat(activations: &Tensor) -> Result<f64> {
    let s = activations.shape();
    if s.len() != 2 || s[0] < 2 {
        return invalid(format!("correlation needs [S >= 2, F] activations, got {s:?}"));
    }
    Ok(pearson_abs_offdiag(activations.data(), s[0], s[1]))
}

/// Per-location variant for `[S, F, H, W]` activations: the statistic of
/// each spatial position, averaged over positions.
pub fn correlation_stat_per_location(activations: &Tensor) -> Result<f64> {
    let s = activations.shape();
    if s.len() != 4 || s[0] < 2 {
        return invalid(format!("per-location correlation needs [S >= 2, F, H, W], got {s:?}"));
    }
    let (n, f, hw) = (s[0], s[1], s[2] * s[3]);
    let d = activations.data();
    let per: Vec<f64> = (0..hw)
        .into_par_iter()
        .map(|p| {
            let mut x = Vec::with_capacity(n * f);
            for k in 0..n {
                for c in 0..f {
                    x.push(d[(k * f + c) * hw + p]);
                }
            }
            pearson_abs_offdiag(&x, n, f)
        })
        .collect();
    Ok(per.iter().sum::<f64>() / hw as f64)
}

/// Which correlation statistic to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrelationMode {
    PerLocation,
    Pooled,
}

/// Last-convolution activations of `samples` in inference mode,
/// `[S, F, h, w]`.
pub fn last_conv_activations(model: &DetectorModel, samples: &[Sample]) -> Result<Tensor> {
    let maps = samples
        .par_iter()
        .map(|s| Ok(forward_window(model, &s.input, false, 0)?.features))
        .collect::<Result<Vec<Tensor>>>()?;
    let first = maps.first().map(|m| m.shape().to_vec()).unwrap_or_else(|| vec![0, 0, 0]);
    let mut shape = vec![maps.len()];
    shape.extend(first);
    let data = maps.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_vec(&shape, data)
}

/// Correlation statistic of a model's last convolution on `samples`.
pub fn model_correlation(model: &DetectorModel, samples: &[Sample], mode: CorrelationMode) -> Result<f64> {
    let acts = last_conv_activations(model, samples)?;
    match mode {
        CorrelationMode::PerLocation => correlation_stat_per_location(&acts),
        CorrelationMode::Pooled => {
            let s = acts.shape().to_vec();
            let hw = s[2] * s[3];
            let pooled = acts.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
            correlation_stat(&Tensor::from_vec(&[s[0], s[1]], pooled)?)
        }
    }
}

/// Overwrites a contiguous band covering `fraction` of the window (the part
/// inside the context ring) with uniform noise. The band spans the window
/// along one random axis and sits at a random offset along the other.
pub fn occlude(crop: &Tensor, context_px: usize, fraction: f64, seed: u64) -> Result<Tensor> {
    let (c, h, w) = crop.dims3()?;
    if !(0.0..=1.0).contains(&fraction) {
        return invalid(format!("occlusion fraction {fraction} outside [0, 1]"));
    }
    let win = h.min(w).saturating_sub(2 * context_px);
    let mut out = crop.clone();
    let band = (fraction * win as f64).round() as usize;
    if band == 0 {
        return Ok(out);
    }
    let mut r = rng::rng(seed, 0x0CC1);
    let vertical = r.random::<bool>();
    let off = r.random_range(0..=win - band);
    let (rows, cols) = if vertical {
        (0..win, off..off + band)
    } else {
        (off..off + band, 0..win)
    };
    for ch in 0..c {
        for i in rows.clone() {
            for j in cols.clone() {
                out.set3(ch, context_px + i, context_px + j, r.random::<f64>());
            }
        }
    }
    Ok(out)
}

/// Max-pose scores of every post-NMS detection on face-free images.
pub fn negative_scores(model: &DetectorModel, images: &[Tensor], cfg: &DetectConfig) -> Result<Vec<f64>> {
    let mut dc = *cfg;
    dc.score_threshold = f64::NEG_INFINITY;
    let per = images
        .par_iter()
        .map(|im| Ok(detect(im, model, &dc)?.into_iter().map(|d| d.score).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Occlusion harness settings.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionConfig {
    pub fraction: f64,
    pub fppi: f64,
    pub seed: u64,
    pub detect: DetectConfig,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            fraction: 0.3,
            fppi: 0.1,
            seed: 0,
            detect: DetectConfig::default(),
        }
    }
}

/// Windows (with context) around every test face, as RGB crops.
pub fn positive_crops(images: &[SynthImage]) -> Result<Vec<Tensor>> {
    let ctx = crate::detector::network::CONTEXT_CELLS * SHRINK;
    let per = images
        .par_iter()
        .map(|im| {
            im.faces
                .iter()
                .map(|e| {
                    Ok(crop_window(&im.image, &face_box(e), WINDOW_PX as usize, ctx, Jitter::default(), 0)?.image)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Recall of each model on occluded positive windows, at the score
/// threshold giving `cfg.fppi` on the clean anchor images.
pub fn occlusion_experiment(
    model_a: &DetectorModel,
    model_b: &DetectorModel,
    positive_windows: &[Tensor],
    anchor_images: &[Tensor],
    cfg: &OcclusionConfig,
) -> Result<(f64, f64)> {
    let ctx = crate::detector::network::CONTEXT_CELLS * SHRINK;
    let occluded = positive_windows
        .par_iter()
        .enumerate()
        .map(|(k, w)| {
            let o = occlude(w, ctx, cfg.fraction, rng::derive(cfg.seed, k as u64))?;
            Ok(crate::features::compute_channels(&o)?.channels)
        })
        .collect::<Result<Vec<_>>>()?;
    let recall = |m: &DetectorModel| -> Result<f64> {
        let thr = threshold_at_fppi(&negative_scores(m, anchor_images, &cfg.detect)?, anchor_images.len(), cfg.fppi);
        let hits = occluded
            .par_iter()
            .map(|x| Ok(m.score_window(x)?.0 > thr))
            .collect::<Result<Vec<bool>>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
    };
    Ok((recall(model_a)?, recall(model_b)?))
}

/// Detections of one image turned into matchable shapes: the refined
/// ellipse if present, else the ellipse inscribed in the box.
pub fn detection_shape(d: &Detection) -> Shape {
    Shape::Ellipse(d.ellipse.unwrap_or_else(|| Ellipse::inscribed(&d.bbox)))
}

/// Runs detection (optionally refined) over annotated images and matches
/// against the ground truth.
pub fn evaluate_images(
    model: &DetectorModel,
    regressor: Option<&RegressorModel>,
    images: &[SynthImage],
    cfg: &DetectConfig,
    mode: MatchMode,
) -> Result<(Vec<MatchResult>, usize)> {
    let results = images
        .par_iter()
        .map(|im| {
            let mut dets = detect(&im.image, model, cfg)?;
            if let Some(r) = regressor {
                for d in &mut dets {
                    d.ellipse = Some(refine_detection(r, &im.image, d)?);
                }
            }
            let shapes: Vec<(f64, Shape)> = dets.iter().map(|d| (d.score, detection_shape(d))).collect();
            let gts: Vec<Shape> = im.faces.iter().map(|e| Shape::Ellipse(*e)).collect();
            Ok(match_detections(&shapes, &gts, mode))
        })
        .collect::<Result<Vec<_>>>()?;
    let total_gt = images.iter().map(|im| im.faces.len()).sum();
    Ok((results, total_gt))
}

/// TPR at `fppi` false positives per image over annotated test images.
pub fn tpr_at_fppi(model: &DetectorModel, images: &[SynthImage], cfg: &DetectConfig, fppi: f64) -> Result<f64> {
    let mut dc = *cfg;
    dc.score_threshold = f64::NEG_INFINITY;
    let (res, total) = evaluate_images(model, None, images, &dc, MatchMode::Discrete)?;
    let k = (fppi * images.len() as f64).floor() as usize;
    Ok(tpr_at_fp(&res, total, &[k]).points[0].1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub loss: crate::detector::LossKind,
    pub fraction: f64,
    pub per_seed: Vec<f64>,
    pub mean_tpr: f64,
}

/// Seeded subset of `frac` of the positives (at least one).
pub fn subsample(positives: &[Sample], frac: f64, seed: u64) -> Result<Vec<Sample>> {
    use rand::seq::SliceRandom;
    if !(frac > 0.0 && frac <= 1.0) {
        return invalid(format!("fraction {frac} outside (0, 1]"));
    }
    let n = (positives.len() as f64 * frac).round() as usize;
    if n == 0 {
        return invalid(format!("fraction {frac} leaves no positives"));
    }
    let mut idx: Vec<usize> = (0..positives.len()).collect();
    idx.shuffle(&mut rng::rng(seed, 0x5AB5));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| positives[i].clone()).collect())
}

/// Trains grid and hinge models per (fraction, seed) and reports TPR at
/// `fppi` on the test images, averaged over seeds.
pub fn dataset_size_sweep(
    fractions: &[f64],
    seeds: &[u64],
    base: &TrainConfig,
    positives: &[Sample],
    negatives: &[Sample],
    test_images: &[SynthImage],
    fppi: f64,
) -> Result<Vec<SweepRow>> {
    use crate::detector::LossKind;
    let mut rows = Vec::new();
    for &loss in &[LossKind::Grid, LossKind::Hinge] {
        for &frac in fractions {
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let pos = subsample(positives, frac, seed)?;
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.model.seed = seed;
                cfg.model.loss = loss;
                let m = train(&pos, negatives, &cfg)?;
                per_seed.push(tpr_at_fppi(&m, test_images, &cfg.detect, fppi)?);
            }
            let mean_tpr = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
            rows.push(SweepRow {
                loss,
                fraction: frac,
                per_seed,
                mean_tpr,
            });
        }
    }
    Ok(rows)
}

/// Tab-separated table with a header row.
pub fn tsv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

/// `fp_count<TAB>tpr` lines.
pub fn curve_to_text(curve: &EvalCurve) -> String {
    let mut out = String::new();
    for (k, t) in &curve.points {
        let _ = writeln!(out, "{k}\t{t:.6}");
    }
    out
}

/// Minimal SVG line chart of one or more curves.
pub fn curves_svg(curves: &[(&str, &EvalCurve)]) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let max_fp = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\">false positives</text>\n\
         <text x=\"4\" y=\"{}\" font-size=\"12\">TPR</text>\n",
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0 - 40.0,
        h - 8.0,
        m - 8.0
    );
    for (k, (name, c)) in curves.iter().enumerate() {
        let color = colors[k % colors.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(fp, t)| {
                format!(
                    "{:.1},{:.1}",
                    m + (w - 2.0 * m) * fp as f64 / max_fp,
                    h - m - (h - 2.0 * m) * t
                )
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>",
            w - m - 90.0,
            m + 16.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Mean o_VOC between each GT face and its best-overlapping detection
/// (0 when none), for comparing localization across detector settings.
pub fn mean_matched_overlap(per_image: &[(Vec<Shape>, Vec<Shape>)]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (gts, dets) in per_image {
        for g in gts {
            total += dets.iter().map(|d| overlap_voc(d, g)).fold(0.0, f64::max);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;

    fn bx(x: f64) -> Shape {
        Shape::Box(BBox::new(x, 0.0, 10.0, 10.0).unwrap())
    }

    #[test]
    fn perfect_and_double_detections() {
        let gts = vec![bx(0.0), bx(50.0)];
        let r = match_detections(&[(0.9, bx(0.0)), (0.8, bx(50.0))], &gts, MatchMode::Discrete);
        assert_eq!(r.is_tp, vec![true, true]);
        let c = tpr_at_fp(&[r], 2, &[0]);
        assert_eq!(c.points, vec![(0, 1.0)]);
        let r = match_detections(&[(0.9, bx(0.0)), (0.8, bx(1.0))], &gts[..1], MatchMode::Discrete);
        assert_eq!(r.is_tp, vec![true, false]);
    }

    #[test]
    fn continuous_weight() {
        // Overlap 0.7: boxes [0,10] and [x, x+10] with 10-x / (10+x) = 0.7.
        let x = 3.0 / 1.7;
        let r = match_detections(&[(1.0, bx(x))], &[bx(0.0)], MatchMode::Continuous);
        assert!((r.tp_weight[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn hand_curve() {
        // Scores 5..1 labelled TP FP TP FP TP over 4 GT.
        let r = MatchResult {
            scores: vec![5.0, 4.0, 3.0, 2.0, 1.0],
            tp_weight: vec![1.0, 0.0, 1.0, 0.0, 1.0],
            is_tp: vec![true, false, true, false, true],
            gt_matched: vec![true, true, true, false],
        };
        let c = tpr_at_fp(&[r], 4, &[0, 1, 2, 3]);
        assert_eq!(c.points, vec![(0, 0.25), (1, 0.5), (2, 0.75), (3, 0.75)]);
        assert!(c.truncated);
        let empty = tpr_at_fp(&[], 3, &[0, 10]);
        assert_eq!(empty.points, vec![(0, 0.0), (10, 0.0)]);
    }

    #[test]
    fn fppi_threshold() {
        let s = [0.9, 0.5, 0.7, 0.1];
        assert_eq!(threshold_at_fppi(&s, 10, 0.1), 0.7);
        assert_eq!(threshold_at_fppi(&s, 50, 0.1), f64::NEG_INFINITY);
    }

    #[test]
    fn correlation_cases() {
        let x: Vec<f64> = (0..20).map(|k| (k as f64).sin()).collect();
        let same = Tensor::from_vec(&[20, 3], x.iter().flat_map(|&v| [v, v, v]).collect()).unwrap();
        assert!((correlation_stat(&same).unwrap() - 6.0).abs() < 1e-9);
        let anti = Tensor::from_vec(&[20, 2], x.iter().flat_map(|&v| [v, -v]).collect()).unwrap();
        assert!((correlation_stat(&anti).unwrap() - 2.0).abs() < 1e-9);
        let constant = Tensor::from_vec(&[20, 2], x.iter().flat_map(|&v| [v, 1.0]).collect()).unwrap();
        assert_eq!(correlation_stat(&constant).unwrap(), 0.0);
        assert!(correlation_stat(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn occlusion_bounds() {
        let crop = Tensor::filled(&[3, 96, 96], 0.5);
        assert_eq!(occlude(&crop, 8, 0.0, 1).unwrap(), crop);
        let full = occlude(&crop, 8, 1.0, 1).unwrap();
        assert_eq!(full.at3(0, 4, 4), 0.5);
        let changed = (0..96 * 96).filter(|&p| full.data()[p] != 0.5).count();
        assert_eq!(changed, 80 * 80);
        let part = occlude(&crop, 8, 0.3, 2).unwrap();
        let changed = (0..96 * 96).filter(|&p| part.data()[p] != 0.5).count();
        assert_eq!(changed, 24 * 80);
    }

    #[test]
    fn subsample_rules() {
        let s: Vec<Sample> = (0..10)
            .map(|_| Sample {
                input: Tensor::zeros(&[1, 1, 1]),
                label: crate::detector::network::Label::Negative,
            })
            .collect();
        assert_eq!(subsample(&s, 1.0, 0).unwrap().len(), 10);
        assert_eq!(subsample(&s, 0.3, 0).unwrap().len(), 3);
        assert!(subsample(&s, 0.01, 0).is_err());
        assert!(subsample(&s, 0.0, 0).is_err());
    }
}
