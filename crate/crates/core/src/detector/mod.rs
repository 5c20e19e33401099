//! Sliding-window face detector: the two-layer convolution network over
//! channel features, pose-specific classifiers fused by max, dense scanning
//! of every pyramid level and min-area non-maximum suppression.

pub mod network;

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::features::{build_pyramid, ChannelMap, PyramidConfig, NUM_CHANNELS};
use crate::grid_loss::{FoldedClassifier, GridClassifier, GridSpec};
use crate::regressor::Ellipse;
use crate::tensor::{ConvLayer, Tensor};
use crate::trainer::init_weights;

pub use network::{
    attach_deep_supervision, forward_window, DeepSupervision, Label, Sample, CONTEXT_CELLS, INPUT_CELLS,
    WINDOW_CELLS,
};

/// Window side in pixels at scale 1.
pub const WINDOW_PX: f64 = 80.0;
/// Side of the object inside a window, in pixels at scale 1.
pub const FACE_PX: f64 = 60.0;
/// Suppression threshold on the min-area overlap.
pub const NMS_THRESHOLD: f64 = 0.3;

/// Output-layer loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Holistic hinge plus per-block hinge terms.
    Grid,
    /// Holistic hinge only.
    Hinge,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Grid => "grid",
            LossKind::Hinge => "hinge",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(LossKind::Grid),
            "hinge" => Ok(LossKind::Hinge),
            _ => invalid(format!("unknown loss `{s}` (expected grid|hinge)")),
        }
    }
}

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Filters per convolution layer.
    pub filters: Vec<usize>,
    /// Kernel side per convolution layer.
    pub kernels: Vec<usize>,
    /// Index of the layer whose output is contrast-normalized.
    pub lcn_after: usize,
    /// Number of pose units in the output layer.
    pub poses: usize,
    /// Grid block side in cells.
    pub block_n: usize,
    pub lambda: f64,
    pub loss: LossKind,
    pub dropout: f64,
    pub deep_supervision: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            filters: vec![8, 8],
            kernels: vec![5, 5],
            lcn_after: 0,
            poses: 2,
            block_n: 2,
            lambda: 1.0,
            loss: LossKind::Grid,
            dropout: 0.1,
            deep_supervision: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The four-layer 3x3 variant with wide filter banks.
    pub fn big() -> Self {
        ModelConfig {
            filters: vec![64, 256, 512, 512],
            kernels: vec![3, 3, 3, 3],
            ..ModelConfig::default()
        }
    }

    /// Effective weight of the local terms.
    pub fn effective_lambda(&self) -> f64 {
        match self.loss {
            LossKind::Grid => self.lambda,
            LossKind::Hinge => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.len() != self.kernels.len() {
            return invalid("filters and kernels must be non-empty and of equal length");
        }
        if self.lcn_after >= self.filters.len() {
            return invalid("lcn_after must index a layer");
        }
        if self.poses == 0 || self.block_n == 0 {
            return invalid("poses and block_n must be positive");
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return invalid("kernels must be odd");
        }
        let shrink: usize = self.kernels.iter().map(|k| k - 1).sum();
        if shrink >= WINDOW_CELLS {
            return invalid("kernels consume the whole window");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Convolution layers plus one grid classifier per pose unit.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub input_norm: InputNorm,
    pub layers: Vec<ConvLayer>,
    pub classifiers: Vec<GridClassifier>,
    /// Folded classifiers; present once the model is frozen for inference.
    pub folded: Option<Vec<FoldedClassifier>>,
}

impl DetectorModel {
    /// Gaussian-initialized model (std 0.01, zero biases).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut in_c = NUM_CHANNELS;
        for (l, (&f, &k)) in config.filters.iter().zip(&config.kernels).enumerate() {
            let weights = init_weights(&[f, in_c, k, k], crate::rng::derive(config.seed, 100 + l as u64));
            layers.push(ConvLayer::new(weights, Tensor::zeros(&[f]))?);
            in_c = f;
        }
        let mut model = DetectorModel {
            config,
            input_norm: InputNorm::identity(NUM_CHANNELS),
            layers,
            classifiers: Vec::new(),
            folded: None,
        };
        let s = network::final_map_size(&model);
        let spec = GridSpec::new(model.config.block_n, in_c, s, s, model.config.effective_lambda())?;
        for p in 0..model.config.poses {
            let mut g = GridClassifier::zeros(spec);
            let w = init_weights(&[spec.map_len()], crate::rng::derive(model.config.seed, 200 + p as u64));
            let folded = FoldedClassifier {
                weights: w.reshape(&[spec.f, spec.r, spec.c])?,
                bias: 0.0,
            };
            g.block_weights = GridClassifier::from_folded(&folded, spec)?.block_weights;
            model.classifiers.push(g);
        }
        Ok(model)
    }

    pub fn final_map_size(&self) -> usize {
        network::final_map_size(self)
    }

    /// Materializes the folded classifiers used by scanning.
    pub fn fold(&mut self) {
        self.folded = Some(self.classifiers.iter().map(GridClassifier::fold_back).collect());
    }

    pub fn is_folded(&self) -> bool {
        self.folded.is_some()
    }

    /// Per-pose folded scores of one `[10, 24, 24]` window.
    pub fn pose_scores(&self, input: &Tensor) -> Result<Vec<f64>> {
        let folded = self
            .folded
            .as_ref()
            .ok_or_else(|| Error::InvalidState("model is not folded".into()))?;
        let cache = forward_window(self, input, false, 0)?;
        folded.iter().map(|f| f.score(&cache.features)).collect()
    }

    /// Max-fused window score and the winning pose.
    pub fn score_window(&self, input: &Tensor) -> Result<(f64, usize)> {
        Ok(max_pose(&self.pose_scores(input)?))
    }
}

/// Fixed per-channel standardization `(x - mean) * scale` applied to the
/// network input. Being pointwise, it commutes with edge-replicated
/// padding, so scanning stays exact.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        InputNorm {
            mean: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    /// Mean and inverse standard deviation of every channel over all cells
    /// of `inputs`.
    pub fn fit<'a>(inputs: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let mut sum = [0.0; NUM_CHANNELS];
        let mut sq = [0.0; NUM_CHANNELS];
        let mut n = 0usize;
        for t in inputs {
            let plane = t.len() / NUM_CHANNELS;
            for (c, chunk) in t.data().chunks(plane).enumerate() {
                for v in chunk {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += plane;
        }
        if n == 0 {
            return Self::identity(NUM_CHANNELS);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| 1.0 / (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        InputNorm { mean, scale }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        if c != self.mean.len() {
            return Err(Error::Shape(format!("input has {c} channels, normalization {}", self.mean.len())));
        }
        let mut out = x.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let (m, s) = (self.mean[ch], self.scale[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        Ok(out)
    }
}

/// Maximum over pose scores; ties go to the lower pose index.
pub fn max_pose(scores: &[f64]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (p, &s) in scores.iter().enumerate() {
        if s > best.0 {
            best = (s, p);
        }
    }
    best
}

/// Axis-aligned box, top-left corner plus extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
            return invalid(format!("degenerate box ({x}, {y}, {w}, {h})"));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let h = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        w * h
    }

    /// Clips to `[0, cols] x [0, rows]`.
    pub fn clamp_to(&self, rows: usize, cols: usize) -> BBox {
        let x0 = self.x.clamp(0.0, cols as f64);
        let y0 = self.y.clamp(0.0, rows as f64);
        let x1 = (self.x + self.w).clamp(0.0, cols as f64);
        let y1 = (self.y + self.h).clamp(0.0, rows as f64);
        BBox {
            x: x0,
            y: y0,
            w: (x1 - x0).max(f64::MIN_POSITIVE),
            h: (y1 - y0).max(f64::MIN_POSITIVE),
        }
    }
}

/// Min-area overlap `|a n b| / min(|a|, |b|)`.
pub fn overlap_nms(a: &BBox, b: &BBox) -> f64 {
    a.intersection(b) / a.area().min(b.area())
}

/// One scored window in original-image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Object box (the central 60/80 of the window).
    pub bbox: BBox,
    pub score: f64,
    pub pose: usize,
    /// Pyramid level index.
    pub level: usize,
    /// Top-left window cell `(row, col)` on its level.
    pub cell: (usize, usize),
    /// Refined ellipse, when a regressor has been applied.
    pub ellipse: Option<Ellipse>,
}

impl Detection {
    /// Whole window (object box plus surround) in image pixels.
    pub fn window(&self) -> BBox {
        let pad = self.bbox.w * (WINDOW_PX - FACE_PX) / (2.0 * FACE_PX);
        let pad_y = self.bbox.h * (WINDOW_PX - FACE_PX) / (2.0 * FACE_PX);
        BBox {
            x: self.bbox.x - pad,
            y: self.bbox.y - pad_y,
            w: self.bbox.w * WINDOW_PX / FACE_PX,
            h: self.bbox.h * WINDOW_PX / FACE_PX,
        }
    }

    /// `image_path pose score x y w h` with four fraction digits, followed by
    /// `major minor angle cx cy` once refined.
    pub fn to_line(&self, image_path: &str) -> String {
        let mut s = format!(
            "{} {} {:.4} {:.4} {:.4} {:.4} {:.4}",
            image_path, self.pose, self.score, self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h
        );
        if let Some(e) = &self.ellipse {
            let _ = write!(s, " {:.4} {:.4} {:.4} {:.4} {:.4}", e.major, e.minor, e.angle, e.cx, e.cy);
        }
        s
    }
}

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.level.cmp(&b.level))
        .then(a.bbox.x.partial_cmp(&b.bbox.x).unwrap_or(Ordering::Equal))
        .then(a.bbox.y.partial_cmp(&b.bbox.y).unwrap_or(Ordering::Equal))
}

/// Greedy suppression: visiting by descending score (ties by level, then x),
/// keeps a detection only if its min-area overlap with every kept one is at
/// most `threshold`.
pub fn nms(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| overlap_nms(&k.bbox, &d.bbox) <= threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Like [`nms`] but stops after `limit` kept detections.
pub fn nms_top(mut dets: Vec<Detection>, threshold: f64, limit: usize) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|k| overlap_nms(&k.bbox, &d.bbox) <= threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Scanning and suppression settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectConfig {
    pub pyramid: PyramidConfig,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub stride_cells: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            pyramid: PyramidConfig::default(),
            score_threshold: 0.0,
            nms_threshold: NMS_THRESHOLD,
            stride_cells: 1,
        }
    }
}

/// Window scores of a whole level, `[P, rows - 19, cols - 19]`, computed by
/// one convolution pass over the contrast-context padded level.
pub fn level_scores(level: &ChannelMap, model: &DetectorModel) -> Result<Option<Tensor>> {
    if !model.is_folded() {
        return Err(Error::InvalidState(
            "model must be folded before scanning (training-mode model)".into(),
        ));
    }
    if level.rows() < WINDOW_CELLS || level.cols() < WINDOW_CELLS {
        return Ok(None);
    }
    let padded = level.channels.pad_replicate3(CONTEXT_CELLS)?;
    let final_map = network::forward_full_map(model, &padded)?;
    network::score_map(model, &final_map).map(Some)
}

/// The `[10, 24, 24]` network input of the window at `cell` on `level`.
pub fn window_input(level: &ChannelMap, cell: (usize, usize)) -> Result<Tensor> {
    level
        .channels
        .pad_replicate3(CONTEXT_CELLS)?
        .crop3(cell.0, cell.1, INPUT_CELLS, INPUT_CELLS)
}

/// Object box in source-image pixels of the window at `cell` on `level`.
pub fn window_box(level: &ChannelMap, cell: (usize, usize)) -> BBox {
    let (sy, sx) = level.effective_scale();
    let shrink = level.shrink as f64;
    let inset = (WINDOW_PX - FACE_PX) / 2.0;
    let bx = BBox {
        x: (cell.1 as f64 * shrink + inset) / sx,
        y: (cell.0 as f64 * shrink + inset) / sy,
        w: FACE_PX / sx,
        h: FACE_PX / sy,
    };
    bx.clamp_to(level.source_size.0, level.source_size.1)
}

/// Scans every window of one level, keeping those scoring above
/// `threshold`.
pub fn scan_level(
    level: &ChannelMap,
    level_index: usize,
    model: &DetectorModel,
    stride_cells: usize,
    threshold: f64,
) -> Result<Vec<Detection>> {
    if stride_cells == 0 {
        return invalid("stride must be positive");
    }
    let Some(scores) = level_scores(level, model)? else {
        return Ok(Vec::new());
    };
    let (p_n, rows, cols) = scores.dims3()?;
    let mut out = Vec::new();
    let mut pose_scores = vec![0.0; p_n];
    for a in (0..rows).step_by(stride_cells) {
        for b in (0..cols).step_by(stride_cells) {
            for (p, s) in pose_scores.iter_mut().enumerate() {
                *s = scores.at3(p, a, b);
            }
            let (score, pose) = max_pose(&pose_scores);
            if score > threshold {
                out.push(Detection {
                    bbox: window_box(level, (a, b)),
                    score,
                    pose,
                    level: level_index,
                    cell: (a, b),
                    ellipse: None,
                });
            }
        }
    }
    Ok(out)
}

/// Scans a prebuilt pyramid and suppresses overlaps.
pub fn detect_pyramid(levels: &[ChannelMap], model: &DetectorModel, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let per_level = levels
        .par_iter()
        .enumerate()
        .map(|(k, level)| scan_level(level, k, model, cfg.stride_cells, cfg.score_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(nms(per_level.into_iter().flatten().collect(), cfg.nms_threshold))
}

/// Full detection: pyramid, dense scan of every level, NMS.
pub fn detect(image: &Tensor, model: &DetectorModel, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    if !model.is_folded() {
        return Err(Error::InvalidState("model must be folded before detection".into()));
    }
    let pyramid = build_pyramid(image, cfg.pyramid)?;
    detect_pyramid(&pyramid.levels, model, cfg)
}
