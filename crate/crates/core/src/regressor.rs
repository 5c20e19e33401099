//! Ellipse refinement of detections.
//!
//! Overlap between ellipses is measured by rasterizing both onto a 40x40
//! grid and counting pixels. The regressor can be trained either on squared
//! error in its (box-relative) output space or by ascending the rasterized
//! overlap directly, using central differences whose step grows until the
//! raster actually changes.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::detector::BBox;
use crate::error::{invalid, Result};
use crate::features::{compute_channels, NUM_CHANNELS};
use crate::tensor::{conv2d, conv2d_backward, lcn, lcn_backward, relu, relu_backward, ConvLayer, Linear, Tensor};
use crate::trainer::{init_weights, OptimizerState};

/// Raster grid side in pixels.
pub const RASTER_SIZE: usize = 40;
/// Regressor input side in cells (twice the detector window resolution).
pub const REGRESSOR_CELLS: usize = 40;
/// Object box inside the regressor patch: `[5, 35]^2`.
pub const PATCH_FACE: BBox = BBox {
    x: 5.0,
    y: 5.0,
    w: 30.0,
    h: 30.0,
};

/// Ellipse in FDDB field order. `major` is the semi-axis along `angle`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub major: f64,
    pub minor: f64,
    /// Radians, orientation of the major axis.
    pub angle: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Ellipse {
    /// Builds a normalized ellipse: axes swapped if needed so that
    /// `major >= minor`, angle reduced to `[0, pi)`.
    pub fn new(major: f64, minor: f64, angle: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(major > 0.0 && minor > 0.0) || !major.is_finite() || !minor.is_finite() {
            return invalid(format!("ellipse axes must be positive, got {major}, {minor}"));
        }
        if !(angle.is_finite() && cx.is_finite() && cy.is_finite()) {
            return invalid("ellipse parameters must be finite");
        }
        let (major, minor, angle) = if minor > major {
            (minor, major, angle + PI / 2.0)
        } else {
            (major, minor, angle)
        };
        let mut angle = angle.rem_euclid(PI);
        if angle >= PI {
            angle = 0.0;
        }
        Ok(Ellipse {
            major,
            minor,
            angle,
            cx,
            cy,
        })
    }

    /// Ellipse inscribed in a box (axis-aligned).
    pub fn inscribed(b: &BBox) -> Self {
        let (cx, cy) = b.center();
        let (hx, hy) = (0.5 * b.w, 0.5 * b.h);
        if hy > hx {
            Ellipse {
                major: hy,
                minor: hx,
                angle: PI / 2.0,
                cx,
                cy,
            }
        } else {
            Ellipse {
                major: hx,
                minor: hy,
                angle: 0.0,
                cx,
                cy,
            }
        }
    }

    pub fn params(&self) -> [f64; 5] {
        [self.major, self.minor, self.angle, self.cx, self.cy]
    }

    /// Raw parameter vector back to an ellipse without normalization.
    pub fn from_params(p: [f64; 5]) -> Self {
        Ellipse {
            major: p[0],
            minor: p[1],
            angle: p[2],
            cx: p[3],
            cy: p[4],
        }
    }

    pub fn area(&self) -> f64 {
        PI * self.major * self.minor
    }

    /// Ramanujan's perimeter approximation.
    pub fn perimeter(&self) -> f64 {
        let (a, b) = (self.major, self.minor);
        let h = ((a - b) / (a + b)).powi(2);
        PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.major).powi(2) + (v / self.minor).powi(2) <= 1.0
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> BBox {
        let (s, c) = self.angle.sin_cos();
        let hx = ((self.major * c).powi(2) + (self.minor * s).powi(2)).sqrt();
        let hy = ((self.major * s).powi(2) + (self.minor * c).powi(2)).sqrt();
        BBox {
            x: self.cx - hx,
            y: self.cy - hy,
            w: 2.0 * hx,
            h: 2.0 * hy,
        }
    }

    /// Maps from a patch frame (`world = origin + scale * patch`) to world.
    pub fn to_world(&self, frame: &Frame) -> Ellipse {
        Ellipse {
            major: self.major * frame.scale,
            minor: self.minor * frame.scale,
            angle: self.angle,
            cx: frame.x0 + self.cx * frame.scale,
            cy: frame.y0 + self.cy * frame.scale,
        }
    }

    pub fn to_patch(&self, frame: &Frame) -> Ellipse {
        Ellipse {
            major: self.major / frame.scale,
            minor: self.minor / frame.scale,
            angle: self.angle,
            cx: (self.cx - frame.x0) / frame.scale,
            cy: (self.cy - frame.y0) / frame.scale,
        }
    }

    /// `major minor angle cx cy score`.
    pub fn to_line(&self, score: f64) -> String {
        format!(
            "{:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
            self.major, self.minor, self.angle, self.cx, self.cy, score
        )
    }
}

/// Square raster frame: patch pixel `(i, j)` has its centre at world
/// `(x0 + (j + 0.5) * scale, y0 + (i + 0.5) * scale)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub x0: f64,
    pub y0: f64,
    pub scale: f64,
}

impl Frame {
    pub const PATCH: Frame = Frame {
        x0: 0.0,
        y0: 0.0,
        scale: 1.0,
    };
}

/// Region used for overlap computations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Ellipse(Ellipse),
    Box(BBox),
}

impl Shape {
    fn bounds(&self) -> BBox {
        match self {
            Shape::Ellipse(e) => e.bounds(),
            Shape::Box(b) => *b,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse(e) => e.contains(x, y),
            Shape::Box(b) => x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h,
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Shape::Ellipse(e) => e.area(),
            Shape::Box(b) => b.area(),
        }
    }
}

/// Binary `40 x 40` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterMask {
    pub size: usize,
    pub bits: Vec<bool>,
}

impl RasterMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &RasterMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn differs(&self, other: &RasterMask) -> bool {
        self.bits != other.bits
    }
}

fn raster_shape(shape: &Shape, frame: &Frame) -> RasterMask {
    let n = RASTER_SIZE;
    let mut bits = vec![false; n * n];
    for i in 0..n {
        let y = frame.y0 + (i as f64 + 0.5) * frame.scale;
        for j in 0..n {
            let x = frame.x0 + (j as f64 + 0.5) * frame.scale;
            bits[i * n + j] = shape.contains(x, y);
        }
    }
    RasterMask { size: n, bits }
}

fn raster_ellipse_raw(e: &Ellipse) -> RasterMask {
    // Only the bounding rows/cols need testing.
    let n = RASTER_SIZE;
    let mut bits = vec![false; n * n];
    if e.major > 0.0 && e.minor > 0.0 {
        let b = e.bounds();
        let i0 = (b.y - 0.5).floor().max(0.0) as usize;
        let j0 = (b.x - 0.5).floor().max(0.0) as usize;
        let i1 = ((b.y + b.h).ceil().max(0.0) as usize).min(n);
        let j1 = ((b.x + b.w).ceil().max(0.0) as usize).min(n);
        for i in i0..i1 {
            for j in j0..j1 {
                bits[i * n + j] = e.contains(j as f64 + 0.5, i as f64 + 0.5);
            }
        }
    }
    RasterMask { size: n, bits }
}

/// Rasterizes an ellipse given in patch coordinates: a pixel is set iff its
/// centre satisfies the implicit ellipse inequality.
pub fn rasterize(e: &Ellipse) -> Result<RasterMask> {
    if !(e.major > 0.0 && e.minor > 0.0) {
        return invalid(format!("degenerate ellipse axes {} x {}", e.major, e.minor));
    }
    Ok(raster_ellipse_raw(e))
}

fn iou_counts(a: &RasterMask, b: &RasterMask) -> f64 {
    let inter = a.intersection(b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// PASCAL overlap of two ellipses in patch coordinates, by pixel counting on
/// the fixed 40x40 patch.
pub fn overlap_voc_patch(a: &Ellipse, b: &Ellipse) -> f64 {
    iou_counts(&raster_ellipse_raw(a), &raster_ellipse_raw(b))
}

/// PASCAL overlap `|a n b| / |a u b|`. Box pairs are exact; anything
/// involving an ellipse is rasterized on a 40x40 grid spanning both shapes.
pub fn overlap_voc(a: &Shape, b: &Shape) -> f64 {
    if let (Shape::Box(p), Shape::Box(q)) = (a, b) {
        let inter = p.intersection(q);
        let union = p.area() + q.area() - inter;
        return if union > 0.0 { inter / union } else { 0.0 };
    }
    let (ba, bb) = (a.bounds(), b.bounds());
    let x0 = ba.x.min(bb.x);
    let y0 = ba.y.min(bb.y);
    let side = (ba.x + ba.w).max(bb.x + bb.w) - x0;
    let side = side.max((ba.y + ba.h).max(bb.y + bb.h) - y0);
    if !(side > 0.0) {
        return 0.0;
    }
    let frame = Frame {
        x0,
        y0,
        scale: side / RASTER_SIZE as f64,
    };
    iou_counts(&raster_shape(a, &frame), &raster_shape(b, &frame))
}

/// Starting step per parameter `[major, minor, angle, cx, cy]`.
pub const EPS_START: [f64; 5] = [0.5, 0.5, 0.05, 0.5, 0.5];
/// Maximum number of step doublings.
pub const EPS_DOUBLINGS: usize = 8;

/// Central-difference gradient of the patch overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapGrad {
    /// `d o_VOC / d [major, minor, angle, cx, cy]`.
    pub g: [f64; 5],
    /// Step actually used per parameter.
    pub eps: [f64; 5],
    /// Parameters along which no step up to the cap changed the raster.
    pub degenerate: [bool; 5],
}

/// Central differences of [`overlap_voc_patch`] at `pred`. Each step starts
/// at [`EPS_START`] and doubles until both perturbed rasters differ from the
/// unperturbed one by at least a pixel.
pub fn numeric_overlap_grad(pred: &Ellipse, gt: &Ellipse) -> OverlapGrad {
    let gt_mask = raster_ellipse_raw(gt);
    let base = raster_ellipse_raw(pred);
    let p0 = pred.params();
    let mut out = OverlapGrad {
        g: [0.0; 5],
        eps: [0.0; 5],
        degenerate: [false; 5],
    };
    for i in 0..5 {
        let mut eps = EPS_START[i];
        let mut found = None;
        for _ in 0..=EPS_DOUBLINGS {
            let mut plus = p0;
            let mut minus = p0;
            plus[i] += eps;
            minus[i] -= eps;
            if i < 2 {
                minus[i] = minus[i].max(1e-9);
            }
            let mp = raster_ellipse_raw(&Ellipse::from_params(plus));
            let mm = raster_ellipse_raw(&Ellipse::from_params(minus));
            if mp.differs(&base) && mm.differs(&base) {
                found = Some((mp, mm));
                break;
            }
            eps *= 2.0;
        }
        match found {
            Some((mp, mm)) => {
                out.g[i] = (iou_counts(&mp, &gt_mask) - iou_counts(&mm, &gt_mask)) / (2.0 * eps);
                out.eps[i] = eps;
            }
            None => {
                out.degenerate[i] = true;
                out.eps[i] = eps / 2.0;
            }
        }
    }
    out
}

/// Scale reference of a box: mean half side.
fn half_size(b: &BBox) -> f64 {
    0.25 * (b.w + b.h)
}

/// Box-relative encoding `[dcx / w, dcy / h, ln(major / s), ln(minor / s), angle]`.
pub fn encode(e: &Ellipse, b: &BBox) -> [f64; 5] {
    let (bx, by) = b.center();
    let s = half_size(b);
    [
        (e.cx - bx) / b.w,
        (e.cy - by) / b.h,
        (e.major / s).ln(),
        (e.minor / s).ln(),
        e.angle,
    ]
}

/// Inverse of [`encode`] without normalization (axes may come out swapped).
pub fn decode_raw(o: &[f64; 5], b: &BBox) -> Ellipse {
    let (bx, by) = b.center();
    let s = half_size(b);
    Ellipse {
        major: s * o[2].exp(),
        minor: s * o[3].exp(),
        angle: o[4],
        cx: bx + o[0] * b.w,
        cy: by + o[1] * b.h,
    }
}

/// Decodes regressor outputs into a normalized ellipse.
pub fn decode(o: &[f64; 5], b: &BBox) -> Ellipse {
    let e = decode_raw(o, b);
    Ellipse::new(e.major, e.minor, e.angle, e.cx, e.cy).unwrap_or(e)
}

/// Jacobian diagonal of [`decode_raw`]: `d params / d outputs`, with params
/// in `[major, minor, angle, cx, cy]` order and outputs in encoding order.
fn decode_jacobian(o: &[f64; 5], b: &BBox) -> [f64; 5] {
    let e = decode_raw(o, b);
    // outputs -> params: o0->cx, o1->cy, o2->major, o3->minor, o4->angle
    [b.w, b.h, e.major, e.minor, 1.0]
}

/// Small convolutional ellipse regressor over `[10, 40, 40]` windows:
/// conv 5x5 -> ReLU -> LCN -> conv 5x5 stride 2 -> ReLU -> linear(5).
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorModel {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub head: Linear,
}

struct RegCache {
    a1: Tensor,
    r1: Tensor,
    n1: Tensor,
    a2: Tensor,
    flat: Vec<f64>,
    out: [f64; 5],
}

/// Regressor training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegressorLoss {
    /// Squared error on the box-relative encoding.
    Sse,
    /// Ascent on the rasterized overlap.
    Num,
}

impl std::str::FromStr for RegressorLoss {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sse" => Ok(RegressorLoss::Sse),
            "num" => Ok(RegressorLoss::Num),
            _ => invalid(format!("unknown regressor loss `{s}` (expected sse|num)")),
        }
    }
}

impl std::fmt::Display for RegressorLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressorLoss::Sse => "sse",
            RegressorLoss::Num => "num",
        })
    }
}

impl RegressorModel {
    /// Gaussian-initialized convolutions, zero head (decodes to the
    /// inscribed circle until trained).
    pub fn new(filters1: usize, filters2: usize, seed: u64) -> Self {
        let conv1 = ConvLayer {
            weights: init_weights(&[filters1, NUM_CHANNELS, 5, 5], crate::rng::derive(seed, 300)),
            bias: Tensor::zeros(&[filters1]),
        };
        let conv2 = ConvLayer {
            weights: init_weights(&[filters2, filters1, 5, 5], crate::rng::derive(seed, 301)),
            bias: Tensor::zeros(&[filters2]),
        };
        let feat = filters2 * Self::map_side() * Self::map_side();
        RegressorModel {
            conv1,
            conv2,
            head: Linear::zeros(5, feat),
        }
    }

    fn map_side() -> usize {
        (REGRESSOR_CELLS - 4 - 5) / 2 + 1
    }

    fn forward_cache(&self, input: &Tensor) -> Result<RegCache> {
        let (c, h, w) = input.dims3()?;
        if c != NUM_CHANNELS || h != REGRESSOR_CELLS || w != REGRESSOR_CELLS {
            return crate::error::shape_err(format!(
                "regressor input must be [{NUM_CHANNELS}, {REGRESSOR_CELLS}, {REGRESSOR_CELLS}], got {:?}",
                input.shape()
            ));
        }
        let a1 = conv2d(input, &self.conv1, 1)?;
        let r1 = relu(&a1);
        let n1 = lcn(&r1)?;
        let a2 = conv2d(&n1, &self.conv2, 2)?;
        let flat = relu(&a2).into_data();
        let o = self.head.forward(&flat)?;
        Ok(RegCache {
            a1,
            r1,
            n1,
            a2,
            flat,
            out: [o[0], o[1], o[2], o[3], o[4]],
        })
    }

    /// Raw 5-vector output.
    pub fn outputs(&self, input: &Tensor) -> Result<[f64; 5]> {
        Ok(self.forward_cache(input)?.out)
    }

    /// Backpropagates `grad_out` (d loss / d outputs) into parameter
    /// gradients, ordered as [`RegressorModel::param_slices_mut`].
    fn backward(&self, input: &Tensor, cache: &RegCache, grad_out: &[f64; 5], freeze_features: bool) -> Result<Vec<Vec<f64>>> {
        let (gflat, gw, gb) = self.head.backward(&cache.flat, grad_out)?;
        if freeze_features {
            return Ok(vec![
                vec![0.0; self.conv1.weights.len()],
                vec![0.0; self.conv1.bias.len()],
                vec![0.0; self.conv2.weights.len()],
                vec![0.0; self.conv2.bias.len()],
                gw.into_data(),
                gb.into_data(),
            ]);
        }
        let g_a2 = relu_backward(&cache.a2, &Tensor::from_vec(cache.a2.shape(), gflat)?)?;
        let c2 = conv2d_backward(&cache.n1, &self.conv2, &g_a2, 2)?;
        let g_r1 = lcn_backward(&cache.r1, &c2.input)?;
        let g_a1 = relu_backward(&cache.a1, &g_r1)?;
        let c1 = crate::tensor::conv2d_backward_params(input, &self.conv1, &g_a1, 1)?;
        Ok(vec![
            c1.weights.into_data(),
            c1.bias.into_data(),
            c2.weights.into_data(),
            c2.bias.into_data(),
            gw.into_data(),
            gb.into_data(),
        ])
    }

    /// Parameter gradients of `dot(grad_out, outputs(input))`.
    pub fn output_gradient(&self, input: &Tensor, grad_out: &[f64; 5]) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cache(input)?;
        self.backward(input, &cache, grad_out, false)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.conv1.weights.data_mut(),
            self.conv1.bias.data_mut(),
            self.conv2.weights.data_mut(),
            self.conv2.bias.data_mut(),
            self.head.weights.data_mut(),
            self.head.bias.data_mut(),
        ]
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        vec![
            self.conv1.weights.len(),
            self.conv1.bias.len(),
            self.conv2.weights.len(),
            self.conv2.bias.len(),
            self.head.weights.len(),
            self.head.bias.len(),
        ]
    }
}

/// Predicts the ellipse for a `[10, 40, 40]` window, in patch coordinates
/// relative to [`PATCH_FACE`].
pub fn regress(model: &RegressorModel, window_channels: &Tensor) -> Result<Ellipse> {
    let o = model.outputs(window_channels)?;
    Ok(decode(&o, &PATCH_FACE))
}

/// Channel window for the regressor: the detection window resampled to twice
/// the detector resolution (160 px, 40 cells), plus its patch frame.
pub fn regressor_input(image: &Tensor, window: &BBox) -> Result<(Tensor, Frame)> {
    let px = REGRESSOR_CELLS * crate::features::SHRINK;
    let crop = crate::data::crop_region(image, window, px)?;
    let channels = compute_channels(&crop)?.channels;
    let frame = Frame {
        x0: window.x,
        y0: window.y,
        scale: window.w / RASTER_SIZE as f64,
    };
    Ok((channels, frame))
}

/// Refined ellipse of a detection, in image coordinates.
pub fn refine_detection(model: &RegressorModel, image: &Tensor, det: &crate::detector::Detection) -> Result<Ellipse> {
    let (input, frame) = regressor_input(image, &det.window())?;
    Ok(regress(model, &input)?.to_world(&frame))
}

/// One regressor training example: the window, its ground truth in patch
/// coordinates, and the patch frame in the source image.
#[derive(Clone, Debug)]
pub struct RegressorSample {
    pub input: Tensor,
    pub gt: Ellipse,
    pub frame: Frame,
}

impl RegressorSample {
    /// The (jittered) detection box this sample stands for, in image pixels.
    pub fn detection_box(&self) -> BBox {
        BBox {
            x: self.frame.x0 + PATCH_FACE.x * self.frame.scale,
            y: self.frame.y0 + PATCH_FACE.y * self.frame.scale,
            w: PATCH_FACE.w * self.frame.scale,
            h: PATCH_FACE.h * self.frame.scale,
        }
    }
}

/// Jittered windows around every face, `per_face` each, as regressor
/// training data.
pub fn regressor_samples(
    images: &[crate::data::SynthImage],
    per_face: usize,
    jitter: crate::data::Jitter,
    seed: u64,
) -> Result<Vec<RegressorSample>> {
    let px = REGRESSOR_CELLS * crate::features::SHRINK;
    let per = images
        .par_iter()
        .enumerate()
        .map(|(k, im)| {
            let mut out = Vec::new();
            for (f, e) in im.faces.iter().enumerate() {
                for j in 0..per_face {
                    let s = crate::rng::derive(seed, ((k as u64) << 20) | ((f as u64) << 10) | j as u64);
                    let crop = crate::data::crop_window(&im.image, &crate::data::face_box(e), px, 0, jitter, s)?;
                    let frame = Frame {
                        x0: crop.frame.x0,
                        y0: crop.frame.y0,
                        scale: crop.frame.scale * (px / RASTER_SIZE) as f64,
                    };
                    out.push(RegressorSample {
                        input: compute_channels(&crop.image)?.channels,
                        gt: e.to_patch(&frame),
                        frame,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

const REGRESSOR_MAGIC: &str = "GRIDLOSS-REGRESSOR 1";

/// Text serialization in the model-file array layout.
pub fn regressor_to_string(model: &RegressorModel, loss: RegressorLoss) -> String {
    use crate::trainer::write_array;
    let mut out = format!("{REGRESSOR_MAGIC}\nloss {loss}\n");
    write_array(&mut out, "conv1.weights", model.conv1.weights.shape(), model.conv1.weights.data());
    write_array(&mut out, "conv1.bias", model.conv1.bias.shape(), model.conv1.bias.data());
    write_array(&mut out, "conv2.weights", model.conv2.weights.shape(), model.conv2.weights.data());
    write_array(&mut out, "conv2.bias", model.conv2.bias.shape(), model.conv2.bias.data());
    write_array(&mut out, "head.weights", model.head.weights.shape(), model.head.weights.data());
    write_array(&mut out, "head.bias", model.head.bias.shape(), model.head.bias.data());
    out
}

pub fn regressor_from_str(text: &str, path: &str) -> Result<(RegressorModel, RegressorLoss)> {
    let mut r = crate::trainer::Reader::new(text, path);
    if r.next()? != REGRESSOR_MAGIC {
        return r.err(format!("missing `{REGRESSOR_MAGIC}` header"));
    }
    let loss: RegressorLoss = r.keyed_parse("loss")?;
    let conv1 = ConvLayer::new(r.array("conv1.weights")?, r.array("conv1.bias")?)?;
    let conv2 = ConvLayer::new(r.array("conv2.weights")?, r.array("conv2.bias")?)?;
    let (w, b) = (r.array("head.weights")?, r.array("head.bias")?);
    let feat = conv2.out_channels() * RegressorModel::map_side() * RegressorModel::map_side();
    if conv1.in_channels() != NUM_CHANNELS
        || conv2.in_channels() != conv1.out_channels()
        || w.shape() != [5, feat]
        || b.shape() != [5]
    {
        return r.err("regressor arrays have inconsistent shapes");
    }
    Ok((RegressorModel { conv1, conv2, head: Linear { weights: w, bias: b } }, loss))
}

/// Regressor optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorConfig {
    pub loss: RegressorLoss,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub filters: (usize, usize),
    /// Train only the linear head.
    pub freeze_features: bool,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            loss: RegressorLoss::Sse,
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 16,
            filters: (4, 8),
            freeze_features: false,
            seed: 0,
        }
    }
}

/// Per-sample loss and output gradient for the chosen objective.
fn output_gradient(loss: RegressorLoss, out: &[f64; 5], gt: &Ellipse) -> (f64, [f64; 5]) {
    match loss {
        RegressorLoss::Sse => {
            let t = encode(gt, &PATCH_FACE);
            let mut g = [0.0; 5];
            let mut l = 0.0;
            for k in 0..5 {
                let d = out[k] - t[k];
                l += d * d;
                g[k] = 2.0 * d;
            }
            (l, g)
        }
        RegressorLoss::Num => {
            let pred = decode_raw(out, &PATCH_FACE);
            let og = numeric_overlap_grad(&pred, gt);
            let jac = decode_jacobian(out, &PATCH_FACE);
            // param index of each output: o0->cx(3), o1->cy(4), o2->major(0), o3->minor(1), o4->angle(2)
            let map = [3, 4, 0, 1, 2];
            let mut g = [0.0; 5];
            for k in 0..5 {
                g[k] = -og.g[map[k]] * jac[k];
            }
            (-overlap_voc_patch(&pred, gt), g)
        }
    }
}

/// Mean objective over a dataset (SSE, or negative mean overlap for NUM).
pub fn regressor_loss(model: &RegressorModel, data: &[RegressorSample], loss: RegressorLoss) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|s| Ok(output_gradient(loss, &model.outputs(&s.input)?, &s.gt).0))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
}

/// One optimizer step on `batch`; returns the batch mean loss.
pub fn regressor_step(
    model: &mut RegressorModel,
    state: &mut OptimizerState,
    batch: &[&RegressorSample],
    cfg: &RegressorConfig,
) -> Result<f64> {
    let per_sample = batch
        .par_iter()
        .map(|s| {
            let cache = model.forward_cache(&s.input)?;
            let (l, g) = output_gradient(cfg.loss, &cache.out, &s.gt);
            Ok((l, model.backward(&s.input, &cache, &g, cfg.freeze_features)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut total = model.param_shapes().into_iter().map(|n| vec![0.0; n]).collect::<Vec<_>>();
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l * inv;
        for (acc, gs) in total.iter_mut().zip(g) {
            for (a, v) in acc.iter_mut().zip(gs) {
                *a += v * inv;
            }
        }
    }
    let grads: Vec<&[f64]> = total.iter().map(Vec::as_slice).collect();
    crate::trainer::sgd_momentum_step(&mut model.param_slices_mut(), &grads, state, cfg.lr, cfg.momentum)?;
    Ok(loss)
}

/// Trains a regressor with SGD and momentum, reshuffling every epoch.
pub fn train_regressor(data: &[RegressorSample], cfg: &RegressorConfig) -> Result<RegressorModel> {
    Ok(train_regressor_with_history(data, cfg)?.0)
}

/// Like [`train_regressor`], also returning the mean training loss of every
/// epoch (measured after the epoch).
pub fn train_regressor_with_history(data: &[RegressorSample], cfg: &RegressorConfig) -> Result<(RegressorModel, Vec<f64>)> {
    use rand::seq::SliceRandom;
    if data.is_empty() {
        return invalid("regressor training set is empty");
    }
    if cfg.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let mut model = RegressorModel::new(cfg.filters.0, cfg.filters.1, cfg.seed);
    let mut state = OptimizerState::new(&model.param_shapes());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = crate::rng::rng(cfg.seed, 400 + epoch as u64);
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&RegressorSample> = chunk.iter().map(|&i| &data[i]).collect();
            regressor_step(&mut model, &mut state, &batch, cfg)?;
        }
        history.push(regressor_loss(&model, data, cfg.loss)?);
    }
    Ok((model, history))
}
