//! Aggregate channel features (LUV colour, gradient magnitude and six
//! oriented-gradient channels, sum-pooled over 4x4 pixel cells) and the
//! multi-scale pyramid built from them.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const NUM_CHANNELS: usize = 10;
pub const NUM_ORIENTATIONS: usize = 6;
/// Pixels per cell edge.
pub const SHRINK: usize = 4;

/// Channel features of one image (or one pyramid level).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMap {
    /// `[10, H/4, W/4]`: L, U, V, gradient magnitude, orientations 0..6.
    pub channels: Tensor,
    /// Nominal pyramid scale relative to the source image.
    pub scale: f64,
    pub shrink: usize,
    /// Size in pixels `(rows, cols)` of the resampled image the channels
    /// were computed from.
    pub image_size: (usize, usize),
    /// Size of the source image at scale 1.
    pub source_size: (usize, usize),
}

impl ChannelMap {
    pub fn rows(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.channels.shape()[2]
    }

    /// Effective `(vertical, horizontal)` scale after integer rounding of the
    /// resampled image size.
    pub fn effective_scale(&self) -> (f64, f64) {
        (
            self.image_size.0 as f64 / self.source_size.0 as f64,
            self.image_size.1 as f64 / self.source_size.1 as f64,
        )
    }
}

/// Feature pyramid ordered from the finest level down.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<ChannelMap>,
    pub scales_per_octave: usize,
    pub min_level_size: usize,
}

/// Pyramid construction knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidConfig {
    pub scales_per_octave: usize,
    /// Smallest channel-map side (in cells) still kept.
    pub min_size: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            scales_per_octave: 2,
            min_size: 20,
        }
    }
}

impl PyramidConfig {
    pub const DENSE: PyramidConfig = PyramidConfig {
        scales_per_octave: 8,
        min_size: 20,
    };
}

// D65 reference white in u'v'.
const UN: f64 = 0.197_839;
const VN: f64 = 0.468_336;

/// Linear RGB in [0,1] to LUV, each rescaled to [0,1].
pub fn rgb_to_luv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let l = if y > 0.008_856 { 116.0 * y.cbrt() - 16.0 } else { 903.3 * y };
    let d = x + 15.0 * y + 3.0 * z;
    let (up, vp) = if d > 1e-12 { (4.0 * x / d, 9.0 * y / d) } else { (UN, VN) };
    let u = 13.0 * l * (up - UN);
    let v = 13.0 * l * (vp - VN);
    (
        (l / 100.0).clamp(0.0, 1.0),
        ((u + 134.0) / 354.0).clamp(0.0, 1.0),
        ((v + 140.0) / 262.0).clamp(0.0, 1.0),
    )
}

/// Separable `[1 2 1] / 4` filter (triangle of radius 1), edges replicated.
fn smooth_triangle(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        let row = &plane[i * w..(i + 1) * w];
        for j in 0..w {
            let l = row[j.saturating_sub(1)];
            let r = row[(j + 1).min(w - 1)];
            tmp[i * w + j] = 0.25 * l + 0.5 * row[j] + 0.25 * r;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let up = i.saturating_sub(1) * w;
        let dn = (i + 1).min(h - 1) * w;
        for j in 0..w {
            out[i * w + j] = 0.25 * tmp[up + j] + 0.5 * tmp[i * w + j] + 0.25 * tmp[dn + j];
        }
    }
    out
}

/// Computes the 10 channel maps of an RGB image `[3, H, W]` in [0, 1].
pub fn compute_channels(image: &Tensor) -> Result<ChannelMap> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return invalid(format!("expected a 3-channel RGB image, got {c} channels"));
    }
    if h < SHRINK || w < SHRINK {
        return invalid(format!("image {h}x{w} is smaller than one {SHRINK}x{SHRINK} cell"));
    }
    let plane = h * w;
    let data = image.data();
    let rs = smooth_triangle(&data[..plane], h, w);
    let gs = smooth_triangle(&data[plane..2 * plane], h, w);
    let bs = smooth_triangle(&data[2 * plane..], h, w);

    let (ch_rows, ch_cols) = (h / SHRINK, w / SHRINK);
    let cells = ch_rows * ch_cols;
    let mut out = vec![0.0; NUM_CHANNELS * cells];
    let gray: Vec<f64> = (0..plane)
        .map(|p| 0.212_672_9 * rs[p] + 0.715_152_2 * gs[p] + 0.072_175_0 * bs[p])
        .collect();
    let bin_width = PI / NUM_ORIENTATIONS as f64;

    for i in 0..ch_rows * SHRINK {
        let ci = i / SHRINK;
        let up = i.saturating_sub(1);
        let dn = (i + 1).min(h - 1);
        for j in 0..ch_cols * SHRINK {
            let cell = ci * ch_cols + j / SHRINK;
            let p = i * w + j;
            let (l, u, v) = rgb_to_luv(rs[p], gs[p], bs[p]);
            out[cell] += l;
            out[cells + cell] += u;
            out[2 * cells + cell] += v;

            let lf = gray[i * w + j.saturating_sub(1)];
            let rt = gray[i * w + (j + 1).min(w - 1)];
            let gx = 0.5 * (rt - lf);
            let gy = 0.5 * (gray[dn * w + j] - gray[up * w + j]);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            out[3 * cells + cell] += mag;
            let mut theta = gy.atan2(gx).rem_euclid(PI);
            if theta >= PI {
                theta = 0.0;
            }
            let t = theta / bin_width;
            let b0 = t.floor();
            let frac = t - b0;
            let b0 = (b0 as usize) % NUM_ORIENTATIONS;
            let b1 = (b0 + 1) % NUM_ORIENTATIONS;
            out[(4 + b0) * cells + cell] += mag * (1.0 - frac);
            out[(4 + b1) * cells + cell] += mag * frac;
        }
    }
    Ok(ChannelMap {
        channels: Tensor::from_vec(&[NUM_CHANNELS, ch_rows, ch_cols], out)?,
        scale: 1.0,
        shrink: SHRINK,
        image_size: (h, w),
        source_size: (h, w),
    })
}

/// Horizontal mirror of a channel tensor. Orientation bins are remapped
/// (`theta -> pi - theta`) so the result matches channels of the mirrored
/// image.
pub fn mirror_channels(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    for ch in 0..c {
        let src = if c == NUM_CHANNELS && ch >= 4 {
            4 + (NUM_ORIENTATIONS - (ch - 4)) % NUM_ORIENTATIONS
        } else {
            ch
        };
        for i in 0..h {
            for j in 0..w {
                out.set3(ch, i, j, t.at3(src, i, w - 1 - j));
            }
        }
    }
    out
}

/// Reads channel `c` of `image` at fractional pixel position `(y, x)` using
/// pixel-centre coordinates, replicating edge pixels.
#[inline]
pub fn sample_bilinear(image: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let yc = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let xc = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (yc - y0 as f64, xc - x0 as f64);
    let d = image.data();
    let base = c * h * w;
    let a = d[base + y0 * w + x0];
    let b = d[base + y0 * w + x1];
    let cc = d[base + y1 * w + x0];
    let dd = d[base + y1 * w + x1];
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (cc * (1.0 - fx) + dd * fx) * fy
}

/// Bilinear resize to `(rows, cols)`.
pub fn resize_bilinear(image: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if rows == 0 || cols == 0 {
        return invalid("resize target must be non-empty");
    }
    if (rows, cols) == (h, w) {
        return Ok(image.clone());
    }
    let (sy, sx) = (h as f64 / rows as f64, w as f64 / cols as f64);
    let mut out = Vec::with_capacity(c * rows * cols);
    for ch in 0..c {
        for i in 0..rows {
            let y = (i as f64 + 0.5) * sy;
            for j in 0..cols {
                out.push(sample_bilinear(image, ch, y, (j as f64 + 0.5) * sx));
            }
        }
    }
    Tensor::from_vec(&[c, rows, cols], out)
}

/// 2x2 box downsampling (floor of odd sizes).
fn halve(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let (rows, cols) = (h / 2, w / 2);
    let d = image.data();
    let mut out = Vec::with_capacity(c * rows * cols);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..rows {
            for j in 0..cols {
                let p = base + 2 * i * w + 2 * j;
                out.push(0.25 * (d[p] + d[p + 1] + d[p + w] + d[p + w + 1]));
            }
        }
    }
    Tensor::from_vec(&[c, rows.max(1), cols.max(1)], out)
}

/// Nominal scale of level `k`: `2^(-k / scales_per_octave)`.
pub fn level_scale(k: usize, scales_per_octave: usize) -> f64 {
    (-(k as f64) / scales_per_octave as f64).exp2()
}

/// Resampled image size for a nominal scale.
pub fn level_image_size(rows: usize, cols: usize, scale: f64) -> (usize, usize) {
    (
        ((rows as f64 * scale).round() as usize).max(1),
        ((cols as f64 * scale).round() as usize).max(1),
    )
}

/// Number of levels whose channel map is at least `min_size` cells.
pub fn level_count(rows: usize, cols: usize, cfg: PyramidConfig) -> usize {
    let mut k = 0;
    loop {
        let (r, c) = level_image_size(rows, cols, level_scale(k, cfg.scales_per_octave));
        if r / SHRINK < cfg.min_size || c / SHRINK < cfg.min_size {
            return k;
        }
        k += 1;
    }
}

/// Builds the channel pyramid. Level `k` is the image resampled to scale
/// `2^(-k/spo)` (box-halved to the enclosing octave first, then bilinear),
/// with channels recomputed on it.
pub fn build_pyramid(image: &Tensor, cfg: PyramidConfig) -> Result<Pyramid> {
    if !(1..=8).contains(&cfg.scales_per_octave) {
        return invalid(format!(
            "scales_per_octave must be in 1..=8, got {}",
            cfg.scales_per_octave
        ));
    }
    let (_, h, w) = image.dims3()?;
    let n = level_count(h, w, cfg);
    let octaves = n.div_ceil(cfg.scales_per_octave);
    let mut bases = vec![image.clone()];
    for o in 1..octaves {
        let next = halve(&bases[o - 1])?;
        bases.push(next);
    }
    let levels = (0..n)
        .into_par_iter()
        .map(|k| {
            let scale = level_scale(k, cfg.scales_per_octave);
            let (rows, cols) = level_image_size(h, w, scale);
            let base = &bases[(k / cfg.scales_per_octave).min(bases.len() - 1)];
            let resized = resize_bilinear(base, rows, cols)?;
            let mut map = compute_channels(&resized)?;
            map.scale = scale;
            map.source_size = (h, w);
            Ok(map)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pyramid {
        levels,
        scales_per_octave: cfg.scales_per_octave,
        min_level_size: cfg.min_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize, rgb: [f64; 3]) -> Tensor {
        let mut d = Vec::new();
        for v in rgb {
            d.extend(std::iter::repeat_n(v, h * w));
        }
        Tensor::from_vec(&[3, h, w], d).unwrap()
    }

    fn vertical_step(h: usize, w: usize, col: usize, brightness: f64) -> Tensor {
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for i in 0..h {
                for j in col..w {
                    t.set3(c, i, j, brightness);
                }
            }
        }
        t
    }

    #[test]
    fn constant_image_has_no_gradient() {
        let m = compute_channels(&constant(32, 32, [0.3, 0.6, 0.2])).unwrap();
        let cells = m.rows() * m.cols();
        assert!(m.channels.data()[3 * cells..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shrink_arithmetic() {
        let m = compute_channels(&constant(64, 64, [0.5; 3])).unwrap();
        assert_eq!(m.channels.shape(), [10, 16, 16]);
        let m = compute_channels(&constant(30, 21, [0.5; 3])).unwrap();
        assert_eq!(m.channels.shape(), [10, 7, 5]);
        assert!(compute_channels(&constant(3, 40, [0.5; 3])).is_err());
    }

    #[test]
    fn vertical_edge_energy_in_horizontal_gradient_bin() {
        let m = compute_channels(&vertical_step(32, 32, 16, 0.8)).unwrap();
        let (rows, cols) = (m.rows(), m.cols());
        let cells = rows * cols;
        let d = m.channels.data();
        let bin0: f64 = d[4 * cells..5 * cells].iter().sum();
        let others: f64 = d[5 * cells..].iter().sum();
        assert!(bin0 > 0.0);
        assert!(others < 1e-9 * bin0);
        for i in 0..rows {
            for j in 0..cols {
                let mag = d[3 * cells + i * cols + j];
                if j == 3 || j == 4 {
                    assert!(mag > 0.0);
                } else {
                    assert_eq!(mag, 0.0, "cell ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn brightness_doubling_keeps_orientation_ratios() {
        let mut img = vertical_step(32, 32, 13, 0.3);
        for i in 0..32 {
            for j in 0..32 {
                let v = 0.2 + 0.1 * ((i * j) % 7) as f64 / 7.0;
                img.set3(1, i, j, v);
            }
        }
        let a = compute_channels(&img).unwrap();
        let b = compute_channels(&img.scale(2.0)).unwrap();
        let cells = a.rows() * a.cols();
        for k in 3 * cells..10 * cells {
            let (x, y) = (a.channels.data()[k], b.channels.data()[k]);
            assert!((2.0 * x - y).abs() < 1e-6 * (1.0 + y.abs()));
        }
        for cell in 0..cells {
            let sa: f64 = (4..10).map(|c| a.channels.data()[c * cells + cell]).sum();
            let sb: f64 = (4..10).map(|c| b.channels.data()[c * cells + cell]).sum();
            if sa > 1e-9 {
                for c in 4..10 {
                    let ra = a.channels.data()[c * cells + cell] / sa;
                    let rb = b.channels.data()[c * cells + cell] / sb;
                    assert!((ra - rb).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn magnitude_and_orientation_nonnegative() {
        let mut img = constant(40, 36, [0.0; 3]);
        for (k, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((k * 2_654_435_761) % 1000) as f64 / 1000.0;
        }
        let m = compute_channels(&img).unwrap();
        let cells = m.rows() * m.cols();
        assert!(m.channels.data()[3 * cells..].iter().all(|&v| v >= 0.0));
        assert!(m.channels.data()[..3 * cells].iter().all(|&v| (0.0..=16.0).contains(&v)));
    }

    #[test]
    fn pyramid_level_counts() {
        let dense = PyramidConfig::DENSE;
        let skip = PyramidConfig::default();
        // 640 px -> 160 cells; exactly three octaves fit above 20 cells.
        assert_eq!(level_count(640, 640, dense), 25);
        assert_eq!(level_count(640, 640, skip), 7);
        assert_eq!((level_count(640, 640, dense) - 1) / (level_count(640, 640, skip) - 1), 4);
    }

    #[test]
    fn half_scale_level_dims() {
        let img = constant(240, 320, [0.4; 3]);
        let p = build_pyramid(&img, PyramidConfig { scales_per_octave: 2, min_size: 20 }).unwrap();
        let half = p.levels.iter().find(|l| (l.scale - 0.5).abs() < 1e-12).unwrap();
        assert_eq!((half.rows(), half.cols()), (30, 40));
    }

    #[test]
    fn pyramid_scales_are_geometric() {
        let img = constant(200, 260, [0.4; 3]);
        for spo in [1, 2, 3, 8] {
            let p = build_pyramid(&img, PyramidConfig { scales_per_octave: spo, min_size: 10 }).unwrap();
            assert!(p.levels.len() >= 2);
            for pair in p.levels.windows(2) {
                let ratio = pair[1].scale / pair[0].scale;
                assert!((ratio - (-1.0 / spo as f64).exp2()).abs() < 1e-12);
                assert!(pair[1].scale < pair[0].scale);
            }
            assert!(p.levels.iter().all(|l| l.rows() >= 10 && l.cols() >= 10));
        }
        assert!(build_pyramid(&img, PyramidConfig { scales_per_octave: 9, min_size: 10 }).is_err());
    }

    #[test]
    fn luv_white_and_black() {
        let (l, u, v) = rgb_to_luv(1.0, 1.0, 1.0);
        assert!((l - 1.0).abs() < 1e-3);
        assert!((u - 134.0 / 354.0).abs() < 1e-3);
        assert!((v - 140.0 / 262.0).abs() < 1e-3);
        let (l, u, v) = rgb_to_luv(0.0, 0.0, 0.0);
        assert_eq!(l, 0.0);
        assert!((u - 134.0 / 354.0).abs() < 1e-12 && (v - 140.0 / 262.0).abs() < 1e-12);
    }
}
