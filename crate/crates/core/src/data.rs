//! Datasets: FDDB-style manifests, binary PPM/PGM images, window cropping,
//! and a procedural toy-face corpus for desk-scale experiments.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::detector::network::{Label, Sample, CONTEXT_CELLS};
use crate::detector::{BBox, FACE_PX, WINDOW_PX};
use crate::error::{invalid, Error, Result};
use crate::features::{compute_channels, sample_bilinear, SHRINK};
use crate::regressor::{overlap_voc, Ellipse, Frame, Shape};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Annotation flavour of a manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationKind {
    Ellipse,
    Box,
}

impl std::str::FromStr for AnnotationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(AnnotationKind::Ellipse),
            "box" => Ok(AnnotationKind::Box),
            _ => invalid(format!("unknown annotation kind `{s}` (expected ellipse|box)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Annotation {
    Ellipse(Ellipse),
    Box(BBox),
}

impl Annotation {
    pub fn shape(&self) -> Shape {
        match self {
            Annotation::Ellipse(e) => Shape::Ellipse(*e),
            Annotation::Box(b) => Shape::Box(*b),
        }
    }

    /// Square object box used for cropping: side `2 * major` for ellipses.
    pub fn object_box(&self) -> BBox {
        match self {
            Annotation::Ellipse(e) => face_box(e),
            Annotation::Box(b) => *b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub kind: AnnotationKind,
    pub entries: Vec<ManifestEntry>,
}

/// Square box of side `2 * major` centred on the ellipse.
pub fn face_box(e: &Ellipse) -> BBox {
    BBox {
        x: e.cx - e.major,
        y: e.cy - e.major,
        w: 2.0 * e.major,
        h: 2.0 * e.major,
    }
}

/// Parses a manifest: per image a path line, a count line, then one
/// annotation per line (`major minor angle cx cy 1` or `x y w h`).
pub fn parse_manifest(text: &str, kind: AnnotationKind, source: &str) -> Result<DatasetManifest> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let mut entries = Vec::new();
    let mut k = 0;
    while k < lines.len() {
        let (_, path) = lines[k];
        let (cline, count) = *lines
            .get(k + 1)
            .ok_or_else(|| perr(lines[k].0 + 1, format!("missing annotation count after `{path}`")))?;
        let count: usize = count
            .parse()
            .map_err(|_| perr(cline, format!("expected an annotation count, found `{count}`")))?;
        k += 2;
        let mut annotations = Vec::with_capacity(count);
        for _ in 0..count {
            let Some(&(ln, l)) = lines.get(k) else {
                return Err(perr(cline, format!("count says {count} annotations but the file ends")));
            };
            let nums = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| perr(ln, format!("non-numeric annotation `{l}`")))?;
            let a = match (kind, nums.len()) {
                (AnnotationKind::Ellipse, 6) | (AnnotationKind::Ellipse, 5) => {
                    Annotation::Ellipse(
                        Ellipse::new(nums[0], nums[1], nums[2], nums[3], nums[4]).map_err(|e| perr(ln, e.to_string()))?,
                    )
                }
                (AnnotationKind::Box, 4) => {
                    Annotation::Box(BBox::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| perr(ln, e.to_string()))?)
                }
                _ => {
                    return Err(perr(
                        ln,
                        format!("expected {} fields, found {}", if kind == AnnotationKind::Box { 4 } else { 6 }, nums.len()),
                    ))
                }
            };
            annotations.push(a);
            k += 1;
        }
        entries.push(ManifestEntry {
            path: path.to_string(),
            annotations,
        });
    }
    Ok(DatasetManifest { kind, entries })
}

pub fn load_manifest(path: &Path, kind: AnnotationKind) -> Result<DatasetManifest> {
    let text = crate::error::read_text(path)?;
    parse_manifest(&text, kind, &path.display().to_string())
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\n{}", e.path, e.annotations.len());
            for a in &e.annotations {
                match a {
                    Annotation::Ellipse(el) => {
                        let _ = writeln!(out, "{:?} {:?} {:?} {:?} {:?} 1", el.major, el.minor, el.angle, el.cx, el.cy);
                    }
                    Annotation::Box(b) => {
                        let _ = writeln!(out, "{:?} {:?} {:?} {:?}", b.x, b.y, b.w, b.h);
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn pnm_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, usize)> {
    // Returns (magic, width, height, maxval, offset of pixel data).
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PNM geometry {w}x{h} max {maxval}")));
    }
    Ok((fields[0].clone(), w, h, maxval, i + 1))
}

/// Decodes binary PPM (P6) or PGM (P5, replicated to three channels) into
/// `[3, H, W]` scaled to [0, 1].
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let (magic, w, h, maxval, off) = pnm_header(bytes)?;
    let planes = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Format(format!("unsupported magic `{m}` (need P5 or P6)"))),
    };
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w * h * planes * bps;
    let data = bytes.get(off..off + need).ok_or_else(|| Error::Format("truncated PNM pixel data".into()))?;
    let mut out = vec![0.0; 3 * w * h];
    let maxval = maxval as f64;
    for p in 0..w * h {
        for c in 0..3 {
            let s = p * planes + if planes == 3 { c } else { 0 };
            let v = if bps == 2 {
                u16::from_be_bytes([data[2 * s], data[2 * s + 1]]) as f64
            } else {
                data[s] as f64
            };
            out[c * w * h + p] = v / maxval;
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = crate::error::read_bytes(path)?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encodes `[3, H, W]` as 8-bit P6, clamping to [0, 1].
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return invalid(format!("PPM needs 3 channels, got {c}"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..w * h {
        for ch in 0..3 {
            out.push((d[ch * w * h + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Resamples an axis-aligned region to an `out x out` patch (bilinear,
/// edge replication outside the image).
pub fn crop_region(image: &Tensor, region: &BBox, out: usize) -> Result<Tensor> {
    if !(region.w > 0.0 && region.h > 0.0) || out == 0 {
        return invalid("degenerate crop region");
    }
    let (c, _, _) = image.dims3()?;
    let (sx, sy) = (region.w / out as f64, region.h / out as f64);
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        for i in 0..out {
            let y = region.y + (i as f64 + 0.5) * sy;
            for j in 0..out {
                data.push(sample_bilinear(image, ch, y, region.x + (j as f64 + 0.5) * sx));
            }
        }
    }
    Tensor::from_vec(&[c, out, out], data)
}

/// Crop jitter: relative scale range and translation range in window pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jitter {
    pub scale: f64,
    pub shift: f64,
}

impl Jitter {
    /// `+-10%` scale, `+-4` px translation.
    pub const REGRESSOR: Jitter = Jitter { scale: 0.1, shift: 4.0 };
}

/// A resampled window and the map from its pixels to the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub image: Tensor,
    /// Source position of crop pixel coordinate `p` is `origin + scale * p`.
    pub frame: Frame,
}

/// Crops the window around `object` so the object spans 60/80 of an
/// `window_px` window, plus `context_px` of surround on each side.
pub fn crop_window(
    image: &Tensor,
    object: &BBox,
    window_px: usize,
    context_px: usize,
    jitter: Jitter,
    seed: u64,
) -> Result<Crop> {
    if !(object.w > 0.0 && object.h > 0.0) || window_px == 0 {
        return invalid(format!("degenerate object box {object:?}"));
    }
    let mut side = 0.5 * (object.w + object.h) * WINDOW_PX / FACE_PX;
    let (mut cx, mut cy) = object.center();
    if jitter.scale > 0.0 || jitter.shift > 0.0 {
        let mut r = rng::rng(seed, 0xC809);
        let s = 1.0 + jitter.scale * (2.0 * r.random::<f64>() - 1.0);
        let px = side / window_px as f64;
        cx += jitter.shift * (2.0 * r.random::<f64>() - 1.0) * px;
        cy += jitter.shift * (2.0 * r.random::<f64>() - 1.0) * px;
        side *= s;
    }
    let scale = side / window_px as f64;
    let out = window_px + 2 * context_px;
    let total = scale * out as f64;
    let region = BBox {
        x: cx - 0.5 * total,
        y: cy - 0.5 * total,
        w: total,
        h: total,
    };
    Ok(Crop {
        image: crop_region(image, &region, out)?,
        frame: Frame {
            x0: region.x,
            y0: region.y,
            scale,
        },
    })
}

/// Network input `[10, 24, 24]` for the window around `object`.
pub fn window_channels(image: &Tensor, object: &BBox, jitter: Jitter, seed: u64) -> Result<Tensor> {
    let crop = crop_window(image, object, WINDOW_PX as usize, CONTEXT_CELLS * SHRINK, jitter, seed)?;
    Ok(compute_channels(&crop.image)?.channels)
}

/// Procedural corpus settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Images containing one face each.
    pub num_pos: usize,
    /// Face-free images.
    pub num_neg: usize,
    /// Side of every generated image.
    pub image_size: usize,
    pub pose_count: usize,
    /// Face semi-major axis range, px.
    pub face_major: (f64, f64),
    /// Max in-plane rotation, radians.
    pub max_rotation: f64,
    /// Share of each class held out for testing.
    pub test_fraction: f64,
    /// Clutter shapes per image.
    pub clutter: usize,
    /// Probability that a face gets a solid occluder painted over it.
    pub occluder_rate: f64,
    /// Share of the face box the occluder band covers.
    pub occluder_size: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_pos: 500,
            num_neg: 100,
            image_size: 128,
            pose_count: 2,
            face_major: (30.0, 42.0),
            max_rotation: 0.25,
            test_fraction: 0.2,
            clutter: 6,
            occluder_rate: 0.0,
            occluder_size: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pose_count == 0 {
            return invalid("pose_count must be positive");
        }
        let (lo, hi) = self.face_major;
        if !(lo > 0.0 && hi >= lo) {
            return invalid(format!("bad face size range {lo}..{hi}"));
        }
        if (2.0 * hi * WINDOW_PX / FACE_PX) > self.image_size as f64 {
            return invalid(format!(
                "faces up to {hi} px semi-axis need images of at least {} px",
                (2.0 * hi * WINDOW_PX / FACE_PX).ceil()
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return invalid("test_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.occluder_rate) || !(0.0..=1.0).contains(&self.occluder_size) {
            return invalid("occluder_rate and occluder_size must be in [0, 1]");
        }
        Ok(())
    }
}

/// One generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub path: String,
    pub image: Tensor,
    pub faces: Vec<Ellipse>,
    pub poses: Vec<usize>,
}

/// Generated corpus: manifests plus the images they name.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub train_images: Vec<SynthImage>,
    pub test_images: Vec<SynthImage>,
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, i: usize, j: usize, color: [f64; 3], alpha: f64) {
        let p = &mut self.px[i * self.size + j];
        for c in 0..3 {
            p[c] = (1.0 - alpha) * p[c] + alpha * color[c];
        }
    }

    /// Paints an anti-aliased ellipse. Returns the pixels it covers by more
    /// than half.
    fn ellipse(&mut self, e: &Ellipse, color: [f64; 3]) -> Vec<usize> {
        let b = e.bounds();
        let n = self.size as f64;
        let (i0, i1) = ((b.y - 1.0).max(0.0) as usize, (b.y + b.h + 1.0).min(n).max(0.0) as usize);
        let (j0, j1) = ((b.x - 1.0).max(0.0) as usize, (b.x + b.w + 1.0).min(n).max(0.0) as usize);
        let (s, c) = e.angle.sin_cos();
        let mut covered = Vec::new();
        for i in i0..i1 {
            for j in j0..j1 {
                let (dx, dy) = (j as f64 + 0.5 - e.cx, i as f64 + 0.5 - e.cy);
                let u = (c * dx + s * dy) / e.major;
                let v = (-s * dx + c * dy) / e.minor;
                let r = (u * u + v * v).sqrt();
                // Signed distance approximation in pixels along the radius.
                let d = (1.0 - r) * e.minor.min(e.major);
                let alpha = (d + 0.5).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.blend(i, j, color, alpha);
                }
                if alpha > 0.5 {
                    covered.push(i * self.size + j);
                }
            }
        }
        covered
    }

    /// Rotated filled rectangle centred at `(cx, cy)`.
    fn rect(&mut self, cx: f64, cy: f64, hw: f64, hh: f64, angle: f64, color: [f64; 3]) {
        let (s, c) = angle.sin_cos();
        let rad = (hw * hw + hh * hh).sqrt() + 1.0;
        let n = self.size as f64;
        let (i0, i1) = ((cy - rad).max(0.0) as usize, (cy + rad).min(n).max(0.0) as usize);
        let (j0, j1) = ((cx - rad).max(0.0) as usize, (cx + rad).min(n).max(0.0) as usize);
        for i in i0..i1 {
            for j in j0..j1 {
                let (dx, dy) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let a = ((hw - u.abs() + 0.5).clamp(0.0, 1.0)) * ((hh - v.abs() + 0.5).clamp(0.0, 1.0));
                if a > 0.0 {
                    self.blend(i, j, color, a);
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let n = self.size * self.size;
        let mut data = vec![0.0; 3 * n];
        for (p, v) in self.px.iter().enumerate() {
            for c in 0..3 {
                data[c * n + p] = v[c].clamp(0.0, 1.0);
            }
        }
        Tensor::from_vec(&[3, self.size, self.size], data).expect("canvas shape")
    }
}

fn random_color(r: &mut Rng) -> [f64; 3] {
    [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]
}

/// Smooth random colour field plus fine noise.
fn background(size: usize, r: &mut Rng) -> Canvas {
    let base = random_color(r);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let f = 0.02 + 0.15 * r.random::<f64>();
            let th = PI * r.random::<f64>();
            let ph = 2.0 * PI * r.random::<f64>();
            let amp = [0.15 * r.random::<f64>(), 0.15 * r.random::<f64>(), 0.15 * r.random::<f64>()];
            (f * th.cos(), f * th.sin(), ph, amp)
        })
        .collect();
    let noise = 0.02 + 0.06 * r.random::<f64>();
    let mut px = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let mut v = base;
            for (fx, fy, ph, amp) in &waves {
                let s = (fx * j as f64 + fy * i as f64 + ph).sin();
                for c in 0..3 {
                    v[c] += amp[c] * s;
                }
            }
            let n = noise * (2.0 * r.random::<f64>() - 1.0);
            px.push([v[0] + n, v[1] + n, v[2] + n]);
        }
    }
    Canvas { size, px }
}

/// Random blobs, bars and distractor ellipses, kept clear of `avoid`.
fn clutter(canvas: &mut Canvas, count: usize, avoid: Option<&Ellipse>, r: &mut Rng) {
    let n = canvas.size as f64;
    let mut placed = 0;
    let mut tries = 0;
    while placed < count && tries < 20 * count.max(1) {
        tries += 1;
        let (cx, cy) = (n * r.random::<f64>(), n * r.random::<f64>());
        let size = 3.0 + 14.0 * r.random::<f64>();
        if let Some(e) = avoid {
            let d = ((cx - e.cx).powi(2) + (cy - e.cy).powi(2)).sqrt();
            if d < e.major + size + 2.0 {
                continue;
            }
        }
        let color = random_color(r);
        match r.random_range(0..3) {
            0 => {
                let e = Ellipse {
                    major: size,
                    minor: size * (0.3 + 0.7 * r.random::<f64>()),
                    angle: PI * r.random::<f64>(),
                    cx,
                    cy,
                };
                canvas.ellipse(&e, color);
            }
            1 => canvas.rect(cx, cy, size, 0.15 * size + 1.0, PI * r.random::<f64>(), color),
            _ => {
                let e = Ellipse {
                    major: 0.3 * size + 1.5,
                    minor: 0.3 * size + 1.5,
                    angle: 0.0,
                    cx,
                    cy,
                };
                canvas.ellipse(&e, [0.1 * color[0], 0.1 * color[1], 0.1 * color[2]]);
            }
        }
        placed += 1;
    }
}

/// Solid band over one side of `face` covering `size` of its extent.
fn occluder(canvas: &mut Canvas, face: &BBox, size: f64, r: &mut Rng) {
    let color = random_color(r);
    let (cx, cy) = face.center();
    let (hw, hh) = (0.5 * face.w, 0.5 * face.h);
    let (bw, bh) = (size * hw, size * hh);
    match r.random_range(0..4) {
        0 => canvas.rect(cx, face.y + bh, hw, bh, 0.0, color),
        1 => canvas.rect(cx, face.y + face.h - bh, hw, bh, 0.0, color),
        2 => canvas.rect(face.x + bw, cy, bw, hh, 0.0, color),
        _ => canvas.rect(face.x + face.w - bw, cy, bw, hh, 0.0, color),
    }
}

fn skin_tone(r: &mut Rng) -> [f64; 3] {
    let t = 0.55 + 0.35 * r.random::<f64>();
    [t, 0.78 * t, 0.62 * t]
}

/// Draws a toy face into `canvas`: skin ellipse, two dark eye blobs and a
/// mouth bar, all shifted sideways for non-frontal poses. Returns the
/// skin-support pixels.
fn draw_face(canvas: &mut Canvas, e: &Ellipse, pose: usize, pose_count: usize, r: &mut Rng) -> Vec<usize> {
    let support = canvas.ellipse(e, skin_tone(r));
    // Face frame: y_f down the major axis, x_f across it.
    let (s, c) = e.angle.sin_cos();
    let down = (c, s);
    let across = (-s, c);
    let at = |xf: f64, yf: f64| {
        (
            e.cx + xf * e.minor * -across.0 + yf * e.major * down.0,
            e.cy + xf * e.minor * -across.1 + yf * e.major * down.1,
        )
    };
    let turn = if pose_count > 1 {
        0.28 * pose as f64 / (pose_count - 1) as f64
    } else {
        0.0
    };
    let dark = 0.05 + 0.15 * r.random::<f64>();
    let eye_r = e.minor * (0.16 + 0.04 * r.random::<f64>());
    for side in [-1.0, 1.0] {
        let shrink = if side > 0.0 { 1.0 - 1.5 * turn } else { 1.0 };
        let (x, y) = at(side * 0.4 * shrink + turn, -0.25);
        let blob = Ellipse {
            major: eye_r,
            minor: eye_r * (0.7 + 0.2 * shrink),
            angle: e.angle + PI / 2.0,
            cx: x,
            cy: y,
        };
        canvas.ellipse(&blob, [dark, dark, dark]);
    }
    let (mx, my) = at(turn, 0.45);
    let mouth = [0.35 + 0.2 * r.random::<f64>(), 0.08, 0.1];
    canvas.rect(mx, my, e.minor * 0.38 * (1.0 - turn), e.major * 0.07 + 0.7, e.angle - PI / 2.0, mouth);
    support
}

/// Ellipse with the same second moments as a pixel set.
pub fn fit_ellipse_moments(pixels: &[usize], width: usize) -> Option<Ellipse> {
    if pixels.len() < 3 {
        return None;
    }
    let n = pixels.len() as f64;
    let pts: Vec<(f64, f64)> = pixels
        .iter()
        .map(|&p| ((p % width) as f64 + 0.5, (p / width) as f64 + 0.5))
        .collect();
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in &pts {
        sxx += (x - mx).powi(2) / n;
        syy += (y - my).powi(2) / n;
        sxy += (x - mx) * (y - my) / n;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let (l1, l2) = (0.5 * tr + disc, 0.5 * tr - disc);
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    // A uniform ellipse has variance a^2 / 4 along each axis.
    Ellipse::new(2.0 * l1.sqrt(), 2.0 * l2.max(1e-12).sqrt(), angle, mx, my).ok()
}

fn synth_positive(cfg: &SynthConfig, index: usize, r: &mut Rng) -> (SynthImage, Vec<usize>) {
    let n = cfg.image_size as f64;
    let mut canvas = background(cfg.image_size, r);
    let (lo, hi) = cfg.face_major;
    let major = lo + (hi - lo) * r.random::<f64>();
    let minor = major * (0.72 + 0.1 * r.random::<f64>());
    let angle = PI / 2.0 + cfg.max_rotation * (2.0 * r.random::<f64>() - 1.0);
    // Keep the full crop window inside the image.
    let margin = major * WINDOW_PX / FACE_PX;
    let cx = margin + (n - 2.0 * margin) * r.random::<f64>();
    let cy = margin + (n - 2.0 * margin) * r.random::<f64>();
    let e = Ellipse::new(major, minor, angle, cx, cy).expect("positive axes");
    clutter(&mut canvas, cfg.clutter, Some(&e), r);
    let pose = r.random_range(0..cfg.pose_count);
    let support = draw_face(&mut canvas, &e, pose, cfg.pose_count, r);
    // Separate stream so the occluder settings never move the face itself.
    let mut ro = rng::rng(cfg.seed, 0x7000_0000 + index as u64);
    if ro.random::<f64>() < cfg.occluder_rate {
        occluder(&mut canvas, &face_box(&e), cfg.occluder_size, &mut ro);
    }
    (
        SynthImage {
            path: format!("pos_{index:05}.ppm"),
            image: canvas.into_tensor(),
            faces: vec![e],
            poses: vec![pose],
        },
        support,
    )
}

fn synth_negative(cfg: &SynthConfig, index: usize, r: &mut Rng) -> SynthImage {
    let mut canvas = background(cfg.image_size, r);
    clutter(&mut canvas, 2 * cfg.clutter, None, r);
    // Occasional featureless skin distractor.
    if r.random::<f64>() < 0.5 {
        let n = cfg.image_size as f64;
        let major = 10.0 + 25.0 * r.random::<f64>();
        let e = Ellipse {
            major,
            minor: major * (0.5 + 0.4 * r.random::<f64>()),
            angle: PI * r.random::<f64>(),
            cx: n * r.random::<f64>(),
            cy: n * r.random::<f64>(),
        };
        canvas.ellipse(&e, skin_tone(r));
    }
    SynthImage {
        path: format!("neg_{index:05}.ppm"),
        image: canvas.into_tensor(),
        faces: Vec::new(),
        poses: Vec::new(),
    }
}

/// Overlap between each generated face's GT ellipse and the ellipse fitted
/// to its painted skin support.
pub fn synth_self_check(cfg: &SynthConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    (0..cfg.num_pos)
        .map(|i| {
            let mut r = rng::rng(cfg.seed, 0x5000_0000 + i as u64);
            let (img, support) = synth_positive(cfg, i, &mut r);
            let fit = fit_ellipse_moments(&support, cfg.image_size)
                .ok_or_else(|| Error::InvalidState(format!("face {i} painted no pixels")))?;
            Ok(overlap_voc(&Shape::Ellipse(img.faces[0]), &Shape::Ellipse(fit)))
        })
        .collect()
}

/// Generates the toy corpus. Every image draws from its own seed stream, so
/// changing the counts never perturbs other images.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let pos: Vec<SynthImage> = (0..cfg.num_pos)
        .map(|i| synth_positive(cfg, i, &mut rng::rng(cfg.seed, 0x5000_0000 + i as u64)).0)
        .collect();
    let neg: Vec<SynthImage> = (0..cfg.num_neg)
        .map(|i| synth_negative(cfg, i, &mut rng::rng(cfg.seed, 0x6000_0000 + i as u64)))
        .collect();
    let n_test_pos = (cfg.num_pos as f64 * cfg.test_fraction).round() as usize;
    let n_test_neg = (cfg.num_neg as f64 * cfg.test_fraction).round() as usize;
    let mut train_images = Vec::new();
    let mut test_images = Vec::new();
    for (k, img) in pos.into_iter().enumerate() {
        let dst = if k < cfg.num_pos - n_test_pos { &mut train_images } else { &mut test_images };
        dst.push(img);
    }
    for (k, img) in neg.into_iter().enumerate() {
        let dst = if k < cfg.num_neg - n_test_neg { &mut train_images } else { &mut test_images };
        dst.push(img);
    }
    for im in &mut train_images {
        im.path = format!("train/{}", im.path);
    }
    for im in &mut test_images {
        im.path = format!("test/{}", im.path);
    }
    let manifest = |imgs: &[SynthImage]| DatasetManifest {
        kind: AnnotationKind::Ellipse,
        entries: imgs
            .iter()
            .map(|im| ManifestEntry {
                path: im.path.clone(),
                annotations: im.faces.iter().map(|e| Annotation::Ellipse(*e)).collect(),
            })
            .collect(),
    };
    Ok(SynthDataset {
        train: manifest(&train_images),
        test: manifest(&test_images),
        train_images,
        test_images,
    })
}

impl SynthDataset {
    /// Writes all images as P6 plus `train.txt` / `test.txt` manifests.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("train"))?;
        std::fs::create_dir_all(dir.join("test"))?;
        for im in self.train_images.iter().chain(&self.test_images) {
            save_image(&im.image, &dir.join(&im.path))?;
        }
        self.train.save(&dir.join("train.txt"))?;
        self.test.save(&dir.join("test.txt"))?;
        for (name, imgs) in [("train_poses.txt", &self.train_images), ("test_poses.txt", &self.test_images)] {
            let mut text = String::new();
            for im in imgs.iter().filter(|im| !im.poses.is_empty()) {
                let poses: Vec<String> = im.poses.iter().map(|p| p.to_string()).collect();
                let _ = writeln!(text, "{} {}", im.path, poses.join(" "));
            }
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

/// Loads one split (`train` or `test`) written by [`SynthDataset::save`], or
/// any directory holding `<split>.txt` with ellipse annotations. Pose ids
/// come from `<split>_poses.txt` when present and default to 0.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<SynthImage>> {
    use rayon::prelude::*;
    let manifest = load_manifest(&dir.join(format!("{split}.txt")), AnnotationKind::Ellipse)?;
    let mut poses = std::collections::HashMap::new();
    let pose_path = dir.join(format!("{split}_poses.txt"));
    if pose_path.exists() {
        let text = crate::error::read_text(&pose_path)?;
        for (i, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let Some(path) = it.next() else { continue };
            let ids = it
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse {
                    path: pose_path.display().to_string(),
                    line: i + 1,
                    msg: format!("bad pose ids in `{line}`"),
                })?;
            poses.insert(path.to_string(), ids);
        }
    }
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let image = load_image(&dir.join(&e.path))?;
            let faces: Vec<Ellipse> = e
                .annotations
                .iter()
                .map(|a| match a {
                    Annotation::Ellipse(el) => *el,
                    Annotation::Box(b) => Ellipse::inscribed(b),
                })
                .collect();
            let p = poses.get(&e.path).cloned().unwrap_or_else(|| vec![0; faces.len()]);
            if p.len() != faces.len() {
                return invalid(format!("{}: {} pose ids for {} faces", e.path, p.len(), faces.len()));
            }
            Ok(SynthImage {
                path: e.path.clone(),
                image,
                faces,
                poses: p,
            })
        })
        .collect()
}

/// Positive training windows (one per face), labelled with their pose.
pub fn positive_windows(images: &[SynthImage]) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    let per = images
        .par_iter()
        .map(|im| {
            im.faces
                .iter()
                .zip(&im.poses)
                .map(|(e, &pose)| {
                    Ok(Sample {
                        input: window_channels(&im.image, &face_box(e), Jitter::default(), 0)?,
                        label: Label::Positive { pose },
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Random negative windows from face-free images, `per_image` each, at
/// object sizes between 60 px and the largest that fits.
pub fn negative_windows(images: &[SynthImage], per_image: usize, seed: u64) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    let per = images
        .par_iter()
        .enumerate()
        .filter(|(_, im)| im.faces.is_empty())
        .map(|(k, im)| {
            let mut r = rng::rng(seed, 0x7000_0000 + k as u64);
            let (_, h, w) = im.image.dims3()?;
            let max_side = (h.min(w) as f64) * FACE_PX / WINDOW_PX;
            (0..per_image)
                .map(|_| {
                    let side = FACE_PX + (max_side - FACE_PX).max(0.0) * r.random::<f64>();
                    let win = side * WINDOW_PX / FACE_PX;
                    let x = (w as f64 - win).max(0.0) * r.random::<f64>() + (win - side) / 2.0;
                    let y = (h as f64 - win).max(0.0) * r.random::<f64>() + (win - side) / 2.0;
                    let b = BBox { x, y, w: side, h: side };
                    Ok(Sample {
                        input: window_channels(&im.image, &b, Jitter::default(), 0)?,
                        label: Label::Negative,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        assert!(parse_manifest("", AnnotationKind::Ellipse, "m").unwrap().entries.is_empty());
        let m = parse_manifest("img/a.ppm\n1\n30.0 20.0 0.5 100.0 80.0 1\n", AnnotationKind::Ellipse, "m").unwrap();
        assert_eq!(
            m.entries[0].annotations,
            vec![Annotation::Ellipse(Ellipse::new(30.0, 20.0, 0.5, 100.0, 80.0).unwrap())]
        );
        let again = parse_manifest(&m.to_text(), AnnotationKind::Ellipse, "m").unwrap();
        assert_eq!(again, m);
        match parse_manifest("a\n2\n30 20 0.5 100 80 1\nb\n0\n", AnnotationKind::Ellipse, "m") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match parse_manifest("a\n1\n1 2 x 4\n", AnnotationKind::Box, "m") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let b = parse_manifest("a\n1\n1 2 3 4\n", AnnotationKind::Box, "m").unwrap();
        assert_eq!(b.entries[0].annotations, vec![Annotation::Box(BBox::new(1.0, 2.0, 3.0, 4.0).unwrap())]);
    }

    #[test]
    fn pnm_roundtrip() {
        let ones = decode_pnm(&[b"P6\n2 2\n255\n".as_slice(), &[255u8; 12]].concat()).unwrap();
        assert_eq!(ones, Tensor::filled(&[3, 2, 2], 1.0));
        let gray = decode_pnm(&[b"P5 # c\n2 1 255\n".as_slice(), &[0u8, 51]].concat()).unwrap();
        for c in 0..3 {
            assert_eq!(gray.at3(c, 0, 1), 0.2);
        }
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format(_))));
        let img = Tensor::from_vec(&[3, 1, 3], (0..9).map(|k| k as f64 / 9.0).collect()).unwrap();
        let back = decode_pnm(&encode_ppm(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn crop_identity_and_ratio() {
        let img = Tensor::from_vec(&[1, 100, 100], (0..10_000).map(|k| (k % 97) as f64).collect()).unwrap();
        let obj = BBox::new(20.0, 10.0, 60.0, 60.0).unwrap();
        let c = crop_window(&img, &obj, 80, 0, Jitter::default(), 0).unwrap();
        assert_eq!(c.frame.scale, 1.0);
        for i in 0..80 {
            for j in 0..80 {
                let (si, sj) = (i, j + 10);
                assert_eq!(c.image.at3(0, i, j), img.at3(0, si, sj));
            }
        }
        let big = BBox::new(0.0, 0.0, 120.0, 120.0).unwrap();
        assert_eq!(crop_window(&img, &big, 80, 0, Jitter::default(), 0).unwrap().frame.scale, 2.0);
        let zero = crop_window(&img, &obj, 80, 8, Jitter::default(), 5).unwrap();
        assert_eq!(zero, crop_window(&img, &obj, 80, 8, Jitter { scale: 0.0, shift: 0.0 }, 9).unwrap());
        assert!(crop_window(&img, &BBox { x: 0.0, y: 0.0, w: 0.0, h: 5.0 }, 80, 0, Jitter::default(), 0).is_err());
    }

    #[test]
    fn moments_recover_ellipse() {
        let e = Ellipse::new(20.0, 12.0, 0.4, 40.0, 41.0).unwrap();
        let px: Vec<usize> = (0..80 * 80)
            .filter(|p| e.contains((p % 80) as f64 + 0.5, (p / 80) as f64 + 0.5))
            .collect();
        let f = fit_ellipse_moments(&px, 80).unwrap();
        assert!((f.major - 20.0).abs() < 0.3 && (f.minor - 12.0).abs() < 0.3);
        assert!((f.angle - 0.4).abs() < 0.02);
    }

    #[test]
    fn synth_basics() {
        let cfg = SynthConfig {
            num_pos: 0,
            num_neg: 3,
            ..SynthConfig::default()
        };
        let d = synth_generate(&cfg).unwrap();
        assert!(d.train.entries.iter().chain(&d.test.entries).all(|e| e.annotations.is_empty()));
        let cfg = SynthConfig {
            num_pos: 5,
            num_neg: 5,
            ..SynthConfig::default()
        };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        for im in synth_generate(&cfg).unwrap().train_images {
            for e in &im.faces {
                let b = e.bounds();
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 128.0 && b.y + b.h <= 128.0);
            }
        }
    }
}
