//! Dense tensors and the layer math used by the detector network:
//! valid convolution, ReLU, local contrast normalization, inverted dropout
//! and a plain linear layer, each with its exact backward pass.

use rand::Rng as _;

use crate::error::{invalid, shape_err, Result};
use crate::rng;

/// Row-major dense array of `f64`, last dimension fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            ));
        }
        if shape.contains(&0) {
            return shape_err(format!("shape {shape:?} has a zero dimension"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(channels, rows, cols)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected rank-3 tensor, got shape {:?}", self.shape)),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial crop `[c, top..top+h, left..left+w]` of a rank-3 tensor.
    pub fn crop3(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
        let (c, rows, cols) = self.dims3()?;
        if top + h > rows || left + w > cols || h == 0 || w == 0 {
            return shape_err(format!(
                "crop {h}x{w} at ({top},{left}) outside {rows}x{cols}"
            ));
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in top..top + h {
                let start = (ch * rows + i) * cols + left;
                out.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Tensor {
            shape: vec![c, h, w],
            data: out,
        })
    }

    /// Inverse of [`Tensor::crop3`]: places `self` into a zero tensor of the
    /// given spatial size.
    pub fn uncrop3(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if top + h > rows || left + w > cols {
            return shape_err("uncrop target too small");
        }
        let mut out = Tensor::zeros(&[c, rows, cols]);
        for ch in 0..c {
            for i in 0..h {
                let src = (ch * h + i) * w;
                let dst = (ch * rows + top + i) * cols + left;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Pads a rank-3 tensor spatially by `m` cells on every side, replicating
    /// edge values.
    pub fn pad_replicate3(&self, m: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let (ph, pw) = (h + 2 * m, w + 2 * m);
        let mut out = Tensor::zeros(&[c, ph, pw]);
        for ch in 0..c {
            for i in 0..ph {
                let si = i.saturating_sub(m).min(h - 1);
                for j in 0..pw {
                    let sj = j.saturating_sub(m).min(w - 1);
                    out.data[(ch * ph + i) * pw + j] = self.data[(ch * h + si) * w + sj];
                }
            }
        }
        Ok(out)
    }
}

/// A bank of `out_channels` filters of size `kh x kw` over `in_channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let [o, _, kh, kw] = weights.shape()[..] else {
            return shape_err(format!("conv weights must be rank 4, got {:?}", weights.shape()));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return invalid(format!("kernel {kh}x{kw} must be odd-sized"));
        }
        if bias.shape() != [o] {
            return shape_err(format!("bias shape {:?}, expected [{o}]", bias.shape()));
        }
        if !weights.all_finite() || !bias.all_finite() {
            return invalid("conv parameters must be finite");
        }
        Ok(ConvLayer { weights, bias })
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> Self {
        ConvLayer {
            weights: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    fn check_input(&self, input: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
        let (c, h, w) = input.dims3()?;
        let (kh, kw) = self.kernel();
        if stride == 0 {
            return invalid("stride must be positive");
        }
        if c != self.in_channels() {
            return shape_err(format!(
                "input has {c} channels, layer expects {}",
                self.in_channels()
            ));
        }
        if h < kh || w < kw {
            return shape_err(format!("input {h}x{w} smaller than kernel {kh}x{kw}"));
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        Ok((c, h, w, ho, wo))
    }
}

/// Valid cross-correlation: `out[o,i,j] = bias[o] + sum w[o,c,a,b] * x[c, i*s+a, j*s+b]`.
pub fn conv2d(input: &Tensor, layer: &ConvLayer, stride: usize) -> Result<Tensor> {
    let (c_in, h, w, ho, wo) = layer.check_input(input, stride)?;
    let (kh, kw) = layer.kernel();
    let o_n = layer.out_channels();
    let x = input.data();
    let wt = layer.weights.data();
    let mut out = vec![0.0; o_n * ho * wo];
    for o in 0..o_n {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.fill(layer.bias.data()[o]);
        for c in 0..c_in {
            for a in 0..kh {
                for b in 0..kw {
                    let wv = wt[((o * c_in + c) * kh + a) * kw + b];
                    for i in 0..ho {
                        let row_in = (c * h + i * stride + a) * w + b;
                        let row_out = &mut plane[i * wo..(i + 1) * wo];
                        if stride == 1 {
                            let src = &x[row_in..row_in + wo];
                            for (dst, s) in row_out.iter_mut().zip(src) {
                                *dst += wv * s;
                            }
                        } else {
                            for (j, dst) in row_out.iter_mut().enumerate() {
                                *dst += wv * x[row_in + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[o_n, ho, wo], out)
}

/// Gradients of a scalar loss through [`conv2d`].
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
    stride: usize,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, layer, grad_out, stride, true)
}

/// Like [`conv2d_backward`] but skips the input gradient (first layer).
pub fn conv2d_backward_params(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
    stride: usize,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, layer, grad_out, stride, false)
}

fn conv2d_backward_impl(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
    stride: usize,
    want_input: bool,
) -> Result<ConvGrads> {
    let (c_in, h, w, ho, wo) = layer.check_input(input, stride)?;
    let (kh, kw) = layer.kernel();
    let o_n = layer.out_channels();
    if grad_out.shape() != [o_n, ho, wo] {
        return shape_err(format!(
            "grad_out shape {:?}, expected [{o_n}, {ho}, {wo}]",
            grad_out.shape()
        ));
    }
    let x = input.data();
    let g = grad_out.data();
    let wt = layer.weights.data();
    let mut gx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; o_n];
    for o in 0..o_n {
        let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
        gb[o] = gplane.iter().sum();
        for c in 0..c_in {
            for a in 0..kh {
                for b in 0..kw {
                    let widx = ((o * c_in + c) * kh + a) * kw + b;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for i in 0..ho {
                        let row_in = (c * h + i * stride + a) * w + b;
                        let grow = &gplane[i * wo..(i + 1) * wo];
                        if stride == 1 {
                            let src = &x[row_in..row_in + wo];
                            acc += grow.iter().zip(src).map(|(p, q)| p * q).sum::<f64>();
                            if want_input {
                                for (dst, gv) in gx[row_in..row_in + wo].iter_mut().zip(grow) {
                                    *dst += wv * gv;
                                }
                            }
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                acc += gv * x[row_in + j * stride];
                                if want_input {
                                    gx[row_in + j * stride] += wv * gv;
                                }
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    let input_grad = if want_input {
        Tensor::from_vec(input.shape(), gx)?
    } else {
        Tensor::zeros(input.shape())
    };
    Ok(ConvGrads {
        input: input_grad,
        weights: Tensor::from_vec(layer.weights.shape(), gw)?,
        bias: Tensor::from_vec(&[o_n], gb)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `grad_in = grad_out * 1[x > 0]`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return shape_err(format!("{:?} vs {:?}", x.shape(), grad_out.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Spatial half-width of the normalization window (5x5).
pub const LCN_RADIUS: usize = 2;
/// Lower bound on the divisor.
pub const LCN_FLOOR: f64 = 0.01;

/// Per-location window statistics pooled across channels.
struct LcnStats {
    mean: Vec<f64>,
    std: Vec<f64>,
    count: Vec<f64>,
}

/// Sums `values` (an `h x w` plane) over the window of radius `r` around
/// every location, truncated at the borders. Returns the sums and the number
/// of cells in each truncated window.
fn box_sum(values: &[f64], h: usize, w: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += values[i * w + j];
            integral[(i + 1) * (w + 1) + j + 1] = integral[i * (w + 1) + j + 1] + row;
        }
    }
    let mut sums = vec![0.0; h * w];
    let mut cells = vec![0.0; h * w];
    for i in 0..h {
        let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(h));
        for j in 0..w {
            let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(w));
            sums[i * w + j] = integral[i1 * (w + 1) + j1] - integral[i0 * (w + 1) + j1]
                - integral[i1 * (w + 1) + j0]
                + integral[i0 * (w + 1) + j0];
            cells[i * w + j] = ((i1 - i0) * (j1 - j0)) as f64;
        }
    }
    (sums, cells)
}

fn lcn_stats(x: &Tensor) -> Result<LcnStats> {
    let (c, h, w) = x.dims3()?;
    let plane = h * w;
    let mut s1 = vec![0.0; plane];
    let mut s2 = vec![0.0; plane];
    for ch in 0..c {
        for (p, &v) in x.data()[ch * plane..(ch + 1) * plane].iter().enumerate() {
            s1[p] += v;
            s2[p] += v * v;
        }
    }
    let (w1, cells) = box_sum(&s1, h, w, LCN_RADIUS);
    let (w2, _) = box_sum(&s2, h, w, LCN_RADIUS);
    let mut mean = vec![0.0; plane];
    let mut std = vec![0.0; plane];
    let mut count = vec![0.0; plane];
    for p in 0..plane {
        let n = cells[p] * c as f64;
        let m = w1[p] / n;
        mean[p] = m;
        std[p] = (w2[p] / n - m * m).max(0.0).sqrt();
        count[p] = n;
    }
    Ok(LcnStats { mean, std, count })
}

/// Local contrast normalization: at every location subtract the mean and
/// divide by `max(std, 0.01)`, both computed over the 5x5 spatial window
/// (truncated at the borders) pooled across all channels.
pub fn lcn(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let st = lcn_stats(x)?;
    let plane = h * w;
    let mut out = x.data().to_vec();
    for ch in 0..c {
        for p in 0..plane {
            let v = &mut out[ch * plane + p];
            *v = (*v - st.mean[p]) / st.std[p].max(LCN_FLOOR);
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Exact gradient of [`lcn`]. Where the divisor is clamped to the floor it
/// is treated as a constant.
pub fn lcn_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if grad_out.shape() != x.shape() {
        return shape_err(format!("{:?} vs {:?}", grad_out.shape(), x.shape()));
    }
    let st = lcn_stats(x)?;
    let plane = h * w;
    let xd = x.data();
    let g = grad_out.data();
    // Per window centre q: a[q] feeds every cell through the mean,
    // b[q] through the standard deviation.
    let mut a = vec![0.0; plane];
    let mut b = vec![0.0; plane];
    let mut bm = vec![0.0; plane];
    for q in 0..plane {
        let d = st.std[q].max(LCN_FLOOR);
        let mut gsum = 0.0;
        let mut gx = 0.0;
        for ch in 0..c {
            let gv = g[ch * plane + q];
            gsum += gv;
            gx += gv * (xd[ch * plane + q] - st.mean[q]);
        }
        a[q] = gsum / (d * st.count[q]);
        if st.std[q] > LCN_FLOOR {
            b[q] = gx / (d * d * st.std[q] * st.count[q]);
            bm[q] = b[q] * st.mean[q];
        }
    }
    let (sa, _) = box_sum(&a, h, w, LCN_RADIUS);
    let (sb, _) = box_sum(&b, h, w, LCN_RADIUS);
    let (sbm, _) = box_sum(&bm, h, w, LCN_RADIUS);
    let mut out = vec![0.0; xd.len()];
    for ch in 0..c {
        for p in 0..plane {
            let i = ch * plane + p;
            let d = st.std[p].max(LCN_FLOOR);
            out[i] = g[i] / d - sa[p] - xd[i] * sb[p] + sbm[p];
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Mask and settings of one dropout application.
#[derive(Clone, Debug)]
pub struct DropoutState {
    pub rate: f64,
    /// Entries are exactly `0` or `1 / (1 - rate)`; `None` at inference.
    pub mask: Option<Tensor>,
    pub training: bool,
}

/// Inverted dropout. At inference the input passes through untouched.
pub fn dropout(x: &Tensor, rate: f64, seed: u64, training: bool) -> Result<(Tensor, DropoutState)> {
    if !(0.0..1.0).contains(&rate) {
        return invalid(format!("dropout rate {rate} outside [0, 1)"));
    }
    if !training {
        return Ok((
            x.clone(),
            DropoutState {
                rate,
                mask: None,
                training,
            },
        ));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut r = rng::rng(seed, 0xD809);
    let mask_data: Vec<f64> = (0..x.len())
        .map(|_| if r.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(x.shape(), mask_data)?;
    let y = Tensor::from_vec(
        x.shape(),
        x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect(),
    )?;
    Ok((
        y,
        DropoutState {
            rate,
            mask: Some(mask),
            training,
        },
    ))
}

pub fn dropout_backward(state: &DropoutState, grad_out: &Tensor) -> Result<Tensor> {
    match &state.mask {
        None => Ok(grad_out.clone()),
        Some(mask) => {
            if mask.shape() != grad_out.shape() {
                return shape_err("dropout mask shape mismatch");
            }
            Tensor::from_vec(
                grad_out.shape(),
                grad_out.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect(),
            )
        }
    }
}

/// Fully connected layer `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weights: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let [o, n] = self.weights.shape()[..] else {
            return shape_err("linear weights must be rank 2");
        };
        if x.len() != n {
            return shape_err(format!("linear input {} vs {}", x.len(), n));
        }
        let w = self.weights.data();
        Ok((0..o)
            .map(|k| {
                self.bias.data()[k] + w[k * n..(k + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    /// Returns `(grad_x, grad_w, grad_b)`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<(Vec<f64>, Tensor, Tensor)> {
        let [o, n] = self.weights.shape()[..] else {
            return shape_err("linear weights must be rank 2");
        };
        if x.len() != n || grad_out.len() != o {
            return shape_err("linear backward size mismatch");
        }
        let w = self.weights.data();
        let mut gx = vec![0.0; n];
        let mut gw = vec![0.0; o * n];
        for k in 0..o {
            let gk = grad_out[k];
            for t in 0..n {
                gx[t] += w[k * n + t] * gk;
                gw[k * n + t] = gk * x[t];
            }
        }
        Ok((gx, Tensor::from_vec(&[o, n], gw)?, Tensor::from_vec(&[o], grad_out.to_vec())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::rng(seed, 1);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn brute_conv(x: &Tensor, l: &ConvLayer, s: usize) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let (kh, kw) = l.kernel();
        let o_n = l.out_channels();
        let (ho, wo) = ((h - kh) / s + 1, (w - kw) / s + 1);
        let mut out = Tensor::zeros(&[o_n, ho, wo]);
        for o in 0..o_n {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = l.bias.data()[o];
                    for ch in 0..c {
                        for a in 0..kh {
                            for b in 0..kw {
                                let wi = ((o * c + ch) * kh + a) * kw + b;
                                acc += l.weights.data()[wi] * x.at3(ch, i * s + a, j * s + b);
                            }
                        }
                    }
                    out.set3(o, i, j, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut l = ConvLayer::zeros(1, 2, 3);
        l.bias = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = conv2d(&Tensor::zeros(&[2, 4, 4]), &l, 1).unwrap();
        assert_eq!(y.shape(), [1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut l = ConvLayer::zeros(1, 1, 1);
        l.weights.data_mut()[0] = 1.0;
        let x = random(&[1, 3, 3], 3);
        assert_eq!(conv2d(&x, &l, 1).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = random(&[1, 5, 5], 10);
        let l = ConvLayer::new(random(&[2, 1, 3, 3], 11), random(&[2], 12)).unwrap();
        for s in [1, 2] {
            let fast = conv2d(&x, &l, s).unwrap();
            let slow = brute_conv(&x, &l, s);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let l = ConvLayer::zeros(1, 2, 3);
        let err = conv2d(&Tensor::zeros(&[3, 4, 4]), &l, 1).unwrap_err();
        assert!(err.to_string().contains("3 channels"));
        assert!(conv2d(&Tensor::zeros(&[2, 2, 4]), &l, 1).is_err());
        assert!(ConvLayer::new(Tensor::zeros(&[1, 1, 2, 2]), Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn conv_is_affine_in_input() {
        let l = ConvLayer::new(random(&[3, 2, 3, 3], 20), random(&[3], 21)).unwrap();
        let x1 = random(&[2, 6, 7], 22);
        let x2 = random(&[2, 6, 7], 23);
        let (a, b) = (0.7, -1.3);
        let mut mix = x1.scale(a);
        mix.add_scaled(&x2, b).unwrap();
        let lhs = conv2d(&mix, &l, 1).unwrap();
        let y1 = conv2d(&x1, &l, 1).unwrap();
        let y2 = conv2d(&x2, &l, 1).unwrap();
        let (o, ho, wo) = lhs.dims3().unwrap();
        for k in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let rhs = a * y1.at3(k, i, j) + b * y2.at3(k, i, j)
                        - (a + b - 1.0) * l.bias.data()[k];
                    assert!((lhs.at3(k, i, j) - rhs).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn conv_backward_zero_and_identity() {
        let x = random(&[1, 4, 4], 30);
        let l = ConvLayer::new(random(&[1, 1, 1, 1], 31), Tensor::zeros(&[1])).unwrap();
        let g = conv2d_backward(&x, &l, &Tensor::zeros(&[1, 4, 4]), 1).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));

        let mut id = ConvLayer::zeros(1, 1, 1);
        id.weights.data_mut()[0] = 1.0;
        let go = random(&[1, 4, 4], 32);
        let g = conv2d_backward(&x, &id, &go, 1).unwrap();
        assert_eq!(g.input, go);
        assert!(conv2d_backward(&x, &id, &Tensor::zeros(&[1, 3, 4]), 1).is_err());
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), [0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let x = Tensor::from_vec(&[2], vec![-1.0, 3.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![5.0, 7.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), [0.0, 7.0]);
        let at_zero = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let one = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert_eq!(relu_backward(&at_zero, &one).unwrap().data(), [0.0]);
    }

    #[test]
    fn lcn_constant_input_is_zero() {
        let y = lcn(&Tensor::filled(&[3, 6, 5], 2.5)).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn lcn_is_scale_invariant() {
        let x = random(&[3, 7, 6], 40);
        let y1 = lcn(&x).unwrap();
        let y10 = lcn(&x.scale(10.0)).unwrap();
        for (a, b) in y1.data().iter().zip(y10.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lcn_matches_direct_window_statistics() {
        let x = random(&[2, 6, 7], 41);
        let y = lcn(&x).unwrap();
        let (c, h, w) = x.dims3().unwrap();
        for i in 0..h {
            for j in 0..w {
                let mut vals = Vec::new();
                for ch in 0..c {
                    for a in i.saturating_sub(2)..(i + 3).min(h) {
                        for b in j.saturating_sub(2)..(j + 3).min(w) {
                            vals.push(x.at3(ch, a, b));
                        }
                    }
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                for ch in 0..c {
                    let want = (x.at3(ch, i, j) - mean) / std.max(0.01);
                    assert!((y.at3(ch, i, j) - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn dropout_rate_zero_and_inference() {
        let x = random(&[4, 5], 50);
        let (y, st) = dropout(&x, 0.0, 1, true).unwrap();
        assert_eq!(y, x);
        assert!(st.mask.unwrap().data().iter().all(|&m| m == 1.0));
        let (y, _) = dropout(&x, 0.1, 1, false).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&x, 1.0, 1, true).is_err());
        assert!(dropout(&x, -0.1, 1, true).is_err());
    }

    #[test]
    fn dropout_statistics_and_determinism() {
        let x = Tensor::filled(&[100_000], 1.0);
        let (y, st) = dropout(&x, 0.1, 99, true).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((0.09..=0.11).contains(&zeros), "zero fraction {zeros}");
        let mask = st.mask.unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0 / 0.9));
        let (_, again) = dropout(&x, 0.1, 99, true).unwrap();
        assert_eq!(again.mask.unwrap(), mask);
    }

    #[test]
    fn pad_and_crop_roundtrip() {
        let x = random(&[2, 3, 4], 60);
        let p = x.pad_replicate3(2).unwrap();
        assert_eq!(p.shape(), [2, 7, 8]);
        assert_eq!(p.crop3(2, 2, 3, 4).unwrap(), x);
        assert_eq!(p.at3(1, 0, 0), x.at3(1, 0, 0));
        assert_eq!(p.at3(0, 6, 7), x.at3(0, 2, 3));
        let u = x.uncrop3(1, 1, 5, 6).unwrap();
        assert_eq!(u.crop3(1, 1, 3, 4).unwrap(), x);
        assert_eq!(u.sum(), x.sum());
    }
}
