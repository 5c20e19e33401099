//! Per-window forward/backward of the detection network and the shared
//! full-map evaluation used for scanning.
//!
//! A window covers `20 x 20` cells. The network additionally reads a ring
//! of [`CONTEXT_CELLS`] cells around it, used only by the contrast
//! normalization statistics. Every value that reaches the classifiers is
//! therefore computed from complete normalization windows, which makes a
//! single convolution over a whole pyramid level reproduce per-window
//! evaluation exactly.

use crate::error::{invalid, shape_err, Result};
use crate::grid_loss::{GridClassifier, GridSpec};
use crate::tensor::{
    conv2d, conv2d_backward, conv2d_backward_params, dropout, dropout_backward, lcn, lcn_backward, relu,
    relu_backward, ConvLayer, DropoutState, Tensor, LCN_RADIUS,
};

use super::{DetectorModel, LossKind};

/// Window side in cells.
pub const WINDOW_CELLS: usize = 20;
/// Normalization context around each window, in cells.
pub const CONTEXT_CELLS: usize = LCN_RADIUS;
/// Side of the network input in cells.
pub const INPUT_CELLS: usize = WINDOW_CELLS + 2 * CONTEXT_CELLS;

/// Class label of a training window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive { pose: usize },
    Negative,
}

impl Label {
    pub fn is_positive(&self) -> bool {
        matches!(self, Label::Positive { .. })
    }

    /// Target of pose unit `p`: positives train only their own unit,
    /// negatives train every unit.
    pub fn target_for(&self, p: usize) -> Option<f64> {
        match *self {
            Label::Positive { pose } if pose == p => Some(1.0),
            Label::Positive { .. } => None,
            Label::Negative => Some(-1.0),
        }
    }

    pub fn aux_target(&self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            -1.0
        }
    }
}

/// One training window of channel features, `[10, 24, 24]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: Label,
}

/// Activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of each layer.
    pub inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Tensor>,
    /// Post-ReLU output of each layer (before normalization/cropping).
    pub post: Vec<Tensor>,
    /// Hidden maps restricted to the window region, one per hidden layer.
    pub hidden: Vec<Tensor>,
    /// Final map before dropout.
    pub last: Tensor,
    /// Final map after dropout, as seen by the classifiers.
    pub features: Tensor,
    pub dropout: DropoutState,
}

/// Spatial size of each layer's output for a window input.
pub fn layer_sizes(model: &DetectorModel) -> Vec<usize> {
    let mut size = INPUT_CELLS;
    let mut out = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        size = size + 1 - layer.kernel().0;
        out.push(size);
        if l == model.config.lcn_after {
            size -= 2 * CONTEXT_CELLS;
        }
    }
    out
}

/// Side of the last convolution map for one window.
pub fn final_map_size(model: &DetectorModel) -> usize {
    *layer_sizes(model).last().expect("at least one layer")
}

/// Side of hidden map `l` restricted to the window.
pub fn hidden_map_size(model: &DetectorModel, l: usize) -> usize {
    let s = layer_sizes(model)[l];
    if l <= model.config.lcn_after {
        s - 2 * CONTEXT_CELLS
    } else {
        s
    }
}

/// Forward pass over one `[10, 24, 24]` window. `dropout_seed` is used only
/// when `training` is set.
pub fn forward_window(model: &DetectorModel, input: &Tensor, training: bool, dropout_seed: u64) -> Result<ForwardCache> {
    let (_, h, w) = input.dims3()?;
    if h != INPUT_CELLS || w != INPUT_CELLS {
        return shape_err(format!("window input must be {INPUT_CELLS}x{INPUT_CELLS}, got {h}x{w}"));
    }
    let n_layers = model.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers);
    let mut hidden = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut x = model.input_norm.apply(input)?;
    for (l, layer) in model.layers.iter().enumerate() {
        let a = conv2d(&x, layer, 1)?;
        let r = relu(&a);
        let next = if l == model.config.lcn_after {
            let s = r.shape()[1] - 2 * CONTEXT_CELLS;
            let normed = lcn(&r)?;
            if l + 1 < n_layers {
                hidden.push(r.crop3(CONTEXT_CELLS, CONTEXT_CELLS, s, s)?);
            }
            normed.crop3(CONTEXT_CELLS, CONTEXT_CELLS, s, s)?
        } else {
            if l + 1 < n_layers {
                if l < model.config.lcn_after {
                    let s = r.shape()[1] - 2 * CONTEXT_CELLS;
                    hidden.push(r.crop3(CONTEXT_CELLS, CONTEXT_CELLS, s, s)?);
                } else {
                    hidden.push(r.clone());
                }
            }
            r.clone()
        };
        inputs.push(x);
        pre.push(a);
        post.push(r);
        x = next;
    }
    let (features, dstate) = dropout(&x, model.config.dropout, dropout_seed, training)?;
    Ok(ForwardCache {
        inputs,
        pre,
        post,
        hidden,
        last: x,
        features,
        dropout: dstate,
    })
}

/// Per-pose scores of one window using the grid classifiers directly.
pub fn window_scores(model: &DetectorModel, input: &Tensor) -> Result<Vec<f64>> {
    let cache = forward_window(model, input, false, 0)?;
    model
        .classifiers
        .iter()
        .map(|g| Ok(g.block_scores(&cache.features)?.iter().sum()))
        .collect()
}

/// Auxiliary classifiers attached to hidden maps. They take part in training
/// only; inference never reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSupervision {
    pub classifiers: Vec<GridClassifier>,
}

/// Adds one grid classifier per hidden convolution map, each with its own
/// block count but the output layer's block size.
pub fn attach_deep_supervision(model: &DetectorModel, n: usize) -> Result<DeepSupervision> {
    if model.layers.len() < 2 {
        return invalid("deep supervision needs at least one hidden convolution map");
    }
    let lambda = match model.config.loss {
        LossKind::Grid => model.config.lambda,
        LossKind::Hinge => 0.0,
    };
    let classifiers = (0..model.layers.len() - 1)
        .map(|l| {
            let s = hidden_map_size(model, l);
            let spec = GridSpec::new(n, model.layers[l].out_channels(), s, s, lambda)?;
            Ok(GridClassifier::zeros(spec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeepSupervision { classifiers })
}

/// Gradient of the per-sample objective, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// `(weights, bias)` per conv layer.
    pub layers: Vec<(Tensor, Tensor)>,
    /// `(block weights, block biases)` per pose classifier.
    pub classifiers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    pub aux: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &DetectorModel, aux: Option<&DeepSupervision>) -> Self {
        let zero_cls = |g: &GridClassifier| {
            (
                g.block_weights.iter().map(|w| vec![0.0; w.len()]).collect(),
                vec![0.0; g.block_biases.len()],
            )
        };
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| (Tensor::zeros(l.weights.shape()), Tensor::zeros(l.bias.shape())))
                .collect(),
            classifiers: model.classifiers.iter().map(zero_cls).collect(),
            aux: aux.map(|a| a.classifiers.iter().map(zero_cls).collect()).unwrap_or_default(),
        }
    }

    /// `self += alpha * other`.
    pub fn accumulate(&mut self, other: &Gradients, alpha: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_scaled(ow, alpha).expect("matching layer shapes");
            b.add_scaled(ob, alpha).expect("matching layer shapes");
        }
        let acc = |dst: &mut Vec<(Vec<Vec<f64>>, Vec<f64>)>, src: &Vec<(Vec<Vec<f64>>, Vec<f64>)>| {
            for ((dw, db), (sw, sb)) in dst.iter_mut().zip(src) {
                for (a, b) in dw.iter_mut().zip(sw) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += alpha * y;
                    }
                }
                for (x, y) in db.iter_mut().zip(sb) {
                    *x += alpha * y;
                }
            }
        };
        acc(&mut self.classifiers, &other.classifiers);
        acc(&mut self.aux, &other.aux);
    }

    /// Flat views in canonical parameter order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.layers {
            out.push(w.data());
            out.push(b.data());
        }
        for (w, b) in self.classifiers.iter().chain(&self.aux) {
            out.extend(w.iter().map(Vec::as_slice));
            out.push(b);
        }
        out
    }
}

/// Mutable flat views of every trainable parameter, in the order used by
/// [`Gradients::slices`].
pub fn param_slices_mut<'a>(model: &'a mut DetectorModel, aux: Option<&'a mut DeepSupervision>) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in &mut model.layers {
        out.push(l.weights.data_mut());
        out.push(l.bias.data_mut());
    }
    let push_cls = |g: &'a mut GridClassifier, out: &mut Vec<&'a mut [f64]>| {
        for w in &mut g.block_weights {
            out.push(w.as_mut_slice());
        }
        out.push(g.block_biases.as_mut_slice());
    };
    for g in &mut model.classifiers {
        push_cls(g, &mut out);
    }
    if let Some(a) = aux {
        for g in &mut a.classifiers {
            push_cls(g, &mut out);
        }
    }
    out
}

/// Loss of one sample: grid (or hinge) loss of every pose unit the label
/// trains, plus the auxiliary hidden-map losses.
pub fn sample_loss(
    model: &DetectorModel,
    aux: Option<&DeepSupervision>,
    sample: &Sample,
    training: bool,
    dropout_seed: u64,
) -> Result<f64> {
    let cache = forward_window(model, &sample.input, training, dropout_seed)?;
    let mut total = 0.0;
    for (p, g) in model.classifiers.iter().enumerate() {
        if let Some(y) = sample.label.target_for(p) {
            total += g.forward(&cache.features, y)?.total;
        }
    }
    if let Some(a) = aux {
        for (g, h) in a.classifiers.iter().zip(&cache.hidden) {
            total += g.forward(h, sample.label.aux_target())?.total;
        }
    }
    Ok(total)
}

/// Loss and exact gradient of one sample.
pub fn sample_gradient(
    model: &DetectorModel,
    aux: Option<&DeepSupervision>,
    sample: &Sample,
    dropout_seed: u64,
) -> Result<(f64, Gradients)> {
    let cache = forward_window(model, &sample.input, true, dropout_seed)?;
    let mut grads = Gradients::zeros_like(model, aux);
    let mut loss = 0.0;
    let mut g_feat = Tensor::zeros(cache.features.shape());
    for (p, g) in model.classifiers.iter().enumerate() {
        if let Some(y) = sample.label.target_for(p) {
            loss += g.forward(&cache.features, y)?.total;
            let gg = g.backward(&cache.features, y)?;
            g_feat.add_scaled(&gg.x, 1.0)?;
            grads.classifiers[p] = (gg.block_weights, gg.block_biases);
        }
    }
    let mut g_hidden: Vec<Option<Tensor>> = vec![None; cache.hidden.len()];
    if let Some(a) = aux {
        let y = sample.label.aux_target();
        for (k, (g, h)) in a.classifiers.iter().zip(&cache.hidden).enumerate() {
            loss += g.forward(h, y)?.total;
            let gg = g.backward(h, y)?;
            g_hidden[k] = Some(gg.x);
            grads.aux[k] = (gg.block_weights, gg.block_biases);
        }
    }

    // Back through dropout and the layer stack.
    let mut g = dropout_backward(&cache.dropout, &g_feat)?;
    let lcn_at = model.config.lcn_after;
    for l in (0..model.layers.len()).rev() {
        let post = &cache.post[l];
        let (_, s, _) = post.dims3()?;
        // `g` is the gradient w.r.t. what this layer handed to the next one.
        let mut g_post = if l == lcn_at {
            let inner = s - 2 * CONTEXT_CELLS;
            let g_norm = g.uncrop3(CONTEXT_CELLS, CONTEXT_CELLS, s, s)?;
            debug_assert_eq!(g.shape()[1], inner);
            lcn_backward(post, &g_norm)?
        } else {
            g
        };
        if l + 1 < model.layers.len() {
            if let Some(gh) = g_hidden[l].take() {
                let hs = gh.shape()[1];
                if hs == s {
                    g_post.add_scaled(&gh, 1.0)?;
                } else {
                    let off = (s - hs) / 2;
                    g_post.add_scaled(&gh.uncrop3(off, off, s, s)?, 1.0)?;
                }
            }
        }
        let g_pre = relu_backward(&cache.pre[l], &g_post)?;
        let layer: &ConvLayer = &model.layers[l];
        let cg = if l == 0 {
            conv2d_backward_params(&cache.inputs[l], layer, &g_pre, 1)?
        } else {
            conv2d_backward(&cache.inputs[l], layer, &g_pre, 1)?
        };
        grads.layers[l] = (cg.weights, cg.bias);
        g = cg.input;
    }
    Ok((loss, grads))
}

/// Final feature map of a whole padded level: `[F, H - 8, W - 8]` for the
/// standard two-layer network, where window `(a, b)` reads the
/// `12 x 12` block starting at `(a, b)`.
pub fn forward_full_map(model: &DetectorModel, padded: &Tensor) -> Result<Tensor> {
    let mut x = model.input_norm.apply(padded)?;
    for (l, layer) in model.layers.iter().enumerate() {
        let r = relu(&conv2d(&x, layer, 1)?);
        x = if l == model.config.lcn_after {
            let (_, h, w) = r.dims3()?;
            if h <= 2 * CONTEXT_CELLS || w <= 2 * CONTEXT_CELLS {
                return shape_err("level too small for normalization context");
            }
            lcn(&r)?.crop3(
                CONTEXT_CELLS,
                CONTEXT_CELLS,
                h - 2 * CONTEXT_CELLS,
                w - 2 * CONTEXT_CELLS,
            )?
        } else {
            r
        };
    }
    Ok(x)
}

/// Correlates every folded pose classifier with the final map, returning
/// `[P, H - 19, W - 19]` window scores.
pub fn score_map(model: &DetectorModel, final_map: &Tensor) -> Result<Tensor> {
    let folded = model
        .folded
        .as_ref()
        .ok_or_else(|| crate::Error::InvalidState("model must be folded before scanning".into()))?;
    let (f, h, w) = final_map.dims3()?;
    let k = final_map_size(model);
    if h < k || w < k {
        return shape_err(format!("final map {h}x{w} smaller than window map {k}"));
    }
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; folded.len() * ho * wo];
    let x = final_map.data();
    for (p, fc) in folded.iter().enumerate() {
        let wt = fc.weights.data();
        let plane = &mut out[p * ho * wo..(p + 1) * ho * wo];
        plane.fill(fc.bias);
        for c in 0..f {
            for a in 0..k {
                for b in 0..k {
                    let wv = wt[(c * k + a) * k + b];
                    if wv == 0.0 {
                        continue;
                    }
                    for i in 0..ho {
                        let src = &x[(c * h + i + a) * w + b..(c * h + i + a) * w + b + wo];
                        for (dst, s) in plane[i * wo..(i + 1) * wo].iter_mut().zip(src) {
                            *dst += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[folded.len(), ho, wo], out)
}
