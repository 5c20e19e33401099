//! Finite-difference oracles shared by the gradient and acceptance tests.
#![allow(dead_code)]

use gridloss::detector::network::{
    attach_deep_supervision, forward_window, param_slices_mut, sample_gradient, sample_loss, DeepSupervision,
    Gradients, Label, Sample, INPUT_CELLS,
};
use gridloss::detector::{DetectorModel, LossKind, ModelConfig};
use gridloss::features::NUM_CHANNELS;
use gridloss::grid_loss::{GridClassifier, GridSpec};
use gridloss::regressor::{RegressorModel, REGRESSOR_CELLS};
use gridloss::rng;
use gridloss::tensor::*;
use rand::Rng;

pub const H: f64 = 1e-3;

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::rng(seed, 7);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// `||a - b|| / max(||a||, ||b||, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-12)
}

/// Central differences of `f` over every entry of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = p[i];
            p[i] = v + H;
            let up = f(&p);
            p[i] = v - H;
            let down = f(&p);
            p[i] = v;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn with(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::from_vec(t.shape(), data.to_vec()).unwrap()
}

/// Worst relative error of each layer op against finite differences.
pub fn layer_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for (name, stride) in [("conv2d", 1usize), ("conv2d stride 2", 2)] {
        let x = random(&[3, 9, 9], seed, -1.0, 1.0);
        let layer = ConvLayer::new(random(&[4, 3, 3, 3], seed + 1, -1.0, 1.0), random(&[4], seed + 2, -1.0, 1.0)).unwrap();
        let y = conv2d(&x, &layer, stride).unwrap();
        let r = random(y.shape(), seed + 3, -1.0, 1.0);
        let g = conv2d_backward(&x, &layer, &r, stride).unwrap();
        let gx = numeric_grad(x.data(), |d| conv2d(&with(&x, d), &layer, stride).unwrap().dot(&r));
        let gw = numeric_grad(layer.weights.data(), |d| {
            let l = ConvLayer::new(with(&layer.weights, d), layer.bias.clone()).unwrap();
            conv2d(&x, &l, stride).unwrap().dot(&r)
        });
        let gb = numeric_grad(layer.bias.data(), |d| {
            let l = ConvLayer::new(layer.weights.clone(), with(&layer.bias, d)).unwrap();
            conv2d(&x, &l, stride).unwrap().dot(&r)
        });
        let e = rel_err(g.input.data(), &gx)
            .max(rel_err(g.weights.data(), &gw))
            .max(rel_err(g.bias.data(), &gb));
        out.push((name, e));
    }

    // ReLU, with inputs kept clear of the kink.
    let x = random(&[2, 6, 6], seed + 4, -1.0, 1.0).map(|v| v.signum() * (0.1 + v.abs()));
    let r = random(x.shape(), seed + 5, -1.0, 1.0);
    let g = relu_backward(&x, &r).unwrap();
    out.push(("relu", rel_err(g.data(), &numeric_grad(x.data(), |d| relu(&with(&x, d)).dot(&r)))));

    // Contrast normalization on a non-negative map, as it sees after ReLU.
    let x = random(&[3, 10, 10], seed + 6, 0.0, 1.0);
    let r = random(x.shape(), seed + 7, -1.0, 1.0);
    let g = lcn_backward(&x, &r).unwrap();
    out.push(("lcn", rel_err(g.data(), &numeric_grad(x.data(), |d| lcn(&with(&x, d)).unwrap().dot(&r)))));

    let x = random(&[2, 5, 5], seed + 8, -1.0, 1.0);
    let r = random(x.shape(), seed + 9, -1.0, 1.0);
    let (_, st) = dropout(&x, 0.3, seed, true).unwrap();
    let g = dropout_backward(&st, &r).unwrap();
    let num = numeric_grad(x.data(), |d| dropout(&with(&x, d), 0.3, seed, true).unwrap().0.dot(&r));
    out.push(("dropout", rel_err(g.data(), &num)));

    let lin = Linear {
        weights: random(&[5, 7], seed + 10, -1.0, 1.0),
        bias: random(&[5], seed + 11, -1.0, 1.0),
    };
    let x = random(&[7], seed + 12, -1.0, 1.0);
    let r = random(&[5], seed + 13, -1.0, 1.0);
    let dot = |l: &Linear, x: &[f64]| l.forward(x).unwrap().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
    let (gx, gw, gb) = lin.backward(x.data(), r.data()).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&lin, d));
    let nw = numeric_grad(lin.weights.data(), |d| dot(&Linear { weights: with(&lin.weights, d), bias: lin.bias.clone() }, x.data()));
    let nb = numeric_grad(lin.bias.data(), |d| dot(&Linear { weights: lin.weights.clone(), bias: with(&lin.bias, d) }, x.data()));
    out.push(("linear", rel_err(&gx, &nx).max(rel_err(gw.data(), &nw)).max(rel_err(gb.data(), &nb))));
    out
}

/// Grid classifier with random weights whose hinges all sit at least
/// `gap` away from their kinks for input `x` and label `y`.
pub fn kink_free_classifier(spec: GridSpec, x: &Tensor, y: f64, seed: u64, gap: f64) -> GridClassifier {
    for attempt in 0..1000 {
        let mut r = rng::rng(seed, 1000 + attempt);
        let mut g = GridClassifier::zeros(spec);
        for w in &mut g.block_weights {
            for v in w.iter_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
        for b in &mut g.block_biases {
            *b = r.random_range(-0.5..0.5);
        }
        let f = g.forward(x, y).unwrap();
        let m = spec.margin();
        let clear = (1.0 - y * f.global_score).abs() > gap && f.block_scores.iter().all(|s| (m - y * s).abs() > gap);
        if clear {
            return g;
        }
    }
    panic!("no kink-free classifier found");
}

/// Relative error of the grid-loss gradient (input, weights, biases).
pub fn grid_loss_error(seed: u64, lambda: f64) -> f64 {
    let spec = GridSpec::new(2, 3, 6, 5, lambda).unwrap();
    let x = random(&[3, 6, 5], seed, -1.0, 1.0);
    let y = if seed.is_multiple_of(2) { 1.0 } else { -1.0 };
    let g = kink_free_classifier(spec, &x, y, seed, 2.0 * H * 10.0);
    let gg = g.backward(&x, y).unwrap();
    let nx = numeric_grad(x.data(), |d| g.forward(&with(&x, d), y).unwrap().total);
    let flat_w: Vec<f64> = g.block_weights.concat();
    let nw = numeric_grad(&flat_w, |d| {
        let mut h = g.clone();
        let mut k = 0;
        for w in &mut h.block_weights {
            for v in w.iter_mut() {
                *v = d[k];
                k += 1;
            }
        }
        h.forward(&x, y).unwrap().total
    });
    let nb = numeric_grad(&g.block_biases, |d| {
        let mut h = g.clone();
        h.block_biases = d.to_vec();
        h.forward(&x, y).unwrap().total
    });
    rel_err(gg.x.data(), &nx)
        .max(rel_err(&gg.block_weights.concat(), &nw))
        .max(rel_err(&gg.block_biases, &nb))
}

/// Small detector with weights large enough to give non-trivial gradients.
pub fn toy_model(loss: LossKind, deep: bool, seed: u64) -> (DetectorModel, Option<DeepSupervision>) {
    let cfg = ModelConfig {
        filters: vec![3, 4],
        loss,
        deep_supervision: deep,
        seed,
        ..ModelConfig::default()
    };
    let mut m = DetectorModel::new(cfg).unwrap();
    let mut aux = deep.then(|| attach_deep_supervision(&m, 2).unwrap());
    let mut r = rng::rng(seed, 77);
    for s in param_slices_mut(&mut m, aux.as_mut()) {
        for v in s.iter_mut() {
            *v = r.random_range(-0.3..0.3);
        }
    }
    (m, aux)
}

pub fn toy_batch(seed: u64) -> Vec<Sample> {
    [Label::Positive { pose: 0 }, Label::Negative, Label::Positive { pose: 1 }]
        .into_iter()
        .enumerate()
        .map(|(k, label)| Sample {
            input: random(&[NUM_CHANNELS, INPUT_CELLS, INPUT_CELLS], seed + 10 + k as u64, 0.0, 1.0),
            label,
        })
        .collect()
}

/// Loss of one sample (as `sample_loss` computes it) together with the
/// on/off state of every ReLU and hinge it passes through.
pub fn loss_and_pattern(m: &DetectorModel, aux: Option<&DeepSupervision>, s: &Sample, seed: u64) -> (f64, Vec<bool>) {
    let cache = forward_window(m, &s.input, true, seed).unwrap();
    let mut pattern: Vec<bool> = cache.pre.iter().flat_map(|a| a.data().iter().map(|&v| v > 0.0)).collect();
    let mut total = 0.0;
    let mut add = |g: &GridClassifier, x: &Tensor, y: f64, pattern: &mut Vec<bool>| {
        let f = g.forward(x, y).unwrap();
        pattern.push(1.0 - y * f.global_score > 0.0);
        pattern.extend(f.block_scores.iter().map(|b| g.spec.margin() - y * b > 0.0));
        total += f.total;
    };
    for (p, g) in m.classifiers.iter().enumerate() {
        if let Some(y) = s.label.target_for(p) {
            add(g, &cache.features, y, &mut pattern);
        }
    }
    if let Some(a) = aux {
        for (g, h) in a.classifiers.iter().zip(&cache.hidden) {
            add(g, h, s.label.aux_target(), &mut pattern);
        }
    }
    (total, pattern)
}

/// Outcome of an end-to-end check: relative error over the coordinates
/// whose `[v - h, v + h]` interval stays inside one linear piece of every
/// ReLU and hinge, and how many were skipped for straddling a kink.
#[derive(Clone, Copy, Debug)]
pub struct EndToEnd {
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// End-to-end check of the batch-mean gradient over every parameter of a
/// small network, dropout mask held fixed.
pub fn end_to_end_error(loss: LossKind, deep: bool, seed: u64) -> EndToEnd {
    let (model, aux) = toy_model(loss, deep, seed);
    let batch = toy_batch(seed);
    let n = batch.len() as f64;
    let mut total = Gradients::zeros_like(&model, aux.as_ref());
    for (k, s) in batch.iter().enumerate() {
        let (l, g) = sample_gradient(&model, aux.as_ref(), s, k as u64).unwrap();
        assert_eq!(l, sample_loss(&model, aux.as_ref(), s, true, k as u64).unwrap());
        assert_eq!(l, loss_and_pattern(&model, aux.as_ref(), s, k as u64).0);
        total.accumulate(&g, 1.0 / n);
    }
    let analytic: Vec<f64> = total.slices().concat();
    let eval = |m: &DetectorModel, a: Option<&DeepSupervision>| {
        let mut l = 0.0;
        let mut pat = Vec::new();
        for (k, s) in batch.iter().enumerate() {
            let (v, p) = loss_and_pattern(m, a, s, k as u64);
            l += v / n;
            pat.extend(p);
        }
        (l, pat)
    };
    let base = eval(&model, aux.as_ref()).1;
    let (mut m, mut a) = (model.clone(), aux.clone());
    let lens: Vec<usize> = param_slices_mut(&mut m, a.as_mut()).iter().map(|s| s.len()).collect();
    let (mut an, mut nu, mut skipped) = (Vec::new(), Vec::new(), 0);
    let mut k = 0;
    for (si, len) in lens.into_iter().enumerate() {
        for i in 0..len {
            let v = param_slices_mut(&mut m, a.as_mut())[si][i];
            param_slices_mut(&mut m, a.as_mut())[si][i] = v + H;
            let (up, pu) = eval(&m, a.as_ref());
            param_slices_mut(&mut m, a.as_mut())[si][i] = v - H;
            let (down, pd) = eval(&m, a.as_ref());
            param_slices_mut(&mut m, a.as_mut())[si][i] = v;
            if pu == base && pd == base {
                an.push(analytic[k]);
                nu.push((up - down) / (2.0 * H));
            } else {
                skipped += 1;
            }
            k += 1;
        }
    }
    EndToEnd { rel_err: rel_err(&an, &nu), checked: an.len(), skipped }
}

/// Relative error of the regressor's backpropagated gradient, over the
/// coordinates whose perturbation leaves every ReLU on the same side.
pub fn regressor_error(seed: u64) -> EndToEnd {
    let mut m = RegressorModel::new(2, 3, seed);
    let mut r = rng::rng(seed, 88);
    for s in m.param_slices_mut() {
        for v in s.iter_mut() {
            *v = r.random_range(-0.2..0.2);
        }
    }
    let input = random(&[NUM_CHANNELS, REGRESSOR_CELLS, REGRESSOR_CELLS], seed + 1, 0.0, 1.0);
    let go = [0.3, -0.7, 0.5, 0.2, -0.4];
    let analytic: Vec<f64> = m.output_gradient(&input, &go).unwrap().concat();
    let pattern = |m: &RegressorModel| {
        let a1 = conv2d(&input, &m.conv1, 1).unwrap();
        let a2 = conv2d(&lcn(&relu(&a1)).unwrap(), &m.conv2, 2).unwrap();
        a1.data().iter().chain(a2.data()).map(|&v| v > 0.0).collect::<Vec<bool>>()
    };
    let obj = |m: &RegressorModel| m.outputs(&input).unwrap().iter().zip(&go).map(|(a, b)| a * b).sum::<f64>();
    let base = pattern(&m);
    let lens: Vec<usize> = m.param_slices_mut().iter().map(|s| s.len()).collect();
    let (mut an, mut nu, mut skipped, mut k) = (Vec::new(), Vec::new(), 0, 0);
    for (si, len) in lens.into_iter().enumerate() {
        for i in 0..len {
            let v = m.param_slices_mut()[si][i];
            m.param_slices_mut()[si][i] = v + H;
            let (up, pu) = (obj(&m), pattern(&m));
            m.param_slices_mut()[si][i] = v - H;
            let (down, pd) = (obj(&m), pattern(&m));
            m.param_slices_mut()[si][i] = v;
            if pu == base && pd == base {
                an.push(analytic[k]);
                nu.push((up - down) / (2.0 * H));
            } else {
                skipped += 1;
            }
            k += 1;
        }
    }
    EndToEnd { rel_err: rel_err(&an, &nu), checked: an.len(), skipped }
}
