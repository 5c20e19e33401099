//! SGD training of the window detector, hard-negative mining, and the model
//! file format.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::detector::network::{
    attach_deep_supervision, param_slices_mut, sample_gradient, sample_loss, DeepSupervision, Gradients, Label, Sample,
};
use crate::detector::{detect_pyramid, window_input, DetectConfig, DetectorModel, InputNorm, LossKind, ModelConfig};
use crate::error::{invalid, shape_err, Error, Result};
use crate::features::{build_pyramid, mirror_channels};
use crate::grid_loss::{FoldedClassifier, GridClassifier, GridSpec};
use crate::rng;
use crate::tensor::{ConvLayer, Tensor};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.01;

/// i.i.d. `N(0, 0.01^2)` tensor drawn from `seed`.
pub fn init_weights(shape: &[usize], seed: u64) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut r = rng::rng(seed, 0x1417);
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut r)).collect();
    Tensor::from_vec(shape, data).expect("shape matches draw count")
}

/// Momentum buffers, one per parameter slice.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lengths: &[usize]) -> Self {
        OptimizerState {
            velocity: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_gradients(g: &Gradients) -> Self {
        Self::new(&g.slices().iter().map(|s| s.len()).collect::<Vec<_>>())
    }
}

/// `v <- momentum * v - lr * g; p <- p + v`, slice by slice.
pub fn sgd_momentum_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return shape_err(format!(
            "{} parameter slices, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.len() != g.len() || p.len() != v.len() {
            return shape_err(format!("slice lengths {} / {} / {}", p.len(), g.len(), v.len()));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = momentum * *vi - lr * gi;
            *pi += *vi;
        }
    }
    Ok(())
}

/// Training protocol settings. Architecture and loss knobs (including
/// `lambda`, `block_n` and `dropout`) live in `model`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bootstrap_rounds: usize,
    pub negatives_per_round: usize,
    pub val_fraction: f64,
    /// Add horizontally mirrored copies of the positives.
    pub mirror: bool,
    /// Score a mined window must exceed to count as a false positive.
    pub mining_threshold: f64,
    pub detect: DetectConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            bootstrap_rounds: 3,
            negatives_per_round: 10_000,
            val_fraction: 0.2,
            mirror: true,
            mining_threshold: 0.0,
            detect: DetectConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return invalid(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return invalid(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.batch_size < 2 {
            return invalid("batch size must be at least 2");
        }
        self.model.validate()
    }
}

/// Per-epoch losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

/// A model under training together with its auxiliary classifiers and
/// optimizer state, so training can resume after mining.
pub struct TrainState {
    pub model: DetectorModel,
    pub aux: Option<DeepSupervision>,
    pub optimizer: OptimizerState,
    /// Epochs run so far, across resumptions.
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let model = DetectorModel::new(cfg.clone())?;
        let aux = if cfg.deep_supervision && model.layers.len() > 1 {
            Some(attach_deep_supervision(&model, cfg.block_n)?)
        } else {
            None
        };
        let optimizer = OptimizerState::for_gradients(&Gradients::zeros_like(&model, aux.as_ref()));
        Ok(TrainState {
            model,
            aux,
            optimizer,
            epochs_done: 0,
        })
    }
}

/// Deterministic train/validation split of one class.
fn split<T: Clone>(items: &[T], frac: f64, seed: u64, stream: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng::rng(seed, stream));
    let n_val = ((items.len() as f64) * frac).round() as usize;
    let n_val = n_val.min(items.len().saturating_sub(1));
    let val = idx[..n_val].iter().map(|&i| items[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| items[i].clone()).collect();
    (train, val)
}

/// Mean output-objective loss in inference mode.
pub fn dataset_loss(model: &DetectorModel, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let losses = data
        .par_iter()
        .map(|s| sample_loss(model, None, s, false, 0))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

/// Mean gradient of a batch. Per-sample gradients are computed in parallel
/// and summed in batch order.
pub fn batch_gradient(
    model: &DetectorModel,
    aux: Option<&DeepSupervision>,
    batch: &[&Sample],
    dropout_seeds: &[u64],
) -> Result<(f64, Gradients)> {
    let per = batch
        .par_iter()
        .zip(dropout_seeds.par_iter())
        .map(|(s, &seed)| sample_gradient(model, aux, s, seed))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut total = Gradients::zeros_like(model, aux);
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l * inv;
        total.accumulate(g, inv);
    }
    Ok((loss, total))
}

fn mirrored(samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            input: mirror_channels(&s.input),
            label: s.label,
        })
        .collect()
}

/// Runs `cfg.epochs` more epochs on `state`, keeping the weights with the
/// lowest validation loss seen in this call.
pub fn train_epochs(
    state: &mut TrainState,
    positives: &[Sample],
    negatives: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if positives.is_empty() || negatives.is_empty() {
        return invalid(format!(
            "training needs both classes ({} positives, {} negatives)",
            positives.len(),
            negatives.len()
        ));
    }
    if positives.iter().any(|s| !s.label.is_positive()) || negatives.iter().any(|s| s.label.is_positive()) {
        return invalid("sample labels disagree with their class list");
    }
    let (mut pos_train, pos_val) = split(positives, cfg.val_fraction, cfg.seed, 1);
    let (neg_train, neg_val) = split(negatives, cfg.val_fraction, cfg.seed, 2);
    if cfg.mirror {
        let m = mirrored(&pos_train);
        pos_train.extend(m);
    }
    let mut val: Vec<Sample> = pos_val;
    val.extend(neg_val);
    if val.is_empty() {
        val = pos_train.iter().chain(&neg_train).cloned().collect();
    }

    let half = cfg.batch_size / 2;
    let mut history = TrainHistory::default();
    let mut best = (dataset_loss(&state.model, &val)?, state.model.clone());
    let mut pos_order: Vec<usize> = (0..pos_train.len()).collect();
    let mut pos_cursor = pos_order.len();
    let mut pos_round = 0u64;
    for _ in 0..cfg.epochs {
        let epoch = state.epochs_done as u64;
        let mut neg_order: Vec<usize> = (0..neg_train.len()).collect();
        neg_order.shuffle(&mut rng::rng(cfg.seed, 1000 + epoch));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in neg_order.chunks(half).enumerate() {
            let mut batch: Vec<&Sample> = Vec::with_capacity(2 * chunk.len());
            for _ in 0..chunk.len() {
                if pos_cursor == pos_order.len() {
                    pos_order.shuffle(&mut rng::rng(cfg.seed, 500_000 + pos_round));
                    pos_round += 1;
                    pos_cursor = 0;
                }
                batch.push(&pos_train[pos_order[pos_cursor]]);
                pos_cursor += 1;
            }
            batch.extend(chunk.iter().map(|&i| &neg_train[i]));
            let base = rng::derive(cfg.seed, (epoch << 32) | b as u64);
            let seeds: Vec<u64> = (0..batch.len() as u64).map(|i| rng::derive(base, i)).collect();
            let (loss, grads) = batch_gradient(&state.model, state.aux.as_ref(), &batch, &seeds)?;
            let gs = grads.slices();
            let mut ps = param_slices_mut(&mut state.model, state.aux.as_mut());
            sgd_momentum_step(&mut ps, &gs, &mut state.optimizer, cfg.lr, cfg.momentum)?;
            epoch_loss += loss;
            batches += 1;
        }
        state.epochs_done += 1;
        history.train_loss.push(epoch_loss / batches.max(1) as f64);
        let v = dataset_loss(&state.model, &val)?;
        history.val_loss.push(v);
        if v < best.0 {
            best = (v, state.model.clone());
            history.best_epoch = history.val_loss.len();
        }
    }
    state.model = best.1;
    state.model.fold();
    Ok(history)
}

/// Trains a fresh model. The result is folded and ready for scanning.
pub fn train(positives: &[Sample], negatives: &[Sample], cfg: &TrainConfig) -> Result<DetectorModel> {
    Ok(train_with_history(positives, negatives, cfg)?.0)
}

pub fn train_with_history(positives: &[Sample], negatives: &[Sample], cfg: &TrainConfig) -> Result<(DetectorModel, TrainHistory)> {
    let mut state = TrainState::new(&cfg.model)?;
    state.model.input_norm = InputNorm::fit(positives.iter().chain(negatives).map(|s| &s.input));
    let h = train_epochs(&mut state, positives, negatives, cfg)?;
    Ok((state.model, h))
}

/// Hard negatives mined from object-free images: every post-NMS detection
/// scoring above `cfg.mining_threshold`, highest scores first, at most
/// `cfg.negatives_per_round`.
pub fn bootstrap(model: &DetectorModel, negative_images: &[Tensor], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    if !model.is_folded() {
        return Err(Error::InvalidState("mining needs a folded model".into()));
    }
    let mut dcfg = cfg.detect;
    dcfg.score_threshold = cfg.mining_threshold;
    let per_image = negative_images
        .par_iter()
        .enumerate()
        .map(|(img, image)| {
            let pyr = build_pyramid(image, dcfg.pyramid)?;
            let dets = detect_pyramid(&pyr.levels, model, &dcfg)?;
            dets.into_iter()
                .filter(|d| d.score > cfg.mining_threshold)
                .map(|d| Ok((d.score, img, d.level, d.cell, window_input(&pyr.levels[d.level], d.cell)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<_> = per_image.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    all.truncate(cfg.negatives_per_round);
    Ok(all
        .into_iter()
        .map(|(_, _, _, _, input)| Sample {
            input,
            label: Label::Negative,
        })
        .collect())
}

/// Number of hard negatives found in each mining round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BootstrapReport {
    pub mined: Vec<usize>,
    pub history: Vec<TrainHistory>,
}

/// Train, then alternate mining and continued training for
/// `cfg.bootstrap_rounds` rounds or until no hard negatives remain.
pub fn train_with_bootstrap(
    positives: &[Sample],
    negatives: &[Sample],
    negative_images: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, BootstrapReport)> {
    let mut state = TrainState::new(&cfg.model)?;
    state.model.input_norm = InputNorm::fit(positives.iter().chain(negatives).map(|s| &s.input));
    let mut report = BootstrapReport::default();
    let mut pool = negatives.to_vec();
    report.history.push(train_epochs(&mut state, positives, &pool, cfg)?);
    for _ in 0..cfg.bootstrap_rounds {
        let mined = bootstrap(&state.model, negative_images, cfg)?;
        report.mined.push(mined.len());
        if mined.is_empty() {
            break;
        }
        pool.extend(mined);
        report.history.push(train_epochs(&mut state, positives, &pool, cfg)?);
    }
    Ok((state.model, report))
}

const MAGIC: &str = "GRIDLOSS-MODEL 1";

pub(crate) fn write_array(out: &mut String, name: &str, shape: &[usize], values: &[f64]) {
    let _ = write!(out, "{name} {}", shape.len());
    for d in shape {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

/// Serializes a model (conv layers, per-block classifiers and their folded
/// form). Auxiliary training heads are never written.
pub fn model_to_string(model: &DetectorModel) -> String {
    let c = &model.config;
    let mut out = String::from(MAGIC);
    out.push('\n');
    let _ = writeln!(out, "config.seed {}", c.seed);
    let _ = writeln!(out, "config.loss {}", c.loss);
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(out, "config.filters {}", list(&c.filters));
    let _ = writeln!(out, "config.kernels {}", list(&c.kernels));
    let _ = writeln!(out, "config.deep_supervision {}", c.deep_supervision);
    write_array(
        &mut out,
        "config.scalars",
        &[5],
        &[c.lcn_after as f64, c.poses as f64, c.block_n as f64, c.lambda, c.dropout],
    );
    write_array(&mut out, "input.mean", &[model.input_norm.mean.len()], &model.input_norm.mean);
    write_array(&mut out, "input.scale", &[model.input_norm.scale.len()], &model.input_norm.scale);
    for (l, layer) in model.layers.iter().enumerate() {
        write_array(&mut out, &format!("layer{l}.weights"), layer.weights.shape(), layer.weights.data());
        write_array(&mut out, &format!("layer{l}.bias"), layer.bias.shape(), layer.bias.data());
    }
    let folded: Vec<FoldedClassifier> = match &model.folded {
        Some(f) => f.clone(),
        None => model.classifiers.iter().map(GridClassifier::fold_back).collect(),
    };
    for (p, (g, f)) in model.classifiers.iter().zip(&folded).enumerate() {
        for (i, w) in g.block_weights.iter().enumerate() {
            write_array(&mut out, &format!("pose{p}.block{i}.weights"), &[w.len()], w);
        }
        write_array(&mut out, &format!("pose{p}.block_biases"), &[g.block_biases.len()], &g.block_biases);
        write_array(&mut out, &format!("pose{p}.folded.weights"), f.weights.shape(), f.weights.data());
        write_array(&mut out, &format!("pose{p}.folded.bias"), &[1], &[f.bias]);
    }
    out
}

pub(crate) struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a str,
    line: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(text: &'a str, path: &'a str) -> Self {
        Reader {
            lines: text.lines().enumerate(),
            path,
            line: 0,
        }
    }

    pub(crate) fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            path: self.path.to_string(),
            line: self.line,
            msg: msg.into(),
        })
    }

    pub(crate) fn next(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                self.err("unexpected end of model file")
            }
        }
    }

    pub(crate) fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next()?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ => self.err(format!("expected `{key} ...`, found `{l}`")),
        }
    }

    pub(crate) fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().or_else(|_| self.err(format!("cannot parse `{s}`")))
    }

    pub(crate) fn keyed_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.keyed(key)?;
        self.parse(v)
    }

    pub(crate) fn keyed_list(&mut self, key: &str) -> Result<Vec<usize>> {
        let v = self.keyed(key)?;
        self.list(v)
    }

    pub(crate) fn list(&self, s: &str) -> Result<Vec<usize>> {
        s.split(',').map(|x| self.parse(x)).collect()
    }

    pub(crate) fn array(&mut self, name: &str) -> Result<Tensor> {
        let head = self.keyed(name)?;
        let mut it = head.split_whitespace();
        let ndim: usize = self.parse(it.next().unwrap_or(""))?;
        let shape = it.map(|d| self.parse(d)).collect::<Result<Vec<usize>>>()?;
        if shape.len() != ndim {
            return self.err(format!("`{name}` declares {ndim} dims but lists {}", shape.len()));
        }
        let body = self.next()?;
        let values = body.split_whitespace().map(|v| self.parse(v)).collect::<Result<Vec<f64>>>()?;
        Tensor::from_vec(&shape, values).or_else(|e| self.err(format!("`{name}`: {e}")))
    }
}

/// Parses [`model_to_string`] output. `path` is only used in diagnostics.
pub fn model_from_str(text: &str, path: &str) -> Result<DetectorModel> {
    let mut r = Reader::new(text, path);
    if r.next()? != MAGIC {
        return r.err(format!("missing `{MAGIC}` header"));
    }
    let seed = r.keyed_parse("config.seed")?;
    let loss: LossKind = r.keyed_parse("config.loss")?;
    let filters = r.keyed_list("config.filters")?;
    let kernels = r.keyed_list("config.kernels")?;
    let deep_supervision = r.keyed_parse("config.deep_supervision")?;
    let s = r.array("config.scalars")?;
    if s.len() != 5 {
        return r.err("config.scalars must hold 5 values");
    }
    let s = s.data();
    let config = ModelConfig {
        filters,
        kernels,
        lcn_after: s[0] as usize,
        poses: s[1] as usize,
        block_n: s[2] as usize,
        lambda: s[3],
        loss,
        dropout: s[4],
        deep_supervision,
        seed,
    };
    config.validate()?;
    let mean = r.array("input.mean")?.into_data();
    let scale = r.array("input.scale")?.into_data();
    if mean.len() != crate::features::NUM_CHANNELS || scale.len() != mean.len() {
        return r.err("input normalization must have one entry per channel");
    }
    let mut layers = Vec::new();
    for l in 0..config.filters.len() {
        let w = r.array(&format!("layer{l}.weights"))?;
        let b = r.array(&format!("layer{l}.bias"))?;
        layers.push(ConvLayer::new(w, b)?);
    }
    let mut model = DetectorModel {
        config,
        input_norm: InputNorm { mean, scale },
        layers,
        classifiers: Vec::new(),
        folded: None,
    };
    let size = model.final_map_size();
    let f = *model.config.filters.last().expect("validated non-empty");
    let spec = GridSpec::new(model.config.block_n, f, size, size, model.config.effective_lambda())?;
    let mut folded = Vec::new();
    for p in 0..model.config.poses {
        let mut g = GridClassifier::zeros(spec);
        for i in 0..spec.num_blocks() {
            g.block_weights[i] = r.array(&format!("pose{p}.block{i}.weights"))?.into_data();
        }
        g.block_biases = r.array(&format!("pose{p}.block_biases"))?.into_data();
        g.validate()?;
        let w = r.array(&format!("pose{p}.folded.weights"))?;
        let b = r.array(&format!("pose{p}.folded.bias"))?;
        if w.shape() != [spec.f, spec.r, spec.c] || b.len() != 1 {
            return r.err(format!("pose{p} folded classifier has the wrong shape"));
        }
        folded.push(FoldedClassifier {
            weights: w,
            bias: b.data()[0],
        });
        model.classifiers.push(g);
    }
    model.folded = Some(folded);
    Ok(model)
}

pub fn save_model(model: &DetectorModel, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, model_to_string(model))?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<DetectorModel> {
    let text = crate::error::read_text(path)?;
    model_from_str(&text, &path.display().to_string())
}
