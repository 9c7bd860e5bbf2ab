//! Mini-batch training with cross-entropy, SGD + momentum + coupled L2 decay
//! and a per-epoch cosine learning-rate schedule.
//!
//! When truncation is active, every batch first refreshes the threshold from
//! the raw contributions of the current (pre-step) parameters, then runs the
//! forward pass with the refreshed threshold. The threshold is a constant for
//! differentiation: an entry with `C[i][j] <= lambda` back-propagates like an
//! ordinary product, an entry above it passes no gradient to either `W[i][j]`
//! or `h[i]`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledSet, UnlabeledSet};
use crate::error::{check_dim, Error, Result};
use crate::metrics;
use crate::network::{forward_features, init_model, Architecture, ForwardCache, Layer, Model};
use crate::numerics::{argmax, Matrix};
use crate::rng::{stream, Rng};
use crate::scoring::{self, Pathway, ScoreFn, ScoreKind};
use crate::spcp::{batch_threshold_stat, ema_update, SpcpConfig, Threshold, ThresholdState};

/// Where LogitNorm sits relative to truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionOrder {
    /// Truncate raw contributions, sum, then normalize the logits. Threshold
    /// statistics come from raw contributions.
    #[default]
    TruncateThenNormalize,
    /// Scale contributions and bias by `1 / (T * ||f||)` (vanilla logits
    /// `f`), then truncate. Threshold statistics and the frozen threshold
    /// live on that normalized scale, and inference applies the same scaling.
    NormalizeThenTruncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitNormConfig {
    pub enabled: bool,
    pub temperature: f64,
    pub order: CompositionOrder,
}

impl Default for LogitNormConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            temperature: 0.04,
            order: CompositionOrder::TruncateThenNormalize,
        }
    }
}

impl LogitNormConfig {
    pub(crate) fn scaled_truncation(&self) -> bool {
        self.enabled && self.order == CompositionOrder::NormalizeThenTruncate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hidden widths of the feature extractor; empty means `h(x) = x`.
    pub hidden: Vec<usize>,
    pub final_relu: bool,
    pub logitnorm: LogitNormConfig,
    pub spcp: SpcpConfig,
    pub score_fn: ScoreKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            epochs: 100,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            hidden: Vec::new(),
            final_relu: true,
            logitnorm: LogitNormConfig::default(),
            spcp: SpcpConfig::default(),
            score_fn: ScoreKind::Energy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, detail: String| Err(Error::out_of_range(name, detail));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", format!("{} must be > 0", self.lr0));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("{} must be >= 0", self.weight_decay));
        }
        if !(self.logitnorm.temperature > 0.0 && self.logitnorm.temperature.is_finite()) {
            return bad("logitnorm.temperature", format!("{} must be > 0", self.logitnorm.temperature));
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be >= 1".into());
        }
        self.spcp.validate()
    }

    /// Threshold used by the training forward pass for a given state.
    pub fn train_threshold(&self, state: &ThresholdState) -> Threshold {
        if self.spcp.truncate_train {
            state.threshold()
        } else {
            Threshold::Disabled
        }
    }
}

/// `-log softmax(logits)[y]`, stable for any finite logits.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::out_of_range(
            "label",
            format!("{y} not in [0, {})", logits.len()),
        ));
    }
    let m = argmax(logits);
    let top = logits[m];
    let mut rest = 0.0;
    for (k, &l) in logits.iter().enumerate() {
        if k != m {
            rest += (l - top).exp();
        }
    }
    Ok((top - logits[y]) + rest.ln_1p())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut total = 0.0;
    for e in &exps {
        total += e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

fn l2_norm(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc.sqrt()
}

/// `f / (temperature * ||f||)`.
pub fn logitnorm_transform(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let norm = l2_norm(logits);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::NonFinite("logitnorm of a zero-norm logit vector".into()));
    }
    let scale = 1.0 / (temperature * norm);
    Ok(logits.iter().map(|v| v * scale).collect())
}

/// Per-sample state needed to differentiate the head.
#[derive(Debug, Clone)]
struct HeadCache {
    /// `mask[d * K + k]`: contribution `(d, k)` passed untruncated.
    mask: Vec<bool>,
    /// Logits after truncation, before any LogitNorm (order A), or the
    /// vanilla logits used for the normalization scale (order B).
    pre_norm: Vec<f64>,
    /// `1 / (T ||.||)` of the normalized vector, or 1 without LogitNorm.
    scale: f64,
}

/// Everything `backward` needs from one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainCache {
    pub features: ForwardCache,
    pub threshold: Threshold,
    heads: Vec<HeadCache>,
}

impl TrainCache {
    /// Truncation masks (true = passed) followed by ReLU activity flags,
    /// flattened over the batch. Used to detect kinks in finite differences.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.heads.iter().flat_map(|h| h.mask.iter().copied()).collect();
        for pre in &self.features.pre_activations {
            out.extend(pre.as_slice().iter().map(|&v| v > 0.0));
        }
        out
    }

    pub fn truncated_entries(&self) -> usize {
        self.heads.iter().map(|h| h.mask.iter().filter(|&&m| !m).count()).sum()
    }
}

fn head_forward_sample(
    model: &Model,
    h: &[f64],
    threshold: Threshold,
    logitnorm: &LogitNormConfig,
) -> Result<(Vec<f64>, HeadCache)> {
    let w = &model.head.weights;
    let b = &model.head.bias;
    let (d, k) = (w.rows(), w.cols());
    let mut mask = vec![true; d * k];

    if logitnorm.scaled_truncation() {
        let vanilla = crate::network::logits(&model.head, h)?;
        let norm = l2_norm(&vanilla);
        if norm == 0.0 {
            return Err(Error::NonFinite("logitnorm of a zero-norm logit vector".into()));
        }
        let scale = 1.0 / (logitnorm.temperature * norm);
        let mut out = vec![0.0; k];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..d {
                let c = scale * (w.get(i, j) * h[i]);
                if threshold.passes(c) {
                    acc += c;
                } else {
                    mask[i * k + j] = false;
                    acc += threshold.value().unwrap();
                }
            }
            *o = acc + scale * b[j];
        }
        return Ok((
            out,
            HeadCache {
                mask,
                pre_norm: vanilla,
                scale,
            },
        ));
    }

    let mut z = vec![0.0; k];
    for (j, zj) in z.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..d {
            let c = w.get(i, j) * h[i];
            if threshold.passes(c) {
                acc += c;
            } else {
                mask[i * k + j] = false;
                acc += threshold.value().unwrap();
            }
        }
        *zj = acc + b[j];
    }
    if logitnorm.enabled {
        let norm = l2_norm(&z);
        if norm == 0.0 {
            return Err(Error::NonFinite("logitnorm of a zero-norm logit vector".into()));
        }
        let scale = 1.0 / (logitnorm.temperature * norm);
        let out = z.iter().map(|v| v * scale).collect();
        Ok((out, HeadCache { mask, pre_norm: z, scale }))
    } else {
        Ok((z.clone(), HeadCache { mask, pre_norm: z, scale: 1.0 }))
    }
}

fn head_forward(
    model: &Model,
    features: ForwardCache,
    threshold: Threshold,
    config: &TrainConfig,
) -> Result<(Matrix, TrainCache)> {
    let n = features.features.rows();
    let k = model.num_classes();
    let mut out = Matrix::zeros(n, k);
    let mut heads = Vec::with_capacity(n);
    for s in 0..n {
        let (logits, cache) =
            head_forward_sample(model, features.features.row(s), threshold, &config.logitnorm)?;
        out.row_mut(s).copy_from_slice(&logits);
        heads.push(cache);
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("training logits".into()));
    }
    Ok((
        out,
        TrainCache {
            features,
            threshold,
            heads,
        },
    ))
}

/// Training forward pass: `h -> C -> truncate -> sum -> (LogitNorm)`.
///
/// The threshold is `state`'s current value when `config.spcp.truncate_train`
/// is set; updating `state` is the caller's job and happens before this call.
pub fn forward_train(
    model: &Model,
    state: &ThresholdState,
    x_batch: &Matrix,
    config: &TrainConfig,
) -> Result<(Matrix, TrainCache)> {
    let (_, features) = forward_features(model, x_batch)?;
    head_forward(model, features, config.train_threshold(state), config)
}

/// Same as [`forward_train`] with an explicit threshold.
pub fn forward_train_with(
    model: &Model,
    threshold: Threshold,
    x_batch: &Matrix,
    config: &TrainConfig,
) -> Result<(Matrix, TrainCache)> {
    let (_, features) = forward_features(model, x_batch)?;
    head_forward(model, features, threshold, config)
}

/// Parameter-shaped buffers: gradients, or SGD velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
    pub head_weights: Matrix,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .extractor
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
            head_weights: Matrix::zeros(model.feature_dim(), model.num_classes()),
            head_bias: vec![0.0; model.num_classes()],
        }
    }

    /// Buffers in parameter order: each layer's weights then bias, then the
    /// head's weights then bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(&l.bias);
        }
        out.push(self.head_weights.as_slice());
        out.push(&self.head_bias);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.head_weights.as_mut_slice());
        out.push(&mut self.head_bias);
        out
    }
}

/// Model parameters in the same order as [`Gradients::slices`].
pub fn parameter_slices_mut(model: &mut Model) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in &mut model.extractor.layers {
        out.push(l.weights.as_mut_slice());
        out.push(&mut l.bias);
    }
    out.push(model.head.weights.as_mut_slice());
    out.push(&mut model.head.bias);
    out
}

pub fn parameter_slices(model: &Model) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    for l in &model.extractor.layers {
        out.push(l.weights.as_slice());
        out.push(&l.bias);
    }
    out.push(model.head.weights.as_slice());
    out.push(&model.head.bias);
    out
}

/// Gradient of the mean cross-entropy over the batch, and that mean.
pub fn backward(
    model: &Model,
    cache: &TrainCache,
    logits_batch: &Matrix,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<(Gradients, f64)> {
    let n = logits_batch.rows();
    check_dim("backward (labels vs batch)", n, labels.len())?;
    check_dim("backward (cache vs batch)", n, cache.heads.len())?;
    let (d, k) = (model.feature_dim(), model.num_classes());
    let w = &model.head.weights;
    let inv_n = 1.0 / n as f64;
    let mut grads = Gradients::zeros_like(model);
    let mut g_features = Matrix::zeros(n, d);
    let mut loss = 0.0;

    for s in 0..n {
        let out = logits_batch.row(s);
        loss += cross_entropy(out, labels[s])?;
        let mut g: Vec<f64> = softmax(out);
        g[labels[s]] -= 1.0;
        for v in &mut g {
            *v *= inv_n;
        }

        let hc = &cache.heads[s];
        let h = cache.features.features.row(s);
        // gradient w.r.t. each contribution C[i][j] and the bias
        let mut g_contrib = vec![0.0; d * k];
        let mut g_bias = vec![0.0; k];

        if config.logitnorm.scaled_truncation() {
            let scale = hc.scale;
            let f = &hc.pre_norm;
            let f_norm_sq = f.iter().map(|v| v * v).sum::<f64>();
            // d out_k / d scale = sum of untruncated raw contributions + b_k
            let mut g_scale = 0.0;
            for j in 0..k {
                let mut u = model.head.bias[j];
                for i in 0..d {
                    if hc.mask[i * k + j] {
                        u += w.get(i, j) * h[i];
                    }
                }
                g_scale += g[j] * u;
            }
            // scale = 1 / (T ||f||)  =>  d scale / d f_k = -scale f_k / ||f||^2
            let g_f: Vec<f64> = f.iter().map(|fk| -g_scale * scale * fk / f_norm_sq).collect();
            for j in 0..k {
                for i in 0..d {
                    let direct = if hc.mask[i * k + j] { g[j] * scale } else { 0.0 };
                    g_contrib[i * k + j] = direct + g_f[j];
                }
                g_bias[j] = g[j] * scale + g_f[j];
            }
        } else {
            let gz: Vec<f64> = if config.logitnorm.enabled {
                // out = z * scale, scale = 1/(T ||z||)
                let z = &hc.pre_norm;
                let z_norm_sq = z.iter().map(|v| v * v).sum::<f64>();
                let gdotz: f64 = g.iter().zip(z).map(|(a, b)| a * b).sum();
                z.iter()
                    .zip(&g)
                    .map(|(zk, gk)| hc.scale * (gk - gdotz * zk / z_norm_sq))
                    .collect()
            } else {
                g
            };
            for j in 0..k {
                for i in 0..d {
                    if hc.mask[i * k + j] {
                        g_contrib[i * k + j] = gz[j];
                    }
                }
                g_bias[j] = gz[j];
            }
        }

        let gh = g_features.row_mut(s);
        for i in 0..d {
            for j in 0..k {
                let gc = g_contrib[i * k + j];
                if gc != 0.0 {
                    let cur = grads.head_weights.get(i, j);
                    grads.head_weights.set(i, j, cur + gc * h[i]);
                    gh[i] += gc * w.get(i, j);
                }
            }
        }
        for j in 0..k {
            grads.head_bias[j] += g_bias[j];
        }
    }

    // extractor, last layer first
    let mut upstream = g_features;
    for l in (0..model.extractor.layers.len()).rev() {
        let layer = &model.extractor.layers[l];
        let pre = &cache.features.pre_activations[l];
        let input = &cache.features.inputs[l];
        let relu = l + 1 < model.extractor.layers.len() || model.extractor.final_relu;
        let mut g_pre = upstream;
        if relu {
            for (g, &p) in g_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let gl = &mut grads.layers[l];
        let mut g_in = Matrix::zeros(n, layer.fan_in());
        for s in 0..n {
            let gp = g_pre.row(s);
            let x = input.row(s);
            for (a, &xa) in x.iter().enumerate() {
                let mut back = 0.0;
                for (b, &gb) in gp.iter().enumerate() {
                    let cur = gl.weights.get(a, b);
                    gl.weights.set(a, b, cur + xa * gb);
                    back += gb * layer.weights.get(a, b);
                }
                g_in.set(s, a, back);
            }
            for (b, &gb) in gp.iter().enumerate() {
                gl.bias[b] += gb;
            }
        }
        upstream = g_in;
    }

    Ok((grads, loss * inv_n))
}

/// `0.5 * lr0 * (1 + cos(pi * epoch / epochs))`, floored at zero.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::out_of_range("epoch", format!("{epoch} not in [0, {epochs})")));
    }
    let t = std::f64::consts::PI * epoch as f64 / epochs as f64;
    Ok((0.5 * lr0 * (1.0 + t.cos())).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: Gradients::zeros_like(model),
        }
    }
}

/// `g += wd * theta; v = momentum * v + g; theta -= lr * v` on every
/// parameter, biases included.
pub fn sgd_step(
    model: &mut Model,
    grads: &Gradients,
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let params = parameter_slices_mut(model);
    let gs = grads.slices();
    let vs = opt.velocity.slices_mut();
    check_dim("sgd_step (gradient buffers)", params.len(), gs.len())?;
    check_dim("sgd_step (velocity buffers)", params.len(), vs.len())?;
    for ((theta, g), v) in params.into_iter().zip(gs).zip(vs) {
        check_dim("sgd_step (buffer length)", theta.len(), g.len())?;
        check_dim("sgd_step (velocity length)", theta.len(), v.len())?;
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            let gd = gi + weight_decay * *t;
            *vi = momentum * *vi + gd;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub lambda: Option<f64>,
    pub lr: f64,
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Batch statistic fed to each threshold update, in order.
    pub threshold_stats: Vec<f64>,
    /// Threshold after each update.
    pub lambda_trace: Vec<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Threshold estimated by one in-order pass of the frozen model over the
/// training set, starting from `lambda0`. Used when training ran without
/// truncation but inference should truncate.
pub fn estimate_threshold(model: &Model, set: &LabeledSet, config: &TrainConfig) -> Result<ThresholdState> {
    let mut state = ThresholdState::new(&config.spcp, model.num_classes())?;
    if !state.is_enabled() {
        return Ok(state);
    }
    let mut rng = Rng::substream(config.seed, stream::THRESHOLD);
    let idx: Vec<usize> = (0..set.len()).collect();
    for batch in idx.chunks(config.batch_size) {
        let x = set.features().select_rows(batch);
        let (h, _) = forward_features(model, &x)?;
        let h = stat_features(model, &h, config)?;
        let stat = batch_threshold_stat(&h, &model.head.weights, state.rho, state.sample_per_batch, &mut rng)?;
        state = ema_update(&state, stat)?;
    }
    Ok(state)
}

/// Features whose contribution matrices feed the threshold statistic: raw
/// `h`, or `h` scaled per sample by the LogitNorm factor when truncation
/// happens on the normalized scale.
fn stat_features(model: &Model, h: &Matrix, config: &TrainConfig) -> Result<Matrix> {
    if !config.logitnorm.scaled_truncation() {
        return Ok(h.clone());
    }
    let mut out = h.clone();
    for s in 0..h.rows() {
        let f = crate::network::logits(&model.head, h.row(s))?;
        let norm = l2_norm(&f);
        if norm == 0.0 {
            return Err(Error::NonFinite("logitnorm of a zero-norm logit vector".into()));
        }
        let scale = 1.0 / (config.logitnorm.temperature * norm);
        for v in out.row_mut(s) {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Trains a model from scratch.
///
/// `val_id` and `val_ood`, when both given, add a per-epoch validation AUROC
/// to the log (scored through the inference pathway with the current
/// threshold).
pub fn train(
    config: &TrainConfig,
    train_set: &LabeledSet,
    val_id: Option<&LabeledSet>,
    val_ood: Option<&UnlabeledSet>,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let started = Instant::now();
    let arch = Architecture {
        input_dim: train_set.dim(),
        hidden: config.hidden.clone(),
        num_classes: train_set.num_classes(),
        final_relu: config.final_relu,
    };
    let mut model = init_model(&arch, config.seed)?;
    model.config = Some(config.clone());
    let mut opt = OptimizerState::new(&model);
    let mut state = ThresholdState::new(&config.spcp, train_set.num_classes())?;
    let update_threshold = state.is_enabled() && config.spcp.truncate_train;
    let mut shuffle_rng = Rng::substream(config.seed, stream::SHUFFLE);
    let mut threshold_rng = Rng::substream(config.seed, stream::THRESHOLD);

    let mut log = TrainLog {
        epochs: Vec::with_capacity(config.epochs),
        threshold_stats: Vec::new(),
        lambda_trace: Vec::new(),
        wall_time: Duration::ZERO,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr0)?;
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let x = train_set.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_set.labels()[i]).collect();
            let (h, features) = forward_features(&model, &x)?;

            if update_threshold {
                let hs = stat_features(&model, &h, config)?;
                let stat = batch_threshold_stat(
                    &hs,
                    &model.head.weights,
                    state.rho,
                    state.sample_per_batch,
                    &mut threshold_rng,
                )?;
                state = ema_update(&state, stat)?;
                log.threshold_stats.push(stat);
                log.lambda_trace.push(state.lambda);
            }

            let train_threshold = config.train_threshold(&state);
            let infer_threshold = if config.spcp.truncate_infer {
                train_threshold
            } else {
                Threshold::Disabled
            };
            for (s, &label) in y.iter().enumerate() {
                let l = scoring::pathway_logits(&model, h.row(s), infer_threshold)?;
                if argmax(&l) == label {
                    correct += 1;
                }
            }

            let (logits, cache) = head_forward(&model, features, train_threshold, config)?;
            let (grads, loss) = backward(&model, &cache, &logits, &y, config)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            loss_sum += loss * batch.len() as f64;
            sgd_step(&mut model, &grads, &mut opt, lr, config.momentum, config.weight_decay)?;
        }

        let val_auroc = match (val_id, val_ood) {
            (Some(id), Some(ood)) => {
                let threshold = if config.spcp.truncate_infer {
                    config.train_threshold(&state)
                } else {
                    Threshold::Disabled
                };
                Some(validation_auroc(&model, threshold, config.score_fn, id, ood)?)
            }
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            lambda: update_threshold.then_some(state.lambda),
            lr,
            val_auroc,
        });
    }

    model.lambda_final = if !state.is_enabled() {
        Threshold::Disabled
    } else if config.spcp.truncate_train {
        Threshold::Value(state.lambda)
    } else {
        Threshold::Value(estimate_threshold(&model, train_set, config)?.lambda)
    };
    log.wall_time = started.elapsed();
    Ok((model, log))
}

fn validation_auroc(
    model: &Model,
    threshold: Threshold,
    kind: ScoreKind,
    id: &LabeledSet,
    ood: &UnlabeledSet,
) -> Result<f64> {
    let mut probe = model.clone();
    probe.lambda_final = threshold;
    let score_fn = ScoreFn {
        kind,
        pathway: if threshold.is_enabled() { Pathway::Spcp } else { Pathway::Vanilla },
    };
    let id_scores = scoring::score_batch(&probe, score_fn, id.features())?;
    let ood_scores = scoring::score_batch(&probe, score_fn, &ood.features)?;
    metrics::auroc(&id_scores, &ood_scores)
}
