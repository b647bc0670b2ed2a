//! Losses, hand-written backpropagation, Adam and the early-stopping
//! training loop.
//!
//! The training objective is
//!
//! ```text
//! L = L_cont(S) + mean_b [ w_dice·(1 − softDice) + w_ce·CE ](decode(z_y), y)
//! ```
//!
//! plus a segmentation term that fits the `d_x → d_y` adapter through the
//! decoder. That term only updates the adapter: image latents and the
//! decoder are treated as constants on its path.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{CrispError, Result};
use crate::mask::{Mask, ProbMap};
use crate::model::{pixel_softmax, CrispModel, Gradients, ParamMut, ParamRef, MAX_TEMPERATURE_SCALE};
use crate::numerics::{finite_diff_grad, gemm, log_sum_exp, Matrix, Op};

/// Floor applied to probabilities inside logarithms.
pub const LOG_CLAMP: f64 = 1e-12;
/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    /// Weight of the adapter's segmentation term.
    pub seg_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 300,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
            dice_weight: 1.0,
            ce_weight: 1.0,
            seg_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CrispError::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0,1), got {}", self.val_fraction));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0,1), got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("dice_weight", self.dice_weight),
            ("ce_weight", self.ce_weight),
            ("seg_weight", self.seg_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            contrastive: 1.0,
            dice: self.dice_weight,
            ce: self.ce_weight,
            segmentation: self.seg_weight,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Weights of the individual loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub contrastive: f64,
    pub dice: f64,
    pub ce: f64,
    pub segmentation: f64,
}

impl Default for Objective {
    fn default() -> Self {
        TrainConfig::default().objective()
    }
}

/// Symmetric cross-entropy over the rows and columns of `S` with identity
/// targets. Returns the loss and `dL/dS`.
pub fn contrastive_loss(s: &Matrix) -> Result<(f64, Matrix)> {
    let b = s.rows();
    if b != s.cols() || b == 0 {
        return Err(CrispError::Dimension(format!(
            "similarity matrix must be square and non-empty, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let bf = b as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(b, b);
    for i in 0..b {
        let lse = log_sum_exp(s.row(i).iter().copied());
        loss -= 0.5 * (s.get(i, i) - lse) / bf;
        for j in 0..b {
            let p = (s.get(i, j) - lse).exp();
            let target = if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, grad.get(i, j) + 0.5 * (p - target) / bf);
        }
    }
    for j in 0..b {
        let lse = log_sum_exp((0..b).map(|i| s.get(i, j)));
        loss -= 0.5 * (s.get(j, j) - lse) / bf;
        for i in 0..b {
            let p = (s.get(i, j) - lse).exp();
            let target = if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, grad.get(i, j) + 0.5 * (p - target) / bf);
        }
    }
    Ok((loss, grad))
}

/// Fraction of rows of `S` whose largest entry is on the diagonal.
pub fn diagonal_accuracy(s: &Matrix) -> f64 {
    diagonal_hits(s) as f64 / s.rows().max(1) as f64
}

fn diagonal_hits(s: &Matrix) -> usize {
    (0..s.rows())
        .filter(|&i| {
            let row = s.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            best == i
        })
        .count()
}

/// Soft-Dice (foreground classes) plus pixel cross-entropy on one sample.
/// The gradient is taken with respect to the logits that produced `pred`
/// through a per-pixel softmax.
pub fn dice_ce_loss(pred: &ProbMap, target: &Mask, dice_weight: f64, ce_weight: f64) -> Result<(f64, Vec<f64>)> {
    pred.matches(target)?;
    Ok(dice_ce_raw(&pred.data, &target.one_hot(), pred.num_classes, pred.num_pixels(), dice_weight, ce_weight))
}

fn dice_ce_raw(probs: &[f64], target: &[f64], k: usize, hw: usize, dice_weight: f64, ce_weight: f64) -> (f64, Vec<f64>) {
    let mut dprob = vec![0.0; k * hw];
    let mut ce = 0.0;
    for (i, (&p, &g)) in probs.iter().zip(target).enumerate() {
        if g != 0.0 {
            ce -= g * p.max(LOG_CLAMP).ln();
            if p >= LOG_CLAMP {
                dprob[i] -= ce_weight * g / (p * hw as f64);
            }
        }
    }
    ce /= hw as f64;

    let fg = (k - 1) as f64;
    let mut dice_sum = 0.0;
    for c in 1..k {
        let plane = c * hw..(c + 1) * hw;
        let (p, g) = (&probs[plane.clone()], &target[plane.clone()]);
        let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let den = p.iter().sum::<f64>() + g.iter().sum::<f64>() + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        dice_sum += num / den;
        for (d, &gv) in dprob[plane].iter_mut().zip(g) {
            *d -= dice_weight / fg * (2.0 * gv * den - num) / (den * den);
        }
    }
    let loss = dice_weight * (1.0 - dice_sum / fg) + ce_weight * ce;

    let mut dlogits = vec![0.0; k * hw];
    for p in 0..hw {
        let inner: f64 = (0..k).map(|c| probs[c * hw + p] * dprob[c * hw + p]).sum();
        for c in 0..k {
            let i = c * hw + p;
            dlogits[i] = probs[i] * (dprob[i] - inner);
        }
    }
    (loss, dlogits)
}

/// Row-stacked inputs for a batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B × H·W`.
    pub images: Matrix,
    /// `B × K·H·W` one-hot rows.
    pub masks: Matrix,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let (mut b, mut hw, mut khw) = (0, None, None);
        for s in samples {
            let one_hot = s.mask.one_hot();
            if *hw.get_or_insert(s.image.len()) != s.image.len() || *khw.get_or_insert(one_hot.len()) != one_hot.len() {
                return Err(CrispError::Dimension("samples in a batch differ in shape".into()));
            }
            images.extend_from_slice(&s.image);
            masks.extend(one_hot);
            b += 1;
        }
        if b == 0 {
            return Err(CrispError::Input("empty batch".into()));
        }
        Ok(Self {
            images: Matrix::from_vec(b, hw.unwrap(), images)?,
            masks: Matrix::from_vec(b, khw.unwrap(), masks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unweighted loss terms for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub segmentation: f64,
    /// Weighted sum that the gradients correspond to.
    pub total: f64,
    pub diag_hits: usize,
}

impl LossBreakdown {
    /// `L_cont + L_rec`, the quantity used for model selection.
    pub fn selection_loss(&self) -> f64 {
        self.contrastive + self.reconstruction
    }
}

struct Forward {
    img_hidden: Matrix,
    z_x: Matrix,
    mask_hidden: Matrix,
    z_y: Matrix,
    h_x: Matrix,
    norm_x: Vec<f64>,
    h_y: Matrix,
    norm_y: Vec<f64>,
    cosine: Matrix,
    dec_hidden: Matrix,
    rec_probs: Matrix,
    seg_input: Matrix,
    seg_hidden: Matrix,
    seg_probs: Matrix,
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn tanh_(mut m: Matrix) -> Matrix {
    m.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    m
}

fn affine(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    let mut y = gemm(x, Op::N, weight, Op::T)?;
    add_bias(&mut y, bias);
    Ok(y)
}

fn normalize_rows(p: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut h = p.clone();
    let mut norms = Vec::with_capacity(p.rows());
    for r in 0..p.rows() {
        let n = crate::numerics::norm(p.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(CrispError::DegenerateInput(format!(
                "projected latent {r} has norm {n}"
            )));
        }
        h.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((h, norms))
}

fn probs_rows(logits: &Matrix, k: usize, hw: usize) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&pixel_softmax(logits.row(r), k, hw));
    }
    out
}

fn forward(model: &CrispModel, batch: &Batch) -> Result<Forward> {
    let c = &model.config;
    if batch.images.cols() != c.num_pixels() || batch.masks.cols() != c.mask_len() {
        return Err(CrispError::Dimension(format!(
            "batch rows of {} / {} values do not match the model",
            batch.images.cols(),
            batch.masks.cols()
        )));
    }
    let ie = &model.image_encoder;
    let img_hidden = tanh_(affine(&batch.images, &ie.first.weight, &ie.first.bias)?);
    let z_x = tanh_(affine(&img_hidden, &ie.second.weight, &ie.second.bias)?);
    let me = &model.mask_encoder;
    let mask_hidden = tanh_(affine(&batch.masks, &me.first.weight, &me.first.bias)?);
    let z_y = tanh_(affine(&mask_hidden, &me.second.weight, &me.second.bias)?);

    let (h_x, norm_x) = normalize_rows(&gemm(&z_x, Op::N, &model.image_projection, Op::T)?)?;
    let (h_y, norm_y) = normalize_rows(&gemm(&z_y, Op::N, &model.mask_projection, Op::T)?)?;
    let cosine = gemm(&h_x, Op::N, &h_y, Op::T)?;

    let dec = &model.decoder;
    let dec_hidden = tanh_(affine(&z_y, &dec.first.weight, &dec.first.bias)?);
    let rec_logits = affine(&dec_hidden, &dec.second.weight, &dec.second.bias)?;
    let rec_probs = probs_rows(&rec_logits, c.num_classes, c.num_pixels());

    let seg_input = affine(&z_x, &model.adapter.weight, &model.adapter.bias)?;
    let seg_hidden = tanh_(affine(&seg_input, &dec.first.weight, &dec.first.bias)?);
    let seg_logits = affine(&seg_hidden, &dec.second.weight, &dec.second.bias)?;
    let seg_probs = probs_rows(&seg_logits, c.num_classes, c.num_pixels());

    Ok(Forward {
        img_hidden,
        z_x,
        mask_hidden,
        z_y,
        h_x,
        norm_x,
        h_y,
        norm_y,
        cosine,
        dec_hidden,
        rec_probs,
        seg_input,
        seg_hidden,
        seg_probs,
    })
}

/// Loss terms and their per-row logit gradients for a stack of predictions.
fn batch_dice_ce(probs: &Matrix, targets: &Matrix, k: usize, hw: usize, objective: &Objective) -> (f64, Matrix) {
    let b = probs.rows() as f64;
    let mut total = 0.0;
    let mut grads = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let (l, g) = dice_ce_raw(probs.row(r), targets.row(r), k, hw, objective.dice, objective.ce);
        total += l;
        grads.row_mut(r).iter_mut().zip(g).for_each(|(d, v)| *d = v / b);
    }
    (total / b, grads)
}

/// `d_pre = d_out ⊙ (1 − tanh²)` given the tanh output.
fn tanh_backward(d_out: &Matrix, act: &Matrix) -> Matrix {
    let mut d = d_out.clone();
    d.data_mut()
        .iter_mut()
        .zip(act.data())
        .for_each(|(g, a)| *g *= 1.0 - a * a);
    d
}

fn col_sums(m: &Matrix, out: &mut [f64]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

/// Backward through `h = p/‖p‖`.
fn normalize_backward(d_h: &Matrix, h: &Matrix, norms: &[f64]) -> Matrix {
    let mut d_p = d_h.clone();
    for r in 0..h.rows() {
        let radial: f64 = h.row(r).iter().zip(d_h.row(r)).map(|(a, b)| a * b).sum();
        for (d, &hv) in d_p.row_mut(r).iter_mut().zip(h.row(r)) {
            *d = (*d - hv * radial) / norms[r];
        }
    }
    d_p
}

/// Forward-only loss evaluation.
pub fn batch_loss(model: &CrispModel, batch: &Batch, objective: &Objective) -> Result<LossBreakdown> {
    let fwd = forward(model, batch)?;
    Ok(losses(model, batch, &fwd, objective)?.0)
}

struct LossGrads {
    d_s: Matrix,
    d_rec: Matrix,
    d_seg: Matrix,
}

fn losses(model: &CrispModel, batch: &Batch, fwd: &Forward, objective: &Objective) -> Result<(LossBreakdown, LossGrads)> {
    let c = &model.config;
    let mut s = fwd.cosine.clone();
    s.scale(model.temperature_scale());
    let (contrastive, d_s) = contrastive_loss(&s)?;
    let (reconstruction, d_rec) = batch_dice_ce(&fwd.rec_probs, &batch.masks, c.num_classes, c.num_pixels(), objective);
    let (segmentation, d_seg) = batch_dice_ce(&fwd.seg_probs, &batch.masks, c.num_classes, c.num_pixels(), objective);
    let total = objective.contrastive * contrastive + reconstruction + objective.segmentation * segmentation;
    Ok((
        LossBreakdown {
            contrastive,
            reconstruction,
            segmentation,
            total,
            diag_hits: diagonal_hits(&s),
        },
        LossGrads { d_s, d_rec, d_seg },
    ))
}

/// Loss terms for `batch` and the gradient of `total` with respect to
/// every parameter.
pub fn total_loss(model: &CrispModel, batch: &Batch, objective: &Objective) -> Result<(LossBreakdown, Gradients)> {
    let fwd = forward(model, batch)?;
    let (breakdown, lg) = losses(model, batch, &fwd, objective)?;
    let mut g = model.zeros_like();
    let scale = model.temperature_scale();

    // contrastive path: S = cosine · scale
    let mut d_cos = lg.d_s.clone();
    d_cos.scale(objective.contrastive * scale);
    if model.log_temperature.exp() < MAX_TEMPERATURE_SCALE {
        let d_scale: f64 = lg.d_s.data().iter().zip(fwd.cosine.data()).map(|(a, b)| a * b).sum();
        g.log_temperature = objective.contrastive * d_scale * scale;
    }
    let d_hx = gemm(&d_cos, Op::N, &fwd.h_y, Op::N)?;
    let d_hy = gemm(&d_cos, Op::T, &fwd.h_x, Op::N)?;
    let d_px = normalize_backward(&d_hx, &fwd.h_x, &fwd.norm_x);
    let d_py = normalize_backward(&d_hy, &fwd.h_y, &fwd.norm_y);
    g.image_projection = gemm(&d_px, Op::T, &fwd.z_x, Op::N)?;
    g.mask_projection = gemm(&d_py, Op::T, &fwd.z_y, Op::N)?;
    let d_zx = gemm(&d_px, Op::N, &model.image_projection, Op::N)?;
    let mut d_zy = gemm(&d_py, Op::N, &model.mask_projection, Op::N)?;

    // reconstruction path through the decoder into z_y
    let dec = &model.decoder;
    g.decoder.second.weight = gemm(&lg.d_rec, Op::T, &fwd.dec_hidden, Op::N)?;
    col_sums(&lg.d_rec, &mut g.decoder.second.bias);
    let d_dec_hidden = gemm(&lg.d_rec, Op::N, &dec.second.weight, Op::N)?;
    let d_dec_pre = tanh_backward(&d_dec_hidden, &fwd.dec_hidden);
    g.decoder.first.weight = gemm(&d_dec_pre, Op::T, &fwd.z_y, Op::N)?;
    col_sums(&d_dec_pre, &mut g.decoder.first.bias);
    let d_zy_rec = gemm(&d_dec_pre, Op::N, &dec.first.weight, Op::N)?;
    d_zy.data_mut().iter_mut().zip(d_zy_rec.data()).for_each(|(a, b)| *a += b);

    // segmentation path: only the adapter is trained
    if objective.segmentation != 0.0 {
        let mut d_seg = lg.d_seg;
        d_seg.scale(objective.segmentation);
        let d_seg_hidden = gemm(&d_seg, Op::N, &dec.second.weight, Op::N)?;
        let d_seg_pre = tanh_backward(&d_seg_hidden, &fwd.seg_hidden);
        let d_seg_input = gemm(&d_seg_pre, Op::N, &dec.first.weight, Op::N)?;
        g.adapter.weight = gemm(&d_seg_input, Op::T, &fwd.z_x, Op::N)?;
        col_sums(&d_seg_input, &mut g.adapter.bias);
        debug_assert_eq!(fwd.seg_input.cols(), model.config.d_y);
    }

    // encoders
    for (d_z, z, hidden, input, enc, genc) in [
        (&d_zx, &fwd.z_x, &fwd.img_hidden, &batch.images, &model.image_encoder, &mut g.image_encoder),
        (&d_zy, &fwd.z_y, &fwd.mask_hidden, &batch.masks, &model.mask_encoder, &mut g.mask_encoder),
    ] {
        let d_pre2 = tanh_backward(d_z, z);
        genc.second.weight = gemm(&d_pre2, Op::T, hidden, Op::N)?;
        col_sums(&d_pre2, &mut genc.second.bias);
        let d_hidden = gemm(&d_pre2, Op::N, &enc.second.weight, Op::N)?;
        let d_pre1 = tanh_backward(&d_hidden, hidden);
        genc.first.weight = gemm(&d_pre1, Op::T, input, Op::N)?;
        col_sums(&d_pre1, &mut genc.first.bias);
    }
    Ok((breakdown, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to tensors flagged as decaying.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates for a list of tensors.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update with bias correction. Weight decay shrinks decaying
/// tensors by `lr·wd·θ` before the moment-based step.
pub fn adam_step(params: &mut [ParamMut<'_>], grads: &[ParamRef<'_>], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(CrispError::Dimension(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        state.second = state.first.clone();
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.values.len() != g.values.len() || state.first[i].len() != p.values.len() {
            return Err(CrispError::Dimension(format!("tensor {} changed shape", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.decays { config.learning_rate * config.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for j in 0..p.values.len() {
            let gj = g.values[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let theta = &mut p.values[j];
            *theta -= decay * *theta;
            *theta -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Metrics for one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_contrastive: f64,
    pub val_reconstruction: f64,
    /// Diagonal accuracy of `S` on the validation split.
    pub diag_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    /// Sample indices of the training and validation splits.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainHistory {
    pub fn selected(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.selected_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_cont,val_rec,diag_acc\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_contrastive, e.val_reconstruction, e.diag_accuracy
            )
            .unwrap();
        }
        out
    }
}

/// Averages over a split, evaluated in consecutive chunks of `chunk`
/// samples. `S` and its diagonal accuracy are computed per chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitStats {
    pub loss: f64,
    pub contrastive: f64,
    pub reconstruction: f64,
    pub segmentation: f64,
    pub diag_accuracy: f64,
}

pub fn evaluate_split(model: &CrispModel, samples: &[&Sample], chunk: usize, objective: &Objective) -> Result<SplitStats> {
    if samples.is_empty() || chunk == 0 {
        return Err(CrispError::Input("cannot evaluate an empty split".into()));
    }
    let (mut cont, mut rec, mut seg, mut hits) = (0.0, 0.0, 0.0, 0);
    for part in samples.chunks(chunk) {
        let batch = Batch::from_samples(part.iter().copied())?;
        let l = batch_loss(model, &batch, objective)?;
        let w = part.len() as f64;
        cont += l.contrastive * w;
        rec += l.reconstruction * w;
        seg += l.segmentation * w;
        hits += l.diag_hits;
    }
    let n = samples.len() as f64;
    Ok(SplitStats {
        loss: (cont + rec) / n,
        contrastive: cont / n,
        reconstruction: rec / n,
        segmentation: seg / n,
        diag_accuracy: hits as f64 / n,
    })
}

/// Deterministic shuffle-and-split: the last `val_fraction` of the
/// shuffled order is the validation split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = order.split_off(n - n_val);
    (order, val)
}

/// Trains from a fresh initialization and returns the weights of the epoch
/// with the lowest validation loss.
pub fn train(samples: &[Sample], model_config: crate::model::ModelConfig, config: &TrainConfig) -> Result<(CrispModel, TrainHistory)> {
    train_with_progress(samples, model_config, config, |_| {})
}

pub fn train_with_progress(
    samples: &[Sample],
    model_config: crate::model::ModelConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(CrispModel, TrainHistory)> {
    config.validate()?;
    if samples.len() < 3 {
        return Err(CrispError::Config(format!(
            "need at least 3 samples to train, got {}",
            samples.len()
        )));
    }
    let (train_idx, val_idx) = split_indices(samples.len(), config.val_fraction, config.seed);
    let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let (model, mut history) = train_split(&train_set, &val_set, model_config, config, on_epoch)?;
    history.train_indices = train_idx;
    history.val_indices = val_idx;
    Ok((model, history))
}

/// Trains on an explicit split; `val` drives early stopping and model
/// selection. History indices refer to positions within each split.
pub fn train_split(
    train: &[&Sample],
    val: &[&Sample],
    model_config: crate::model::ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(CrispModel, TrainHistory)> {
    config.validate()?;
    let mut model = CrispModel::new(model_config)?;
    if train.len() < config.batch_size {
        return Err(CrispError::Config(format!(
            "training split has {} samples, fewer than one batch of {}",
            train.len(),
            config.batch_size
        )));
    }
    if val.is_empty() {
        return Err(CrispError::Config("validation split is empty".into()));
    }
    for s in train.iter().chain(val) {
        model.check_geometry(s.mask.height(), s.mask.width(), s.mask.num_classes())?;
    }
    let objective = config.objective();
    let adam = config.adam();
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory {
        train_indices: order.clone(),
        val_indices: (0..val.len()).collect(),
        ..TrainHistory::default()
    };
    let mut best: Option<(f64, CrispModel)> = None;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0);
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let batch = Batch::from_samples(chunk.iter().map(|&i| train[i]))?;
            let (l, grads) = total_loss(&model, &batch, &objective)?;
            loss_sum += l.selection_loss() * chunk.len() as f64;
            seen += chunk.len();
            adam_step(&mut model.params_mut(), &grads.params(), &mut state, &adam)?;
        }
        if !model.is_finite() {
            return Err(CrispError::NonFinite(format!("parameters diverged in epoch {epoch}")));
        }
        let stats = evaluate_split(&model, val, config.batch_size, &objective)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss: stats.loss,
            val_contrastive: stats.contrastive,
            val_reconstruction: stats.reconstruction,
            diag_accuracy: stats.diag_accuracy,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().map_or(true, |(b, _)| stats.loss < *b) {
            best = Some((stats.loss, model.clone()));
            history.selected_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

/// One analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares backprop gradients against central differences of
/// [`batch_loss`]'s `total` at the flat parameter indices `coords`.
pub fn gradient_check(model: &CrispModel, batch: &Batch, objective: &Objective, coords: &[usize], eps: f64) -> Result<Vec<GradCheck>> {
    let mut seen = std::collections::HashSet::new();
    if let Some(i) = coords.iter().find(|&&i| !seen.insert(i)) {
        return Err(CrispError::Config(format!("coordinate {i} listed twice")));
    }
    let (_, grads) = total_loss(model, batch, objective)?;
    let analytic = grads.flatten();
    let base: Vec<f64> = coords.iter().map(|&i| model.flat_get(i)).collect();
    let numeric = finite_diff_grad(
        |x| {
            let mut probe = model.clone();
            for (&i, &v) in coords.iter().zip(x) {
                probe.flat_set(i, v);
            }
            batch_loss(&probe, batch, objective).map_or(f64::NAN, |l| l.total)
        },
        &base,
        eps,
    )?;
    Ok(coords
        .iter()
        .zip(numeric)
        .map(|(&index, numeric)| GradCheck {
            index,
            analytic: analytic[index],
            numeric,
        })
        .collect())
}
