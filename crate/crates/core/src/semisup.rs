//! Mean-teacher semi-supervised training with entropy confidence weights.

use std::io::Write;
use std::sync::Arc;

use crate::backbone::{argmax_channels, stack, Model};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::numerics::{softmax_channels, Tape, Tensor};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::rng::SplitMix64;

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Channel sums of a probability map may drift this far from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentState {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub alpha: f64,
    pub lambda: f64,
    pub step: u64,
}

impl TeacherStudentState {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: ParamSet, alpha: f64, lambda: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA decay {alpha} outside [0, 1)")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "consistency weight {lambda} must be >= 0"
            )));
        }
        let mut teacher = student.clone();
        teacher.set_trainable_prefix("", false);
        Ok(Self {
            student,
            teacher,
            alpha,
            lambda,
            step: 0,
        })
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.alpha)
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, element-wise.
///
/// Evaluated as `t + (1 - alpha) * (s - t)` so buffers the student shares
/// with the teacher (a frozen backbone) stay bit-identical.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !teacher.same_names(student) {
        return Err(Error::State(
            "teacher and student parameter names differ".into(),
        ));
    }
    let beta = 1.0 - alpha;
    for ((name, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        if t.shape() != s.shape() {
            return Err(Error::State(format!("shape mismatch for {name}")));
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv += beta * (sv - *tv);
        }
    }
    Ok(())
}

/// Per-pixel confidence `1 - H / ln K` of a `[B, K, H, W]` probability map.
/// With a single class every pixel is certain.
pub fn entropy_weights(probs: &Tensor) -> Result<Tensor> {
    let [b, k, h, w] = probs.dims4()?;
    let plane = h * w;
    let d = probs.data();
    let log_k = (k as f64).ln();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for j in 0..plane {
            let mut total = 0.0;
            let mut ent = 0.0;
            for c in 0..k {
                let p = d[(bi * k + c) * plane + j];
                if !(p >= 0.0) {
                    return Err(Error::Data(format!("negative or NaN probability {p}")));
                }
                total += p;
                if p > 0.0 {
                    ent -= p * p.ln();
                }
            }
            if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::Data(format!("probabilities sum to {total}")));
            }
            out.push(if k == 1 { 1.0 } else { 1.0 - ent / log_k });
        }
    }
    Tensor::new(&[b, h, w], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub probs: Tensor,
    pub labels: Vec<usize>,
    pub weights: Tensor,
}

pub fn pseudo_labels(probs: Tensor) -> Result<PseudoLabelBatch> {
    let weights = entropy_weights(&probs)?;
    let labels = argmax_channels(&probs);
    Ok(PseudoLabelBatch {
        probs,
        labels,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub jitter: bool,
    pub jitter_scale: (f64, f64),
    pub jitter_shift: (f64, f64),
    pub cutout: bool,
    /// Cutout sides are at most this fraction of the image sides, so the
    /// covered area is at most its square.
    pub cutout_side: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            weak_sigma: 0.01,
            strong_sigma: 0.05,
            jitter: true,
            jitter_scale: (0.8, 1.2),
            jitter_shift: (-0.1, 0.1),
            cutout: true,
            cutout_side: 0.5,
        }
    }
}

/// The geometric coin both views of one seed share.
pub fn flips(seed: u64, cfg: &AugmentConfig) -> bool {
    SplitMix64::derive(seed, 0).coin(cfg.flip_prob)
}

fn flip_last_axis(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

fn add_noise(data: &mut [f64], sigma: f64, rng: &mut SplitMix64) {
    if sigma > 0.0 {
        for v in data {
            *v += sigma * rng.normal();
        }
    }
}

/// Horizontal flip plus small Gaussian noise, for `[C, H, W]` images.
pub fn weak_augment(image: &Tensor, seed: u64, cfg: &AugmentConfig) -> Result<Tensor> {
    image.expect_rank(3)?;
    let width = image.shape()[2];
    let mut out = image.data().to_vec();
    if flips(seed, cfg) {
        flip_last_axis(&mut out, width);
    }
    add_noise(&mut out, cfg.weak_sigma, &mut SplitMix64::derive(seed, 1));
    Tensor::new(image.shape(), out)
}

/// Same flip as [`weak_augment`], then per-channel affine jitter, one
/// zero-filled cutout rectangle and stronger noise.
pub fn strong_augment(image: &Tensor, seed: u64, cfg: &AugmentConfig) -> Result<Tensor> {
    image.expect_rank(3)?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.data().to_vec();
    if flips(seed, cfg) {
        flip_last_axis(&mut out, w);
    }
    let mut rng = SplitMix64::derive(seed, 2);
    if cfg.jitter {
        for plane in out.chunks_mut(h * w) {
            let scale = rng.uniform(cfg.jitter_scale.0, cfg.jitter_scale.1);
            let shift = rng.uniform(cfg.jitter_shift.0, cfg.jitter_shift.1);
            for v in plane {
                *v = *v * scale + shift;
            }
        }
    }
    if cfg.cutout {
        let max_h = ((h as f64 * cfg.cutout_side) as usize).max(1);
        let max_w = ((w as f64 * cfg.cutout_side) as usize).max(1);
        let (ch, cw) = (1 + rng.below(max_h), 1 + rng.below(max_w));
        let (y0, x0) = (rng.below(h - ch + 1), rng.below(w - cw + 1));
        for ci in 0..c {
            for y in y0..y0 + ch {
                let row = (ci * h + y) * w;
                out[row + x0..row + x0 + cw].fill(0.0);
            }
        }
    }
    add_noise(&mut out, cfg.strong_sigma, &mut SplitMix64::derive(seed, 3));
    Tensor::new(image.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub l_sup: f64,
    pub l_cons: f64,
    pub l_total: f64,
    /// Mean confidence weight over unlabeled pixels (0 without unlabeled data).
    pub mean_w: f64,
}

fn batch_seed(step_seed: u64, role: u64, i: usize) -> u64 {
    SplitMix64::derive(step_seed, (role << 32) | i as u64).next_u64()
}

/// Labeled views: the weak recipe, with the label flipped alongside.
fn labeled_batch(
    samples: &[&Sample],
    step_seed: u64,
    aug: &AugmentConfig,
) -> Result<(Tensor, Vec<usize>)> {
    let mut views = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let seed = batch_seed(step_seed, 1, i);
        let label = if flips(seed, aug) {
            s.label.flipped()
        } else {
            s.label.clone()
        };
        views.push(Sample {
            image: weak_augment(&s.image, seed, aug)?,
            label,
            labeled: true,
        });
    }
    let refs: Vec<&Sample> = views.iter().collect();
    stack(&refs)
}

fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::new(&shape, data)
}

/// Gradients of the total loss for the current state, without updating it.
/// Returns the per-buffer gradients of the student (zeros for frozen ones).
pub fn loss_and_grads(
    model: &Model,
    state: &TeacherStudentState,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    step_seed: u64,
    aug: &AugmentConfig,
) -> Result<(StepStats, ParamSet)> {
    if labeled.is_empty() {
        return Err(Error::Training(
            "a training step needs at least one labeled scene".into(),
        ));
    }
    let (x_l, y_l) = labeled_batch(labeled, step_seed, aug)?;
    let mut tape = Tape::new();
    let bound = state.student.bind(&mut tape);
    let xv = tape.constant(x_l);
    let logits_l = model.forward_on(&mut tape, xv, &bound)?;
    let l_sup = tape.cross_entropy(logits_l, Arc::new(y_l), None)?;

    let mut l_cons_value = 0.0;
    let mut mean_w = 0.0;
    let mut total = l_sup;
    if !unlabeled.is_empty() {
        let mut weak = Vec::with_capacity(unlabeled.len());
        let mut strong = Vec::with_capacity(unlabeled.len());
        for (i, s) in unlabeled.iter().enumerate() {
            let seed = batch_seed(step_seed, 2, i);
            weak.push(weak_augment(&s.image, seed, aug)?);
            strong.push(strong_augment(&s.image, seed, aug)?);
        }
        // Value-only pass on a separate tape: the teacher is never bound
        // to the tape that gets differentiated.
        let teacher_logits = model.logits(&state.teacher, &stack_images(&weak)?)?;
        let pl = pseudo_labels(softmax_channels(&teacher_logits)?)?;
        mean_w = pl.weights.sum() / pl.weights.numel() as f64;
        let xs = tape.constant(stack_images(&strong)?);
        let logits_u = model.forward_on(&mut tape, xs, &bound)?;
        let l_cons = tape.cross_entropy(
            logits_u,
            Arc::new(pl.labels),
            Some(Arc::new(pl.weights.into_data())),
        )?;
        l_cons_value = tape.value(l_cons).item();
        total = tape.add_scaled(l_sup, l_cons, state.lambda)?;
    }
    let stats = StepStats {
        l_sup: tape.value(l_sup).item(),
        l_cons: l_cons_value,
        l_total: tape.value(total).item(),
        mean_w,
    };
    if !stats.l_total.is_finite() || !stats.l_cons.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {}: sup={} cons={}",
            state.step, stats.l_sup, stats.l_cons
        )));
    }
    let mut grads = tape.backward(total)?;
    let mut out = state.student.clone();
    out.collect_grads(&bound, &mut grads)?;
    Ok((stats, out))
}

/// One optimisation step on the trainable student buffers followed by the
/// EMA teacher update. Buffers are rounded to `f32` afterwards so they
/// survive a checkpoint roundtrip unchanged.
pub fn train_step(
    model: &Model,
    state: &mut TeacherStudentState,
    adam: &mut Adam,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    step_seed: u64,
    aug: &AugmentConfig,
) -> Result<StepStats> {
    let (stats, with_grads) = loss_and_grads(model, state, labeled, unlabeled, step_seed, aug)?;
    state.student = with_grads;
    adam.step(&mut state.student);
    state.student.snap_to_f32();
    state.ema_update()?;
    state.teacher.snap_to_f32();
    state.step += 1;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub aug: AugmentConfig,
}

/// Epoch loop: each epoch visits every labeled scene once in a fresh order,
/// pairing each labeled batch with an equally sized unlabeled batch drawn
/// cyclically from its own shuffled order.
pub fn train(
    model: &Model,
    state: &mut TeacherStudentState,
    labeled: &[Sample],
    unlabeled: &[Sample],
    opts: &TrainOptions,
    mut on_step: impl FnMut(u64, &StepStats) -> Result<()>,
) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::Training("no labeled scenes to train on".into()));
    }
    let batch = opts.batch.max(1);
    let mut adam = Adam::new(opts.lr);
    let mut order_rng = SplitMix64::derive(opts.seed, 0x1AB);
    let mut unl_rng = SplitMix64::derive(opts.seed, 0x0B1);
    let mut l_order: Vec<usize> = (0..labeled.len()).collect();
    let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
    unl_rng.shuffle(&mut u_order);
    let mut u_pos = 0;
    for _ in 0..opts.epochs {
        order_rng.shuffle(&mut l_order);
        for chunk in l_order.chunks(batch) {
            let lb: Vec<&Sample> = chunk.iter().map(|&i| &labeled[i]).collect();
            let mut ub = Vec::new();
            if !unlabeled.is_empty() {
                for _ in 0..chunk.len() {
                    if u_pos == u_order.len() {
                        unl_rng.shuffle(&mut u_order);
                        u_pos = 0;
                    }
                    ub.push(&unlabeled[u_order[u_pos]]);
                    u_pos += 1;
                }
            }
            let step_seed = SplitMix64::derive(opts.seed, 0x57E9 ^ (state.step << 8)).next_u64();
            let stats = train_step(model, state, &mut adam, &lb, &ub, step_seed, &opts.aug)?;
            on_step(state.step, &stats)?;
        }
    }
    Ok(())
}

pub const LOG_HEADER: &str = "step\tl_sup\tl_cons\tl_total\tmean_w";

pub fn write_log_line(out: &mut impl Write, step: u64, s: &StepStats) -> std::io::Result<()> {
    writeln!(
        out,
        "{step}\t{}\t{}\t{}\t{}",
        s.l_sup, s.l_cons, s.l_total, s.mean_w
    )
}
