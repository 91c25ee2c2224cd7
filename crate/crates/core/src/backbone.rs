//! Four-stage convolutional encoder-decoder with optional adapter sites.
//!
//! Encoder stage `k` (1..=4): stride-2 3x3 convolution + GELU, then
//! `convs_per_stage` stride-1 3x3 convolutions + GELU. Output resolution is
//! `input / 2^k`. If `k` is an adapter stage, the stage output goes through
//! the adapter (in `[B, H, W, C]` layout) before anything else reads it.
//!
//! Decoder level `k` (4..=1): nearest 2x upsample, concatenate the encoder
//! output one level up (the image itself for `k = 1`), 3x3 convolution +
//! GELU, then `convs_per_stage` more. A 1x1 convolution maps to class logits.

use std::collections::{BTreeMap, BTreeSet};

use crate::adapter::{self, AdapterParams, AdapterVars};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::Adam;
use crate::params::{Bound, ParamSet};
use crate::rng::SplitMix64;
use crate::semisup::{flips, strong_augment, AugmentConfig};
use crate::spectral::{default_cutoff, BandMasks, RadialMaskPair};

pub const STAGES: usize = 4;
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const ADAPTER_PREFIX: &str = "adapter.";

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; STAGES],
    pub num_classes: usize,
    pub adapter_stages: BTreeSet<usize>,
    /// Per-stage spectral cutoff overrides; other stages use a quarter of
    /// the shorter side of that stage's feature map.
    pub cutoffs: BTreeMap<usize, f64>,
    pub input_size: (usize, usize),
    pub convs_per_stage: usize,
    pub reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [8, 16, 32, 64],
            num_classes: 9,
            adapter_stages: [3, 4].into_iter().collect(),
            cutoffs: BTreeMap::new(),
            input_size: (64, 64),
            convs_per_stage: 2,
            reduction: adapter::DEFAULT_REDUCTION,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self
            .adapter_stages
            .iter()
            .find(|&&s| !(1..=STAGES).contains(&s))
        {
            return Err(Error::Config(format!("adapter stage {bad} outside 1..=4")));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of 16"
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if let Some((s, c)) = self
            .cutoffs
            .iter()
            .find(|(s, c)| !(1..=STAGES).contains(s) || !(**c > 0.0))
        {
            return Err(Error::Config(format!("invalid cutoff {c} for stage {s}")));
        }
        Ok(())
    }

    /// Spatial size of stage `k`'s output.
    pub fn stage_size(&self, stage: usize) -> (usize, usize) {
        (self.input_size.0 >> stage, self.input_size.1 >> stage)
    }

    pub fn cutoff(&self, stage: usize) -> f64 {
        let (h, w) = self.stage_size(stage);
        self.cutoffs
            .get(&stage)
            .copied()
            .unwrap_or_else(|| default_cutoff(h, w))
    }

    pub fn without_adapters(&self) -> Self {
        Self {
            adapter_stages: BTreeSet::new(),
            ..self.clone()
        }
    }

    fn channels_before(&self, stage: usize) -> usize {
        if stage == 1 {
            self.in_channels
        } else {
            self.stage_channels[stage - 2]
        }
    }
}

pub fn adapter_prefix(stage: usize) -> String {
    format!("adapter.stage{stage}")
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

/// A configured network: parameter layout plus precomputed band masks.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: BackboneConfig,
    masks: BTreeMap<usize, BandMasks>,
}

impl Model {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let masks = cfg
            .adapter_stages
            .iter()
            .map(|&s| {
                let (h, w) = cfg.stage_size(s);
                Ok((
                    s,
                    BandMasks::from(&RadialMaskPair::new(h, w, cfg.cutoff(s))?),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, masks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `(name, [C_out, C_in, k, k])` for every backbone convolution, in
    /// forward order.
    pub fn backbone_layout(&self) -> Vec<(String, [usize; 4])> {
        let c = &self.cfg;
        let mut out = Vec::new();
        for s in 1..=STAGES {
            let ch = c.stage_channels[s - 1];
            out.push((
                format!("backbone.enc{s}.down"),
                [ch, c.channels_before(s), 3, 3],
            ));
            for j in 0..c.convs_per_stage {
                out.push((format!("backbone.enc{s}.conv{j}"), [ch, ch, 3, 3]));
            }
        }
        for s in (1..=STAGES).rev() {
            let in_ch = c.stage_channels[s - 1] + c.channels_before(s);
            let out_ch = if s == 1 {
                c.stage_channels[0]
            } else {
                c.stage_channels[s - 2]
            };
            out.push((format!("backbone.dec{s}.fuse"), [out_ch, in_ch, 3, 3]));
            for j in 0..c.convs_per_stage {
                out.push((format!("backbone.dec{s}.conv{j}"), [out_ch, out_ch, 3, 3]));
            }
        }
        out.push((
            "backbone.head".into(),
            [c.num_classes, c.stage_channels[0], 1, 1],
        ));
        out
    }

    /// Random backbone weights (He-uniform convolutions, zero biases), all
    /// marked trainable and rounded to `f32`. Depends only on `seed` and the
    /// backbone shape.
    pub fn init_backbone(&self, seed: u64) -> ParamSet {
        let mut rng = SplitMix64::derive(seed, 0xB0);
        let mut params = ParamSet::new();
        for (prefix, shape) in self.backbone_layout() {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = if prefix.ends_with("head") {
                (1.0 / fan_in).sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            let (wn, bn) = conv_names(&prefix);
            params.insert(
                wn,
                Tensor::from_fn(&shape, |_| rng.uniform(-bound, bound)).with_requires_grad(true),
            );
            params.insert(bn, Tensor::zeros(&[shape[0]]).with_requires_grad(true));
        }
        params.snap_to_f32();
        params
    }

    /// Fresh adapters for every configured stage. Stage `k` draws from its
    /// own stream so adding a site never perturbs another.
    pub fn init_adapters(&self, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        for &s in &self.cfg.adapter_stages {
            let mut rng = SplitMix64::derive(seed, 0xAD00 + s as u64);
            let ch = self.cfg.stage_channels[s - 1];
            AdapterParams::init(ch, self.cfg.reduction, &mut rng)
                .insert_into(&mut params, &adapter_prefix(s));
        }
        params.snap_to_f32();
        params
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut p = self.init_backbone(seed);
        p.extend_from(&self.init_adapters(seed));
        p
    }

    /// Records the forward pass for `image: [B, C_in, H, W]`, returning
    /// `[B, classes, H, W]` logits.
    pub fn forward_on(&self, tape: &mut Tape, image: Var, bound: &Bound) -> Result<Var> {
        let c = &self.cfg;
        let [_, cin, h, w] = tape.value(image).dims4()?;
        if (h, w) != c.input_size || cin != c.in_channels {
            return Err(Error::Shape(format!(
                "model expects {}x{}x{}, got {cin}x{h}x{w}",
                c.in_channels, c.input_size.0, c.input_size.1
            )));
        }
        let conv =
            |tape: &mut Tape, x: Var, prefix: &str, stride: usize, pad: usize| -> Result<Var> {
                let (wn, bn) = conv_names(prefix);
                let y = tape.conv2d(x, bound.var(&wn)?, Some(bound.var(&bn)?), stride, pad, 1)?;
                Ok(y)
            };
        let mut skips = vec![image];
        let mut x = image;
        for s in 1..=STAGES {
            let y = conv(tape, x, &format!("backbone.enc{s}.down"), 2, 1)?;
            x = tape.gelu(y);
            for j in 0..c.convs_per_stage {
                let y = conv(tape, x, &format!("backbone.enc{s}.conv{j}"), 1, 1)?;
                x = tape.gelu(y);
            }
            if let Some(masks) = self.masks.get(&s) {
                let vars = AdapterVars::from_bound(bound, &adapter_prefix(s))?;
                let nhwc = tape.to_nhwc(x)?;
                let trace = adapter::forward_on(tape, nhwc, &vars, masks)?;
                x = tape.to_nchw(trace.output)?;
            }
            skips.push(x);
        }
        for s in (1..=STAGES).rev() {
            let up = tape.upsample2x(x)?;
            let cat = tape.concat_channels(up, skips[s - 1])?;
            let y = conv(tape, cat, &format!("backbone.dec{s}.fuse"), 1, 1)?;
            x = tape.gelu(y);
            for j in 0..c.convs_per_stage {
                let y = conv(tape, x, &format!("backbone.dec{s}.conv{j}"), 1, 1)?;
                x = tape.gelu(y);
            }
        }
        conv(tape, x, "backbone.head", 1, 0)
    }

    /// Value-only forward pass.
    pub fn logits(&self, params: &ParamSet, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(images.clone());
        let y = self.forward_on(&mut tape, x, &bound)?;
        Ok(tape.value(y).clone())
    }

    /// Per-pixel argmax class (first index wins ties), `[B, H, W]` flattened.
    pub fn predict(&self, params: &ParamSet, images: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_channels(&self.logits(params, images)?))
    }
}

/// Argmax over the channel axis of `[B, K, H, W]`; ties go to the lower index.
pub fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let s = t.shape();
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for j in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * plane + j] > d[(bi * k + best) * plane + j] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Marks every non-adapter buffer non-trainable and every adapter buffer
/// trainable. Idempotent.
pub fn freeze_backbone(params: &mut ParamSet) {
    params.set_trainable_prefix(BACKBONE_PREFIX, false);
    params.set_trainable_prefix(ADAPTER_PREFIX, true);
}

/// Stacks images into `[B, C, H, W]` and labels into a flat index map.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut labels = Vec::with_capacity(samples.len() * first.label.data.len());
    for s in samples {
        s.image.expect_shape(&shape)?;
        data.extend_from_slice(s.image.data());
        labels.extend(s.label.indices());
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(&shape);
    Ok((Tensor::new(&full, data)?, labels))
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Photometric/flip augmentation of every pretraining batch (the strong
    /// recipe's flip, jitter and noise; cutout is never applied here).
    pub augment: Option<AugmentConfig>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Mean cross-entropy over the training set before any update.
    pub initial_loss: f64,
    /// Mean cross-entropy over the training set after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean pixel cross-entropy of `params` over `samples`.
pub fn dataset_loss(
    model: &Model,
    params: &ParamSet,
    samples: &[Sample],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = stack(&refs)?;
        let logits = model.logits(params, &x)?;
        total += crate::numerics::cross_entropy(&logits, &y, None)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Supervised training of the whole backbone (no adapters) from a random
/// initialisation. The returned buffers are frozen.
pub fn pretrain_backbone(
    cfg: &BackboneConfig,
    samples: &[Sample],
    opts: &PretrainOptions,
) -> Result<(ParamSet, PretrainReport)> {
    if samples.is_empty() {
        return Err(Error::Training(
            "pretraining needs at least one labeled scene".into(),
        ));
    }
    let model = Model::new(cfg.without_adapters())?;
    let mut params = model.init_backbone(opts.seed);
    let mut adam = Adam::new(opts.lr);
    let mut rng = SplitMix64::derive(opts.seed, 0x5EED);
    let initial_loss = dataset_loss(&model, &params, samples, opts.batch)?;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(opts.batch.max(1)) {
            let batch: Vec<Sample> = match &opts.augment {
                Some(aug) => chunk
                    .iter()
                    .map(|&i| augmented(&samples[i], rng.next_u64(), aug))
                    .collect::<Result<_>>()?,
                None => chunk.iter().map(|&i| samples[i].clone()).collect(),
            };
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, y) = stack(&refs)?;
            supervised_step(&model, &mut params, &mut adam, &x, y)?;
        }
        epoch_losses.push(dataset_loss(&model, &params, samples, opts.batch)?);
    }
    params.set_trainable_prefix("", false);
    Ok((
        params,
        PretrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

fn augmented(s: &Sample, seed: u64, aug: &AugmentConfig) -> Result<Sample> {
    let aug = AugmentConfig {
        cutout: false,
        ..aug.clone()
    };
    let label = if flips(seed, &aug) {
        s.label.flipped()
    } else {
        s.label.clone()
    };
    Ok(Sample {
        image: strong_augment(&s.image, seed, &aug)?,
        label,
        labeled: true,
    })
}

/// One Adam step on the plain cross-entropy of a labeled batch.
pub fn supervised_step(
    model: &Model,
    params: &mut ParamSet,
    adam: &mut Adam,
    images: &Tensor,
    labels: Vec<usize>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(images.clone());
    let logits = model.forward_on(&mut tape, x, &bound)?;
    let loss = tape.cross_entropy(logits, std::sync::Arc::new(labels), None)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    params.collect_grads(&bound, &mut grads)?;
    adam.step(params);
    params.snap_to_f32();
    Ok(value)
}
