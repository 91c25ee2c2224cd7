//! The frequency-split residual adapter.
//!
//! Given a feature map `X: [B, H, W, C]` the adapter computes three
//! modulations of it:
//!
//! * `F_lf`: 11x11 depthwise convolution of the low-frequency band,
//! * `F_hf`: 5x5 depthwise convolution of the high-frequency band,
//! * `F_s`: a position-wise bottleneck MLP of `X` itself,
//!
//! and mixes them back in with per-sample weights `[r_s, r_lf, r_hf]` from a
//! router over the globally pooled features:
//!
//! `Y = X + r_s * F_s + r_lf * F_lf + r_hf * F_hf`.
//!
//! Both kernels and the last MLP layer start at zero, so a fresh adapter is
//! an exact identity.

use crate::error::{shape_err, Result};
use crate::numerics::{mlp2_on, Mlp2Weights, Tape, Tensor, Var};
use crate::params::{Bound, ParamSet};
use crate::rng::SplitMix64;
use crate::spectral::{BandMasks, RadialMaskPair};

pub const LF_KERNEL: usize = 11;
pub const HF_KERNEL: usize = 5;
pub const DEFAULT_REDUCTION: usize = 4;
/// Router outputs, in mixing order `[spatial, low, high]`.
pub const BRANCHES: usize = 3;

fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Trainable buffers of one adapter site.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub lf_kernel: Tensor,
    pub hf_kernel: Tensor,
    pub spatial_mlp: Mlp2Weights,
    pub router_mlp: Mlp2Weights,
}

/// Suffixes under which an adapter's buffers are stored in a [`ParamSet`].
pub const PARAM_SUFFIXES: [&str; 10] = [
    "lf_kernel",
    "hf_kernel",
    "smlp.w1",
    "smlp.b1",
    "smlp.w2",
    "smlp.b2",
    "router.w1",
    "router.b1",
    "router.w2",
    "router.b2",
];

impl AdapterParams {
    /// Fresh parameters: zero kernels, zero second layers, first layers
    /// uniform in `[-1/sqrt(C), 1/sqrt(C)]`.
    pub fn init(channels: usize, reduction: usize, rng: &mut SplitMix64) -> Self {
        let hidden = hidden_width(channels, reduction);
        let bound = 1.0 / (channels as f64).sqrt();
        let mut first = |cols| Tensor::from_fn(&[channels, cols], |_| rng.uniform(-bound, bound));
        let smlp_w1 = first(hidden);
        let router_w1 = first(hidden);
        Self {
            lf_kernel: Tensor::zeros(&[channels, LF_KERNEL, LF_KERNEL]),
            hf_kernel: Tensor::zeros(&[channels, HF_KERNEL, HF_KERNEL]),
            spatial_mlp: Mlp2Weights {
                w1: smlp_w1,
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::zeros(&[hidden, channels]),
                b2: Tensor::zeros(&[channels]),
            },
            router_mlp: Mlp2Weights {
                w1: router_w1,
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::zeros(&[hidden, BRANCHES]),
                b2: Tensor::zeros(&[BRANCHES]),
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.lf_kernel.shape()[0]
    }

    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.lf_kernel,
            &self.hf_kernel,
            &self.spatial_mlp.w1,
            &self.spatial_mlp.b1,
            &self.spatial_mlp.w2,
            &self.spatial_mlp.b2,
            &self.router_mlp.w1,
            &self.router_mlp.b1,
            &self.router_mlp.w2,
            &self.router_mlp.b2,
        ]
    }

    /// Enumerated element count of every buffer.
    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Stores the buffers as `{prefix}.{suffix}` entries, marked trainable.
    pub fn insert_into(&self, params: &mut ParamSet, prefix: &str) {
        for (suffix, t) in PARAM_SUFFIXES.iter().zip(self.tensors()) {
            params.insert(
                format!("{prefix}.{suffix}"),
                t.clone().with_requires_grad(true),
            );
        }
    }

    pub fn from_params(params: &ParamSet, prefix: &str) -> Result<Self> {
        let get = |s: &str| params.get(&format!("{prefix}.{s}")).cloned();
        Ok(Self {
            lf_kernel: get("lf_kernel")?,
            hf_kernel: get("hf_kernel")?,
            spatial_mlp: Mlp2Weights {
                w1: get("smlp.w1")?,
                b1: get("smlp.b1")?,
                w2: get("smlp.w2")?,
                b2: get("smlp.b2")?,
            },
            router_mlp: Mlp2Weights {
                w1: get("router.w1")?,
                b1: get("router.b1")?,
                w2: get("router.w2")?,
                b2: get("router.b2")?,
            },
        })
    }

    /// Records the buffers on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        let [lf, hf, sw1, sb1, sw2, sb2, rw1, rb1, rw2, rb2] = self
            .tensors()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)));
        AdapterVars {
            lf_kernel: lf,
            hf_kernel: hf,
            smlp: [sw1, sb1, sw2, sb2],
            router: [rw1, rb1, rw2, rb2],
        }
    }
}

/// Closed-form parameter count of one adapter site with `channels` channels.
pub fn param_count(channels: usize, reduction: usize) -> usize {
    let c = channels;
    let h = hidden_width(channels, reduction);
    let kernels = (LF_KERNEL * LF_KERNEL + HF_KERNEL * HF_KERNEL) * c;
    let spatial = c * h + h + h * c + c;
    let router = c * h + h + h * BRANCHES + BRANCHES;
    kernels + spatial + router
}

/// Tape handles for one adapter site.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub lf_kernel: Var,
    pub hf_kernel: Var,
    pub smlp: [Var; 4],
    pub router: [Var; 4],
}

impl AdapterVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |s: &str| bound.var(&format!("{prefix}.{s}"));
        Ok(Self {
            lf_kernel: v("lf_kernel")?,
            hf_kernel: v("hf_kernel")?,
            smlp: [v("smlp.w1")?, v("smlp.b1")?, v("smlp.w2")?, v("smlp.b2")?],
            router: [
                v("router.w1")?,
                v("router.b1")?,
                v("router.w2")?,
                v("router.b2")?,
            ],
        })
    }
}

/// Intermediate values of one adapter application.
#[derive(Debug, Clone, Copy)]
pub struct AdapterTrace {
    pub output: Var,
    /// `[B, 3]` softmax weights `[r_s, r_lf, r_hf]`.
    pub routing: Var,
    pub spatial: Var,
    pub low: Var,
    pub high: Var,
}

/// Low-frequency branch: `[B, C, H, W]` band in, `[B, H, W, C]` out.
pub fn branch_lf_on(tape: &mut Tape, x_lf: Var, vars: &AdapterVars) -> Result<Var> {
    let y = tape.depthwise_conv2d(x_lf, vars.lf_kernel)?;
    tape.to_nhwc(y)
}

pub fn branch_hf_on(tape: &mut Tape, x_hf: Var, vars: &AdapterVars) -> Result<Var> {
    let y = tape.depthwise_conv2d(x_hf, vars.hf_kernel)?;
    tape.to_nhwc(y)
}

pub fn branch_spatial_on(tape: &mut Tape, x: Var, vars: &AdapterVars) -> Result<Var> {
    let [w1, b1, w2, b2] = vars.smlp;
    mlp2_on(tape, x, w1, b1, w2, b2)
}

/// `[B, H, W, C]` features to `[B, 3]` fusion weights.
pub fn route_on(tape: &mut Tape, x: Var, vars: &AdapterVars) -> Result<Var> {
    let g = tape.global_avg_pool(x)?;
    let [w1, b1, w2, b2] = vars.router;
    let logits = mlp2_on(tape, g, w1, b1, w2, b2)?;
    Ok(tape.softmax(logits))
}

/// Full adapter on `[B, H, W, C]` features.
pub fn forward_on(
    tape: &mut Tape,
    x: Var,
    vars: &AdapterVars,
    masks: &BandMasks,
) -> Result<AdapterTrace> {
    let [b, h, w, c] = tape.value(x).dims4()?;
    let plane = masks.low.len();
    if plane != h * w {
        return Err(shape_err!(
            "band masks cover {plane} positions, features are {h}x{w}"
        ));
    }
    let kc = tape.shape(vars.lf_kernel)[0];
    if kc != c {
        return Err(shape_err!(
            "adapter has {kc} channels, features have {c} (batch {b})"
        ));
    }
    let x_nchw = tape.to_nchw(x)?;
    let x_lf = tape.band(x_nchw, masks.low.clone())?;
    let x_hf = tape.band(x_nchw, masks.high.clone())?;
    let low = branch_lf_on(tape, x_lf, vars)?;
    let high = branch_hf_on(tape, x_hf, vars)?;
    let spatial = branch_spatial_on(tape, x, vars)?;
    let routing = route_on(tape, x, vars)?;
    let s = tape.scale_by_sample(spatial, routing, 0)?;
    let l = tape.scale_by_sample(low, routing, 1)?;
    let hh = tape.scale_by_sample(high, routing, 2)?;
    let y = tape.add(x, s)?;
    let y = tape.add(y, l)?;
    let output = tape.add(y, hh)?;
    Ok(AdapterTrace {
        output,
        routing,
        spatial,
        low,
        high,
    })
}

/// Per-sample fusion weights `[r_s, r_lf, r_hf]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub per_sample: Vec<[f64; BRANCHES]>,
}

impl FusionWeights {
    fn from_tensor(t: &Tensor) -> Self {
        Self {
            per_sample: t
                .data()
                .chunks(BRANCHES)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        }
    }
}

fn run<T>(
    f: impl FnOnce(&mut Tape, &AdapterVars) -> Result<T>,
    params: &AdapterParams,
) -> Result<(Tape, T)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = f(&mut tape, &vars)?;
    Ok((tape, out))
}

fn check_channels(params: &AdapterParams, c: usize) -> Result<()> {
    if params.channels() != c {
        return Err(shape_err!(
            "adapter has {} channels, input has {c}",
            params.channels()
        ));
    }
    Ok(())
}

/// Low-frequency branch on a `[B, C, H, W]` band, output `[B, H, W, C]`.
pub fn branch_lf(x_lf: &Tensor, params: &AdapterParams) -> Result<Tensor> {
    check_channels(params, x_lf.dims4()?[1])?;
    let (tape, y) = run(
        |t, v| {
            let x = t.constant(x_lf.clone());
            branch_lf_on(t, x, v)
        },
        params,
    )?;
    Ok(tape.value(y).clone())
}

pub fn branch_hf(x_hf: &Tensor, params: &AdapterParams) -> Result<Tensor> {
    check_channels(params, x_hf.dims4()?[1])?;
    let (tape, y) = run(
        |t, v| {
            let x = t.constant(x_hf.clone());
            branch_hf_on(t, x, v)
        },
        params,
    )?;
    Ok(tape.value(y).clone())
}

/// Spatial branch on `[B, H, W, C]` features.
pub fn branch_spatial(x: &Tensor, params: &AdapterParams) -> Result<Tensor> {
    check_channels(params, x.dims4()?[3])?;
    let (tape, y) = run(
        |t, v| {
            let x = t.constant(x.clone());
            branch_spatial_on(t, x, v)
        },
        params,
    )?;
    Ok(tape.value(y).clone())
}

pub fn route(x: &Tensor, params: &AdapterParams) -> Result<FusionWeights> {
    check_channels(params, x.dims4()?[3])?;
    let (tape, r) = run(
        |t, v| {
            let x = t.constant(x.clone());
            route_on(t, x, v)
        },
        params,
    )?;
    Ok(FusionWeights::from_tensor(tape.value(r)))
}

/// Applies the adapter to `[B, H, W, C]` features with spectral cutoff `cutoff`.
pub fn forward(x: &Tensor, params: &AdapterParams, cutoff: f64) -> Result<Tensor> {
    let [_, h, w, c] = x.dims4()?;
    check_channels(params, c)?;
    let masks = BandMasks::from(&RadialMaskPair::new(h, w, cutoff)?);
    let (tape, trace) = run(
        |t, v| {
            let xv = t.constant(x.clone());
            forward_on(t, xv, v, &masks)
        },
        params,
    )?;
    Ok(tape.value(trace.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_count_matches_buffers() {
        let mut rng = SplitMix64::new(0);
        for c in [1, 4, 8, 16, 32, 64] {
            let p = AdapterParams::init(c, DEFAULT_REDUCTION, &mut rng);
            assert_eq!(p.numel(), param_count(c, DEFAULT_REDUCTION), "C={c}");
        }
        // 8 channels, hidden 2: 968 + 200 + (16 + 2 + 16 + 8) + (16 + 2 + 6 + 3).
        assert_eq!(param_count(8, 4), 1237);
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = SplitMix64::new(5);
        let p = AdapterParams::init(4, DEFAULT_REDUCTION, &mut rng);
        let x = Tensor::from_fn(&[2, 8, 8, 4], |_| rng.normal());
        let y = forward(&x, &p, 2.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_router_is_uniform() {
        let mut rng = SplitMix64::new(6);
        let p = AdapterParams::init(8, DEFAULT_REDUCTION, &mut rng);
        let x = Tensor::from_fn(&[3, 4, 4, 8], |_| rng.normal());
        for r in route(&x, &p).unwrap().per_sample {
            for v in r {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = SplitMix64::new(7);
        let p = AdapterParams::init(4, DEFAULT_REDUCTION, &mut rng);
        assert!(forward(&Tensor::zeros(&[1, 4, 4, 3]), &p, 1.0).is_err());
        assert!(branch_lf(&Tensor::zeros(&[1, 3, 4, 4]), &p).is_err());
    }
}
