//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails the
//! target if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use common::{central_difference_error, hand_matrices, naive_dft2, random_tensor};
use freqweaver::adapter::{self, AdapterParams, AdapterVars, DEFAULT_REDUCTION};
use freqweaver::backbone::{freeze_backbone, BackboneConfig, Model, ADAPTER_PREFIX};
use freqweaver::checkpoint::{self, decode, encode};
use freqweaver::config::RunConfig;
use freqweaver::dataset::{
    decode_labels, decode_tensor, encode_labels, encode_tensor, generate, Domain, LabelMap, Sample,
    SceneSpec,
};
use freqweaver::experiment::{
    ablate, generate_split, pretrain, train_run, write_data_dir, ParamReport,
};
use freqweaver::metrics::{iou_dice, oa_kappa, ConfusionMatrix};
use freqweaver::numerics::{check_gradients, dft2, idft2, Tape, Tensor, Var};
use freqweaver::optim::Adam;
use freqweaver::params::{Bound, ParamSet};
use freqweaver::rng::SplitMix64;
use freqweaver::semisup::{
    ema_update, entropy_weights, loss_and_grads, train_step, AugmentConfig, TeacherStudentState,
};
use freqweaver::spectral::{decompose, BandMasks, RadialMaskPair};
use freqweaver::{Error, FormatError};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn stages(s: &[usize]) -> BTreeSet<usize> {
    s.iter().copied().collect()
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------- 1

fn spectral() -> Outcome {
    let mut r = SplitMix64::new(0x5EC7);
    let (mut dft_err, mut inv_err, mut add_err, mut parseval_err) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let shape = [
            1 + r.below(2),
            1 + r.below(4),
            2 + r.below(31),
            2 + r.below(31),
        ];
        let x = random_tensor(&shape, &mut r, -2.0, 2.0);
        let xf = ok(dft2(&x))?;
        let (re, im) = naive_dft2(&x);
        for i in 0..re.len() {
            dft_err = dft_err
                .max((xf.re()[i] - re[i]).abs())
                .max((xf.im()[i] - im[i]).abs());
        }
        inv_err = inv_err.max(ok(idft2(&xf))?.real.max_abs_diff(&x));
        let rho = r.uniform(0.0, shape[2].min(shape[3]) as f64 / 2.0);
        let pair = ok(decompose(&x, rho))?;
        add_err = add_err.max(ok(pair.low.add(&pair.high))?.max_abs_diff(&x));
        // Band energies against the spatial-domain energy (H W sum x^2).
        let spatial = x.sum_squares() * (shape[2] * shape[3]) as f64;
        parseval_err =
            parseval_err.max((pair.low_energy + pair.high_energy - spatial).abs() / spatial);
    }
    let detail = format!("dft {dft_err:.1e}, inverse {inv_err:.1e}, additivity {add_err:.1e}, parseval {parseval_err:.1e}");
    ensure!(
        dft_err < 1e-6 && inv_err < 1e-5 && add_err < 1e-5 && parseval_err < 1e-4,
        "{detail}"
    );
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn identity_at_init() -> Outcome {
    let base = BackboneConfig::default();
    let plain = ok(Model::new(BackboneConfig {
        adapter_stages: BTreeSet::new(),
        ..base.clone()
    }))?;
    let mut r = SplitMix64::new(0x1DE7);
    let inputs: Vec<Tensor> = (0..20)
        .map(|_| {
            random_tensor(
                &[1, base.in_channels, base.input_size.0, base.input_size.1],
                &mut r,
                0.0,
                1.0,
            )
        })
        .collect();
    let backbone = plain.init_backbone(7);
    let reference: Vec<Tensor> = inputs
        .iter()
        .map(|x| plain.logits(&backbone, x))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    let mut worst = 0.0f64;
    let mut configs = 0;
    for bits in 1u32..16 {
        let set: BTreeSet<usize> = (1..=4).filter(|s| bits & (1 << (s - 1)) != 0).collect();
        let model = ok(Model::new(BackboneConfig {
            adapter_stages: set.clone(),
            ..base.clone()
        }))?;
        let mut params = backbone.clone();
        params.extend_from(&model.init_adapters(bits as u64));
        for (x, want) in inputs.iter().zip(&reference) {
            worst = worst.max(ok(model.logits(&params, x))?.max_abs_diff(want));
        }
        configs += 1;
    }
    // The module on its own, at each stage width.
    for (i, &c) in base.stage_channels.iter().enumerate() {
        let p = AdapterParams::init(c, DEFAULT_REDUCTION, &mut SplitMix64::new(i as u64));
        let side = base.input_size.0 >> (i + 1);
        for _ in 0..20 {
            let x = random_tensor(&[1, side, side, c], &mut r, -3.0, 3.0);
            worst = worst.max(ok(adapter::forward(&x, &p, side as f64 / 4.0))?.max_abs_diff(&x));
        }
    }
    let detail = format!(
        "{configs} stage sets x 20 inputs, 4 widths x 20 inputs, max deviation {worst:.1e}"
    );
    ensure!(worst < 1e-9, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn reduce(t: &mut Tape, y: Var) -> Var {
    let g = t.gelu(y);
    t.sum(g)
}

fn randomized_adapter(c: usize, seed: u64) -> AdapterParams {
    let mut r = SplitMix64::new(seed);
    let mut p = AdapterParams::init(c, 2, &mut r);
    for t in [
        &mut p.lf_kernel,
        &mut p.hf_kernel,
        &mut p.spatial_mlp.w1,
        &mut p.spatial_mlp.b1,
        &mut p.spatial_mlp.w2,
        &mut p.spatial_mlp.b2,
        &mut p.router_mlp.w1,
        &mut p.router_mlp.b1,
        &mut p.router_mlp.w2,
        &mut p.router_mlp.b2,
    ] {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = r.uniform(-0.3, 0.3));
    }
    p
}

type Objective<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> freqweaver::Result<Var> + 'a>;

/// Same comparison with a tenfold smaller step, reported next to any case
/// over tolerance so truncation can be told apart from a wrong gradient.
fn refined_error(
    f: &dyn Fn(&mut Tape, &[Var]) -> freqweaver::Result<Var>,
    params: &[Tensor],
) -> Result<f64, String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let out = ok(f(&mut tape, &vars))?;
    let grads = ok(tape.backward(out))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();
    let value = |ts: &[Tensor]| {
        let mut t = Tape::new();
        let v: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &v).expect("objective evaluates");
        t.value(y).item()
    };
    Ok(central_difference_error(value, params, &analytic, 1e-4))
}

fn gradients() -> Outcome {
    let mut r = SplitMix64::new(0x6AD);
    let x = random_tensor(&[1, 4, 8, 8], &mut r, -1.0, 1.0);
    let y = random_tensor(&[1, 4, 8, 8], &mut r, -1.0, 1.0);
    let w = random_tensor(&[6, 2, 3, 3], &mut r, -0.5, 0.5);
    let b = random_tensor(&[6], &mut r, -0.5, 0.5);
    let dw = random_tensor(&[4, 5, 5], &mut r, -0.5, 0.5);
    let lin_w = random_tensor(&[4, 3], &mut r, -1.0, 1.0);
    let lin_b = random_tensor(&[3], &mut r, -1.0, 1.0);
    let routing = random_tensor(&[1, 3], &mut r, 0.1, 1.0);
    let masks = BandMasks::from(&ok(RadialMaskPair::new(8, 8, 2.0))?);
    let low = Arc::new(ok(RadialMaskPair::new(8, 8, 2.0))?.low_unshifted());
    let targets: Arc<Vec<usize>> = Arc::new((0..64).map(|i| (i * 7) % 4).collect());
    let weights: Arc<Vec<f64>> = Arc::new((0..64).map(|i| (i % 5) as f64 / 4.0).collect());
    let ad = randomized_adapter(4, 0x6AD);
    let x_nhwc = x
        .clone()
        .reshape(&[1, 8, 8, 4])
        .map_err(|e| e.to_string())?;
    let ad_tensors = vec![
        x_nhwc.clone(),
        ad.lf_kernel.clone(),
        ad.hf_kernel.clone(),
        ad.spatial_mlp.w1.clone(),
        ad.spatial_mlp.b1.clone(),
        ad.spatial_mlp.w2.clone(),
        ad.spatial_mlp.b2.clone(),
        ad.router_mlp.w1.clone(),
        ad.router_mlp.b1.clone(),
        ad.router_mlp.w2.clone(),
        ad.router_mlp.b2.clone(),
    ];
    let ad_vars = |v: &[Var]| AdapterVars {
        lf_kernel: v[1],
        hf_kernel: v[2],
        smlp: [v[3], v[4], v[5], v[6]],
        router: [v[7], v[8], v[9], v[10]],
    };

    let cases: Vec<(&str, Objective, Vec<Tensor>)> = vec![
        (
            "add",
            Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                Ok(reduce(t, s))
            }),
            vec![x.clone(), y.clone()],
        ),
        (
            "add_scaled",
            Box::new(|t, v| {
                let s = t.add_scaled(v[0], v[1], -0.7)?;
                Ok(reduce(t, s))
            }),
            vec![x.clone(), y.clone()],
        ),
        (
            "conv2d",
            Box::new(|t, v| {
                let s = t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 2)?;
                Ok(reduce(t, s))
            }),
            vec![x.clone(), w.clone(), b.clone()],
        ),
        (
            "depthwise",
            Box::new(|t, v| {
                let s = t.depthwise_conv2d(v[0], v[1])?;
                Ok(reduce(t, s))
            }),
            vec![x.clone(), dw.clone()],
        ),
        (
            "upsample2x",
            Box::new(|t, v| {
                let s = t.upsample2x(v[0])?;
                Ok(reduce(t, s))
            }),
            vec![x.clone()],
        ),
        (
            "concat",
            Box::new(|t, v| {
                let s = t.concat_channels(v[0], v[1])?;
                Ok(reduce(t, s))
            }),
            vec![x.clone(), y.clone()],
        ),
        (
            "layout",
            Box::new(|t, v| {
                let s = t.to_nhwc(v[0])?;
                let s = t.to_nchw(s)?;
                let wv = t.constant(w.clone());
                let s = t.conv2d(s, wv, None, 1, 1, 2)?;
                Ok(reduce(t, s))
            }),
            vec![x.clone()],
        ),
        (
            "linear",
            Box::new(|t, v| {
                let s = t.to_nhwc(v[0])?;
                let s = t.linear(s, v[1], v[2])?;
                Ok(reduce(t, s))
            }),
            vec![x.clone(), lin_w.clone(), lin_b.clone()],
        ),
        (
            "gelu",
            Box::new(|t, v| {
                let s = t.gelu(v[0]);
                let s = t.gelu(s);
                Ok(t.sum(s))
            }),
            vec![x.clone()],
        ),
        (
            "softmax",
            Box::new(|t, v| {
                let s = t.softmax(v[0]);
                Ok(reduce(t, s))
            }),
            vec![x.clone()],
        ),
        (
            "global_avg_pool",
            Box::new(|t, v| {
                let s = t.global_avg_pool(v[0])?;
                Ok(reduce(t, s))
            }),
            vec![x.clone()],
        ),
        (
            "scale_by_sample",
            Box::new(|t, v| {
                let s = t.scale_by_sample(v[0], v[1], 2)?;
                Ok(reduce(t, s))
            }),
            vec![x.clone(), routing.clone()],
        ),
        (
            "band",
            Box::new(|t, v| {
                let s = t.band(v[0], low.clone())?;
                Ok(reduce(t, s))
            }),
            vec![x.clone()],
        ),
        (
            "cross_entropy",
            Box::new(|t, v| t.cross_entropy(v[0], targets.clone(), Some(weights.clone()))),
            vec![x.clone()],
        ),
        (
            "adapter",
            Box::new(|t, v| {
                let trace = adapter::forward_on(t, v[0], &ad_vars(v), &masks)?;
                let logits = t.to_nchw(trace.output)?;
                t.cross_entropy(logits, targets.clone(), None)
            }),
            ad_tensors,
        ),
    ];
    let mut worst = (String::new(), 0.0f64);
    let mut lines = vec![];
    for (name, f, params) in cases {
        let err = ok(check_gradients(&f, &params))?;
        if err >= worst.1 {
            worst = (name.to_string(), err);
        }
        if err >= 1e-3 {
            lines.push(format!(
                "{name} {err:.2e} (h=1e-4: {:.1e})",
                refined_error(&f, &params)?
            ));
        }
    }

    // Backbone with adapters at every stage plus the loss. Four stride-2
    // stages need at least 16x16 input.
    let cfg = BackboneConfig {
        in_channels: 4,
        stage_channels: [3, 3, 4, 4],
        num_classes: 3,
        adapter_stages: stages(&[1, 2, 3, 4]),
        input_size: (16, 16),
        convs_per_stage: 1,
        reduction: 2,
        ..BackboneConfig::default()
    };
    let model = ok(Model::new(cfg))?;
    let mut params = model.init_params(5);
    let mut pr = SplitMix64::new(5);
    for (name, t) in params.iter_mut() {
        if name.starts_with(ADAPTER_PREFIX) {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = pr.uniform(-0.2, 0.2));
        }
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    tensors.push(random_tensor(
        &[1, 4, 16, 16],
        &mut SplitMix64::new(5),
        0.0,
        1.0,
    ));
    let full_targets: Arc<Vec<usize>> = Arc::new((0..256).map(|i| (i / 16 + i % 5) % 3).collect());
    let composed = |t: &mut Tape, v: &[Var]| {
        let bound: Bound = names.iter().cloned().zip(v.iter().copied()).collect();
        let logits = model.forward_on(t, v[names.len()], &bound)?;
        t.cross_entropy(logits, full_targets.clone(), None)
    };
    let full = ok(check_gradients(&composed, &tensors))?;
    if full >= 1e-3 {
        lines.push(format!(
            "full composition {full:.2e} (h=1e-4: {:.1e})",
            refined_error(&composed, &tensors)?
        ));
    }
    let detail = format!(
        "worst op {} {:.2e}, full composition {full:.2e}",
        worst.0, worst.1
    );
    ensure!(
        lines.is_empty(),
        "{detail}; over tolerance: {}",
        lines.join(", ")
    );
    Ok(detail)
}

// ---------------------------------------------------------------- 4

fn single(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(v));
    p
}

fn probs(k: usize, rows: &[Vec<f64>]) -> Tensor {
    let n = rows.len();
    let mut d = vec![0.0; k * n];
    for (j, row) in rows.iter().enumerate() {
        for c in 0..k {
            d[c * n + j] = row[c];
        }
    }
    Tensor::from_fn(&[1, k, 1, n], |i| d[i])
}

fn small_model() -> Result<Model, String> {
    ok(Model::new(BackboneConfig {
        stage_channels: [4, 6, 8, 8],
        num_classes: 4,
        adapter_stages: stages(&[3, 4]),
        input_size: (16, 16),
        convs_per_stage: 1,
        ..BackboneConfig::default()
    }))
}

fn mean_teacher() -> Outcome {
    // EMA: convexity and geometric approach.
    let mut r = SplitMix64::new(0xE4A);
    let mut ema_err = 0.0f64;
    for _ in 0..50 {
        let (t0, s, alpha) = (
            r.uniform(-5.0, 5.0),
            r.uniform(-5.0, 5.0),
            r.uniform(0.5, 0.999),
        );
        let mut t = single(t0);
        for k in 1..=20 {
            let prev = ok(t.get("w"))?.item();
            ok(ema_update(&mut t, &single(s), alpha))?;
            let now = ok(t.get("w"))?.item();
            ensure!(
                now >= prev.min(s) - 1e-12 && now <= prev.max(s) + 1e-12,
                "EMA left [{prev}, {s}]"
            );
            ema_err = ema_err.max((now - s - alpha.powi(k) * (t0 - s)).abs());
        }
    }
    ensure!(ema_err < 1e-9, "EMA geometric error {ema_err:.1e}");

    // Confidence weights.
    let w = ok(entropy_weights(&probs(
        3,
        &[vec![0.0, 1.0, 0.0], vec![0.7, 0.2, 0.1], vec![1.0 / 3.0; 3]],
    )))?;
    let (one_hot, probe, uniform) = (w.data()[0], w.data()[1], w.data()[2]);
    ensure!(one_hot == 1.0, "one-hot weight {one_hot}");
    ensure!((probe - 0.27015).abs() < 1e-4, "probe weight {probe}");
    ensure!(uniform.abs() < 1e-12, "uniform weight {uniform}");

    // lambda = 0 matches supervised-only gradients.
    let model = small_model()?;
    let data: Vec<Sample> = ok(generate(
        &ok(SceneSpec::new(16, 16, 4, Domain::Target, 4))?,
        6,
    ))?;
    let mut p = model.init_params(3);
    freeze_backbone(&mut p);
    let state = ok(TeacherStudentState::new(p.clone(), 0.99, 0.0))?;
    let aug = AugmentConfig::default();
    let (l, u): (Vec<&Sample>, Vec<&Sample>) =
        (data[..2].iter().collect(), data[2..4].iter().collect());
    let (_, g1) = ok(loss_and_grads(&model, &state, &l, &u, 9, &aug))?;
    let (_, g2) = ok(loss_and_grads(&model, &state, &l, &[], 9, &aug))?;
    let mut grad_diff = 0.0f64;
    for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
        match (a.grad(), b.grad()) {
            (Some(ga), Some(gb)) => {
                grad_diff = ga
                    .iter()
                    .zip(gb)
                    .map(|(x, y)| (x - y).abs())
                    .fold(grad_diff, f64::max);
            }
            (None, None) => {}
            _ => return Err("gradient presence differs at lambda 0".into()),
        }
    }
    ensure!(grad_diff < 1e-9, "lambda 0 gradient gap {grad_diff:.1e}");

    // Ten steps never touch the frozen backbone in student or teacher.
    let mut state = ok(TeacherStudentState::new(p.clone(), 0.99, 0.1))?;
    let mut adam = Adam::new(5e-3);
    for step in 0..10 {
        let l: Vec<&Sample> = data[(step % 3) * 2..(step % 3) * 2 + 2].iter().collect();
        let u: Vec<&Sample> = data[..2].iter().collect();
        ok(train_step(
            &model,
            &mut state,
            &mut adam,
            &l,
            &u,
            step as u64,
            &aug,
        ))?;
    }
    for set in [&state.student, &state.teacher] {
        for ((name, a), (_, b)) in p.iter().zip(set.iter()) {
            if !name.starts_with(ADAPTER_PREFIX) {
                ensure!(bits_equal(a, b), "{name} changed");
            }
        }
    }
    Ok(format!(
        "EMA {ema_err:.1e}, weights 1/{probe:.5}/{uniform:.1e}, lambda-0 gap {grad_diff:.1e}, backbone bit-identical after 10 steps"
    ))
}

// ---------------------------------------------------------------- 5

fn metrics() -> Outcome {
    let cases = hand_matrices();
    let mut worst = 0.0f64;
    for m in &cases {
        let cm = ok(ConfusionMatrix::from_rows(&m.rows))?;
        let s = ok(iou_dice(&cm))?;
        let a = ok(oa_kappa(&cm))?;
        for k in 0..m.iou.len() {
            for (got, want) in [
                (s.iou[k], m.iou[k]),
                (s.dice[k], m.dice[k]),
                (a.users[k], m.users[k]),
                (a.producers[k], m.producers[k]),
            ] {
                worst = worst.max((got - want).abs());
            }
        }
        worst = worst
            .max((a.oa - m.oa).abs())
            .max((a.kappa - m.kappa).abs());
    }
    ensure!(worst < 1e-12, "hand matrices off by {worst:.1e}");

    let mut r = SplitMix64::new(0xD1CE);
    let mut identity = 0.0f64;
    for _ in 0..100 {
        let k = 2 + r.below(8);
        let rows: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| r.below(50) as u64).collect())
            .collect();
        let s = ok(iou_dice(&ok(ConfusionMatrix::from_rows(&rows))?))?;
        for c in (0..k).filter(|&c| !s.absent[c]) {
            identity = identity.max((s.dice[c] - 2.0 * s.iou[c] / (1.0 + s.iou[c])).abs());
        }
    }
    let detail = format!("{} hand matrices (max error {worst:.1e}), Dice-IoU identity {identity:.1e} on 100 matrices", cases.len());
    ensure!(identity < 1e-9, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 6, 7

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation() -> Result<(Outcome, Outcome), String> {
    let cfg = RunConfig::default();
    let split = ok(generate_split(&cfg))?;
    let start = Instant::now();
    let table = ok(ablate(&cfg, &split, |line| println!("    {line}")))?;
    println!("{}", table.render());
    println!("    ablation took {:.0} s", start.elapsed().as_secs_f64());
    let row = |label: &str| {
        table
            .row(label)
            .map(|r| mean(&r.iou))
            .ok_or(format!("missing row {label}"))
    };
    let (base, fw, uats) = (row("baseline")?, row("fw")?, row("fw+uats")?);
    let d6 = format!("mean IoU baseline {base:.4}, fw {fw:.4}, fw+uats {uats:.4}");
    let c6 = if base <= fw && fw <= uats && uats - fw > 0.0 {
        Ok(d6)
    } else {
        Err(d6)
    };
    let (s4, s34) = (row("stages {4}")?, row("stages {3,4}")?);
    let d7 = format!(
        "mean IoU {{4}} {s4:.4}, {{3,4}} {s34:.4}; reported: {{2,3,4}} {:.4}, all {:.4}",
        row("stages {2,3,4}")?,
        row("stages {1,2,3,4}")?
    );
    let c7 = if s34 >= s4 { Ok(d7) } else { Err(d7) };
    Ok((c6, c7))
}

// ---------------------------------------------------------------- 8

fn accounting() -> Outcome {
    let cfg = RunConfig::default();
    let bc = cfg.backbone();
    let model = ok(Model::new(bc.clone()))?;
    let mut params = model.init_params(0);
    freeze_backbone(&mut params);
    let rep = ParamReport::of(&params);
    let enumerated_trainable: usize = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(_, t)| t.numel())
        .sum();
    let enumerated_total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    ensure!(
        rep.trainable == enumerated_trainable,
        "trainable {} vs {enumerated_trainable}",
        rep.trainable
    );
    ensure!(
        rep.total() == enumerated_total,
        "total {} vs {enumerated_total}",
        rep.total()
    );
    let formula: usize = bc
        .adapter_stages
        .iter()
        .map(|&s| adapter::param_count(bc.stage_channels[s - 1], bc.reduction))
        .sum();
    ensure!(
        formula == rep.trainable,
        "closed form {formula} vs {}",
        rep.trainable
    );
    let text = rep.render();
    ensure!(
        text.contains("5.96%") && text.contains("context"),
        "report does not label 5.96% as context"
    );
    let detail = format!("{} / {} = {:.4}", rep.trainable, rep.total(), rep.ratio());
    ensure!(rep.ratio() < 0.10, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn tiny_config() -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("data.height", "16"),
        ("data.width", "16"),
        ("data.scenes", "8"),
        ("data.classes", "4"),
        ("data.labeled_fraction", "0.5"),
        ("data.test_fraction", "0.25"),
        ("pretrain.scenes", "4"),
        ("pretrain.epochs", "1"),
        ("backbone.stage_channels", "4,4,8,8"),
        ("backbone.convs_per_stage", "1"),
        ("train.epochs", "2"),
        ("train.mode", "fw+uats"),
    ] {
        ok(cfg.set(k, v))?;
    }
    Ok(cfg)
}

fn dir_bytes(root: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in ok(std::fs::read_dir(&d))? {
            let p = ok(e)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p
                    .strip_prefix(root)
                    .map_err(|e| e.to_string())?
                    .display()
                    .to_string();
                out.push((rel, ok(std::fs::read(&p))?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let cfg = tiny_config()?;
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    ok(write_data_dir(a.path(), &cfg, &ok(generate_split(&cfg))?))?;
    ok(write_data_dir(b.path(), &cfg, &ok(generate_split(&cfg))?))?;
    let (fa, fb) = (dir_bytes(a.path())?, dir_bytes(b.path())?);
    ensure!(fa == fb, "data directories differ");

    let split = ok(generate_split(&cfg))?;
    let (bb, _) = ok(pretrain(&cfg, 1))?;
    let r1 = ok(train_run(&cfg, &bb, &split, 2))?;
    let r2 = ok(train_run(&cfg, &bb, &split, 2))?;
    ensure!(r1.log == r2.log, "logs differ");
    let bytes = ok(encode(&r1.checkpoint()))?;
    ensure!(bytes == ok(encode(&r2.checkpoint()))?, "checkpoints differ");

    let path = a.path().join("run.fwck");
    ok(checkpoint::save(&path, &r1.checkpoint()))?;
    let back = ok(checkpoint::load(&path))?;
    ensure!(
        back.step == r1.state.step
            && back.student.values_identical(&r1.state.student)
            && back.teacher.values_identical(&r1.state.teacher),
        "checkpoint roundtrip not bit-exact"
    );

    let t = Tensor::from_fn(&[2, 3, 4], |i| f64::from((i as f32).sin() * 7.5));
    ensure!(
        bits_equal(&ok(decode_tensor(&ok(encode_tensor(&t))?))?, &t),
        "tensor roundtrip"
    );
    let labels = LabelMap {
        height: 3,
        width: 5,
        data: (0..15).map(|i| (i % 9) as u8).collect(),
    };
    ensure!(
        ok(decode_labels(&ok(encode_labels(&labels))?))? == labels,
        "label roundtrip"
    );

    let tensor_bytes = ok(encode_tensor(&t))?;
    let label_bytes = ok(encode_labels(&labels))?;
    let mut corrupted = 0;
    for data in [&bytes, &tensor_bytes, &label_bytes] {
        let mut magic = data.clone();
        magic[0] ^= 0xFF;
        let mut version = data.clone();
        version[4] = version[4].wrapping_add(1);
        let cases: [(Vec<u8>, fn(&Error) -> bool); 4] = [
            (magic, |e| {
                matches!(e, Error::Format(FormatError::BadMagic { .. }))
            }),
            (version, |e| {
                matches!(e, Error::Format(FormatError::VersionMismatch { .. }))
            }),
            (data[..data.len() - 1].to_vec(), |e| {
                matches!(e, Error::Format(FormatError::Truncated { .. }))
            }),
            ([data.clone(), vec![0]].concat(), |e| {
                matches!(e, Error::Format(FormatError::Malformed(_)))
            }),
        ];
        for (bad, expected) in cases {
            let err = if data == &bytes {
                decode(&bad).err()
            } else if data == &tensor_bytes {
                decode_tensor(&bad).err()
            } else {
                decode_labels(&bad).err()
            };
            let err = err.ok_or("corrupted file accepted")?;
            ensure!(
                expected(&err) && err.exit_code() == 3,
                "unexpected error {err}"
            );
            corrupted += 1;
        }
    }
    Ok(format!(
        "{} data files, logs and checkpoints identical; roundtrips bit-exact; {corrupted} corruptions rejected with exit code 3",
        fa.len()
    ))
}

// ----------------------------------------------------------------

fn run(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
    report_line(n, title, &outcome, start.elapsed().as_secs_f64())
}

fn report_line(n: usize, title: &str, outcome: &Outcome, secs: f64) -> bool {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} {tag} {title} ({secs:.1} s): {detail}");
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let mut passed = vec![
        run(1, "spectral correctness", spectral),
        run(2, "adapter identity at init", identity_at_init),
        run(3, "gradient suite", gradients),
        run(4, "mean-teacher mechanics", mean_teacher),
        run(5, "metrics oracle", metrics),
    ];
    let start = Instant::now();
    let (c6, c7) = catch_unwind(ablation)
        .unwrap_or_else(|_| Err("panicked".into()))
        .unwrap_or_else(|e| (Err(e.clone()), Err(e)));
    let secs = start.elapsed().as_secs_f64();
    passed.push(report_line(6, "mode ablation ordering", &c6, secs));
    passed.push(report_line(7, "placement ablation", &c7, secs));
    passed.push(run(8, "parameter accounting", accounting));
    passed.push(run(9, "determinism and persistence", determinism));
    let failed: Vec<usize> = passed
        .iter()
        .enumerate()
        .filter(|(_, p)| !**p)
        .map(|(i, _)| i + 1)
        .collect();
    println!("acceptance: {}/9 criteria pass", 9 - failed.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
