//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] owns every intermediate value. Operations append nodes in
//! execution order, so walking the node list backwards is a valid
//! topological order for gradient propagation.

use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::{fourier, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddScaled(Var, Var, f64),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    ToNhwc(Var),
    ToNchw(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Gelu(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    ScaleBySample {
        x: Var,
        r: Var,
        col: usize,
    },
    Band {
        x: Var,
        mask: Arc<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<usize>>,
        weights: Option<Arc<Vec<f64>>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    tracks: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the variable does not influence the loss through any
    /// tracked path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracks: bool) -> Var {
        self.nodes.push(Node { value, tracks, op });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    /// Records an input. Gradients are collected for it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let tracks = t.requires_grad();
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, tracks)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = t.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::Add(a, b), tracks))
    }

    /// `a + scale * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let value = self
            .value(a)
            .zip_with(self.value(b), |x, y| x + scale * y)?;
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::AddScaled(a, b, scale), tracks))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracks = self.tracks(x);
        self.push(value, Op::Sum(x), tracks)
    }

    /// Grouped 2D convolution with zero padding. `w` has shape
    /// `[C_out, C_in / groups, k, k]` (or `[C, k, k]` for depthwise).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let [batch, cin, h, wd] = self.value(x).dims4()?;
        let wshape = self.shape(w).to_vec();
        let k = *wshape
            .last()
            .ok_or_else(|| shape_err!("empty conv weight"))?;
        let geom = ConvGeometry {
            batch,
            in_channels: cin,
            out_channels: wshape[0],
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            groups,
        };
        validate_conv(&geom, &wshape, b.map(|b| self.shape(b)))?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(
            &[
                batch,
                geom.out_channels,
                geom.out_height(),
                geom.out_width(),
            ],
            out,
        )?;
        let tracks = self.tracks(x) || self.tracks(w) || b.is_some_and(|b| self.tracks(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, tracks))
    }

    /// Depthwise same-size convolution with a `[C, k, k]` kernel, `k` odd.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let kshape = self.shape(kernel).to_vec();
        if kshape.len() != 3 || kshape[1] != kshape[2] {
            return Err(shape_err!(
                "depthwise kernel must be [C, k, k], got {kshape:?}"
            ));
        }
        let k = kshape[1];
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size {k} is even")));
        }
        let c = self.value(x).dims4()?[1];
        if kshape[0] != c {
            return Err(shape_err!(
                "kernel has {} channels, input has {c}",
                kshape[0]
            ));
        }
        self.conv2d(x, kernel, None, 1, (k - 1) / 2, c)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let out = kernels::upsample2x(self.value(x).data(), b * c, h, w);
        let value = Tensor::new(&[b, c, 2 * h, 2 * w], out)?;
        let tracks = self.tracks(x);
        Ok(self.push(value, Op::Upsample2x(x), tracks))
    }

    /// Concatenates two `[B, C, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err!(
                "cannot concatenate {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = kernels::concat_channels(
            self.value(a).data(),
            self.value(b).data(),
            ba,
            ca,
            cb,
            ha * wa,
        );
        let value = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::Concat(a, b), tracks))
    }

    pub fn to_nhwc(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let out = kernels::nchw_to_nhwc(self.value(x).data(), b, c, h, w);
        let value = Tensor::new(&[b, h, w, c], out)?;
        let tracks = self.tracks(x);
        Ok(self.push(value, Op::ToNhwc(x), tracks))
    }

    pub fn to_nchw(&mut self, x: Var) -> Result<Var> {
        let [b, h, w, c] = self.value(x).dims4()?;
        let out = kernels::nhwc_to_nchw(self.value(x).data(), b, h, w, c);
        let value = Tensor::new(&[b, c, h, w], out)?;
        let tracks = self.tracks(x);
        Ok(self.push(value, Op::ToNchw(x), tracks))
    }

    /// Affine map along the last axis; `w` is `[C_in, C_out]`, `b` is `[C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let n_in = *xs
            .last()
            .ok_or_else(|| shape_err!("linear on empty shape"))?;
        if ws.len() != 2 || ws[0] != n_in {
            return Err(shape_err!("weight {ws:?} does not accept inputs {xs:?}"));
        }
        let n_out = ws[1];
        self.value(b).expect_shape(&[n_out])?;
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n_in,
            n_out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let value = Tensor::new(&shape, out)?;
        let tracks = self.tracks(x) || self.tracks(w) || self.tracks(b);
        Ok(self.push(value, Op::Linear { x, w, b }, tracks))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        let tracks = self.tracks(x);
        self.push(value, Op::Gelu(x), tracks)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let k = *self.shape(x).last().unwrap();
        let out = kernels::softmax_rows(self.value(x).data(), k);
        let value = Tensor::new(self.shape(x), out).expect("shape preserved");
        let tracks = self.tracks(x);
        self.push(value, Op::Softmax(x), tracks)
    }

    /// Mean over `H, W` of a `[B, H, W, C]` tensor, giving `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, h, w, c] = self.value(x).dims4()?;
        let data = self.value(x).data();
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for p in 0..h * w {
                let row = &data[(bi * h * w + p) * c..][..c];
                for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[b, c], out)?;
        let tracks = self.tracks(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), tracks))
    }

    /// `y[b, ...] = x[b, ...] * r[b, col]` for `r` of shape `[B, K]`.
    pub fn scale_by_sample(&mut self, x: Var, r: Var, col: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rs = self.shape(r).to_vec();
        if rs.len() != 2 || rs[0] != xs[0] || col >= rs[1] {
            return Err(shape_err!(
                "per-sample weights {rs:?} (column {col}) do not fit {xs:?}"
            ));
        }
        let per = self.value(x).numel() / xs[0];
        let k = rs[1];
        let r_data = self.value(r).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * r_data[(i / per) * k + col])
            .collect();
        let value = Tensor::new(&xs, out)?;
        let tracks = self.tracks(x) || self.tracks(r);
        Ok(self.push(value, Op::ScaleBySample { x, r, col }, tracks))
    }

    /// Spectral band selection `Re(idft2(dft2(x) * mask))` with an unshifted mask.
    pub fn band(&mut self, x: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        let value = fourier::band_filter(self.value(x), &mask)?;
        let tracks = self.tracks(x);
        Ok(self.push(value, Op::Band { x, mask }, tracks))
    }

    /// Mean over pixels of `weight * -log softmax(logits)[target]` for
    /// `[B, K, H, W]` logits and a `[B, H, W]` index map.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<Vec<usize>>,
        weights: Option<Arc<Vec<f64>>>,
    ) -> Result<Var> {
        let [b, k, h, w] = self.value(logits).dims4()?;
        let plane = h * w;
        check_targets(
            &targets,
            weights.as_deref().map(|v| v.as_slice()),
            b * plane,
            k,
        )?;
        let nll = kernels::pixel_nll(self.value(logits).data(), &targets, b, k, plane);
        let total: f64 = match &weights {
            Some(wt) => nll.iter().zip(wt.iter()).map(|(l, w)| l * w).sum(),
            None => nll.iter().sum(),
        };
        let value = Tensor::scalar(total / (b * plane) as f64);
        let tracks = self.tracks(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            },
            tracks,
        ))
    }

    /// Propagates d(loss)/d(node) back to every tracked node. `loss` must
    /// hold a single value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", lv.shape()));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracks {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, g.clone(), &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let tracks = |v: Var| self.nodes[v.0].tracks;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if tracks(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
                if tracks(a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::AddScaled(a, b, s) => {
                if tracks(b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| s * v).collect());
                }
                if tracks(a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Sum(x) => {
                if tracks(x) {
                    accumulate(&mut grads[x.0], vec![g[0]; self.value(x).numel()]);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if tracks(x) {
                    let gx = kernels::conv2d_backward_input(&g, self.value(w).data(), &geom);
                    accumulate(&mut grads[x.0], gx);
                }
                let want_b = b.is_some_and(tracks);
                if tracks(w) || want_b {
                    let (gw, gb) =
                        kernels::conv2d_backward_params(&g, self.value(x).data(), &geom, want_b);
                    if tracks(w) {
                        accumulate(&mut grads[w.0], gw);
                    }
                    if let (Some(b), Some(gb)) = (b, gb) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
            }
            Op::Upsample2x(x) => {
                let [b, c, h, w] = self.value(x).dims4()?;
                accumulate(
                    &mut grads[x.0],
                    kernels::upsample2x_backward(&g, b * c, h, w),
                );
            }
            Op::Concat(a, b) => {
                let [bs, ca, h, w] = self.value(a).dims4()?;
                let cb = self.value(b).dims4()?[1];
                let (ga, gb) = kernels::split_channels(&g, bs, ca, cb, h * w);
                if tracks(a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if tracks(b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::ToNhwc(x) => {
                let [b, c, h, w] = self.value(x).dims4()?;
                accumulate(&mut grads[x.0], kernels::nhwc_to_nchw(&g, b, h, w, c));
            }
            Op::ToNchw(x) => {
                let [b, h, w, c] = self.value(x).dims4()?;
                accumulate(&mut grads[x.0], kernels::nchw_to_nhwc(&g, b, c, h, w));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(w);
                let (n_in, n_out) = (ws[0], ws[1]);
                let (gx, gw, gb) = kernels::linear_backward(
                    &g,
                    self.value(x).data(),
                    self.value(w).data(),
                    n_in,
                    n_out,
                );
                if tracks(x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if tracks(w) {
                    accumulate(&mut grads[w.0], gw);
                }
                if tracks(b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Gelu(x) => {
                let gx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&xv, gv)| gv * kernels::gelu_grad(xv))
                    .collect();
                accumulate(&mut grads[x.0], gx);
            }
            Op::Softmax(x) => {
                let k = *out.shape().last().unwrap();
                accumulate(
                    &mut grads[x.0],
                    kernels::softmax_rows_backward(&g, out.data(), k),
                );
            }
            Op::GlobalAvgPool(x) => {
                let [b, h, w, c] = self.value(x).dims4()?;
                let inv = 1.0 / (h * w) as f64;
                let mut gx = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for p in 0..h * w {
                        let row = &mut gx[(bi * h * w + p) * c..][..c];
                        for (r, gv) in row.iter_mut().zip(&g[bi * c..(bi + 1) * c]) {
                            *r = gv * inv;
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ScaleBySample { x, r, col } => {
                let xv = self.value(x).data();
                let rv = self.value(r).data();
                let k = self.shape(r)[1];
                let per = xv.len() / self.shape(x)[0];
                if tracks(x) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * rv[(i / per) * k + col])
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                }
                if tracks(r) {
                    let mut gr = vec![0.0; rv.len()];
                    for (bi, (gc, xc)) in g.chunks(per).zip(xv.chunks(per)).enumerate() {
                        gr[bi * k + col] = gc.iter().zip(xc).map(|(a, b)| a * b).sum();
                    }
                    accumulate(&mut grads[r.0], gr);
                }
            }
            Op::Band { x, ref mask } => {
                let gt = Tensor::new(self.shape(x), g)?;
                let gx = fourier::band_filter(&gt, mask)?;
                accumulate(&mut grads[x.0], gx.into_data());
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                ref weights,
            } => {
                let [b, k, h, w] = self.value(logits).dims4()?;
                let plane = h * w;
                let mut gl = kernels::softmax_channels(self.value(logits).data(), b, k, plane);
                let scale = g[0] / (b * plane) as f64;
                for bi in 0..b {
                    for j in 0..plane {
                        let pix = bi * plane + j;
                        let wgt = weights.as_ref().map_or(1.0, |w| w[pix]) * scale;
                        gl[(bi * k + targets[pix]) * plane + j] -= 1.0;
                        for c in 0..k {
                            gl[(bi * k + c) * plane + j] *= wgt;
                        }
                    }
                }
                accumulate(&mut grads[logits.0], gl);
            }
        }
        Ok(())
    }
}

fn validate_conv(geom: &ConvGeometry, wshape: &[usize], bshape: Option<&[usize]>) -> Result<()> {
    let g = geom;
    if g.groups == 0 || g.in_channels % g.groups != 0 || g.out_channels % g.groups != 0 {
        return Err(shape_err!(
            "{} groups do not divide channels {} -> {}",
            g.groups,
            g.in_channels,
            g.out_channels
        ));
    }
    if g.stride == 0 || g.height + 2 * g.pad < g.kernel || g.width + 2 * g.pad < g.kernel {
        return Err(shape_err!(
            "kernel {} does not fit {}x{} input",
            g.kernel,
            g.height,
            g.width
        ));
    }
    if wshape.iter().product::<usize>() != g.weight_len() {
        return Err(shape_err!(
            "weight {wshape:?} does not match {} -> {} channels, kernel {}",
            g.in_channels,
            g.out_channels,
            g.kernel
        ));
    }
    if let Some(bs) = bshape {
        if bs != [g.out_channels] {
            return Err(shape_err!(
                "bias {bs:?} does not match {} outputs",
                g.out_channels
            ));
        }
    }
    Ok(())
}

pub(crate) fn check_targets(
    targets: &[usize],
    weights: Option<&[f64]>,
    pixels: usize,
    classes: usize,
) -> Result<()> {
    if targets.len() != pixels {
        return Err(shape_err!("{} targets for {pixels} pixels", targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Data(format!(
            "target class {t} outside 0..{classes}"
        )));
    }
    if let Some(w) = weights {
        if w.len() != pixels {
            return Err(shape_err!("{} weights for {pixels} pixels", w.len()));
        }
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Data("pixel weights must be nonnegative".into()));
        }
    }
    Ok(())
}
