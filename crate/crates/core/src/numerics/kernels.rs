//! Slice-level forward and backward kernels. Shapes are validated by the
//! callers in `ops` and `tape`; these functions assume consistent inputs.

use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel * self.kernel
    }

    /// Output positions `o` along one axis with `o * stride + tap - pad` inside `0..extent`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(s)
        } else {
            0
        };
        let hi_excl = if extent + self.pad > tap {
            ((extent + self.pad - tap - 1) / s + 1).min(out_extent)
        } else {
            0
        };
        let lo = lo.min(out_extent);
        (lo, hi_excl.max(lo))
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane_out = ho * wo;
    let plane_in = g.height * g.width;
    let k = g.kernel;
    let mut out = vec![0.0; g.batch * g.out_channels * plane_out];
    par::for_each_chunk(&mut out, plane_out, |idx, o| {
        let (b, oc) = (idx / g.out_channels, idx % g.out_channels);
        if let Some(bias) = bias {
            o.fill(bias[oc]);
        }
        let group = oc / g.out_per_group();
        for icg in 0..g.in_per_group() {
            let ic = group * g.in_per_group() + icg;
            let xp = &x[(b * g.in_channels + ic) * plane_in..][..plane_in];
            let wk = &w[(oc * g.in_per_group() + icg) * k * k..][..k * k];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.height, ho);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.width, wo);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut o[oy * wo..(oy + 1) * wo];
                        let xrow = &xp[iy * g.width..(iy + 1) * g.width];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (ov, xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input(go: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane_out = ho * wo;
    let plane_in = g.height * g.width;
    let k = g.kernel;
    let mut gx = vec![0.0; g.batch * g.in_channels * plane_in];
    par::for_each_chunk(&mut gx, plane_in, |idx, gxp| {
        let (b, ic) = (idx / g.in_channels, idx % g.in_channels);
        let group = ic / g.in_per_group();
        let icg = ic % g.in_per_group();
        for ocg in 0..g.out_per_group() {
            let oc = group * g.out_per_group() + ocg;
            let gop = &go[(b * g.out_channels + oc) * plane_out..][..plane_out];
            let wk = &w[(oc * g.in_per_group() + icg) * k * k..][..k * k];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.height, ho);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.width, wo);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gop[oy * wo..(oy + 1) * wo];
                        let xrow = &mut gxp[iy * g.width..(iy + 1) * g.width];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (xv, gv) in xrow[ix0..].iter_mut().zip(&grow[ox0..ox1]) {
                                *xv += wv * gv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                xrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradients of the weight (and bias, when `with_bias`) of a convolution.
pub fn conv2d_backward_params(
    go: &[f64],
    x: &[f64],
    g: &ConvGeometry,
    with_bias: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane_out = ho * wo;
    let plane_in = g.height * g.width;
    let k = g.kernel;
    let per_oc = g.in_per_group() * k * k;
    let mut gw = vec![0.0; g.out_channels * per_oc];
    par::for_each_chunk(&mut gw, per_oc, |oc, gwc| {
        let group = oc / g.out_per_group();
        for b in 0..g.batch {
            let gop = &go[(b * g.out_channels + oc) * plane_out..][..plane_out];
            for icg in 0..g.in_per_group() {
                let ic = group * g.in_per_group() + icg;
                let xp = &x[(b * g.in_channels + ic) * plane_in..][..plane_in];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, g.height, ho);
                    for kx in 0..k {
                        let (ox0, ox1) = g.valid_range(kx, g.width, wo);
                        if ox0 == ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gop[oy * wo..(oy + 1) * wo];
                            let xrow = &xp[iy * g.width..(iy + 1) * g.width];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                acc += grow[ox0..ox1]
                                    .iter()
                                    .zip(&xrow[ix0..])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        gwc[(icg * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    let gb = with_bias.then(|| {
        (0..g.out_channels)
            .map(|oc| {
                (0..g.batch)
                    .map(|b| {
                        go[(b * g.out_channels + oc) * plane_out..][..plane_out]
                            .iter()
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    });
    (gw, gb)
}

/// `y = x W + b` over rows of length `n_in`; `W` is `[n_in, n_out]`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let rows = x.len() / n_in;
    let mut y = vec![0.0; rows * n_out];
    for (xr, yr) in x.chunks(n_in).zip(y.chunks_mut(n_out)) {
        yr.copy_from_slice(b);
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yv, wv) in yr.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward(
    gy: &[f64],
    x: &[f64],
    w: &[f64],
    n_in: usize,
    n_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    for (gxr, gyr) in gx.chunks_mut(n_in).zip(gy.chunks(n_out)) {
        for (i, gv) in gxr.iter_mut().enumerate() {
            *gv = w[i * n_out..(i + 1) * n_out]
                .iter()
                .zip(gyr)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut gw = vec![0.0; n_in * n_out];
    for (xr, gyr) in x.chunks(n_in).zip(gy.chunks(n_out)) {
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (gwv, gv) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(gyr) {
                *gwv += xv * gv;
            }
        }
    }
    let mut gb = vec![0.0; n_out];
    for gyr in gy.chunks(n_out) {
        for (a, b) in gb.iter_mut().zip(gyr) {
            *a += b;
        }
    }
    (gx, gw, gb)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable softmax over consecutive rows of length `k`.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(k).zip(y.chunks_mut(k)) {
        let m = xr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            *yv = (xv - m).exp();
            z += *yv;
        }
        yr.iter_mut().for_each(|v| *v /= z);
    }
    y
}

pub fn softmax_rows_backward(gy: &[f64], y: &[f64], k: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for ((gxr, gyr), yr) in gx.chunks_mut(k).zip(gy.chunks(k)).zip(y.chunks(k)) {
        let dot: f64 = gyr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for ((g, &gv), &yv) in gxr.iter_mut().zip(gyr).zip(yr) {
            *g = yv * (gv - dot);
        }
    }
    gx
}

/// Softmax over the channel axis of `[B, K, H, W]` logits, same layout out.
pub fn softmax_channels(logits: &[f64], batch: usize, k: usize, plane: usize) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    for b in 0..batch {
        let base = b * k * plane;
        for j in 0..plane {
            let m = (0..k).fold(f64::NEG_INFINITY, |a, c| {
                a.max(logits[base + c * plane + j])
            });
            let mut z = 0.0;
            for c in 0..k {
                let e = (logits[base + c * plane + j] - m).exp();
                p[base + c * plane + j] = e;
                z += e;
            }
            for c in 0..k {
                p[base + c * plane + j] /= z;
            }
        }
    }
    p
}

/// Per-pixel `-log softmax(logits)[target]` for `[B, K, H, W]` logits.
pub fn pixel_nll(
    logits: &[f64],
    targets: &[usize],
    batch: usize,
    k: usize,
    plane: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * plane);
    for b in 0..batch {
        let base = b * k * plane;
        for j in 0..plane {
            let m = (0..k).fold(f64::NEG_INFINITY, |a, c| {
                a.max(logits[base + c * plane + j])
            });
            let z: f64 = (0..k)
                .map(|c| (logits[base + c * plane + j] - m).exp())
                .sum();
            let t = targets[b * plane + j];
            out.push(m + z.ln() - logits[base + t * plane + j]);
        }
    }
    out
}

pub fn upsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![0.0; planes * h2 * w2];
    for (xp, yp) in x.chunks(h * w).zip(y.chunks_mut(h2 * w2)) {
        for oy in 0..h2 {
            for ox in 0..w2 {
                yp[oy * w2 + ox] = xp[(oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward(gy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut gx = vec![0.0; planes * h * w];
    for (gxp, gyp) in gx.chunks_mut(h * w).zip(gy.chunks(h2 * w2)) {
        for oy in 0..h2 {
            for ox in 0..w2 {
                gxp[(oy / 2) * w + ox / 2] += gyp[oy * w2 + ox];
            }
        }
    }
    gx
}

/// `[B, C, H, W]` to `[B, H, W, C]`.
pub fn nchw_to_nhwc(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..plane {
                y[(bi * plane + p) * c + ci] = x[(bi * c + ci) * plane + p];
            }
        }
    }
    y
}

/// `[B, H, W, C]` to `[B, C, H, W]`.
pub fn nhwc_to_nchw(x: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let plane = h * w;
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for p in 0..plane {
            for ci in 0..c {
                y[(bi * c + ci) * plane + p] = x[(bi * plane + p) * c + ci];
            }
        }
    }
    y
}

/// Channel concatenation of `[B, C1, P]` and `[B, C2, P]` (`P` = pixels per plane).
pub fn concat_channels(
    a: &[f64],
    b: &[f64],
    batch: usize,
    c1: usize,
    c2: usize,
    plane: usize,
) -> Vec<f64> {
    let mut y = Vec::with_capacity(a.len() + b.len());
    for bi in 0..batch {
        y.extend_from_slice(&a[bi * c1 * plane..(bi + 1) * c1 * plane]);
        y.extend_from_slice(&b[bi * c2 * plane..(bi + 1) * c2 * plane]);
    }
    y
}

pub fn split_channels(
    g: &[f64],
    batch: usize,
    c1: usize,
    c2: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = Vec::with_capacity(batch * c1 * plane);
    let mut gb = Vec::with_capacity(batch * c2 * plane);
    for chunk in g.chunks((c1 + c2) * plane) {
        ga.extend_from_slice(&chunk[..c1 * plane]);
        gb.extend_from_slice(&chunk[c1 * plane..]);
    }
    (ga, gb)
}
