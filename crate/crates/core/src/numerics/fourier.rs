//! Direct 2D discrete Fourier transform over the last two axes of a
//! `[B, C, H, W]` tensor.
//!
//! Convention: the forward transform is unnormalised, the inverse carries the
//! `1 / (H * W)` factor. Both are computed separably (rows, then columns) with
//! exact twiddle tables; no FFT factorisation is used.

use std::f64::consts::TAU;

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::par;

/// Complex counterpart of [`Tensor`] with split real/imaginary buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if re.len() != numel || im.len() != numel {
            return Err(shape_err!(
                "complex buffers ({}, {}) do not match shape {shape:?}",
                re.len(),
                im.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            re: vec![0.0; numel],
            im: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(a, b)| a * a + b * b)
            .sum()
    }

    /// Multiplies every `[H, W]` slice element-wise by a real `mask`.
    pub fn apply_mask(&self, mask: &[f64]) -> Result<Self> {
        let plane = self.plane_len()?;
        if mask.len() != plane {
            return Err(shape_err!(
                "mask of {} entries does not fit {:?}",
                mask.len(),
                self.shape
            ));
        }
        let mut out = self.clone();
        for (i, (r, m)) in out.re.iter_mut().zip(out.im.iter_mut()).enumerate() {
            let k = mask[i % plane];
            *r *= k;
            *m *= k;
        }
        Ok(out)
    }

    fn plane_len(&self) -> Result<usize> {
        if self.shape.len() != 4 {
            return Err(shape_err!("expected rank 4, got {:?}", self.shape));
        }
        Ok(self.shape[2] * self.shape[3])
    }
}

/// Result of an inverse transform: the real part and the largest imaginary
/// magnitude that was discarded.
#[derive(Debug, Clone)]
pub struct InverseResult {
    pub real: Tensor,
    pub max_imag_residue: f64,
}

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let (sin, cos) = (0..n)
            .map(|k| (TAU * k as f64 / n as f64).sin_cos())
            .unzip();
        Self { cos, sin }
    }
}

/// One-dimensional DFT of `len` points read with `stride`, written back in place.
/// `sign` is -1 for the forward transform and +1 for the inverse.
fn dft_line(
    re: &mut [f64],
    im: &mut [f64],
    offset: usize,
    stride: usize,
    len: usize,
    tw: &Twiddles,
    sign: f64,
    scratch: &mut (Vec<f64>, Vec<f64>),
) {
    let (sr, si) = scratch;
    sr.clear();
    si.clear();
    for k in 0..len {
        let mut acc_r = 0.0;
        let mut acc_i = 0.0;
        for n in 0..len {
            let idx = (k * n) % len;
            let (c, s) = (tw.cos[idx], sign * tw.sin[idx]);
            let xr = re[offset + n * stride];
            let xi = im[offset + n * stride];
            acc_r += xr * c - xi * s;
            acc_i += xr * s + xi * c;
        }
        sr.push(acc_r);
        si.push(acc_i);
    }
    for k in 0..len {
        re[offset + k * stride] = sr[k];
        im[offset + k * stride] = si[k];
    }
}

fn transform_planes(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: f64) {
    let plane = h * w;
    let tw_w = Twiddles::new(w);
    let tw_h = Twiddles::new(h);
    // Interleave re/im per plane so a single chunked pass can own both.
    let mut packed: Vec<f64> = Vec::with_capacity(2 * re.len());
    for (r, i) in re.chunks(plane).zip(im.chunks(plane)) {
        packed.extend_from_slice(r);
        packed.extend_from_slice(i);
    }
    par::for_each_chunk(&mut packed, 2 * plane, |_, chunk| {
        let (pr, pi) = chunk.split_at_mut(plane);
        let mut scratch = (Vec::with_capacity(h.max(w)), Vec::with_capacity(h.max(w)));
        for y in 0..h {
            dft_line(pr, pi, y * w, 1, w, &tw_w, sign, &mut scratch);
        }
        for x in 0..w {
            dft_line(pr, pi, x, w, h, &tw_h, sign, &mut scratch);
        }
    });
    for ((r, i), p) in re
        .chunks_mut(plane)
        .zip(im.chunks_mut(plane))
        .zip(packed.chunks(2 * plane))
    {
        r.copy_from_slice(&p[..plane]);
        i.copy_from_slice(&p[plane..]);
    }
}

/// Unnormalised forward 2D DFT of each `[H, W]` slice.
pub fn dft2(x: &Tensor) -> Result<ComplexTensor> {
    let [_, _, h, w] = x.dims4()?;
    let mut re = x.data().to_vec();
    let mut im = vec![0.0; re.len()];
    transform_planes(&mut re, &mut im, h, w, -1.0);
    ComplexTensor::new(x.shape(), re, im)
}

/// Full complex inverse DFT with `1 / (H * W)` normalisation.
pub fn idft2_complex(xf: &ComplexTensor) -> Result<ComplexTensor> {
    if xf.shape.len() != 4 {
        return Err(shape_err!("expected rank 4, got {:?}", xf.shape));
    }
    let (h, w) = (xf.shape[2], xf.shape[3]);
    let mut re = xf.re.clone();
    let mut im = xf.im.clone();
    transform_planes(&mut re, &mut im, h, w, 1.0);
    let norm = 1.0 / (h * w) as f64;
    re.iter_mut().for_each(|v| *v *= norm);
    im.iter_mut().for_each(|v| *v *= norm);
    ComplexTensor::new(&xf.shape, re, im)
}

/// Real part of the normalised inverse DFT, with the discarded imaginary residue.
pub fn idft2(xf: &ComplexTensor) -> Result<InverseResult> {
    let full = idft2_complex(xf)?;
    let max_imag_residue = full.im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(InverseResult {
        real: Tensor::new(&full.shape, full.re)?,
        max_imag_residue,
    })
}

fn roll_planes(xf: &ComplexTensor, forward: bool) -> Result<ComplexTensor> {
    let plane = xf.plane_len()?;
    let (h, w) = (xf.shape[2], xf.shape[3]);
    let mut out = ComplexTensor::zeros(&xf.shape);
    for base in (0..xf.re.len()).step_by(plane) {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if forward {
                    ((y + h / 2) % h, (x + w / 2) % w)
                } else {
                    ((y + h - h / 2) % h, (x + w - w / 2) % w)
                };
                out.re[base + sy * w + sx] = xf.re[base + y * w + x];
                out.im[base + sy * w + sx] = xf.im[base + y * w + x];
            }
        }
    }
    Ok(out)
}

/// Moves the zero frequency of each slice to `(H / 2, W / 2)`.
pub fn fftshift(xf: &ComplexTensor) -> Result<ComplexTensor> {
    roll_planes(xf, true)
}

/// Inverse of [`fftshift`].
pub fn ifftshift(xf: &ComplexTensor) -> Result<ComplexTensor> {
    roll_planes(xf, false)
}

/// Applies a real spectral mask (unshifted layout, one `[H, W]` plane) to
/// every slice: `Re(idft2(dft2(x) * mask))`.
///
/// For any real mask this map is self-adjoint on real inputs, so the same
/// function also propagates gradients.
pub fn band_filter(x: &Tensor, mask: &[f64]) -> Result<Tensor> {
    let spectrum = dft2(x)?.apply_mask(mask)?;
    Ok(idft2(&spectrum)?.real)
}
