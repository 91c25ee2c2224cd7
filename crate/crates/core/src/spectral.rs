//! Low/high frequency split of feature maps by radial masks on the centred
//! spectrum.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{dft2, fftshift, idft2, ifftshift, Tensor};

/// Complementary binary masks on the centred (shifted) spectrum.
///
/// `low[i] = 1` where the distance from `(H / 2, W / 2)` is strictly below
/// the cutoff; `high = 1 - low`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMaskPair {
    height: usize,
    width: usize,
    cutoff: f64,
    low: Vec<f64>,
    high: Vec<f64>,
}

impl RadialMaskPair {
    pub fn new(height: usize, width: usize, cutoff: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if !(cutoff > 0.0) || !cutoff.is_finite() {
            return Err(Error::Config(format!(
                "cutoff must be positive, got {cutoff}"
            )));
        }
        let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
        let mut low = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                low.push(if r < cutoff { 1.0 } else { 0.0 });
            }
        }
        let high = low.iter().map(|m| 1.0 - m).collect();
        Ok(Self {
            height,
            width,
            cutoff,
            low,
            high,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Low-pass mask in centred layout.
    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn low_count(&self) -> usize {
        self.low.iter().filter(|&&m| m == 1.0).count()
    }

    /// The low mask re-indexed for an unshifted spectrum (DC at `(0, 0)`).
    pub fn low_unshifted(&self) -> Vec<f64> {
        self.unshift(&self.low)
    }

    pub fn high_unshifted(&self) -> Vec<f64> {
        self.unshift(&self.high)
    }

    fn unshift(&self, mask: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = mask[((y + h / 2) % h) * w + (x + w / 2) % w];
            }
        }
        out
    }

    /// Whether the low mask is symmetric under frequency negation.
    pub fn is_centrosymmetric(&self) -> bool {
        let m = self.low_unshifted();
        let (h, w) = (self.height, self.width);
        (0..h).all(|y| (0..w).all(|x| m[y * w + x] == m[((h - y) % h) * w + (w - x) % w]))
    }
}

/// Default cutoff for an `h x w` map: a quarter of the shorter side.
pub fn default_cutoff(h: usize, w: usize) -> f64 {
    h.min(w) as f64 / 4.0
}

/// Band-limited reconstructions of one feature map.
#[derive(Debug, Clone)]
pub struct SpectralPair {
    pub low: Tensor,
    pub high: Tensor,
    pub masks: RadialMaskPair,
    /// Largest imaginary magnitude discarded by either inverse transform.
    pub max_imag_residue: f64,
    /// `sum |X_f|^2` restricted to each band (unnormalised spectrum).
    pub low_energy: f64,
    pub high_energy: f64,
}

impl SpectralPair {
    /// Fraction of spectral energy in the low band (1 for an all-zero input).
    pub fn low_fraction(&self) -> f64 {
        let total = self.low_energy + self.high_energy;
        if total == 0.0 {
            1.0
        } else {
            self.low_energy / total
        }
    }
}

/// Splits `x: [B, C, H, W]` into low/high frequency components with cutoff
/// `cutoff`: shift the spectrum, mask, unshift, invert.
pub fn decompose(x: &Tensor, cutoff: f64) -> Result<SpectralPair> {
    let [_, _, h, w] = x.dims4()?;
    if !x.is_finite() {
        return Err(Error::Numeric("decompose input is not finite".into()));
    }
    let masks = RadialMaskPair::new(h, w, cutoff)?;
    let centred = fftshift(&dft2(x)?)?;
    let low_spec = centred.apply_mask(masks.low())?;
    let high_spec = centred.apply_mask(masks.high())?;
    let (low_energy, high_energy) = (low_spec.energy(), high_spec.energy());
    let low = idft2(&ifftshift(&low_spec)?)?;
    let high = idft2(&ifftshift(&high_spec)?)?;
    Ok(SpectralPair {
        low: low.real,
        high: high.real,
        masks,
        max_imag_residue: low.max_imag_residue.max(high.max_imag_residue),
        low_energy,
        high_energy,
    })
}

/// Unshifted low/high masks ready for [`crate::numerics::Tape::band`].
#[derive(Debug, Clone)]
pub struct BandMasks {
    pub low: Arc<Vec<f64>>,
    pub high: Arc<Vec<f64>>,
}

impl From<&RadialMaskPair> for BandMasks {
    fn from(m: &RadialMaskPair) -> Self {
        Self {
            low: Arc::new(m.low_unshifted()),
            high: Arc::new(m.high_unshifted()),
        }
    }
}
