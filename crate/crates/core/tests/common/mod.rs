//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use freqweaver::numerics::Tensor;
use freqweaver::rng::SplitMix64;

pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Textbook 2D DFT of every `[H, W]` plane: four nested loops, angle
/// evaluated directly from the definition.
pub fn naive_dft2(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let planes = s[0] * s[1];
    let mut re = vec![0.0; x.numel()];
    let mut im = vec![0.0; x.numel()];
    for p in 0..planes {
        let xp = &x.data()[p * h * w..(p + 1) * h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for z in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * z) as f64 / w as f64);
                        sr += xp[y * w + z] * ang.cos();
                        si += xp[y * w + z] * ang.sin();
                    }
                }
                re[p * h * w + u * w + v] = sr;
                im[p * h * w + u * w + v] = si;
            }
        }
    }
    (re, im)
}

/// Direct sliding-window grouped convolution with zero padding.
/// `w` is `[C_out, C_in / groups, k, k]`.
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cig, k) = (ws[0], ws[1], ws[2]);
    let cog = cout / groups;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for oc in 0..cout {
            let g = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                    for icg in 0..cig {
                        let ic = g * cig + icg;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((bi * cin + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cig + icg) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * cout + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out).unwrap()
}

/// `[B, C, H, W]` -> `[B, H, W, C]` by index arithmetic.
pub fn to_nhwc(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for z in 0..w {
                    out[((bi * h + y) * w + z) * c + ci] =
                        x.data()[((bi * c + ci) * h + y) * w + z];
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest relative gap `|a - n| / max(|a|, |n|, 1e-8)` between `analytic`
/// and central differences of `f` with step `h`.
pub fn central_difference_error(
    f: impl Fn(&[Tensor]) -> f64,
    tensors: &[Tensor],
    analytic: &[Vec<f64>],
    h: f64,
) -> f64 {
    let mut probe = tensors.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for (ei, &a) in grad.iter().enumerate() {
            let orig = tensors[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + h;
            let up = f(&probe);
            probe[pi].data_mut()[ei] = orig - h;
            let down = f(&probe);
            probe[pi].data_mut()[ei] = orig;
            let n = (up - down) / (2.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
        }
    }
    worst
}

/// A confusion matrix tallied by hand, with its expected scores.
pub struct HandMatrix {
    pub name: &'static str,
    pub rows: Vec<Vec<u64>>,
    pub iou: Vec<f64>,
    pub dice: Vec<f64>,
    pub oa: f64,
    pub kappa: f64,
    pub users: Vec<f64>,
    pub producers: Vec<f64>,
}

pub fn hand_matrices() -> Vec<HandMatrix> {
    vec![
        // Class 0: |P & G| = 2, |P| = 4, |G| = 3.
        HandMatrix {
            name: "overlap probe",
            rows: vec![vec![2, 1], vec![2, 5]],
            iou: vec![0.4, 5.0 / 8.0],
            dice: vec![4.0 / 7.0, 10.0 / 13.0],
            oa: 0.7,
            // p_e = (3 * 4 + 7 * 6) / 100
            kappa: (0.7 - 0.54) / 0.46,
            users: vec![0.5, 5.0 / 6.0],
            producers: vec![2.0 / 3.0, 5.0 / 7.0],
        },
        HandMatrix {
            name: "uniform",
            rows: vec![vec![4; 3]; 3],
            iou: vec![4.0 / 20.0; 3],
            dice: vec![8.0 / 24.0; 3],
            oa: 1.0 / 3.0,
            kappa: 0.0,
            users: vec![1.0 / 3.0; 3],
            producers: vec![1.0 / 3.0; 3],
        },
        HandMatrix {
            name: "perfect",
            rows: vec![vec![5, 0], vec![0, 7]],
            iou: vec![1.0, 1.0],
            dice: vec![1.0, 1.0],
            oa: 1.0,
            kappa: 1.0,
            users: vec![1.0, 1.0],
            producers: vec![1.0, 1.0],
        },
        HandMatrix {
            name: "disjoint",
            rows: vec![vec![0, 3], vec![4, 0]],
            iou: vec![0.0, 0.0],
            dice: vec![0.0, 0.0],
            oa: 0.0,
            // p_e = (3 * 4 + 4 * 3) / 49
            kappa: -24.0 / 25.0,
            users: vec![0.0, 0.0],
            producers: vec![0.0, 0.0],
        },
        HandMatrix {
            name: "three classes",
            rows: vec![vec![10, 2, 0], vec![3, 8, 1], vec![0, 1, 5]],
            iou: vec![10.0 / 15.0, 8.0 / 15.0, 5.0 / 7.0],
            dice: vec![20.0 / 25.0, 16.0 / 23.0, 10.0 / 12.0],
            oa: 23.0 / 30.0,
            // p_e = (12 * 13 + 12 * 11 + 6 * 6) / 900 = 0.36
            kappa: (23.0 / 30.0 - 0.36) / 0.64,
            users: vec![10.0 / 13.0, 8.0 / 11.0, 5.0 / 6.0],
            producers: vec![10.0 / 12.0, 8.0 / 12.0, 5.0 / 6.0],
        },
        HandMatrix {
            name: "absent middle class",
            rows: vec![vec![4, 0, 0], vec![0, 0, 0], vec![1, 0, 5]],
            iou: vec![0.8, 0.0, 5.0 / 6.0],
            dice: vec![8.0 / 9.0, 0.0, 10.0 / 11.0],
            oa: 0.9,
            // p_e = (4 * 5 + 0 + 6 * 5) / 100
            kappa: (0.9 - 0.5) / 0.5,
            users: vec![0.8, 0.0, 1.0],
            producers: vec![1.0, 0.0, 5.0 / 6.0],
        },
    ]
}
