//! Synthetic land-cover scenes, labeled/unlabeled/test splits and the
//! on-disk data directory.

mod formats;

use std::fs;
use std::path::Path;

pub use formats::{
    decode_labels, decode_tensor, encode_labels, encode_tensor, load_labels, load_tensor,
    save_labels, save_tensor, FORMAT_VERSION, LABEL_MAGIC, TENSOR_MAGIC,
};
pub(crate) use formats::{put_f32s, Reader};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par;
use crate::rng::SplitMix64;

pub const CLASS_NAMES: [&str; 9] = [
    "Building",
    "Road",
    "Parking lot",
    "Tree Canopy",
    "Grass/Shrub",
    "Agriculture",
    "Water",
    "Barren",
    "Other",
];

/// Default pixel share per class (Agriculture kept rare on purpose).
pub const DEFAULT_SHARES: [f64; 9] = [0.15, 0.14, 0.10, 0.18, 0.16, 0.01, 0.10, 0.06, 0.10];

pub fn class_name(c: usize, num_classes: usize) -> String {
    if num_classes == CLASS_NAMES.len() {
        CLASS_NAMES[c].to_string()
    } else {
        format!("class{c}")
    }
}

/// `"Parking lot"` -> `"parking_lot"`, `"Grass/Shrub"` -> `"grass_shrub"`.
pub fn class_slug(c: usize, num_classes: usize) -> String {
    class_name(c, num_classes)
        .to_lowercase()
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' })
        .collect()
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().map(|&c| c as usize)
    }

    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`, exactly representable as `f32`.
    pub image: Tensor,
    pub label: LabelMap,
    pub labeled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionShape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStyle {
    pub color: [f64; 3],
    /// Sinusoidal texture frequency in cycles per pixel.
    pub texture_freq: f64,
    pub texture_amp: f64,
    pub shape: RegionShape,
    /// Width/height ratio of rectangular regions.
    pub aspect: f64,
}

/// Which appearance model a scene is rendered with. Pretraining uses
/// `Source`; adaptation experiments run on `Target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shares: Vec<f64>,
    pub styles: Vec<ClassStyle>,
    /// Inclusive range of overlaid regions per scene.
    pub regions: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

// Land-cover palette: colour, texture frequency (structures high, regions low), shape, aspect.
const SOURCE_STYLES: [([f64; 3], f64, RegionShape, f64); 9] = [
    ([0.62, 0.58, 0.60], 0.30, RegionShape::Rect, 1.0),
    ([0.35, 0.35, 0.38], 0.40, RegionShape::Rect, 5.0),
    ([0.48, 0.47, 0.45], 0.22, RegionShape::Rect, 1.6),
    ([0.18, 0.40, 0.16], 0.08, RegionShape::Ellipse, 1.0),
    ([0.42, 0.60, 0.28], 0.04, RegionShape::Ellipse, 1.0),
    ([0.64, 0.60, 0.30], 0.06, RegionShape::Rect, 1.3),
    ([0.14, 0.26, 0.52], 0.02, RegionShape::Ellipse, 1.0),
    ([0.66, 0.52, 0.38], 0.05, RegionShape::Ellipse, 1.0),
    ([0.50, 0.30, 0.42], 0.35, RegionShape::Rect, 2.0),
];

fn source_style(c: usize) -> ClassStyle {
    if let Some(&(color, freq, shape, aspect)) = SOURCE_STYLES.get(c) {
        return ClassStyle {
            color,
            texture_freq: freq,
            texture_amp: 0.06,
            shape,
            aspect,
        };
    }
    // Extra classes beyond the land-cover palette get a deterministic hue.
    let t = c as f64 * 0.618_033_988_75;
    let hue = t.fract() * std::f64::consts::TAU;
    ClassStyle {
        color: [
            0.5 + 0.3 * hue.cos(),
            0.5 + 0.3 * (hue + 2.094).cos(),
            0.5 + 0.3 * (hue + 4.189).cos(),
        ],
        texture_freq: 0.05 + 0.3 * (t * 7.0).fract(),
        texture_amp: 0.06,
        shape: if c % 2 == 0 {
            RegionShape::Rect
        } else {
            RegionShape::Ellipse
        },
        aspect: 1.0,
    }
}

/// The target appearance: a global colour cast and contrast change plus
/// higher texture frequencies and stronger texture.
fn target_style(c: usize) -> ClassStyle {
    let s = source_style(c);
    let cast = [0.10, 0.02, -0.08];
    let mut color = [0.0; 3];
    for k in 0..3 {
        color[k] = (0.5 + 0.75 * (s.color[k] - 0.5) + cast[k]).clamp(0.0, 1.0);
    }
    ClassStyle {
        color,
        texture_freq: (s.texture_freq * 1.25).min(0.5),
        texture_amp: 0.09,
        ..s
    }
}

impl SceneSpec {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        domain: Domain,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=255, got {num_classes}"
            )));
        }
        let shares = if num_classes == DEFAULT_SHARES.len() {
            DEFAULT_SHARES.to_vec()
        } else {
            vec![1.0 / num_classes as f64; num_classes]
        };
        let styles = (0..num_classes)
            .map(|c| match domain {
                Domain::Source => source_style(c),
                Domain::Target => target_style(c),
            })
            .collect();
        Ok(Self {
            height,
            width,
            num_classes,
            shares,
            styles,
            regions: (6, 14),
            noise_sigma: 0.02,
            seed,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene size must be positive".into()));
        }
        if self.shares.len() != self.num_classes || self.styles.len() != self.num_classes {
            return Err(Error::Config("class profile length mismatch".into()));
        }
        let total: f64 = self.shares.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.shares.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config(format!(
                "class shares must be nonnegative and sum to 1, got {total}"
            )));
        }
        if self.regions.0 > self.regions.1 {
            return Err(Error::Config("region range is empty".into()));
        }
        Ok(())
    }
}

struct Region {
    class: usize,
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    shape: RegionShape,
    angle: f64,
    phase: f64,
}

impl Region {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.half_h;
        let dx = (x - self.cx) / self.half_w;
        match self.shape {
            RegionShape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            RegionShape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

fn render(spec: &SceneSpec, rng: &mut SplitMix64) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;
    let draw_region = |rng: &mut SplitMix64, background: bool| {
        let class = rng.categorical(&spec.shares);
        let style = &spec.styles[class];
        let (half_h, half_w) = if background {
            (f64::INFINITY, f64::INFINITY)
        } else {
            // Area is drawn independently of class so that shares follow the profile.
            let area = rng.uniform(0.01, 0.09) * side * side;
            let aspect = if rng.coin(0.5) {
                style.aspect
            } else {
                1.0 / style.aspect
            };
            let (hw, hh) = match style.shape {
                RegionShape::Rect => ((area * aspect).sqrt() / 2.0, (area / aspect).sqrt() / 2.0),
                RegionShape::Ellipse => {
                    let r = (area / std::f64::consts::PI).sqrt();
                    (r * aspect.sqrt(), r / aspect.sqrt())
                }
            };
            (hh, hw)
        };
        Region {
            class,
            cy: rng.uniform(0.0, h as f64),
            cx: rng.uniform(0.0, w as f64),
            half_h,
            half_w,
            shape: style.shape,
            angle: rng.uniform(0.0, std::f64::consts::PI),
            phase: rng.uniform(0.0, std::f64::consts::TAU),
        }
    };
    let mut regions = vec![draw_region(rng, true)];
    let count = spec.regions.0 + rng.below(spec.regions.1 - spec.regions.0 + 1);
    for _ in 0..count {
        regions.push(draw_region(rng, false));
    }

    let mut owner = vec![0usize; h * w];
    for (ri, region) in regions.iter().enumerate().skip(1) {
        for y in 0..h {
            for x in 0..w {
                if region.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    owner[y * w + x] = ri;
                }
            }
        }
    }

    let mut image = vec![0.0; 3 * h * w];
    let mut label = vec![0u8; h * w];
    for p in 0..h * w {
        let region = &regions[owner[p]];
        let style = &spec.styles[region.class];
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let along = x * region.angle.cos() + y * region.angle.sin();
        let texture = style.texture_amp
            * (std::f64::consts::TAU * style.texture_freq * along + region.phase).sin();
        for c in 0..3 {
            let v = style.color[c] + texture + spec.noise_sigma * rng.normal();
            image[c * h * w + p] = (v.clamp(0.0, 1.0) as f32) as f64;
        }
        label[p] = region.class as u8;
    }
    Sample {
        image: Tensor::new(&[3, h, w], image).expect("consistent scene buffer"),
        label: LabelMap {
            height: h,
            width: w,
            data: label,
        },
        labeled: true,
    }
}

/// Renders `n` scenes. Scene `i` depends only on `(spec, i)`.
pub fn generate(spec: &SceneSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    Ok(par::map_indices(n, |i| {
        let mut rng = SplitMix64::derive(spec.seed, i as u64);
        render(spec, &mut rng)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Share of all scenes held out for testing (5 of 60).
pub const DEFAULT_TEST_FRACTION: f64 = 5.0 / 60.0;

/// Shuffles deterministically, holds out `round(n * test_fraction)` scenes
/// for testing, and labels `round(train * labeled_fraction)` of the rest.
pub fn split(
    samples: Vec<Sample>,
    labeled_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction {labeled_fraction} not in (0, 1]"
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} not in [0, 1)"
        )));
    }
    let n = samples.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_train = n - n_test;
    let n_labeled = ((n_train as f64 * labeled_fraction).round() as usize).min(n_train);
    if n_labeled == 0 {
        return Err(Error::Data(format!("no labeled scenes from {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>, labeled: bool| -> Vec<Sample> {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| {
                let mut s = slots[i].take().expect("each index taken once");
                s.labeled = labeled;
                s
            })
            .collect()
    };
    let test = take(0..n_test, true);
    let labeled = take(n_test..n_test + n_labeled, true);
    let unlabeled = take(n_test + n_labeled..n, false);
    Ok(Split {
        labeled,
        unlabeled,
        test,
    })
}

pub const SPLIT_DIRS: [&str; 3] = ["train_labeled", "train_unlabeled", "test"];

/// Writes `dir/{train_labeled,train_unlabeled,test}/NNNN.{fwtn,fwlb}`.
/// Unlabeled scenes keep their label files for oracle evaluation only.
pub fn save_split(dir: &Path, split: &Split) -> Result<()> {
    for (name, set) in SPLIT_DIRS
        .iter()
        .zip([&split.labeled, &split.unlabeled, &split.test])
    {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        for (i, s) in set.iter().enumerate() {
            save_tensor(sub.join(format!("{i:04}.fwtn")), &s.image)?;
            save_labels(sub.join(format!("{i:04}.fwlb")), &s.label)?;
        }
    }
    Ok(())
}

fn load_set(dir: &Path, labeled: bool) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "missing data directory {}",
            dir.display()
        )));
    }
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".fwtn").map(str::to_string)
        })
        .collect();
    stems.sort();
    stems
        .into_iter()
        .map(|stem| {
            let image = load_tensor(dir.join(format!("{stem}.fwtn")))?;
            image.expect_rank(3)?;
            let label_path = dir.join(format!("{stem}.fwlb"));
            let label = if label_path.exists() {
                load_labels(label_path)?
            } else if labeled {
                return Err(Error::Data(format!(
                    "{stem} has no label file in {}",
                    dir.display()
                )));
            } else {
                LabelMap {
                    height: image.shape()[1],
                    width: image.shape()[2],
                    data: vec![0; image.shape()[1] * image.shape()[2]],
                }
            };
            if (label.height, label.width) != (image.shape()[1], image.shape()[2]) {
                return Err(Error::Data(format!(
                    "{stem}: label size does not match image"
                )));
            }
            Ok(Sample {
                image,
                label,
                labeled,
            })
        })
        .collect()
}

pub fn load_split(dir: &Path) -> Result<Split> {
    Ok(Split {
        labeled: load_set(&dir.join(SPLIT_DIRS[0]), true)?,
        unlabeled: load_set(&dir.join(SPLIT_DIRS[1]), false)?,
        test: load_set(&dir.join(SPLIT_DIRS[2]), true)?,
    })
}

/// Pixel count per class over a set of scenes.
pub fn class_histogram(samples: &[Sample], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for c in s.label.indices() {
            if c < num_classes {
                counts[c] += 1;
            }
        }
    }
    counts
}
