//! Deterministic paired-domain synthetic segmentation scenes.
//!
//! Every scene is a flat background (class 0) overlaid with a handful of
//! textured primitives. Geometry depends only on `(seed, index)`, so the
//! source and target renderings of one index share a label map and differ
//! only by the [`DomainShiftParams`] applied to the target rendering.
//!
//! Randomness is counter based: each sample owns a ChaCha stream keyed by
//! `(seed, index, stream)`, with no global RNG state.

pub mod io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, stream};

/// Pixel shares below this fraction mark a tail class.
pub const TAIL_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Domain::Source => stream::SCENE + 1,
            Domain::Target => stream::SCENE + 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Relative frequency with which primitives pick each class.
    pub class_weights: Vec<f64>,
    pub seed: u64,
}

impl SceneSpec {
    /// Default desk-scale scene: 64x64, 8 classes, classes 6 and 7 rare.
    pub fn desk(seed: u64) -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            classes: 8,
            min_shapes: 3,
            max_shapes: 8,
            class_weights: default_weights(8),
            seed,
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    /// Changes the class count, resetting weights to the default profile.
    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self.class_weights = default_weights(classes);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec(format!(
                "zero area {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::InvalidSpec(format!(
                "class count {} outside [2, 254]",
                self.classes
            )));
        }
        if self.class_weights.len() != self.classes {
            return Err(Error::InvalidSpec(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                self.classes
            )));
        }
        if self
            .class_weights
            .iter()
            .any(|&w| !(w > 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidSpec("class weights must be positive".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::InvalidSpec("min_shapes exceeds max_shapes".into()));
        }
        Ok(())
    }
}

/// Weight profile with the last quarter of the classes (at least one) rare.
fn default_weights(classes: usize) -> Vec<f64> {
    let n_tail = (classes / 4).max(1);
    (0..classes)
        .map(|c| if c + n_tail >= classes { 0.1 } else { 1.0 })
        .collect()
}

/// Rendering shift applied to target images.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShiftParams {
    pub color_matrix: [[f64; 3]; 3],
    pub color_bias: [f64; 3],
    pub gamma: f64,
    pub noise_std: f64,
    /// Multiplier on the class texture amplitude.
    pub texture_gain: f64,
}

impl DomainShiftParams {
    pub fn identity() -> Self {
        DomainShiftParams {
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            color_bias: [0.0; 3],
            gamma: 1.0,
            noise_std: 0.0,
            texture_gain: 1.0,
        }
    }

    /// Default shift: 20% channel mixing, gamma 1.3, noise 0.05.
    pub fn default_shift() -> Self {
        DomainShiftParams {
            color_matrix: [[0.8, 0.2, 0.0], [0.0, 0.8, 0.2], [0.2, 0.0, 0.8]],
            color_bias: [0.04, -0.02, 0.0],
            gamma: 1.3,
            noise_std: 0.05,
            texture_gain: 0.5,
        }
    }

    pub fn strong() -> Self {
        DomainShiftParams {
            color_matrix: [[0.65, 0.35, 0.0], [0.0, 0.65, 0.35], [0.35, 0.0, 0.65]],
            color_bias: [0.06, -0.04, 0.02],
            gamma: 1.6,
            noise_std: 0.08,
            texture_gain: 0.3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::identity()),
            "default" => Ok(Self::default_shift()),
            "strong" => Ok(Self::strong()),
            other => Err(Error::InvalidSpec(format!(
                "unknown shift preset {other:?}"
            ))),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn apply(&self, rgb: [f64; 3], noise: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let mixed: f64 = (0..3)
                .map(|j| self.color_matrix[i][j] * rgb[j])
                .sum::<f64>()
                + self.color_bias[i];
            let v = mixed.clamp(0.0, 1.0).powf(self.gamma) + self.noise_std * noise[i];
            *o = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dataset(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, 3]
    }
}

/// `H x W` map of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
    pub domain: Domain,
    pub index: u64,
}

/// Base color of class `c`.
pub fn class_color(c: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.50],
        [0.17, 0.77, 0.23],
        [0.77, 0.82, 0.81],
        [0.36, 0.19, 0.76],
        [0.75, 0.83, 0.22],
        [0.82, 0.60, 0.66],
        [0.59, 0.32, 0.18],
        [0.44, 0.83, 0.67],
    ];
    if c < BASE.len() {
        return BASE[c];
    }
    let h = (c as f64 * 0.618_033_988_75).fract();
    let f = |o: f64| 0.25 + 0.5 * (0.5 + 0.5 * (std::f64::consts::TAU * (h + o)).cos());
    [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
}

/// Stripe texture of class `c` at pixel `(y, x)`, in `[-1, 1]`.
fn class_texture(c: usize, y: usize, x: usize) -> f64 {
    let angle = c as f64 * 0.9;
    let period = 3.0 + (c % 4) as f64 * 1.5;
    let t = (angle.cos() * x as f64 + angle.sin() * y as f64) / period;
    (std::f64::consts::TAU * t).sin()
}

const TEXTURE_AMPLITUDE: f64 = 0.08;

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Circle { cy: f64, cx: f64, r: f64 },
    Triangle { p: [(f64, f64); 3] },
    Band { y0: f64, y1: f64 },
}

impl Primitive {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Primitive::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Primitive::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Primitive::Band { y0, y1 } => y >= y0 && y < y1,
            Primitive::Triangle { p } => {
                let side = |a: (f64, f64), b: (f64, f64)| {
                    (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1)
                };
                let (d0, d1, d2) = (side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    fn sample(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Self {
        match rng.gen_range(0..4) {
            0 => {
                let (rh, rw) = (rng.gen_range(0.1..0.45) * h, rng.gen_range(0.1..0.45) * w);
                let (y0, x0) = (rng.gen_range(0.0..h - rh), rng.gen_range(0.0..w - rw));
                Primitive::Rect {
                    y0,
                    x0,
                    y1: y0 + rh,
                    x1: x0 + rw,
                }
            }
            1 => Primitive::Circle {
                cy: rng.gen_range(0.0..h),
                cx: rng.gen_range(0.0..w),
                r: rng.gen_range(0.06..0.22) * w.min(h),
            },
            2 => {
                let size = rng.gen_range(0.15..0.5) * w.min(h);
                let (oy, ox) = (rng.gen_range(0.0..h - size), rng.gen_range(0.0..w - size));
                let mut p = [(0.0, 0.0); 3];
                for v in &mut p {
                    *v = (oy + rng.gen_range(0.0..size), ox + rng.gen_range(0.0..size));
                }
                Primitive::Triangle { p }
            }
            _ => {
                let bh = rng.gen_range(0.08..0.25) * h;
                let y0 = rng.gen_range(0.0..h - bh);
                Primitive::Band { y0, y1: y0 + bh }
            }
        }
    }
}

fn pick_class(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (c, &w) in weights.iter().enumerate() {
        if u < w {
            return c;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Label map of scene `index`; depends only on `(spec, index)`.
pub fn scene_labels(spec: &SceneSpec, index: u64) -> Result<LabelMap> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = keyed_rng(spec.seed, index, stream::SCENE);
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut data = vec![0u8; h * w];
    for _ in 0..count {
        let class = pick_class(&mut rng, &spec.class_weights) as u8;
        let prim = Primitive::sample(&mut rng, h as f64, w as f64);
        for y in 0..h {
            for x in 0..w {
                if prim.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    data[y * w + x] = class;
                }
            }
        }
    }
    Ok(LabelMap {
        height: h,
        width: w,
        data,
    })
}

/// Renders scene `index` for `domain`. Source images are rendered without
/// shift; target images pass through `shift`.
pub fn generate_sample(
    spec: &SceneSpec,
    shift: &DomainShiftParams,
    domain: Domain,
    index: u64,
) -> Result<Sample> {
    let labels = scene_labels(spec, index)?;
    let (h, w) = (spec.height, spec.width);
    let mut noise_rng = keyed_rng(spec.seed, index, domain.stream());
    let texture_gain = match domain {
        Domain::Source => 1.0,
        Domain::Target => shift.texture_gain,
    };
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let c = labels.data[y * w + x] as usize;
            let base = class_color(c);
            let t = TEXTURE_AMPLITUDE * texture_gain * class_texture(c, y, x);
            let rgb = [base[0] + t, base[1] + t, base[2] + t].map(|v| v.clamp(0.0, 1.0));
            let rgb = match domain {
                Domain::Source => rgb,
                Domain::Target => {
                    let mut n = [0.0; 3];
                    if shift.noise_std > 0.0 {
                        for v in &mut n {
                            *v = StandardNormal.sample(&mut noise_rng);
                        }
                    }
                    shift.apply(rgb, n)
                }
            };
            data.extend_from_slice(&rgb);
        }
    }
    Ok(Sample {
        image: Image {
            height: h,
            width: w,
            data,
        },
        labels,
        domain,
        index,
    })
}

/// Generates samples `start..start + count` for one domain.
pub fn generate_range(
    spec: &SceneSpec,
    shift: &DomainShiftParams,
    domain: Domain,
    start: u64,
    count: usize,
) -> Result<Vec<Sample>> {
    (start..start + count as u64)
        .map(|i| generate_sample(spec, shift, domain, i))
        .collect()
}

/// Fraction of pixels carrying each class over a set of label maps.
pub fn class_pixel_shares<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    classes: usize,
) -> Vec<f64> {
    let mut counts = vec![0u64; classes];
    for map in labels {
        for &c in &map.data {
            if (c as usize) < classes {
                counts[c as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&n| {
            if total == 0 {
                0.0
            } else {
                n as f64 / total as f64
            }
        })
        .collect()
}

/// Classes whose pixel share is below [`TAIL_SHARE`] (and nonzero).
pub fn tail_classes(shares: &[f64]) -> Vec<usize> {
    shares
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0 && s < TAIL_SHARE)
        .map(|(c, _)| c)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_shift_renders_identical_domains() {
        let spec = SceneSpec::desk(3);
        let id = DomainShiftParams::identity();
        for i in 0..3 {
            let s = generate_sample(&spec, &id, Domain::Source, i).unwrap();
            let t = generate_sample(&spec, &id, Domain::Target, i).unwrap();
            assert_eq!(s.image, t.image);
            assert_eq!(s.labels, t.labels);
        }
    }

    #[test]
    fn domains_share_labels_under_default_shift() {
        let spec = SceneSpec::desk(11);
        let shift = DomainShiftParams::default_shift();
        let s = generate_sample(&spec, &shift, Domain::Source, 5).unwrap();
        let t = generate_sample(&spec, &shift, Domain::Target, 5).unwrap();
        assert_eq!(s.labels, t.labels);
        assert_ne!(s.image, t.image);
        assert!(t.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let shift = DomainShiftParams::identity();
        let zero = SceneSpec::desk(0).with_size(0, 8);
        assert!(generate_sample(&zero, &shift, Domain::Source, 0).is_err());
        let one = SceneSpec::desk(0).with_classes(1);
        assert!(generate_sample(&one, &shift, Domain::Source, 0).is_err());
    }

    #[test]
    fn shares_of_single_class_and_checkerboard() {
        let single = LabelMap {
            height: 2,
            width: 2,
            data: vec![0; 4],
        };
        assert_eq!(class_pixel_shares([&single], 3), vec![1.0, 0.0, 0.0]);
        let checker = LabelMap {
            height: 4,
            width: 4,
            data: (0..16)
                .map(|i| ((i % 4) / 2 + 2 * ((i / 4) / 2)) as u8)
                .collect(),
        };
        assert_eq!(class_pixel_shares([&checker], 4), vec![0.25; 4]);
    }

    #[test]
    fn labels_stay_in_range() {
        let spec = SceneSpec::desk(9);
        for i in 0..10 {
            let l = scene_labels(&spec, i).unwrap();
            assert!(l.data.iter().all(|&c| (c as usize) < spec.classes));
        }
    }
}
