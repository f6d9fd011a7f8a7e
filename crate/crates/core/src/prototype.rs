//! Semantic prototype bank: one unit vector per class, initialized from
//! source class means and refreshed by an exponential moving average.

use crate::error::{invalid, Error, Result};
use crate::synthdata::LabelMap;

/// Mask value for pixels excluded from every loss.
pub const IGNORE: u8 = 255;

/// Per-pixel class assignment at feature resolution, or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: vec![height, width],
                rhs: vec![values.len()],
            });
        }
        Ok(Mask {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Mask {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Number of non-IGNORE pixels.
    pub fn coverage(&self) -> usize {
        self.values.iter().filter(|&&v| v != IGNORE).count()
    }
}

/// Nearest-neighbor downsampling reading the top-left pixel of each block.
pub fn downsample_labels(labels: &LabelMap, factor: usize) -> Result<Mask> {
    if factor == 0 || labels.height % factor != 0 || labels.width % factor != 0 {
        return Err(invalid(
            "downsample_labels",
            format!(
                "{}x{} not divisible by {factor}",
                labels.height, labels.width
            ),
        ));
    }
    let (h, w) = (labels.height / factor, labels.width / factor);
    let values = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| labels.data[y * factor * labels.width + x * factor])
        .collect();
    Ok(Mask {
        height: h,
        width: w,
        values,
    })
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Per-class mean of L2-normalized features, with pixel counts.
///
/// `features` is pixel-major, `dim` values per pixel, aligned with `mask`.
fn class_means(
    features: &[f64],
    dim: usize,
    mask: &[u8],
    classes: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    let mut unit = vec![0.0; dim];
    for (f, &m) in features.chunks(dim).zip(mask) {
        let c = m as usize;
        if m == IGNORE || c >= classes {
            continue;
        }
        unit.copy_from_slice(f);
        normalize(&mut unit);
        sums[c].iter_mut().zip(&unit).for_each(|(s, u)| *s += u);
        counts[c] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    classes: usize,
    dim: usize,
    /// Row-major `classes x dim`.
    mu: Vec<f64>,
    alpha: f64,
    initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid(
                "prototype bank",
                format!("alpha {alpha} outside [0, 1]"),
            ));
        }
        Ok(PrototypeBank {
            classes,
            dim,
            mu: vec![0.0; classes * dim],
            alpha,
            initialized: vec![false; classes],
        })
    }

    /// Rebuilds a bank from stored state, re-checking the unit-norm invariant.
    pub fn from_parts(
        classes: usize,
        dim: usize,
        alpha: f64,
        mu: Vec<f64>,
        initialized: Vec<bool>,
    ) -> Result<Self> {
        let mut bank = Self::new(classes, dim, alpha)?;
        if mu.len() != classes * dim || initialized.len() != classes {
            return Err(invalid(
                "prototype bank",
                "state size does not match classes x dim",
            ));
        }
        for (c, &init) in initialized.iter().enumerate() {
            let row = &mu[c * dim..(c + 1) * dim];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if init && (n - 1.0).abs() > 1e-9 {
                return Err(invalid(
                    "prototype bank",
                    format!("prototype {c} has norm {n}"),
                ));
            }
        }
        bank.mu = mu;
        bank.initialized = initialized;
        Ok(bank)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn is_initialized(&self, c: usize) -> bool {
        self.initialized.get(c).copied().unwrap_or(false)
    }

    pub fn any_initialized(&self) -> bool {
        self.initialized.iter().any(|&b| b)
    }

    /// Raw `classes x dim` storage; rows of uninitialized classes are zero.
    pub fn storage(&self) -> &[f64] {
        &self.mu
    }

    pub fn prototype(&self, c: usize) -> Option<&[f64]> {
        self.is_initialized(c)
            .then(|| &self.mu[c * self.dim..(c + 1) * self.dim])
    }

    /// Initializes every class from `(features, mask)` pairs, one per source
    /// image. Each class prototype is the normalized average, over images
    /// containing the class, of that image's mean normalized feature.
    /// Classes absent from every image stay uninitialized.
    pub fn initialize<'a>(
        &mut self,
        images: impl IntoIterator<Item = (&'a [f64], &'a Mask)>,
    ) -> Result<()> {
        let mut acc = vec![0.0; self.classes * self.dim];
        let mut n_images = vec![0usize; self.classes];
        for (features, mask) in images {
            self.check_features(features, mask)?;
            let (means, counts) = class_means(features, self.dim, &mask.values, self.classes);
            for c in 0..self.classes {
                if counts[c] > 0 {
                    acc[c * self.dim..(c + 1) * self.dim]
                        .iter_mut()
                        .zip(&means[c])
                        .for_each(|(a, m)| *a += m);
                    n_images[c] += 1;
                }
            }
        }
        for c in 0..self.classes {
            let row = &mut acc[c * self.dim..(c + 1) * self.dim];
            if n_images[c] > 0 {
                row.iter_mut().for_each(|v| *v /= n_images[c] as f64);
            }
            self.initialized[c] = n_images[c] > 0 && normalize(row);
            if !self.initialized[c] {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.mu = acc;
        Ok(())
    }

    /// EMA step: for every initialized class present in the batch,
    /// `mu <- normalize(alpha * mu + (1 - alpha) * batch_mean)`.
    /// Absent classes are untouched.
    pub fn update<'a>(
        &mut self,
        batch: impl IntoIterator<Item = (&'a [f64], &'a Mask)>,
    ) -> Result<()> {
        let mut sums = vec![0.0; self.classes * self.dim];
        let mut counts = vec![0usize; self.classes];
        for (features, mask) in batch {
            self.check_features(features, mask)?;
            let (means, n) = class_means(features, self.dim, &mask.values, self.classes);
            for c in 0..self.classes {
                if n[c] > 0 {
                    sums[c * self.dim..(c + 1) * self.dim]
                        .iter_mut()
                        .zip(&means[c])
                        .for_each(|(s, m)| *s += m * n[c] as f64);
                    counts[c] += n[c];
                }
            }
        }
        if self.alpha == 1.0 {
            return Ok(());
        }
        let (a, dim) = (self.alpha, self.dim);
        for c in 0..self.classes {
            if counts[c] == 0 || !self.initialized[c] {
                continue;
            }
            let mut next: Vec<f64> = self.mu[c * dim..(c + 1) * dim]
                .iter()
                .zip(&sums[c * dim..(c + 1) * dim])
                .map(|(m, s)| a * m + (1.0 - a) * s / counts[c] as f64)
                .collect();
            if normalize(&mut next) {
                self.mu[c * dim..(c + 1) * dim].copy_from_slice(&next);
            }
        }
        Ok(())
    }

    fn check_features(&self, features: &[f64], mask: &Mask) -> Result<()> {
        if features.len() != mask.values.len() * self.dim {
            return Err(Error::ShapeMismatch {
                op: "prototype features vs mask",
                lhs: vec![features.len() / self.dim.max(1), self.dim],
                rhs: vec![mask.height, mask.width],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap {
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn downsample_identity_constant_and_blocks() {
        let l = labels(2, 2, vec![0, 1, 2, 3]);
        assert_eq!(downsample_labels(&l, 1).unwrap().values, l.data);
        let c = labels(4, 4, vec![5; 16]);
        assert_eq!(downsample_labels(&c, 2).unwrap().values, vec![5; 4]);
        #[rustfmt::skip]
        let blocks = labels(4, 4, vec![
            0, 0, 1, 1,
            0, 0, 1, 1,
            2, 2, 3, 3,
            2, 2, 3, 3,
        ]);
        let m = downsample_labels(&blocks, 2).unwrap();
        assert_eq!((m.height, m.width), (2, 2));
        assert_eq!(m.values, vec![0, 1, 2, 3]);
        assert!(downsample_labels(&blocks, 3).is_err());
    }

    #[test]
    fn single_class_constant_feature_initializes_to_direction() {
        let mut bank = PrototypeBank::new(2, 2, 0.1).unwrap();
        let feats = vec![3.0, 4.0, 3.0, 4.0];
        let mask = Mask::new(1, 2, vec![0, 0]).unwrap();
        bank.initialize([(&feats[..], &mask)]).unwrap();
        let p = bank.prototype(0).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert!(!bank.is_initialized(1));
        assert!(bank.prototype(1).is_none());
    }

    #[test]
    fn alpha_bounds_are_enforced() {
        assert!(PrototypeBank::new(2, 2, -0.1).is_err());
        assert!(PrototypeBank::new(2, 2, 1.5).is_err());
    }

    #[test]
    fn ema_hand_case() {
        let mut bank = PrototypeBank::new(1, 2, 0.1).unwrap();
        let init = vec![1.0, 0.0];
        let m = Mask::new(1, 1, vec![0]).unwrap();
        bank.initialize([(&init[..], &m)]).unwrap();
        let batch = vec![0.0, 1.0];
        bank.update([(&batch[..], &m)]).unwrap();
        let p = bank.prototype(0).unwrap();
        let n = (0.1f64 * 0.1 + 0.9 * 0.9).sqrt();
        assert!((p[0] - 0.1 / n).abs() < 1e-15);
        assert!((p[1] - 0.9 / n).abs() < 1e-15);
        assert!((p[0] - 0.1104).abs() < 1e-4 && (p[1] - 0.9939).abs() < 1e-4);
    }

    #[test]
    fn absent_classes_are_untouched_by_update() {
        let mut bank = PrototypeBank::new(2, 2, 0.0).unwrap();
        let f = vec![1.0, 0.0, 0.0, 1.0];
        let m = Mask::new(1, 2, vec![0, 1]).unwrap();
        bank.initialize([(&f[..], &m)]).unwrap();
        let before = bank.clone();
        let g = vec![1.0, 1.0];
        let only0 = Mask::new(1, 1, vec![0]).unwrap();
        bank.update([(&g[..], &only0)]).unwrap();
        assert_eq!(bank.prototype(1), before.prototype(1));
        assert_ne!(bank.prototype(0), before.prototype(0));
    }
}
