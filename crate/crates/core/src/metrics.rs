//! Segmentation metrics: confusion matrix, IoU and its means, and the class
//! center distance between pixel features and class centers.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::prototype::IGNORE;

/// `C x C` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not IGNORE.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion accumulate",
                lhs: vec![pred.len()],
                rhs: vec![truth.len()],
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(invalid(
                    "confusion accumulate",
                    format!("label {} outside {} classes", p.max(t), self.classes),
                ));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(invalid("confusion merge", "class counts differ"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Ground-truth pixel count of class `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// prediction and ground truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let row = self.support(c);
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        let denom = row + col - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Mean IoU over classes with a defined IoU.
    pub fn miou(&self) -> f64 {
        let all: Vec<usize> = (0..self.classes).collect();
        self.subset_miou(&all).unwrap_or(0.0)
    }

    /// Mean IoU over `ids`, skipping classes whose IoU is undefined.
    pub fn subset_miou(&self, ids: &[usize]) -> Result<f64> {
        if ids.is_empty() {
            return Err(invalid("subset_miou", "empty class subset"));
        }
        if let Some(&c) = ids.iter().find(|&&c| c >= self.classes) {
            return Err(invalid(
                "subset_miou",
                format!("class {c} outside {} classes", self.classes),
            ));
        }
        let defined: Vec<f64> = ids.iter().filter_map(|&c| self.iou(c)).collect();
        Ok(if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub iou: Vec<Option<f64>>,
    pub pixels: Vec<u64>,
    pub miou: f64,
    pub miou_tail: Option<f64>,
    /// Named subset means (e.g. a 13-class subset).
    pub subsets: Vec<(String, f64)>,
    pub ccd: Option<Vec<Option<f64>>>,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix, tail: &[usize]) -> Self {
        MetricReport {
            iou: (0..cm.classes()).map(|c| cm.iou(c)).collect(),
            pixels: (0..cm.classes()).map(|c| cm.support(c)).collect(),
            miou: cm.miou(),
            miou_tail: cm.subset_miou(tail).ok(),
            subsets: Vec::new(),
            ccd: None,
        }
    }

    pub fn with_subset(mut self, cm: &ConfusionMatrix, name: &str, ids: &[usize]) -> Result<Self> {
        self.subsets.push((name.to_string(), cm.subset_miou(ids)?));
        Ok(self)
    }

    /// CSV: `class,iou,pixels` rows, then `miou`, `miou_tail`, subset and
    /// `ccd_<class>` lines. Undefined values are written as `nan`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v}"));
        let mut s = String::from("class,iou,pixels\n");
        for (c, (iou, px)) in self.iou.iter().zip(&self.pixels).enumerate() {
            let _ = writeln!(s, "{c},{},{px}", fmt(*iou));
        }
        let _ = writeln!(s, "miou,{}", self.miou);
        let _ = writeln!(s, "miou_tail,{}", fmt(self.miou_tail));
        for (name, v) in &self.subsets {
            let _ = writeln!(s, "miou_subset_{name},{v}");
        }
        if let Some(ccd) = &self.ccd {
            for (c, v) in ccd.iter().enumerate() {
                let _ = writeln!(s, "ccd_{c},{}", fmt(*v));
            }
        }
        s
    }
}

/// Class center distance per class:
/// `CCD(c) = 1/(K-1) * sum_{k != c} mean_{x in class c} |x - mu_c|^2 / |mu_c - mu_k|^2`,
/// where `K` counts the classes with a supplied center.
///
/// `features` is pixel-major with `dim` values per pixel and `labels` gives
/// each pixel's class (IGNORE skipped). Classes without a center or without
/// pixels yield `None`.
pub fn ccd(
    features: &[f64],
    labels: &[u8],
    dim: usize,
    centers: &[Option<Vec<f64>>],
) -> Result<Vec<Option<f64>>> {
    if features.len() != labels.len() * dim {
        return Err(Error::ShapeMismatch {
            op: "ccd",
            lhs: vec![features.len()],
            rhs: vec![labels.len(), dim],
        });
    }
    let present: Vec<usize> = (0..centers.len())
        .filter(|&c| centers[c].is_some())
        .collect();
    if present.len() < 2 {
        return Err(invalid("ccd", "need centers for at least two classes"));
    }
    let classes = centers.len();
    let mut scatter = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for (x, &l) in features.chunks(dim).zip(labels) {
        let c = l as usize;
        if l == IGNORE || c >= classes {
            continue;
        }
        if let Some(mu) = &centers[c] {
            scatter[c] += x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            counts[c] += 1;
        }
    }
    let mut out = vec![None; classes];
    for &c in &present {
        let mu_c = centers[c].as_ref().unwrap();
        let mut ratio_sum = 0.0;
        for &k in present.iter().filter(|&&k| k != c) {
            let mu_k = centers[k].as_ref().unwrap();
            let d2: f64 = mu_c.iter().zip(mu_k).map(|(a, b)| (a - b).powi(2)).sum();
            if d2 == 0.0 {
                return Err(Error::CoincidentPrototypes(c.min(k), c.max(k)));
            }
            if counts[c] > 0 {
                ratio_sum += scatter[c] / counts[c] as f64 / d2;
            }
        }
        if counts[c] > 0 {
            out[c] = Some(ratio_sum / (present.len() - 1) as f64);
        }
    }
    Ok(out)
}

/// Per-class mean of pixel features (the class centers used by [`ccd`]).
pub fn class_centers(
    features: &[f64],
    labels: &[u8],
    dim: usize,
    classes: usize,
) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, &l) in features.chunks(dim).zip(labels) {
        let c = l as usize;
        if l == IGNORE || c >= classes {
            continue;
        }
        sums[c].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        counts[c] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(mut s, n)| {
            (n > 0).then(|| {
                s.iter_mut().for_each(|v| *v /= n as f64);
                s
            })
        })
        .collect()
}

/// Mean of the defined per-class values.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
