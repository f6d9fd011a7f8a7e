//! Objective terms: pixel-to-prototype contrastive loss, confidence
//! thresholds and masks, segmentation and self-training cross-entropy.
//!
//! Aggregate losses average over contributing pixels. Prototypes enter the
//! graph as constants, so no gradient ever reaches the bank.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::prototype::{Mask, PrototypeBank, IGNORE};
use crate::segnet::{argmax, SegModel};
use crate::synthdata::{Image, LabelMap};

/// Upper bound on any confidence threshold.
pub const MAX_THRESHOLD: f64 = 0.9;

/// Features with norm at or below this are excluded from contrastive terms.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.5,
            lambda: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(invalid(
                "contrastive",
                format!("temperature {} must be positive", self.temperature),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid(
                "contrastive",
                format!("lambda {} must be nonnegative", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Which prediction a threshold set was calibrated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSpace {
    /// Softmax of decoder scores at feature resolution.
    Feature,
    /// Upsampled full-resolution probabilities.
    Output,
}

impl ThresholdSpace {
    pub fn name(self) -> &'static str {
        match self {
            ThresholdSpace::Feature => "feature",
            ThresholdSpace::Output => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub values: Vec<f64>,
    pub space: ThresholdSpace,
}

impl Thresholds {
    pub fn uniform(classes: usize, value: f64, space: ThresholdSpace) -> Self {
        Thresholds {
            values: vec![value.min(MAX_THRESHOLD); classes],
            space,
        }
    }

    /// Per class: `min(median confidence, 0.9)`, or 0.9 for classes with no
    /// confidences.
    pub fn from_confidences(mut per_class: Vec<Vec<f64>>, space: ThresholdSpace) -> Self {
        let values = per_class
            .iter_mut()
            .map(|conf| median(conf).map_or(MAX_THRESHOLD, |m| m.min(MAX_THRESHOLD)))
            .collect();
        Thresholds { values, space }
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    values.sort_unstable_by(f64::total_cmp);
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Thresholded labels at output resolution; [`IGNORE`] where no class passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl PseudoLabelMap {
    pub fn coverage(&self) -> usize {
        self.values.iter().filter(|&&v| v != IGNORE).count()
    }

    pub fn as_label_map(&self) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            data: self.values.clone(),
        }
    }
}

/// `-log(exp(u.pos / t) / (exp(u.pos / t) + sum exp(u.neg / t)))`.
pub fn contrastive(u: &[f64], pos: &[f64], negs: &[&[f64]], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(invalid(
            "contrastive",
            format!("temperature {temperature} must be positive"),
        ));
    }
    let dot = |v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / temperature;
    let lp = dot(pos);
    let logits: Vec<f64> = negs.iter().map(|n| dot(n)).collect();
    let m = logits.iter().cloned().fold(lp, f64::max);
    let z = (lp - m).exp() + logits.iter().map(|l| (l - m).exp()).sum::<f64>();
    Ok(m + z.ln() - lp)
}

/// Mean contrastive loss over masked pixels of a `[B, H', W', N]` feature
/// map. Each pixel's normalized feature is the query, the prototype of its
/// mask class the positive key and every other initialized prototype a
/// negative. Pixels that are IGNORE, whose class has no prototype, or whose
/// feature is zero do not contribute; with no contributing pixel the loss is 0.
pub fn prototype_contrastive(
    tape: &mut Tape,
    features: Var,
    masks: &[&Mask],
    bank: &PrototypeBank,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    prototype_contrastive_keyed(tape, features, masks, bank, cfg).map(|(loss, _)| loss)
}

/// [`prototype_contrastive`] also returning the constant key matrix
/// (`N x K`, initialized classes only; `None` when the bank is empty).
pub fn prototype_contrastive_keyed(
    tape: &mut Tape,
    features: Var,
    masks: &[&Mask],
    bank: &PrototypeBank,
    cfg: &ContrastiveConfig,
) -> Result<(Var, Option<Var>)> {
    cfg.validate()?;
    let shape = tape.shape(features).to_vec();
    let n = *shape.last().unwrap();
    if n != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "prototype_contrastive (feature dim vs bank)",
            lhs: shape,
            rhs: vec![bank.classes(), bank.dim()],
        });
    }
    let pixels = tape.tensor(features).numel() / n;
    let mask_pixels: usize = masks.iter().map(|m| m.values.len()).sum();
    if mask_pixels != pixels {
        return Err(Error::ShapeMismatch {
            op: "prototype_contrastive (mask vs features)",
            lhs: shape,
            rhs: masks.iter().flat_map(|m| [m.height, m.width]).collect(),
        });
    }
    // column of each initialized class among the keys
    let mut column = vec![None; bank.classes()];
    let mut keys_t = Vec::new();
    let mut k = 0;
    for (c, col) in column.iter_mut().enumerate() {
        if bank.is_initialized(c) {
            *col = Some(k);
            keys_t.push(bank.prototype(c).unwrap());
            k += 1;
        }
    }
    if k == 0 {
        return Ok((tape.constant(&[], vec![0.0])?, None));
    }
    let fv = tape.value(features);
    let targets: Vec<Option<usize>> = masks
        .iter()
        .flat_map(|m| m.values.iter())
        .zip(fv.chunks(n))
        .map(|(&m, f)| {
            if m == IGNORE || f.iter().map(|v| v * v).sum::<f64>().sqrt() <= NORM_EPS {
                None
            } else {
                column.get(m as usize).copied().flatten()
            }
        })
        .collect();
    // keys as an N x K constant
    let mut keys = vec![0.0; n * k];
    for (j, p) in keys_t.iter().enumerate() {
        for (i, &v) in p.iter().enumerate() {
            keys[i * k + j] = v;
        }
    }
    let keys = tape.constant(&[n, k], keys)?;
    let flat = tape.reshape(features, &[pixels, n])?;
    let unit = tape.l2_normalize_channels(flat, NORM_EPS)?;
    let sims = tape.matmul(unit, keys)?;
    let logits = tape.scale(sims, 1.0 / cfg.temperature);
    let logp = tape.log_softmax(logits);
    Ok((tape.nll(logp, &targets)?, Some(keys)))
}

/// Contrastive term over source features with downsampled ground-truth masks.
pub fn source_contrastive(
    tape: &mut Tape,
    features: Var,
    masks: &[&Mask],
    bank: &PrototypeBank,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    prototype_contrastive(tape, features, masks, bank, cfg)
}

/// Contrastive term over target features with confidence-thresholded masks.
pub fn target_contrastive(
    tape: &mut Tape,
    features: Var,
    masks: &[&Mask],
    bank: &PrototypeBank,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    prototype_contrastive(tape, features, masks, bank, cfg)
}

/// Per pixel, the most probable class among those whose probability exceeds
/// its threshold, else [`IGNORE`].
pub fn masked_argmax(probs: &[f64], thresholds: &[f64]) -> Vec<u8> {
    let c = thresholds.len();
    probs
        .chunks(c)
        .map(|row| {
            let mut best: Option<usize> = None;
            for (k, (&p, &s)) in row.iter().zip(thresholds).enumerate() {
                if p > s && best.map_or(true, |b| p > row[b]) {
                    best = Some(k);
                }
            }
            best.map_or(IGNORE, |b| b as u8)
        })
        .collect()
}

fn check_probs(
    op: &'static str,
    probs: &[f64],
    height: usize,
    width: usize,
    classes: usize,
) -> Result<()> {
    if probs.len() != height * width * classes {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![probs.len()],
            rhs: vec![height, width, classes],
        });
    }
    Ok(())
}

/// Target mask from feature-resolution probabilities `H' x W' x C`.
pub fn target_mask(probs: &[f64], height: usize, width: usize, sigma: &Thresholds) -> Result<Mask> {
    check_probs("target_mask", probs, height, width, sigma.values.len())?;
    Mask::new(height, width, masked_argmax(probs, &sigma.values))
}

/// Pseudo labels from output-resolution probabilities `H x W x C`.
pub fn pseudo_labels(
    probs: &[f64],
    height: usize,
    width: usize,
    sigma: &Thresholds,
) -> Result<PseudoLabelMap> {
    check_probs("pseudo_labels", probs, height, width, sigma.values.len())?;
    Ok(PseudoLabelMap {
        height,
        width,
        values: masked_argmax(probs, &sigma.values),
    })
}

fn label_targets(
    op: &'static str,
    tape: &Tape,
    probs: Var,
    labels: &[&[u8]],
) -> Result<Vec<Option<usize>>> {
    let c = *tape.shape(probs).last().unwrap();
    let rows = tape.tensor(probs).numel() / c;
    let targets: Vec<Option<usize>> = labels
        .iter()
        .flat_map(|l| l.iter())
        .map(|&v| (v != IGNORE).then_some(v as usize))
        .collect();
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.shape(probs).to_vec(),
            rhs: vec![targets.len()],
        });
    }
    Ok(targets)
}

/// Mean over pixels of `-log P` at the true class.
pub fn segmentation_loss(tape: &mut Tape, probs: Var, labels: &[&LabelMap]) -> Result<Var> {
    let raw: Vec<&[u8]> = labels.iter().map(|l| &l.data[..]).collect();
    let targets = label_targets("segmentation_loss", tape, probs, &raw)?;
    let logp = tape.log(probs);
    tape.nll(logp, &targets)
}

/// Mean over non-IGNORE pixels of `-log P` at the pseudo class; 0 if none.
pub fn self_training_loss(tape: &mut Tape, probs: Var, pseudo: &[&PseudoLabelMap]) -> Result<Var> {
    let raw: Vec<&[u8]> = pseudo.iter().map(|l| &l.values[..]).collect();
    let targets = label_targets("self_training_loss", tape, probs, &raw)?;
    let logp = tape.log(probs);
    tape.nll(logp, &targets)
}

/// `seg + lambda * (cl_source + cl_target)`.
pub fn total_loss(
    tape: &mut Tape,
    seg: Var,
    cl_source: Var,
    cl_target: Var,
    lambda: f64,
) -> Result<Var> {
    let cl = tape.add(cl_source, cl_target)?;
    let weighted = tape.scale(cl, lambda);
    tape.add(seg, weighted)
}

/// Per-class median-confidence thresholds over a calibration set.
///
/// Confidence is the max softmax probability per pixel and the predicted
/// class its argmax, taken over decoder-score softmax (`Feature`) or the
/// upsampled probabilities (`Output`).
pub fn calibrate_thresholds(
    model: &SegModel,
    images: &[&Image],
    space: ThresholdSpace,
    batch_size: usize,
) -> Result<Thresholds> {
    if images.is_empty() {
        return Err(invalid("calibrate_thresholds", "empty calibration set"));
    }
    let c = model.classes();
    let mut per_class = vec![Vec::new(); c];
    for chunk in images.chunks(batch_size.max(1)) {
        let inf = model.infer(chunk)?;
        let probs = match space {
            ThresholdSpace::Feature => &inf.score_probs,
            ThresholdSpace::Output => &inf.probs,
        };
        for row in probs.chunks(c) {
            let k = argmax(row);
            per_class[k].push(row[k]);
        }
    }
    Ok(Thresholds::from_confidences(per_class, space))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_closed_forms() {
        let u = [1.0, 0.0];
        assert_eq!(contrastive(&u, &[1.0, 0.0], &[], 0.3).unwrap(), 0.0);
        for tau in [0.05, 0.5, 2.0] {
            let l = contrastive(&u, &[0.6, 0.8], &[&[0.6, -0.8]], tau).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!(contrastive(&u, &u, &[], 0.0).is_err());
        assert!(contrastive(&u, &u, &[], -1.0).is_err());
    }

    #[test]
    fn median_rule() {
        let t = Thresholds::from_confidences(
            vec![
                vec![0.95, 0.96, 0.94],
                vec![0.6, 0.7, 0.8],
                vec![],
                vec![0.5, 0.7],
            ],
            ThresholdSpace::Feature,
        );
        assert_eq!(t.values[0], 0.9);
        assert_eq!(t.values[1], 0.7);
        assert_eq!(t.values[2], 0.9);
        assert!((t.values[3] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn masked_argmax_cases() {
        let s = [0.9, 0.9];
        assert_eq!(masked_argmax(&[0.95, 0.05], &s), vec![0]);
        assert_eq!(masked_argmax(&[0.6, 0.4], &s), vec![IGNORE]);
        assert_eq!(masked_argmax(&[0.5, 0.45, 0.05], &[0.4, 0.4, 0.9]), vec![0]);
        // strict inequality
        assert_eq!(masked_argmax(&[0.9, 0.1], &s), vec![IGNORE]);
        // passing class need not be the global argmax
        assert_eq!(masked_argmax(&[0.5, 0.45, 0.05], &[0.6, 0.4, 0.9]), vec![1]);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(&[], vec![1.0]).unwrap();
        let b = tape.constant(&[], vec![2.0]).unwrap();
        let c = tape.constant(&[], vec![3.0]).unwrap();
        for (lambda, expect) in [(0.0, 1.0), (1.0, 6.0), (0.5, 3.5)] {
            let t = total_loss(&mut tape, a, b, c, lambda).unwrap();
            assert_eq!(tape.scalar(t), expect);
        }
    }
}
