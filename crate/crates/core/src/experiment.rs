//! Desk-scale experiment helpers: stage metrics, class center distance over
//! encoder features, and the shared-warm-up variant runner.

use rand::seq::index::sample;

use crate::error::Result;
use crate::losses::NORM_EPS;
use crate::metrics::{ccd, class_centers, mean_defined, MetricReport};
use crate::prototype::{downsample_labels, IGNORE};
use crate::rng::{keyed_rng, stream};
use crate::segnet::{SegModel, DOWNSAMPLE};
use crate::synthdata::{Domain, Image, Sample};
use crate::trainer::{evaluate, Checkpoint, Dataset, EvalSet, Stage, TrainConfig, Trainer};

/// L2-normalized encoder features and downsampled labels of `samples`.
/// Zero feature vectors are labeled IGNORE.
pub fn normalized_features(
    model: &SegModel,
    samples: &[&Sample],
    batch: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let n = model.feature_dim();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let inf = model.infer(&images)?;
        for s in chunk {
            labels.extend(downsample_labels(&s.labels, DOWNSAMPLE)?.values);
        }
        feats.extend(inf.features);
    }
    let start = labels.len() - feats.len() / n;
    for (x, l) in feats.chunks_mut(n).zip(&mut labels[start..]) {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= NORM_EPS {
            x.iter_mut().for_each(|v| *v = 0.0);
            *l = IGNORE;
        } else {
            x.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok((feats, labels))
}

/// Per-class CCD over normalized features of up to `max_images` samples
/// (a seeded random subset when there are more), with class means as centers.
pub fn feature_ccd(
    model: &SegModel,
    samples: &[Sample],
    max_images: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let chosen: Vec<&Sample> = if samples.len() <= max_images {
        samples.iter().collect()
    } else {
        let mut rng = keyed_rng(seed, 0, stream::CCD_SAMPLE);
        let mut idx = sample(&mut rng, samples.len(), max_images).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &samples[i]).collect()
    };
    let (feats, labels) = normalized_features(model, &chosen, 8)?;
    let centers = class_centers(&feats, &labels, model.feature_dim(), model.classes());
    ccd(&feats, &labels, model.feature_dim(), &centers)
}

/// Evaluation snapshot of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub source: MetricReport,
    pub target: MetricReport,
    pub ccd_source: Option<f64>,
    pub ccd_target: Option<f64>,
}

impl StageMetrics {
    pub fn target_miou(&self) -> f64 {
        self.target.miou
    }
}

/// mIoU on both splits, plus mean CCD when `ccd_images > 0`.
pub fn measure(
    model: &SegModel,
    eval: &EvalSet,
    ccd_images: usize,
    seed: u64,
) -> Result<StageMetrics> {
    let report = |d: Domain| -> Result<MetricReport> {
        let cm = evaluate(model, eval.split(d), 8)?;
        Ok(MetricReport::from_confusion(&cm, &eval.tail))
    };
    let ccd_mean = |d: Domain| -> Result<Option<f64>> {
        if ccd_images == 0 {
            return Ok(None);
        }
        Ok(mean_defined(&feature_ccd(
            model,
            eval.split(d),
            ccd_images,
            seed,
        )?))
    };
    Ok(StageMetrics {
        source: report(Domain::Source)?,
        target: report(Domain::Target)?,
        ccd_source: ccd_mean(Domain::Source)?,
        ccd_target: ccd_mean(Domain::Target)?,
    })
}

/// Runs `stages` in order from `start` (or a fresh model) and returns the
/// final trainer.
pub fn run_stages(
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
    stages: &[Stage],
    data: &Dataset,
    eval: Option<&EvalSet>,
) -> Result<Trainer> {
    let mut t = match start {
        Some(ck) => Trainer::from_checkpoint(cfg.clone(), ck)?,
        None => Trainer::new(cfg.clone(), data.classes)?,
    };
    for &s in stages {
        t.run_stage(s, data, eval, &mut |_| Ok(()))?;
    }
    Ok(t)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
