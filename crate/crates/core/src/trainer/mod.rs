//! Three-stage training: source warm-up, prototype contrastive adaptation and
//! self-training on frozen pseudo labels.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod log;
pub mod optim;

use rand::Rng as _;
use rayon::prelude::*;

pub use augment::{augment, AugmentConfig};
pub use checkpoint::{Checkpoint, Stage};
pub use config::{poly_lr, TrainConfig};
pub use log::LogRow;
pub use optim::{sgd_step, Sgd};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    calibrate_thresholds, pseudo_labels, segmentation_loss, self_training_loss, source_contrastive,
    target_contrastive, target_mask, total_loss, PseudoLabelMap, ThresholdSpace, Thresholds,
};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::prototype::{downsample_labels, Mask, PrototypeBank};
use crate::rng::{keyed_rng, stream, Rng};
use crate::segnet::{SegModel, DOWNSAMPLE};
use crate::synthdata::io::DatasetDir;
use crate::synthdata::{
    class_pixel_shares, generate_sample, tail_classes, Domain, DomainShiftParams, Image, LabelMap,
    Sample, SceneSpec,
};

/// Training data. Target images carry no labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: Vec<Sample>,
    pub target: Vec<Image>,
    pub classes: usize,
    /// Classes under 1% of source pixels.
    pub tail: Vec<usize>,
}

impl Dataset {
    pub fn new(source: Vec<Sample>, target: Vec<Image>, classes: usize) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Dataset("no source samples".into()));
        }
        let shares = class_pixel_shares(source.iter().map(|s| &s.labels), classes);
        Ok(Dataset {
            source,
            target,
            classes,
            tail: tail_classes(&shares),
        })
    }

    /// Loads source samples and target images; target labels stay on disk.
    pub fn from_dir(dir: &DatasetDir) -> Result<Self> {
        Self::new(
            dir.samples(Domain::Source)?,
            dir.images(Domain::Target)?,
            dir.classes,
        )
    }
}

/// Labeled evaluation splits.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub tail: Vec<usize>,
}

impl EvalSet {
    pub fn from_dir(dir: &DatasetDir, tail: Vec<usize>) -> Result<Self> {
        Ok(EvalSet {
            source: dir.samples(Domain::Source)?,
            target: dir.samples(Domain::Target)?,
            tail,
        })
    }

    pub fn split(&self, domain: Domain) -> &[Sample] {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

/// `count` scenes per domain generated in memory: the training data and the
/// labeled evaluation view of the same images.
pub fn synthetic(
    spec: &SceneSpec,
    shift: &DomainShiftParams,
    count: usize,
) -> Result<(Dataset, EvalSet)> {
    let gen = |domain| -> Result<Vec<Sample>> {
        (0..count as u64)
            .map(|i| generate_sample(spec, shift, domain, i))
            .collect()
    };
    let source = gen(Domain::Source)?;
    let target = gen(Domain::Target)?;
    let data = Dataset::new(
        source.clone(),
        target.iter().map(|s| s.image.clone()).collect(),
        spec.classes,
    )?;
    let eval = EvalSet {
        source,
        target,
        tail: data.tail.clone(),
    };
    Ok((data, eval))
}

/// Confusion matrix of model predictions over labeled samples. Batches are
/// evaluated on the rayon pool and merged in order.
pub fn evaluate(model: &SegModel, samples: &[Sample], batch: usize) -> Result<ConfusionMatrix> {
    let parts = samples
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let pred = model.infer(&images)?.predictions();
            let truth: Vec<u8> = chunk
                .iter()
                .flat_map(|s| s.labels.data.iter().copied())
                .collect();
            let mut cm = ConfusionMatrix::new(model.classes());
            cm.accumulate(&pred, &truth)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(model.classes());
    for part in &parts {
        cm.merge(part)?;
    }
    Ok(cm)
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub seg: f64,
    pub cl_s: f64,
    pub cl_t: f64,
    pub lr: f64,
}

/// Model, optimizer and stage state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: SegModel,
    pub sgd: Sgd,
    pub stage: Stage,
    /// Completed iterations within `stage`.
    pub iteration: usize,
    pub complete: bool,
    pub bank: Option<PrototypeBank>,
    pub thresholds: Option<Thresholds>,
    pub pseudo: Option<Vec<PseudoLabelMap>>,
    pub log: Vec<LogRow>,
    /// Per-step losses of this process (not persisted).
    pub history: Vec<(Stage, StepLosses)>,
    window: [f64; 4],
}

impl Trainer {
    pub fn new(cfg: TrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let model = SegModel::new(cfg.feature_dim, classes, cfg.seed);
        let sgd = Sgd::new(model.params());
        Ok(Trainer {
            cfg,
            model,
            sgd,
            stage: Stage::Warmup,
            iteration: 0,
            complete: false,
            bank: None,
            thresholds: None,
            pseudo: None,
            log: Vec::new(),
            history: Vec::new(),
            window: [0.0; 4],
        })
    }

    /// Restores a trainer. Continuing an unfinished stage requires the
    /// configuration it was started with.
    pub fn from_checkpoint(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if !ck.complete && ck.config_hash != cfg.hash() {
            return Err(Error::Checkpoint {
                field: "config_hash".into(),
                msg: format!(
                    "checkpoint has {}, configuration has {}",
                    ck.config_hash,
                    cfg.hash()
                ),
            });
        }
        if ck.feature_dim != cfg.feature_dim {
            return Err(Error::Checkpoint {
                field: "feature_dim".into(),
                msg: format!(
                    "checkpoint has {}, configuration has {}",
                    ck.feature_dim, cfg.feature_dim
                ),
            });
        }
        let model = ck.model()?;
        Ok(Trainer {
            cfg,
            model,
            sgd: Sgd {
                buffers: ck.momentum.clone(),
            },
            stage: ck.stage,
            iteration: ck.iteration,
            complete: ck.complete,
            bank: ck.bank.clone(),
            thresholds: ck.thresholds.clone(),
            pseudo: ck.pseudo.clone(),
            log: ck.log.clone(),
            history: Vec::new(),
            window: ck.loss_window,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            iteration: self.iteration,
            complete: self.complete,
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            feature_dim: self.model.feature_dim(),
            classes: self.model.classes(),
            params: self.model.params().to_vec(),
            momentum: self.sgd.buffers.clone(),
            bank: self.bank.clone(),
            thresholds: self.thresholds.clone(),
            pseudo: self.pseudo.clone(),
            loss_window: self.window,
            log: self.log.clone(),
        }
    }

    pub fn stage_iters(&self, stage: Stage) -> usize {
        match stage {
            Stage::Warmup => self.cfg.iters_warmup,
            Stage::Adapt => self.cfg.iters_adapt,
            Stage::SelfTrain => self.cfg.iters_selftrain,
        }
    }

    fn augment_cfg(&self) -> AugmentConfig {
        AugmentConfig {
            flip: self.cfg.augment_flip,
            jitter: self.cfg.augment_jitter,
        }
    }

    /// Runs (or resumes) `stage` to completion. `on_checkpoint` receives the
    /// periodic and final checkpoints.
    pub fn run_stage(
        &mut self,
        stage: Stage,
        data: &Dataset,
        eval: Option<&EvalSet>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        if stage < self.stage {
            return Err(Error::Training(format!(
                "cannot run {} after {}",
                stage.name(),
                self.stage.name()
            )));
        }
        if stage == self.stage && self.complete {
            return Ok(());
        }
        if stage > self.stage {
            self.begin(stage, data)?;
        }
        let total = self.stage_iters(stage);
        while self.iteration < total {
            let losses = self.step(data)?;
            self.history.push((stage, losses));
            self.window[0] += losses.seg;
            self.window[1] += losses.cl_s;
            self.window[2] += losses.cl_t;
            self.window[3] += 1.0;
            self.iteration += 1;
            if self.iteration == total {
                break;
            }
            if self.cfg.eval_every > 0 && self.iteration % self.cfg.eval_every == 0 {
                self.log_eval(eval)?;
            }
            if self.cfg.checkpoint_every > 0 && self.iteration % self.cfg.checkpoint_every == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        self.complete = true;
        self.log_eval(eval)?;
        on_checkpoint(&self.checkpoint())
    }

    /// Stage entry: fresh optimizer state plus the stage's one-off setup.
    fn begin(&mut self, stage: Stage, data: &Dataset) -> Result<()> {
        self.stage = stage;
        self.iteration = 0;
        self.complete = false;
        self.window = [0.0; 4];
        self.sgd = Sgd::new(self.model.params());
        match stage {
            Stage::Warmup => {}
            Stage::Adapt => {
                if data.target.is_empty() {
                    return Err(Error::Dataset("adaptation needs target images".into()));
                }
                self.bank = Some(self.initial_bank(data)?);
                self.thresholds = None;
            }
            Stage::SelfTrain => {
                if data.target.is_empty() {
                    return Err(Error::Dataset("self-training needs target images".into()));
                }
                let (sigma, maps) = self.make_pseudo_labels(&data.target)?;
                if maps.iter().all(|m| m.coverage() == 0) {
                    return Err(Error::Training(
                        "every target pixel fell below its confidence threshold".into(),
                    ));
                }
                self.thresholds = Some(sigma);
                self.pseudo = Some(maps);
            }
        }
        Ok(())
    }

    /// Prototype bank initialized from per-image class means of the source set.
    pub fn initial_bank(&self, data: &Dataset) -> Result<PrototypeBank> {
        let mut bank = PrototypeBank::new(
            self.model.classes(),
            self.model.feature_dim(),
            self.cfg.alpha,
        )?;
        let mut feats = Vec::new();
        let mut masks = Vec::new();
        for chunk in data.source.chunks(self.cfg.calib_batch) {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let inf = self.model.infer(&images)?;
            let per = inf.features.len() / chunk.len();
            for (s, f) in chunk.iter().zip(inf.features.chunks(per)) {
                feats.push(f.to_vec());
                masks.push(downsample_labels(&s.labels, DOWNSAMPLE)?);
            }
        }
        bank.initialize(feats.iter().map(|f| &f[..]).zip(masks.iter()))?;
        if !bank.any_initialized() {
            return Err(Error::Training(
                "prototype bank has no initialized class".into(),
            ));
        }
        Ok(bank)
    }

    /// Output-space thresholds over `images` and the resulting pseudo labels.
    pub fn make_pseudo_labels(
        &self,
        images: &[Image],
    ) -> Result<(Thresholds, Vec<PseudoLabelMap>)> {
        let refs: Vec<&Image> = images.iter().collect();
        let sigma = calibrate_thresholds(
            &self.model,
            &refs,
            ThresholdSpace::Output,
            self.cfg.calib_batch,
        )?;
        let mut maps = Vec::with_capacity(images.len());
        for chunk in refs.chunks(self.cfg.calib_batch) {
            let inf = self.model.infer(chunk)?;
            let per = inf.probs.len() / chunk.len();
            for (img, p) in chunk.iter().zip(inf.probs.chunks(per)) {
                maps.push(pseudo_labels(p, img.height, img.width, &sigma)?);
            }
        }
        Ok((sigma, maps))
    }

    fn log_eval(&mut self, eval: Option<&EvalSet>) -> Result<()> {
        let n = self.window[3].max(1.0);
        let (seg, cl_s, cl_t) = (self.window[0] / n, self.window[1] / n, self.window[2] / n);
        self.window = [0.0; 4];
        let Some(eval) = eval else { return Ok(()) };
        let lr = poly_lr(
            self.iteration,
            self.stage_iters(self.stage),
            self.cfg.lr0,
            self.cfg.poly_power,
        );
        for domain in [Domain::Source, Domain::Target] {
            let cm = evaluate(&self.model, eval.split(domain), self.cfg.calib_batch)?;
            let report = MetricReport::from_confusion(&cm, &eval.tail);
            self.log.push(LogRow {
                stage: self.stage,
                iter: self.iteration,
                split: domain.name().to_string(),
                miou: report.miou,
                miou_tail: report.miou_tail,
                loss_seg: seg,
                loss_cl_s: cl_s,
                loss_cl_t: cl_t,
                lr,
            });
        }
        Ok(())
    }

    /// Latest logged mIoU of `split`, if any.
    pub fn last_miou(&self, stage: Stage, split: Domain) -> Option<f64> {
        self.log
            .iter()
            .rev()
            .find(|r| r.stage == stage && r.split == split.name())
            .map(|r| r.miou)
    }

    pub fn metrics_csv(&self) -> String {
        log::to_csv(&self.log)
    }

    /// One optimization step of the current stage at the current iteration.
    pub fn step(&mut self, data: &Dataset) -> Result<StepLosses> {
        let lr = poly_lr(
            self.iteration,
            self.stage_iters(self.stage),
            self.cfg.lr0,
            self.cfg.poly_power,
        );
        let mut rng = keyed_rng(
            self.cfg.seed,
            self.iteration as u64,
            stream::TRAIN + self.stage.tag(),
        );
        let mut losses = match self.stage {
            Stage::Warmup => self.step_warmup(data, &mut rng, lr)?,
            Stage::Adapt => self.step_adapt(data, &mut rng, lr)?,
            Stage::SelfTrain => self.step_selftrain(data, &mut rng, lr)?,
        };
        losses.lr = lr;
        Ok(losses)
    }

    fn draw_source(&self, data: &Dataset, rng: &mut Rng) -> (Vec<Image>, Vec<LabelMap>) {
        let aug = self.augment_cfg();
        (0..self.cfg.source_batch)
            .map(|_| {
                let s = &data.source[rng.gen_range(0..data.source.len())];
                let (img, lab) = augment(&s.image, Some(&s.labels.data), aug, rng);
                let labels = LabelMap {
                    height: s.labels.height,
                    width: s.labels.width,
                    data: lab.expect("labels pass through"),
                };
                (img, labels)
            })
            .unzip()
    }

    fn draw_target(
        &self,
        data: &Dataset,
        count: usize,
        rng: &mut Rng,
    ) -> Vec<(usize, Image, Option<Vec<u8>>)> {
        let aug = self.augment_cfg();
        (0..count)
            .map(|_| {
                let i = rng.gen_range(0..data.target.len());
                let labels = self.pseudo.as_ref().map(|p| &p[i].values[..]);
                let (img, lab) = augment(&data.target[i], labels, aug, rng);
                (i, img, lab)
            })
            .collect()
    }

    fn apply(&mut self, tape: &mut Tape, vars: &[Var], loss: Var, lr: f64) -> Result<()> {
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        let (m, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        self.sgd.step(self.model.params_mut(), &grads, lr, m, wd);
        Ok(())
    }

    fn step_warmup(&mut self, data: &Dataset, rng: &mut Rng, lr: f64) -> Result<StepLosses> {
        let (images, labels) = self.draw_source(data, rng);
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let refs: Vec<&Image> = images.iter().collect();
        let x = self.model.input(&mut tape, &refs)?;
        let p = self.model.forward_probs(&mut tape, &bound, x)?;
        let lab: Vec<&LabelMap> = labels.iter().collect();
        let seg = segmentation_loss(&mut tape, p, &lab)?;
        let out = StepLosses {
            seg: tape.scalar(seg),
            ..Default::default()
        };
        self.apply(&mut tape, &bound.vars, seg, lr)?;
        Ok(out)
    }

    fn step_adapt(&mut self, data: &Dataset, rng: &mut Rng, lr: f64) -> Result<StepLosses> {
        if self.iteration % self.cfg.threshold_interval == 0 || self.thresholds.is_none() {
            let refs: Vec<&Image> = data.target.iter().collect();
            self.thresholds = Some(calibrate_thresholds(
                &self.model,
                &refs,
                ThresholdSpace::Feature,
                self.cfg.calib_batch,
            )?);
        }
        let (images, labels) = self.draw_source(data, rng);
        let targets = self.draw_target(data, self.cfg.target_batch, rng);
        let bank = self
            .bank
            .as_ref()
            .ok_or_else(|| Error::Training("adaptation without a prototype bank".into()))?;
        if !bank.any_initialized() {
            return Err(Error::Training(
                "prototype bank has no initialized class".into(),
            ));
        }
        let ccfg = self.cfg.contrastive();

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let refs: Vec<&Image> = images.iter().collect();
        let x = self.model.input(&mut tape, &refs)?;
        let fs = self.model.forward(&mut tape, &bound, x)?;
        let p = self.model.probs_from_scores(&mut tape, fs.scores)?;
        let lab: Vec<&LabelMap> = labels.iter().collect();
        let seg = segmentation_loss(&mut tape, p, &lab)?;
        let source_masks = labels
            .iter()
            .map(|l| downsample_labels(l, DOWNSAMPLE))
            .collect::<Result<Vec<Mask>>>()?;
        let mask_refs: Vec<&Mask> = source_masks.iter().collect();
        let cl_s = if self.cfg.source_contrastive {
            source_contrastive(&mut tape, fs.features, &mask_refs, bank, &ccfg)?
        } else {
            tape.constant(&[], vec![0.0])?
        };
        let cl_t = if self.cfg.target_contrastive {
            let timgs: Vec<&Image> = targets.iter().map(|t| &t.1).collect();
            let xt = self.model.input(&mut tape, &timgs)?;
            let ft = self.model.forward(&mut tape, &bound, xt)?;
            let sp = tape.channel_softmax(ft.scores);
            let shape = tape.shape(sp).to_vec();
            let (h, w) = (shape[1], shape[2]);
            let sigma = self.thresholds.as_ref().expect("calibrated above");
            let per = tape.value(sp).len() / timgs.len();
            let masks = tape
                .value(sp)
                .chunks(per)
                .map(|pr| target_mask(pr, h, w, sigma))
                .collect::<Result<Vec<Mask>>>()?;
            let refs: Vec<&Mask> = masks.iter().collect();
            target_contrastive(&mut tape, ft.features, &refs, bank, &ccfg)?
        } else {
            tape.constant(&[], vec![0.0])?
        };
        let total = total_loss(&mut tape, seg, cl_s, cl_t, self.cfg.lambda)?;
        let out = StepLosses {
            seg: tape.scalar(seg),
            cl_s: tape.scalar(cl_s),
            cl_t: tape.scalar(cl_t),
            lr,
        };
        let pre_step = tape.value(fs.features).to_vec();
        self.apply(&mut tape, &bound.vars, total, lr)?;

        let per = pre_step.len() / images.len();
        let bank = self.bank.as_mut().expect("checked above");
        bank.update(pre_step.chunks(per).zip(source_masks.iter()))?;
        Ok(out)
    }

    fn step_selftrain(&mut self, data: &Dataset, rng: &mut Rng, lr: f64) -> Result<StepLosses> {
        if self.pseudo.is_none() {
            return Err(Error::Training(
                "self-training without pseudo labels".into(),
            ));
        }
        let batch = self.draw_target(data, self.cfg.source_batch + self.cfg.target_batch, rng);
        let maps: Vec<PseudoLabelMap> = batch
            .iter()
            .map(|(_, img, lab)| PseudoLabelMap {
                height: img.height,
                width: img.width,
                values: lab.clone().expect("pseudo labels present"),
            })
            .collect();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let refs: Vec<&Image> = batch.iter().map(|b| &b.1).collect();
        let x = self.model.input(&mut tape, &refs)?;
        let p = self.model.forward_probs(&mut tape, &bound, x)?;
        let map_refs: Vec<&PseudoLabelMap> = maps.iter().collect();
        let ssl = self_training_loss(&mut tape, p, &map_refs)?;
        let out = StepLosses {
            seg: tape.scalar(ssl),
            ..Default::default()
        };
        self.apply(&mut tape, &bound.vars, ssl, lr)?;
        Ok(out)
    }
}

fn no_checkpoint(_: &Checkpoint) -> Result<()> {
    Ok(())
}

/// Source-only warm-up from a fresh model.
pub fn stage_a_warmup(
    cfg: &TrainConfig,
    data: &Dataset,
    eval: Option<&EvalSet>,
) -> Result<Trainer> {
    let mut t = Trainer::new(cfg.clone(), data.classes)?;
    t.run_stage(Stage::Warmup, data, eval, &mut no_checkpoint)?;
    Ok(t)
}

/// Prototype contrastive adaptation starting from a finished warm-up.
pub fn stage_b_spcl(
    cfg: &TrainConfig,
    warm: &Checkpoint,
    data: &Dataset,
    eval: Option<&EvalSet>,
) -> Result<Trainer> {
    let mut t = Trainer::from_checkpoint(cfg.clone(), warm)?;
    t.run_stage(Stage::Adapt, data, eval, &mut no_checkpoint)?;
    Ok(t)
}

/// Self-training on frozen pseudo labels starting from a finished adaptation.
pub fn stage_c_selftrain(
    cfg: &TrainConfig,
    adapted: &Checkpoint,
    data: &Dataset,
    eval: Option<&EvalSet>,
) -> Result<Trainer> {
    let mut t = Trainer::from_checkpoint(cfg.clone(), adapted)?;
    t.run_stage(Stage::SelfTrain, data, eval, &mut no_checkpoint)?;
    Ok(t)
}
