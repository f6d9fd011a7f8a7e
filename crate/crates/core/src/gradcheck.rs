//! Central finite-difference checks of the tape gradients.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::losses::{
    prototype_contrastive_keyed, segmentation_loss, target_mask, total_loss, ContrastiveConfig,
    ThresholdSpace, Thresholds,
};
use crate::prototype::{downsample_labels, Mask, PrototypeBank};
use crate::rng::{keyed_rng, stream, Rng};
use crate::segnet::{Bound, SegModel, DOWNSAMPLE};
use crate::synthdata::{generate_sample, Domain, DomainShiftParams, Image, LabelMap, SceneSpec};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

type Inputs = Vec<(Vec<usize>, Vec<f64>)>;

fn record<F>(
    tape: &mut Tape,
    inputs: &Inputs,
    f: &F,
    weights: Option<&[f64]>,
) -> Result<(Vec<Var>, Var, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let vars = inputs
        .iter()
        .map(|(s, v)| tape.param(s, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(tape, &vars)?;
    let n = tape.tensor(out).numel();
    let shape = tape.shape(out).to_vec();
    let w = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let w = tape.constant(&shape, w)?;
    let prod = tape.mul(out, w)?;
    Ok((vars, tape.sum_all(prod), n))
}

/// Largest relative error between the tape gradient and central differences
/// of `sum(f(inputs) * w)` for a random projection `w`. At most `max_coords`
/// coordinates per input are probed (all when the input is smaller).
///
/// A probe whose `+-STEP` evaluations switch any ReLU relative to the base
/// point straddles a kink, where no derivative exists; it is skipped and,
/// for sampled inputs, redrawn.
pub fn check<F>(inputs: &Inputs, f: F, max_coords: usize, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = Tape::new();
    let (_, _, n) = record(&mut probe, inputs, &f, None)?;
    let weights: Vec<f64> = if n == 1 {
        vec![1.0]
    } else {
        let u = Uniform::new(-1.0, 1.0);
        (0..n).map(|_| u.sample(rng)).collect()
    };
    let mut tape = Tape::new();
    let (vars, loss, _) = record(&mut tape, inputs, &f, Some(&weights))?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    let pattern = tape.relu_pattern();

    let value_at = |inputs: &Inputs| -> Result<(f64, bool)> {
        let mut t = Tape::new();
        let (_, l, _) = record(&mut t, inputs, &f, Some(&weights))?;
        Ok((t.scalar(l), t.relu_pattern() == pattern))
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.clone();
    for (i, (_, values)) in inputs.iter().enumerate() {
        let sampled = values.len() > max_coords;
        let (mut checked, mut tries) = (0, 0);
        while checked < max_coords.min(values.len()) && tries < 4 * max_coords.max(values.len()) {
            let j = if sampled {
                rng.gen_range(0..values.len())
            } else {
                tries
            };
            tries += 1;
            if !sampled && j >= values.len() {
                break;
            }
            let orig = values[j];
            work[i].1[j] = orig + STEP;
            let (plus, same_plus) = value_at(&work)?;
            work[i].1[j] = orig - STEP;
            let (minus, same_minus) = value_at(&work)?;
            work[i].1[j] = orig;
            if !(same_plus && same_minus) {
                continue;
            }
            checked += 1;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_error(grads[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of one family of checks.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub cases: Vec<CaseResult>,
    /// The prototype key matrix received no gradient.
    pub prototype_grad_zero: bool,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.prototype_grad_zero && self.cases.iter().all(CaseResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let u = Uniform::new(lo, hi);
    (0..n).map(|_| u.sample(rng)).collect()
}

/// Values in `[-1, 1]` kept at least 0.05 away from zero (relu kink).
fn off_zero(rng: &mut Rng, n: usize) -> Vec<f64> {
    uniform(rng, n, 0.05, 1.0)
        .into_iter()
        .map(|v| if rng.gen_bool(0.5) { v } else { -v })
        .collect()
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;
type Case = (&'static str, fn(&mut Rng) -> Inputs, OpFn);

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn pair(rng: &mut Rng) -> Inputs {
    let shape = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    let n = shape[0] * shape[1];
    vec![
        (shape.clone(), uniform(rng, n, -1.0, 1.0)),
        (shape, uniform(rng, n, -1.0, 1.0)),
    ]
}

fn map_in(rng: &mut Rng) -> Inputs {
    let shape = vec![
        dims(rng, 1, 2),
        dims(rng, 2, 4),
        dims(rng, 2, 4),
        dims(rng, 2, 4),
    ];
    let n = shape.iter().product();
    vec![(shape, uniform(rng, n, -1.5, 1.5))]
}

/// The differentiable operations and small random input generators.
fn cases() -> Vec<Case> {
    vec![
        ("add", pair, |t, v| t.add(v[0], v[1])),
        ("sub", pair, |t, v| t.sub(v[0], v[1])),
        ("mul", pair, |t, v| t.mul(v[0], v[1])),
        ("scale", pair, |t, v| Ok(t.scale(v[0], -1.7))),
        (
            "matmul",
            |rng| {
                let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 3));
                vec![
                    (vec![m, k], uniform(rng, m * k, -1.0, 1.0)),
                    (vec![k, n], uniform(rng, k * n, -1.0, 1.0)),
                ]
            },
            |t, v| t.matmul(v[0], v[1]),
        ),
        (
            "conv2d_s1",
            |rng| {
                let (h, w, ci, co) = (
                    dims(rng, 2, 6),
                    dims(rng, 2, 6),
                    dims(rng, 1, 3),
                    dims(rng, 1, 3),
                );
                let k = if rng.gen_bool(0.5) { 3 } else { 1 };
                vec![
                    (vec![h, w, ci], uniform(rng, h * w * ci, -1.0, 1.0)),
                    (vec![k, k, ci, co], uniform(rng, k * k * ci * co, -1.0, 1.0)),
                ]
            },
            |t, v| {
                let k = t.shape(v[1])[0];
                t.conv2d(v[0], v[1], 1, (k - 1) / 2)
            },
        ),
        (
            "conv2d_s2",
            |rng| {
                let (b, h, w, ci, co) = (
                    dims(rng, 1, 2),
                    dims(rng, 3, 8),
                    dims(rng, 3, 8),
                    dims(rng, 1, 3),
                    4,
                );
                vec![
                    (vec![b, h, w, ci], uniform(rng, b * h * w * ci, -1.0, 1.0)),
                    (vec![3, 3, ci, co], uniform(rng, 9 * ci * co, -1.0, 1.0)),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], 2, 1),
        ),
        (
            "add_channel_bias",
            |rng| {
                let mut x = map_in(rng);
                let c = *x[0].0.last().unwrap();
                x.push((vec![c], uniform(rng, c, -1.0, 1.0)));
                x
            },
            |t, v| t.add_channel_bias(v[0], v[1]),
        ),
        (
            "relu",
            |rng| {
                let n = dims(rng, 2, 12);
                vec![(vec![n], off_zero(rng, n))]
            },
            |t, v| Ok(t.relu(v[0])),
        ),
        (
            "log",
            |rng| {
                let n = dims(rng, 2, 12);
                vec![(vec![n], uniform(rng, n, 0.3, 2.0))]
            },
            |t, v| Ok(t.log(v[0])),
        ),
        (
            "channel_softmax",
            map_in,
            |t, v| Ok(t.channel_softmax(v[0])),
        ),
        ("log_softmax", map_in, |t, v| Ok(t.log_softmax(v[0]))),
        ("bilinear_upsample_2", map_in, |t, v| {
            t.bilinear_upsample(v[0], 2)
        }),
        ("bilinear_upsample_4", map_in, |t, v| {
            t.bilinear_upsample(v[0], 4)
        }),
        ("l2_normalize_channels", map_in, |t, v| {
            t.l2_normalize_channels(v[0], 1e-12)
        }),
        ("reduce_sum", map_in, |t, v| t.reduce_sum(v[0], &[1, 3])),
        ("reduce_mean", map_in, |t, v| t.reduce_mean(v[0], &[0, 2])),
        ("sum_all", map_in, |t, v| Ok(t.sum_all(v[0]))),
        ("mean_all", map_in, |t, v| Ok(t.mean_all(v[0]))),
        ("reshape", map_in, |t, v| {
            let n = t.tensor(v[0]).numel();
            t.reshape(v[0], &[n])
        }),
        (
            "nll",
            |rng| {
                let (p, c) = (dims(rng, 1, 6), dims(rng, 2, 5));
                vec![(vec![p, c], uniform(rng, p * c, -2.0, 0.0))]
            },
            |t, v| {
                let [p, c] = *t.shape(v[0]) else {
                    unreachable!()
                };
                let targets: Vec<Option<usize>> = (0..p)
                    .map(|i| (i % 3 != 2).then_some((i * 7) % c))
                    .collect();
                t.nll(v[0], &targets)
            },
        ),
    ]
}

/// Every differentiable tape operation over `trials` random instances.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(k, (name, gen, f))| {
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                let mut rng = keyed_rng(seed, trial as u64, stream::GRADCHECK + k as u64);
                let inputs = gen(&mut rng);
                worst = worst.max(check(&inputs, f, 64, &mut rng)?);
            }
            Ok(CaseResult {
                name: name.to_string(),
                instances: trials,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// Fixed ingredients of the composed objective on a small batch.
pub struct ObjectiveFixture {
    pub model: SegModel,
    pub source: Vec<Image>,
    pub labels: Vec<LabelMap>,
    pub target: Vec<Image>,
    pub source_masks: Vec<Mask>,
    pub target_masks: Vec<Mask>,
    pub bank: PrototypeBank,
    pub cfg: ContrastiveConfig,
    pub lambda: f64,
}

impl ObjectiveFixture {
    /// Two source and two target `size x size` scenes, a model with random
    /// nonzero biases, a bank initialized from the source batch, and target
    /// masks fixed from the unperturbed forward pass.
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        let spec = SceneSpec::desk(seed).with_size(size, size);
        let shift = DomainShiftParams::default_shift();
        let mut source = Vec::new();
        let mut labels = Vec::new();
        let mut target = Vec::new();
        for i in 0..2 {
            let s = generate_sample(&spec, &shift, Domain::Source, i)?;
            source.push(s.image);
            labels.push(s.labels);
            target.push(generate_sample(&spec, &shift, Domain::Target, i + 2)?.image);
        }
        let mut model = SegModel::new(8, spec.classes, seed);
        let mut rng = keyed_rng(seed, 0, stream::GRADCHECK + 0x100);
        for p in model.params_mut() {
            if p.name.ends_with(".bias") {
                p.values = uniform(&mut rng, p.values.len(), 0.05, 0.2);
            }
        }
        let source_masks = labels
            .iter()
            .map(|l| downsample_labels(l, DOWNSAMPLE))
            .collect::<Result<Vec<_>>>()?;
        let src_refs: Vec<&Image> = source.iter().collect();
        let inf = model.infer(&src_refs)?;
        let per = inf.features.len() / 2;
        let mut bank = PrototypeBank::new(spec.classes, 8, 0.1)?;
        bank.initialize(inf.features.chunks(per).zip(source_masks.iter()))?;
        let tgt_refs: Vec<&Image> = target.iter().collect();
        let tinf = model.infer(&tgt_refs)?;
        let sigma = Thresholds::uniform(spec.classes, 0.0, ThresholdSpace::Feature);
        let (h, w) = (size / DOWNSAMPLE, size / DOWNSAMPLE);
        let target_masks = tinf
            .score_probs
            .chunks(tinf.score_probs.len() / 2)
            .map(|p| target_mask(p, h, w, &sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(ObjectiveFixture {
            model,
            source,
            labels,
            target,
            source_masks,
            target_masks,
            bank,
            cfg: ContrastiveConfig {
                temperature: 0.5,
                lambda: 1.0,
            },
            lambda: 1.0,
        })
    }

    /// `L_seg + lambda * (L_cl_s + L_cl_t)` with the model parameters bound to
    /// `params`; also returns the two prototype key matrices.
    pub fn objective(&self, tape: &mut Tape, params: &[Var]) -> Result<(Var, Vec<Var>)> {
        let bound = Bound {
            vars: params.to_vec(),
        };
        let m = &self.model;
        let src: Vec<&Image> = self.source.iter().collect();
        let xs = m.input(tape, &src)?;
        let fs = m.forward(tape, &bound, xs)?;
        let p = m.probs_from_scores(tape, fs.scores)?;
        let labels: Vec<&LabelMap> = self.labels.iter().collect();
        let seg = segmentation_loss(tape, p, &labels)?;
        let sm: Vec<&Mask> = self.source_masks.iter().collect();
        let (cls, ks) = prototype_contrastive_keyed(tape, fs.features, &sm, &self.bank, &self.cfg)?;
        let tgt: Vec<&Image> = self.target.iter().collect();
        let xt = m.input(tape, &tgt)?;
        let ft = m.forward_features(tape, &bound, xt)?;
        let tm: Vec<&Mask> = self.target_masks.iter().collect();
        let (clt, kt) = prototype_contrastive_keyed(tape, ft, &tm, &self.bank, &self.cfg)?;
        let total = total_loss(tape, seg, cls, clt, self.lambda)?;
        Ok((total, ks.into_iter().chain(kt).collect()))
    }

    pub fn inputs(&self) -> Inputs {
        self.model
            .params()
            .iter()
            .map(|p| (p.shape.clone(), p.values.clone()))
            .collect()
    }
}

/// Composed objective check plus the prototype stop-gradient check.
pub fn objective_check(seed: u64, coords: usize) -> Result<(CaseResult, bool)> {
    let fx = ObjectiveFixture::new(16, seed)?;
    let mut rng = keyed_rng(seed, 1, stream::GRADCHECK + 0x100);
    let err = check(
        &fx.inputs(),
        |t, v| fx.objective(t, v).map(|(l, _)| l),
        coords,
        &mut rng,
    )?;

    let mut tape = Tape::new();
    let vars = fx
        .inputs()
        .iter()
        .map(|(s, v)| tape.param(s, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let (loss, keys) = fx.objective(&mut tape, &vars)?;
    tape.backward(loss)?;
    let zero = !keys.is_empty()
        && keys
            .iter()
            .all(|&k| tape.grad(k).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    Ok((
        CaseResult {
            name: "total_objective".into(),
            instances: 1,
            max_rel_error: err,
        },
        zero,
    ))
}

/// Cross-entropy through the whole model on an 8x8 input.
pub fn model_check(seed: u64, coords: usize) -> Result<CaseResult> {
    let spec = SceneSpec::desk(seed).with_size(8, 8);
    let s = generate_sample(&spec, &DomainShiftParams::identity(), Domain::Source, 0)?;
    let mut model = SegModel::new(8, spec.classes, seed);
    let mut rng = keyed_rng(seed, 2, stream::GRADCHECK + 0x100);
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            p.values = uniform(&mut rng, p.values.len(), 0.05, 0.2);
        }
    }
    let inputs: Inputs = model
        .params()
        .iter()
        .map(|p| (p.shape.clone(), p.values.clone()))
        .collect();
    let err = check(
        &inputs,
        |t, v| {
            let bound = Bound { vars: v.to_vec() };
            let x = model.input(t, &[&s.image])?;
            let p = model.forward_probs(t, &bound, x)?;
            segmentation_loss(t, p, &[&s.labels])
        },
        coords,
        &mut rng,
    )?;
    Ok(CaseResult {
        name: "segnet_cross_entropy".into(),
        instances: 1,
        max_rel_error: err,
    })
}

/// Full suite: per-op checks, the model cross-entropy, and the composed
/// objective, each over `trials` instances.
pub fn run(trials: usize, seed: u64) -> Result<Report> {
    let mut cases = op_suite(trials, seed)?;
    let mut model = CaseResult {
        name: "segnet_cross_entropy".into(),
        instances: 0,
        max_rel_error: 0.0,
    };
    let mut total = CaseResult {
        name: "total_objective".into(),
        instances: 0,
        max_rel_error: 0.0,
    };
    let mut zero = true;
    for t in 0..trials as u64 {
        let s = seed.wrapping_add(t);
        let m = model_check(s, 24)?;
        model.max_rel_error = model.max_rel_error.max(m.max_rel_error);
        model.instances += 1;
        let (o, z) = objective_check(s, 24)?;
        total.max_rel_error = total.max_rel_error.max(o.max_rel_error);
        total.instances += 1;
        zero &= z;
    }
    cases.push(model);
    cases.push(total);
    Ok(Report {
        cases,
        prototype_grad_zero: zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn probes_across_a_relu_kink_are_skipped() {
        let mut rng = keyed_rng(0, 0, stream::GRADCHECK);
        // The middle coordinate sits within STEP of the kink.
        let inputs = vec![(vec![3], vec![0.5, 0.3 * STEP, -0.7])];
        let err = check(&inputs, |t, v| Ok(t.relu(v[0])), 8, &mut rng).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = keyed_rng(0, 0, stream::GRADCHECK);
        let inputs = vec![(vec![3], vec![0.5, -0.2, 0.9])];
        // value 3x^2 recorded with the gradient of x^2
        let err = check(
            &inputs,
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let vals: Vec<f64> = t.value(sq).iter().map(|x| 2.0 * x).collect();
                let c = t.constant(&[3], vals)?;
                t.add(sq, c)
            },
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn small_suite_passes() {
        let cases = op_suite(3, 11).unwrap();
        for c in &cases {
            assert!(c.passed(), "{} {}", c.name, c.max_rel_error);
        }
    }
}
