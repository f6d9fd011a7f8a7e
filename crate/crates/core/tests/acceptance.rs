//! Acceptance criteria 1 to 9, one pass/fail line each.
//!
//! Lines go straight to stderr so they show without `--nocapture`.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spcl::autodiff::Tape;
use spcl::experiment::{measure, median, run_stages};
use spcl::gradcheck;
use spcl::losses::{contrastive, segmentation_loss};
use spcl::metrics::{ccd, ConfusionMatrix};
use spcl::prototype::{Mask, PrototypeBank};
use spcl::synthdata::{DomainShiftParams, LabelMap, SceneSpec};
use spcl::trainer::{synthetic, Checkpoint, Dataset, EvalSet, Stage, TrainConfig, Trainer};
use spcl::IGNORE;

const SEEDS: [u64; 3] = [0, 1, 2];
const SCENES: usize = 64;
const CCD_IMAGES: usize = 32;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {} {status}: {}",
        v.id,
        v.detail
    );
}

fn gradient_suite() -> Verdict {
    let t0 = Instant::now();
    let r = gradcheck::run(20, 0).expect("gradient suite");
    let secs = t0.elapsed().as_secs_f64();
    let min_instances = r.cases.iter().map(|c| c.instances).min().unwrap_or(0);
    Verdict {
        id: 1,
        pass: r.passed() && min_instances >= 20 && secs <= 120.0,
        detail: format!(
            "{} cases, >= {min_instances} instances each, max rel error {:.2e}, prototype grad zero {}, {secs:.1}s",
            r.cases.len(),
            r.max_rel_error(),
            r.prototype_grad_zero
        ),
    }
}

fn loss_units() -> Verdict {
    let u = [1.0, 0.0];
    let none = contrastive(&u, &[0.6, 0.8], &[], 0.1).unwrap();
    let sym = contrastive(&u, &[0.6, 0.8], &[&[0.6, -0.8][..]], 0.3).unwrap();
    let sym = (sym - 2f64.ln()).abs();
    // u.pos = 0.8 with negatives at 0.2 and -0.5.
    let pos = [0.8, 0.6];
    let n1 = [0.2, (1.0f64 - 0.04).sqrt()];
    let n2 = [-0.5, (1.0f64 - 0.25).sqrt()];
    let case = contrastive(&u, &pos, &[&n1[..], &n2[..]], 0.5).unwrap();
    let classes = 8;
    let mut tape = Tape::new();
    let probs = tape
        .constant(
            &[1, 4, 4, classes],
            vec![1.0 / classes as f64; 16 * classes],
        )
        .unwrap();
    let labels = LabelMap {
        height: 4,
        width: 4,
        data: (0..16).map(|i| (i % classes) as u8).collect(),
    };
    let seg = segmentation_loss(&mut tape, probs, &[&labels]).unwrap();
    let seg = tape.scalar(seg);
    let ok = none == 0.0
        && sym <= 1e-9
        && (case - 0.31875).abs() <= 1e-4
        && (seg - (classes as f64).ln()).abs() <= 1e-9;
    Verdict {
        id: 2,
        pass: ok,
        detail: format!("no-negative {none}, symmetric |err| {sym:.1e}, hand case {case:.5}, uniform seg {seg:.9} vs ln {classes}"),
    }
}

fn random_batch(rng: &mut ChaCha8Rng, classes: usize, dim: usize, side: usize) -> (Vec<f64>, Mask) {
    let n = side * side;
    let mut feats: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for x in feats.chunks_mut(dim) {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
    }
    let mask: Vec<u8> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                IGNORE
            } else {
                rng.gen_range(0..classes) as u8
            }
        })
        .collect();
    (feats, Mask::new(side, side, mask).unwrap())
}

fn unit_norm_err(bank: &PrototypeBank) -> f64 {
    (0..bank.classes())
        .filter_map(|c| bank.prototype(c))
        .map(|p| (p.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn prototype_contract() -> Verdict {
    let (classes, dim) = (4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init = random_batch(&mut rng, classes, dim, 8);

    let mut fixed = PrototypeBank::new(classes, dim, 1.0).unwrap();
    fixed.initialize([(&init.0[..], &init.1)]).unwrap();
    let before = fixed.storage().to_vec();
    let mut norm_err = unit_norm_err(&fixed);
    for _ in 0..100 {
        let b = random_batch(&mut rng, classes, dim, 8);
        fixed.update([(&b.0[..], &b.1)]).unwrap();
        norm_err = norm_err.max(unit_norm_err(&fixed));
    }
    let frozen = fixed
        .storage()
        .iter()
        .zip(&before)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut ema = PrototypeBank::new(classes, dim, 0.0).unwrap();
    ema.initialize([(&init.0[..], &init.1)]).unwrap();
    let mut mean_err = 0.0f64;
    for _ in 0..100 {
        let b = random_batch(&mut rng, classes, dim, 8);
        ema.update([(&b.0[..], &b.1)]).unwrap();
        norm_err = norm_err.max(unit_norm_err(&ema));
        for c in 0..classes {
            let mut mean = vec![0.0; dim];
            let mut n = 0;
            for (x, &l) in b.0.chunks(dim).zip(&b.1.values) {
                if l as usize == c {
                    mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
                    n += 1;
                }
            }
            if n == 0 {
                continue;
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let p = ema.prototype(c).unwrap();
            for (a, m) in p.iter().zip(&mean) {
                mean_err = mean_err.max((a - m / norm).abs());
            }
        }
    }
    Verdict {
        id: 3,
        pass: frozen && mean_err <= 1e-9 && norm_err <= 1e-9,
        detail: format!("alpha=1 bit-identical {frozen}, alpha=0 batch-mean err {mean_err:.1e}, max unit-norm err {norm_err:.1e}"),
    }
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = 0;
    for _ in 0..50 {
        let classes = rng.gen_range(2..=8usize);
        let pred: Vec<u8> = (0..256).map(|_| rng.gen_range(0..classes) as u8).collect();
        let truth: Vec<u8> = (0..256)
            .map(|_| {
                if rng.gen_bool(0.05) {
                    IGNORE
                } else {
                    rng.gen_range(0..classes) as u8
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &truth).unwrap();
        let mut ious = Vec::new();
        let mut ok = true;
        for c in 0..classes as u8 {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &t) in pred.iter().zip(&truth) {
                if t == IGNORE {
                    continue;
                }
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let denom = tp + fp + fn_;
            let oracle = (denom > 0).then(|| tp as f64 / denom as f64);
            ok &= cm.iou(c as usize) == oracle;
            ious.extend(oracle);
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        ok &= cm.miou() == miou;
        exact += ok as usize;
    }
    let r = 0.5f64.sqrt();
    let feats = [1.0, 0.0, 0.0, 1.0];
    let centers = [Some(vec![r, r]), Some(vec![-1.0, 0.0])];
    let cdd = ccd(&feats, &[0, 0], 2, &centers).unwrap()[0].unwrap();
    let expected = 3.0 - 2.0 * 2f64.sqrt();
    Verdict {
        id: 4,
        pass: exact == 50 && (cdd - expected).abs() <= 1e-9,
        detail: format!(
            "{exact}/50 oracle instances exact, hand-case CCD {cdd:.12} vs {expected:.12}"
        ),
    }
}

struct SeedRun {
    a: f64,
    b: f64,
    c: f64,
    seg_only: f64,
    source_only_cl: f64,
    alpha_one: f64,
    ccd_a: (f64, f64),
    ccd_b: (f64, f64),
    secs: f64,
    final_ck: Vec<u8>,
    metrics: String,
}

fn full_run(
    cfg: &TrainConfig,
    data: &Dataset,
    eval: &EvalSet,
) -> (Trainer, Checkpoint, Checkpoint) {
    let mut t = Trainer::new(cfg.clone(), data.classes).unwrap();
    let mut done: Vec<Checkpoint> = Vec::new();
    for stage in [Stage::Warmup, Stage::Adapt, Stage::SelfTrain] {
        t.run_stage(stage, data, Some(eval), &mut |ck| {
            if ck.complete {
                done.push(ck.clone());
            }
            Ok(())
        })
        .unwrap();
    }
    let b = done.remove(1);
    let a = done.remove(0);
    (t, a, b)
}

fn seed_run(seed: u64) -> SeedRun {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let (data, eval) = synthetic(
        &SceneSpec::desk(seed),
        &DomainShiftParams::default_shift(),
        SCENES,
    )
    .unwrap();
    let t0 = Instant::now();
    let (t, ck_a, ck_b) = full_run(&cfg, &data, &eval);
    let secs = t0.elapsed().as_secs_f64();
    let target = spcl::synthdata::Domain::Target;
    let ma = measure(&ck_a.model().unwrap(), &eval, CCD_IMAGES, seed).unwrap();
    let mb = measure(&ck_b.model().unwrap(), &eval, CCD_IMAGES, seed).unwrap();
    let variant = |edit: &dyn Fn(&mut TrainConfig)| -> f64 {
        let mut c = cfg.clone();
        edit(&mut c);
        let b = run_stages(&c, Some(&ck_a), &[Stage::Adapt], &data, None).unwrap();
        measure(&b.model, &eval, 0, seed).unwrap().target.miou
    };
    let seg_only = variant(&|c| {
        c.source_contrastive = false;
        c.target_contrastive = false;
    });
    let source_only_cl = variant(&|c| c.target_contrastive = false);
    let alpha_one = variant(&|c| c.alpha = 1.0);
    SeedRun {
        a: t.last_miou(Stage::Warmup, target).unwrap(),
        b: t.last_miou(Stage::Adapt, target).unwrap(),
        c: t.last_miou(Stage::SelfTrain, target).unwrap(),
        seg_only,
        source_only_cl,
        alpha_one,
        ccd_a: (ma.ccd_source.unwrap(), ma.ccd_target.unwrap()),
        ccd_b: (mb.ccd_source.unwrap(), mb.ccd_target.unwrap()),
        secs,
        final_ck: t.checkpoint().to_bytes(),
        metrics: t.metrics_csv(),
    }
}

fn pts(v: f64) -> f64 {
    100.0 * v
}

#[test]
fn acceptance() {
    let mut verdicts = vec![
        gradient_suite(),
        loss_units(),
        prototype_contract(),
        metric_oracle(),
    ];
    verdicts.iter().for_each(report);

    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| seed_run(s)).collect();
    let med = |f: &dyn Fn(&SeedRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let list = |f: &dyn Fn(&SeedRun) -> f64| {
        runs.iter()
            .map(|r| format!("{:.1}", pts(f(r))))
            .collect::<Vec<_>>()
            .join("/")
    };

    let (a, b, c) = (med(&|r| r.a), med(&|r| r.b), med(&|r| r.c));
    let c_ge_b = runs.iter().filter(|r| r.c >= r.b).count();
    let secs: f64 = runs.iter().map(|r| r.secs).sum();
    let v = Verdict {
        id: 5,
        pass: pts(a) + 3.0 <= pts(b) && b <= c && c_ge_b >= 2 && secs <= 900.0,
        detail: format!(
            "median target mIoU A {:.2} B {:.2} C {:.2} (A {} B {} C {}), C >= B in {c_ge_b}/3 seeds, {secs:.0}s",
            pts(a),
            pts(b),
            pts(c),
            list(&|r| r.a),
            list(&|r| r.b),
            list(&|r| r.c)
        ),
    };
    report(&v);
    verdicts.push(v);

    let (s0, s1) = (med(&|r| r.seg_only), med(&|r| r.source_only_cl));
    let v = Verdict {
        id: 6,
        pass: pts(s1) - pts(s0) >= 0.5 && pts(b) - pts(s1) >= 0.5,
        detail: format!(
            "median target mIoU seg-only {:.2} < +source cl {:.2} < +both {:.2} (seg-only {}, +source {})",
            pts(s0),
            pts(s1),
            pts(b),
            list(&|r| r.seg_only),
            list(&|r| r.source_only_cl)
        ),
    };
    report(&v);
    verdicts.push(v);

    let a1 = med(&|r| r.alpha_one);
    let v = Verdict {
        id: 7,
        pass: b > a1,
        detail: format!(
            "median target mIoU alpha=0.1 {:.2} vs alpha=1 {:.2} ({})",
            pts(b),
            pts(a1),
            list(&|r| r.alpha_one)
        ),
    };
    report(&v);
    verdicts.push(v);

    let lower = runs
        .iter()
        .filter(|r| r.ccd_b.0 < r.ccd_a.0 && r.ccd_b.1 < r.ccd_a.1)
        .count();
    let pairs = runs
        .iter()
        .map(|r| {
            format!(
                "{:.3}->{:.3} / {:.3}->{:.3}",
                r.ccd_a.0, r.ccd_b.0, r.ccd_a.1, r.ccd_b.1
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    let v = Verdict {
        id: 8,
        pass: lower == 3,
        detail: format!("mean CCD lower after adaptation on both splits in {lower}/3 seeds (source / target: {pairs})"),
    };
    report(&v);
    verdicts.push(v);

    let again = seed_run_repeat(SEEDS[0]);
    let same_ck = again.0 == runs[0].final_ck;
    let same_csv = again.1 == runs[0].metrics;
    let v = Verdict {
        id: 9,
        pass: same_ck && same_csv,
        detail: format!(
            "repeat run of seed {}: checkpoint identical {same_ck} ({} bytes), metrics CSV identical {same_csv}",
            SEEDS[0],
            again.0.len()
        ),
    };
    report(&v);
    verdicts.push(v);

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn seed_run_repeat(seed: u64) -> (Vec<u8>, String) {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let (data, eval) = synthetic(
        &SceneSpec::desk(seed),
        &DomainShiftParams::default_shift(),
        SCENES,
    )
    .unwrap();
    let (t, _, _) = full_run(&cfg, &data, &eval);
    (t.checkpoint().to_bytes(), t.metrics_csv())
}
