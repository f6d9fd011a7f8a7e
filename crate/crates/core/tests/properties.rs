use proptest::prelude::*;

use spcl::losses::contrastive;
use spcl::metrics::{ccd, class_centers, ConfusionMatrix};
use spcl::prototype::{Mask, PrototypeBank};
use spcl::synthdata::io::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use spcl::synthdata::{generate_sample, Domain, DomainShiftParams, SceneSpec};
use spcl::trainer::poly_lr;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| unit(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn miou_is_invariant_to_relabeling(
        pairs in prop::collection::vec((0u8..5, 0u8..5), 1..200),
        perm in Just((0u8..5).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let mut a = ConfusionMatrix::new(5);
        a.accumulate(&pred, &truth).unwrap();
        let map = |v: &[u8]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<_>>();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate(&map(&pred), &map(&truth)).unwrap();
        prop_assert!((a.miou() - b.miou()).abs() < 1e-12);
        prop_assert_eq!(a.total(), pred.len() as u64);
    }

    #[test]
    fn contrastive_is_nonnegative_and_homogeneous(
        u in unit_vec(4),
        pos in unit_vec(4),
        negs in prop::collection::vec(unit_vec(4), 0..5),
        tau in 0.05f64..2.0,
        s in 0.1f64..3.0,
    ) {
        let refs: Vec<&[f64]> = negs.iter().map(|n| &n[..]).collect();
        let l = contrastive(&u, &pos, &refs, tau).unwrap();
        prop_assert!(l >= -1e-12);
        // Scaling u by s and tau by s leaves every logit, and so the loss, unchanged.
        let us: Vec<f64> = u.iter().map(|x| x * s).collect();
        let ls = contrastive(&us, &pos, &refs, tau * s).unwrap();
        prop_assert!((l - ls).abs() < 1e-9, "{} vs {}", l, ls);
    }

    #[test]
    fn ccd_is_scale_invariant(
        feats in prop::collection::vec(-1.0f64..1.0, 24),
        s in 0.1f64..10.0,
    ) {
        let labels = [0u8, 0, 0, 1, 1, 1, 2, 2, 2, 0, 1, 2];
        let centers = class_centers(&feats, &labels, 2, 3);
        let a = ccd(&feats, &labels, 2, &centers);
        let scaled: Vec<f64> = feats.iter().map(|x| x * s).collect();
        let b = ccd(&scaled, &labels, 2, &class_centers(&scaled, &labels, 2, 3));
        match (a, b) {
            (Ok(a), Ok(b)) => for (x, y) in a.iter().zip(&b) {
                let (x, y) = (x.unwrap(), y.unwrap());
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            },
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn prototypes_stay_unit_norm(
        alpha in 0.0f64..1.0,
        batches in prop::collection::vec(prop::collection::vec((unit_vec(3), 0u8..3), 16), 1..6),
    ) {
        let mut bank = PrototypeBank::new(3, 3, alpha).unwrap();
        for (i, batch) in batches.iter().enumerate() {
            let feats: Vec<f64> = batch.iter().flat_map(|(f, _)| f.clone()).collect();
            let mask = Mask::new(4, 4, batch.iter().map(|(_, c)| *c).collect()).unwrap();
            if i == 0 {
                bank.initialize([(&feats[..], &mask)]).unwrap();
            } else {
                bank.update([(&feats[..], &mask)]).unwrap();
            }
            for c in 0..3 {
                if let Some(p) = bank.prototype(c) {
                    let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                    prop_assert!((n - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn poly_lr_is_non_increasing(max in 1usize..500, lr0 in 1e-4f64..1.0, power in 0.1f64..2.0) {
        let mut prev = f64::INFINITY;
        for i in 0..=max {
            let lr = poly_lr(i, max, lr0, power);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(0, max, lr0, power), lr0);
    }

    #[test]
    fn scenes_survive_the_file_formats(seed in 0u64..1000, index in 0u64..50) {
        let spec = SceneSpec::desk(seed).with_size(12, 20);
        let s = generate_sample(&spec, &DomainShiftParams::default_shift(), Domain::Target, index).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&s.labels)).unwrap(), s.labels.clone());
        let img = decode_ppm(&encode_ppm(&s.image, &[])).unwrap();
        prop_assert_eq!((img.height, img.width), (12, 20));
        let err = img.data.iter().zip(&s.image.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 0.5 / 255.0 + 1e-12);
        prop_assert!(s.labels.data.iter().all(|&c| (c as usize) < spec.classes));
    }
}
