//! Frozen checksums of deterministic outputs. A change here means generated
//! data, initialization or augmentation changed for every downstream run.

use sha2::{Digest, Sha256};

use spcl::rng::{keyed_rng, stream};
use spcl::segnet::SegModel;
use spcl::synthdata::io::manifest_text;
use spcl::synthdata::{generate_sample, Domain, DomainShiftParams, SceneSpec};
use spcl::trainer::{augment, AugmentConfig};

fn digest_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

fn digest_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn scenes() -> Vec<(Vec<f64>, Vec<u8>)> {
    let spec = SceneSpec::desk(0);
    let shift = DomainShiftParams::default_shift();
    [Domain::Source, Domain::Target]
        .into_iter()
        .flat_map(|d| (0..4).map(move |i| (d, i)))
        .map(|(d, i)| {
            let s = generate_sample(&spec, &shift, d, i).unwrap();
            (s.image.data, s.labels.data)
        })
        .collect()
}

#[test]
fn first_scenes() {
    let s = scenes();
    let images: Vec<f64> = s.iter().flat_map(|(i, _)| i.clone()).collect();
    let labels: Vec<u8> = s.iter().flat_map(|(_, l)| l.clone()).collect();
    assert_eq!(
        digest_f64(&images),
        "fc014b252be535fa0e898d655cbce8d5177a65230dc671c1475cd5de51ad71e3"
    );
    assert_eq!(
        digest_bytes(&labels),
        "ca3d2bc68724ca63b364013e6a900f1d2224edb62494875b84e628502415d6c8"
    );
}

#[test]
fn initial_model_output() {
    let spec = SceneSpec::desk(0);
    let s = generate_sample(&spec, &DomainShiftParams::identity(), Domain::Source, 0).unwrap();
    let model = SegModel::new(32, spec.classes, 0);
    let inf = model.infer(&[&s.image]).unwrap();
    assert_eq!(
        digest_f64(&inf.features),
        "5289e2ae60618ec843565d05a4abb71020dbabf1a01cbefaf984c07d69b636d9"
    );
    assert_eq!(
        digest_f64(&inf.probs),
        "803f0e13c5faf02aa06f2f989b6230bf3c62835e78c3ca439fbdead1721bf7a0"
    );
}

#[test]
fn augmentation_draws() {
    let spec = SceneSpec::desk(0);
    let s = generate_sample(&spec, &DomainShiftParams::identity(), Domain::Source, 1).unwrap();
    let mut rng = keyed_rng(0, 0, stream::TRAIN);
    let cfg = AugmentConfig {
        flip: true,
        jitter: true,
    };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..4 {
        let (img, lab) = augment(&s.image, Some(&s.labels.data), cfg, &mut rng);
        values.extend(img.data);
        labels.extend(lab.unwrap());
    }
    assert_eq!(
        digest_f64(&values),
        "f385de4ff14ca465429f76d7d4ad110a65a436dbbb2a33b445987a87dfa2f282"
    );
    assert_eq!(
        digest_bytes(&labels),
        "6af631e59cac10313ec1afd3bbc7527eff9888cb0d4053ffe2366403dfe5fa5a"
    );
}

#[test]
fn manifest() {
    let text = manifest_text(
        &SceneSpec::desk(0),
        &DomainShiftParams::default_shift(),
        100,
    );
    assert_eq!(
        digest_bytes(text.as_bytes()),
        "c38f31a5b7543cf2c5347db02f5df56671d48a92be963ac8deaa29ecbb6f5c19"
    );
}
