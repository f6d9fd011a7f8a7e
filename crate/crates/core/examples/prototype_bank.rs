//! Initializes class prototypes from source features and applies EMA updates.

use spcl::prototype::{downsample_labels, PrototypeBank};
use spcl::segnet::{SegModel, DOWNSAMPLE};
use spcl::synthdata::{generate_sample, Domain, DomainShiftParams, SceneSpec};

fn main() -> spcl::Result<()> {
    let spec = SceneSpec::desk(1);
    let model = SegModel::new(16, spec.classes, 1);
    let shift = DomainShiftParams::identity();
    let batch = |from: u64| -> spcl::Result<Vec<_>> {
        (from..from + 4)
            .map(|i| {
                let s = generate_sample(&spec, &shift, Domain::Source, i)?;
                let feats = model.infer(&[&s.image])?.features;
                Ok((feats, downsample_labels(&s.labels, DOWNSAMPLE)?))
            })
            .collect()
    };

    let mut bank = PrototypeBank::new(spec.classes, model.feature_dim(), 0.1)?;
    let first = batch(0)?;
    bank.initialize(first.iter().map(|(f, m)| (&f[..], m)))?;
    println!("initialized classes {:?}", bank.initialized());
    let before = bank.storage().to_vec();

    for step in 1..=5 {
        let b = batch(4 * step)?;
        bank.update(b.iter().map(|(f, m)| (&f[..], m)))?;
    }
    let drift: f64 = bank
        .storage()
        .iter()
        .zip(&before)
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!(
        "total drift after 5 updates with alpha {}: {drift:.4}",
        bank.alpha()
    );
    if let Some(p) = bank.prototype(0) {
        println!(
            "|mu_0| = {:.12}",
            p.iter().map(|v| v * v).sum::<f64>().sqrt()
        );
    }
    Ok(())
}
