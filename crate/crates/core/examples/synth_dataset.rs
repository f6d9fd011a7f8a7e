//! Generates a small two-domain dataset, prints class shares and writes it
//! to disk in the on-disk layout read by the `spcl` binary.

use spcl::synthdata::io::{write_dataset, DatasetDir};
use spcl::synthdata::{
    class_pixel_shares, generate_sample, tail_classes, Domain, DomainShiftParams, SceneSpec,
};

fn main() -> spcl::Result<()> {
    let spec = SceneSpec::desk(7);
    let shift = DomainShiftParams::default_shift();

    let samples: Vec<_> = (0..32)
        .map(|i| generate_sample(&spec, &shift, Domain::Source, i))
        .collect::<spcl::Result<_>>()?;
    let shares = class_pixel_shares(samples.iter().map(|s| &s.labels), spec.classes);
    for (c, s) in shares.iter().enumerate() {
        println!("class {c}: {:5.2}% of pixels", 100.0 * s);
    }
    println!("tail classes {:?}", tail_classes(&shares));

    let src = &samples[0].image;
    let tgt = generate_sample(&spec, &shift, Domain::Target, 0)?.image;
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    println!(
        "scene 0 mean intensity: source {:.3}, target {:.3}",
        mean(&src.data),
        mean(&tgt.data)
    );

    let root = std::env::temp_dir().join("spcl-synth-example");
    write_dataset(&root, &spec, &shift, 8)?;
    let dir = DatasetDir::open(&root)?;
    println!(
        "wrote {} with {} scenes per domain",
        root.display(),
        dir.images(Domain::Target)?.len()
    );
    Ok(())
}
