//! Forward pass of the encoder/decoder on one synthetic scene.

use spcl::segnet::{SegModel, DOWNSAMPLE};
use spcl::synthdata::{generate_sample, Domain, DomainShiftParams, SceneSpec};

fn main() -> spcl::Result<()> {
    let spec = SceneSpec::desk(0);
    let s = generate_sample(&spec, &DomainShiftParams::identity(), Domain::Source, 0)?;
    let model = SegModel::new(32, spec.classes, 0);
    println!("{} parameters", model.param_count());
    for p in model.params() {
        println!("  {:<12} {:?}", p.name, p.shape);
    }

    let inf = model.infer(&[&s.image])?;
    println!("features {:?} (stride {DOWNSAMPLE})", inf.feature_shape);
    println!("probabilities {:?}", inf.prob_shape);
    let pred = inf.predictions();
    let agree = pred
        .iter()
        .zip(&s.labels.data)
        .filter(|(p, t)| p == t)
        .count();
    println!(
        "untrained pixel accuracy {:.3}",
        agree as f64 / pred.len() as f64
    );
    Ok(())
}
