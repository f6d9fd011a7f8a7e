//! Scalar contrastive values, confidence thresholds and pseudo labels.

use spcl::losses::{calibrate_thresholds, contrastive, pseudo_labels, target_mask, ThresholdSpace};
use spcl::segnet::SegModel;
use spcl::synthdata::{generate_sample, Domain, DomainShiftParams, Image, SceneSpec};

fn main() -> spcl::Result<()> {
    let u = [1.0, 0.0];
    let pos = [0.8, 0.6];
    let negs = [[0.2, 0.96f64.sqrt()], [-0.5, 0.75f64.sqrt()]];
    let neg_refs: Vec<&[f64]> = negs.iter().map(|n| &n[..]).collect();
    for tau in [0.1, 0.5, 1.0] {
        println!(
            "tau {tau}: loss {:.5}",
            contrastive(&u, &pos, &neg_refs, tau)?
        );
    }

    let spec = SceneSpec::desk(2);
    let shift = DomainShiftParams::default_shift();
    let images: Vec<Image> = (0..8)
        .map(|i| generate_sample(&spec, &shift, Domain::Target, i).map(|s| s.image))
        .collect::<spcl::Result<_>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let model = SegModel::new(16, spec.classes, 2);

    let sigma_f = calibrate_thresholds(&model, &refs, ThresholdSpace::Feature, 4)?;
    let sigma_o = calibrate_thresholds(&model, &refs, ThresholdSpace::Output, 4)?;
    println!("feature-space thresholds {:?}", sigma_f.values);

    let inf = model.infer(&refs[..1])?;
    let [_, h, w, _] = inf.feature_shape[..] else {
        unreachable!()
    };
    let mask = target_mask(&inf.score_probs, h, w, &sigma_f)?;
    println!(
        "target mask keeps {}/{} feature pixels",
        mask.coverage(),
        h * w
    );
    let pseudo = pseudo_labels(&inf.probs, spec.height, spec.width, &sigma_o)?;
    println!(
        "pseudo labels cover {}/{} pixels",
        pseudo.coverage(),
        spec.height * spec.width
    );
    Ok(())
}
