//! Confusion matrix, IoU report and class center distance on toy data.

use spcl::metrics::{ccd, class_centers, ConfusionMatrix, MetricReport};
use spcl::IGNORE;

fn main() -> spcl::Result<()> {
    let truth = [0, 1, 1, 1, 2, 2, IGNORE, 0];
    let pred = [0, 0, 1, 1, 2, 1, 2, 0];
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &truth)?;
    let report = MetricReport::from_confusion(&cm, &[2]).with_subset(&cm, "first_two", &[0, 1])?;
    print!("{}", report.to_csv());

    let feats = [1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9];
    let labels = [0, 0, 1, 1];
    let centers = class_centers(&feats, &labels, 2, 2);
    println!("ccd {:?}", ccd(&feats, &labels, 2, &centers)?);
    Ok(())
}
