//! Class center distance of encoder features before and after a short
//! source warm-up.

use spcl::experiment::{feature_ccd, run_stages};
use spcl::metrics::mean_defined;
use spcl::synthdata::{Domain, DomainShiftParams, SceneSpec};
use spcl::trainer::{synthetic, Stage, TrainConfig};

fn main() -> spcl::Result<()> {
    let cfg = TrainConfig {
        iters_warmup: 200,
        ..TrainConfig::desk()
    };
    let (data, eval) = synthetic(&SceneSpec::desk(3), &DomainShiftParams::default_shift(), 32)?;
    let fresh = run_stages(&cfg, None, &[], &data, None)?;
    let warm = run_stages(&cfg, None, &[Stage::Warmup], &data, None)?;
    for domain in [Domain::Source, Domain::Target] {
        let before = mean_defined(&feature_ccd(&fresh.model, eval.split(domain), 32, 0)?);
        let after = mean_defined(&feature_ccd(&warm.model, eval.split(domain), 32, 0)?);
        println!(
            "{:<6} mean CCD {:.4} -> {:.4}",
            domain.name(),
            before.unwrap(),
            after.unwrap()
        );
    }
    Ok(())
}
