//! Short warm-up, adaptation and self-training run on synthetic data.
//!
//! Iteration counts are cut down so the example finishes in seconds; pass
//! `full` to use the desk defaults instead.

use spcl::synthdata::{Domain, DomainShiftParams, SceneSpec};
use spcl::trainer::{synthetic, Stage, TrainConfig, Trainer};

fn main() -> spcl::Result<()> {
    let full = std::env::args().any(|a| a == "full");
    let mut cfg = TrainConfig::desk();
    if !full {
        cfg.iters_warmup = 150;
        cfg.iters_adapt = 100;
        cfg.iters_selftrain = 50;
        cfg.threshold_interval = 50;
    }
    let (data, eval) = synthetic(&SceneSpec::desk(0), &DomainShiftParams::default_shift(), 32)?;
    println!("tail classes {:?}", data.tail);

    let out = std::env::temp_dir().join("spcl-pipeline-example");
    std::fs::create_dir_all(&out)?;
    let mut trainer = Trainer::new(cfg, data.classes)?;
    for stage in [Stage::Warmup, Stage::Adapt, Stage::SelfTrain] {
        trainer.run_stage(stage, &data, Some(&eval), &mut |ck| {
            if ck.complete {
                ck.save(&out.join(format!("{}.ckpt", ck.stage.name())))?;
            }
            Ok(())
        })?;
        println!(
            "{:<9} source mIoU {:.3}  target mIoU {:.3}",
            stage.name(),
            trainer.last_miou(stage, Domain::Source).unwrap(),
            trainer.last_miou(stage, Domain::Target).unwrap()
        );
    }
    if let Some(p) = &trainer.pseudo {
        let covered: usize = p.iter().map(|m| m.coverage()).sum();
        let total: usize = p.iter().map(|m| m.values.len()).sum();
        println!("pseudo-label coverage {:.3}", covered as f64 / total as f64);
    }
    std::fs::write(out.join("metrics.csv"), trainer.metrics_csv())?;
    println!("checkpoints and metrics in {}", out.display());
    Ok(())
}
