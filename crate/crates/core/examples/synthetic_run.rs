//! Multi-task training on the default synthetic set, printing per-epoch
//! metrics.

use std::time::Instant;

use uniav::config::RunConfig;
use uniav::data::generate_synthetic;
use uniav::train::{train, TrainMode};

fn main() -> uniav::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let run = RunConfig::resolve(None, &overrides)?;
    let data = generate_synthetic(&run.synthetic)?;
    let start = Instant::now();
    let out = train(
        &run,
        TrainMode::MultiTask,
        &data.dataset,
        &data.vocab,
        None,
        None,
        |r| {
            println!(
                "epoch {} {} steps {} train {:.4} val {:.4} mAP@0.5 {:.3} avg {:.3} ({:.0}s)",
                r.epoch,
                r.task,
                r.steps,
                r.train_loss.unwrap_or(f64::NAN),
                r.val_loss.unwrap_or(f64::NAN),
                r.map.as_ref().and_then(|m| m.at(0.5)).unwrap_or(f64::NAN),
                r.map.as_ref().map_or(f64::NAN, |m| m.average),
                start.elapsed().as_secs_f64()
            );
        },
    )?;
    println!("{} parameters", out.model.num_params());
    Ok(())
}
