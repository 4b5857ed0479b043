//! Trains the conditional reconstruction decoder against a frozen backbone with
//! the match/non-match loss and prints the per-epoch log.
//!
//! cargo run --example cae_training -- [OUT_DIR]

use std::path::PathBuf;

use coreseg::experiment::{toy_config, Mode, Pipeline, Split};
use coreseg::reconstruction::{train_cae, CaeHyper, NonMatchMode};

fn main() -> coreseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("coreseg-cae"));
    let mut config = toy_config();
    config.closed_set.epochs = 10;
    let pipeline = Pipeline::new(config, &out, true);
    let sc = pipeline.config.scenario("crop")?.clone();
    pipeline.closed(&sc, Mode::Run)?;
    let backbone = coreseg::backbone::BackboneCheckpoint::load(&pipeline.scenario_dir(&sc).join("backbone.ckpt"))?;
    let train = pipeline.split_patches(&sc, Split::Train)?;
    let val = pipeline.split_patches(&sc, Split::Validation)?;

    let hyper = CaeHyper {
        alpha: 0.5,
        lr: 0.002,
        epochs: 6,
        batch: 2,
        seed: 11,
        nonmatch: NonMatchMode::Hinge { margin: 1.0 },
    };
    let before = backbone.recompute_fingerprint();
    let run = train_cae(&backbone, &train, &val, &hyper)?;
    for e in &run.history {
        let auroc = e.val_auroc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
        println!(
            "epoch {:2}: match {:.4} non-match {:.4} total {:.4} val AUROC {auroc}",
            e.epoch, e.match_term, e.nonmatch_term, e.total
        );
    }
    let worst = run.steps.iter().map(|s| s.decomposition_error()).fold(0.0, f64::max);
    println!("{} steps, worst |total - (match + alpha * non-match)| {worst:.1e}", run.steps.len());
    println!("kept epoch {}; backbone unchanged: {}", run.best_epoch, before == backbone.recompute_fingerprint());
    Ok(())
}
