//! Trains the closed-set U-net for one LOCO scenario and reports test accuracy.
//!
//! cargo run --example closed_set -- [OUT_DIR]

use std::path::PathBuf;

use coreseg::backbone::{build_backbone, closed_set_accuracy, train_closed_set, ArchDescriptor, ClosedSetHyper};
use coreseg::experiment::{toy_config, Mode, Pipeline, Split};

fn main() -> coreseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("coreseg-closed"));
    let pipeline = Pipeline::new(toy_config(), &out, true);
    pipeline.data(Mode::Run)?;
    let sc = pipeline.config.scenario("urban")?.clone();
    let train = pipeline.split_patches(&sc, Split::Train)?;
    let val = pipeline.split_patches(&sc, Split::Validation)?;
    let test = pipeline.split_patches(&sc, Split::Test)?;

    let arch = ArchDescriptor {
        blocks: 3,
        base_width: 8,
        num_classes: 3,
        in_channels: 3,
    };
    let hyper = ClosedSetHyper {
        lr: 0.003,
        epochs: 8,
        batch: 4,
        seed: 1,
    };
    let run = train_closed_set(build_backbone(arch, 1)?, &train, &val, &hyper)?;
    for e in &run.history {
        println!("epoch {:2}: loss {:.4} val acc {:.4}", e.epoch, e.train_loss, e.val_accuracy);
    }
    let (mut hit, mut total) = (0.0, 0.0);
    for p in &test {
        let pred = run.checkpoint.predict_closed(&p.image)?;
        let known = p.mask.labels.iter().filter(|&&l| p.mask.is_known(l)).count() as f64;
        if let Some(acc) = closed_set_accuracy(&pred, &p.mask) {
            hit += acc * known;
            total += known;
        }
    }
    println!("best epoch {}, test accuracy on known pixels {:.4}", run.best_epoch, hit / total);
    println!("encoder fingerprint {}", run.checkpoint.fingerprint());
    Ok(())
}
