//! Open-set inference for one scenario: conditioning sweep, minimum-error scores,
//! quantile calibration on validation, fusion and evaluation on test.
//!
//! cargo run --example open_set -- [OUT_DIR]

use std::path::PathBuf;

use coreseg::evaluation::evaluate_scenario;
use coreseg::experiment::{toy_config, Mode, Pipeline, Split};
use coreseg::openset::{default_q_grid, fuse, pool_scores, select_quantile, Sweeper};

fn main() -> coreseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("coreseg-openset"));
    let mut config = toy_config();
    config.closed_set.epochs = 10;
    let pipeline = Pipeline::new(config, &out, true);
    let sc = pipeline.config.scenario("forest")?.clone();
    pipeline.cae(&sc, Mode::Run)?;
    let (backbone, cae) = pipeline.load_models(&sc)?;
    let mut sweeper = Sweeper::from_checkpoint(&backbone, &cae)?;

    let score = |split| -> coreseg::Result<Vec<_>> {
        let patches = pipeline.split_patches(&sc, split)?;
        let mut sweeper = Sweeper::from_checkpoint(&backbone, &cae)?;
        patches
            .into_iter()
            .map(|p| {
                let (map, closed) = sweeper.score(&p.image)?;
                Ok((map, closed, p.mask))
            })
            .collect()
    };
    let val = score(Split::Validation)?;
    let (scores, is_unknown) = pool_scores(val.iter().map(|(m, _, t)| (m, t)));
    let calibration = select_quantile(&scores, &is_unknown, &default_q_grid())?;
    for row in &calibration.sweep {
        println!("q {:.2}  tau {:.4}  balanced accuracy {:.4}", row.q, row.tau, row.balanced_accuracy);
    }
    println!("chosen q {} tau {:.4}", calibration.chosen.q, calibration.chosen.tau);

    let test = score(Split::Test)?;
    let volume = sweeper.sweep(&pipeline.split_patches(&sc, Split::Test)?[0].image, true)?;
    println!("error volume per patch: {:?} (K x H x W)", volume.errors.dim());
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for (map, closed, truth) in test {
        predictions.push(fuse(&closed, &map, &calibration.chosen)?);
        truths.push(truth);
    }
    let report = evaluate_scenario(&sc.name, &predictions, &truths, &pipeline.config.loco(&sc)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
