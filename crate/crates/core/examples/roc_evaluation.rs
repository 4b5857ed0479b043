//! Rank-based AUROC, the ROC curve and suite aggregation on simulated scores.
//!
//! cargo run --example roc_evaluation -- [OUT_DIR]

use std::path::PathBuf;

use coreseg::evaluation::{auroc_unknown, roc_curve, trapezoid, Aggregate};
use coreseg::report::{render_roc, save_png};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> coreseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("coreseg-roc"));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let known = Normal::new(0.2, 0.1).unwrap();
    let unknown = Normal::new(0.45, 0.15).unwrap();
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for i in 0..5000 {
        let is_unknown = i % 4 == 0;
        let d = if is_unknown { &unknown } else { &known };
        // Coarse rounding creates ties, which count one half.
        scores.push((d.sample(&mut rng) * 100.0_f64).round() / 100.0);
        truth.push(is_unknown);
    }
    let auroc = auroc_unknown(&scores, &truth, None)?;
    let curve = roc_curve(&scores, &truth, None)?;
    println!("AUROC {auroc:.4}; trapezoid under the ROC curve {:.4}", trapezoid(&curve.fpr, &curve.tpr));
    println!("{} operating points", curve.thresholds.len());

    let per_scenario = [0.88, 0.93, 0.71, 0.87, 0.87];
    let agg = Aggregate::of(&per_scenario).expect("non-empty");
    println!("aggregate over {} scenarios: {}", agg.count, agg.display());

    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("roc.csv"), curve.to_csv())?;
    save_png(&render_roc(&curve, 256), &out.join("roc.png"))?;
    println!("wrote roc.csv and roc.png to {}", out.display());
    Ok(())
}
