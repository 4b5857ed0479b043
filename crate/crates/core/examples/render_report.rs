//! Label, heat-map and panel rendering plus the HTML summary, using a
//! hand-made prediction so it runs without training.
//!
//! cargo run --example render_report -- [OUT_DIR]

use std::path::PathBuf;

use coreseg::data::{apply_loco, generate_synthetic, LocoSpec, SyntheticSceneSpec};
use coreseg::evaluation::{evaluate_scenario, SuiteReport};
use coreseg::experiment::toy_config;
use coreseg::openset::{calibrate_threshold, fuse, ScoreMap};
use coreseg::report::{emit_summary, render_error_heatmap, render_panel, save_png, Palette, RangePolicy, RenderRef};
use ndarray::Array2;

fn main() -> coreseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("coreseg-render"));
    std::fs::create_dir_all(&out)?;
    let config = toy_config();
    let classes = config.dataset.synthetic.as_ref().expect("toy config is synthetic").classes.clone();
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    let spec = SyntheticSceneSpec {
        height: 64,
        width: 64,
        cell_size: 16,
        classes,
        layout: None,
        seed: 8,
    };
    let scene = generate_synthetic(&spec, "render")?;
    let loco = LocoSpec::new(names, &["water".to_string()])?;
    let truth = apply_loco(&scene.mask, &loco)?;

    // Stand-in scores: unknown pixels score high, with a soft diagonal gradient.
    let unknown = truth.unknown();
    let min_error = Array2::from_shape_fn(truth.dim(), |(y, x)| {
        let base = if truth.labels[[y, x]] == unknown { 0.6 } else { 0.2 };
        base + 0.002 * (y + x) as f64
    });
    let closed = truth.labels.mapv(|l| if l == unknown { 0 } else { l });
    let closed = coreseg::data::LabelMask::new(closed, truth.num_known)?;
    let score = ScoreMap {
        argmin: closed.labels.clone(),
        min_error,
        origin: scene.image.origin.clone(),
    };
    let spec = calibrate_threshold(score.min_error.as_slice().unwrap(), 0.7)?;
    let pred = fuse(&closed, &score, &spec)?;

    let palette = Palette::isprs(&loco.known_names())?;
    save_png(&render_error_heatmap(&score, RangePolicy::MinMax)?, &out.join("heatmap.png"))?;
    let panel = out.join("panel.png");
    save_png(&render_panel(&scene.image, &truth, &pred, &palette, RangePolicy::MinMax)?, &panel)?;

    let report = evaluate_scenario("water", &[pred], &[truth], &loco)?;
    let suite = SuiteReport::new(vec![report], Vec::new());
    let renders = vec![
        RenderRef {
            scenario: "water".into(),
            caption: "image | truth | prediction | error".into(),
            path: panel,
        },
        RenderRef {
            scenario: "water".into(),
            caption: "never rendered".into(),
            path: out.join("absent.png"),
        },
    ];
    let missing = emit_summary(&suite, &renders, &out.join("summary.html"))?;
    print!("{}", suite.to_csv());
    println!("wrote summary.html to {}; missing renders: {missing:?}", out.display());
    Ok(())
}
