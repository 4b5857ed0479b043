//! Generates one textured synthetic scene, tiles it and applies a LOCO split.
//!
//! cargo run --example synthetic_data -- [OUT_DIR]

use std::path::PathBuf;

use coreseg::data::{apply_loco, extract_patches, generate_synthetic, LocoSpec, SyntheticSceneSpec};
use coreseg::experiment::toy_config;
use coreseg::report::{render_labels, render_raster, save_png, Palette};

fn main() -> coreseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("coreseg-data"));
    let config = toy_config();
    let classes = config.dataset.synthetic.as_ref().expect("toy config is synthetic").classes.clone();
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    let spec = SyntheticSceneSpec {
        height: 128,
        width: 128,
        cell_size: 16,
        classes,
        layout: None,
        seed: 42,
    };
    let scene = generate_synthetic(&spec, "demo")?;
    let loco = LocoSpec::new(names.clone(), &["crop".to_string()])?;
    let remapped = apply_loco(&scene.mask, &loco)?;
    println!("known classes {:?}, held out {:?}", loco.known_names(), loco.held_out_names());
    for (id, name) in loco.known_names().iter().enumerate() {
        let n = remapped.labels.iter().filter(|&&l| l == id as i32).count();
        println!("  {name:>8}: {n} pixels");
    }
    let unknown = remapped.labels.iter().filter(|&&l| l == remapped.unknown()).count();
    println!("  {:>8}: {unknown} pixels", "UNKNOWN");

    let patches = extract_patches(&scene, 64, 64)?;
    println!("{} patches of 64x64 from a 128x128 scene", patches.len());
    for p in &patches {
        println!("  origin ({}, {})", p.image.origin.row, p.image.origin.col);
    }

    std::fs::create_dir_all(&out)?;
    save_png(&render_raster(&scene.image), &out.join("scene.png"))?;
    let palette = Palette::isprs(&loco.known_names())?;
    let loco_scene = coreseg::data::LabeledPatch::new(scene.image.clone(), remapped)?;
    save_png(&render_labels(&loco_scene.mask, &palette)?, &out.join("labels_loco.png"))?;
    println!("wrote scene.png and labels_loco.png to {}", out.display());
    Ok(())
}
