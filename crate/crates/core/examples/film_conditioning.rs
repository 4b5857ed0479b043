//! Pixelwise FiLM conditioning: identity at initialization, and how class-constant
//! conditioning maps feed the reconstruction decoder.

use coreseg::backbone::{build_backbone, ArchDescriptor, BackboneCheckpoint};
use coreseg::conditioning::{class_constant_map, modulate};
use coreseg::data::generate_synthetic;
use coreseg::data::SyntheticSceneSpec;
use coreseg::experiment::toy_config;
use coreseg::nn::Parameterized;
use coreseg::reconstruction::{l1_error_map, Cae};

fn main() -> coreseg::Result<()> {
    let config = toy_config();
    let classes = config.dataset.synthetic.as_ref().expect("toy config is synthetic").classes.clone();
    let spec = SyntheticSceneSpec {
        height: 32,
        width: 32,
        cell_size: 8,
        classes,
        layout: None,
        seed: 3,
    };
    let scene = generate_synthetic(&spec, "film")?;
    let arch = ArchDescriptor {
        blocks: 3,
        base_width: 8,
        num_classes: 4,
        in_channels: 3,
    };
    let backbone = BackboneCheckpoint::new(build_backbone(arch, 5)?);
    let e = backbone.encode_frozen(&scene.image)?;
    for (i, (c, h, w)) in e.shapes().into_iter().enumerate() {
        println!("encoder block {i}: {c} x {h} x {w}");
    }

    let mut cae = Cae::new(&arch, 9)?;
    println!("CAE parameters: {}", cae.num_params());
    for k in 0..arch.num_classes {
        let cond = class_constant_map(k, 32, 32, arch.num_classes)?;
        let film = cae.condition.encode(&cond)?;
        let f = modulate(&e, &film)?;
        let dev: f64 = f.blocks.iter().zip(&e.blocks).map(|(a, b)| (a - b).mapv(f64::abs).sum()).sum::<f64>()
            / e.blocks.iter().map(|b| b.len()).sum::<usize>() as f64;
        let err = l1_error_map(&scene.image, &cae.reconstruct_with(&e, &film)?)?;
        println!(
            "class {k} conditioning: mean |f - e| {dev:.2e}, untrained reconstruction error {:.4}",
            err.mean().unwrap_or(f64::NAN)
        );
    }

    cae.condition.force_identity();
    let film = cae.condition.encode(&class_constant_map(0, 32, 32, arch.num_classes)?)?;
    let f = modulate(&e, &film)?;
    println!("forced identity reproduces encoder features exactly: {}", f.blocks == e.blocks);
    Ok(())
}
