//! Scene files: `<name>.raster.npy` (f32, row-major H x W x C),
//! `<name>.mask.npy` (i16, H x W) and a `<name>.json` sidecar.

use std::path::Path;

use ndarray::{Array2, Array3};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use super::{LabelMask, LabeledPatch, Origin, RasterPatch, IGNORE};
use crate::fsutil::atomic_write;
use crate::{CoreSegError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub scene_id: String,
    pub channel_names: Vec<String>,
    pub class_names: Vec<String>,
    /// Mask value meaning "ignore"; rewritten to -1 on load.
    #[serde(default = "default_ignore")]
    pub ignore_value: i32,
    /// Raster value meaning "no data"; such pixels are zeroed and their mask set to ignore.
    #[serde(default)]
    pub nodata: Option<f32>,
}

fn default_ignore() -> i32 {
    IGNORE
}

pub(crate) fn npy_err(path: &Path, e: impl std::fmt::Display) -> CoreSegError {
    CoreSegError::Npy(format!("{}: {e}", path.display()))
}

pub fn write_scene(dir: &Path, name: &str, scene: &LabeledPatch, class_names: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (c, h, w) = scene.image.pixels.dim();
    let hwc = Array3::from_shape_fn((h, w, c), |(y, x, ch)| scene.image.pixels[[ch, y, x]] as f32);
    let mut buf = Vec::new();
    let raster_path = dir.join(format!("{name}.raster.npy"));
    hwc.write_npy(&mut buf).map_err(|e| npy_err(&raster_path, e))?;
    atomic_write(&raster_path, &buf)?;

    let mask: Array2<i16> = scene.mask.labels.mapv(|v| v as i16);
    let mut buf = Vec::new();
    let mask_path = dir.join(format!("{name}.mask.npy"));
    mask.write_npy(&mut buf).map_err(|e| npy_err(&mask_path, e))?;
    atomic_write(&mask_path, &buf)?;

    let sidecar = SceneSidecar {
        scene_id: scene.image.origin.scene_id.clone(),
        channel_names: scene.image.channel_names.clone(),
        class_names: class_names.to_vec(),
        ignore_value: IGNORE,
        nodata: None,
    };
    atomic_write(
        &dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )?;
    Ok(())
}

/// Loads a scene with its original (pre-LOCO) class ids.
pub fn read_scene(dir: &Path, name: &str) -> Result<(LabeledPatch, SceneSidecar)> {
    let sidecar: SceneSidecar =
        serde_json::from_slice(&std::fs::read(dir.join(format!("{name}.json")))?)?;
    let raster_path = dir.join(format!("{name}.raster.npy"));
    let hwc = Array3::<f32>::read_npy(std::fs::File::open(&raster_path)?)
        .map_err(|e| npy_err(&raster_path, e))?;
    let mask_path = dir.join(format!("{name}.mask.npy"));
    let mask = Array2::<i16>::read_npy(std::fs::File::open(&mask_path)?)
        .map_err(|e| npy_err(&mask_path, e))?;
    let (h, w, c) = hwc.dim();
    if mask.dim() != (h, w) {
        return Err(CoreSegError::shape(format!(
            "{name}: mask {:?} vs raster {h}x{w}",
            mask.dim()
        )));
    }
    let mut labels = mask.mapv(|v| {
        let v = v as i32;
        if v == sidecar.ignore_value {
            IGNORE
        } else {
            v
        }
    });
    let mut pixels = Array3::from_shape_fn((c, h, w), |(ch, y, x)| hwc[[y, x, ch]] as f64);
    if let Some(nodata) = sidecar.nodata {
        for y in 0..h {
            for x in 0..w {
                if (0..c).any(|ch| hwc[[y, x, ch]] == nodata) {
                    labels[[y, x]] = IGNORE;
                    for ch in 0..c {
                        pixels[[ch, y, x]] = 0.0;
                    }
                }
            }
        }
    }
    let image = RasterPatch::new(
        pixels,
        sidecar.channel_names.clone(),
        Origin {
            scene_id: sidecar.scene_id.clone(),
            row: 0,
            col: 0,
        },
    )?;
    let mask = LabelMask::new(labels, sidecar.class_names.len())?;
    Ok((LabeledPatch::new(image, mask)?, sidecar))
}
