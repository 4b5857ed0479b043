//! Dataset types, tiling, LOCO remapping, splitting, and the synthetic
//! texture-scene generator.
//!
//! Images are held channels-first, `(channels, height, width)`, which is the
//! layout the network layers consume. The on-disk raster format is row-major
//! `H x W x C`; conversion happens in [`io`].

pub(crate) mod io;
mod loco;
mod patches;
mod split;
mod synthetic;

pub use io::{read_scene, write_scene, SceneSidecar};
pub use loco::{apply_loco, LocoSpec};
pub use patches::{extract_patches, patch_anchors};
pub use split::{split_counts, split_dataset, DatasetSplit};
pub use synthetic::{generate_synthetic, ClassTexture, Pattern, SyntheticSceneSpec};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::{CoreSegError, Result};

/// Label of pixels that take no part in training or evaluation.
pub const IGNORE: i32 = -1;

/// Where a patch came from inside its scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Origin {
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
}

/// A multi-channel image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterPatch {
    /// `(channels, height, width)`
    pub pixels: Array3<f64>,
    pub channel_names: Vec<String>,
    pub origin: Origin,
}

impl RasterPatch {
    pub fn new(pixels: Array3<f64>, channel_names: Vec<String>, origin: Origin) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(CoreSegError::invalid(format!(
                "raster must be non-empty, got {c}x{h}x{w}"
            )));
        }
        if channel_names.len() != c {
            return Err(CoreSegError::shape(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(CoreSegError::invalid("raster contains non-finite values"));
        }
        Ok(RasterPatch {
            pixels,
            channel_names,
            origin,
        })
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Per-pixel class ids: `0..K` for known classes, `K` for unknown, `-1` for ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub labels: Array2<i32>,
    pub num_known: usize,
}

impl LabelMask {
    pub fn new(labels: Array2<i32>, num_known: usize) -> Result<Self> {
        let unknown = num_known as i32;
        if let Some(bad) = labels
            .iter()
            .find(|&&l| !(l == IGNORE || (0..=unknown).contains(&l)))
        {
            return Err(CoreSegError::invalid(format!(
                "label {bad} outside 0..={unknown} and not IGNORE"
            )));
        }
        Ok(LabelMask { labels, num_known })
    }

    /// Sentinel id for unknown pixels (one past the last known class).
    pub fn unknown(&self) -> i32 {
        self.num_known as i32
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// True for pixels carrying a known class.
    pub fn is_known(&self, label: i32) -> bool {
        label >= 0 && label < self.num_known as i32
    }
}

/// An image with its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub image: RasterPatch,
    pub mask: LabelMask,
}

impl LabeledPatch {
    pub fn new(image: RasterPatch, mask: LabelMask) -> Result<Self> {
        if mask.dim() != (image.height(), image.width()) {
            return Err(CoreSegError::shape(format!(
                "mask {:?} does not match image {}x{}",
                mask.dim(),
                image.height(),
                image.width()
            )));
        }
        Ok(LabeledPatch { image, mask })
    }
}

/// Per-channel min/max used to map raw values onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over every pixel of the given (training) scenes.
    pub fn fit<'a>(scenes: impl IntoIterator<Item = &'a RasterPatch>) -> Result<Self> {
        let mut stats: Option<ChannelStats> = None;
        for scene in scenes {
            let c = scene.channels();
            let s = stats.get_or_insert_with(|| ChannelStats {
                min: vec![f64::INFINITY; c],
                max: vec![f64::NEG_INFINITY; c],
            });
            if s.min.len() != c {
                return Err(CoreSegError::shape("scenes disagree on channel count"));
            }
            for (ci, plane) in scene.pixels.axis_iter(Axis(0)).enumerate() {
                for &v in plane.iter() {
                    s.min[ci] = s.min[ci].min(v);
                    s.max[ci] = s.max[ci].max(v);
                }
            }
        }
        stats.ok_or_else(|| CoreSegError::invalid("no scenes to fit channel statistics"))
    }

    /// Min-max scaling, clamped to `[0, 1]`; constant channels map to 0.
    pub fn apply(&self, patch: &RasterPatch) -> RasterPatch {
        let mut out = patch.clone();
        for (ci, mut plane) in out.pixels.axis_iter_mut(Axis(0)).enumerate() {
            let (lo, hi) = (self.min[ci], self.max[ci]);
            let range = hi - lo;
            plane.mapv_inplace(|v| {
                if range > 0.0 {
                    ((v - lo) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_mask_rejects_out_of_range() {
        let labels = Array2::from_shape_vec((1, 3), vec![0, 2, 3]).unwrap();
        assert!(LabelMask::new(labels.clone(), 2).is_err());
        assert!(LabelMask::new(labels, 3).is_ok());
    }

    #[test]
    fn raster_rejects_nan_and_name_mismatch() {
        let mut px = Array3::zeros((2, 2, 2));
        assert!(RasterPatch::new(px.clone(), vec!["a".into()], Origin::default()).is_err());
        px[[0, 0, 0]] = f64::NAN;
        assert!(
            RasterPatch::new(px, vec!["a".into(), "b".into()], Origin::default()).is_err()
        );
    }

    #[test]
    fn channel_stats_map_training_range_to_unit_interval() {
        let px = Array3::from_shape_vec((1, 1, 3), vec![2.0, 4.0, 6.0]).unwrap();
        let p = RasterPatch::new(px, vec!["a".into()], Origin::default()).unwrap();
        let stats = ChannelStats::fit([&p]).unwrap();
        let n = stats.apply(&p);
        assert_eq!(n.pixels.as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }
}
