use ndarray::s;

use super::{LabelMask, LabeledPatch, Origin, RasterPatch};
use crate::{CoreSegError, Result};

/// Patch offsets along one axis: a regular grid whose last anchor is clamped
/// to the border so the whole extent is covered.
pub fn patch_anchors(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(patch <= extent && stride >= 1);
    let last = extent - patch;
    let mut anchors: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&a| a < last)
        .collect();
    anchors.push(last);
    anchors
}

/// Tiles a scene into `patch_size` squares; each patch records its origin.
pub fn extract_patches(
    scene: &LabeledPatch,
    patch_size: usize,
    stride: usize,
) -> Result<Vec<LabeledPatch>> {
    let (h, w) = (scene.image.height(), scene.image.width());
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(CoreSegError::PatchTooLarge {
            patch: patch_size,
            height: h,
            width: w,
        });
    }
    if stride == 0 || stride > patch_size {
        return Err(CoreSegError::invalid(format!(
            "stride {stride} must be in 1..={patch_size} to cover every pixel"
        )));
    }
    let rows = patch_anchors(h, patch_size, stride);
    let cols = patch_anchors(w, patch_size, stride);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let pixels = scene
                .image
                .pixels
                .slice(s![.., r..r + patch_size, c..c + patch_size])
                .to_owned();
            let labels = scene
                .mask
                .labels
                .slice(s![r..r + patch_size, c..c + patch_size])
                .to_owned();
            let origin = Origin {
                scene_id: scene.image.origin.scene_id.clone(),
                row: scene.image.origin.row + r,
                col: scene.image.origin.col + c,
            };
            out.push(LabeledPatch {
                image: RasterPatch {
                    pixels,
                    channel_names: scene.image.channel_names.clone(),
                    origin,
                },
                mask: LabelMask {
                    labels,
                    num_known: scene.mask.num_known,
                },
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn scene(h: usize, w: usize) -> LabeledPatch {
        let pixels = Array3::from_shape_fn((1, h, w), |(_, y, x)| (y * w + x) as f64);
        LabeledPatch::new(
            RasterPatch::new(pixels, vec!["v".into()], Origin::default()).unwrap(),
            LabelMask::new(Array2::zeros((h, w)), 1).unwrap(),
        )
        .unwrap()
    }

    fn offsets(p: &[LabeledPatch]) -> Vec<(usize, usize)> {
        p.iter().map(|p| (p.image.origin.row, p.image.origin.col)).collect()
    }

    /// Anchors from the border-clamp formula, enumerating k until the clamp saturates.
    fn clamp_oracle(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for k in 0.. {
            let a = (k * stride).min(extent - patch);
            if out.last() != Some(&a) {
                out.push(a);
            }
            if a == extent - patch {
                break;
            }
        }
        out
    }

    #[test]
    fn exact_grid_division() {
        let p = extract_patches(&scene(8, 8), 4, 4).unwrap();
        assert_eq!(offsets(&p), vec![(0, 0), (0, 4), (4, 0), (4, 4)]);
    }

    #[test]
    fn border_anchored_last_row_and_column() {
        let p = extract_patches(&scene(10, 10), 4, 4).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(clamp_oracle(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(patch_anchors(10, 4, 4), clamp_oracle(10, 4, 4));
        assert_eq!(p[8].image.origin.row, 6);
        assert_eq!(p[8].image.origin.col, 6);
        assert_eq!(p[8].image.pixels[[0, 0, 0]], 66.0);
    }

    #[test]
    fn patch_equal_to_scene() {
        let p = extract_patches(&scene(4, 4), 4, 1).unwrap();
        assert_eq!(offsets(&p), vec![(0, 0)]);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        match extract_patches(&scene(4, 6), 5, 1) {
            Err(CoreSegError::PatchTooLarge { patch: 5, height: 4, width: 6 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(extract_patches(&scene(8, 8), 2, 3).is_err());
    }

    proptest! {
        #[test]
        fn patches_cover_every_pixel(h in 1usize..40, w in 1usize..40, p_raw in 0usize..40, s_raw in 0usize..40) {
            let p = 1 + p_raw % h.min(w);
            let stride = 1 + s_raw % p;
            let patches = extract_patches(&scene(h, w), p, stride).unwrap();
            let mut hit = Array2::<u32>::zeros((h, w));
            for patch in &patches {
                let o = &patch.image.origin;
                hit.slice_mut(s![o.row..o.row + p, o.col..o.col + p]).mapv_inplace(|v| v + 1);
            }
            prop_assert!(hit.iter().all(|&v| v >= 1));
            prop_assert_eq!(patch_anchors(h, p, stride), clamp_oracle(h, p, stride));
        }
    }
}
