//! Deployment: sweep every class-constant conditioning, reduce the error
//! volume to a per-pixel minimum, threshold it and fuse with the closed-set map.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneCheckpoint;
use crate::conditioning::{class_constant_map, FiLMParams};
use crate::data::io::npy_err;
use crate::data::{LabelMask, LabeledPatch, Origin, RasterPatch, IGNORE};
use crate::evaluation::auroc_unknown;
use crate::fsutil::atomic_write;
use crate::reconstruction::{error_map, Cae, CaeCheckpoint};
use crate::{CoreSegError, Result};

/// Reconstruction errors for every class-constant conditioning, stored `(K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorVolume {
    pub errors: Array3<f64>,
    pub origin: Origin,
}

impl ErrorVolume {
    pub fn num_classes(&self) -> usize {
        self.errors.dim().0
    }
}

/// Per-pixel minimum error and the class achieving it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub min_error: Array2<f64>,
    pub argmin: Array2<i32>,
    pub origin: Origin,
}

/// Threshold `tau` and the validation quantile `q` it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub q: f64,
    pub tau: f64,
}

/// Open-set labels (UNKNOWN = K) alongside the closed-set labels and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetPrediction {
    pub labels: LabelMask,
    pub closed_labels: LabelMask,
    pub score_map: ScoreMap,
    pub spec: ThresholdSpec,
}

/// Runs the conditioning sweep, caching the class-constant FiLM parameters
/// per patch shape since they do not depend on the image.
pub struct Sweeper<'a> {
    backbone: &'a BackboneCheckpoint,
    cae: &'a Cae,
    films: Option<((usize, usize), Vec<FiLMParams>)>,
}

impl<'a> Sweeper<'a> {
    pub fn new(backbone: &'a BackboneCheckpoint, cae: &'a Cae) -> Result<Self> {
        if backbone.arch() != &cae.arch {
            return Err(CoreSegError::ArtifactChain(
                "CAE architecture does not match the backbone".into(),
            ));
        }
        Ok(Sweeper {
            backbone,
            cae,
            films: None,
        })
    }

    /// Checks the artifact link before sweeping.
    pub fn from_checkpoint(backbone: &'a BackboneCheckpoint, ckpt: &'a CaeCheckpoint) -> Result<Self> {
        ckpt.check_backbone(backbone)?;
        Self::new(backbone, &ckpt.cae)
    }

    fn films(&mut self, h: usize, w: usize) -> Result<&[FiLMParams]> {
        if self.films.as_ref().map(|f| f.0) != Some((h, w)) {
            let k = self.cae.arch.num_classes;
            let films = (0..k)
                .map(|c| self.cae.condition.encode(&class_constant_map(c, h, w, k)?))
                .collect::<Result<Vec<_>>>()?;
            self.films = Some(((h, w), films));
        }
        Ok(&self.films.as_ref().unwrap().1)
    }

    /// Error volume over all K classes; `parallel` spreads the classes over the
    /// rayon pool and gives bitwise the same result as the sequential loop.
    pub fn sweep(&mut self, patch: &RasterPatch, parallel: bool) -> Result<ErrorVolume> {
        let e = self.backbone.encode_frozen(patch)?;
        let cae = self.cae;
        let films = self.films(patch.height(), patch.width())?;
        let one = |film: &FiLMParams| -> Result<Array2<f64>> {
            error_map(&patch.pixels, &cae.reconstruct_with(&e, film)?)
        };
        let maps: Vec<Array2<f64>> = if parallel {
            films.par_iter().map(one).collect::<Result<_>>()?
        } else {
            films.iter().map(one).collect::<Result<_>>()?
        };
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        let errors = ndarray::stack(Axis(0), &views).map_err(|e| CoreSegError::shape(e.to_string()))?;
        Ok(ErrorVolume {
            errors,
            origin: patch.origin.clone(),
        })
    }

    /// Sweep, min-reduce and closed-set prediction for one patch.
    pub fn score(&mut self, patch: &RasterPatch) -> Result<(ScoreMap, LabelMask)> {
        let volume = self.sweep(patch, true)?;
        Ok((min_reduce(&volume)?, self.backbone.predict_closed(patch)?))
    }
}

/// Convenience wrapper around [`Sweeper::sweep`].
pub fn sweep_conditionings(
    backbone: &BackboneCheckpoint,
    cae: &CaeCheckpoint,
    patch: &RasterPatch,
) -> Result<ErrorVolume> {
    Sweeper::from_checkpoint(backbone, cae)?.sweep(patch, true)
}

/// Per-pixel minimum over the class axis; the lowest class index wins ties.
pub fn min_reduce(volume: &ErrorVolume) -> Result<ScoreMap> {
    let (k, h, w) = volume.errors.dim();
    if k == 0 {
        return Err(CoreSegError::invalid("empty error volume"));
    }
    if volume.errors.iter().any(|v| v.is_nan()) {
        return Err(CoreSegError::invalid("NaN in error volume"));
    }
    let mut min_error = volume.errors.index_axis(Axis(0), 0).to_owned();
    let mut argmin = Array2::<i32>::zeros((h, w));
    for c in 1..k {
        let layer = volume.errors.index_axis(Axis(0), c);
        ndarray::Zip::from(&mut min_error)
            .and(&mut argmin)
            .and(&layer)
            .for_each(|m, a, &v| {
                if v < *m {
                    *m = v;
                    *a = c as i32;
                }
            });
    }
    Ok(ScoreMap {
        min_error,
        argmin,
        origin: volume.origin.clone(),
    })
}

fn check_scores(scores: &[f64], q: f64) -> Result<()> {
    if scores.is_empty() {
        return Err(CoreSegError::invalid("no scores to calibrate on"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(CoreSegError::invalid(format!("quantile {q} outside [0, 1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreSegError::invalid("non-finite score"));
    }
    Ok(())
}

/// Linear-interpolation quantile of `scores` at `q`, except that `q = 1`
/// returns the next float above the maximum so no pixel is rejected.
pub fn calibrate_threshold(scores: &[f64], q: f64) -> Result<ThresholdSpec> {
    check_scores(scores, q)?;
    let mut v = scores.to_vec();
    let tau = if q == 1.0 {
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max).next_up()
    } else {
        let mut pos = q * (v.len() - 1) as f64;
        // Rounding in `q * (n - 1)` must not split a tie at an order statistic.
        if (pos - pos.round()).abs() <= 1e-12 * v.len() as f64 {
            pos = pos.round();
        }
        let lo = (pos.floor() as usize).min(v.len() - 1);
        let frac = pos - lo as f64;
        let (_, &mut a, upper) = v.select_nth_unstable_by(lo, f64::total_cmp);
        if frac == 0.0 {
            a
        } else {
            let b = upper.iter().copied().fold(f64::INFINITY, f64::min);
            a + frac * (b - a)
        }
    };
    Ok(ThresholdSpec { q, tau })
}

/// Accumulates score chunks (e.g. one validation patch at a time).
#[derive(Debug, Clone, Default)]
pub struct StreamingCalibrator {
    scores: Vec<f64>,
}

impl StreamingCalibrator {
    pub fn push(&mut self, chunk: &[f64]) {
        self.scores.extend_from_slice(chunk);
    }

    /// Adds every non-ignored pixel of a score map.
    pub fn push_map(&mut self, map: &ScoreMap, mask: &LabelMask) {
        self.scores.extend(
            map.min_error
                .iter()
                .zip(mask.labels.iter())
                .filter(|(_, &l)| l != IGNORE)
                .map(|(&s, _)| s),
        );
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn threshold(&self, q: f64) -> Result<ThresholdSpec> {
        calibrate_threshold(&self.scores, q)
    }
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_q_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// One row of the quantile sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub q: f64,
    pub tau: f64,
    pub balanced_accuracy: f64,
}

/// Chosen threshold plus the full sweep it was picked from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub chosen: ThresholdSpec,
    pub sweep: Vec<QuantileRow>,
}

/// Mean of unknown recall and known retention when rejecting `score >= tau`.
pub fn balanced_accuracy(scores: &[f64], is_unknown: &[bool], tau: f64) -> Option<f64> {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &u) in scores.iter().zip(is_unknown) {
        if u {
            p += 1;
            tp += (s >= tau) as usize;
        } else {
            n += 1;
            tn += (s < tau) as usize;
        }
    }
    (p > 0 && n > 0).then(|| 0.5 * (tp as f64 / p as f64 + tn as f64 / n as f64))
}

/// Thresholds the pooled scores at each grid quantile and keeps the one with
/// the best balanced accuracy (lowest q on ties).
pub fn select_quantile(scores: &[f64], is_unknown: &[bool], grid: &[f64]) -> Result<Calibration> {
    if scores.len() != is_unknown.len() {
        return Err(CoreSegError::shape("scores and truth differ in length"));
    }
    if grid.is_empty() {
        return Err(CoreSegError::invalid("empty quantile grid"));
    }
    let mut sweep = Vec::with_capacity(grid.len());
    let mut chosen: Option<(f64, ThresholdSpec)> = None;
    for &q in grid {
        let spec = calibrate_threshold(scores, q)?;
        let ba = balanced_accuracy(scores, is_unknown, spec.tau).ok_or_else(|| {
            CoreSegError::invalid("calibration data needs both known and unknown pixels")
        })?;
        if chosen.as_ref().is_none_or(|(best, _)| ba > *best) {
            chosen = Some((ba, spec.clone()));
        }
        sweep.push(QuantileRow {
            q,
            tau: spec.tau,
            balanced_accuracy: ba,
        });
    }
    Ok(Calibration {
        chosen: chosen.unwrap().1,
        sweep,
    })
}

/// UNKNOWN wherever `min_error >= tau`, the closed-set label elsewhere.
pub fn fuse(closed: &LabelMask, score: &ScoreMap, spec: &ThresholdSpec) -> Result<OpenSetPrediction> {
    if closed.dim() != score.min_error.dim() {
        return Err(CoreSegError::shape(format!(
            "closed map {:?} vs score map {:?}",
            closed.dim(),
            score.min_error.dim()
        )));
    }
    let unknown = closed.unknown();
    let mut labels = closed.labels.clone();
    ndarray::Zip::from(&mut labels)
        .and(&score.min_error)
        .for_each(|l, &s| {
            if s >= spec.tau {
                *l = unknown;
            }
        });
    Ok(OpenSetPrediction {
        labels: LabelMask {
            labels,
            num_known: closed.num_known,
        },
        closed_labels: closed.clone(),
        score_map: score.clone(),
        spec: spec.clone(),
    })
}

/// Non-ignored scores and their unknown flags, pooled over patches.
pub fn pool_scores<'a>(
    pairs: impl IntoIterator<Item = (&'a ScoreMap, &'a LabelMask)>,
) -> (Vec<f64>, Vec<bool>) {
    let (mut scores, mut truth) = (Vec::new(), Vec::new());
    for (map, mask) in pairs {
        let unknown = mask.unknown();
        for (&s, &l) in map.min_error.iter().zip(mask.labels.iter()) {
            if l != IGNORE {
                scores.push(s);
                truth.push(l == unknown);
            }
        }
    }
    (scores, truth)
}

/// Pooled unknown-pixel AUROC on validation patches; `None` when undefined.
pub fn validation_auroc(
    backbone: &BackboneCheckpoint,
    cae: &Cae,
    val: &[LabeledPatch],
) -> Result<Option<f64>> {
    let mut sweeper = Sweeper::new(backbone, cae)?;
    let maps = val
        .iter()
        .map(|p| min_reduce(&sweeper.sweep(&p.image, true)?))
        .collect::<Result<Vec<_>>>()?;
    let (scores, truth) = pool_scores(maps.iter().zip(val.iter().map(|p| &p.mask)));
    match auroc_unknown(&scores, &truth, None) {
        Ok(a) => Ok(Some(a)),
        Err(CoreSegError::UndefinedAuroc(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MapSidecar {
    kind: String,
    origin: Origin,
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<ThresholdSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unknown_id: Option<i32>,
}

pub(crate) fn write_npy_file<T: WriteNpyExt>(path: &Path, arr: &T) -> Result<()> {
    let mut buf = Vec::new();
    arr.write_npy(&mut buf).map_err(|e| npy_err(path, e))?;
    atomic_write(path, &buf)?;
    Ok(())
}

fn write_sidecar(path: &Path, sidecar: &MapSidecar) -> Result<()> {
    atomic_write(path, serde_json::to_string_pretty(sidecar)?.as_bytes())?;
    Ok(())
}

fn read_sidecar(path: &Path, kind: &str) -> Result<MapSidecar> {
    let s: MapSidecar = serde_json::from_slice(&std::fs::read(path)?)?;
    if s.kind != kind {
        return Err(CoreSegError::invalid(format!(
            "{}: expected {kind}, found {}",
            path.display(),
            s.kind
        )));
    }
    Ok(s)
}

/// `<name>.errors.npy` (f64, H x W x K) plus `<name>.errors.json`.
pub fn save_error_volume(dir: &Path, name: &str, vol: &ErrorVolume, class_names: &[String]) -> Result<()> {
    if class_names.len() != vol.num_classes() {
        return Err(CoreSegError::shape("class names do not match the volume depth"));
    }
    let hwk = vol.errors.view().permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
    write_npy_file(&dir.join(format!("{name}.errors.npy")), &hwk)?;
    write_sidecar(
        &dir.join(format!("{name}.errors.json")),
        &MapSidecar {
            kind: "error_volume".into(),
            origin: vol.origin.clone(),
            class_names: class_names.to_vec(),
            threshold: None,
            unknown_id: None,
        },
    )
}

pub fn load_error_volume(dir: &Path, name: &str) -> Result<(ErrorVolume, Vec<String>)> {
    let side = read_sidecar(&dir.join(format!("{name}.errors.json")), "error_volume")?;
    let path = dir.join(format!("{name}.errors.npy"));
    let hwk = Array3::<f64>::read_npy(std::fs::File::open(&path)?).map_err(|e| npy_err(&path, e))?;
    let errors = hwk.permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
    Ok((
        ErrorVolume {
            errors,
            origin: side.origin,
        },
        side.class_names,
    ))
}

/// `<name>.min_error.npy` (f64), `<name>.argmin.npy` (i16) and `<name>.score.json`.
pub fn save_score_map(dir: &Path, name: &str, map: &ScoreMap, class_names: &[String]) -> Result<()> {
    write_npy_file(&dir.join(format!("{name}.min_error.npy")), &map.min_error)?;
    write_npy_file(&dir.join(format!("{name}.argmin.npy")), &map.argmin.mapv(|v| v as i16))?;
    write_sidecar(
        &dir.join(format!("{name}.score.json")),
        &MapSidecar {
            kind: "score_map".into(),
            origin: map.origin.clone(),
            class_names: class_names.to_vec(),
            threshold: None,
            unknown_id: None,
        },
    )
}

pub fn load_score_map(dir: &Path, name: &str) -> Result<ScoreMap> {
    let side = read_sidecar(&dir.join(format!("{name}.score.json")), "score_map")?;
    let p = dir.join(format!("{name}.min_error.npy"));
    let min_error = Array2::<f64>::read_npy(std::fs::File::open(&p)?).map_err(|e| npy_err(&p, e))?;
    let p = dir.join(format!("{name}.argmin.npy"));
    let argmin = Array2::<i16>::read_npy(std::fs::File::open(&p)?).map_err(|e| npy_err(&p, e))?;
    if argmin.dim() != min_error.dim() {
        return Err(CoreSegError::shape(format!("{name}: argmin and min_error differ in shape")));
    }
    Ok(ScoreMap {
        min_error,
        argmin: argmin.mapv(i32::from),
        origin: side.origin,
    })
}

/// Single-band indexed PNG (pixel value = label id, UNKNOWN = K) plus
/// `<name>.pred.json` with the class order and threshold.
pub fn save_prediction(dir: &Path, name: &str, pred: &OpenSetPrediction, class_names: &[String]) -> Result<()> {
    let k = pred.labels.num_known;
    if k >= 255 {
        return Err(CoreSegError::invalid("indexed PNG export supports at most 254 known classes"));
    }
    let (h, w) = pred.labels.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let l = pred.labels.labels[[y as usize, x as usize]];
        image::Luma([if l < 0 { 255 } else { l as u8 }])
    });
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    atomic_write(&dir.join(format!("{name}.pred.png")), &bytes)?;
    write_sidecar(
        &dir.join(format!("{name}.pred.json")),
        &MapSidecar {
            kind: "prediction".into(),
            origin: pred.score_map.origin.clone(),
            class_names: class_names.to_vec(),
            threshold: Some(pred.spec.clone()),
            unknown_id: Some(k as i32),
        },
    )
}
