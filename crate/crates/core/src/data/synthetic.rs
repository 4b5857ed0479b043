use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelMask, LabeledPatch, Origin, RasterPatch};
use crate::{CoreSegError, Result};

/// Deterministic texture modulation, values in `{-1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Flat,
    /// Horizontal stripes of the given period (pixels).
    Stripes { period: usize },
    /// Checkerboard with squares of the given side.
    Checker { period: usize },
}

impl Pattern {
    fn value(&self, y: usize, x: usize) -> f64 {
        let sign = |b: bool| if b { 1.0 } else { -1.0 };
        match *self {
            Pattern::Flat => 0.0,
            Pattern::Stripes { period } => sign((y / period.max(1)).is_multiple_of(2)),
            Pattern::Checker { period } => {
                let p = period.max(1);
                sign((y / p + x / p).is_multiple_of(2))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub name: String,
    /// One value per channel in `[0, 1]`.
    pub base: Vec<f64>,
    /// Half-width of the texture excursion around `base`.
    pub noise: f64,
    pub pattern: Pattern,
}

/// A scene made of square cells, each filled with one class texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub cell_size: usize,
    pub classes: Vec<ClassTexture>,
    /// Optional explicit cell layout (rows of class ids); random from `seed` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Vec<Vec<usize>>>,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn channels(&self) -> usize {
        self.classes.first().map_or(0, |c| c.base.len())
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        let cs = self.cell_size.max(1);
        (self.height.div_ceil(cs), self.width.div_ceil(cs))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(CoreSegError::invalid("synthetic scene needs at least one class"));
        }
        if self.height == 0 || self.width == 0 || self.cell_size == 0 {
            return Err(CoreSegError::invalid("synthetic scene has zero size"));
        }
        let c = self.channels();
        if c == 0 {
            return Err(CoreSegError::invalid("synthetic scene has zero channels"));
        }
        for t in &self.classes {
            if t.base.len() != c {
                return Err(CoreSegError::invalid(format!(
                    "class `{}` has {} channels, expected {c}",
                    t.name,
                    t.base.len()
                )));
            }
            if t.base.iter().any(|b| !(0.0..=1.0).contains(b)) || !(t.noise >= 0.0) {
                return Err(CoreSegError::invalid(format!(
                    "class `{}` has base outside [0,1] or negative noise",
                    t.name
                )));
            }
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                let gap = a
                    .base
                    .iter()
                    .zip(&b.base)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                if gap <= a.noise.max(b.noise) {
                    return Err(CoreSegError::invalid(format!(
                        "classes `{}` and `{}` are not separated by more than their noise",
                        a.name, b.name
                    )));
                }
            }
        }
        if let Some(layout) = &self.layout {
            let (gr, gc) = self.grid_dims();
            if layout.len() != gr || layout.iter().any(|r| r.len() != gc) {
                return Err(CoreSegError::invalid(format!(
                    "layout must be {gr}x{gc} cells"
                )));
            }
            if layout.iter().flatten().any(|&k| k >= self.classes.len()) {
                return Err(CoreSegError::invalid("layout references an unknown class"));
            }
        }
        Ok(())
    }

    /// Class id of every cell.
    pub fn cell_classes(&self, rng: &mut ChaCha8Rng) -> Array2<usize> {
        let (gr, gc) = self.grid_dims();
        match &self.layout {
            Some(layout) => Array2::from_shape_fn((gr, gc), |(r, c)| layout[r][c]),
            None => Array2::from_shape_fn((gr, gc), |_| rng.gen_range(0..self.classes.len())),
        }
    }
}

/// Renders a synthetic scene. Same spec, same bytes.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, scene_id: &str) -> Result<LabeledPatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = spec.cell_classes(&mut rng);
    let (h, w, c) = (spec.height, spec.width, spec.channels());
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        cells[[y / spec.cell_size, x / spec.cell_size]] as i32
    });
    let mut pixels = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let tex = &spec.classes[labels[[y, x]] as usize];
            let pattern = tex.pattern.value(y, x);
            for ch in 0..c {
                let u: f64 = rng.gen_range(-1.0..=1.0);
                let v = tex.base[ch] + tex.noise * (0.5 * pattern + 0.5 * u);
                pixels[[ch, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    let channel_names = (0..c).map(|i| format!("band{i}")).collect();
    let image = RasterPatch::new(
        pixels,
        channel_names,
        Origin {
            scene_id: scene_id.to_string(),
            row: 0,
            col: 0,
        },
    )?;
    let mask = LabelMask::new(labels, spec.classes.len())?;
    LabeledPatch::new(image, mask)
}
