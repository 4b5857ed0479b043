//! Pixelwise FiLM conditioning.
//!
//! A one-hot class map is fed to two encoders with the backbone encoder's
//! block structure, one producing per-block scales (gamma) and one producing
//! per-block shifts (beta). Each frozen encoder block output `e_i` is then
//! modulated elementwise as `gamma_i * e_i + beta_i`.

use ndarray::{Array2, Array3, Zip};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ArchDescriptor, EncoderCache, EncoderFeatures, EncoderStack};
use crate::data::LabelMask;
use crate::nn::{Conv2d, ConvCache, ConvGrad, Feature};
use crate::{CoreSegError, Result};

/// Standard deviation of the FiLM head weights at initialisation.
pub const HEAD_INIT_STD: f64 = 1e-4;

/// One-hot class map, `(K, H, W)`; every pixel has exactly one active class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningMap {
    pub onehot: Array3<f64>,
}

impl ConditioningMap {
    /// Every label must be a known class in `0..num_classes`.
    pub fn from_labels(labels: &Array2<i32>, num_classes: usize) -> Result<Self> {
        let (h, w) = labels.dim();
        let mut onehot = Array3::zeros((num_classes, h, w));
        for ((y, x), &l) in labels.indexed_iter() {
            if l < 0 || l as usize >= num_classes {
                return Err(CoreSegError::invalid(format!(
                    "conditioning label {l} at ({y},{x}) is not a known class"
                )));
            }
            onehot[[l as usize, y, x]] = 1.0;
        }
        Ok(ConditioningMap { onehot })
    }

    /// Uses `mask` where it carries a known class and `fallback` (typically the
    /// closed-set prediction) at IGNORE and UNKNOWN pixels.
    pub fn from_mask_with_fallback(mask: &LabelMask, fallback: &LabelMask) -> Result<Self> {
        if mask.dim() != fallback.dim() {
            return Err(CoreSegError::shape("mask and fallback differ in size"));
        }
        let labels = Zip::from(&mask.labels)
            .and(&fallback.labels)
            .map_collect(|&m, &f| if mask.is_known(m) { m } else { f });
        Self::from_labels(&labels, mask.num_known)
    }

    pub fn num_classes(&self) -> usize {
        self.onehot.dim().0
    }

    pub fn height(&self) -> usize {
        self.onehot.dim().1
    }

    pub fn width(&self) -> usize {
        self.onehot.dim().2
    }

    /// Active class per pixel.
    pub fn classes(&self) -> Array2<i32> {
        let (k, h, w) = self.onehot.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            (0..k).find(|&c| self.onehot[[c, y, x]] == 1.0).map_or(-1, |c| c as i32)
        })
    }
}

/// Conditions every pixel on class `class_id`.
pub fn class_constant_map(
    class_id: usize,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<ConditioningMap> {
    if class_id >= num_classes {
        return Err(CoreSegError::invalid(format!(
            "class {class_id} out of range for {num_classes} classes"
        )));
    }
    let mut onehot = Array3::zeros((num_classes, height, width));
    onehot
        .index_axis_mut(ndarray::Axis(0), class_id)
        .fill(1.0);
    Ok(ConditioningMap { onehot })
}

/// Per-block scale and shift, each shaped like the matching encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct FiLMParams {
    pub gamma: Vec<Feature>,
    pub beta: Vec<Feature>,
}

/// `gamma_i * e_i + beta_i` per block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedFeatures {
    pub blocks: Vec<Feature>,
}

/// Elementwise affine modulation of every encoder block.
pub fn modulate(e: &EncoderFeatures, p: &FiLMParams) -> Result<ConditionedFeatures> {
    if e.blocks.len() != p.gamma.len() || e.blocks.len() != p.beta.len() {
        return Err(CoreSegError::shape(format!(
            "{} encoder blocks vs {} FiLM blocks",
            e.blocks.len(),
            p.gamma.len()
        )));
    }
    let mut blocks = Vec::with_capacity(e.blocks.len());
    for (i, ((ei, g), b)) in e.blocks.iter().zip(&p.gamma).zip(&p.beta).enumerate() {
        if ei.dim() != g.dim() || ei.dim() != b.dim() {
            return Err(CoreSegError::shape(format!(
                "block {i}: e {:?}, gamma {:?}, beta {:?}",
                ei.dim(),
                g.dim(),
                b.dim()
            )));
        }
        blocks.push(Zip::from(ei).and(g).and(b).map_collect(|&e, &g, &b| g * e + b));
    }
    Ok(ConditionedFeatures { blocks })
}

/// Gradients of one modulated block: `(d gamma, d beta, d e)`.
pub fn modulate_backward(e: &Feature, gamma: &Feature, df: &Feature) -> (Feature, Feature, Feature) {
    (df * e, df.clone(), df * gamma)
}

/// One FiLM branch: an encoder trunk plus a 1x1 head per block.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmEncoder {
    pub trunk: EncoderStack,
    pub heads: Vec<Conv2d>,
}

pub struct FilmCache {
    trunk: EncoderCache,
    heads: Vec<ConvCache>,
}

impl FilmEncoder {
    fn new(arch: &ArchDescriptor, head_bias: f64, rng: &mut ChaCha8Rng) -> Self {
        let widths = arch.widths();
        let trunk = EncoderStack::new(arch.num_classes, &widths, rng);
        let heads = widths
            .iter()
            .map(|&w| Conv2d::with_std(w, w, 1, HEAD_INIT_STD, head_bias, rng))
            .collect();
        FilmEncoder { trunk, heads }
    }

    pub fn infer(&self, x: &Feature) -> Vec<Feature> {
        self.trunk
            .infer(x)
            .iter()
            .zip(&self.heads)
            .map(|(a, h)| h.infer(a.view()))
            .collect()
    }

    pub fn forward(&self, x: &Feature) -> (Vec<Feature>, FilmCache) {
        let (acts, trunk) = self.trunk.forward(x);
        let mut outs = Vec::with_capacity(acts.len());
        let mut heads = Vec::with_capacity(acts.len());
        for (a, h) in acts.iter().zip(&self.heads) {
            let (o, c) = h.forward(a.view());
            outs.push(o);
            heads.push(c);
        }
        (outs, FilmCache { trunk, heads })
    }

    /// `grads`: trunk convolutions first (two per block), then one per head.
    pub fn backward(&self, cache: &FilmCache, douts: &[Feature], grads: &mut [ConvGrad]) {
        let blocks = self.heads.len();
        let (trunk_grads, head_grads) = grads.split_at_mut(2 * blocks);
        let dacts: Vec<Feature> = self
            .heads
            .iter()
            .zip(&cache.heads)
            .zip(douts)
            .zip(head_grads.iter_mut())
            .map(|(((h, c), d), g)| h.backward(c, d, g, true).expect("requested"))
            .collect();
        self.trunk.backward(&cache.trunk, dacts, trunk_grads);
    }

    fn named_convs(&self, prefix: &str) -> Vec<(String, &Conv2d)> {
        let mut out = self.trunk.named_convs(&format!("{prefix}.trunk"));
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head.{i}"), h));
        }
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = self.trunk.convs_mut();
        out.extend(self.heads.iter_mut());
        out
    }

    fn conv_count(&self) -> usize {
        3 * self.heads.len()
    }
}

/// The gamma and beta encoders. Input is a `K`-channel one-hot map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoder {
    pub arch: ArchDescriptor,
    pub gamma: FilmEncoder,
    pub beta: FilmEncoder,
}

pub struct ConditionCache {
    gamma: FilmCache,
    beta: FilmCache,
}

impl ConditionEncoder {
    /// Gamma heads start at 1 and beta heads at 0 (up to `HEAD_INIT_STD` noise),
    /// so modulation begins close to the identity.
    pub fn new(arch: &ArchDescriptor, rng: &mut ChaCha8Rng) -> Self {
        let gamma = FilmEncoder::new(arch, 1.0, rng);
        let beta = FilmEncoder::new(arch, 0.0, rng);
        ConditionEncoder {
            arch: *arch,
            gamma,
            beta,
        }
    }

    /// Zeroes head weights and sets gamma = 1, beta = 0 exactly.
    pub fn force_identity(&mut self) {
        for h in &mut self.gamma.heads {
            h.weight.fill(0.0);
            h.bias.fill(1.0);
        }
        for h in &mut self.beta.heads {
            h.weight.fill(0.0);
            h.bias.fill(0.0);
        }
    }

    fn check(&self, cond: &ConditioningMap) -> Result<()> {
        if cond.num_classes() != self.arch.num_classes {
            return Err(CoreSegError::shape(format!(
                "conditioning has {} classes, encoder expects {}",
                cond.num_classes(),
                self.arch.num_classes
            )));
        }
        self.arch.check_input(cond.height(), cond.width())
    }

    /// FiLM parameters for a conditioning map.
    pub fn encode(&self, cond: &ConditioningMap) -> Result<FiLMParams> {
        self.check(cond)?;
        Ok(FiLMParams {
            gamma: self.gamma.infer(&cond.onehot),
            beta: self.beta.infer(&cond.onehot),
        })
    }

    pub fn forward(&self, cond: &ConditioningMap) -> Result<(FiLMParams, ConditionCache)> {
        self.check(cond)?;
        let (gamma, gc) = self.gamma.forward(&cond.onehot);
        let (beta, bc) = self.beta.forward(&cond.onehot);
        Ok((FiLMParams { gamma, beta }, ConditionCache { gamma: gc, beta: bc }))
    }

    /// `grads` follows [`ConditionEncoder::named_convs`] order.
    pub fn backward(
        &self,
        cache: &ConditionCache,
        dgamma: &[Feature],
        dbeta: &[Feature],
        grads: &mut [ConvGrad],
    ) {
        let (g, b) = grads.split_at_mut(self.gamma.conv_count());
        self.gamma.backward(&cache.gamma, dgamma, g);
        self.beta.backward(&cache.beta, dbeta, b);
    }

    pub fn named_convs(&self) -> Vec<(String, &Conv2d)> {
        let mut out = self.gamma.named_convs("gamma");
        out.extend(self.beta.named_convs("beta"));
        out
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = self.gamma.convs_mut();
        out.extend(self.beta.convs_mut());
        out
    }

    pub fn conv_count(&self) -> usize {
        self.gamma.conv_count() + self.beta.conv_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_backbone;
    use crate::data::{Origin, RasterPatch};
    use rand::{Rng, SeedableRng};

    fn arch(k: usize, blocks: usize) -> ArchDescriptor {
        ArchDescriptor {
            blocks,
            base_width: 4,
            num_classes: k,
            in_channels: 3,
        }
    }

    fn features(seed: u64, h: usize, a: &ArchDescriptor) -> EncoderFeatures {
        let net = build_backbone(*a, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Array3::from_shape_fn((a.in_channels, h, h), |_| rng.gen_range(0.0..1.0));
        let patch = RasterPatch::new(px, vec!["a".into(), "b".into(), "c".into()], Origin::default()).unwrap();
        net.forward(&patch).unwrap().1
    }

    #[test]
    fn constant_map_definition_and_range() {
        let m = class_constant_map(0, 2, 2, 2).unwrap();
        assert!(m.onehot.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 1.0));
        assert!(m.onehot.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 0.0));
        let sums = m.onehot.sum_axis(ndarray::Axis(0));
        assert!(sums.iter().all(|&s| s == 1.0));
        assert!(class_constant_map(2, 2, 2, 2).is_err());
    }

    #[test]
    fn film_shapes_match_encoder_blocks() {
        let a = arch(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ConditionEncoder::new(&a, &mut rng);
        let cond = class_constant_map(1, 64, 64, 3).unwrap();
        let p = enc.encode(&cond).unwrap();
        let e = features(2, 64, &a);
        let shapes: Vec<_> = p.gamma.iter().map(|g| g.dim()).collect();
        assert_eq!(shapes, e.shapes());
        assert_eq!(p.beta.iter().map(|b| b.dim()).collect::<Vec<_>>(), e.shapes());
        assert_eq!(p, enc.encode(&cond).unwrap());
    }

    #[test]
    fn one_pixel_change_changes_params() {
        let a = arch(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ConditionEncoder::new(&a, &mut rng);
        let mut labels = Array2::zeros((8, 8));
        let p1 = enc.encode(&ConditioningMap::from_labels(&labels, 3).unwrap()).unwrap();
        labels[[3, 5]] = 2;
        let p2 = enc.encode(&ConditioningMap::from_labels(&labels, 3).unwrap()).unwrap();
        let differs = p1.gamma.iter().zip(&p2.gamma).any(|(a, b)| a != b)
            || p1.beta.iter().zip(&p2.beta).any(|(a, b)| a != b);
        assert!(differs);
    }

    #[test]
    fn modulation_hand_cases() {
        let e = EncoderFeatures {
            blocks: vec![Array3::from_shape_vec((2, 1, 1), vec![2.0, -1.0]).unwrap()],
        };
        let p = FiLMParams {
            gamma: vec![Array3::from_shape_vec((2, 1, 1), vec![3.0, 0.5]).unwrap()],
            beta: vec![Array3::from_elem((2, 1, 1), 1.0)],
        };
        let f = modulate(&e, &p).unwrap();
        assert_eq!(f.blocks[0].as_slice().unwrap(), &[7.0, 0.5]);

        let ident = FiLMParams {
            gamma: vec![Array3::ones((2, 1, 1))],
            beta: vec![Array3::zeros((2, 1, 1))],
        };
        assert_eq!(modulate(&e, &ident).unwrap().blocks, e.blocks);

        let kill = FiLMParams {
            gamma: vec![Array3::zeros((2, 1, 1))],
            beta: p.beta.clone(),
        };
        assert_eq!(modulate(&e, &kill).unwrap().blocks, p.beta);
    }

    #[test]
    fn modulation_rejects_misaligned_blocks() {
        let e = EncoderFeatures { blocks: vec![Array3::zeros((2, 2, 2))] };
        let p = FiLMParams { gamma: vec![Array3::zeros((2, 1, 1))], beta: vec![Array3::zeros((2, 1, 1))] };
        assert!(modulate(&e, &p).is_err());
    }

    #[test]
    fn forced_identity_is_exact_and_init_is_near_identity() {
        let a = arch(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut enc = ConditionEncoder::new(&a, &mut rng);
        let e = features(3, 16, &a);
        let mut labels = Array2::zeros((16, 16));
        labels.slice_mut(ndarray::s![..8, ..]).fill(2);
        let cond = ConditioningMap::from_labels(&labels, 3).unwrap();
        let f = modulate(&e, &enc.encode(&cond).unwrap()).unwrap();
        let (mut dev, mut n) = (0.0, 0usize);
        for (fi, ei) in f.blocks.iter().zip(&e.blocks) {
            dev += (fi - ei).mapv(f64::abs).sum();
            n += fi.len();
        }
        assert!(dev / n as f64 <= 1e-2);
        enc.force_identity();
        let f = modulate(&e, &enc.encode(&cond).unwrap()).unwrap();
        assert_eq!(f.blocks, e.blocks);
    }

    #[test]
    fn affine_locality() {
        let a = arch(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = ConditionEncoder::new(&a, &mut rng);
        let p = enc.encode(&class_constant_map(0, 8, 8, 2).unwrap()).unwrap();
        let e = features(5, 8, &a);
        let mut e2 = e.clone();
        e2.blocks[0][[1, 3, 4]] += 0.5;
        let f1 = modulate(&e, &p).unwrap();
        let f2 = modulate(&e2, &p).unwrap();
        for ((c, y, x), v) in f1.blocks[0].indexed_iter() {
            let changed = *v != f2.blocks[0][[c, y, x]];
            assert_eq!(changed, (c, y, x) == (1, 3, 4));
        }
        assert_eq!(f1.blocks[1], f2.blocks[1]);
    }

    #[test]
    fn modulation_gradient_matches_finite_differences() {
        // Scalar reduction s = sum(w * f) on a 2x2x2 instance.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut r = || Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let (e, g, b, w) = (r(), r(), r(), r());
        let s = |e: &Feature, g: &Feature, b: &Feature| ((g * e + b) * &w).sum();
        let (dg, db, de) = modulate_backward(&e, &g, &w);
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 1, 0), (0, 1, 1), (1, 0, 1)] {
            let fd = |which: usize| {
                let (mut ep, mut gp, mut bp) = (e.clone(), g.clone(), b.clone());
                let (mut em, mut gm, mut bm) = (e.clone(), g.clone(), b.clone());
                match which {
                    0 => { ep[idx] += h; em[idx] -= h; }
                    1 => { gp[idx] += h; gm[idx] -= h; }
                    _ => { bp[idx] += h; bm[idx] -= h; }
                }
                (s(&ep, &gp, &bp) - s(&em, &gm, &bm)) / (2.0 * h)
            };
            for (which, analytic) in [(0, de[idx]), (1, dg[idx]), (2, db[idx])] {
                let numeric = fd(which);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
                assert!(rel < 1e-4, "param {which} at {idx:?}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn fallback_fills_ignore_and_unknown() {
        let mask = LabelMask::new(Array2::from_shape_vec((1, 3), vec![0, -1, 2]).unwrap(), 2).unwrap();
        let fallback = LabelMask::new(Array2::from_shape_vec((1, 3), vec![1, 1, 0]).unwrap(), 2).unwrap();
        let m = ConditioningMap::from_mask_with_fallback(&mask, &fallback).unwrap();
        assert_eq!(m.classes().as_slice().unwrap(), &[0, 1, 0]);
    }
}
