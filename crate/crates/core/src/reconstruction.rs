//! Conditional autoencoder: the FiLM encoders plus a reconstruction decoder,
//! and the match / non-match training procedure.
//!
//! Decoder stage `i` consumes the channel concatenation
//! `[previous activation | f_i | e_i]`, where the deepest stage's previous
//! activation is the frozen latent itself. A final 1x1 convolution maps back
//! to the input channel count.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{fingerprint, read_archive, write_archive};
use crate::backbone::{batches, ArchDescriptor, BackboneCheckpoint, EncoderFeatures};
use crate::conditioning::{
    modulate, modulate_backward, ConditionEncoder, ConditionedFeatures, ConditioningMap,
};
use crate::data::{LabelMask, LabeledPatch, RasterPatch};
use crate::nn::{
    accumulate, concat, scale_grads, split_channels, upsample2, upsample2_backward, Adam,
    BlockCache, Conv2d, ConvBlock, ConvCache, ConvGrad, Feature, NamedTensor, Parameterized,
};
use crate::{CoreSegError, Result};

pub const CAE_MAGIC: &str = "CORESEG-CAE-1";

/// A reconstructed image, `(C, H, W)`.
pub type Reconstruction = Feature;

/// Per-pixel reconstruction error, `(H, W)`.
pub type ErrorMap = Array2<f64>;

/// Reconstruction decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconDecoder {
    /// `stages[i]` runs at encoder level `i`.
    pub stages: Vec<ConvBlock>,
    pub out: Conv2d,
}

pub struct DecoderCache {
    stages: Vec<BlockCache>,
    out: ConvCache,
}

impl ReconDecoder {
    fn new(arch: &ArchDescriptor, rng: &mut ChaCha8Rng) -> Self {
        let stages = (0..arch.blocks)
            .map(|i| ConvBlock::new(stage_input_channels(arch, i), arch.widths()[i], rng))
            .collect();
        let mut out = Conv2d::new(arch.base_width, arch.in_channels, 1, rng);
        // Inputs are normalized to [0, 1]; start reconstructions at mid-range, not black.
        for b in out.bias.iter_mut() {
            *b = 0.5;
        }
        ReconDecoder { stages, out }
    }

    fn check(&self, e: &EncoderFeatures, f: &ConditionedFeatures) -> Result<()> {
        if e.blocks.len() != self.stages.len() || f.blocks.len() != self.stages.len() {
            return Err(CoreSegError::shape(format!(
                "decoder has {} stages, got {} encoder and {} conditioned blocks",
                self.stages.len(),
                e.blocks.len(),
                f.blocks.len()
            )));
        }
        for (i, (ei, fi)) in e.blocks.iter().zip(&f.blocks).enumerate() {
            let expected = self.stages[i].first.in_channels();
            let prev = if i + 1 == self.stages.len() {
                e.blocks[i].dim().0
            } else {
                self.stages[i + 1].second.out_channels()
            };
            if ei.dim() != fi.dim() || prev + fi.dim().0 + ei.dim().0 != expected {
                return Err(CoreSegError::shape(format!(
                    "stage {i}: e {:?} / f {:?} do not fit {expected} input channels",
                    ei.dim(),
                    fi.dim()
                )));
            }
            if i + 1 < self.stages.len() {
                let (_, h, w) = ei.dim();
                let (_, hn, wn) = e.blocks[i + 1].dim();
                if (2 * hn, 2 * wn) != (h, w) {
                    return Err(CoreSegError::shape(format!(
                        "stage {i}: upsampled {}x{} does not match skip {h}x{w}",
                        2 * hn,
                        2 * wn
                    )));
                }
            }
        }
        Ok(())
    }

    fn stage_input(prev: &Feature, f: &Feature, e: &Feature, deepest: bool) -> Feature {
        if deepest {
            concat(&[prev, f, e])
        } else {
            concat(&[&upsample2(prev), f, e])
        }
    }

    pub fn decode(&self, e: &EncoderFeatures, f: &ConditionedFeatures) -> Result<Reconstruction> {
        self.check(e, f)?;
        let b = self.stages.len();
        let mut cur = e.latent().clone();
        for i in (0..b).rev() {
            let input = Self::stage_input(&cur, &f.blocks[i], &e.blocks[i], i + 1 == b);
            cur = self.stages[i].infer(&input);
        }
        Ok(self.out.infer(cur.view()))
    }

    fn forward(&self, e: &EncoderFeatures, f: &ConditionedFeatures) -> (Reconstruction, DecoderCache) {
        let b = self.stages.len();
        let mut caches: Vec<Option<BlockCache>> = (0..b).map(|_| None).collect();
        let mut cur = e.latent().clone();
        for i in (0..b).rev() {
            let input = Self::stage_input(&cur, &f.blocks[i], &e.blocks[i], i + 1 == b);
            let (o, c) = self.stages[i].forward(&input);
            caches[i] = Some(c);
            cur = o;
        }
        let (xhat, out) = self.out.forward(cur.view());
        (
            xhat,
            DecoderCache {
                stages: caches.into_iter().map(|c| c.expect("filled")).collect(),
                out,
            },
        )
    }

    /// Returns the gradient with respect to every conditioned block `f_i`.
    fn backward(
        &self,
        cache: &DecoderCache,
        e: &EncoderFeatures,
        dxhat: &Feature,
        grads: &mut [ConvGrad],
    ) -> Vec<Feature> {
        let b = self.stages.len();
        let (stage_grads, out_grad) = grads.split_at_mut(2 * b);
        let mut dcur = self
            .out
            .backward(&cache.out, dxhat, &mut out_grad[0], true)
            .expect("requested");
        let mut df: Vec<Feature> = Vec::with_capacity(b);
        for i in 0..b {
            let din = self.stages[i]
                .backward(&cache.stages[i], &dcur, &mut stage_grads[2 * i..2 * i + 2], true)
                .expect("requested");
            let w = e.blocks[i].dim().0;
            let prev = din.dim().0 - 2 * w;
            let mut parts = split_channels(&din, &[prev, w, w]);
            df.push(std::mem::take(&mut parts[1]));
            // The raw e_i and the latent are frozen inputs: their gradients are dropped.
            if i + 1 < b {
                dcur = upsample2_backward(&parts[0]);
            }
        }
        df
    }
}

/// Input channels of decoder stage `i`: previous activation + `f_i` + `e_i`.
pub fn stage_input_channels(arch: &ArchDescriptor, i: usize) -> usize {
    let w = arch.widths();
    let prev = if i + 1 == arch.blocks { w[i] } else { w[i + 1] };
    prev + 2 * w[i]
}

/// FiLM encoders and reconstruction decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Cae {
    pub arch: ArchDescriptor,
    pub condition: ConditionEncoder,
    pub decoder: ReconDecoder,
}

impl Cae {
    pub fn new(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let condition = ConditionEncoder::new(arch, &mut rng);
        let decoder = ReconDecoder::new(arch, &mut rng);
        Ok(Cae {
            arch: *arch,
            condition,
            decoder,
        })
    }

    /// Reconstruction of the image behind `e` under a conditioning map.
    pub fn reconstruct(&self, e: &EncoderFeatures, cond: &ConditioningMap) -> Result<Reconstruction> {
        let film = self.condition.encode(cond)?;
        self.decoder.decode(e, &modulate(e, &film)?)
    }

    /// Reconstruction given precomputed FiLM parameters.
    pub fn reconstruct_with(
        &self,
        e: &EncoderFeatures,
        film: &crate::conditioning::FiLMParams,
    ) -> Result<Reconstruction> {
        self.decoder.decode(e, &modulate(e, film)?)
    }

    /// Reconstruction plus the gradient closure state, for training.
    fn forward(&self, e: &EncoderFeatures, cond: &ConditioningMap) -> Result<(Reconstruction, CaeCache)> {
        let (film, ccache) = self.condition.forward(cond)?;
        let f = modulate(e, &film)?;
        self.decoder.check(e, &f)?;
        let (xhat, dcache) = self.decoder.forward(e, &f);
        Ok((
            xhat,
            CaeCache {
                gamma: film.gamma,
                condition: ccache,
                decoder: dcache,
            },
        ))
    }

    fn backward(&self, cache: &CaeCache, e: &EncoderFeatures, dxhat: &Feature, grads: &mut [ConvGrad]) {
        let n_cond = self.condition.conv_count();
        let (cond_grads, dec_grads) = grads.split_at_mut(n_cond);
        let df = self.decoder.backward(&cache.decoder, e, dxhat, dec_grads);
        let mut dgamma = Vec::with_capacity(df.len());
        let mut dbeta = Vec::with_capacity(df.len());
        for ((dfi, ei), gi) in df.iter().zip(&e.blocks).zip(&cache.gamma) {
            let (dg, db, _) = modulate_backward(ei, gi, dfi);
            dgamma.push(dg);
            dbeta.push(db);
        }
        self.condition.backward(&cache.condition, &dgamma, &dbeta, cond_grads);
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_tensors())
    }
}

struct CaeCache {
    gamma: Vec<Feature>,
    condition: crate::conditioning::ConditionCache,
    decoder: DecoderCache,
}

impl Parameterized for Cae {
    fn named_convs(&self) -> Vec<(String, &Conv2d)> {
        let mut out = self.condition.named_convs();
        for (i, s) in self.decoder.stages.iter().enumerate() {
            out.push((format!("decoder.{i}.conv1"), &s.first));
            out.push((format!("decoder.{i}.conv2"), &s.second));
        }
        out.push(("decoder.out".to_string(), &self.decoder.out));
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = self.condition.convs_mut();
        for s in self.decoder.stages.iter_mut() {
            out.push(&mut s.first);
            out.push(&mut s.second);
        }
        out.push(&mut self.decoder.out);
        out
    }
}

/// Per-pixel mean over channels of `|x - xhat|`.
pub fn l1_error_map(x: &RasterPatch, xhat: &Reconstruction) -> Result<ErrorMap> {
    error_map(&x.pixels, xhat)
}

pub(crate) fn error_map(x: &Feature, xhat: &Feature) -> Result<ErrorMap> {
    if x.dim() != xhat.dim() {
        return Err(CoreSegError::shape(format!(
            "image {:?} vs reconstruction {:?}",
            x.dim(),
            xhat.dim()
        )));
    }
    let (c, h, w) = x.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        Zip::from(&mut out)
            .and(&x.index_axis(ndarray::Axis(0), ci))
            .and(&xhat.index_axis(ndarray::Axis(0), ci))
            .for_each(|o, &a, &b| *o += (a - b).abs());
    }
    out.mapv_inplace(|v| v / c as f64);
    Ok(out)
}

/// Mean of `err` over pixels where `valid` is set; 0 when none are.
pub fn masked_mean(err: &ErrorMap, valid: &Array2<bool>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    Zip::from(err).and(valid).for_each(|&e, &v| {
        if v {
            sum += e;
            n += 1;
        }
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// How the non-match reconstruction enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NonMatchMode {
    /// `L1(x, xhat_nm)` exactly as in the two-term loss; use a negative alpha
    /// to push non-match reconstructions away.
    Literal,
    /// Per-pixel `max(0, margin - e_p)` averaged over valid pixels.
    Hinge { margin: f64 },
}

impl Default for NonMatchMode {
    fn default() -> Self {
        NonMatchMode::Hinge { margin: 0.5 }
    }
}

/// One evaluation of `total = match_term + alpha * nonmatch_term`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub match_term: f64,
    pub nonmatch_term: f64,
    pub alpha: f64,
}

impl LossReport {
    fn new(match_term: f64, nonmatch_term: f64, alpha: f64) -> Self {
        LossReport {
            total: match_term + alpha * nonmatch_term,
            match_term,
            nonmatch_term,
            alpha,
        }
    }

    /// Relative deviation of `total` from `match + alpha * nonmatch`.
    pub fn decomposition_error(&self) -> f64 {
        let expect = self.match_term + self.alpha * self.nonmatch_term;
        (self.total - expect).abs() / expect.abs().max(f64::MIN_POSITIVE)
    }
}

/// Two-term loss over all pixels with plain L1 on both terms.
pub fn training_loss(
    x: &RasterPatch,
    xhat_m: &Reconstruction,
    xhat_nm: &Reconstruction,
    alpha: f64,
) -> Result<LossReport> {
    if !alpha.is_finite() {
        return Err(CoreSegError::invalid("alpha must be finite"));
    }
    let all = Array2::from_elem((x.height(), x.width()), true);
    let (report, _, _) = masked_loss(&x.pixels, xhat_m, xhat_nm, &all, &all, alpha, NonMatchMode::Literal)?;
    Ok(report)
}

/// Loss and its gradients with respect to both reconstructions.
pub fn masked_loss(
    x: &Feature,
    xhat_m: &Feature,
    xhat_nm: &Feature,
    match_valid: &Array2<bool>,
    nonmatch_valid: &Array2<bool>,
    alpha: f64,
    mode: NonMatchMode,
) -> Result<(LossReport, Feature, Feature)> {
    for t in [x, xhat_m, xhat_nm] {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(CoreSegError::invalid("non-finite value in loss inputs"));
        }
    }
    let err_m = error_map(x, xhat_m)?;
    let err_nm = error_map(x, xhat_nm)?;
    let (c, _, _) = x.dim();
    let n_m = match_valid.iter().filter(|&&v| v).count();
    let n_nm = nonmatch_valid.iter().filter(|&&v| v).count();
    let match_term = masked_mean(&err_m, match_valid);
    let nonmatch_term = match mode {
        NonMatchMode::Literal => masked_mean(&err_nm, nonmatch_valid),
        NonMatchMode::Hinge { margin } => {
            masked_mean(&err_nm.mapv(|e| (margin - e).max(0.0)), nonmatch_valid)
        }
    };
    let report = LossReport::new(match_term, nonmatch_term, alpha);

    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut dm = Feature::zeros(x.raw_dim());
    let mut dnm = Feature::zeros(x.raw_dim());
    let scale_m = if n_m > 0 { 1.0 / (c * n_m) as f64 } else { 0.0 };
    let scale_nm = if n_nm > 0 { alpha / (c * n_nm) as f64 } else { 0.0 };
    for ((ci, y, xx), v) in dm.indexed_iter_mut() {
        if match_valid[[y, xx]] {
            *v = scale_m * sign(xhat_m[[ci, y, xx]] - x[[ci, y, xx]]);
        }
    }
    for ((ci, y, xx), v) in dnm.indexed_iter_mut() {
        if !nonmatch_valid[[y, xx]] {
            continue;
        }
        let s = sign(xhat_nm[[ci, y, xx]] - x[[ci, y, xx]]);
        *v = match mode {
            NonMatchMode::Literal => scale_nm * s,
            NonMatchMode::Hinge { margin } => {
                if err_nm[[y, xx]] < margin {
                    -scale_nm * s
                } else {
                    0.0
                }
            }
        };
    }
    Ok((report, dm, dnm))
}

/// A uniformly random cyclic permutation (Sattolo), which never maps an index to itself.
pub fn nonmatch_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(CoreSegError::invalid(format!(
            "batch of {n} has no non-matching mask"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    Ok(perm)
}

/// Pairs every mask in a batch with the mask of a different image.
pub fn sample_nonmatch_mask<R: Rng + ?Sized>(masks: &[LabelMask], rng: &mut R) -> Result<Vec<LabelMask>> {
    let perm = nonmatch_permutation(masks.len(), rng)?;
    Ok(perm.into_iter().map(|j| masks[j].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaeHyper {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub nonmatch: NonMatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaeEpochLog {
    pub epoch: usize,
    pub match_term: f64,
    pub nonmatch_term: f64,
    pub total: f64,
    /// `None` when the validation split has no unknown pixels.
    pub val_auroc: Option<f64>,
    pub wall_seconds: f64,
}

/// A trained CAE linked to the backbone it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct CaeCheckpoint {
    pub cae: Cae,
    pub hyper: CaeHyper,
    pub backbone_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct CaeMeta {
    arch: ArchDescriptor,
    hyper: CaeHyper,
    backbone_fingerprint: String,
    fingerprint: String,
}

impl CaeCheckpoint {
    /// Fails unless `backbone` is the one this CAE was trained against.
    pub fn check_backbone(&self, backbone: &BackboneCheckpoint) -> Result<()> {
        backbone.verify()?;
        if backbone.fingerprint() != self.backbone_fingerprint {
            return Err(CoreSegError::ArtifactChain(format!(
                "CAE was trained on backbone {}, got {}",
                self.backbone_fingerprint,
                backbone.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CaeMeta {
            arch: self.cae.arch,
            hyper: self.hyper,
            backbone_fingerprint: self.backbone_fingerprint.clone(),
            fingerprint: self.cae.fingerprint(),
        };
        write_archive(path, CAE_MAGIC, &meta, &self.cae.to_tensors())
    }

    /// Loads the archive and refuses it if it was trained on a different backbone.
    pub fn load(path: &Path, backbone: &BackboneCheckpoint) -> Result<Self> {
        let (meta, tensors): (CaeMeta, Vec<NamedTensor>) = read_archive(path, CAE_MAGIC)?;
        let mut cae = Cae::new(&meta.arch, 0)?;
        cae.load_tensors(&tensors)?;
        if cae.fingerprint() != meta.fingerprint {
            return Err(CoreSegError::Archive {
                path: path.to_path_buf(),
                detail: "parameter fingerprint mismatch".into(),
            });
        }
        let ckpt = CaeCheckpoint {
            cae,
            hyper: meta.hyper,
            backbone_fingerprint: meta.backbone_fingerprint,
        };
        ckpt.check_backbone(backbone)?;
        Ok(ckpt)
    }
}

/// Outcome of CAE training.
#[derive(Debug, Clone)]
pub struct CaeRun {
    pub checkpoint: CaeCheckpoint,
    pub history: Vec<CaeEpochLog>,
    /// Every optimisation step's loss decomposition.
    pub steps: Vec<LossReport>,
    pub best_epoch: usize,
}

/// Frozen-backbone view of one training patch.
struct Prepared<'a> {
    patch: &'a LabeledPatch,
    features: EncoderFeatures,
    closed: LabelMask,
}

/// Loss and gradients of the two-term objective for one image paired with another image's mask.
pub fn pair_loss_and_grads(
    cae: &Cae,
    x: &Feature,
    features: &EncoderFeatures,
    own: &LabelMask,
    own_fallback: &LabelMask,
    other: &LabelMask,
    other_fallback: &LabelMask,
    alpha: f64,
    mode: NonMatchMode,
) -> Result<(LossReport, Vec<ConvGrad>)> {
    let cond_m = ConditioningMap::from_mask_with_fallback(own, own_fallback)?;
    let cond_nm = ConditioningMap::from_mask_with_fallback(other, other_fallback)?;
    let match_valid = own.labels.mapv(|l| own.is_known(l));
    let nm_classes = cond_nm.classes();
    let nonmatch_valid = Zip::from(&own.labels)
        .and(&nm_classes)
        .map_collect(|&l, &c| own.is_known(l) && l != c);
    let (xm, cache_m) = cae.forward(features, &cond_m)?;
    let (xnm, cache_nm) = cae.forward(features, &cond_nm)?;
    let (report, dm, dnm) = masked_loss(x, &xm, &xnm, &match_valid, &nonmatch_valid, alpha, mode)?;
    let mut grads = cae.zero_grads();
    cae.backward(&cache_m, features, &dm, &mut grads);
    cae.backward(&cache_nm, features, &dnm, &mut grads);
    Ok((report, grads))
}

/// Trains the FiLM encoders and decoder against a frozen backbone, keeping the
/// epoch with the best validation AUROC for unknown-pixel detection.
pub fn train_cae(
    backbone: &BackboneCheckpoint,
    train: &[LabeledPatch],
    val: &[LabeledPatch],
    hyper: &CaeHyper,
) -> Result<CaeRun> {
    backbone.verify()?;
    if hyper.batch < 2 {
        return Err(CoreSegError::invalid("CAE batch size must be at least 2"));
    }
    if train.len() < 2 {
        return Err(CoreSegError::invalid("CAE training needs at least two patches"));
    }
    if !hyper.alpha.is_finite() {
        return Err(CoreSegError::invalid("alpha must be finite"));
    }
    let arch = *backbone.arch();
    let prepared: Vec<Prepared> = train
        .iter()
        .map(|p| {
            Ok(Prepared {
                patch: p,
                features: backbone.encode_frozen(&p.image)?,
                closed: backbone.predict_closed(&p.image)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut cae = Cae::new(&arch, hyper.seed)?;
    let mut opt = Adam::new(&cae, hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xca_e5eed);
    let start = Instant::now();
    let mut steps = Vec::new();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, usize, Cae)> = None;

    for epoch in 0..hyper.epochs {
        let (mut sm, mut snm, mut st, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in batches(prepared.len(), hyper.batch, &mut rng).into_iter().enumerate() {
            let perm = nonmatch_permutation(batch.len(), &mut rng)?;
            let mut grads = cae.zero_grads();
            let (mut m, mut nm) = (0.0, 0.0);
            for (j, &i) in batch.iter().enumerate() {
                let own = &prepared[i];
                let other = &prepared[batch[perm[j]]];
                let (report, g) = pair_loss_and_grads(
                    &cae,
                    &own.patch.image.pixels,
                    &own.features,
                    &own.patch.mask,
                    &own.closed,
                    &other.patch.mask,
                    &other.closed,
                    hyper.alpha,
                    hyper.nonmatch,
                )?;
                m += report.match_term;
                nm += report.nonmatch_term;
                accumulate(&mut grads, &g);
            }
            let inv = 1.0 / batch.len() as f64;
            let report = LossReport::new(m * inv, nm * inv, hyper.alpha);
            if !report.total.is_finite() {
                return Err(CoreSegError::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("{report:?}"),
                });
            }
            scale_grads(&mut grads, inv);
            opt.step(&mut cae, &grads);
            sm += report.match_term;
            snm += report.nonmatch_term;
            st += report.total;
            n += 1;
            steps.push(report);
        }
        backbone.verify()?;
        let val_auroc = if val.is_empty() {
            None
        } else {
            crate::openset::validation_auroc(backbone, &cae, val)?
        };
        let n = n.max(1) as f64;
        let entry = CaeEpochLog {
            epoch,
            match_term: sm / n,
            nonmatch_term: snm / n,
            total: st / n,
            val_auroc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "cae epoch {epoch}: match {:.4} nonmatch {:.4} total {:.4} val auroc {:?}",
            entry.match_term,
            entry.nonmatch_term,
            entry.total,
            val_auroc
        );
        history.push(entry);
        // Without a defined AUROC the latest epoch wins.
        let score = val_auroc.unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((b, _, _)) => score > *b || (val_auroc.is_none() && *b == f64::NEG_INFINITY),
        };
        if better {
            best = Some((score, epoch, cae.clone()));
        }
    }
    backbone.verify()?;
    let (best_epoch, cae) = match best {
        Some((_, e, c)) => (e, c),
        None => (0, cae),
    };
    Ok(CaeRun {
        checkpoint: CaeCheckpoint {
            cae,
            hyper: *hyper,
            backbone_fingerprint: backbone.fingerprint().to_string(),
        },
        history,
        steps,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_backbone;
    use crate::data::Origin;
    use ndarray::Array3;

    fn arch() -> ArchDescriptor {
        ArchDescriptor {
            blocks: 4,
            base_width: 2,
            num_classes: 3,
            in_channels: 4,
        }
    }

    fn raster(px: Array3<f64>) -> RasterPatch {
        let c = px.dim().0;
        RasterPatch::new(px, (0..c).map(|i| format!("b{i}")).collect(), Origin::default()).unwrap()
    }

    #[test]
    fn reconstruction_has_input_shape_and_is_pure() {
        let a = arch();
        let net = build_backbone(a, 1).unwrap();
        let (_, e) = net.forward(&raster(Array3::from_elem((4, 64, 64), 0.5))).unwrap();
        let cae = Cae::new(&a, 2).unwrap();
        let cond = crate::conditioning::class_constant_map(1, 64, 64, 3).unwrap();
        let r = cae.reconstruct(&e, &cond).unwrap();
        assert_eq!(r.dim(), (4, 64, 64));
        assert_eq!(r, cae.reconstruct(&e, &cond).unwrap());
    }

    #[test]
    fn stage_inputs_are_concatenations() {
        let a = arch();
        let cae = Cae::new(&a, 0).unwrap();
        let w = a.widths();
        for i in 0..a.blocks {
            let prev = if i + 1 == a.blocks { w[i] } else { w[i + 1] };
            assert_eq!(cae.decoder.stages[i].first.in_channels(), prev + w[i] + w[i]);
            assert_eq!(stage_input_channels(&a, i), prev + 2 * w[i]);
        }
    }

    #[test]
    fn decoder_rejects_misaligned_features() {
        let a = arch();
        let net = build_backbone(a, 1).unwrap();
        let (_, e) = net.forward(&raster(Array3::zeros((4, 16, 16)))).unwrap();
        let cae = Cae::new(&a, 2).unwrap();
        let mut f = ConditionedFeatures { blocks: e.blocks.clone() };
        f.blocks.pop();
        assert!(cae.decoder.decode(&e, &f).is_err());
    }

    #[test]
    fn error_map_hand_cases() {
        let x = raster(Array3::from_shape_vec((2, 1, 1), vec![0.2, 0.8]).unwrap());
        let xhat = Array3::from_shape_vec((2, 1, 1), vec![0.5, 0.4]).unwrap();
        let e = l1_error_map(&x, &xhat).unwrap();
        assert!((e[[0, 0]] - 0.35).abs() < 1e-15);
        assert!(l1_error_map(&x, &x.pixels).unwrap().iter().all(|&v| v == 0.0));
        for c in [1, 3, 5] {
            let z = raster(Array3::zeros((c, 2, 3)));
            let ones = Array3::ones((c, 2, 3));
            assert!(l1_error_map(&z, &ones).unwrap().iter().all(|&v| v == 1.0));
        }
        assert!(l1_error_map(&x, &Array3::zeros((2, 1, 2))).is_err());
    }

    #[test]
    fn loss_term_arithmetic() {
        let x = raster(Array3::zeros((1, 1, 1)));
        let m = Array3::from_elem((1, 1, 1), 0.2);
        let nm = Array3::from_elem((1, 1, 1), 0.5);
        let r = training_loss(&x, &m, &nm, 0.0).unwrap();
        assert_eq!(r.total, r.match_term);
        let r = training_loss(&x, &x.pixels, &nm, 1.0).unwrap();
        assert_eq!(r.total, r.nonmatch_term);
        let r = training_loss(&x, &m, &nm, -0.1).unwrap();
        assert!((r.total - 0.15).abs() < 1e-12);
        assert!(training_loss(&x, &m, &nm, f64::NAN).is_err());
        assert!(training_loss(&x, &Array3::from_elem((1, 1, 1), f64::INFINITY), &nm, 1.0).is_err());
    }

    #[test]
    fn hinge_term_is_nonnegative_and_nonincreasing() {
        let x = Array3::zeros((1, 1, 1));
        let valid = Array2::from_elem((1, 1), true);
        let mut last = f64::INFINITY;
        for i in 0..20 {
            let e = i as f64 * 0.05;
            let nm = Array3::from_elem((1, 1, 1), e);
            let (r, _, _) = masked_loss(&x, &x, &nm, &valid, &valid, 0.5, NonMatchMode::Hinge { margin: 0.5 }).unwrap();
            assert!(r.nonmatch_term >= 0.0);
            assert!(r.nonmatch_term <= last);
            last = r.nonmatch_term;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn two_element_batch_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(nonmatch_permutation(2, &mut rng).unwrap(), vec![1, 0]);
        assert!(nonmatch_permutation(1, &mut rng).is_err());
        let a = LabelMask::new(Array2::zeros((1, 1)), 2).unwrap();
        let b = LabelMask::new(Array2::ones((1, 1)), 2).unwrap();
        let out = sample_nonmatch_mask(&[a.clone(), b.clone()], &mut rng).unwrap();
        assert_eq!(out, vec![b, a]);
    }

    #[test]
    fn permutation_is_seeded() {
        let p1 = nonmatch_permutation(5, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let p2 = nonmatch_permutation(5, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn checkpoint_refuses_foreign_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArchDescriptor { blocks: 2, base_width: 2, num_classes: 2, in_channels: 1 };
        let b1 = BackboneCheckpoint::new(build_backbone(a, 1).unwrap());
        let b2 = BackboneCheckpoint::new(build_backbone(a, 2).unwrap());
        let ckpt = CaeCheckpoint {
            cae: Cae::new(&a, 3).unwrap(),
            hyper: CaeHyper { alpha: 0.5, lr: 1e-3, epochs: 1, batch: 2, seed: 0, nonmatch: NonMatchMode::default() },
            backbone_fingerprint: b1.fingerprint().to_string(),
        };
        let path = dir.path().join("c.ckpt");
        ckpt.save(&path).unwrap();
        assert_eq!(CaeCheckpoint::load(&path, &b1).unwrap(), ckpt);
        match CaeCheckpoint::load(&path, &b2) {
            Err(CoreSegError::ArtifactChain(_)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
