//! Closed-set U-net: encoder blocks with 2x2 max pooling, a decoder that
//! upsamples bilinearly and concatenates the matching encoder block, and a
//! 1x1 classification head.
//!
//! Once trained, the network is wrapped in a [`BackboneCheckpoint`] that only
//! hands out shared references; downstream stages read encoder features from
//! it but cannot mutate it.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{fingerprint, read_archive, write_archive};
use crate::data::{LabelMask, LabeledPatch, RasterPatch};
use crate::nn::{
    self, accumulate, concat, maxpool2, maxpool2_backward, scale_grads, split_channels, upsample2,
    upsample2_backward, Adam, BlockCache, Conv2d, ConvBlock, ConvCache, ConvGrad, Feature,
    NamedTensor, Parameterized,
};
use crate::{CoreSegError, Result};

pub const BACKBONE_MAGIC: &str = "CORESEG-CKPT-1";

/// Shape of a U-net: block count, base width (doubled per block), classes, input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub blocks: usize,
    pub base_width: usize,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(CoreSegError::invalid("at least two encoder blocks are required"));
        }
        if self.base_width == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(CoreSegError::invalid("widths, channels and classes must be positive"));
        }
        Ok(())
    }

    /// Channel width of every encoder block.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.blocks).map(|i| self.base_width << i).collect()
    }

    /// Rejects spatial sizes the pooling pyramid cannot halve cleanly.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let divisor = 1 << (self.blocks - 1);
        if height == 0 || width == 0 || !height.is_multiple_of(divisor) || !width.is_multiple_of(divisor) {
            return Err(CoreSegError::Divisibility {
                height,
                width,
                divisor,
                blocks: self.blocks,
            });
        }
        Ok(())
    }

    /// `(channels, height, width)` of each encoder block for an input of the given size.
    pub fn block_shapes(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        self.widths()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, height >> i, width >> i))
            .collect()
    }
}

/// Per-block encoder activations; the last block is the latent representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFeatures {
    pub blocks: Vec<Feature>,
}

impl EncoderFeatures {
    pub fn latent(&self) -> &Feature {
        self.blocks.last().expect("at least two blocks")
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.blocks.iter().map(|b| b.dim()).collect()
    }
}

/// Per-class scores, `(K, H, W)`.
pub type SegmentationLogits = Feature;

/// A stack of encoder blocks (the first at full resolution, the rest after a 2x2 max pool).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub blocks: Vec<ConvBlock>,
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    pools: Vec<(Vec<usize>, (usize, usize, usize))>,
}

impl EncoderStack {
    pub fn new(in_channels: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut prev = in_channels;
        let blocks = widths
            .iter()
            .map(|&w| {
                let b = ConvBlock::new(prev, w, rng);
                prev = w;
                b
            })
            .collect();
        EncoderStack { blocks }
    }

    pub fn forward(&self, x: &Feature) -> (Vec<Feature>, EncoderCache) {
        let mut outs: Vec<Feature> = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut pools = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, cache) = if i == 0 {
                block.forward(x)
            } else {
                let prev = &outs[i - 1];
                let (pooled, idx) = maxpool2(prev);
                pools.push((idx, prev.dim()));
                block.forward(&pooled)
            };
            outs.push(out);
            caches.push(cache);
        }
        (
            outs,
            EncoderCache {
                blocks: caches,
                pools,
            },
        )
    }

    pub fn infer(&self, x: &Feature) -> Vec<Feature> {
        let mut outs: Vec<Feature> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let out = if i == 0 {
                block.infer(x)
            } else {
                block.infer(&maxpool2(&outs[i - 1]).0)
            };
            outs.push(out);
        }
        outs
    }

    /// Backpropagates per-block output gradients; `grads` holds two entries per block.
    pub fn backward(&self, cache: &EncoderCache, mut douts: Vec<Feature>, grads: &mut [ConvGrad]) {
        for i in (0..self.blocks.len()).rev() {
            let din = self.blocks[i].backward(
                &cache.blocks[i],
                &douts[i],
                &mut grads[2 * i..2 * i + 2],
                i > 0,
            );
            if let Some(din) = din {
                let (idx, shape) = &cache.pools[i - 1];
                douts[i - 1] += &maxpool2_backward(&din, idx, *shape);
            }
        }
    }

    pub fn named_convs(&self, prefix: &str) -> Vec<(String, &Conv2d)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("{prefix}.{i}.conv1"), &b.first),
                    (format!("{prefix}.{i}.conv2"), &b.second),
                ]
            })
            .collect()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.first, &mut b.second])
            .collect()
    }
}

/// The closed-set segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub arch: ArchDescriptor,
    pub encoder: EncoderStack,
    /// `decoder[i]` produces the level-`i` decoder activation.
    pub decoder: Vec<ConvBlock>,
    pub head: Conv2d,
}

struct UNetCache {
    encoder: EncoderCache,
    decoder: Vec<BlockCache>,
    head: ConvCache,
}

impl UNet {
    fn forward_train(&self, x: &Feature) -> (SegmentationLogits, UNetCache) {
        let (feats, encoder) = self.encoder.forward(x);
        let b = self.arch.blocks;
        let mut caches: Vec<Option<BlockCache>> = (0..b - 1).map(|_| None).collect();
        let mut cur = feats[b - 1].clone();
        for i in (0..b - 1).rev() {
            let cat = concat(&[&upsample2(&cur), &feats[i]]);
            let (out, cache) = self.decoder[i].forward(&cat);
            caches[i] = Some(cache);
            cur = out;
        }
        let (logits, head) = self.head.forward(cur.view());
        (
            logits,
            UNetCache {
                encoder,
                decoder: caches.into_iter().map(|c| c.expect("filled")).collect(),
                head,
            },
        )
    }

    fn decode_infer(&self, feats: &[Feature]) -> SegmentationLogits {
        let b = self.arch.blocks;
        let mut cur = feats[b - 1].clone();
        for i in (0..b - 1).rev() {
            let cat = concat(&[&upsample2(&cur), &feats[i]]);
            cur = self.decoder[i].infer(&cat);
        }
        self.head.infer(cur.view())
    }

    fn backward(&self, cache: &UNetCache, dlogits: &Feature, grads: &mut [ConvGrad]) {
        let b = self.arch.blocks;
        let widths = self.arch.widths();
        let (enc_grads, rest) = grads.split_at_mut(2 * b);
        let (dec_grads, head_grad) = rest.split_at_mut(2 * (b - 1));
        let mut dcur = self
            .head
            .backward(&cache.head, dlogits, &mut head_grad[0], true)
            .expect("requested");
        let (_, h, w) = dlogits.dim();
        let mut dfeats: Vec<Feature> = self
            .arch
            .block_shapes(h, w)
            .into_iter()
            .map(Array3::zeros)
            .collect();
        for i in 0..b - 1 {
            let dcat = self.decoder[i]
                .backward(
                    &cache.decoder[i],
                    &dcur,
                    &mut dec_grads[2 * i..2 * i + 2],
                    true,
                )
                .expect("requested");
            let parts = split_channels(&dcat, &[widths[i + 1], widths[i]]);
            dfeats[i] += &parts[1];
            dcur = upsample2_backward(&parts[0]);
        }
        dfeats[b - 1] += &dcur;
        self.encoder.backward(&cache.encoder, dfeats, enc_grads);
    }

    /// Mean cross-entropy over known pixels and its parameter gradients.
    pub fn loss_and_grads(&self, image: &Feature, labels: &Array2<i32>) -> (f64, Vec<ConvGrad>) {
        let (logits, cache) = self.forward_train(image);
        let (loss, dlogits, _) = nn::softmax_cross_entropy(&logits, labels);
        let mut grads = self.zero_grads();
        self.backward(&cache, &dlogits, &mut grads);
        (loss, grads)
    }

    pub fn loss(&self, image: &Feature, labels: &Array2<i32>) -> f64 {
        let logits = self.decode_infer(&self.encoder.infer(image));
        nn::softmax_cross_entropy(&logits, labels).0
    }
}

impl Parameterized for UNet {
    fn named_convs(&self) -> Vec<(String, &Conv2d)> {
        let mut out = self.encoder.named_convs("encoder");
        for (i, b) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.conv1"), &b.first));
            out.push((format!("decoder.{i}.conv2"), &b.second));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = self.encoder.convs_mut();
        for b in self.decoder.iter_mut() {
            out.push(&mut b.first);
            out.push(&mut b.second);
        }
        out.push(&mut self.head);
        out
    }
}

/// Builds an untrained U-net with seeded He initialisation.
pub fn build_backbone(arch: ArchDescriptor, seed: u64) -> Result<UNet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = arch.widths();
    let encoder = EncoderStack::new(arch.in_channels, &widths, &mut rng);
    let decoder = (0..arch.blocks - 1)
        .map(|i| ConvBlock::new(widths[i + 1] + widths[i], widths[i], &mut rng))
        .collect();
    let head = Conv2d::new(widths[0], arch.num_classes, 1, &mut rng);
    Ok(UNet {
        arch,
        encoder,
        decoder,
        head,
    })
}

fn check_patch(arch: &ArchDescriptor, patch: &RasterPatch) -> Result<()> {
    if patch.channels() != arch.in_channels {
        return Err(CoreSegError::shape(format!(
            "patch has {} channels, model expects {}",
            patch.channels(),
            arch.in_channels
        )));
    }
    arch.check_input(patch.height(), patch.width())
}

impl UNet {
    pub fn forward(&self, patch: &RasterPatch) -> Result<(SegmentationLogits, EncoderFeatures)> {
        check_patch(&self.arch, patch)?;
        let feats = self.encoder.infer(&patch.pixels);
        let logits = self.decode_infer(&feats);
        Ok((logits, EncoderFeatures { blocks: feats }))
    }
}

/// Argmax over classes; ties go to the lowest class index.
pub fn argmax_labels(logits: &SegmentationLogits) -> LabelMask {
    let (k, h, w) = logits.dim();
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for c in 1..k {
            if logits[[c, y, x]] > logits[[best, y, x]] {
                best = c;
            }
        }
        best as i32
    });
    LabelMask {
        labels,
        num_known: k,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedSetHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

/// A trained, frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneCheckpoint {
    net: UNet,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    arch: ArchDescriptor,
    fingerprint: String,
}

impl BackboneCheckpoint {
    pub fn new(net: UNet) -> Self {
        let fingerprint = encoder_fingerprint(&net);
        BackboneCheckpoint { net, fingerprint }
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.net.arch
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    /// Stored fingerprint of the encoder parameters.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Recomputes the encoder fingerprint from the live parameters.
    pub fn recompute_fingerprint(&self) -> String {
        encoder_fingerprint(&self.net)
    }

    pub fn verify(&self) -> Result<()> {
        let now = self.recompute_fingerprint();
        if now != self.fingerprint {
            return Err(CoreSegError::ArtifactChain(format!(
                "backbone fingerprint {now} does not match stored {}",
                self.fingerprint
            )));
        }
        Ok(())
    }

    /// Frozen encoder features of a patch.
    pub fn encode_frozen(&self, patch: &RasterPatch) -> Result<EncoderFeatures> {
        check_patch(&self.net.arch, patch)?;
        Ok(EncoderFeatures {
            blocks: self.net.encoder.infer(&patch.pixels),
        })
    }

    pub fn logits(&self, patch: &RasterPatch) -> Result<SegmentationLogits> {
        Ok(self.net.forward(patch)?.0)
    }

    /// Closed-set labels (argmax, lowest index on ties).
    pub fn predict_closed(&self, patch: &RasterPatch) -> Result<LabelMask> {
        Ok(argmax_labels(&self.logits(patch)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BackboneMeta {
            arch: self.net.arch,
            fingerprint: self.fingerprint.clone(),
        };
        write_archive(path, BACKBONE_MAGIC, &meta, &self.net.to_tensors())
    }

    /// Loads and verifies the stored fingerprint.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors): (BackboneMeta, Vec<NamedTensor>) = read_archive(path, BACKBONE_MAGIC)?;
        let mut net = build_backbone(meta.arch, 0)?;
        net.load_tensors(&tensors)?;
        let ckpt = BackboneCheckpoint {
            net,
            fingerprint: meta.fingerprint,
        };
        ckpt.verify()?;
        Ok(ckpt)
    }
}

/// SHA-256 of the encoder parameters only.
pub fn encoder_fingerprint(net: &UNet) -> String {
    let tensors = net.to_tensors();
    fingerprint(tensors.iter().filter(|t| t.name.starts_with("encoder.")))
}

/// Pooled pixel accuracy over known, non-ignored pixels. `None` if there are none.
pub fn closed_set_accuracy(pred: &LabelMask, truth: &LabelMask) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.labels.iter().zip(truth.labels.iter()) {
        if truth.is_known(t) {
            total += 1;
            hit += (p == t) as usize;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

fn validation_accuracy(ckpt: &BackboneCheckpoint, val: &[LabeledPatch]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in val {
        let pred = ckpt.predict_closed(&p.image)?;
        for (&a, &t) in pred.labels.iter().zip(p.mask.labels.iter()) {
            if p.mask.is_known(t) {
                total += 1;
                hit += (a == t) as usize;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Splits `0..n` into shuffled batches, folding a trailing singleton into the previous batch.
pub(crate) fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Result of closed-set training.
#[derive(Debug, Clone)]
pub struct ClosedSetRun {
    pub checkpoint: BackboneCheckpoint,
    pub history: Vec<ClosedEpochLog>,
    pub best_epoch: usize,
}

/// Trains on known pixels only and keeps the epoch with the best validation accuracy.
pub fn train_closed_set(
    mut model: UNet,
    train: &[LabeledPatch],
    val: &[LabeledPatch],
    hyper: &ClosedSetHyper,
) -> Result<ClosedSetRun> {
    if train.is_empty() {
        return Err(CoreSegError::invalid("empty training set"));
    }
    for p in train.iter().chain(val) {
        check_patch(&model.arch, &p.image)?;
        if p.mask.num_known != model.arch.num_classes {
            return Err(CoreSegError::shape(format!(
                "mask has {} known classes, model has {}",
                p.mask.num_known, model.arch.num_classes
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_ba7c);
    let mut opt = Adam::new(&model, hyper.lr);
    let start = Instant::now();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, usize, UNet)> = None;
    for epoch in 0..hyper.epochs {
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for (step, batch) in batches(train.len(), hyper.batch, &mut rng).into_iter().enumerate() {
            let mut grads = model.zero_grads();
            let mut loss = 0.0;
            for &i in &batch {
                let (l, g) = model.loss_and_grads(&train[i].image.pixels, &train[i].mask.labels);
                loss += l;
                accumulate(&mut grads, &g);
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            if !loss.is_finite() {
                return Err(CoreSegError::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("closed-set cross-entropy = {loss}"),
                });
            }
            scale_grads(&mut grads, inv);
            opt.step(&mut model, &grads);
            epoch_loss += loss;
            steps += 1;
        }
        let snapshot = BackboneCheckpoint::new(model.clone());
        let acc = if val.is_empty() {
            0.0
        } else {
            validation_accuracy(&snapshot, val)?
        };
        let entry = ClosedEpochLog {
            epoch,
            train_loss: epoch_loss / steps.max(1) as f64,
            val_accuracy: acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "closed-set epoch {epoch}: loss {:.4} val acc {:.4}",
            entry.train_loss,
            acc
        );
        history.push(entry);
        let better = match &best {
            None => true,
            Some((b, _, _)) => acc > *b || val.is_empty(),
        };
        if better {
            best = Some((acc, epoch, model.clone()));
        }
    }
    let (best_epoch, net) = match best {
        Some((_, e, net)) => (e, net),
        None => (0, model),
    };
    Ok(ClosedSetRun {
        checkpoint: BackboneCheckpoint::new(net),
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Origin;
    use rand::Rng;

    fn arch(blocks: usize, width: usize, k: usize, c: usize) -> ArchDescriptor {
        ArchDescriptor {
            blocks,
            base_width: width,
            num_classes: k,
            in_channels: c,
        }
    }

    fn patch(c: usize, h: usize, w: usize, fill: f64) -> RasterPatch {
        RasterPatch::new(
            Array3::from_elem((c, h, w), fill),
            (0..c).map(|i| format!("b{i}")).collect(),
            Origin::default(),
        )
        .unwrap()
    }

    #[test]
    fn feature_pyramid_halves_per_block() {
        let net = build_backbone(arch(4, 4, 3, 2), 1).unwrap();
        let (logits, feats) = net.forward(&patch(2, 64, 64, 0.3)).unwrap();
        assert_eq!(logits.dim(), (3, 64, 64));
        let sizes: Vec<usize> = feats.blocks.iter().map(|b| b.dim().1).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8]);
        assert_eq!(feats.latent().dim(), (32, 8, 8));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = build_backbone(arch(4, 2, 2, 1), 1).unwrap();
        match net.forward(&patch(1, 63, 63, 0.0)) {
            Err(CoreSegError::Divisibility { divisor: 8, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(build_backbone(arch(1, 2, 2, 1), 1).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = build_backbone(arch(3, 4, 2, 3), 9).unwrap();
        let p = patch(3, 16, 16, 0.0);
        assert_eq!(net.forward(&p).unwrap(), net.forward(&p).unwrap());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let mut logits = Array3::zeros((3, 2, 2));
        logits.slice_mut(ndarray::s![2, .., ..]).fill(1.0);
        assert!(argmax_labels(&logits).labels.iter().all(|&l| l == 2));
        let tie = Array3::from_elem((2, 1, 1), 0.5);
        assert_eq!(argmax_labels(&tie).labels[[0, 0]], 0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let ckpt = BackboneCheckpoint::new(build_backbone(arch(2, 2, 2, 3), 0).unwrap());
        assert!(ckpt.encode_frozen(&patch(2, 8, 8, 0.0)).is_err());
    }

    #[test]
    fn unknown_and_ignore_pixels_get_zero_gradient() {
        let net = build_backbone(arch(2, 2, 3, 2), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(0.0..1.0));
        let mut labels = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 3) as i32);
        labels[[0, 0]] = 3; // unknown
        labels[[1, 2]] = -1;
        let (_, g1) = net.loss_and_grads(&x, &labels);
        labels[[0, 0]] = -1;
        labels[[1, 2]] = 3;
        let (_, g2) = net.loss_and_grads(&x, &labels);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = BackboneCheckpoint::new(build_backbone(arch(3, 2, 2, 1), 5).unwrap());
        let path = dir.path().join("b.ckpt");
        ckpt.save(&path).unwrap();
        let back = BackboneCheckpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"CORESEG-CKPT-1\n"));
    }

    #[test]
    fn batches_never_end_in_a_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(9, 4, &mut rng);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 5]);
    }
}
