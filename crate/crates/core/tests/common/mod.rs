//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use coreseg::backbone::{argmax_labels, build_backbone, ArchDescriptor, BackboneCheckpoint};
use coreseg::data::{LabelMask, Origin, RasterPatch, IGNORE};
use coreseg::nn::{ConvGrad, Parameterized};
use coreseg::reconstruction::{pair_loss_and_grads, Cae, NonMatchMode};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn arch() -> ArchDescriptor {
    ArchDescriptor {
        blocks: 2,
        base_width: 2,
        num_classes: 3,
        in_channels: 2,
    }
}

fn image(rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn((2, 4, 4), |_| rng.gen::<f64>())
}

fn labels(rng: &mut ChaCha8Rng) -> Array2<i32> {
    Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..3))
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub worst_relative: f64,
    pub checked: usize,
    pub non_negligible: usize,
}

/// Largest relative deviation over every parameter; the denominator is floored
/// at 1e-6 so exactly-zero gradients are compared absolutely.
fn check<M: Parameterized>(model: &mut M, analytic: &[ConvGrad], loss: impl Fn(&M) -> f64) -> GradCheck {
    let n_convs = model.convs_mut().len();
    assert_eq!(n_convs, analytic.len());
    let mut out = GradCheck {
        worst_relative: 0.0,
        checked: 0,
        non_negligible: 0,
    };
    for i in 0..n_convs {
        let n_w = analytic[i].weight.len();
        let n_b = analytic[i].bias.len();
        for j in 0..n_w + n_b {
            let bump = |m: &mut M, d: f64| {
                let conv = &mut m.convs_mut()[i];
                if j < n_w {
                    conv.weight.as_slice_mut().unwrap()[j] += d;
                } else {
                    conv.bias[j - n_w] += d;
                }
            };
            bump(model, H);
            let up = loss(model);
            bump(model, -2.0 * H);
            let down = loss(model);
            bump(model, H);
            let numeric = (up - down) / (2.0 * H);
            let a = if j < n_w {
                analytic[i].weight.as_slice().unwrap()[j]
            } else {
                analytic[i].bias[j - n_w]
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            out.worst_relative = out.worst_relative.max(rel);
            out.checked += 1;
            out.non_negligible += (a.abs() > 1e-6) as usize;
        }
    }
    out
}

/// Closed-set cross-entropy on a 4x4, two-block net with UNKNOWN and IGNORE pixels.
pub fn closed_set_gradient_check() -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = build_backbone(arch(), 3).unwrap();
    let x = image(&mut rng);
    let mut y = labels(&mut rng);
    y[[0, 0]] = 3;
    y[[1, 2]] = IGNORE;
    let (_, grads) = net.loss_and_grads(&x, &y);
    check(&mut net, &grads, |m| m.loss(&x, &y))
}

/// Match/non-match CAE loss on the same tiny instance.
pub fn cae_gradient_check(mode: NonMatchMode, alpha: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let backbone = BackboneCheckpoint::new(build_backbone(arch(), 3).unwrap());
    let x = image(&mut rng);
    let patch = RasterPatch::new(x.clone(), vec!["a".into(), "b".into()], Origin::default()).unwrap();
    let e = backbone.encode_frozen(&patch).unwrap();
    let fallback = argmax_labels(&backbone.logits(&patch).unwrap());
    let mut own = labels(&mut rng);
    own[[3, 3]] = 3;
    let own = LabelMask::new(own, 3).unwrap();
    let other = LabelMask::new(labels(&mut rng), 3).unwrap();
    let mut cae = Cae::new(&arch(), 9).unwrap();
    // Move the FiLM heads off their near-identity start so every path carries gradient.
    for conv in cae.convs_mut() {
        conv.weight.mapv_inplace(|w| w + 0.05 * (w * 1e4).sin());
    }
    let loss = |c: &Cae| {
        pair_loss_and_grads(c, &x, &e, &own, &fallback, &other, &fallback, alpha, mode)
            .unwrap()
            .0
            .total
    };
    let (report, grads) = pair_loss_and_grads(&cae, &x, &e, &own, &fallback, &other, &fallback, alpha, mode).unwrap();
    assert!(report.nonmatch_term > 0.0, "non-match term inactive: {report:?}");
    check(&mut cae, &grads, loss)
}

/// O(n^2) pairwise AUROC with ties counted as one half, as an exact ratio.
pub fn brute_force_auroc(scores: &[f64], truth: &[bool]) -> f64 {
    let mut twice: u64 = 0;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !truth[i] {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if !truth[j] {
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}
