//! Independent reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use detxai::micromodel::{backward, forward, loss, ModelParams, Target, Tensor, TENSOR_NAMES};
use detxai::{BBox, BinaryMask, Detection, Grid, GroundTruth};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / |b|`, or `|a|` when `b` is zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

// ---------------------------------------------------------------- grids

pub struct GridCase {
    pub grid: Grid,
    pub mask: BinaryMask,
    pub k: usize,
}

/// Random grid up to 16x16 with mixed-sign values (every fourth case drawn
/// from a few levels so ties occur), a random mask and a valid k.
pub fn random_grid_case(rng: &mut ChaCha8Rng, index: usize) -> GridCase {
    let w = rng.random_range(1..=16);
    let h = rng.random_range(1..=16);
    let n = w * h;
    let values: Vec<f64> = if index % 4 == 3 {
        (0..n).map(|_| rng.random_range(-2..=3) as f64 * 0.5).collect()
    } else {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let p: f64 = rng.random();
    let bits: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
    GridCase {
        grid: Grid::new(w, h, values).unwrap(),
        mask: BinaryMask::new(w, h, bits).unwrap(),
        k: rng.random_range(1..=n),
    }
}

/// Positive relevance inside the mask over all positive relevance, by a
/// row/column double loop. `None` when there is no positive relevance.
pub fn al_oracle(grid: &Grid, mask: &BinaryMask) -> Option<f64> {
    let (mut inside, mut total) = (0.0, 0.0);
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            let v = grid.get(r, c);
            if v > 0.0 {
                total += v;
                if mask.get(r, c) {
                    inside += v;
                }
            }
        }
    }
    (total > 0.0).then(|| inside / total)
}

/// A pixel is in the top k when fewer than k pixels outrank it; a pixel
/// outranks another with a larger value, or an equal value and an earlier
/// row-major position.
pub fn tki_oracle(grid: &Grid, mask: &BinaryMask, k: usize) -> f64 {
    let (h, w) = (grid.height(), grid.width());
    let mut hits = 0;
    for r in 0..h {
        for c in 0..w {
            let v = grid.get(r, c);
            let mut ahead = 0;
            for r2 in 0..h {
                for c2 in 0..w {
                    let u = grid.get(r2, c2);
                    if u > v || (u == v && (r2, c2) < (r, c)) {
                        ahead += 1;
                    }
                }
            }
            if ahead < k && mask.get(r, c) {
                hits += 1;
            }
        }
    }
    hits as f64 / k as f64
}

// ---------------------------------------------------------------- AP

pub struct ApScenario {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..60.0);
    let y = rng.random_range(0.0..60.0);
    BBox::new(x, y, rng.random_range(5.0..40.0), rng.random_range(5.0..40.0)).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let mut d = || rng.random_range(-4.0..4.0);
    let (x, y) = (b.x() + d(), b.y() + d());
    let (w, h) = ((b.width() + d()).max(1.0), (b.height() + d()).max(1.0));
    BBox::new(x.max(0.0), y.max(0.0), w, h).unwrap()
}

/// Up to 3 classes, 4 images, 10 detections and 5 ground truth boxes. Most
/// detections are perturbed copies of a ground truth box so IoUs spread over
/// the threshold range; some scores repeat.
pub fn random_ap_scenario(rng: &mut ChaCha8Rng) -> ApScenario {
    let classes = rng.random_range(1..=3u32);
    let images = rng.random_range(1..=4u64);
    let n_gt = rng.random_range(1..=5);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            image_id: rng.random_range(0..images),
            category_id: rng.random_range(1..=classes),
            bbox: random_box(rng),
        })
        .collect();
    let n_det = rng.random_range(0..=10);
    let detections = (0..n_det)
        .map(|_| {
            let score = if rng.random_bool(0.2) {
                0.5
            } else {
                rng.random_range(0.0..1.0)
            };
            if rng.random_bool(0.75) {
                let g = gts[rng.random_range(0..gts.len())];
                let category_id = if rng.random_bool(0.85) {
                    g.category_id
                } else {
                    rng.random_range(1..=classes)
                };
                Detection {
                    image_id: g.image_id,
                    category_id,
                    bbox: jitter(rng, &g.bbox),
                    score,
                }
            } else {
                Detection {
                    image_id: rng.random_range(0..images),
                    category_id: rng.random_range(1..=classes),
                    bbox: random_box(rng),
                    score,
                }
            }
        })
        .collect();
    ApScenario { detections, gts }
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max().min(b.x_max()) - a.x().max(b.x())).max(0.0);
    let iy = (a.y_max().min(b.y_max()) - a.y().max(b.y())).max(0.0);
    let inter = ix * iy;
    let union = (a.x_max() - a.x()) * (a.y_max() - a.y()) + (b.x_max() - b.x()) * (b.y_max() - b.y()) - inter;
    inter / union
}

/// Area under the interpolated PR curve of one class at one threshold:
/// detections in global score order, each claims the best unclaimed
/// same-image ground truth at or above the threshold; interpolated precision
/// at recall r is the maximum precision at any recall >= r, sampled at
/// `samples` evenly spaced recalls.
pub fn cap_oracle(sc: &ApScenario, class: u32, threshold: f64, samples: usize, max_dets: usize) -> f64 {
    let gts: Vec<&GroundTruth> = sc.gts.iter().filter(|g| g.category_id == class).collect();
    let mut dets: Vec<(usize, &Detection)> = sc
        .detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.category_id == class)
        .collect();
    dets.sort_by(|(i, a), (j, b)| b.score.total_cmp(&a.score).then(i.cmp(j)));
    let mut per_image = std::collections::HashMap::new();
    dets.retain(|(_, d)| {
        let seen = per_image.entry(d.image_id).or_insert(0usize);
        *seen += 1;
        *seen <= max_dets
    });

    let mut claimed = vec![false; gts.len()];
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, d) in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] || gt.image_id != d.image_id {
                continue;
            }
            let v = box_iou(&d.bbox, &gt.bbox);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                claimed[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (tp + fp) as f64));
    }

    let mut area = 0.0;
    for s in 0..samples {
        let r = s as f64 / (samples - 1) as f64;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        area += p;
    }
    area / samples as f64
}

/// Mean over classes with ground truth of the threshold-averaged CAP.
pub fn map_oracle(sc: &ApScenario, thresholds: &[f64], samples: usize, max_dets: usize) -> f64 {
    let classes: BTreeSet<u32> = sc.gts.iter().map(|g| g.category_id).collect();
    let per_class: Vec<f64> = classes
        .iter()
        .map(|&c| {
            thresholds.iter().map(|&t| cap_oracle(sc, c, t, samples, max_dets)).sum::<f64>()
                / thresholds.len() as f64
        })
        .collect();
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

// ---------------------------------------------------------------- gradients

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn total_loss(params: &ModelParams, image: &Tensor, target: &Target) -> f64 {
    let c = forward(params, image).unwrap();
    loss(&c.logits, &c.bbox, target)
}

/// Loss plus the piecewise-linear pattern (ReLU signs and pooling winners)
/// the loss is smooth within.
fn loss_and_pattern(params: &ModelParams, image: &Tensor, target: &Target) -> (f64, Vec<bool>, Vec<usize>) {
    let c = forward(params, image).unwrap();
    let signs = c.conv_pre.iter().flat_map(|t| t.data().iter().map(|&v| v > 0.0)).collect();
    let winners = c.pool_argmax.iter().flatten().copied().collect();
    (loss(&c.logits, &c.bbox, target), signs, winners)
}

pub struct LayerGradCheck {
    pub layer: &'static str,
    pub coordinates: usize,
    /// Coordinates whose perturbation crossed a ReLU or pooling boundary and
    /// were replaced.
    pub skipped_at_kinks: usize,
    pub max_rel_err: f64,
}

/// Central differences on `per_layer` distinct random coordinates of each
/// layer (weights and bias together) against the analytic gradient.
/// Coordinates whose two probes fall on different linear pieces are
/// replaced by fresh ones, since the difference quotient is meaningless there.
pub fn finite_difference_check(
    params: &ModelParams,
    image: &Tensor,
    target: &Target,
    h: f64,
    per_layer: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<LayerGradCheck> {
    let analytic = backward(params, &forward(params, image).unwrap(), target);
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    let layers = ["conv1", "conv2", "conv3", "class_head", "box_head"];
    layers
        .iter()
        .enumerate()
        .map(|(l, &layer)| {
            let (wi, bi) = (2 * l, 2 * l + 1);
            assert!(TENSOR_NAMES[wi].starts_with(layer) && TENSOR_NAMES[bi].starts_with(layer));
            let sizes = [grads[wi].len(), grads[bi].len()];
            let total = sizes[0] + sizes[1];
            let (mut checked, mut skipped) = (0, 0);
            let mut max_rel: f64 = 0.0;
            for flat in sample(rng, total, total) {
                if checked == per_layer {
                    break;
                }
                let (t, j) = if flat < sizes[0] { (wi, flat) } else { (bi, flat - sizes[0]) };
                let mut p = params.clone();
                p.tensors_mut()[t].data_mut()[j] += h;
                let (up, up_signs, up_wins) = loss_and_pattern(&p, image, target);
                p.tensors_mut()[t].data_mut()[j] -= 2.0 * h;
                let (down, down_signs, down_wins) = loss_and_pattern(&p, image, target);
                if up_signs != down_signs || up_wins != down_wins {
                    skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                let a = grads[t][j];
                let denom = a.abs().max(numeric.abs());
                let rel = if denom == 0.0 { 0.0 } else { (a - numeric).abs() / denom };
                max_rel = max_rel.max(rel);
                checked += 1;
            }
            LayerGradCheck {
                layer,
                coordinates: checked,
                skipped_at_kinks: skipped,
                max_rel_err: max_rel,
            }
        })
        .collect()
}

/// Values of k whose top-k set is fixed by the values alone: the k-th and
/// (k+1)-th largest values differ by more than `gap`. Up to `max` of them,
/// spread over the range.
pub fn separated_ks(grid: &Grid, gap: f64, max: usize) -> Vec<usize> {
    let mut v = grid.values().to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let all: Vec<usize> = (1..v.len()).filter(|&k| v[k - 1] - v[k] > gap).collect();
    let step = all.len().div_ceil(max).max(1);
    all.into_iter().step_by(step).collect()
}
