//! COCO-style average precision.
//!
//! Detections are matched greedily per image and class, the per-class
//! precision/recall curve is made monotone from the right, and the area under
//! it is sampled at evenly spaced recall points. Class AP averages that area
//! over the IoU thresholds; mean AP averages class AP over every class that
//! has ground truth.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u32,
    #[serde(rename = "bbox")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category_id: u32,
    #[serde(rename = "bbox")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_samples: usize,
    pub max_detections_per_image: usize,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_samples: 101,
            max_detections_per_image: 100,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::InvalidConfig("no IoU thresholds".into()));
        }
        for &t in &self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "IoU threshold {t} outside (0, 1]"
                )));
            }
        }
        if self.iou_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "IoU thresholds must be strictly increasing".into(),
            ));
        }
        if self.recall_samples < 2 {
            return Err(Error::InvalidConfig("recall_samples must be >= 2".into()));
        }
        if self.max_detections_per_image == 0 {
            return Err(Error::InvalidConfig(
                "max_detections_per_image must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-class, per-threshold average precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub class_ids: Vec<u32>,
    pub iou_thresholds: Vec<f64>,
    /// `cap[i][k]`: area under the interpolated PR curve of `class_ids[i]`
    /// at `iou_thresholds[k]`.
    pub cap: Vec<Vec<f64>>,
    pub class_ap: Vec<f64>,
    pub mean_ap: f64,
    pub classes_evaluated: usize,
}

/// Descending score, ties by ascending position.
fn score_order<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        score(&items[b])
            .partial_cmp(&score(&items[a]))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy one-to-one assignment of detections to ground truth boxes of a
/// single image and class. Returns, per detection (input order), the index of
/// the matched ground truth.
pub fn greedy_match(
    detections: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut assignment = vec![None; detections.len()];
    let mut used = vec![false; gts.len()];
    for d in score_order(detections, |d| d.score) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(&detections[d].bbox, &gt.bbox);
            if v < iou_threshold {
                continue;
            }
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            assignment[d] = Some(g);
        }
    }
    assignment
}

/// Detections and ground truth of one class, grouped by image, with the
/// per-image detection cap already applied.
struct ClassData {
    dets: Vec<Detection>,
    gts_by_image: BTreeMap<u64, Vec<GroundTruth>>,
    num_gt: usize,
}

impl ClassData {
    fn collect(
        detections: &[Detection],
        gts: &[GroundTruth],
        class_id: u32,
        config: &ApConfig,
    ) -> Self {
        let mut gts_by_image: BTreeMap<u64, Vec<GroundTruth>> = BTreeMap::new();
        let mut num_gt = 0;
        for g in gts.iter().filter(|g| g.category_id == class_id) {
            gts_by_image.entry(g.image_id).or_default().push(*g);
            num_gt += 1;
        }
        let mut per_image: BTreeMap<u64, Vec<(usize, Detection)>> = BTreeMap::new();
        for (i, d) in detections.iter().enumerate() {
            if d.category_id == class_id {
                per_image.entry(d.image_id).or_default().push((i, *d));
            }
        }
        // keep the top-scoring detections of each image, then restore input order
        let mut kept: Vec<(usize, Detection)> = Vec::new();
        for list in per_image.into_values() {
            let order = score_order(&list, |(_, d)| d.score);
            kept.extend(
                order
                    .into_iter()
                    .take(config.max_detections_per_image)
                    .map(|j| list[j]),
            );
        }
        kept.sort_by_key(|(i, _)| *i);
        Self {
            dets: kept.into_iter().map(|(_, d)| d).collect(),
            gts_by_image,
            num_gt,
        }
    }

    fn cap(&self, iou_threshold: f64, recall_samples: usize) -> f64 {
        // true-positive flag per detection, from per-image greedy matching
        let mut is_tp = vec![false; self.dets.len()];
        let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, d) in self.dets.iter().enumerate() {
            by_image.entry(d.image_id).or_default().push(i);
        }
        for (image_id, idx) in &by_image {
            let Some(image_gts) = self.gts_by_image.get(image_id) else {
                continue;
            };
            let dets: Vec<Detection> = idx.iter().map(|&i| self.dets[i]).collect();
            for (local, m) in greedy_match(&dets, image_gts, iou_threshold)
                .into_iter()
                .enumerate()
            {
                is_tp[idx[local]] = m.is_some();
            }
        }

        let order = score_order(&self.dets, |d| d.score);
        let n = order.len();
        let mut recall = Vec::with_capacity(n);
        let mut precision = Vec::with_capacity(n);
        let (mut tp, mut fp) = (0usize, 0usize);
        for &i in &order {
            if is_tp[i] {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(tp as f64 / self.num_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        // envelope: precision at recall r is the best precision at recall >= r
        for i in (0..n.saturating_sub(1)).rev() {
            if precision[i + 1] > precision[i] {
                precision[i] = precision[i + 1];
            }
        }

        let last = (recall_samples - 1) as f64;
        let mut area = 0.0;
        let mut pos = 0;
        for s in 0..recall_samples {
            let r = s as f64 / last;
            while pos < n && recall[pos] < r {
                pos += 1;
            }
            if pos == n {
                break;
            }
            area += precision[pos];
        }
        area / recall_samples as f64
    }
}

/// Area under the interpolated precision/recall curve of one class at one IoU
/// threshold.
pub fn cap_at_threshold(
    detections: &[Detection],
    gts: &[GroundTruth],
    class_id: u32,
    iou_threshold: f64,
    config: &ApConfig,
) -> Result<f64> {
    let data = ClassData::collect(detections, gts, class_id, config);
    if data.num_gt == 0 {
        return Err(Error::NotEvaluable { class_id });
    }
    Ok(data.cap(iou_threshold, config.recall_samples))
}

fn class_caps(data: &ClassData, config: &ApConfig) -> Vec<f64> {
    config
        .iou_thresholds
        .par_iter()
        .map(|&t| data.cap(t, config.recall_samples))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Average of the per-threshold CAP of one class.
pub fn class_ap(
    detections: &[Detection],
    gts: &[GroundTruth],
    class_id: u32,
    config: &ApConfig,
) -> Result<f64> {
    config.validate()?;
    let data = ClassData::collect(detections, gts, class_id, config);
    if data.num_gt == 0 {
        return Err(Error::NotEvaluable { class_id });
    }
    Ok(mean(&class_caps(&data, config)))
}

/// Class AP averaged over every class with at least one ground truth box.
pub fn mean_ap(
    detections: &[Detection],
    gts: &[GroundTruth],
    config: &ApConfig,
) -> Result<ApReport> {
    config.validate()?;
    let class_ids: Vec<u32> = gts
        .iter()
        .map(|g| g.category_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if class_ids.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let cap: Vec<Vec<f64>> = class_ids
        .par_iter()
        .map(|&c| class_caps(&ClassData::collect(detections, gts, c, config), config))
        .collect();
    let class_ap: Vec<f64> = cap.iter().map(|row| mean(row)).collect();
    Ok(ApReport {
        mean_ap: mean(&class_ap),
        classes_evaluated: class_ids.len(),
        class_ids,
        iou_thresholds: config.iou_thresholds.clone(),
        cap,
        class_ap,
    })
}
