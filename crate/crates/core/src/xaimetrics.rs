//! Localization metrics for attribution maps: attribution localization (share
//! of positive relevance inside the target region) and top-k intersection
//! (fraction of the k most relevant pixels inside it), plus the pipeline that
//! scores explanations of matched detections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detmetrics::{greedy_match, Detection, GroundTruth};
use crate::error::{Error, Result};
use crate::primitives::{rasterize, summarize, union_mask, BBox, BinaryMask, Grid, MetricSummary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlResult {
    pub r_box: f64,
    pub r_tot: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TkiResult {
    pub k: usize,
    pub intersection_count: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    MatchedBox,
    UnionOfClassBoxes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XaiEvalConfig {
    pub match_iou: f64,
    pub score_threshold: f64,
    /// Clamped to the grid size at evaluation time.
    pub k: usize,
    pub target_mode: TargetMode,
}

impl Default for XaiEvalConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.5,
            score_threshold: 0.5,
            k: 1000,
            target_mode: TargetMode::MatchedBox,
        }
    }
}

impl XaiEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "match_iou {} outside (0, 1]",
                self.match_iou
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if !self.score_threshold.is_finite() {
            return Err(Error::InvalidConfig("score_threshold must be finite".into()));
        }
        Ok(())
    }
}

fn check_shape(grid: &Grid, mask: &BinaryMask) -> Result<()> {
    if (grid.width(), grid.height()) != (mask.width(), mask.height()) {
        return Err(Error::ShapeMismatch(format!(
            "grid {}x{} vs mask {}x{}",
            grid.width(),
            grid.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Ratio of strictly positive relevance inside `mask` to all strictly
/// positive relevance.
pub fn attribution_localization(grid: &Grid, mask: &BinaryMask) -> Result<AlResult> {
    check_shape(grid, mask)?;
    let (mut r_box, mut r_tot) = (0.0, 0.0);
    for (&v, &inside) in grid.values().iter().zip(mask.bits()) {
        if v > 0.0 {
            r_tot += v;
            if inside {
                r_box += v;
            }
        }
    }
    if r_tot <= 0.0 {
        return Err(Error::NoPositiveRelevance);
    }
    Ok(AlResult {
        r_box,
        r_tot,
        value: (r_box / r_tot).min(1.0),
    })
}

/// The `k` largest grid values; equal values are ordered by row-major index.
pub fn topk_mask(grid: &Grid, k: usize) -> Result<BinaryMask> {
    let n = grid.len();
    if k == 0 || k > n {
        return Err(Error::BadK { k, max: n });
    }
    let values = grid.values();
    let mut idx: Vec<usize> = (0..n).collect();
    let order = |&a: &usize, &b: &usize| {
        values[b]
            .partial_cmp(&values[a])
            .expect("grid values are finite")
            .then(a.cmp(&b))
    };
    if k < n {
        idx.select_nth_unstable_by(k - 1, order);
    }
    let mut bits = vec![false; n];
    for &i in &idx[..k] {
        bits[i] = true;
    }
    BinaryMask::new(grid.width(), grid.height(), bits)
}

pub fn topk_intersection(grid: &Grid, target: &BinaryMask, k: usize) -> Result<TkiResult> {
    check_shape(grid, target)?;
    let top = topk_mask(grid, k)?;
    let intersection_count = top.and_count(target)?;
    Ok(TkiResult {
        k,
        intersection_count,
        value: intersection_count as f64 / k as f64,
    })
}

/// A detection together with the attribution map explaining it.
#[derive(Debug, Clone)]
pub struct ExplainedDetection {
    pub detection: Detection,
    pub grid: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    /// Position in the evaluated input list.
    pub index: usize,
    pub image_id: u64,
    pub category_id: u32,
    pub al: f64,
    pub tki: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassXaiSummary {
    pub category_id: u32,
    pub al: MetricSummary,
    pub tki: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XaiSummary {
    pub al: MetricSummary,
    pub tki: MetricSummary,
    pub per_class: Vec<ClassXaiSummary>,
    /// Detections that passed the score threshold and matched a ground truth box.
    pub matched: usize,
    /// Matched detections whose map carried no positive relevance.
    pub skipped_no_relevance: usize,
    pub records: Vec<ExplanationRecord>,
}

/// Scores the explanation of every matched detection against its target
/// region and summarizes per class and pooled.
pub fn evaluate_explanations(
    items: &[ExplainedDetection],
    gts: &[GroundTruth],
    config: &XaiEvalConfig,
) -> Result<XaiSummary> {
    config.validate()?;

    // (image, class) -> indices of kept detections
    let mut groups: BTreeMap<(u64, u32), Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if item.detection.score >= config.score_threshold {
            groups
                .entry((item.detection.image_id, item.detection.category_id))
                .or_default()
                .push(i);
        }
    }

    let mut matches: Vec<(usize, BBox, Vec<BBox>)> = Vec::new();
    for ((image_id, class_id), idx) in &groups {
        let class_gts: Vec<GroundTruth> = gts
            .iter()
            .filter(|g| g.image_id == *image_id && g.category_id == *class_id)
            .copied()
            .collect();
        if class_gts.is_empty() {
            continue;
        }
        let dets: Vec<Detection> = idx.iter().map(|&i| items[i].detection).collect();
        for (local, m) in greedy_match(&dets, &class_gts, config.match_iou)
            .into_iter()
            .enumerate()
        {
            if let Some(g) = m {
                let all = class_gts.iter().map(|g| g.bbox).collect();
                matches.push((idx[local], class_gts[g].bbox, all));
            }
        }
    }
    if matches.is_empty() {
        return Err(Error::NothingToExplain);
    }
    matches.sort_by_key(|(i, _, _)| (items[*i].detection.image_id, *i));

    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, matched_box, class_boxes) in &matches {
        let item = &items[*i];
        let (w, h) = (item.grid.width(), item.grid.height());
        let target = match config.target_mode {
            TargetMode::MatchedBox => rasterize(matched_box, w, h),
            TargetMode::UnionOfClassBoxes => union_mask(class_boxes, w, h),
        };
        let al = match attribution_localization(&item.grid, &target) {
            Ok(al) => al,
            Err(Error::NoPositiveRelevance) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let tki = topk_intersection(&item.grid, &target, config.k.min(w * h))?;
        records.push(ExplanationRecord {
            index: *i,
            image_id: item.detection.image_id,
            category_id: item.detection.category_id,
            al: al.value,
            tki: tki.value,
        });
    }
    if records.is_empty() {
        return Err(Error::NothingToExplain);
    }

    let mut by_class: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &records {
        let e = by_class.entry(r.category_id).or_default();
        e.0.push(r.al);
        e.1.push(r.tki);
    }
    let per_class = by_class
        .into_iter()
        .map(|(category_id, (al, tki))| {
            Ok(ClassXaiSummary {
                category_id,
                al: summarize(&al)?,
                tki: summarize(&tki)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let al: Vec<f64> = records.iter().map(|r| r.al).collect();
    let tki: Vec<f64> = records.iter().map(|r| r.tki).collect();
    Ok(XaiSummary {
        al: summarize(&al)?,
        tki: summarize(&tki)?,
        per_class,
        matched: matches.len(),
        skipped_no_relevance: skipped,
        records,
    })
}
