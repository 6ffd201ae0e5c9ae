//! Semantic (IoU) and panoptic (PQ) segmentation quality.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{decode_panoptic, PanopticLabelMap, SemanticLabelMap, VOID};

/// Pixel counts indexed by `(gt id, pred id)`; id 0 is VOID.
///
/// Pixels whose ground truth is VOID are never counted. A VOID prediction on a
/// labelled pixel lands in column 0 and counts as a miss for the gt class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        let n = classes + 1;
        Self {
            classes,
            counts: vec![0; n * n],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: u16, pred: u16) -> u64 {
        self.counts[gt as usize * (self.classes + 1) + pred as usize]
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "confusion matrices over {} and {} classes",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, gt: u16) -> u64 {
        (0..=self.classes as u16).map(|p| self.get(gt, p)).sum()
    }

    fn col_sum(&self, pred: u16) -> u64 {
        (1..=self.classes as u16).map(|g| self.get(g, pred)).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs.
    pub fn class_iou(&self, class: u16) -> Option<f64> {
        let tp = self.get(class, class);
        let fn_ = self.row_sum(class) - tp;
        let fp = self.col_sum(class) - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn gt_present(&self, class: u16) -> bool {
        self.row_sum(class) > 0
    }

    pub fn pred_present(&self, class: u16) -> bool {
        self.col_sum(class) > 0
    }
}

pub fn confusion_matrix(pred: &SemanticLabelMap, gt: &SemanticLabelMap, classes: usize) -> Result<ConfusionMatrix> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    let n = classes + 1;
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if g == VOID {
            continue;
        }
        if g as usize > classes || p as usize > classes {
            return Err(Error::InvalidArgument(format!(
                "class id {} outside 1..={classes}",
                g.max(p)
            )));
        }
        cm.counts[g as usize * n + p as usize] += 1;
    }
    Ok(cm)
}

/// Mean IoU over classes present in the ground truth.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = (1..=cm.classes as u16)
        .filter(|&k| cm.gt_present(k))
        .map(|k| cm.class_iou(k).expect("present class has a denominator"))
        .collect();
    if ious.is_empty() {
        return Err(Error::NoValidClasses);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Mean IoU of one image over classes present in its ground truth or prediction.
pub fn per_image_iou(pred: &SemanticLabelMap, gt: &SemanticLabelMap, classes: usize) -> Result<f64> {
    let cm = confusion_matrix(pred, gt, classes)?;
    if !(1..=classes as u16).any(|k| cm.gt_present(k)) {
        return Err(Error::NoValidClasses);
    }
    let ious: Vec<f64> = (1..=classes as u16).filter_map(|k| cm.class_iou(k)).collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// True/false positive and false negative tallies of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PqCounts {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl PqCounts {
    pub fn quality(&self) -> SegmentQuality {
        let tp = self.tp as f64;
        let denom = tp + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            return SegmentQuality::default();
        }
        let sq = if self.tp > 0 { self.iou_sum / tp } else { 0.0 };
        let rq = tp / denom;
        SegmentQuality {
            pq: self.iou_sum / denom,
            sq,
            rq,
        }
    }

    fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    fn has_gt(&self) -> bool {
        self.tp + self.fn_ > 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SegmentQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// A predicted segment matched to a ground-truth segment of the same class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMatch {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

/// Per-class PQ tallies; adding tallies of several images gives dataset PQ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PqStats {
    pub per_class: BTreeMap<u16, PqCounts>,
}

impl PqStats {
    pub fn add(&mut self, other: &PqStats) {
        for (&k, c) in &other.per_class {
            let e = self.per_class.entry(k).or_default();
            e.iou_sum += c.iou_sum;
            e.tp += c.tp;
            e.fp += c.fp;
            e.fn_ += c.fn_;
        }
    }

    /// Averages per-class quality over classes that occur (or, with
    /// `gt_classes_only`, over classes that occur in the ground truth).
    pub fn summary(&self, gt_classes_only: bool) -> Result<PqSummary> {
        let per_class: BTreeMap<u16, SegmentQuality> = self
            .per_class
            .iter()
            .filter(|(_, c)| if gt_classes_only { c.has_gt() } else { c.present() })
            .map(|(&k, c)| (k, c.quality()))
            .collect();
        if per_class.is_empty() {
            return Err(Error::NoValidClasses);
        }
        let n = per_class.len() as f64;
        let mean = |f: fn(&SegmentQuality) -> f64| per_class.values().map(f).sum::<f64>() / n;
        Ok(PqSummary {
            pq: mean(|q| q.pq),
            sq: mean(|q| q.sq),
            rq: mean(|q| q.rq),
            per_class,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqSummary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub per_class: BTreeMap<u16, SegmentQuality>,
}

/// Segment matching and PQ tallies for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PqImage {
    pub stats: PqStats,
    pub matches: Vec<SegmentMatch>,
}

impl PqImage {
    /// Ground-truth segment matched to a predicted segment, if any.
    pub fn matched_gt(&self, pred: u32) -> Option<u32> {
        self.matches.iter().find(|m| m.pred == pred).map(|m| m.gt)
    }

    pub fn summary(&self) -> Result<PqSummary> {
        self.stats.summary(false)
    }
}

/// Matches segments within class at IoU > 0.5 and tallies TP/FP/FN.
///
/// A predicted segment lying more than half over VOID ground truth is not a
/// false positive; VOID ground-truth pixels are removed from every union.
pub fn pq_image(pred: &PanopticLabelMap, gt: &PanopticLabelMap) -> Result<PqImage> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut pred_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut gt_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        *pairs.entry((p, g)).or_default() += 1;
    }
    let void_overlap = |p: u32| pairs.get(&(p, 0)).copied().unwrap_or(0);
    let mut candidates: Vec<(u32, u32, u64)> = pairs
        .iter()
        .filter(|(&(p, g), _)| p != 0 && g != 0 && decode_panoptic(p).0 == decode_panoptic(g).0)
        .map(|(&(p, g), &inter)| (p, g, inter))
        .collect();
    candidates.sort_unstable();
    let mut stats = PqStats::default();
    let mut matches = Vec::new();
    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    for (p, g, inter) in candidates {
        let union = pred_area[&p] + gt_area[&g] - inter - void_overlap(p);
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            let e = stats.per_class.entry(decode_panoptic(g).0).or_default();
            e.tp += 1;
            e.iou_sum += iou;
            matched_pred.insert(p);
            matched_gt.insert(g);
            matches.push(SegmentMatch { pred: p, gt: g, iou });
        }
    }
    for &g in gt_area.keys() {
        if !matched_gt.contains(&g) {
            stats.per_class.entry(decode_panoptic(g).0).or_default().fn_ += 1;
        }
    }
    for (&p, &area) in &pred_area {
        if matched_pred.contains(&p) {
            continue;
        }
        if void_overlap(p) as f64 / area as f64 > 0.5 {
            continue;
        }
        stats.per_class.entry(decode_panoptic(p).0).or_default().fp += 1;
    }
    Ok(PqImage { stats, matches })
}

/// Per-image PQ over classes occurring in that image.
pub fn per_image_pq(pred: &PanopticLabelMap, gt: &PanopticLabelMap) -> Result<PqSummary> {
    pq_image(pred, gt)?.summary()
}
