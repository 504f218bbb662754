//! Detection evaluation: IoU, greedy matching, precision/recall curves,
//! AP as the area under the precision envelope, and mAP over classes and
//! IoU thresholds.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Axis-aligned box in pixels, `x_max > x_min` and `y_max > y_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Config(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub class_id: u32,
    pub bbox: BBox,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Stable sort by descending confidence; equal confidences keep input order.
pub fn sort_by_confidence(dets: &[DetectionBox]) -> Vec<DetectionBox> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    sorted
}

/// Outcome of matching one class's detections against its ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// True for a true positive, in descending-confidence order.
    pub labels: Vec<bool>,
    pub confidences: Vec<f64>,
    /// Index of the matched ground truth for each true positive.
    pub matched_gt: Vec<Option<usize>>,
    pub false_negatives: usize,
    pub n_gt: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn false_positives(&self) -> usize {
        self.labels.len() - self.true_positives()
    }
}

/// Greedy confidence-ordered matching. Each detection takes the unmatched
/// ground truth with the highest IoU (first index on ties) provided that IoU
/// is at least `iou_threshold`; otherwise it is a false positive. Ground
/// truths left unmatched are false negatives. Class ids are not inspected.
pub fn match_detections(
    dets: &[DetectionBox],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> MatchResult {
    let sorted = sort_by_confidence(dets);
    let mut matched = vec![false; gts.len()];
    let mut labels = Vec::with_capacity(sorted.len());
    let mut matched_gt = Vec::with_capacity(sorted.len());
    for d in &sorted {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                matched[g] = true;
                labels.push(true);
                matched_gt.push(Some(g));
            }
            None => {
                labels.push(false);
                matched_gt.push(None);
            }
        }
    }
    MatchResult {
        labels,
        confidences: sorted.iter().map(|d| d.confidence).collect(),
        matched_gt,
        false_negatives: matched.iter().filter(|m| !**m).count(),
        n_gt: gts.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Confidence of the detection at this cut.
    pub threshold: f64,
}

/// Cumulative precision/recall at each confidence cut, thresholds descending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// `labels` and `confidences` must already be in descending-confidence order.
/// With `n_gt == 0` recall is reported as 0.
pub fn pr_curve(labels: &[bool], confidences: &[f64], n_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let points = labels
        .iter()
        .zip(confidences)
        .enumerate()
        .map(|(i, (&l, &conf))| {
            if l {
                tp += 1;
            }
            PrPoint {
                precision: tp as f64 / (i + 1) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                threshold: conf,
            }
        })
        .collect();
    PrCurve { points }
}

impl PrCurve {
    /// Precision envelope: at each point, the best precision reachable at
    /// this recall or higher.
    pub fn envelope(&self) -> Vec<f64> {
        let mut env = vec![0.0; self.points.len()];
        let mut best: f64 = 0.0;
        for i in (0..self.points.len()).rev() {
            best = best.max(self.points[i].precision);
            env[i] = best;
        }
        env
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Exact area under the precision envelope.
    #[default]
    AllPoints,
    /// Mean envelope precision sampled at recall 0, 0.01, …, 1.
    Points101,
}

impl std::str::FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all-points" => Ok(Interpolation::AllPoints),
            "101-point" => Ok(Interpolation::Points101),
            other => Err(format!(
                "unknown interpolation `{other}` (expected all-points or 101-point)"
            )),
        }
    }
}

impl std::fmt::Display for Interpolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Interpolation::AllPoints => "all-points",
            Interpolation::Points101 => "101-point",
        })
    }
}

pub fn average_precision(curve: &PrCurve, interpolation: Interpolation) -> f64 {
    let env = curve.envelope();
    match interpolation {
        Interpolation::AllPoints => {
            let mut area = 0.0;
            let mut prev_recall = 0.0;
            for (p, &e) in curve.points.iter().zip(&env) {
                area += (p.recall - prev_recall) * e;
                prev_recall = p.recall;
            }
            area
        }
        Interpolation::Points101 => {
            let mut total = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                let idx = curve.points.iter().position(|p| p.recall >= r);
                total += idx.map_or(0.0, |i| env[i]);
            }
            total / 101.0
        }
    }
}

/// Unweighted mean of per-class APs.
pub fn mean_ap(per_class_ap: &[f64]) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::NoClasses);
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEval {
    pub class_id: u32,
    pub n_gt: usize,
    pub n_det: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub ap: f64,
}

impl ClassEval {
    pub fn precision(&self) -> f64 {
        let d = self.true_positives + self.false_positives;
        if d == 0 { 0.0 } else { self.true_positives as f64 / d as f64 }
    }

    pub fn recall(&self) -> f64 {
        let d = self.true_positives + self.false_negatives;
        if d == 0 { 0.0 } else { self.true_positives as f64 / d as f64 }
    }
}

/// Per-class evaluation at one IoU threshold, in ascending class-id order.
/// Classes with neither ground truths nor detections do not appear.
pub fn evaluate(
    dets: &[DetectionBox],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Vec<ClassEval> {
    let mut classes: BTreeMap<u32, (Vec<DetectionBox>, Vec<GroundTruthBox>)> = BTreeMap::new();
    for d in dets {
        classes.entry(d.class_id).or_default().0.push(*d);
    }
    for g in gts {
        classes.entry(g.class_id).or_default().1.push(*g);
    }
    classes
        .into_iter()
        .map(|(class_id, (d, g))| {
            let m = match_detections(&d, &g, iou_threshold);
            let curve = pr_curve(&m.labels, &m.confidences, m.n_gt);
            ClassEval {
                class_id,
                n_gt: g.len(),
                n_det: d.len(),
                true_positives: m.true_positives(),
                false_positives: m.false_positives(),
                false_negatives: m.false_negatives,
                ap: average_precision(&curve, interpolation),
            }
        })
        .collect()
}

pub fn map_at(
    dets: &[DetectionBox],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<f64> {
    let aps: Vec<f64> = evaluate(dets, gts, iou_threshold, interpolation)
        .iter()
        .map(|c| c.ap)
        .collect();
    mean_ap(&aps)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// mAP averaged over `thresholds`.
pub fn map_range(
    dets: &[DetectionBox],
    gts: &[GroundTruthBox],
    thresholds: &[f64],
    interpolation: Interpolation,
) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds given".into()));
    }
    let mut total = 0.0;
    for &t in thresholds {
        total += map_at(dets, gts, t, interpolation)?;
    }
    Ok(total / thresholds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(class_id: u32, confidence: f64, bbox: BBox) -> DetectionBox {
        DetectionBox { class_id, confidence, bbox }
    }

    fn gt(class_id: u32, bbox: BBox) -> GroundTruthBox {
        GroundTruthBox { class_id, bbox }
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &b(2.0, 0.0, 3.0, 2.0)), 0.0);
        assert_eq!(iou(&a, &b(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0);
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn exact_hit() {
        let g = [gt(0, b(0.0, 0.0, 10.0, 10.0))];
        let d = [det(0, 0.9, b(0.0, 0.0, 10.0, 10.0))];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!((m.true_positives(), m.false_positives(), m.false_negatives), (1, 0, 0));
    }

    #[test]
    fn second_detection_on_same_truth_is_false_positive() {
        let g = [gt(0, b(0.0, 0.0, 10.0, 10.0))];
        let d = [det(0, 0.6, b(0.0, 0.0, 10.0, 10.0)), det(0, 0.8, b(1.0, 0.0, 10.0, 10.0))];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.labels, vec![true, false]);
        assert_eq!(m.confidences, vec![0.8, 0.6]);
    }

    #[test]
    fn hand_enumerated_curve() {
        // Cumulative TP/FP over [TP, FP, TP, FP, TP] with three truths:
        // P = 1, 1/2, 2/3, 1/2, 3/5 and R = 1/3, 1/3, 2/3, 2/3, 1.
        // Envelope over recall steps: 1 on (0, 1/3], 2/3 on (1/3, 2/3],
        // 3/5 on (2/3, 1]  →  AP = 1/3 + 2/9 + 1/5 = 34/45.
        let labels = [true, false, true, false, true];
        let conf = [0.9, 0.8, 0.7, 0.6, 0.5];
        let curve = pr_curve(&labels, &conf, 3);
        let p: Vec<f64> = curve.points.iter().map(|x| x.precision).collect();
        let r: Vec<f64> = curve.points.iter().map(|x| x.recall).collect();
        assert_eq!(p, vec![1.0, 0.5, 2.0 / 3.0, 0.5, 0.6]);
        assert_eq!(r, vec![1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0]);
        let ap = average_precision(&curve, Interpolation::AllPoints);
        assert!((ap - 34.0 / 45.0).abs() <= 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let curve = pr_curve(&[true, true], &[0.9, 0.1], 2);
        assert_eq!(average_precision(&curve, Interpolation::AllPoints), 1.0);
        assert_eq!(average_precision(&curve, Interpolation::Points101), 1.0);
        assert_eq!(average_precision(&pr_curve(&[], &[], 4), Interpolation::AllPoints), 0.0);
        assert_eq!(average_precision(&pr_curve(&[], &[], 0), Interpolation::AllPoints), 0.0);
    }

    #[test]
    fn mean_ap_cases() {
        assert_eq!(mean_ap(&[0.42]).unwrap(), 0.42);
        assert_eq!(mean_ap(&[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[]), Err(Error::NoClasses));
    }

    #[test]
    fn perfect_detections_over_all_thresholds() {
        let g = [gt(0, b(0.0, 0.0, 4.0, 4.0)), gt(3, b(5.0, 5.0, 9.0, 8.0))];
        let d = [det(0, 0.7, g[0].bbox), det(3, 0.4, g[1].bbox)];
        let m = map_range(&d, &g, &coco_thresholds(), Interpolation::AllPoints).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn thresholds_are_exact() {
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }
}
