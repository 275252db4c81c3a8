//! Detection evaluation: temporal IoU, per-class average precision and mAP
//! reports over a threshold sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open interval on the snippet axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Segment> {
        if start.partial_cmp(&end) != Some(std::cmp::Ordering::Less)
            || !start.is_finite()
            || !end.is_finite()
        {
            return Err(Error::Contract {
                op: "segment",
                detail: format!("degenerate segment [{start}, {end})"),
            });
        }
        Ok(Segment { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Temporal intersection-over-union of two segments on the real line.
pub fn tiou(a: Segment, b: Segment) -> Result<f64> {
    let ordered = |s: &Segment| s.start.partial_cmp(&s.end) == Some(std::cmp::Ordering::Less);
    if !ordered(&a) || !ordered(&b) {
        return Err(Error::Contract {
            op: "tiou",
            detail: format!(
                "degenerate segment [{}, {}) or [{}, {})",
                a.start, a.end, b.start, b.end
            ),
        });
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    Ok(inter / union)
}

/// A scored detection inside one video of the split.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub video: usize,
    pub segment: Segment,
    pub confidence: f64,
}

/// One ground-truth instance inside one video.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth {
    pub video: usize,
    pub segment: Segment,
}

/// Greedy-matching average precision at one tIoU threshold for one class.
///
/// Detections are ranked by confidence (ties: earlier start, then input
/// order); each is a true positive if it reaches `iou_thr` against the
/// best-tIoU unmatched ground truth of the same video. AP is the area under
/// the precision-recall steps. No ground truth and no detections: undefined
/// (None). No ground truth but detections present: 0.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    iou_thr: f64,
) -> Option<f64> {
    if ground_truth.is_empty() {
        return if detections.is_empty() {
            None
        } else {
            Some(0.0)
        };
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&detections[i], &detections[j]);
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.segment.start.partial_cmp(&b.segment.start).unwrap())
            .then(i.cmp(&j))
    });

    let mut matched = vec![false; ground_truth.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (rank, &di) in order.iter().enumerate() {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truth.iter().enumerate() {
            if matched[gi] || gt.video != det.video {
                continue;
            }
            let overlap = tiou(det.segment, gt.segment).expect("validated segments");
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, overlap)) = best {
            if overlap >= iou_thr {
                matched[gi] = true;
                tp += 1;
                let precision = tp as f64 / (rank + 1) as f64;
                let recall = tp as f64 / ground_truth.len() as f64;
                ap += (recall - prev_recall) * precision;
                prev_recall = recall;
            }
        }
    }
    Some(ap)
}

/// Per-class AP table, mAP per threshold and averages over named ranges.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    /// class name -> threshold key -> AP
    pub per_class_ap: BTreeMap<String, BTreeMap<String, f64>>,
    /// threshold key -> mean AP over classes with ground truth
    pub map_at: BTreeMap<String, f64>,
    /// "0.1:0.5" | "0.1:0.7" | "0.1:0.9" -> mean of member thresholds
    pub avg_map: BTreeMap<String, f64>,
}

fn thr_key(thr: f64) -> String {
    format!("{thr:.2}")
}

/// Standard evaluation sweep 0.1..0.9 step 0.1.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 * 0.1).collect()
}

/// Builds the full report. Classes with no ground truth in the split are
/// excluded from the means; it is an error if no class has ground truth.
pub fn map_report(
    detections: &[(usize, Detection)],
    ground_truth: &[(usize, GroundTruth)],
    class_names: &[String],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold list is empty".into()));
    }
    let classes_with_gt: Vec<usize> = (0..class_names.len())
        .filter(|c| ground_truth.iter().any(|(gc, _)| gc == c))
        .collect();
    if classes_with_gt.is_empty() {
        return Err(Error::Config(
            "no class has ground truth; nothing to evaluate".into(),
        ));
    }

    let mut per_class_ap: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut map_at: BTreeMap<String, f64> = BTreeMap::new();
    for &thr in thresholds {
        let mut sum = 0.0;
        for &class in &classes_with_gt {
            let dets: Vec<Detection> = detections
                .iter()
                .filter(|(c, _)| *c == class)
                .map(|(_, d)| *d)
                .collect();
            let gts: Vec<GroundTruth> = ground_truth
                .iter()
                .filter(|(c, _)| *c == class)
                .map(|(_, g)| *g)
                .collect();
            let ap = average_precision(&dets, &gts, thr).expect("class has ground truth");
            per_class_ap
                .entry(class_names[class].clone())
                .or_default()
                .insert(thr_key(thr), ap);
            sum += ap;
        }
        map_at.insert(thr_key(thr), sum / classes_with_gt.len() as f64);
    }

    let mut avg_map = BTreeMap::new();
    for (name, upper) in [("0.1:0.5", 0.5), ("0.1:0.7", 0.7), ("0.1:0.9", 0.9)] {
        let members: Vec<f64> = thresholds
            .iter()
            .filter(|&&t| t <= upper + 1e-9)
            .map(|&t| map_at[&thr_key(t)])
            .collect();
        if !members.is_empty() {
            avg_map.insert(
                name.to_string(),
                members.iter().sum::<f64>() / members.len() as f64,
            );
        }
    }

    Ok(EvalReport {
        seed: 0,
        config_hash: String::new(),
        per_class_ap,
        map_at,
        avg_map,
    })
}

impl EvalReport {
    /// The mAP table as CSV: one row per threshold plus the named averages.
    pub fn map_table_csv(&self) -> String {
        let mut out = String::from("threshold,map\n");
        for (k, v) in &self.map_at {
            out.push_str(&format!("{k},{v}\n"));
        }
        for (k, v) in &self.avg_map {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}
