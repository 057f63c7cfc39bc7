//! Detection evaluation: IoU matching with a no-reward-no-penalty
//! occlusion policy, precision-recall curves, average precision and the
//! equal error rate.
//!
//! Matching is greedy in descending score order; a detection whose best
//! match is an occluded annotation is ignored (it counts neither as true
//! nor as false positive, and the annotation is consumed). Unmatched
//! occluded annotations contribute nothing; unmatched non-occluded
//! annotations are misses.

use crate::detect::{BoundingBox, Detection};
use crate::error::{Error, Result};
use crate::synth::Annotation;

/// Intersection area over union area, in `[0,1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Outcome of one detection under matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched an occluded annotation: neither rewarded nor penalized.
    Ignored,
}

/// Per-detection labels (aligned with the input order) plus per-annotation
/// matched flags.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub labels: Vec<(Outcome, Option<usize>)>,
    pub annotation_matched: Vec<bool>,
}

impl MatchResult {
    pub fn count(&self, outcome: Outcome) -> usize {
        self.labels.iter().filter(|(o, _)| *o == outcome).count()
    }
}

/// Greedy matching of one frame's detections against its annotations at
/// the given IoU threshold.
pub fn match_detections(
    detections: &[Detection],
    annotations: &[Annotation],
    iou_threshold: f64,
) -> MatchResult {
    debug_assert!(iou_threshold > 0.0 && iou_threshold < 1.0);
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut matched = vec![false; annotations.len()];
    let mut labels = vec![(Outcome::FalsePositive, None); detections.len()];
    for det_idx in order {
        let det = &detections[det_idx];
        let mut best: Option<(usize, f64)> = None;
        for (ann_idx, ann) in annotations.iter().enumerate() {
            if matched[ann_idx] {
                continue;
            }
            let overlap = iou(&det.bbox, &ann.bbox);
            if overlap < iou_threshold {
                continue;
            }
            // strictly-greater keeps the lowest index on IoU ties
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((ann_idx, overlap));
            }
        }
        match best {
            Some((ann_idx, _)) => {
                matched[ann_idx] = true;
                let outcome = if annotations[ann_idx].occluded {
                    Outcome::Ignored
                } else {
                    Outcome::TruePositive
                };
                labels[det_idx] = (outcome, Some(ann_idx));
            }
            None => labels[det_idx] = (Outcome::FalsePositive, None),
        }
    }
    MatchResult {
        labels,
        annotation_matched: matched,
    }
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, Copy)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Ordered `(threshold, precision, recall)` triples, from the highest
/// threshold (recall 0) down.
#[derive(Debug, Clone)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub total_positives: usize,
}

/// Builds the curve by sweeping a threshold over every distinct score.
/// `scored` pairs each detection's score with its matching outcome;
/// ignored detections are excluded from both precision and recall.
/// `total_positives` counts non-occluded annotations over the test set.
pub fn pr_curve(scored: &[(f64, Outcome)], total_positives: usize) -> Result<PrCurve> {
    if total_positives == 0 {
        return Err(Error::Input(
            "total_positives is zero; nothing to evaluate".into(),
        ));
    }
    let mut counted: Vec<(f64, Outcome)> = scored
        .iter()
        .copied()
        .filter(|(_, o)| *o != Outcome::Ignored)
        .collect();
    counted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    // leading point: no detections above the top threshold
    let mut points = vec![PrPoint {
        threshold: f64::INFINITY,
        precision: 1.0,
        recall: 0.0,
        tp: 0,
        fp: 0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < counted.len() {
        let threshold = counted[i].0;
        // consume every detection sharing this score
        while i < counted.len() && counted[i].0 == threshold {
            match counted[i].1 {
                Outcome::TruePositive => tp += 1,
                Outcome::FalsePositive => fp += 1,
                Outcome::Ignored => unreachable!(),
            }
            i += 1;
        }
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / total_positives as f64;
        points.push(PrPoint {
            threshold,
            precision,
            recall,
            tp,
            fp,
        });
    }
    Ok(PrCurve {
        points,
        total_positives,
    })
}

/// All-points interpolated average precision: for each recall increment,
/// the maximum precision at recall at least that value.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.recall, p.precision))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // precision envelope from the right
    let mut envelope = vec![0.0; pts.len()];
    let mut best: f64 = 0.0;
    for (i, &(_, p)) in pts.iter().enumerate().rev() {
        best = best.max(p);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    ap
}

/// Equal error rate of a curve.
#[derive(Debug, Clone, Copy)]
pub struct Eer {
    /// The common precision=recall value.
    pub value: f64,
    /// Recall at the crossing (equals `value` unless at an endpoint).
    pub recall: f64,
    /// False when no sign change existed and an endpoint was reported.
    pub crossed: bool,
}

/// Finds the point where precision equals recall: an exact curve point if
/// one exists, else linear interpolation between the two adjacent sweep
/// points where `precision − recall` changes sign, else the endpoint
/// closest to equality (flagged).
pub fn equal_error_rate(curve: &PrCurve) -> Eer {
    let pts = &curve.points;
    for p in pts {
        if p.precision == p.recall {
            return Eer {
                value: p.precision,
                recall: p.recall,
                crossed: true,
            };
        }
    }
    for pair in pts.windows(2) {
        let d0 = pair[0].precision - pair[0].recall;
        let d1 = pair[1].precision - pair[1].recall;
        if (d0 > 0.0) != (d1 > 0.0) {
            let t = d0 / (d0 - d1);
            let value = pair[0].precision + t * (pair[1].precision - pair[0].precision);
            let recall = pair[0].recall + t * (pair[1].recall - pair[0].recall);
            debug_assert!((value - recall).abs() < 1e-9);
            return Eer {
                value,
                recall,
                crossed: true,
            };
        }
    }
    // no crossing: report the endpoint nearest to equality
    let best = pts
        .iter()
        .min_by(|a, b| {
            (a.precision - a.recall)
                .abs()
                .total_cmp(&(b.precision - b.recall).abs())
        })
        .expect("curve always has the leading point");
    Eer {
        value: (best.precision + best.recall) / 2.0,
        recall: best.recall,
        crossed: false,
    }
}

// ---------------------------------------------------------------------------
// Metrics report files
// ---------------------------------------------------------------------------

/// Summary metrics of one evaluated run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ap: f64,
    pub eer: f64,
    pub recall_at_eer: f64,
    pub iou_threshold: f64,
    pub n_frames: usize,
    pub n_annotations: usize,
}

/// Writes `metrics.txt` (key=value) and `pr_curve.tsv` (threshold,
/// precision, recall per line) under `dir`.
pub fn write_metrics(dir: &std::path::Path, report: &MetricsReport, curve: &PrCurve) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io("creating metrics dir"))?;
    let text = format!(
        "ap={}\neer={}\nrecall_at_eer={}\niou_threshold={}\nn_frames={}\nn_annotations={}\n",
        report.ap,
        report.eer,
        report.recall_at_eer,
        report.iou_threshold,
        report.n_frames,
        report.n_annotations
    );
    std::fs::write(dir.join("metrics.txt"), text).map_err(Error::io("writing metrics.txt"))?;
    let mut tsv = String::new();
    use std::fmt::Write as _;
    for p in &curve.points {
        let _ = writeln!(tsv, "{}\t{}\t{}", p.threshold, p.precision, p.recall);
    }
    std::fs::write(dir.join("pr_curve.tsv"), tsv).map_err(Error::io("writing pr_curve.tsv"))
}

pub fn read_metrics(dir: &std::path::Path) -> Result<MetricsReport> {
    let path = dir.join("metrics.txt");
    let name = path.display().to_string();
    let text = std::fs::read_to_string(&path).map_err(Error::io(format!("reading {name}")))?;
    let mut report = MetricsReport {
        ap: f64::NAN,
        eer: f64::NAN,
        recall_at_eer: f64::NAN,
        iou_threshold: f64::NAN,
        n_frames: 0,
        n_annotations: 0,
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: name.clone(),
            offset: (i + 1) as u64,
            message: format!("expected key=value, got `{line}`"),
        })?;
        let bad = || Error::Parse {
            file: name.clone(),
            offset: (i + 1) as u64,
            message: format!("bad value for `{k}`"),
        };
        match k {
            "ap" => report.ap = v.parse().map_err(|_| bad())?,
            "eer" => report.eer = v.parse().map_err(|_| bad())?,
            "recall_at_eer" => report.recall_at_eer = v.parse().map_err(|_| bad())?,
            "iou_threshold" => report.iou_threshold = v.parse().map_err(|_| bad())?,
            "n_frames" => report.n_frames = v.parse().map_err(|_| bad())?,
            "n_annotations" => report.n_annotations = v.parse().map_err(|_| bad())?,
            other => {
                return Err(Error::Parse {
                    file: name.clone(),
                    offset: (i + 1) as u64,
                    message: format!("unknown metrics key `{other}`"),
                })
            }
        }
    }
    if report.ap.is_nan() || report.eer.is_nan() {
        return Err(Error::Parse {
            file: name,
            offset: 0,
            message: "metrics.txt missing ap or eer".into(),
        });
    }
    Ok(report)
}
