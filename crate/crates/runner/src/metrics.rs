//! Center-distance matching, average precision and true-positive errors.

use serde::{Deserialize, Serialize};

use p2d_core::detection::DetectionBox;
use p2d_core::scene::{normalize_angle, SceneObject};

use crate::error::{Result, RunError};

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const ERROR_THRESHOLD: f64 = 2.0;
/// Error assigned to a class without any true positive.
pub const MISSING_ERROR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub detections: Vec<DetectionBox>,
    pub ground_truth: Vec<SceneObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Moving,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub num_gt: usize,
    /// AP at each threshold, same order as the report's thresholds.
    pub ap: Vec<f64>,
    pub ate: f64,
    pub ave: f64,
    pub aoe: f64,
    pub num_tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subset: Subset,
    pub thresholds: Vec<f64>,
    pub map: f64,
    pub mate: f64,
    pub mave: f64,
    pub maoe: f64,
    pub per_class: Vec<ClassMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    pub num_classes: usize,
}

/// One detection's outcome under a threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    /// `(frame, detection index)`.
    pub detection: (usize, usize),
    pub score: f64,
    /// `(frame, ground-truth index)` of the matched object.
    pub matched: Option<(usize, usize)>,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Greedy matching of one class: detections in descending score order (ties
/// by frame, then list position) each take the nearest unmatched ground
/// truth within `threshold`.
pub fn match_class(frames: &[FrameRecord], class_id: usize, threshold: f64) -> Vec<MatchOutcome> {
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|r| vec![false; r.ground_truth.len()]).collect();
    ranked_detections(frames, class_id)
        .into_iter()
        .map(|(f, i)| {
            let det = &frames[f].detections[i];
            let best = frames[f]
                .ground_truth
                .iter()
                .enumerate()
                .filter(|(g, gt)| gt.class_id == class_id && !taken[f][*g])
                .map(|(g, gt)| (g, distance(det.center, gt.center)))
                .filter(|&(_, d)| d <= threshold)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((g, _)) = best {
                taken[f][g] = true;
            }
            MatchOutcome {
                detection: (f, i),
                score: det.score,
                matched: best.map(|(g, _)| (f, g)),
            }
        })
        .collect()
}

/// All-point interpolated average precision of ranked outcomes.
pub fn average_precision(outcomes: &[MatchOutcome], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(outcomes.len());
    for (rank, o) in outcomes.iter().enumerate() {
        if o.matched.is_some() {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope from the right, then sum over recall increments.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        if recall > prev_recall {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    ap
}

fn angle_error(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Restricts ground truth and detections to objects faster than `cutoff`.
pub fn moving_subset(frames: &[FrameRecord], cutoff: f64) -> Vec<FrameRecord> {
    frames
        .iter()
        .map(|r| FrameRecord {
            detections: r.detections.iter().filter(|d| d.speed() > cutoff).cloned().collect(),
            ground_truth: r.ground_truth.iter().filter(|g| g.speed() > cutoff).cloned().collect(),
        })
        .collect()
}

/// Metrics over every class that has ground truth. Classes without ground
/// truth are reported but left out of the means.
pub fn evaluate_records(frames: &[FrameRecord], settings: &EvalSettings, subset: Subset) -> Result<MetricsReport> {
    if frames.is_empty() {
        return Err(RunError::EmptyDataset);
    }
    if settings.thresholds.is_empty() {
        return Err(RunError::Config("at least one matching threshold is required".into()));
    }
    let mut per_class = Vec::with_capacity(settings.num_classes);
    for class_id in 0..settings.num_classes {
        let num_gt = frames
            .iter()
            .map(|r| r.ground_truth.iter().filter(|g| g.class_id == class_id).count())
            .sum();
        let ap = settings
            .thresholds
            .iter()
            .map(|&t| average_precision(&match_class(frames, class_id, t), num_gt))
            .collect();
        let (mut ate, mut ave, mut aoe, mut num_tp) = (0.0, 0.0, 0.0, 0usize);
        // Errors use the same greedy matching as AP, at the error threshold.
        for o in match_class(frames, class_id, ERROR_THRESHOLD) {
            if let Some((f, g)) = o.matched {
                let det = &frames[o.detection.0].detections[o.detection.1];
                let gt = &frames[f].ground_truth[g];
                ate += distance(det.center, gt.center);
                ave += distance(det.velocity, gt.velocity);
                aoe += angle_error(det.yaw, gt.yaw);
                num_tp += 1;
            }
        }
        let mean = |total: f64| if num_tp == 0 { MISSING_ERROR } else { total / num_tp as f64 };
        per_class.push(ClassMetrics {
            class_id,
            num_gt,
            ap,
            ate: mean(ate),
            ave: mean(ave),
            aoe: mean(aoe),
            num_tp,
        });
    }
    let scored: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.num_gt > 0).collect();
    let class_mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|c| f(c)).sum::<f64>() / scored.len() as f64
        }
    };
    let map = class_mean(&|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64);
    let (mate, mave, maoe) = if scored.is_empty() {
        (MISSING_ERROR, MISSING_ERROR, MISSING_ERROR)
    } else {
        (class_mean(&|c| c.ate), class_mean(&|c| c.ave), class_mean(&|c| c.aoe))
    };
    Ok(MetricsReport {
        subset,
        thresholds: settings.thresholds.clone(),
        map,
        mate,
        mave,
        maoe,
        per_class,
    })
}

/// `(frame, index)` of every detection of a class in matching order.
fn ranked_detections(frames: &[FrameRecord], class_id: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, r)| {
            r.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id)
                .map(move |(i, _)| (f, i))
        })
        .collect();
    order.sort_by(|a, b| {
        let sa = frames[a.0].detections[a.1].score;
        let sb = frames[b.0].detections[b.1].score;
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    order
}

/// Serializes records as JSON lines, one frame per line.
pub fn records_to_jsonl(frames: &[FrameRecord]) -> Result<String> {
    let mut out = String::new();
    for r in frames {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSON-lines records. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn records_from_jsonl(text: &str) -> Result<Vec<FrameRecord>> {
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(line).map_err(|e| RunError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.detections.iter().any(|d| !(0.0..=1.0).contains(&d.score)) {
            return Err(RunError::Record {
                line: i + 1,
                message: "detection score outside [0, 1]".into(),
            });
        }
        frames.push(record);
    }
    Ok(frames)
}
