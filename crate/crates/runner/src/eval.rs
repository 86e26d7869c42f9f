//! Model evaluation on episode sets: full detection, the moving subset and
//! prediction-only decoding.

use serde::{Deserialize, Serialize};

use p2d_core::detection::decode;
use p2d_core::model::Model;
use p2d_core::scene::Episode;

use crate::config::EvalConfig;
use crate::error::{Result, RunError};
use crate::metrics::{evaluate_records, moving_subset, EvalSettings, FrameRecord, MetricsReport, Subset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: MetricsReport,
    pub moving: MetricsReport,
    /// Boxes decoded from the prediction head alone.
    pub prediction_only: Option<MetricsReport>,
    pub prediction_only_moving: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Records {
    pub detection: Vec<FrameRecord>,
    pub prediction: Option<Vec<FrameRecord>>,
}

/// Decoded detections (and prediction-only boxes where the mode has a
/// prediction head) for the current frame of every episode.
pub fn collect_records(model: &Model<f32>, episodes: &[Episode], eval: &EvalConfig) -> Result<Records> {
    let frames = model.config.frames();
    let grid = &model.config.grid;
    let mut records = Records {
        detection: Vec::with_capacity(episodes.len()),
        prediction: model.mode.has_prediction_head().then(Vec::new),
    };
    for episode in episodes {
        if episode.frames.len() < frames {
            return Err(p2d_core::Error::InsufficientFrames {
                required: frames,
                actual: episode.frames.len(),
            }
            .into());
        }
        let ep = episode.newest(frames);
        let observations: Vec<_> = ep.frames.iter().map(|f| f.observation.clone()).collect();
        let poses = ep.poses();
        let ground_truth = ep.current().objects.clone();
        let out = model.forward(&observations, &poses)?;
        records.detection.push(FrameRecord {
            detections: decode(&out.detection, grid, eval.score_threshold, eval.max_detections),
            ground_truth: ground_truth.clone(),
        });
        if let Some(pred) = records.prediction.as_mut() {
            let n = frames - 1;
            let p = model.predict_only(&observations[..n], &poses[..n], &poses[n])?;
            pred.push(FrameRecord {
                detections: decode(&p, grid, eval.score_threshold, eval.max_detections),
                ground_truth,
            });
        }
    }
    Ok(records)
}

pub fn report_records(records: &Records, eval: &EvalConfig, num_classes: usize) -> Result<EvalReport> {
    let settings = EvalSettings {
        thresholds: eval.thresholds.clone(),
        num_classes,
    };
    let both = |r: &[FrameRecord]| -> Result<(MetricsReport, MetricsReport)> {
        Ok((
            evaluate_records(r, &settings, Subset::All)?,
            evaluate_records(&moving_subset(r, eval.moving_speed_cutoff), &settings, Subset::Moving)?,
        ))
    };
    let (all, moving) = both(&records.detection)?;
    let (prediction_only, prediction_only_moving) = match &records.prediction {
        Some(p) => {
            let (a, m) = both(p)?;
            (Some(a), Some(m))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        all,
        moving,
        prediction_only,
        prediction_only_moving,
    })
}

pub fn evaluate(model: &Model<f32>, episodes: &[Episode], eval: &EvalConfig) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(RunError::EmptyDataset);
    }
    let records = collect_records(model, episodes, eval)?;
    report_records(&records, eval, model.config.num_classes)
}
