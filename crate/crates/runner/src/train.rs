//! Minibatch training loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use p2d_core::losses::LossReport;
use p2d_core::model::{GradientProbe, Model, ParamGrads, Sample};
use p2d_core::scene::Episode;

use crate::config::ExperimentConfig;
use crate::error::{Result, RunError};
use crate::optim::{clip_global_norm, AdamW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean over the batch.
    pub loss: LossReport,
    /// Largest `L_pred` gradient magnitudes, recorded when the stop-gradient
    /// toggle is on.
    pub probe: Option<GradientProbe>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<StepLog>,
}

/// Linear warmup followed by cosine decay to a tenth of the peak.
pub fn learning_rate(peak: f64, step: usize, total: usize, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total as f64).round() as usize;
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (PI * progress.min(1.0)).cos()))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport::new(
        avg(|r| r.det_cls),
        avg(|r| r.det_reg),
        avg(|r| r.pred_cls),
        avg(|r| r.pred_reg),
        reports[0].lambda_p,
    )
}

pub fn samples_for(config: &ExperimentConfig, episodes: &[Episode]) -> Result<Vec<Sample<f32>>> {
    episodes
        .iter()
        .map(|e| Ok(Sample::from_episode(e, config.model.frames())?))
        .collect()
}

/// Trains a freshly initialized model. `on_step` sees every step's log.
pub fn train(config: &ExperimentConfig, episodes: &[Episode], mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(RunError::EmptyDataset);
    }
    let samples = samples_for(config, episodes)?;
    let t = &config.train;
    let mut model = Model::<f32>::new(config.model.clone(), config.mode, t.seed)?;
    let mut optimizer = AdamW::new(t.learning_rate, t.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x5EED_0F_BA7C);
    let steps_per_epoch = samples.len().div_ceil(t.batch_size);
    let total = steps_per_epoch * t.epochs;
    let probe = t.stop_gradient_prediction && model.mode.has_first_stage();
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..t.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(t.batch_size) {
            let step = log.len();
            let mut sum: Option<ParamGrads<f32>> = None;
            let mut reports = Vec::with_capacity(batch.len());
            let mut probe_log: Option<GradientProbe> = None;
            for (b, &idx) in batch.iter().enumerate() {
                let result = model.training_step(&samples[idx], t.lambda_p, t.stop_gradient_prediction, probe && b == 0)?;
                if let Some(p) = result.probe {
                    if t.stop_gradient_prediction && p.encoder != 0.0 {
                        return Err(RunError::Config(format!(
                            "prediction loss reached the encoder at step {step} despite the stop-gradient toggle"
                        )));
                    }
                    probe_log = Some(p);
                }
                reports.push(result.report);
                match sum.as_mut() {
                    None => sum = Some(result.grads),
                    Some(acc) => {
                        for (name, g) in result.grads {
                            *acc.get_mut(&name).expect("same parameter set") += &g;
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f32;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
            let grad_norm = clip_global_norm(&mut grads, t.grad_clip);
            let report = mean_report(&reports);
            if !report.total.is_finite() || !grad_norm.is_finite() {
                return Err(RunError::Diverged(step));
            }
            let lr = learning_rate(t.learning_rate, step, total, t.warmup_fraction);
            optimizer.update(&mut model.params, &grads, lr);
            let entry = StepLog {
                step,
                epoch,
                lr,
                grad_norm,
                loss: report,
                probe: probe_log,
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok(TrainOutcome { model, log })
}
