//! Detection head over the fused features, and peak decoding of dense head
//! outputs into boxes.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::align::BEVFeature;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::GridSpec;
use crate::head::{head_var, DetectionOutput, HeadConfig, PredictionOutput, DETECTION_NAMESPACE};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.1;
pub const DEFAULT_MAX_DETECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class_id: usize,
    pub score: f64,
    /// Meters, current ego frame.
    pub center: [f64; 2],
    /// `(length, width)` in meters.
    pub size: [f64; 2],
    pub yaw: f64,
    /// m/s, current ego frame.
    pub velocity: [f64; 2],
}

impl DetectionBox {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

/// Φ_d over `agg ⊕ f_curr`.
pub fn detect<F: Scalar>(
    agg: &Array3<F>,
    f_curr: &BEVFeature<F>,
    params: &ParamStore<F>,
    config: &HeadConfig,
) -> Result<DetectionOutput<F>> {
    let (ax, ay, ac) = agg.dim();
    let (fx, fy, fc) = f_curr.data.dim();
    if (ax, ay) != (fx, fy) {
        return Err(Error::Shape {
            context: "aggregated feature vs current feature",
            expected: vec![fx, fy, fc],
            actual: vec![ax, ay, ac],
        });
    }
    if ac + fc != config.in_channels {
        return Err(Error::Shape {
            context: "detection head input channels",
            expected: vec![config.in_channels],
            actual: vec![ac + fc],
        });
    }
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let a = g.input(agg.clone().into_dyn());
    let f = g.input(f_curr.data.clone().into_dyn());
    let x: Var = g.concat(&[a, f], 2);
    Ok(head_var(&mut g, &pv, DETECTION_NAMESPACE, x).read(&g))
}

fn is_peak<F: Scalar>(channel: &ndarray::ArrayView2<F>, i: usize, j: usize) -> bool {
    let (nx, ny) = channel.dim();
    let v = channel[[i, j]];
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let (ni, nj) = (i as i64 + di, j as i64 + dj);
            if ni < 0 || nj < 0 || ni >= nx as i64 || nj >= ny as i64 {
                continue;
            }
            if channel[[ni as usize, nj as usize]] > v {
                return false;
            }
        }
    }
    true
}

/// Local 3x3 maxima above `score_threshold`, ordered by score (descending),
/// then class, then row-major cell index; at most `max_detections`.
pub fn decode<F: Scalar>(
    output: &PredictionOutput<F>,
    grid: &GridSpec,
    score_threshold: f64,
    max_detections: usize,
) -> Vec<DetectionBox> {
    let (nx, ny, nc) = output.heatmaps.dim();
    let mut peaks = Vec::new();
    for c in 0..nc {
        let channel = output.heatmaps.index_axis(Axis(2), c);
        for i in 0..nx {
            for j in 0..ny {
                let score = channel[[i, j]].as_f64();
                if score > score_threshold && is_peak(&channel, i, j) {
                    peaks.push((score, c, i * ny + j));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(max_detections);
    peaks
        .into_iter()
        .map(|(score, class_id, flat)| {
            let (i, j) = (flat / ny, flat % ny);
            let r = |ch: usize| output.regression[[i, j, ch]].as_f64();
            DetectionBox {
                class_id,
                score,
                center: [
                    grid.origin[0] + (i as f64 + r(0)) * grid.cell_size,
                    grid.origin[1] + (j as f64 + r(1)) * grid.cell_size,
                ],
                size: [r(2).exp(), r(3).exp()],
                yaw: r(4).atan2(r(5)),
                velocity: [r(6), r(7)],
            }
        })
        .collect()
}
