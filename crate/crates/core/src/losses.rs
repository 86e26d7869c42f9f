//! Dense training targets and the joint detection/prediction loss.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::grid::GridSpec;
use crate::head::{PredictionOutput, REGRESSION_CHANNELS};
use crate::scalar::Scalar;
use crate::scene::SceneObject;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const FOCAL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps<F> {
    /// `[X, Y, N_c]`, 1 exactly at object centers.
    pub heatmaps: Array3<F>,
    /// `[X, Y, 8]`, filled at positive cells only.
    pub regression: Array3<F>,
    /// `[X, Y]`.
    pub positive: Array2<bool>,
}

impl<F: Scalar> TargetMaps<F> {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.positive.iter().copied().collect()
    }
}

/// Splat radius in cells.
pub fn gaussian_radius(length: f64, width: f64, cell_size: f64) -> usize {
    ((length.min(width) / (2.0 * cell_size)).ceil() as usize).max(1)
}

/// Targets for objects in the current ego frame. Objects whose centers are
/// off the grid are skipped; when two objects share a center cell, the
/// first keeps the regression target.
pub fn build_targets<F: Scalar>(objects: &[SceneObject], grid: &GridSpec, num_classes: usize) -> TargetMaps<F> {
    let (nx, ny) = grid.shape();
    let mut heatmaps = Array3::<F>::zeros((nx, ny, num_classes));
    let mut regression = Array3::<F>::zeros((nx, ny, REGRESSION_CHANNELS));
    let mut positive = Array2::from_elem((nx, ny), false);
    for obj in objects {
        let Some((ci, cj)) = grid.cell_of(obj.center[0], obj.center[1]) else {
            continue;
        };
        if obj.class_id >= num_classes {
            continue;
        }
        let r = gaussian_radius(obj.size[0], obj.size[1], grid.cell_size) as i64;
        let sigma = (2 * r + 1) as f64 / 6.0;
        for di in -r..=r {
            for dj in -r..=r {
                let (i, j) = (ci as i64 + di, cj as i64 + dj);
                if i < 0 || j < 0 || i >= nx as i64 || j >= ny as i64 {
                    continue;
                }
                let value = F::of((-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp());
                let cell = &mut heatmaps[[i as usize, j as usize, obj.class_id]];
                if value > *cell {
                    *cell = value;
                }
            }
        }
        if positive[[ci, cj]] {
            continue;
        }
        positive[[ci, cj]] = true;
        let (u, v) = grid.to_cell_coords(obj.center[0], obj.center[1]);
        let values = [
            u - ci as f64,
            v - cj as f64,
            obj.size[0].ln(),
            obj.size[1].ln(),
            obj.yaw.sin(),
            obj.yaw.cos(),
            obj.velocity[0],
            obj.velocity[1],
        ];
        for (c, value) in values.into_iter().enumerate() {
            regression[[ci, cj, c]] = F::of(value);
        }
    }
    TargetMaps {
        heatmaps,
        regression,
        positive,
    }
}

pub fn focal_var<F: Scalar>(g: &mut Graph<F>, pred: Var, target: &Array3<F>) -> Var {
    g.focal_loss(
        pred,
        &target.clone().into_dyn(),
        F::of(FOCAL_ALPHA),
        F::of(FOCAL_BETA),
        F::of(FOCAL_EPS),
    )
}

pub fn reg_var<F: Scalar>(g: &mut Graph<F>, pred: Var, targets: &TargetMaps<F>) -> Var {
    g.masked_l1(pred, &targets.regression.clone().into_dyn(), &targets.mask())
}

fn scalar<F: Scalar>(g: &Graph<F>, v: Var) -> f64 {
    g.value(v).first().copied().unwrap_or_else(F::zero).as_f64()
}

/// Penalty-reduced focal loss normalized by the number of positives.
pub fn focal_loss<F: Scalar>(pred: &Array3<F>, target: &Array3<F>) -> f64 {
    let mut g = Graph::new();
    let p = g.input(pred.clone().into_dyn());
    let loss = focal_var(&mut g, p, target);
    scalar(&g, loss)
}

/// L1 over the regression channels at positive cells, normalized by
/// `8 * max(1, positives)`.
pub fn reg_loss<F: Scalar>(pred: &Array3<F>, targets: &TargetMaps<F>) -> f64 {
    let mut g = Graph::new();
    let p = g.input(pred.clone().into_dyn());
    let loss = reg_var(&mut g, p, targets);
    scalar(&g, loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub det_cls: f64,
    pub det_reg: f64,
    pub pred_cls: f64,
    pub pred_reg: f64,
    pub lambda_p: f64,
}

impl LossReport {
    pub fn new(det_cls: f64, det_reg: f64, pred_cls: f64, pred_reg: f64, lambda_p: f64) -> Self {
        Self {
            total: (det_cls + det_reg) + lambda_p * (pred_cls + pred_reg),
            det_cls,
            det_reg,
            pred_cls,
            pred_reg,
            lambda_p,
        }
    }

    pub fn det(&self) -> f64 {
        self.det_cls + self.det_reg
    }

    pub fn pred(&self) -> f64 {
        self.pred_cls + self.pred_reg
    }
}

pub fn total_loss<F: Scalar>(
    det: &PredictionOutput<F>,
    pred: &PredictionOutput<F>,
    targets: &TargetMaps<F>,
    lambda_p: f64,
) -> LossReport {
    LossReport::new(
        focal_loss(&det.heatmaps, &targets.heatmaps),
        reg_loss(&det.regression, targets),
        focal_loss(&pred.heatmaps, &targets.heatmaps),
        reg_loss(&pred.regression, targets),
        lambda_p,
    )
}

/// Loss terms recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub det_cls: Var,
    pub det_reg: Var,
    pub pred_cls: Option<Var>,
    pub pred_reg: Option<Var>,
    pub lambda_p: f64,
}

impl LossVars {
    pub fn report<F: Scalar>(&self, g: &Graph<F>) -> LossReport {
        let opt = |v: Option<Var>| v.map_or(0.0, |v| scalar(g, v));
        LossReport::new(
            scalar(g, self.det_cls),
            scalar(g, self.det_reg),
            opt(self.pred_cls),
            opt(self.pred_reg),
            self.lambda_p,
        )
    }
}

/// `L_det + λ_p · L_pred`, with the prediction terms omitted when there is
/// no prediction output.
pub fn loss_vars<F: Scalar>(
    g: &mut Graph<F>,
    det: (Var, Var),
    pred: Option<(Var, Var)>,
    targets: &TargetMaps<F>,
    lambda_p: f64,
) -> LossVars {
    let det_cls = focal_var(g, det.0, &targets.heatmaps);
    let det_reg = reg_var(g, det.1, targets);
    let mut total = g.add(det_cls, det_reg);
    let (mut pred_cls, mut pred_reg) = (None, None);
    if let Some((heat, reg)) = pred {
        let cls = focal_var(g, heat, &targets.heatmaps);
        let r = reg_var(g, reg, targets);
        let sum = g.add(cls, r);
        let weighted = g.scale(sum, F::of(lambda_p));
        total = g.add(total, weighted);
        pred_cls = Some(cls);
        pred_reg = Some(r);
    }
    LossVars {
        total,
        det_cls,
        det_reg,
        pred_cls,
        pred_reg,
        lambda_p,
    }
}
