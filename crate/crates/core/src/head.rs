//! CenterPoint-style dense head shared (structurally, never by weights) by
//! the prediction head and the detection head.
//!
//! Layout: two 3x3 conv + ReLU layers, then separate 1x1 branches for the
//! class heatmaps (sigmoid) and the regression attributes
//! `(offset_x, offset_y, log_length, log_width, sin_yaw, cos_yaw, v_x, v_y)`.

use ndarray::{concatenate, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{BEVFeature, FrameTag};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_normal, normal, zeros, ParamStore, ParamVars};
use crate::scalar::Scalar;

pub const REGRESSION_CHANNELS: usize = 8;

/// Namespace of the prediction head (Φ_p).
pub const PREDICTION_NAMESPACE: &str = "pred_head";
/// Namespace of the detection head (Φ_d).
pub const DETECTION_NAMESPACE: &str = "det_head";

/// Regression branches and their channel counts, in output order.
const BRANCHES: [(&str, usize); 4] = [("offset", 2), ("size", 2), ("rotation", 2), ("velocity", 2)];

/// Sigmoid of this bias is about 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub heatmap_bias: f64,
}

impl HeadConfig {
    pub fn output_channels(&self) -> usize {
        self.num_classes + REGRESSION_CHANNELS
    }
}

/// Dense per-cell head output. Both `P^T` and `D^T` use this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput<F> {
    /// `[X, Y, N_c]`, post-sigmoid.
    pub heatmaps: Array3<F>,
    /// `[X, Y, 8]`, raw.
    pub regression: Array3<F>,
}

pub type DetectionOutput<F> = PredictionOutput<F>;

impl<F: Scalar> PredictionOutput<F> {
    /// `[X, Y, N_c + 8]`: heatmaps followed by regression channels.
    pub fn stacked(&self) -> Array3<F> {
        concatenate(Axis(2), &[self.heatmaps.view(), self.regression.view()]).expect("grid shapes agree")
    }
}

/// Graph handles of a head's two outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub heatmap: Var,
    pub regression: Var,
}

impl HeadVars {
    pub fn read<F: Scalar>(&self, g: &Graph<F>) -> PredictionOutput<F> {
        PredictionOutput {
            heatmaps: g.value(self.heatmap).clone().into_dimensionality().expect("rank 3"),
            regression: g.value(self.regression).clone().into_dimensionality().expect("rank 3"),
        }
    }

    /// `[X, Y, N_c + 8]` stacked output.
    pub fn stacked<F: Scalar>(&self, g: &mut Graph<F>) -> Var {
        g.concat(&[self.heatmap, self.regression], 2)
    }
}

fn name(prefix: &str, layer: &str, kind: &str) -> String {
    format!("{prefix}.{layer}.{kind}")
}

pub fn init<F: Scalar>(prefix: &str, config: &HeadConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) {
    let h = config.hidden;
    store.insert(name(prefix, "conv0", "weight"), he_normal(rng, 9 * config.in_channels, &[9 * config.in_channels, h]));
    store.insert(name(prefix, "conv0", "bias"), zeros(&[h]));
    store.insert(name(prefix, "conv1", "weight"), he_normal(rng, 9 * h, &[9 * h, h]));
    store.insert(name(prefix, "conv1", "bias"), zeros(&[h]));
    store.insert(name(prefix, "heatmap", "weight"), normal(rng, 0.01, &[h, config.num_classes]));
    store.insert(
        name(prefix, "heatmap", "bias"),
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[config.num_classes]), F::of(config.heatmap_bias)),
    );
    for (branch, width) in BRANCHES {
        store.insert(name(prefix, branch, "weight"), normal(rng, 0.01, &[h, width]));
        store.insert(name(prefix, branch, "bias"), zeros(&[width]));
    }
}

pub fn head_var<F: Scalar>(g: &mut Graph<F>, pv: &ParamVars, prefix: &str, x: Var) -> HeadVars {
    let p = |layer: &str, kind: &str| pv[&name(prefix, layer, kind)];
    let x = g.conv2d(x, p("conv0", "weight"), p("conv0", "bias"), 3);
    let x = g.relu(x);
    let x = g.conv2d(x, p("conv1", "weight"), p("conv1", "bias"), 3);
    let x = g.relu(x);
    let logits = g.conv2d(x, p("heatmap", "weight"), p("heatmap", "bias"), 1);
    let heatmap = g.sigmoid(logits);
    let parts: Vec<Var> = BRANCHES
        .iter()
        .map(|(branch, _)| g.conv2d(x, p(branch, "weight"), p(branch, "bias"), 1))
        .collect();
    let regression = g.concat(&parts, 2);
    HeadVars { heatmap, regression }
}

/// Φ_p: forecasts the current frame from aligned previous-frame features
/// only, fused by channel concatenation (oldest first).
pub fn predict<F: Scalar>(
    features_prev: &[BEVFeature<F>],
    params: &ParamStore<F>,
    config: &HeadConfig,
) -> Result<PredictionOutput<F>> {
    if features_prev.len() < 2 {
        return Err(Error::InsufficientFrames {
            required: 2,
            actual: features_prev.len(),
        });
    }
    if let Some(f) = features_prev.iter().find(|f| f.frame_tag != FrameTag::AlignedToCurrent) {
        return Err(Error::Unaligned(f.timestep));
    }
    let channels: usize = features_prev.iter().map(|f| f.data.dim().2).sum();
    if channels != config.in_channels {
        return Err(Error::Shape {
            context: "prediction head input channels",
            expected: vec![config.in_channels],
            actual: vec![channels],
        });
    }
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let inputs: Vec<Var> = features_prev
        .iter()
        .map(|f| g.input(f.data.clone().into_dyn()))
        .collect();
    let x = g.concat(&inputs, 2);
    Ok(head_var(&mut g, &pv, PREDICTION_NAMESPACE, x).read(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn aligned(data: Array3<f32>, t: usize) -> BEVFeature<f32> {
        BEVFeature {
            data,
            timestep: t,
            frame_tag: FrameTag::AlignedToCurrent,
        }
    }

    fn setup(in_channels: usize) -> (HeadConfig, ParamStore<f32>) {
        let config = HeadConfig {
            in_channels,
            hidden: 16,
            num_classes: 2,
            heatmap_bias: HEATMAP_PRIOR_BIAS,
        };
        let mut store = ParamStore::new();
        init(PREDICTION_NAMESPACE, &config, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (config, store)
    }

    #[test]
    fn output_shapes() {
        let (config, store) = setup(128);
        let feats = vec![
            aligned(Array3::from_elem((32, 32, 64), 0.1), 0),
            aligned(Array3::from_elem((32, 32, 64), -0.1), 1),
        ];
        let out = predict(&feats, &store, &config).unwrap();
        assert_eq!(out.heatmaps.dim(), (32, 32, 2));
        assert_eq!(out.regression.dim(), (32, 32, 8));
        assert_eq!(out.stacked().dim(), (32, 32, 10));
        assert!(out.heatmaps.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(config.output_channels(), 10);
    }

    #[test]
    fn zero_final_layer_gives_constant_sigmoid_of_bias() {
        let (config, mut store) = setup(8);
        for (name, t) in store.iter_mut() {
            if name.contains(".heatmap.") {
                t.fill(0.0);
            }
        }
        let bias = 0.7f32;
        store.get_mut("pred_head.heatmap.bias").unwrap().fill(bias);
        let feats = vec![
            aligned(Array3::zeros((8, 8, 4)), 0),
            aligned(Array3::zeros((8, 8, 4)), 1),
        ];
        let out = predict(&feats, &store, &config).unwrap();
        let expected = 1.0 / (1.0 + (-bias).exp());
        assert!(out.heatmaps.iter().all(|&p| (p - expected).abs() < 1e-7));
    }

    #[test]
    fn needs_two_aligned_previous_frames() {
        let (config, store) = setup(8);
        let one = vec![aligned(Array3::zeros((8, 8, 4)), 0)];
        assert!(matches!(
            predict(&one, &store, &config),
            Err(Error::InsufficientFrames { required: 2, actual: 1 })
        ));
        let raw = vec![
            aligned(Array3::zeros((8, 8, 4)), 0),
            BEVFeature::raw(Array3::zeros((8, 8, 4)), 1),
        ];
        assert!(matches!(predict(&raw, &store, &config), Err(Error::Unaligned(1))));
    }
}
