//! Per-frame convolutional encoder from observation grids to BEV features.
//!
//! A stack of same-size 3x3 convolutions with ReLU between layers. The last
//! feature channel is a parameter-free passthrough holding the summed class
//! occupancy of the observation.

use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{relative_transform, warp_bev, BEVFeature, FrameTag};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::GridSpec;
use crate::params::{he_normal, zeros, ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::scene::EgoPose;

pub const NAMESPACE: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Number of leading input channels summed into the passthrough.
    pub occupancy_channels: usize,
    /// Widths of the hidden convolution outputs.
    pub hidden: Vec<usize>,
    /// `C_f`, passthrough channel included.
    pub out_channels: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.occupancy_channels > self.in_channels {
            return Err(Error::Config("encoder input channels are inconsistent".into()));
        }
        if self.out_channels < 2 {
            return Err(Error::Config("encoder needs at least 2 output channels".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// `(c_in, c_out)` of every convolution.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.in_channels];
        widths.extend(&self.hidden);
        widths.push(self.out_channels - 1);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

fn weight_name(layer: usize) -> String {
    format!("{NAMESPACE}.conv{layer}.weight")
}

fn bias_name(layer: usize) -> String {
    format!("{NAMESPACE}.conv{layer}.bias")
}

pub fn init<F: Scalar>(config: &EncoderConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) {
    for (layer, (c_in, c_out)) in config.layers().into_iter().enumerate() {
        store.insert(weight_name(layer), he_normal(rng, 9 * c_in, &[9 * c_in, c_out]));
        store.insert(bias_name(layer), zeros(&[c_out]));
    }
}

/// Summed occupancy channel, `[X, Y, 1]`.
pub fn occupancy_passthrough<F: Scalar>(observation: &Array3<F>, occupancy_channels: usize) -> Array3<F> {
    observation
        .slice(s![.., .., ..occupancy_channels])
        .sum_axis(Axis(2))
        .insert_axis(Axis(2))
}

pub fn encode_var<F: Scalar>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    config: &EncoderConfig,
    observation: &Array3<F>,
) -> Var {
    let passthrough = g.input(occupancy_passthrough(observation, config.occupancy_channels).into_dyn());
    let mut x = g.input(observation.clone().into_dyn());
    let layers = config.layers();
    for layer in 0..layers.len() {
        x = g.conv2d(x, pv[&weight_name(layer)], pv[&bias_name(layer)], 3);
        if layer + 1 < layers.len() {
            x = g.relu(x);
        }
    }
    g.concat(&[x, passthrough], 2)
}

fn check_observation<F: Scalar>(observation: &Array3<F>, config: &EncoderConfig, grid: &GridSpec) -> Result<()> {
    let (nx, ny, c) = observation.dim();
    if (nx, ny, c) != (grid.cells_x, grid.cells_y, config.in_channels) {
        return Err(Error::Shape {
            context: "observation",
            expected: vec![grid.cells_x, grid.cells_y, config.in_channels],
            actual: vec![nx, ny, c],
        });
    }
    Ok(())
}

/// Encodes one observation into a raw-ego BEV feature.
pub fn encode_frame<F: Scalar>(
    observation: &Array3<F>,
    params: &ParamStore<F>,
    config: &EncoderConfig,
    grid: &GridSpec,
    timestep: usize,
) -> Result<BEVFeature<F>> {
    check_observation(observation, config, grid)?;
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let out = encode_var(&mut g, &pv, config, observation);
    let data = g.value(out).clone().into_dimensionality().expect("rank 3");
    Ok(BEVFeature::raw(data, timestep))
}

/// Encodes every frame (oldest first) and aligns all of them to the last
/// frame's pose. The current frame is returned unwarped.
pub fn encode_sequence<F: Scalar>(
    observations: &[Array3<F>],
    poses: &[EgoPose],
    params: &ParamStore<F>,
    config: &EncoderConfig,
    grid: &GridSpec,
) -> Result<Vec<BEVFeature<F>>> {
    if observations.len() != poses.len() || observations.is_empty() {
        return Err(Error::Config(format!(
            "{} observations for {} poses",
            observations.len(),
            poses.len()
        )));
    }
    let last = poses.len() - 1;
    let current = poses[last];
    observations
        .iter()
        .zip(poses)
        .enumerate()
        .map(|(t, (obs, pose))| {
            let raw = encode_frame(obs, params, config, grid, t)?;
            if t == last {
                return Ok(BEVFeature {
                    frame_tag: FrameTag::AlignedToCurrent,
                    ..raw
                });
            }
            warp_bev(&raw, &relative_transform(pose, &current), grid)
        })
        .collect()
}
