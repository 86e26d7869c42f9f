//! Ego-motion compensation: warping previous-frame BEV features into the
//! current frame's coordinates.
//!
//! Warping is an output-driven gather. Every current-frame cell center is
//! mapped into the previous frame by [`relative_transform`] and the previous
//! feature is bilinearly sampled there, with zeros off the grid.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::GridSpec;
use crate::sample::{bilinear_taps, Tap};
use crate::scalar::Scalar;
use crate::scene::EgoPose;

/// Rigid planar transform `p -> R(angle) p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SE2Transform {
    pub angle: f64,
    pub translation: [f64; 2],
}

impl SE2Transform {
    pub const IDENTITY: Self = Self {
        angle: 0.0,
        translation: [0.0, 0.0],
    };

    pub fn new(angle: f64, translation: [f64; 2]) -> Self {
        Self { angle, translation }
    }

    /// Maps a pose's local (ego) coordinates into the world frame.
    pub fn from_pose(pose: &EgoPose) -> Self {
        Self::new(pose.yaw, [pose.x, pose.y])
    }

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0 && self.translation == [0.0, 0.0]
    }

    pub fn rotation(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        [[c, -s], [s, c]]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.rotation();
        [
            r[0][0] * p[0] + r[0][1] * p[1] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + self.translation[1],
        ]
    }

    /// Rotates a free vector (velocity, direction) without translating it.
    pub fn apply_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let r = self.rotation();
        [r[0][0] * v[0] + r[0][1] * v[1], r[1][0] * v[0] + r[1][1] * v[1]]
    }

    pub fn inverse(&self) -> Self {
        let inv = Self::new(-self.angle, [0.0, 0.0]);
        let t = inv.apply(self.translation);
        Self::new(-self.angle, [-t[0], -t[1]])
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let t = self.apply(other.translation);
        Self::new(self.angle + other.angle, t)
    }

    /// Homogeneous 3x3 matrix.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let r = self.rotation();
        [
            [r[0][0], r[0][1], self.translation[0]],
            [r[1][0], r[1][1], self.translation[1]],
            [0.0, 0.0, 1.0],
        ]
    }
}

/// Transform taking current-frame ego coordinates to previous-frame ego
/// coordinates: the sampling map used by [`warp_bev`].
pub fn relative_transform(pose_prev: &EgoPose, pose_curr: &EgoPose) -> SE2Transform {
    SE2Transform::from_pose(pose_prev)
        .inverse()
        .compose(&SE2Transform::from_pose(pose_curr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameTag {
    RawEgo,
    AlignedToCurrent,
}

/// Per-timestep BEV feature map, `[X_f, Y_f, C_f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BEVFeature<F> {
    pub data: Array3<F>,
    /// Index of the frame within its episode, oldest first.
    pub timestep: usize,
    pub frame_tag: FrameTag,
}

impl<F: Scalar> BEVFeature<F> {
    pub fn raw(data: Array3<F>, timestep: usize) -> Self {
        Self {
            data,
            timestep,
            frame_tag: FrameTag::RawEgo,
        }
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        let (nx, ny, _) = self.data.dim();
        if (nx, ny) != grid.shape() {
            return Err(Error::Shape {
                context: "BEV feature vs grid",
                expected: vec![grid.cells_x, grid.cells_y],
                actual: vec![nx, ny],
            });
        }
        Ok(())
    }
}

/// Bilinear taps for every output cell of the warp, row-major.
pub fn warp_taps<F: Scalar>(transform: &SE2Transform, grid: &GridSpec) -> Vec<[Tap<F>; 4]> {
    let (nx, ny) = grid.shape();
    let r = transform.rotation();
    let mut taps = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let c = grid.cell_center(i, j);
            // Displacement form keeps identity and whole-cell shifts exact.
            let dx = (r[0][0] - 1.0) * c.0 + r[0][1] * c.1 + transform.translation[0];
            let dy = r[1][0] * c.0 + (r[1][1] - 1.0) * c.1 + transform.translation[1];
            let u = i as f64 + dx / grid.cell_size;
            let v = j as f64 + dy / grid.cell_size;
            taps.push(bilinear_taps(F::of(u), F::of(v), nx, ny));
        }
    }
    taps
}

/// Differentiable warp of an `[X, Y, C]` graph variable.
pub fn warp_var<F: Scalar>(g: &mut Graph<F>, x: Var, transform: &SE2Transform, grid: &GridSpec) -> Var {
    g.resample(x, warp_taps(transform, grid), grid.shape())
}

/// Resamples a raw-ego feature into the current frame.
pub fn warp_bev<F: Scalar>(
    feature: &BEVFeature<F>,
    transform: &SE2Transform,
    grid: &GridSpec,
) -> Result<BEVFeature<F>> {
    feature.check_grid(grid)?;
    if feature.frame_tag != FrameTag::RawEgo {
        return Err(Error::AlreadyAligned(feature.timestep));
    }
    let data = if transform.is_identity() {
        feature.data.clone()
    } else {
        let mut g = Graph::new();
        let x = g.input(feature.data.clone().into_dyn());
        let y = warp_var(&mut g, x, transform, grid);
        g.value(y)
            .clone()
            .into_dimensionality()
            .expect("warp keeps rank 3")
    };
    Ok(BEVFeature {
        data,
        timestep: feature.timestep,
        frame_tag: FrameTag::AlignedToCurrent,
    })
}
