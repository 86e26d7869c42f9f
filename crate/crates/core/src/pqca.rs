//! Prediction query-based cross attention: multi-level deformable attention
//! from the selected queries into the aligned temporal features, scattered
//! back onto an otherwise zero grid.

use std::collections::HashSet;
use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{BEVFeature, FrameTag};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{normal, zeros, ParamStore, ParamVars};
use crate::query::QuerySet;
use crate::scalar::Scalar;

pub const NAMESPACE: &str = "pqca";

/// Scope of the attention-weight softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxScope {
    /// One softmax over all levels and points of a head.
    #[default]
    Joint,
    /// A separate softmax per level, summed over levels.
    PerLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqcaConfig {
    /// `C_f`; also the query width.
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    /// Number of temporal levels, `T`.
    pub levels: usize,
    #[serde(default)]
    pub softmax: SoftmaxScope,
}

impl PqcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.levels == 0 {
            return Err(Error::Config("attention heads, points and levels must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels do not split across {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    pub fn softmax_group(&self) -> usize {
        match self.softmax {
            SoftmaxScope::Joint => self.levels * self.points,
            SoftmaxScope::PerLevel => self.points,
        }
    }
}

fn pname(part: &str) -> String {
    format!("{NAMESPACE}.{part}")
}

pub fn temporal_embed_name(level: usize) -> String {
    pname(&format!("temporal_embed.{level}"))
}

/// 2D sinusoidal embedding `[X, Y, C]`. The first half of the channels
/// encodes the row index, the second half the column index, as alternating
/// sine/cosine pairs of geometrically spaced frequencies.
pub fn sinusoidal_embedding<F: Scalar>(nx: usize, ny: usize, channels: usize) -> Array3<F> {
    let half = channels.div_ceil(2).max(1);
    Array3::from_shape_fn((nx, ny, channels), |(i, j, c)| {
        let (pos, local) = if c < half { (i, c) } else { (j, c - half) };
        let pair = (local / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / half as f64);
        let angle = pos as f64 * freq;
        F::of(if local % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Initial sampling offsets: head `h` looks along direction `2πh/H`, point
/// `p` at distance `p + 1` cells, at every level.
pub fn radial_offset_bias(config: &PqcaConfig) -> Array1<f64> {
    let mut bias = Array1::zeros(config.slots() * 2);
    for h in 0..config.heads {
        let angle = 2.0 * PI * h as f64 / config.heads as f64;
        for l in 0..config.levels {
            for p in 0..config.points {
                let slot = (h * config.levels + l) * config.points + p;
                let r = (p + 1) as f64;
                bias[slot * 2] = r * angle.cos();
                bias[slot * 2 + 1] = r * angle.sin();
            }
        }
    }
    bias
}

pub fn init<F: Scalar>(config: &PqcaConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) {
    let c = config.channels;
    let xavier = (2.0 / (2 * c) as f64).sqrt();
    store.insert(pname("value.weight"), normal(rng, xavier, &[c, c]));
    store.insert(pname("value.bias"), zeros(&[c]));
    store.insert(pname("offset.weight"), zeros(&[c, config.slots() * 2]));
    store.insert(
        pname("offset.bias"),
        radial_offset_bias(config).mapv(F::of).into_dyn(),
    );
    store.insert(pname("attn.weight"), zeros(&[c, config.slots()]));
    store.insert(pname("attn.bias"), zeros(&[config.slots()]));
    store.insert(pname("output.weight"), normal(rng, xavier, &[c, c]));
    store.insert(pname("output.bias"), zeros(&[c]));
    for l in 0..config.levels {
        store.insert(temporal_embed_name(l), normal(rng, 0.1, &[c]));
    }
}

/// Reference points of cells, in the continuous cell coordinates used by
/// the sampler (integer values are cell centers).
pub fn reference_points<F: Scalar>(positions: &[(usize, usize)]) -> Vec<[F; 2]> {
    positions
        .iter()
        .map(|&(i, j)| [F::of(i as f64), F::of(j as f64)])
        .collect()
}

/// Projected value maps of all levels, `[L * X * Y, C]`, level-major.
pub fn value_maps_var<F: Scalar>(g: &mut Graph<F>, pv: &ParamVars, config: &PqcaConfig, features: &[Var]) -> Var {
    assert_eq!(features.len(), config.levels, "one feature map per level");
    let shape = g.shape(features[0]).to_vec();
    let (nx, ny, c) = (shape[0], shape[1], shape[2]);
    let spatial = g.input(sinusoidal_embedding::<F>(nx, ny, c).into_dyn());
    let levels: Vec<Var> = features
        .iter()
        .enumerate()
        .map(|(l, &f)| {
            let x = g.add(f, spatial);
            let x = g.add_last(x, pv[&temporal_embed_name(l)]);
            let x = g.reshape(x, &[nx * ny, c]);
            g.linear(x, pv[&pname("value.weight")], pv[&pname("value.bias")])
        })
        .collect();
    g.concat(&levels, 0)
}

/// Attention output per query, `[K, C]`, before scattering.
pub fn attend_var<F: Scalar>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    config: &PqcaConfig,
    values: Var,
    queries: Var,
    refs: Vec<[F; 2]>,
    grid: (usize, usize),
) -> Var {
    let offsets = g.linear(queries, pv[&pname("offset.weight")], pv[&pname("offset.bias")]);
    let logits = g.linear(queries, pv[&pname("attn.weight")], pv[&pname("attn.bias")]);
    let weights = g.softmax_groups(logits, config.softmax_group());
    let sampled = g.deform_sample(
        values,
        offsets,
        weights,
        refs,
        grid,
        config.levels,
        config.heads,
        config.points,
    );
    g.linear(sampled, pv[&pname("output.weight")], pv[&pname("output.bias")])
}

/// Full aggregation: `[X, Y, C]` grid, nonzero only at query positions.
pub fn pqca_var<F: Scalar>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    config: &PqcaConfig,
    features: &[Var],
    queries: Var,
    positions: &[(usize, usize)],
) -> Var {
    let shape = g.shape(features[0]).to_vec();
    let (nx, ny, c) = (shape[0], shape[1], shape[2]);
    let values = value_maps_var(g, pv, config, features);
    let out = attend_var(g, pv, config, values, queries, reference_points(positions), (nx, ny));
    let indices = positions.iter().map(|&(i, j)| i * ny + j).collect();
    let grid = g.scatter_rows(out, indices, nx * ny);
    g.reshape(grid, &[nx, ny, c])
}

fn check_features<F: Scalar>(features: &[BEVFeature<F>], config: &PqcaConfig) -> Result<(usize, usize)> {
    if features.len() != config.levels {
        return Err(Error::Config(format!(
            "{} temporal features for {} attention levels",
            features.len(),
            config.levels
        )));
    }
    if let Some(f) = features.iter().find(|f| f.frame_tag != FrameTag::AlignedToCurrent) {
        return Err(Error::Unaligned(f.timestep));
    }
    let dim = features[0].data.dim();
    if dim.2 != config.channels {
        return Err(Error::Shape {
            context: "attention feature channels",
            expected: vec![config.channels],
            actual: vec![dim.2],
        });
    }
    if let Some(f) = features.iter().find(|f| f.data.dim() != dim) {
        let (a, b, c) = f.data.dim();
        return Err(Error::Shape {
            context: "temporal feature shapes",
            expected: vec![dim.0, dim.1, dim.2],
            actual: vec![a, b, c],
        });
    }
    Ok((dim.0, dim.1))
}

/// Deformable attention of a single query at `ref_point` (continuous cell
/// coordinates) over `value_maps`, one `[X, Y, C]` map per level.
pub fn deform_attn<F: Scalar>(
    query: &[F],
    ref_point: [F; 2],
    value_maps: &[Array3<F>],
    params: &ParamStore<F>,
    config: &PqcaConfig,
) -> Result<Vec<F>> {
    config.validate()?;
    if query.len() != config.channels {
        return Err(Error::Shape {
            context: "query width",
            expected: vec![config.channels],
            actual: vec![query.len()],
        });
    }
    let features: Vec<BEVFeature<F>> = value_maps
        .iter()
        .enumerate()
        .map(|(t, m)| BEVFeature {
            data: m.clone(),
            timestep: t,
            frame_tag: FrameTag::AlignedToCurrent,
        })
        .collect();
    let (nx, ny) = check_features(&features, config)?;
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let maps: Vec<Var> = value_maps.iter().map(|m| g.input(m.clone().into_dyn())).collect();
    let values = value_maps_var(&mut g, &pv, config, &maps);
    let q = g.input(ArrayD::from_shape_vec(IxDyn(&[1, query.len()]), query.to_vec()).expect("query row"));
    let out = attend_var(&mut g, &pv, config, values, q, vec![ref_point], (nx, ny));
    Ok(g.value(out).iter().copied().collect())
}

/// Scatters the attention output of every query into a zero `[X, Y, C_f]`
/// grid.
pub fn pqca_aggregate<F: Scalar>(
    queries: &QuerySet<F>,
    features: &[BEVFeature<F>],
    params: &ParamStore<F>,
    config: &PqcaConfig,
) -> Result<Array3<F>> {
    config.validate()?;
    let (nx, ny) = check_features(features, config)?;
    let mut seen = HashSet::new();
    for &(i, j) in &queries.positions {
        if i >= nx || j >= ny {
            return Err(Error::Shape {
                context: "query position",
                expected: vec![nx, ny],
                actual: vec![i, j],
            });
        }
        if !seen.insert((i, j)) {
            return Err(Error::DuplicateQuery((i, j)));
        }
    }
    if queries.embeddings.dim() != (queries.len(), config.channels) {
        let (a, b) = queries.embeddings.dim();
        return Err(Error::Shape {
            context: "query embeddings",
            expected: vec![queries.len(), config.channels],
            actual: vec![a, b],
        });
    }
    if queries.is_empty() {
        return Ok(Array3::zeros((nx, ny, config.channels)));
    }
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let maps: Vec<Var> = features.iter().map(|f| g.input(f.data.clone().into_dyn())).collect();
    let q = g.input(queries.embeddings.clone().into_dyn());
    let out = pqca_var(&mut g, &pv, config, &maps, q, &queries.positions);
    Ok(g.value(out).clone().into_dimensionality().expect("rank 3"))
}

/// Attention weights `[K, H * L * P]` after the softmax, for inspection.
pub fn attention_weights<F: Scalar>(queries: &Array2<F>, params: &ParamStore<F>, config: &PqcaConfig) -> Array2<F> {
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let q = g.input(queries.clone().into_dyn());
    let logits = g.linear(q, pv[&pname("attn.weight")], pv[&pname("attn.bias")]);
    let w = g.softmax_groups(logits, config.softmax_group());
    g.value(w).clone().into_dimensionality().expect("rank 2")
}
