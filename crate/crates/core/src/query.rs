//! Class-agnostic heatmap, top-k query mask and prediction-guided queries.

use std::cmp::Ordering;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::PredictionOutput;
use crate::params::{normal, zeros, ParamStore, ParamVars};
use crate::scalar::Scalar;

pub const NAMESPACE: &str = "query_embed";

/// Elementwise maximum over the class axis of `[X, Y, N_c]` heatmaps.
pub fn class_agnostic_heatmap<F: Scalar>(heatmaps: &Array3<F>) -> Array2<F> {
    heatmaps.map_axis(Axis(2), |cell| {
        cell.iter().copied().fold(F::neg_infinity(), F::max)
    })
}

/// The top-k cells of `values` (row-major flattening) ordered by value
/// descending, then flat index ascending.
pub fn top_k_indices<F: Scalar>(values: &Array2<F>, k: usize) -> Result<Vec<usize>> {
    let cells = values.len();
    if k == 0 || k > cells {
        return Err(Error::QueryCount { k, cells });
    }
    let flat: Vec<F> = values.iter().copied().collect();
    let rank = |a: &usize, b: &usize| -> Ordering {
        flat[*b]
            .as_f64()
            .total_cmp(&flat[*a].as_f64())
            .then(a.cmp(b))
    };
    let mut order: Vec<usize> = (0..cells).collect();
    if k < cells {
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    order.sort_unstable_by(rank);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMask<F> {
    pub mask: Array2<bool>,
    /// `τ_k`, the smallest selected value.
    pub threshold: F,
    pub k: usize,
}

impl<F: Scalar> QueryMask<F> {
    pub fn from_indices(shape: (usize, usize), indices: &[usize], values: &Array2<F>) -> Self {
        let mut mask = Array2::from_elem(shape, false);
        let mut threshold = F::infinity();
        for &idx in indices {
            let cell = (idx / shape.1, idx % shape.1);
            mask[cell] = true;
            threshold = threshold.min(values[cell]);
        }
        Self {
            mask,
            threshold,
            k: indices.len(),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet<F> {
    /// Selected cells in rank order.
    pub positions: Vec<(usize, usize)>,
    /// `[K, C_q]`.
    pub embeddings: Array2<F>,
}

impl<F> QuerySet<F> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn flat_indices(&self, cells_y: usize) -> Vec<usize> {
        self.positions.iter().map(|&(i, j)| i * cells_y + j).collect()
    }
}

pub fn init<F: Scalar>(in_channels: usize, query_channels: usize, store: &mut ParamStore<F>, rng: &mut impl Rng) {
    let std = (1.0 / in_channels as f64).sqrt();
    store.insert(format!("{NAMESPACE}.weight"), normal(rng, std, &[in_channels, query_channels]));
    store.insert(format!("{NAMESPACE}.bias"), zeros(&[query_channels]));
}

/// Φ_q applied to rows `indices` of a stacked `[X, Y, C_o]` prediction.
pub fn embed_var<F: Scalar>(g: &mut Graph<F>, pv: &ParamVars, stacked: Var, indices: Vec<usize>) -> Var {
    let shape = g.shape(stacked).to_vec();
    let rows = g.reshape(stacked, &[shape[0] * shape[1], shape[2]]);
    let picked = g.gather_rows(rows, indices);
    g.linear(picked, pv[&format!("{NAMESPACE}.weight")], pv[&format!("{NAMESPACE}.bias")])
}

/// Builds the mask and the query set from a prediction.
pub fn select_queries<F: Scalar>(
    h_ca: &Array2<F>,
    prediction: &PredictionOutput<F>,
    k: usize,
    params: &ParamStore<F>,
) -> Result<(QueryMask<F>, QuerySet<F>)> {
    let (nx, ny) = h_ca.dim();
    let (px, py, _) = prediction.heatmaps.dim();
    if (px, py) != (nx, ny) {
        return Err(Error::Shape {
            context: "class-agnostic heatmap vs prediction",
            expected: vec![px, py],
            actual: vec![nx, ny],
        });
    }
    let indices = top_k_indices(h_ca, k)?;
    let mask = QueryMask::from_indices((nx, ny), &indices, h_ca);
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let stacked = g.input(prediction.stacked().into_dyn());
    let q = embed_var(&mut g, &pv, stacked, indices.clone());
    let embeddings = g.value(q).clone().into_dimensionality().expect("rank 2");
    let positions = indices.iter().map(|&idx| (idx / ny, idx % ny)).collect();
    Ok((mask, QuerySet { positions, embeddings }))
}
