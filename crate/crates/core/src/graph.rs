//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and, when
//! any input requires a gradient, a closure computing input gradients from the
//! output gradient. Graphs are built fresh for every forward pass.

use ndarray::{s, Array2, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};

use crate::sample::{bilinear_taps, Tap};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

pub struct BackwardCtx<'a, F> {
    pub grad: &'a ArrayD<F>,
    pub inputs: Vec<&'a ArrayD<F>>,
    pub output: &'a ArrayD<F>,
    /// Which inputs actually need a gradient.
    pub needs: Vec<bool>,
}

type BackwardFn<F> = Box<dyn Fn(&BackwardCtx<'_, F>) -> Vec<Option<ArrayD<F>>>>;

struct Node<F> {
    value: ArrayD<F>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar root with respect to every leaf that requires one.
pub struct Gradients<F> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&ArrayD<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn standard<F: Scalar>(value: ArrayD<F>) -> ArrayD<F> {
    if value.is_standard_layout() {
        value
    } else {
        value.as_standard_layout().into_owned()
    }
}

fn view2<F: Scalar>(a: &ArrayD<F>, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("graph values are kept in standard layout")
}

fn view3<F: Scalar>(a: &ArrayD<F>) -> ArrayView3<'_, F> {
    a.view()
        .into_dimensionality()
        .expect("expected a rank-3 tensor")
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant: never receives a gradient.
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &ArrayD<F> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn tracks(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: ArrayD<F>, inputs: &[Var], backward: Option<BackwardFn<F>>) -> Var {
        let requires_grad = self.tracks(inputs);
        self.nodes.push(Node {
            value: standard(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar (single element) root.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let root_value = &self.nodes[root.0].value;
        assert_eq!(root_value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(ArrayD::from_elem(root_value.raw_dim(), F::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.input(value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let input_shape = self.shape(x).to_vec();
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.record(
            value,
            &[x],
            Some(Box::new(move |ctx| {
                vec![Some(
                    ctx.grad
                        .clone()
                        .into_shape_with_order(IxDyn(&input_shape))
                        .expect("reshape preserves element count"),
                )]
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add needs equal shapes");
        let value = self.value(a) + self.value(b);
        self.record(
            value,
            &[a, b],
            Some(Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            })),
        )
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_last(&mut self, x: Var, v: Var) -> Var {
        let c = *self.shape(x).last().expect("rank >= 1");
        assert_eq!(self.shape(v), &[c], "broadcast vector must match last axis");
        let rows = self.value(x).len() / c;
        let mut value = self.value(x).clone();
        {
            let mut flat = value
                .view_mut()
                .into_shape_with_order((rows, c))
                .expect("standard layout");
            flat += &self.value(v).view();
        }
        self.record(
            value,
            &[x, v],
            Some(Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| view2(ctx.grad, rows, c).sum_axis(Axis(0)).into_dyn()),
                ]
            })),
        )
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.value(x) * factor;
        self.record(
            value,
            &[x],
            Some(Box::new(move |ctx| vec![Some(ctx.grad * factor)])),
        )
    }

    /// Sum of `x * weights`; the weights are constants.
    pub fn weighted_sum(&mut self, x: Var, weights: ArrayD<F>) -> Var {
        assert_eq!(self.shape(x), weights.shape());
        let total = (self.value(x) * &weights).sum();
        self.record(
            ArrayD::from_elem(IxDyn(&[]), total),
            &[x],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.first().copied().unwrap_or_else(F::zero);
                vec![Some(&weights * g)]
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.record(
            value,
            &[x],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.output, |g, &y| {
                    if y <= F::zero() {
                        *g = F::zero();
                    }
                });
                vec![Some(g)]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| F::one() / (F::one() + (-v).exp()));
        self.record(
            value,
            &[x],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.output, |g, &y| *g = *g * y * (F::one() - y));
                vec![Some(g)]
            })),
        )
    }

    /// Concatenation along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes agree");
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.record(
            value,
            parts,
            Some(Box::new(move |ctx| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&w, &need)| {
                        let range = start..start + w;
                        start += w;
                        need.then(|| {
                            ctx.grad
                                .slice_axis(Axis(axis), range.into())
                                .to_owned()
                        })
                    })
                    .collect()
            })),
        )
    }

    /// `x [n, c_in] @ w [c_in, c_out] + b [c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 2, "linear input must be rank 2");
        let (n, c_in) = (xs[0], xs[1]);
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0], c_in, "linear weight rows must match input width");
        let c_out = ws[1];
        assert_eq!(self.shape(b), &[c_out]);
        let mut out = view2(self.value(x), n, c_in).dot(&view2(self.value(w), c_in, c_out));
        out += &self.value(b).view();
        self.record(
            out.into_dyn(),
            &[x, w, b],
            Some(Box::new(move |ctx| {
                let g = view2(ctx.grad, n, c_out);
                let x = view2(ctx.inputs[0], n, c_in);
                let w = view2(ctx.inputs[1], c_in, c_out);
                vec![
                    ctx.needs[0].then(|| g.dot(&w.t()).into_dyn()),
                    ctx.needs[1].then(|| x.t().dot(&g).into_dyn()),
                    ctx.needs[2].then(|| g.sum_axis(Axis(0)).into_dyn()),
                ]
            })),
        )
    }

    /// Same-size 2D convolution over an `[X, Y, C_in]` map with an odd square
    /// kernel and zero padding. Weights are laid out `[k * k * C_in, C_out]`
    /// with row index `(di * k + dj) * C_in + c`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let (nx, ny, c_in) = view3(self.value(x)).dim();
        let rows = kernel * kernel * c_in;
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0], rows, "conv weight rows must be k*k*C_in");
        let c_out = ws[1];
        assert_eq!(self.shape(b), &[c_out]);

        let cols = if kernel == 1 {
            view2(self.value(x), nx * ny, c_in).to_owned()
        } else {
            im2col(view3(self.value(x)), kernel)
        };
        let mut out = cols.dot(&view2(self.value(w), rows, c_out));
        out += &self.value(b).view();
        let value = out
            .into_shape_with_order((nx, ny, c_out))
            .expect("standard layout")
            .into_dyn();
        if !self.tracks(&[x, w, b]) {
            return self.record(value, &[x, w, b], None);
        }
        self.record(
            value,
            &[x, w, b],
            Some(Box::new(move |ctx| {
                let g = view2(ctx.grad, nx * ny, c_out);
                let w = view2(ctx.inputs[1], rows, c_out);
                let dx = ctx.needs[0].then(|| {
                    let dcols = g.dot(&w.t());
                    if kernel == 1 {
                        dcols.into_shape_with_order((nx, ny, c_in)).unwrap().into_dyn()
                    } else {
                        col2im(&dcols, nx, ny, c_in, kernel).into_dyn()
                    }
                });
                vec![
                    dx,
                    ctx.needs[1].then(|| cols.t().dot(&g).into_dyn()),
                    ctx.needs[2].then(|| g.sum_axis(Axis(0)).into_dyn()),
                ]
            })),
        )
    }

    /// Linear resampling of an `[X, Y, C]` map: output cell `o` is the
    /// tap-weighted sum of input cells `taps[o]`.
    pub fn resample(&mut self, x: Var, taps: Vec<[Tap<F>; 4]>, out_shape: (usize, usize)) -> Var {
        let (nx, ny, c) = view3(self.value(x)).dim();
        assert_eq!(taps.len(), out_shape.0 * out_shape.1);
        let n_out = taps.len();
        let input = view2(self.value(x), nx * ny, c);
        let mut out = Array2::<F>::zeros((n_out, c));
        for (o, cell_taps) in taps.iter().enumerate() {
            let mut row = out.row_mut(o);
            for tap in cell_taps {
                if let Some(idx) = tap.index {
                    if tap.weight != F::zero() {
                        row.scaled_add(tap.weight, &input.row(idx));
                    }
                }
            }
        }
        let value = out
            .into_shape_with_order((out_shape.0, out_shape.1, c))
            .unwrap()
            .into_dyn();
        self.record(
            value,
            &[x],
            Some(Box::new(move |ctx| {
                let g = view2(ctx.grad, n_out, c);
                let mut dx = Array2::<F>::zeros((nx * ny, c));
                for (o, cell_taps) in taps.iter().enumerate() {
                    for tap in cell_taps {
                        if let Some(idx) = tap.index {
                            if tap.weight != F::zero() {
                                dx.row_mut(idx).scaled_add(tap.weight, &g.row(o));
                            }
                        }
                    }
                }
                vec![Some(dx.into_shape_with_order((nx, ny, c)).unwrap().into_dyn())]
            })),
        )
    }

    /// Rows `indices` of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        let value = self.value(x).select(Axis(0), &indices);
        self.record(
            value,
            &[x],
            Some(Box::new(move |ctx| {
                let mut dx = ArrayD::<F>::zeros(IxDyn(&xs));
                for (k, &idx) in indices.iter().enumerate() {
                    let mut row = dx.index_axis_mut(Axis(0), idx);
                    row += &ctx.grad.index_axis(Axis(0), k);
                }
                vec![Some(dx)]
            })),
        )
    }

    /// Writes the rows of `x [k, c]` into rows `indices` of an all-zero
    /// `[rows, c]` tensor. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, indices: Vec<usize>, rows: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[0], indices.len());
        let mut value = ArrayD::<F>::zeros(IxDyn(&[rows, xs[1]]));
        for (k, &idx) in indices.iter().enumerate() {
            value
                .index_axis_mut(Axis(0), idx)
                .assign(&self.value(x).index_axis(Axis(0), k));
        }
        self.record(
            value,
            &[x],
            Some(Box::new(move |ctx| vec![Some(ctx.grad.select(Axis(0), &indices))])),
        )
    }

    /// Softmax over consecutive groups of `group` entries along each row of a
    /// rank-2 tensor.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 2);
        assert!(group > 0 && xs[1] % group == 0, "row width must divide into groups");
        let mut value = self.value(x).clone();
        for mut chunk in value
            .as_slice_mut()
            .expect("standard layout")
            .chunks_mut(group)
            .map(|c| c.iter_mut().collect::<Vec<_>>())
        {
            let max = chunk.iter().fold(F::neg_infinity(), |m, v| m.max(**v));
            let mut total = F::zero();
            for v in chunk.iter_mut() {
                **v = (**v - max).exp();
                total = total + **v;
            }
            for v in chunk.iter_mut() {
                **v = **v / total;
            }
        }
        self.record(
            value,
            &[x],
            Some(Box::new(move |ctx| {
                let y = ctx.output.as_slice().expect("standard layout");
                let g = ctx.grad.as_slice().expect("standard layout");
                let mut dx = Vec::with_capacity(y.len());
                for (yc, gc) in y.chunks(group).zip(g.chunks(group)) {
                    let dot: F = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
                    dx.extend(yc.iter().zip(gc).map(|(&a, &b)| a * (b - dot)));
                }
                vec![Some(ArrayD::from_shape_vec(ctx.output.raw_dim(), dx).unwrap())]
            })),
        )
    }

    /// Multi-head, multi-level deformable sampling.
    ///
    /// * `values`: `[levels * nx * ny, heads * head_dim]`, level-major.
    /// * `refs`: reference point of each query in continuous cell coordinates.
    /// * `offsets`: `[k, heads * levels * points * 2]`, in cells.
    /// * `weights`: `[k, heads * levels * points]`.
    ///
    /// Output `[k, heads * head_dim]`: for each head, the weighted sum of
    /// bilinear samples of that head's value channels.
    #[allow(clippy::too_many_arguments)]
    pub fn deform_sample(
        &mut self,
        values: Var,
        offsets: Var,
        weights: Var,
        refs: Vec<[F; 2]>,
        grid: (usize, usize),
        levels: usize,
        heads: usize,
        points: usize,
    ) -> Var {
        let (nx, ny) = grid;
        let cells = nx * ny;
        let vs = self.shape(values);
        assert_eq!(vs.len(), 2);
        assert_eq!(vs[0], levels * cells, "values must hold every level");
        let channels = vs[1];
        assert!(channels % heads == 0, "channels must split across heads");
        let head_dim = channels / heads;
        let k = refs.len();
        let slots = heads * levels * points;
        assert_eq!(self.shape(offsets), &[k, slots * 2]);
        assert_eq!(self.shape(weights), &[k, slots]);

        let plan = DeformPlan {
            cells,
            nx,
            ny,
            levels,
            heads,
            points,
            head_dim,
            channels,
        };
        let taps = plan.taps(&refs, self.value(offsets));
        let v = view2(self.value(values), levels * cells, channels);
        let w = view2(self.value(weights), k, slots);
        let mut out = Array2::<F>::zeros((k, channels));
        for q in 0..k {
            let mut row = out.row_mut(q);
            for h in 0..heads {
                let mut acc = row.slice_mut(s![h * head_dim..(h + 1) * head_dim]);
                for l in 0..levels {
                    for p in 0..points {
                        let slot = (h * levels + l) * points + p;
                        let weight = w[[q, slot]];
                        for tap in &taps[q * slots + slot] {
                            if let Some(idx) = tap.index {
                                let coef = weight * tap.weight;
                                if coef != F::zero() {
                                    acc.scaled_add(
                                        coef,
                                        &v.slice(s![l * cells + idx, h * head_dim..(h + 1) * head_dim]),
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        self.record(
            out.into_dyn(),
            &[values, offsets, weights],
            Some(Box::new(move |ctx| plan.backward(ctx, &taps))),
        )
    }

    /// Penalty-reduced focal loss over dense heatmaps, normalized by the
    /// number of positive (target == 1) cells, at least one.
    pub fn focal_loss(&mut self, pred: Var, target: &ArrayD<F>, alpha: F, beta: F, eps: F) -> Var {
        assert_eq!(self.shape(pred), target.shape());
        let p = self.value(pred);
        let one = F::one();
        let positives = target.iter().filter(|&&t| t == one).count();
        let norm = F::of(positives.max(1) as f64);
        let mut total = F::zero();
        for (&p, &t) in p.iter().zip(target.iter()) {
            let pc = p.max(eps).min(one - eps);
            total = total
                + if t == one {
                    -(one - pc).powf(alpha) * pc.ln()
                } else {
                    -(one - t).powf(beta) * pc.powf(alpha) * (one - pc).ln()
                };
        }
        let target = target.clone();
        self.record(
            ArrayD::from_elem(IxDyn(&[]), total / norm),
            &[pred],
            Some(Box::new(move |ctx| {
                let scale = ctx.grad.first().copied().unwrap_or_else(F::zero) / norm;
                let mut dp = ctx.inputs[0].clone();
                dp.zip_mut_with(&target, |p, &t| {
                    let v = *p;
                    *p = if v <= eps || v >= one - eps {
                        F::zero()
                    } else if t == one {
                        alpha * (one - v).powf(alpha - one) * v.ln() - (one - v).powf(alpha) / v
                    } else {
                        -(one - t).powf(beta)
                            * (alpha * v.powf(alpha - one) * (one - v).ln() - v.powf(alpha) / (one - v))
                    } * scale;
                });
                vec![Some(dp)]
            })),
        )
    }

    /// Mean absolute error over the last axis at masked cells, normalized by
    /// `channels * max(1, positives)`.
    pub fn masked_l1(&mut self, pred: Var, target: &ArrayD<F>, mask: &[bool]) -> Var {
        assert_eq!(self.shape(pred), target.shape());
        let channels = *target.shape().last().expect("rank >= 1");
        assert_eq!(mask.len() * channels, target.len());
        let positives = mask.iter().filter(|&&m| m).count();
        let norm = F::of((channels * positives.max(1)) as f64);
        let p = self.value(pred).as_slice().expect("standard layout");
        let t = target.as_slice().expect("standard layout");
        let mut total = F::zero();
        for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in cell * channels..(cell + 1) * channels {
                total = total + (p[c] - t[c]).abs();
            }
        }
        let target = t.to_vec();
        let mask = mask.to_vec();
        self.record(
            ArrayD::from_elem(IxDyn(&[]), total / norm),
            &[pred],
            Some(Box::new(move |ctx| {
                let scale = ctx.grad.first().copied().unwrap_or_else(F::zero) / norm;
                let p = ctx.inputs[0].as_slice().expect("standard layout");
                let mut dp = vec![F::zero(); p.len()];
                for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for c in cell * channels..(cell + 1) * channels {
                        let diff = p[c] - target[c];
                        dp[c] = if diff > F::zero() {
                            scale
                        } else if diff < F::zero() {
                            -scale
                        } else {
                            F::zero()
                        };
                    }
                }
                vec![Some(ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), dp).unwrap())]
            })),
        )
    }
}

#[derive(Clone, Copy)]
struct DeformPlan {
    cells: usize,
    nx: usize,
    ny: usize,
    levels: usize,
    heads: usize,
    points: usize,
    head_dim: usize,
    channels: usize,
}

impl DeformPlan {
    fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    fn taps<F: Scalar>(&self, refs: &[[F; 2]], offsets: &ArrayD<F>) -> Vec<[Tap<F>; 4]> {
        let slots = self.slots();
        let off = view2(offsets, refs.len(), slots * 2);
        let mut taps = Vec::with_capacity(refs.len() * slots);
        for (q, r) in refs.iter().enumerate() {
            for slot in 0..slots {
                let u = r[0] + off[[q, 2 * slot]];
                let v = r[1] + off[[q, 2 * slot + 1]];
                taps.push(bilinear_taps(u, v, self.nx, self.ny));
            }
        }
        taps
    }

    fn backward<F: Scalar>(&self, ctx: &BackwardCtx<'_, F>, taps: &[[Tap<F>; 4]]) -> Vec<Option<ArrayD<F>>> {
        let slots = self.slots();
        let k = taps.len() / slots.max(1);
        let (levels, heads, points, hd, cells) =
            (self.levels, self.heads, self.points, self.head_dim, self.cells);
        let g = view2(ctx.grad, k, self.channels);
        let v = view2(ctx.inputs[0], levels * cells, self.channels);
        let w = view2(ctx.inputs[2], k, slots);
        let mut d_values = ctx.needs[0].then(|| Array2::<F>::zeros((levels * cells, self.channels)));
        let mut d_offsets = ctx.needs[1].then(|| Array2::<F>::zeros((k, slots * 2)));
        let mut d_weights = ctx.needs[2].then(|| Array2::<F>::zeros((k, slots)));
        for q in 0..k {
            for h in 0..heads {
                let gh = g.slice(s![q, h * hd..(h + 1) * hd]);
                for l in 0..levels {
                    for p in 0..points {
                        let slot = (h * levels + l) * points + p;
                        let weight = w[[q, slot]];
                        let (mut sample_dot, mut du, mut dv) = (F::zero(), F::zero(), F::zero());
                        for tap in &taps[q * slots + slot] {
                            let Some(idx) = tap.index else { continue };
                            let row = l * cells + idx;
                            let vh = v.slice(s![row, h * hd..(h + 1) * hd]);
                            let dot = vh.dot(&gh);
                            sample_dot = sample_dot + tap.weight * dot;
                            du = du + tap.d_u * dot;
                            dv = dv + tap.d_v * dot;
                            if let Some(dv_map) = d_values.as_mut() {
                                let coef = weight * tap.weight;
                                if coef != F::zero() {
                                    dv_map
                                        .slice_mut(s![row, h * hd..(h + 1) * hd])
                                        .scaled_add(coef, &gh);
                                }
                            }
                        }
                        if let Some(dw) = d_weights.as_mut() {
                            dw[[q, slot]] = sample_dot;
                        }
                        if let Some(doff) = d_offsets.as_mut() {
                            doff[[q, 2 * slot]] = weight * du;
                            doff[[q, 2 * slot + 1]] = weight * dv;
                        }
                    }
                }
            }
        }
        vec![
            d_values.map(|a| a.into_dyn()),
            d_offsets.map(|a| a.into_dyn()),
            d_weights.map(|a| a.into_dyn()),
        ]
    }
}

fn im2col<F: Scalar>(x: ArrayView3<'_, F>, kernel: usize) -> Array2<F> {
    let (nx, ny, c) = x.dim();
    let pad = (kernel / 2) as isize;
    let width = kernel * kernel * c;
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut cols = vec![F::zero(); nx * ny * width];
    for i in 0..nx {
        for j in 0..ny {
            let row = &mut cols[(i * ny + j) * width..(i * ny + j + 1) * width];
            for di in 0..kernel {
                let si = i as isize + di as isize - pad;
                if si < 0 || si >= nx as isize {
                    continue;
                }
                for dj in 0..kernel {
                    let sj = j as isize + dj as isize - pad;
                    if sj < 0 || sj >= ny as isize {
                        continue;
                    }
                    let from = (si as usize * ny + sj as usize) * c;
                    let to = (di * kernel + dj) * c;
                    row[to..to + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    Array2::from_shape_vec((nx * ny, width), cols).unwrap()
}

fn col2im<F: Scalar>(cols: &Array2<F>, nx: usize, ny: usize, c: usize, kernel: usize) -> ndarray::Array3<F> {
    let pad = (kernel / 2) as isize;
    let width = kernel * kernel * c;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); nx * ny * c];
    for i in 0..nx {
        for j in 0..ny {
            let row = &src[(i * ny + j) * width..(i * ny + j + 1) * width];
            for di in 0..kernel {
                let si = i as isize + di as isize - pad;
                if si < 0 || si >= nx as isize {
                    continue;
                }
                for dj in 0..kernel {
                    let sj = j as isize + dj as isize - pad;
                    if sj < 0 || sj >= ny as isize {
                        continue;
                    }
                    let to = (si as usize * ny + sj as usize) * c;
                    let from = (di * kernel + dj) * c;
                    for (o, &v) in out[to..to + c].iter_mut().zip(&row[from..from + c]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
    ndarray::Array3::from_shape_vec((nx, ny, c), out).unwrap()
}
