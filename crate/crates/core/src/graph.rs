//! A small reverse-mode differentiation tape over row-major f64 matrices.
//!
//! Every value is a 2-D matrix whose rows are tokens (or batch items). Nodes
//! are appended in evaluation order, so reverse creation order is a valid
//! topological order for the backward pass. Only the operations the encoders
//! and the joint loss need are provided; each one caches what its backward
//! rule needs during the forward evaluation.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::loss::{self, LossBreakdown, LossWeights};

pub type NodeId = usize;

/// `(start_row, len)` of one sequence inside a stacked token matrix.
pub type Segment = (usize, usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Input,
    Param,
    /// `x · wᵀ` with `w` stored out × in.
    Linear { x: NodeId, w: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Gather { table: NodeId, rows: Vec<usize> },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Gelu { x: NodeId },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Segment>,
        /// Softmax probabilities, one matrix per (segment, head).
        probs: Vec<Array2<f64>>,
    },
    SegmentMean { x: NodeId, segments: Vec<Segment> },
    L2Normalize { x: NodeId, norms: Array1<f64> },
    JointLoss {
        x: NodeId,
        y: NodeId,
        z: Option<NodeId>,
        log_tau: NodeId,
        dx: Array2<f64>,
        dy: Array2<f64>,
        dz: Array2<f64>,
        dlog_tau: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, NodeId>,
    breakdowns: HashMap<NodeId, LossBreakdown>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    per_node: Vec<Option<Array2<f64>>>,
    params: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.per_node.get(id).and_then(|g| g.as_ref())
    }

    /// `(param index, gradient)` for every trainable parameter reached by the
    /// backward pass.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.params
            .iter()
            .filter_map(|&(p, n)| self.per_node[n].as_ref().map(|g| (p, g)))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite activation");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Binds parameter `index` once per graph; later calls return the same node.
    pub fn param(&mut self, index: usize, value: &Array2<f64>, trainable: bool) -> NodeId {
        if let Some(&id) = self.params.get(&index) {
            return id;
        }
        let id = self.push(value.clone(), Op::Param, trainable);
        self.params.insert(index, id);
        id
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let value = self.nodes[x].value.dot(&self.nodes[w].value.t());
        let rg = self.rg(&[x, w]);
        self.push(value, Op::Linear { x, w }, rg)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[x].value + &self.nodes[b].value.row(0);
        let rg = self.rg(&[x, b]);
        self.push(value, Op::AddBias { x, b }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add { a, b }, rg)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let value = self.nodes[table].value.select(Axis(0), &rows);
        let rg = self.rg(&[table]);
        self.push(value, Op::Gather { table, rows }, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let d = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / d;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let value = &xhat * &self.nodes[gain].value.row(0) + self.nodes[bias].value.row(0);
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(gelu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu { x }, rg)
    }

    /// Multi-head scaled dot-product attention within each segment, without
    /// masking. `q`, `k`, `v` are already projected; heads split the columns.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Segment],
    ) -> NodeId {
        let (qv, kv, vv) = (
            &self.nodes[q].value,
            &self.nodes[k].value,
            &self.nodes[v].value,
        );
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros(qv.dim());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let rows = start..start + len;
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(s![rows, cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean of the rows of each segment; one output row per segment.
    pub fn segment_mean(&mut self, x: NodeId, segments: &[Segment]) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut out = Array2::zeros((segments.len(), xv.ncols()));
        for (i, &(start, len)) in segments.iter().enumerate() {
            let mean = xv
                .slice(s![start..start + len, ..])
                .mean_axis(Axis(0))
                .expect("non-empty segment");
            out.row_mut(i).assign(&mean);
        }
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        )
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let norms = xv.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
        let value = xv / &norms.view().insert_axis(Axis(1));
        let rg = self.rg(&[x]);
        self.push(value, Op::L2Normalize { x, norms }, rg)
    }

    /// Scalar joint contrastive loss. `z` may be `None` when both vision terms
    /// are disabled.
    pub fn joint_loss(
        &mut self,
        x: NodeId,
        y: NodeId,
        z: Option<NodeId>,
        log_tau: NodeId,
        weights: &LossWeights,
    ) -> loss::Result<NodeId> {
        let w = LossWeights {
            log_tau: self.nodes[log_tau].value[[0, 0]],
            ..*weights
        };
        let z_view: Option<ArrayView2<f64>> = z.map(|z| self.nodes[z].value.view());
        let g = loss::joint_loss_grad_views(
            self.nodes[x].value.view(),
            self.nodes[y].value.view(),
            z_view,
            &w,
        )?;
        let mut deps = vec![x, y, log_tau];
        deps.extend(z);
        let rg = self.rg(&deps);
        let id = self.push(
            Array2::from_elem((1, 1), g.breakdown.total),
            Op::JointLoss {
                x,
                y,
                z,
                log_tau,
                dx: g.dx,
                dy: g.dy,
                dz: g.dz,
                dlog_tau: g.dlog_tau,
            },
            rg,
        );
        self.breakdowns.insert(id, g.breakdown);
        Ok(id)
    }

    pub fn breakdown(&self, loss_node: NodeId) -> Option<LossBreakdown> {
        self.breakdowns.get(&loss_node).copied()
    }

    /// Backpropagates from a 1×1 `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        self.backward_seeded(root, Array2::ones(self.nodes[root].value.dim()))
    }

    /// Backpropagates with an explicit upstream gradient for `root`.
    pub fn backward_seeded(&self, root: NodeId, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.nodes[root].value.dim(), "seed shape");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        let mut params: Vec<(usize, NodeId)> = self.params.iter().map(|(&p, &n)| (p, n)).collect();
        params.sort_unstable();
        params.retain(|&(_, n)| self.nodes[n].requires_grad);
        Gradients {
            per_node: grads,
            params,
        }
    }

    fn backward_node(&self, node: &Node, gy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let needs = |i: NodeId| self.nodes[i].requires_grad;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w } => {
                if needs(*x) {
                    accumulate(&mut grads[*x], gy.dot(&self.nodes[*w].value));
                }
                if needs(*w) {
                    accumulate(&mut grads[*w], gy.t().dot(&self.nodes[*x].value));
                }
            }
            Op::AddBias { x, b } => {
                if needs(*x) {
                    accumulate(&mut grads[*x], gy.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[*b], gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    accumulate(&mut grads[*a], gy.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[*b], gy.clone());
                }
            }
            Op::Gather { table, rows } => {
                if needs(*table) {
                    let mut g = Array2::zeros(self.nodes[*table].value.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = g.row_mut(r);
                        dst += &gy.row(i);
                    }
                    accumulate(&mut grads[*table], g);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if needs(*gain) {
                    accumulate(
                        &mut grads[*gain],
                        (gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if needs(*bias) {
                    accumulate(&mut grads[*bias], gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*x) {
                    let d = xhat.ncols() as f64;
                    let dxhat = gy * &self.nodes[*gain].value.row(0);
                    let sum_d = dxhat.sum_axis(Axis(1));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(1));
                    let mut dx = dxhat * d;
                    dx -= &sum_d.insert_axis(Axis(1));
                    dx -= &(xhat * &sum_dx.insert_axis(Axis(1)));
                    dx *= &(inv_std / d).insert_axis(Axis(1));
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::Gelu { x } => {
                if needs(*x) {
                    let dx = gy * &self.nodes[*x].value.mapv(gelu_grad);
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                );
                let dh = qv.ncols() / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                let mut p_iter = probs.iter();
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = p_iter.next().expect("cached probabilities");
                        let rows = start..start + len;
                        let cols = h * dh..(h + 1) * dh;
                        let go = gy.slice(s![rows.clone(), cols.clone()]);
                        let qh = qv.slice(s![rows.clone(), cols.clone()]);
                        let kh = kv.slice(s![rows.clone(), cols.clone()]);
                        let vh = vv.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        let row_dot = (&dp * p).sum_axis(Axis(1));
                        let ds = p * &(dp - &row_dot.insert_axis(Axis(1))) * scale;
                        dq.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&ds.dot(&kh));
                        dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qh));
                    }
                }
                if needs(*q) {
                    accumulate(&mut grads[*q], dq);
                }
                if needs(*k) {
                    accumulate(&mut grads[*k], dk);
                }
                if needs(*v) {
                    accumulate(&mut grads[*v], dv);
                }
            }
            Op::SegmentMean { x, segments } => {
                if needs(*x) {
                    let mut dx = Array2::zeros(self.nodes[*x].value.dim());
                    for (i, &(start, len)) in segments.iter().enumerate() {
                        let row = gy.row(i).mapv(|v| v / len as f64);
                        for r in start..start + len {
                            dx.row_mut(r).assign(&row);
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::L2Normalize { x, norms } => {
                if needs(*x) {
                    let y = &node.value;
                    let proj = (y * gy).sum_axis(Axis(1));
                    let mut dx = gy - &(y * &proj.insert_axis(Axis(1)));
                    dx /= &norms.view().insert_axis(Axis(1));
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::JointLoss {
                x,
                y,
                z,
                log_tau,
                dx,
                dy,
                dz,
                dlog_tau,
            } => {
                let g = gy[[0, 0]];
                if needs(*x) {
                    accumulate(&mut grads[*x], dx * g);
                }
                if needs(*y) {
                    accumulate(&mut grads[*y], dy * g);
                }
                if let Some(z) = z {
                    if needs(*z) {
                        accumulate(&mut grads[*z], dz * g);
                    }
                }
                if needs(*log_tau) {
                    accumulate(&mut grads[*log_tau], Array2::from_elem((1, 1), dlog_tau * g));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Compares the gradient of `sum(f(params) ⊙ probe)` with central
    /// differences, so every output entry contributes.
    fn check_op(params: Vec<Array2<f64>>, build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId, seed: u64) {
        let forward = |ps: &[Array2<f64>]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ps.iter().enumerate().map(|(i, p)| g.param(i, p, true)).collect();
            let out = build(&mut g, &ids);
            (g, ids, out)
        };
        let (g, ids, out) = forward(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = g.value(out).dim();
        let probe = rand_mat(r, c, &mut rng);
        let grads = g.backward_seeded(out, probe.clone());
        let objective = |ps: &[Array2<f64>]| {
            let (g, _, out) = forward(ps);
            (g.value(out) * &probe).sum()
        };
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let ana = grads.node(ids[pi]).cloned().unwrap_or_else(|| Array2::zeros(p.dim()));
            for ((r, c), &a) in ana.indexed_iter() {
                let mut plus = params.clone();
                plus[pi][[r, c]] += h;
                let mut minus = params.clone();
                minus[pi][[r, c]] -= h;
                let num = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!(
                    (num - a).abs() <= 1e-6 * (1.0 + num.abs()),
                    "param {pi} [{r},{c}]: numeric {num} analytic {a}"
                );
            }
        }
    }

    #[test]
    fn linear_bias_gelu_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_op(
            vec![rand_mat(3, 4, &mut rng), rand_mat(5, 4, &mut rng), rand_mat(1, 5, &mut rng)],
            &|g, p| {
                let l = g.linear(p[0], p[1]);
                let b = g.add_bias(l, p[2]);
                g.gelu(b)
            },
            2,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_op(
            vec![rand_mat(4, 6, &mut rng), rand_mat(1, 6, &mut rng), rand_mat(1, 6, &mut rng)],
            &|g, p| g.layer_norm(p[0], p[1], p[2]),
            4,
        );
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_op(
            vec![rand_mat(7, 4, &mut rng), rand_mat(7, 4, &mut rng), rand_mat(7, 4, &mut rng)],
            &|g, p| g.attention(p[0], p[1], p[2], 2, &[(0, 3), (3, 4)]),
            6,
        );
    }

    #[test]
    fn gather_mean_normalize_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check_op(
            vec![rand_mat(5, 3, &mut rng), rand_mat(6, 3, &mut rng)],
            &|g, p| {
                let e = g.gather(p[0], vec![0, 2, 2, 4, 1, 0]);
                let s = g.add(e, p[1]);
                let m = g.segment_mean(s, &[(0, 2), (2, 4)]);
                g.l2_normalize(m)
            },
            8,
        );
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(rand_mat(2, 3, &mut rng));
        let w0 = g.param(0, &rand_mat(3, 3, &mut rng), false);
        let w1 = g.param(1, &rand_mat(1, 3, &mut rng), true);
        let l = g.linear(x, w0);
        let out = g.linear(l, w1);
        let m = g.segment_mean(out, &[(0, 2)]);
        let grads = g.backward(m);
        let names: Vec<usize> = grads.params().map(|(p, _)| p).collect();
        assert_eq!(names, vec![1]);
        assert!(grads.node(w0).is_none());
    }
}
