//! Reverse-mode gradients over batched matrices.
//!
//! A [`Graph`] is an append-only tape: each operation computes its value
//! eagerly and records which earlier nodes fed it. [`Graph::backward`]
//! walks the tape in reverse, accumulating adjoints into every node, so
//! parameter gradients come out exact (up to floating-point rounding) in
//! one pass. Everything is a 64-bit matrix; a scalar is a 1x1 matrix.
//!
//! The op set covers exactly what the losses need: dense layers, embedding
//! gathers, the squashing nonlinearities, and a few elementwise glue ops.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, Axis, Zip};

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Backward was asked to run from a loss that is NaN or infinite.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("loss is not finite: {value}")]
pub struct NonFiniteLoss {
    pub value: f64,
}

pub(crate) fn relu_mat(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

enum Op {
    Leaf,
    /// Row lookup into an embedding table; adjoints scatter-add back.
    Gather { table: NodeId, rows: Vec<usize> },
    Concat { parts: Vec<NodeId> },
    MatMul { a: NodeId, b: NodeId },
    /// Broadcast-add a 1xK row (bias) onto every row of `a`.
    AddRow { a: NodeId, row: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Elementwise minimum; ties route the adjoint to `a`.
    Min { a: NodeId, b: NodeId },
    Relu { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Scale { a: NodeId, k: f64 },
    AddConst { a: NodeId },
    /// Pass-through adjoint inside [lo, hi], zero outside.
    Clamp { a: NodeId, lo: f64, hi: f64 },
    /// Single column as an Nx1 matrix.
    Col { a: NodeId, j: usize },
    /// Mean over all elements, as a 1x1 matrix.
    Mean { a: NodeId },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn take_grad(node: &mut Node) -> Array2<f64> {
    node.grad
        .take()
        .unwrap_or_else(|| Array2::zeros(node.value.dim()))
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v[[0, 0]]
    }

    /// Accumulated adjoint; zeros if the loss did not reach this node.
    pub fn grad(&self, id: NodeId) -> Array2<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[id.0].value.dim()),
        }
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let tv = &self.nodes[table.0].value;
        let (n, dim) = tv.dim();
        let mut out = Array2::zeros((rows.len(), dim));
        for (r, &idx) in rows.iter().enumerate() {
            assert!(idx < n, "embedding index {idx} out of range for vocabulary {n}");
            out.row_mut(r).assign(&tv.row(idx));
        }
        self.push(out, Op::Gather { table, rows: rows.to_vec() })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat parts share row count");
        self.push(out, Op::Concat { parts: parts.to_vec() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(out, Op::MatMul { a, b })
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let out = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(out, Op::AddRow { a, row })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(out, Op::Mul { a, b })
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        out.zip_mut_with(&self.nodes[b.0].value, |x, &y| *x = x.min(y));
        self.push(out, Op::Min { a, b })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = relu_mat(&self.nodes[a.0].value);
        self.push(out, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(out, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(f64::exp);
        self.push(out, Op::Exp { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(f64::ln);
        self.push(out, Op::Ln { a })
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let out = self.nodes[a.0].value.mapv(|v| v * k);
        self.push(out, Op::Scale { a, k })
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let out = self.nodes[a.0].value.mapv(|v| v + k);
        self.push(out, Op::AddConst { a })
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.nodes[a.0].value.mapv(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { a, lo, hi })
    }

    pub fn col(&mut self, a: NodeId, j: usize) -> NodeId {
        let out = self.nodes[a.0].value.column(j).to_owned().insert_axis(Axis(1));
        self.push(out, Op::Col { a, j })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a.0].value.mean().expect("mean of non-empty matrix");
        self.push(Array2::from_elem((1, 1), m), Op::Mean { a })
    }

    /// Seeds the adjoint of `loss` (a scalar node) with 1 and propagates
    /// back through every recorded operation.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NonFiniteLoss> {
        let lv = self.scalar(loss);
        if !lv.is_finite() {
            return Err(NonFiniteLoss { value: lv });
        }
        self.nodes[loss.0].grad = Some(Array2::ones((1, 1)));
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            match &node.op {
                Op::Leaf => {}
                Op::Gather { table, rows } => {
                    let mut gt = take_grad(&mut head[table.0]);
                    for (r, &idx) in rows.iter().enumerate() {
                        let mut row = gt.row_mut(idx);
                        row += &g.row(r);
                    }
                    head[table.0].grad = Some(gt);
                }
                Op::Concat { parts } => {
                    let widths: Vec<usize> =
                        parts.iter().map(|p| head[p.0].value.ncols()).collect();
                    let mut off = 0;
                    for (p, w) in parts.iter().zip(widths) {
                        let mut gp = take_grad(&mut head[p.0]);
                        gp += &g.slice(s![.., off..off + w]);
                        head[p.0].grad = Some(gp);
                        off += w;
                    }
                }
                Op::MatMul { a, b } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    general_mat_mul(1.0, &g, &head[b.0].value.t(), 1.0, &mut ga);
                    head[a.0].grad = Some(ga);
                    let mut gb = take_grad(&mut head[b.0]);
                    general_mat_mul(1.0, &head[a.0].value.t(), &g, 1.0, &mut gb);
                    head[b.0].grad = Some(gb);
                }
                Op::AddRow { a, row } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    ga += &g;
                    head[a.0].grad = Some(ga);
                    let mut gr = take_grad(&mut head[row.0]);
                    let col_sums = g.sum_axis(Axis(0));
                    let mut r0 = gr.row_mut(0);
                    r0 += &col_sums;
                    head[row.0].grad = Some(gr);
                }
                Op::Add { a, b } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    ga += &g;
                    head[a.0].grad = Some(ga);
                    let mut gb = take_grad(&mut head[b.0]);
                    gb += &g;
                    head[b.0].grad = Some(gb);
                }
                Op::Sub { a, b } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    ga += &g;
                    head[a.0].grad = Some(ga);
                    let mut gb = take_grad(&mut head[b.0]);
                    gb -= &g;
                    head[b.0].grad = Some(gb);
                }
                Op::Mul { a, b } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    Zip::from(&mut ga)
                        .and(&g)
                        .and(&head[b.0].value)
                        .for_each(|ga, &g, &b| *ga += g * b);
                    head[a.0].grad = Some(ga);
                    let mut gb = take_grad(&mut head[b.0]);
                    Zip::from(&mut gb)
                        .and(&g)
                        .and(&head[a.0].value)
                        .for_each(|gb, &g, &a| *gb += g * a);
                    head[b.0].grad = Some(gb);
                }
                Op::Min { a, b } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    Zip::from(&mut ga)
                        .and(&g)
                        .and(&head[a.0].value)
                        .and(&head[b.0].value)
                        .for_each(|ga, &g, &x, &y| {
                            if x <= y {
                                *ga += g;
                            }
                        });
                    head[a.0].grad = Some(ga);
                    let mut gb = take_grad(&mut head[b.0]);
                    Zip::from(&mut gb)
                        .and(&g)
                        .and(&head[a.0].value)
                        .and(&head[b.0].value)
                        .for_each(|gb, &g, &x, &y| {
                            if y < x {
                                *gb += g;
                            }
                        });
                    head[b.0].grad = Some(gb);
                }
                Op::Relu { a } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    Zip::from(&mut ga)
                        .and(&g)
                        .and(&head[a.0].value)
                        .for_each(|ga, &g, &x| {
                            if x > 0.0 {
                                *ga += g;
                            }
                        });
                    head[a.0].grad = Some(ga);
                }
                Op::Tanh { a } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    Zip::from(&mut ga)
                        .and(&g)
                        .and(&node.value)
                        .for_each(|ga, &g, &t| *ga += g * (1.0 - t * t));
                    head[a.0].grad = Some(ga);
                }
                Op::Exp { a } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    Zip::from(&mut ga)
                        .and(&g)
                        .and(&node.value)
                        .for_each(|ga, &g, &e| *ga += g * e);
                    head[a.0].grad = Some(ga);
                }
                Op::Ln { a } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    Zip::from(&mut ga)
                        .and(&g)
                        .and(&head[a.0].value)
                        .for_each(|ga, &g, &x| *ga += g / x);
                    head[a.0].grad = Some(ga);
                }
                Op::Scale { a, k } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    Zip::from(&mut ga).and(&g).for_each(|ga, &g| *ga += g * k);
                    head[a.0].grad = Some(ga);
                }
                Op::AddConst { a } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    ga += &g;
                    head[a.0].grad = Some(ga);
                }
                Op::Clamp { a, lo, hi } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    Zip::from(&mut ga)
                        .and(&g)
                        .and(&head[a.0].value)
                        .for_each(|ga, &g, &x| {
                            if x >= *lo && x <= *hi {
                                *ga += g;
                            }
                        });
                    head[a.0].grad = Some(ga);
                }
                Op::Col { a, j } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    let mut col = ga.column_mut(*j);
                    col += &g.column(0);
                    head[a.0].grad = Some(ga);
                }
                Op::Mean { a } => {
                    let mut ga = take_grad(&mut head[a.0]);
                    ga += g[[0, 0]] / head[a.0].value.len() as f64;
                    head[a.0].grad = Some(ga);
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn linear_layer_squared_loss_matches_closed_form() {
        // loss = (w.x - y)^2 for scalars; d loss / d w = 2 (w x - y) x.
        let mut g = Graph::new();
        let w = g.leaf(array![[3.0]]);
        let x = g.leaf(array![[2.0]]);
        let y = g.leaf(array![[1.0]]);
        let wx = g.matmul(x, w);
        let d = g.sub(wx, y);
        let loss = g.mul(d, d);
        g.backward(loss).unwrap();
        let expect = 2.0 * (3.0 * 2.0 - 1.0) * 2.0;
        assert_abs_diff_eq!(g.grad(w)[[0, 0]], expect, epsilon = 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let z = g.scale(w, 0.0);
        let loss = g.mean(z);
        g.backward(loss).unwrap();
        assert!(g.grad(w).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(array![[0.0]]);
        let l = g.ln(w);
        let loss = g.mean(l);
        assert_eq!(g.backward(loss), Err(NonFiniteLoss { value: f64::NEG_INFINITY }));
    }

    #[test]
    fn composite_graph_matches_central_differences() {
        // Touches gather, concat, matmul, bias, relu, tanh, exp, ln, min,
        // col, clamp in one scalar function of the table and the weights.
        let build = |table: &Array2<f64>, w: &Array2<f64>, bias: &Array2<f64>| -> (Graph, NodeId, NodeId, NodeId, NodeId) {
            let mut g = Graph::new();
            let t = g.leaf(table.clone());
            let w_id = g.leaf(w.clone());
            let b_id = g.leaf(bias.clone());
            let e = g.gather(t, &[0, 2, 1]);
            let extra = g.leaf(array![[0.5], [-0.25], [0.75]]);
            let x = g.concat(&[e, extra]);
            let h = g.matmul(x, w_id);
            let h = g.add_row(h, b_id);
            let h = g.relu(h);
            let c0 = g.col(h, 0);
            let c1 = g.col(h, 1);
            let m = g.min(c0, c1);
            let th = g.tanh(m);
            let sq = g.mul(th, th);
            let neg = g.scale(sq, -1.0);
            let shifted = g.add_const(neg, 1.5);
            let ln = g.ln(shifted);
            let cl = g.clamp(ln, -0.3, 0.35);
            let ex = g.exp(cl);
            let loss = g.mean(ex);
            (g, loss, t, w_id, b_id)
        };
        let table = array![[0.3, -0.2], [0.1, 0.4], [-0.5, 0.25]];
        let w = array![[0.7, -0.3], [0.2, 0.9], [-0.4, 0.1]];
        let bias = array![[0.05, -0.1]];

        let (mut g, loss, t_id, w_id, b_id) = build(&table, &w, &bias);
        g.backward(loss).unwrap();
        let grads = [g.grad(t_id), g.grad(w_id), g.grad(b_id)];

        let h = 1e-6;
        let params: [&Array2<f64>; 3] = [&table, &w, &bias];
        for (pi, p) in params.iter().enumerate() {
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    let mut plus = (*p).clone();
                    plus[[i, j]] += h;
                    let mut minus = (*p).clone();
                    minus[[i, j]] -= h;
                    let args_plus: [&Array2<f64>; 3] =
                        std::array::from_fn(|k| if k == pi { &plus } else { params[k] });
                    let args_minus: [&Array2<f64>; 3] =
                        std::array::from_fn(|k| if k == pi { &minus } else { params[k] });
                    let (gp, lp, ..) = build(args_plus[0], args_plus[1], args_plus[2]);
                    let (gm, lm, ..) = build(args_minus[0], args_minus[1], args_minus[2]);
                    let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
                    let an = grads[pi][[i, j]];
                    assert!(
                        (fd - an).abs() <= 1e-7 * fd.abs().max(an.abs()).max(1.0),
                        "param {pi} [{i},{j}]: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // loss = mean(x*x + x) -> d/dx = 2x + 1.
        let mut g = Graph::new();
        let x = g.leaf(array![[1.5, -2.0]]);
        let sq = g.mul(x, x);
        let s = g.add(sq, x);
        let loss = g.mean(s);
        g.backward(loss).unwrap();
        let gx = g.grad(x);
        assert_abs_diff_eq!(gx[[0, 0]], (2.0 * 1.5 + 1.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gx[[0, 1]], (2.0 * -2.0 + 1.0) / 2.0, epsilon = 1e-12);
    }
}
