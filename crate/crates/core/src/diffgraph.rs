//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A define-by-run Wengert tape: forward ops append nodes, `backward` replays
//! the tape in reverse and accumulates vector-Jacobian products. The op set is
//! just what the unrolled recurrent networks and the adversarial loss need;
//! no fusion, no higher-order derivatives, no sparsity.
//!
//! The tape is rebuilt on every training step. Unrolled lengths are small
//! (tens of steps, layers of width at most 32), so rebuild cost is noise.

use std::collections::HashMap;
use std::sync::Arc;

use crate::matrix::Matrix;

/// Index of a node on the tape. Parents always precede children.
pub type NodeId = usize;

/// Elementwise scalar function with its derivative, for `map` nodes.
pub type UnaryFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Elementwise two-argument scalar function, for `pair_map` nodes.
pub type PairFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

enum Op {
    Leaf { param: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Matrix plus a column bias broadcast across columns.
    AddBias(NodeId, NodeId),
    /// Hadamard product of same-shape matrices.
    Mul(NodeId, NodeId),
    /// 1x1 node times a matrix node.
    ScalarMul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Identity(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    ConcatRows(Vec<NodeId>),
    /// Elementwise f(x) with caller-supplied derivative.
    Map { x: NodeId, df: UnaryFn },
    /// Elementwise f(x, v) with caller-supplied partials.
    PairMap {
        x: NodeId,
        v: NodeId,
        df_dx: PairFn,
        df_dv: PairFn,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of a scalar loss with respect to the tape's parameter leaves.
pub struct Gradients {
    by_node: HashMap<NodeId, Matrix>,
}

impl Gradients {
    /// Gradient for a parameter leaf. Zero matrix if no path to the loss.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.by_node.get(&id)
    }
}

/// Numerically safe logistic function; the clamp keeps `exp` finite.
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-500.0, 500.0);
    1.0 / (1.0 + (-x).exp())
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    /// Parameter leaves registered so far, in registration order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        id
    }

    /// Constant input; receives no gradient entry in the result map.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf { param: false })
    }

    /// Parameter leaf; `backward` reports its gradient.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        let id = self.push(value, Op::Leaf { param: true });
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    /// `m + bias` with `bias` an (r x 1) column broadcast over the columns of `m`.
    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> NodeId {
        let mat = &self.nodes[m].value;
        let b = &self.nodes[bias].value;
        assert_eq!(b.cols(), 1, "bias must be a column vector");
        assert_eq!(
            mat.rows(),
            b.rows(),
            "bias rows {} do not match matrix rows {}",
            b.rows(),
            mat.rows()
        );
        let value = Matrix::from_fn(mat.rows(), mat.cols(), |i, j| mat.get(i, j) + b.get(i, 0));
        self.push(value, Op::AddBias(m, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Scalar (1x1) node times a matrix node.
    pub fn scalar_mul(&mut self, s: NodeId, m: NodeId) -> NodeId {
        let sv = self.nodes[s].value.as_scalar();
        let value = self.nodes[m].value.map(|x| sv * x);
        self.push(value, Op::ScalarMul(s, m))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.map(|x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    /// Add a constant to every entry.
    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.map(|x| x + c);
        self.push(value, Op::Shift(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn identity(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.clone();
        self.push(value, Op::Identity(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.nodes[a].value.sum());
        self.push(value, Op::Sum(a))
    }

    /// Stack nodes vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.nodes[parts[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = &self.nodes[p].value;
            assert_eq!(
                m.cols(),
                cols,
                "concat_rows column mismatch: {} vs {}",
                m.cols(),
                cols
            );
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Elementwise `f(x)` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: NodeId, f: &UnaryFn, df: &UnaryFn) -> NodeId {
        let value = self.nodes[x].value.map(|v| f(v));
        self.push(
            value,
            Op::Map {
                x,
                df: Arc::clone(df),
            },
        )
    }

    /// Elementwise `f(x, v)` over same-shape nodes, with caller-supplied partials.
    pub fn pair_map(
        &mut self,
        x: NodeId,
        v: NodeId,
        f: &PairFn,
        df_dx: &PairFn,
        df_dv: &PairFn,
    ) -> NodeId {
        let value = self.nodes[x]
            .value
            .zip_map(&self.nodes[v].value, |a, b| f(a, b));
        self.push(
            value,
            Op::PairMap {
                x,
                v,
                df_dx: Arc::clone(df_dx),
                df_dv: Arc::clone(df_dv),
            },
        )
    }

    /// Reverse sweep from a scalar `loss` node. Returns gradients for every
    /// parameter leaf; all other node gradients are discarded.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert!(
            self.nodes[loss].value.rows() == 1 && self.nodes[loss].value.cols() == 1,
            "backward requires a scalar loss node, got {}x{}",
            self.nodes[loss].value.rows(),
            self.nodes[loss].value.cols()
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Matrix::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if *param {
                        grads[id] = Some(g);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&self.nodes[*b].value);
                    let db = self.nodes[*a].value.matmul_tn(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::AddBias(m, bias) => {
                    accumulate(&mut grads, *bias, g.row_sums());
                    accumulate(&mut grads, *m, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(&self.nodes[*b].value, |gv, bv| gv * bv);
                    let db = g.zip_map(&self.nodes[*a].value, |gv, av| gv * av);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::ScalarMul(s, m) => {
                    let ds = Matrix::scalar(g.frobenius_dot(&self.nodes[*m].value));
                    let sv = self.nodes[*s].value.as_scalar();
                    accumulate(&mut grads, *s, ds);
                    accumulate(&mut grads, *m, g.map(|x| sv * x));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| c * x));
                }
                Op::Shift(a, _) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let d = g.zip_map(&self.nodes[id].value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&self.nodes[id].value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Identity(a) => accumulate(&mut grads, *a, g),
                Op::Square(a) => {
                    let d = g.zip_map(&self.nodes[*a].value, |gv, x| gv * 2.0 * x);
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let m = &self.nodes[*a].value;
                    let gv = g.as_scalar() / m.len() as f64;
                    accumulate(&mut grads, *a, Matrix::filled(m.rows(), m.cols(), gv));
                }
                Op::Sum(a) => {
                    let m = &self.nodes[*a].value;
                    let gv = g.as_scalar();
                    accumulate(&mut grads, *a, Matrix::filled(m.rows(), m.cols(), gv));
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.nodes[p].value.rows();
                        let block = Matrix::from_fn(r, cols, |i, j| g.get(offset + i, j));
                        accumulate(&mut grads, p, block);
                        offset += r;
                    }
                }
                Op::Map { x, df } => {
                    let d = g.zip_map(&self.nodes[*x].value, |gv, xv| gv * df(xv));
                    accumulate(&mut grads, *x, d);
                }
                Op::PairMap { x, v, df_dx, df_dv } => {
                    let xs = &self.nodes[*x].value;
                    let vs = &self.nodes[*v].value;
                    let dx = Matrix::from_fn(xs.rows(), xs.cols(), |i, j| {
                        g.get(i, j) * df_dx(xs.get(i, j), vs.get(i, j))
                    });
                    let dv = Matrix::from_fn(xs.rows(), xs.cols(), |i, j| {
                        g.get(i, j) * df_dv(xs.get(i, j), vs.get(i, j))
                    });
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *v, dv);
                }
            }
        }

        let mut by_node = HashMap::new();
        for &p in &self.params {
            let g = grads[p]
                .take()
                .unwrap_or_else(|| Matrix::zeros(self.nodes[p].value.rows(), self.nodes[p].value.cols()));
            by_node.insert(p, g);
        }
        Gradients { by_node }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, contribution: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_scaled(&contribution, 1.0),
        slot => *slot = Some(contribution),
    }
}

/// Max relative error between analytic gradients and central finite
/// differences, over all parameter entries.
///
/// `build` must construct a scalar loss from the registered parameter nodes;
/// it is re-invoked on perturbed copies for the difference quotients.
pub fn grad_check<F>(build: F, params: &[Matrix], h: f64) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    let eval = |values: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).as_scalar()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|m| tape.param(m.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss);

    let mut worst = 0.0_f64;
    let mut perturbed: Vec<Matrix> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("registered parameter");
        for idx in 0..params[pi].len() {
            let base = params[pi].as_slice()[idx];
            perturbed[pi].as_mut_slice()[idx] = base + h;
            let up = eval(&perturbed);
            perturbed[pi].as_mut_slice()[idx] = base - h;
            let down = eval(&perturbed);
            perturbed[pi].as_mut_slice()[idx] = base;

            let fd = (up - down) / (2.0 * h);
            let an = analytic.as_slice()[idx];
            let err = (an - fd).abs() / (an.abs() + fd.abs() + f64::EPSILON);
            worst = worst.max(err);
        }
    }
    worst
}
