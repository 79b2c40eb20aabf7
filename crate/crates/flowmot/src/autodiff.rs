//! Minimal reverse-mode automatic differentiation on batched matrices.
//!
//! A [`Graph`] is a write-once tape of `Array2<f64>` values. The flow and the
//! context encoder build one graph per training batch, call
//! [`Graph::backward`] on the scalar loss node, and read the gradients of
//! their parameter leaves. The op set is exactly what those models need;
//! nothing here is generic over dtype or rank.

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position of this node on the tape; indexes the gradient vector
    /// returned by [`Graph::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `(B, n) x (n, m) -> (B, m)`; the right operand is typically a weight.
    MatMul(Var, Var),
    /// Add a `(1, m)` row vector to every row of a `(B, m)` matrix.
    AddRow(Var, Var),
    /// Multiply every row of a `(B, m)` matrix by a `(1, m)` row vector.
    MulRow(Var, Var),
    /// Elementwise product with a constant matrix (autoregressive masks,
    /// per-step validity masks).
    MulConst(Var, Array2<f64>),
    /// Column-wise concatenation.
    Concat(Var, Var),
    /// Columns `[start, end)` of the input.
    SliceCols(Var, usize, usize),
    ReverseCols(Var),
    /// Row lookup into a table, one row per index; backward scatter-adds.
    Gather(Var, Vec<usize>),
    /// `(B, m) -> (B, 1)` sum across columns.
    SumCols(Var),
    /// `(B, m) -> (1, 1)` mean over all entries.
    MeanAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Write-once computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Inputs and parameters are both leaves; the caller
    /// remembers which vars correspond to parameters.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[w.0].value);
        self.push(v, Op::MatMul(a, w))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let v = &self.nodes[a.0].value * &mask;
        self.push(v, Op::MulConst(a, mask))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let v = concatenate![
            Axis(1),
            self.nodes[a.0].value.view(),
            self.nodes[b.0].value.view()
        ];
        self.push(v, Op::Concat(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn reverse_cols(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.slice(ndarray::s![.., ..;-1]).to_owned();
        self.push(v, Op::ReverseCols(a))
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = &self.nodes[table.0].value;
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        self.push(v, Op::Gather(table, ids))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum_axis(Axis(1));
        let v = s.insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap_or(0.0);
        let v = Array2::from_elem((1, 1), m);
        self.push(v, Op::MeanAll(a))
    }

    /// Runs reverse-mode accumulation from `loss` (a `1x1` node) and returns
    /// one gradient per node, in node order.
    pub fn backward(&self, loss: Var) -> Vec<Array2<f64>> {
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        debug_assert_eq!(self.nodes[loss.0].value.dim(), (1, 1));
        grads[loss.0][[0, 0]] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = grads[i].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::Sub(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] -= &g;
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::Neg(a) => grads[a.0] -= &g,
                Op::Exp(a) => {
                    let ga = &g * &self.nodes[i].value;
                    grads[a.0] += &ga;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &y.mapv(|t| 1.0 - t * t);
                    grads[a.0] += &ga;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &y.mapv(|s| s * (1.0 - s));
                    grads[a.0] += &ga;
                }
                Op::Square(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(|x| 2.0 * x);
                    grads[a.0] += &ga;
                }
                Op::Scale(a, c) => {
                    let ga = g.mapv(|x| c * x);
                    grads[a.0] += &ga;
                }
                Op::AddScalar(a) => grads[a.0] += &g,
                Op::MatMul(a, w) => {
                    let ga = g.dot(&self.nodes[w.0].value.t());
                    let gw = self.nodes[a.0].value.t().dot(&g);
                    grads[a.0] += &ga;
                    grads[w.0] += &gw;
                }
                Op::AddRow(a, row) => {
                    grads[a.0] += &g;
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[row.0] += &gr;
                }
                Op::MulRow(a, row) => {
                    let ga = &g * &self.nodes[row.0].value;
                    let gr = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    grads[a.0] += &ga;
                    grads[row.0] += &gr;
                }
                Op::MulConst(a, mask) => {
                    let ga = &g * mask;
                    grads[a.0] += &ga;
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.ncols();
                    grads[a.0] += &g.slice(ndarray::s![.., ..na]);
                    grads[b.0] += &g.slice(ndarray::s![.., na..]);
                }
                Op::SliceCols(a, start, end) => {
                    grads[a.0]
                        .slice_mut(ndarray::s![.., *start..*end])
                        .zip_mut_with(&g, |dst, src| *dst += src);
                }
                Op::ReverseCols(a) => {
                    let gr = g.slice(ndarray::s![.., ..;-1]).to_owned();
                    grads[a.0] += &gr;
                }
                Op::Gather(table, ids) => {
                    for (r, &id) in ids.iter().enumerate() {
                        let gr = g.row(r).to_owned();
                        let mut dst = grads[table.0].row_mut(id);
                        dst += &gr;
                    }
                }
                Op::SumCols(a) => {
                    let cols = self.nodes[a.0].value.ncols();
                    for c in 0..cols {
                        let mut col = grads[a.0].column_mut(c);
                        col += &g.column(0);
                    }
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let ga = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]] / n);
                    grads[a.0] += &ga;
                }
            }
        }
        grads
    }
}
