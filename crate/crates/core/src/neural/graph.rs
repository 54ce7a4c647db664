//! Recorded-tape reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value of one computation. Operations
//! append nodes in evaluation order, so a reverse sweep over the node list is
//! a valid topological order for backpropagation. Nodes created only from
//! constants never require a gradient and are skipped during the sweep.

use super::tensor::{gemm, Tensor};
use super::NeuralError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DTensor(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Tanh,
    Sin,
    Cos,
    Atan,
    Tan,
    Square,
    Abs,
    Softplus,
}

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Atan => x.atan(),
            Unary::Tan => x.tan(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Softplus => softplus(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::Tan => 1.0 + y * y,
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    MaxConst(usize, f64),
    MinConst(usize, f64),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Override(usize, Vec<bool>),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Cols(usize, usize),
    Concat(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Single-threaded differentiation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> DTensor {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> DTensor {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient but is not a network parameter
    /// (e.g. a latent vector under search).
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> DTensor {
        self.leaf(value, requires_grad)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> DTensor {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> DTensor {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        DTensor(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, x: DTensor) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn requires_grad(&self, x: DTensor) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, x: DTensor) -> Option<&Tensor> {
        self.nodes[x.0].grad.as_ref()
    }

    fn same_shape(&self, a: DTensor, b: DTensor, what: &str) -> Result<(), NeuralError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NeuralError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `a · b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: DTensor, b: DTensor) -> Result<DTensor, NeuralError> {
        let v = self.value(a).matmul(self.value(b))?;
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMul(a.0, b.0), r))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`; the layout of an affine layer with
    /// an `out x in` weight matrix.
    pub fn matmul_nt(&mut self, a: DTensor, b: DTensor) -> Result<DTensor, NeuralError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMulNt(a.0, b.0), r))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: DTensor, b: DTensor) -> Result<DTensor, NeuralError> {
        let xv = self.value(x);
        let bv = self.value(b);
        let n = xv.cols();
        if bv.len() != n {
            return Err(NeuralError::Shape(format!(
                "add_row: row length {n}, bias length {}",
                bv.len()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let r = self.req(&[x.0, b.0]);
        Ok(self.push(out, Op::AddRow(x.0, b.0), r))
    }

    pub fn add(&mut self, a: DTensor, b: DTensor) -> Result<DTensor, NeuralError> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(v, Op::Add(a.0, b.0), r))
    }

    pub fn sub(&mut self, a: DTensor, b: DTensor) -> Result<DTensor, NeuralError> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(v, Op::Sub(a.0, b.0), r))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: DTensor, b: DTensor) -> Result<DTensor, NeuralError> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(v, Op::Mul(a.0, b.0), r))
    }

    pub fn scale(&mut self, a: DTensor, c: f64) -> DTensor {
        let v = self.value(a).map(|x| x * c);
        let r = self.req(&[a.0]);
        self.push(v, Op::Scale(a.0, c), r)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: DTensor, c: f64) -> DTensor {
        let v = self.value(a).map(|x| x + c);
        let r = self.req(&[a.0]);
        self.push(v, Op::Offset(a.0), r)
    }

    fn unary(&mut self, a: DTensor, f: Unary) -> DTensor {
        let v = self.value(a).map(|x| f.eval(x));
        let r = self.req(&[a.0]);
        self.push(v, Op::Unary(a.0, f), r)
    }

    pub fn relu(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Relu)
    }

    pub fn tanh(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Tanh)
    }

    pub fn sin(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Cos)
    }

    pub fn atan(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Atan)
    }

    pub fn tan(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Tan)
    }

    pub fn square(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Square)
    }

    pub fn abs(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Abs)
    }

    /// `ln(1 + eˣ)`, the building block of logistic losses.
    pub fn softplus(&mut self, a: DTensor) -> DTensor {
        self.unary(a, Unary::Softplus)
    }

    /// `max(x, c)` elementwise.
    pub fn max_const(&mut self, a: DTensor, c: f64) -> DTensor {
        let v = self.value(a).map(|x| x.max(c));
        let r = self.req(&[a.0]);
        self.push(v, Op::MaxConst(a.0, c), r)
    }

    /// `min(x, c)` elementwise.
    pub fn min_const(&mut self, a: DTensor, c: f64) -> DTensor {
        let v = self.value(a).map(|x| x.min(c));
        let r = self.req(&[a.0]);
        self.push(v, Op::MinConst(a.0, c), r)
    }

    pub fn clamp(&mut self, a: DTensor, lo: f64, hi: f64) -> DTensor {
        let t = self.max_const(a, lo);
        self.min_const(t, hi)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: DTensor, b: DTensor) -> Result<DTensor, NeuralError> {
        self.same_shape(a, b, "maximum")?;
        let v = self.value(a).zip_map(self.value(b), f64::max);
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(v, Op::Maximum(a.0, b.0), r))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: DTensor, b: DTensor) -> Result<DTensor, NeuralError> {
        self.same_shape(a, b, "minimum")?;
        let v = self.value(a).zip_map(self.value(b), f64::min);
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(v, Op::Minimum(a.0, b.0), r))
    }

    /// Replaces masked elements by `value`; masked elements pass no gradient.
    pub fn override_where(
        &mut self,
        a: DTensor,
        mask: Vec<bool>,
        value: f64,
    ) -> Result<DTensor, NeuralError> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(NeuralError::Shape("override mask length".into()));
        }
        let mut v = av.clone();
        for (x, &m) in v.data_mut().iter_mut().zip(&mask) {
            if m {
                *x = value;
            }
        }
        let r = self.req(&[a.0]);
        Ok(self.push(v, Op::Override(a.0, mask), r))
    }

    pub fn sum(&mut self, a: DTensor) -> DTensor {
        let v = Tensor::scalar(self.value(a).sum());
        let r = self.req(&[a.0]);
        self.push(v, Op::Sum(a.0), r)
    }

    pub fn mean(&mut self, a: DTensor) -> DTensor {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let r = self.req(&[a.0]);
        self.push(v, Op::Mean(a.0), r)
    }

    /// Row sums: `[m,n] -> [m,1]`.
    pub fn sum_cols(&mut self, a: DTensor) -> DTensor {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let data = (0..m).map(|i| t.data()[i * n..(i + 1) * n].iter().sum()).collect();
        let v = Tensor::matrix(m, 1, data).expect("row sums");
        let r = self.req(&[a.0]);
        self.push(v, Op::SumCols(a.0), r)
    }

    /// Column slice `[:, start..start+len]`.
    pub fn cols(&mut self, a: DTensor, start: usize, len: usize) -> Result<DTensor, NeuralError> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return Err(NeuralError::Shape(format!(
                "column slice {start}..{} of width {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let v = Tensor::matrix(m, len, data)?;
        let r = self.req(&[a.0]);
        Ok(self.push(v, Op::Cols(a.0, start), r))
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[DTensor]) -> Result<DTensor, NeuralError> {
        let m = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| NeuralError::Shape("concat of nothing".into()))?;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if parts.iter().any(|p| self.value(*p).rows() != m) {
            return Err(NeuralError::Shape("concat row mismatch".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::matrix(m, total, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let r = self.req(&ids);
        Ok(self.push(v, Op::Concat(ids), r))
    }

    /// Reverse sweep from a scalar node. Gradients from any earlier sweep are
    /// discarded first.
    pub fn backward(&mut self, loss: DTensor) -> Result<(), NeuralError> {
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NeuralError::Contract(format!(
                "backward needs a scalar seed, got shape {seed_shape:?}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::filled(&seed_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = node.grad.as_ref() else {
                continue;
            };
            propagate(before, &node.op, &node.value, gy);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], j: usize, g: Tensor) {
    let node = &mut nodes[j];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => node.grad = Some(g),
    }
}

fn wants(nodes: &[Node], j: usize) -> bool {
    nodes[j].requires_grad
}

fn propagate(nodes: &mut [Node], op: &Op, y: &Tensor, gy: &Tensor) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let da = wants(nodes, a).then(|| {
                // dy [m,n] · bᵀ [n,k]
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, gy.data(), n, 1, bv.data(), 1, n, &mut out, 0.0);
                Tensor::new(av.shape().to_vec(), out).expect("grad shape")
            });
            let db = wants(nodes, b).then(|| {
                // aᵀ [k,m] · dy [m,n]
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, av.data(), 1, k, gy.data(), n, 1, &mut out, 0.0);
                Tensor::new(bv.shape().to_vec(), out).expect("grad shape")
            });
            if let Some(g) = da {
                accumulate(nodes, a, g);
            }
            if let Some(g) = db {
                accumulate(nodes, b, g);
            }
        }
        Op::MatMulNt(a, b) => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            let da = wants(nodes, a).then(|| {
                // dy [m,n] · b [n,k]
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, gy.data(), n, 1, bv.data(), k, 1, &mut out, 0.0);
                Tensor::new(av.shape().to_vec(), out).expect("grad shape")
            });
            let db = wants(nodes, b).then(|| {
                // dyᵀ [n,m] · a [m,k]
                let mut out = vec![0.0; n * k];
                gemm(n, m, k, gy.data(), 1, n, av.data(), k, 1, &mut out, 0.0);
                Tensor::new(bv.shape().to_vec(), out).expect("grad shape")
            });
            if let Some(g) = da {
                accumulate(nodes, a, g);
            }
            if let Some(g) = db {
                accumulate(nodes, b, g);
            }
        }
        Op::AddRow(x, b) => {
            let (x, b) = (*x, *b);
            if wants(nodes, b) {
                let n = gy.cols();
                let mut db = vec![0.0; n];
                for row in gy.data().chunks(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                let shape = nodes[b].value.shape().to_vec();
                accumulate(nodes, b, Tensor::new(shape, db).expect("grad shape"));
            }
            accumulate(nodes, x, gy.clone());
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, gy.clone());
            accumulate(nodes, *b, gy.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, gy.clone());
            if wants(nodes, *b) {
                accumulate(nodes, *b, gy.map(|g| -g));
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let da = wants(nodes, a).then(|| gy.zip_map(&nodes[b].value, |g, v| g * v));
            let db = wants(nodes, b).then(|| gy.zip_map(&nodes[a].value, |g, v| g * v));
            if let Some(g) = da {
                accumulate(nodes, a, g);
            }
            if let Some(g) = db {
                accumulate(nodes, b, g);
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, *a, gy.map(|g| g * c));
        }
        Op::Offset(a) => accumulate(nodes, *a, gy.clone()),
        Op::Unary(a, f) => {
            let x = &nodes[*a].value;
            let mut g = gy.clone();
            for ((gi, &xi), &yi) in g.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                *gi *= f.deriv(xi, yi);
            }
            accumulate(nodes, *a, g);
        }
        Op::MaxConst(a, c) => {
            let c = *c;
            let g = gy.zip_map(&nodes[*a].value, |g, x| if x > c { g } else { 0.0 });
            accumulate(nodes, *a, g);
        }
        Op::MinConst(a, c) => {
            let c = *c;
            let g = gy.zip_map(&nodes[*a].value, |g, x| if x < c { g } else { 0.0 });
            accumulate(nodes, *a, g);
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let (a, b) = (*a, *b);
            let is_max = matches!(op, Op::Maximum(..));
            let pick_a: Vec<bool> = nodes[a]
                .value
                .data()
                .iter()
                .zip(nodes[b].value.data())
                .map(|(&x, &z)| if is_max { x >= z } else { x <= z })
                .collect();
            let mut ga = gy.clone();
            let mut gb = gy.clone();
            for ((p, x), z) in pick_a.iter().zip(ga.data_mut()).zip(gb.data_mut()) {
                if *p {
                    *z = 0.0;
                } else {
                    *x = 0.0;
                }
            }
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::Override(a, mask) => {
            let mut g = gy.clone();
            for (gi, &m) in g.data_mut().iter_mut().zip(mask) {
                if m {
                    *gi = 0.0;
                }
            }
            accumulate(nodes, *a, g);
        }
        Op::Sum(a) => {
            let g = gy.data()[0];
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(nodes, *a, Tensor::filled(&shape, g));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len().max(1) as f64;
            let g = gy.data()[0] / n;
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(nodes, *a, Tensor::filled(&shape, g));
        }
        Op::SumCols(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            let n = nodes[*a].value.cols();
            let mut g = Tensor::zeros(&shape);
            for (row, &gi) in g.data_mut().chunks_mut(n).zip(gy.data()) {
                row.iter_mut().for_each(|x| *x = gi);
            }
            accumulate(nodes, *a, g);
        }
        Op::Cols(a, start) => {
            let shape = nodes[*a].value.shape().to_vec();
            let n = nodes[*a].value.cols();
            let w = gy.cols();
            let mut g = Tensor::zeros(&shape);
            for (row, grow) in g.data_mut().chunks_mut(n).zip(gy.data().chunks(w)) {
                row[*start..start + w].copy_from_slice(grow);
            }
            accumulate(nodes, *a, g);
        }
        Op::Concat(ids) => {
            let total = gy.cols();
            let mut offset = 0;
            for &id in ids {
                let w = nodes[id].value.cols();
                if wants(nodes, id) {
                    let shape = nodes[id].value.shape().to_vec();
                    let mut data = Vec::with_capacity(nodes[id].value.len());
                    for row in gy.data().chunks(total) {
                        data.extend_from_slice(&row[offset..offset + w]);
                    }
                    accumulate(nodes, id, Tensor::new(shape, data).expect("grad shape"));
                }
                offset += w;
            }
        }
    }
}
