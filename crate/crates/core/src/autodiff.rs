//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients into every node that (transitively) depends on a parameter.
//!
//! Neighborhood tensors are stored flattened: a per-point, per-neighbor tensor of
//! shape `n × k × C` is an `(n·k) × C` matrix whose row `i·k + j` belongs to
//! neighbor `j` of point `i`.

use std::rc::Rc;

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (r×k) · b (k×c)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
    let (r, k, c) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(r, c, out)
}

/// `dy (r×c) · bᵀ` where `b` is `k×c`. Transposing first keeps the inner loop an axpy.
fn matmul_bt(dy: &Tensor, b: &Tensor) -> Tensor {
    let (k, c) = b.shape();
    let mut bt = vec![0.0; c * k];
    for p in 0..k {
        for j in 0..c {
            bt[j * k + p] = b.data[p * c + j];
        }
    }
    matmul(dy, &Tensor::new(c, k, bt))
}

/// `aᵀ · dy` where `a` is `r×k`, `dy` is `r×c`.
fn matmul_at(a: &Tensor, dy: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows, a.cols, dy.cols);
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let drow = &dy.data[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &d) in orow.iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
    Tensor::new(k, c, out)
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Fixed sparse row mixing: output row `r` is `Σ_f weight[r·fan_in + f] · input[index[r·fan_in + f]]`.
#[derive(Debug, Clone)]
pub struct RowMix {
    pub fan_in: usize,
    pub index: Rc<Vec<usize>>,
    /// `None` means all weights are one.
    pub weight: Option<Rc<Vec<f64>>>,
}

impl RowMix {
    pub fn gather(index: Vec<usize>) -> Self {
        Self { fan_in: 1, index: Rc::new(index), weight: None }
    }

    /// Sums consecutive groups of `group` rows.
    pub fn group_sum(out_rows: usize, group: usize) -> Self {
        Self { fan_in: group, index: Rc::new((0..out_rows * group).collect()), weight: None }
    }

    pub fn weighted(fan_in: usize, index: Vec<usize>, weight: Vec<f64>) -> Self {
        assert_eq!(index.len(), weight.len());
        Self { fan_in, index: Rc::new(index), weight: Some(Rc::new(weight)) }
    }

    pub fn out_rows(&self) -> usize {
        self.index.len() / self.fan_in
    }

    fn w(&self, i: usize) -> f64 {
        self.weight.as_ref().map_or(1.0, |w| w[i])
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Mix(Var, RowMix),
    GroupSoftmax(Var, usize),
    ConcatCols(Var, Var),
    SumCols(Var),
    BroadcastCols(Var),
    SumAll(Var),
    /// Scalar function of `src` with a precomputed local gradient.
    Custom(Var, Rc<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value in {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf; gradients are kept after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign of every rectifier input on the tape, in recording order. Two evaluations of
    /// the same program with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data.iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Gradient of the last backward root with respect to `v`, if `v` is a parameter.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a (r×c) + bias (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows, 1);
        assert_eq!(av.cols, bv.cols);
        let mut value = av.clone();
        for row in value.data.chunks_exact_mut(bv.cols) {
            for (x, b) in row.iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Tensor::new(av.rows, av.cols, av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.rows, av.cols, av.data.iter().map(|x| x * s).collect());
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.rows, av.cols, av.data.iter().map(|&x| x.max(0.0)).collect());
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.rows, av.cols, av.data.iter().map(|&x| sigmoid(x)).collect());
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn mix(&mut self, a: Var, mix: RowMix) -> Var {
        let av = self.value(a);
        let c = av.cols;
        let out_rows = mix.out_rows();
        let mut out = vec![0.0; out_rows * c];
        for r in 0..out_rows {
            let orow = &mut out[r * c..(r + 1) * c];
            for f in 0..mix.fan_in {
                let slot = r * mix.fan_in + f;
                let src = mix.index[slot];
                let w = mix.w(slot);
                for (o, &x) in orow.iter_mut().zip(av.row(src)) {
                    *o += w * x;
                }
            }
        }
        let value = Tensor::new(out_rows, c, out);
        let ng = self.ng(a);
        self.push(value, Op::Mix(a, mix), ng)
    }

    /// Softmax over each consecutive group of `group` rows, independently per column.
    pub fn group_softmax(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows % group, 0, "rows not divisible by group size");
        let c = av.cols;
        let mut value = av.clone();
        for g in value.data.chunks_exact_mut(group * c) {
            for col in 0..c {
                let max = (0..group).map(|j| g[j * c + col]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..group {
                    let e = (g[j * c + col] - max).exp();
                    g[j * c + col] = e;
                    z += e;
                }
                for j in 0..group {
                    g[j * c + col] /= z;
                }
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::GroupSoftmax(a, group), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat row mismatch");
        let c = av.cols + bv.cols;
        let mut out = Vec::with_capacity(av.rows * c);
        for r in 0..av.rows {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let value = Tensor::new(av.rows, c, out);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a, b), ng)
    }

    /// `r×c → r×1` row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.rows, 1, (0..av.rows).map(|r| av.row(r).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// `r×1 → r×cols` by repeating the column.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols, 1);
        let value = Tensor::new(av.rows, cols, av.data.iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect());
        let ng = self.ng(a);
        self.push(value, Op::BroadcastCols(a), ng)
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::new(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    /// A scalar `f(src)` whose value and gradient `df/dsrc` were computed outside the tape.
    pub fn custom_scalar(&mut self, src: Var, value: f64, local_grad: Tensor) -> Var {
        assert_eq!(local_grad.shape(), self.value(src).shape());
        let ng = self.ng(src);
        self.push(Tensor::new(1, 1, vec![value]), Op::Custom(src, Rc::new(local_grad)), ng)
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates from the scalar `root`. Afterwards [`Graph::grad`] returns
    /// gradients for parameter leaves.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        Self::accumulate(&mut grads, *a, matmul_bt(&g, self.value(*b)));
                    }
                    if ng(*b) {
                        Self::accumulate(&mut grads, *b, matmul_at(self.value(*a), &g));
                    }
                }
                Op::AddRow(a, bias) => {
                    if ng(*bias) {
                        let mut gb = Tensor::zeros(1, g.cols);
                        for row in g.data.chunks_exact(g.cols) {
                            for (s, x) in gb.data.iter_mut().zip(row) {
                                *s += x;
                            }
                        }
                        Self::accumulate(&mut grads, *bias, gb);
                    }
                    if ng(*a) {
                        Self::accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if ng(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if ng(*b) {
                        Self::accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*b) {
                        let neg = Tensor::new(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                        Self::accumulate(&mut grads, *b, neg);
                    }
                    if ng(*a) {
                        Self::accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if ng(*a) {
                        let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                        Self::accumulate(&mut grads, *a, Tensor::new(g.rows, g.cols, d));
                    }
                    if ng(*b) {
                        let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                        Self::accumulate(&mut grads, *b, Tensor::new(g.rows, g.cols, d));
                    }
                }
                Op::Scale(a, s) => {
                    let d = g.data.iter().map(|x| x * s).collect();
                    Self::accumulate(&mut grads, *a, Tensor::new(g.rows, g.cols, d));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let d = g.data.iter().zip(&av.data).map(|(&x, &inp)| if inp > 0.0 { x } else { 0.0 }).collect();
                    Self::accumulate(&mut grads, *a, Tensor::new(g.rows, g.cols, d));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g.data.iter().zip(&y.data).map(|(&x, &s)| x * s * (1.0 - s)).collect();
                    Self::accumulate(&mut grads, *a, Tensor::new(g.rows, g.cols, d));
                }
                Op::Mix(a, mix) => {
                    let src = self.value(*a);
                    let c = src.cols;
                    let mut d = Tensor::zeros(src.rows, c);
                    for r in 0..mix.out_rows() {
                        let grow = &g.data[r * c..(r + 1) * c];
                        for f in 0..mix.fan_in {
                            let slot = r * mix.fan_in + f;
                            let w = mix.w(slot);
                            let dst = mix.index[slot];
                            for (o, &x) in d.data[dst * c..(dst + 1) * c].iter_mut().zip(grow) {
                                *o += w * x;
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *a, d);
                }
                Op::GroupSoftmax(a, group) => {
                    let y = &node.value;
                    let c = y.cols;
                    let mut d = g.clone();
                    for (gy, gd) in y.data.chunks_exact(group * c).zip(d.data.chunks_exact_mut(group * c)) {
                        for col in 0..c {
                            let dot: f64 = (0..*group).map(|j| gy[j * c + col] * gd[j * c + col]).sum();
                            for j in 0..*group {
                                let idx = j * c + col;
                                gd[idx] = gy[idx] * (gd[idx] - dot);
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols;
                    let cb = self.value(*b).cols;
                    if ng(*a) {
                        let d = (0..g.rows).flat_map(|r| g.row(r)[..ca].to_vec()).collect();
                        Self::accumulate(&mut grads, *a, Tensor::new(g.rows, ca, d));
                    }
                    if ng(*b) {
                        let d = (0..g.rows).flat_map(|r| g.row(r)[ca..].to_vec()).collect();
                        Self::accumulate(&mut grads, *b, Tensor::new(g.rows, cb, d));
                    }
                }
                Op::SumCols(a) => {
                    let c = self.value(*a).cols;
                    let d = g.data.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect();
                    Self::accumulate(&mut grads, *a, Tensor::new(g.rows, c, d));
                }
                Op::BroadcastCols(a) => {
                    let d = (0..g.rows).map(|r| g.row(r).iter().sum()).collect();
                    Self::accumulate(&mut grads, *a, Tensor::new(g.rows, 1, d));
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    Self::accumulate(&mut grads, *a, Tensor::filled(r, c, g.data[0]));
                }
                Op::Custom(a, local) => {
                    let s = g.data[0];
                    let d = local.data.iter().map(|x| x * s).collect();
                    Self::accumulate(&mut grads, *a, Tensor::new(local.rows, local.cols, d));
                }
            }
        }
        self.grads = grads;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
