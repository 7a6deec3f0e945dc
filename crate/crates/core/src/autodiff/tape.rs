use std::rc::Rc;

use super::matrix::{gemm_into, Matrix, Real};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Scale(Var, T),
    MulCol(Var, Var),
    ScaleBlocks { x: Var, g: Var, block: usize },
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Transpose(Var),
    Gather { x: Var, idx: Rc<[usize]>, block: usize },
    Scatter { x: Var, idx: Rc<[usize]>, block: usize },
    Dyadic(Var, Var),
    Sym(Var),
    Traceless(Var),
    ExpandIdentity(Var),
    BlockNorm { x: Var, block: usize },
    BlockDot { a: Var, b: Var, block: usize },
    BlockTrace(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    FrobNorm(Var),
    Trace(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eagerly evaluated computation record for reverse-mode differentiation.
///
/// Every operation computes its value immediately and appends a node whose
/// parents are earlier nodes, so the node order is a topological order.
/// Constants never receive adjoints; subgraphs that only depend on constants
/// are skipped during the backward sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of the trainable leaves after a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `var` is not a trainable leaf or does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        self.adjoints.get(var.0).and_then(|a| a.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix<T>> {
        self.adjoints.get_mut(var.0).and_then(|a| a.take())
    }
}

fn check_same(op: &'static str, a: &Matrix<impl Real>, b: &Matrix<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn zip_map<T: Real>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable input; its adjoint is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("add", va, vb)?;
        let out = zip_map(va, vb, |x, y| x + y);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("sub", va, vb)?;
        let out = zip_map(va, vb, |x, y| x - y);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("mul", va, vb)?;
        let out = zip_map(va, vb, |x, y| x * y);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// `x + 1 * bias` with a `1 x cols` bias row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(vb.data()) {
                    *o += b;
                }
            }
        }
        let g = self.grad_any(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm_into(va, false, vb, false, T::zero(), &mut out);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let g = self.grad_any(&[x]);
        self.push(out, Op::Scale(x, s), g)
    }

    /// Multiplies row `r` of `x` by `col[r]` (`col` is `rows x 1`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (vx, vc) = (self.value(x), self.value(col));
        if vc.cols() != 1 || vc.rows() != vx.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * {:?}", vx.shape(), vc.shape()),
            ));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        if c > 0 {
            for (row, &s) in out.data_mut().chunks_mut(c).zip(vc.data()) {
                for o in row {
                    *o *= s;
                }
            }
        }
        let g = self.grad_any(&[x, col]);
        Ok(self.push(out, Op::MulCol(x, col), g))
    }

    /// Per-item, per-channel gating of block-layout data.
    ///
    /// `x` is `(n * block) x c` (or `(n * block) x 1`, broadcast over channels),
    /// `g` is `n x c`. Row `k * block + q`, channel `c` of the result is
    /// `x[k * block + q, c] * g[k, c]`.
    pub fn scale_blocks(&mut self, x: Var, g: Var, block: usize) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(g));
        let n = vg.rows();
        let c = vg.cols();
        if vx.rows() != n * block || !(vx.cols() == c || vx.cols() == 1) {
            return Err(Error::shape(
                "scale_blocks",
                format!("x {:?}, gate {:?}, block {block}", vx.shape(), vg.shape()),
            ));
        }
        let broadcast = vx.cols() == 1 && c != 1;
        let mut out = Matrix::zeros(n * block, c);
        let od = out.data_mut();
        for k in 0..n {
            let grow = vg.row(k);
            for q in 0..block {
                let r = k * block + q;
                let orow = &mut od[r * c..(r + 1) * c];
                if broadcast {
                    let xv = vx.get(r, 0);
                    for (o, &gv) in orow.iter_mut().zip(grow) {
                        *o = xv * gv;
                    }
                } else {
                    for ((o, &xv), &gv) in orow.iter_mut().zip(vx.row(r)).zip(grow) {
                        *o = xv * gv;
                    }
                }
            }
        }
        let gr = self.grad_any(&[x, g]);
        Ok(self.push(out, Op::ScaleBlocks { x, g, block }, gr))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let g = self.grad_any(&[x]);
        self.push(out, Op::Silu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let g = self.grad_any(&[x]);
        self.push(out, Op::Sigmoid(x), g)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let g = self.grad_any(&[x]);
        self.push(out, Op::Softplus(x), g)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!("row count {} vs {rows}", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let pc = v.cols();
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + pc].copy_from_slice(v.row(r));
            }
            offset += pc;
        }
        let g = self.grad_any(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), g))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start > end || end > vx.cols() {
            return Err(Error::shape(
                "slice",
                format!("columns {start}..{end} of {:?}", vx.shape()),
            ));
        }
        let out = Matrix::from_fn(vx.rows(), end - start, |r, c| vx.get(r, start + c));
        let g = self.grad_any(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, g))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let g = self.grad_any(&[x]);
        self.push(out, Op::Transpose(x), g)
    }

    /// Copies block `idx[e]` of `x` into block `e` of the result.
    pub fn gather(&mut self, x: Var, idx: &Rc<[usize]>, block: usize) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.rows() / block.max(1);
        if block == 0 || vx.rows() % block != 0 || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("x {:?}, block {block}, {} indices", vx.shape(), idx.len()),
            ));
        }
        let c = vx.cols();
        let mut out = Matrix::zeros(idx.len() * block, c);
        let od = out.data_mut();
        for (e, &i) in idx.iter().enumerate() {
            let src = &vx.data()[i * block * c..(i + 1) * block * c];
            od[e * block * c..(e + 1) * block * c].copy_from_slice(src);
        }
        let g = self.grad_any(&[x]);
        Ok(self.push(
            out,
            Op::Gather {
                x,
                idx: Rc::clone(idx),
                block,
            },
            g,
        ))
    }

    /// Sums block `e` of `x` into block `idx[e]` of an `n_out`-block result.
    pub fn scatter_add(
        &mut self,
        x: Var,
        idx: &Rc<[usize]>,
        block: usize,
        n_out: usize,
    ) -> Result<Var> {
        let vx = self.value(x);
        if block == 0 || vx.rows() != idx.len() * block || idx.iter().any(|&i| i >= n_out) {
            return Err(Error::shape(
                "scatter_add",
                format!("x {:?}, block {block}, {} indices", vx.shape(), idx.len()),
            ));
        }
        let c = vx.cols();
        let mut out = Matrix::zeros(n_out * block, c);
        let od = out.data_mut();
        for (e, &i) in idx.iter().enumerate() {
            let src = &vx.data()[e * block * c..(e + 1) * block * c];
            for (o, &s) in od[i * block * c..(i + 1) * block * c].iter_mut().zip(src) {
                *o += s;
            }
        }
        let g = self.grad_any(&[x]);
        Ok(self.push(
            out,
            Op::Scatter {
                x,
                idx: Rc::clone(idx),
                block,
            },
            g,
        ))
    }

    /// Per-item, per-channel outer product of 3-blocks into 9-blocks.
    pub fn dyadic(&mut self, u: Var, w: Var) -> Result<Var> {
        let (vu, vw) = (self.value(u), self.value(w));
        check_same("dyadic", vu, vw)?;
        if vu.rows() % 3 != 0 {
            return Err(Error::shape("dyadic", format!("{:?} is not 3-blocked", vu.shape())));
        }
        let n = vu.rows() / 3;
        let c = vu.cols();
        let mut out = Matrix::zeros(9 * n, c);
        let od = out.data_mut();
        for k in 0..n {
            for a in 0..3 {
                let ur = vu.row(3 * k + a);
                for b in 0..3 {
                    let wr = vw.row(3 * k + b);
                    let r = 9 * k + 3 * a + b;
                    for ch in 0..c {
                        od[r * c + ch] = ur[ch] * wr[ch];
                    }
                }
            }
        }
        let g = self.grad_any(&[u, w]);
        Ok(self.push(out, Op::Dyadic(u, w), g))
    }

    fn check_nine(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).rows() % 9 != 0 {
            return Err(Error::shape(op, format!("{:?} is not 9-blocked", self.shape(x))));
        }
        Ok(())
    }

    /// `(A + A^T) / 2` for every 9-block.
    pub fn sym(&mut self, x: Var) -> Result<Var> {
        self.check_nine("sym", x)?;
        let out = sym_blocks(self.value(x));
        let g = self.grad_any(&[x]);
        Ok(self.push(out, Op::Sym(x), g))
    }

    /// `sym(A) - tr(A)/3 I` for every 9-block.
    pub fn traceless(&mut self, x: Var) -> Result<Var> {
        self.check_nine("traceless", x)?;
        let out = traceless_blocks(self.value(x));
        let g = self.grad_any(&[x]);
        Ok(self.push(out, Op::Traceless(x), g))
    }

    /// Maps `n x c` scalars to `9n x c` blocks `x * I`.
    pub fn expand_identity(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = vx.shape();
        let mut out = Matrix::zeros(9 * n, c);
        for k in 0..n {
            for d in [0, 4, 8] {
                for ch in 0..c {
                    out.set(9 * k + d, ch, vx.get(k, ch));
                }
            }
        }
        let g = self.grad_any(&[x]);
        self.push(out, Op::ExpandIdentity(x), g)
    }

    /// Euclidean norm of every block and channel. The gradient at a zero
    /// block is taken to be zero.
    pub fn block_norm(&mut self, x: Var, block: usize) -> Result<Var> {
        let vx = self.value(x);
        if block == 0 || vx.rows() % block != 0 {
            return Err(Error::shape("block_norm", format!("{:?}, block {block}", vx.shape())));
        }
        let n = vx.rows() / block;
        let c = vx.cols();
        let out = Matrix::from_fn(n, c, |k, ch| {
            (0..block)
                .map(|q| {
                    let v = vx.get(k * block + q, ch);
                    v * v
                })
                .sum::<T>()
                .sqrt()
        });
        let g = self.grad_any(&[x]);
        Ok(self.push(out, Op::BlockNorm { x, block }, g))
    }

    /// Inner product over the components of every block, per channel.
    pub fn block_dot(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("block_dot", va, vb)?;
        if block == 0 || va.rows() % block != 0 {
            return Err(Error::shape("block_dot", format!("{:?}, block {block}", va.shape())));
        }
        let n = va.rows() / block;
        let out = Matrix::from_fn(n, va.cols(), |k, ch| {
            (0..block)
                .map(|q| va.get(k * block + q, ch) * vb.get(k * block + q, ch))
                .sum()
        });
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::BlockDot { a, b, block }, g))
    }

    /// Trace of every 9-block.
    pub fn block_trace(&mut self, x: Var) -> Result<Var> {
        self.check_nine("block_trace", x)?;
        let vx = self.value(x);
        let out = Matrix::from_fn(vx.rows() / 9, vx.cols(), |k, ch| {
            vx.get(9 * k, ch) + vx.get(9 * k + 4, ch) + vx.get(9 * k + 8, ch)
        });
        let g = self.grad_any(&[x]);
        Ok(self.push(out, Op::BlockTrace(x), g))
    }

    /// Sum over rows (axis 0), giving `1 x cols`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Matrix::from_fn(1, vx.cols(), |_, c| (0..vx.rows()).map(|r| vx.get(r, c)).sum());
        let g = self.grad_any(&[x]);
        self.push(out, Op::SumRows(x), g)
    }

    /// Sum over columns (axis 1), giving `rows x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Matrix::from_fn(vx.rows(), 1, |r, _| vx.row(r).iter().copied().sum());
        let g = self.grad_any(&[x]);
        self.push(out, Op::SumCols(x), g)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let g = self.grad_any(&[x]);
        self.push(out, Op::SumAll(x), g)
    }

    /// Frobenius norm of the whole matrix (zero gradient at zero input).
    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        let g = self.grad_any(&[x]);
        self.push(Matrix::scalar(n), Op::FrobNorm(x), g)
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() != vx.cols() {
            return Err(Error::shape("trace", format!("{:?} is not square", vx.shape())));
        }
        let t = (0..vx.rows()).map(|i| vx.get(i, i)).sum();
        let g = self.grad_any(&[x]);
        Ok(self.push(Matrix::scalar(t), Op::Trace(x), g))
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut adj: Vec<Option<Matrix<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            self.propagate(&node.op, &node.value, &dy, &mut adj);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, op: &Op<T>, y: &Matrix<T>, dy: &Matrix<T>, adj: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! grad_of {
            ($v:expr) => {
                grad_buf(&self.nodes, adj, $v)
            };
        }

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    grad_of!(*a).add_assign(dy);
                }
                if wants(*b) {
                    grad_of!(*b).add_assign(dy);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    grad_of!(*a).add_assign(dy);
                }
                if wants(*b) {
                    let gb = grad_of!(*b);
                    for (g, &d) in gb.data_mut().iter_mut().zip(dy.data()) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let vb = val(*b);
                    let ga = grad_of!(*a);
                    for ((g, &d), &x) in ga.data_mut().iter_mut().zip(dy.data()).zip(vb.data()) {
                        *g += d * x;
                    }
                }
                if wants(*b) {
                    let va = val(*a);
                    let gb = grad_of!(*b);
                    for ((g, &d), &x) in gb.data_mut().iter_mut().zip(dy.data()).zip(va.data()) {
                        *g += d * x;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    grad_of!(*x).add_assign(dy);
                }
                if wants(*b) {
                    let gb = grad_of!(*b);
                    let c = dy.cols();
                    if c > 0 {
                        for row in dy.data().chunks(c) {
                            for (g, &d) in gb.data_mut().iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                if wants(*a) {
                    gemm_into(dy, false, val(*b), true, T::one(), grad_of!(*a));
                }
                if wants(*b) {
                    gemm_into(val(*a), true, dy, false, T::one(), grad_of!(*b));
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    let gx = grad_of!(*x);
                    for (g, &d) in gx.data_mut().iter_mut().zip(dy.data()) {
                        *g += d * *s;
                    }
                }
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (val(*x), val(*col));
                let c = vx.cols();
                if wants(*x) {
                    let gx = grad_of!(*x);
                    for r in 0..vx.rows() {
                        let s = vc.get(r, 0);
                        for ch in 0..c {
                            let i = r * c + ch;
                            gx.data_mut()[i] += dy.data()[i] * s;
                        }
                    }
                }
                if wants(*col) {
                    let gc = grad_of!(*col);
                    for r in 0..vx.rows() {
                        let acc: T = (0..c).map(|ch| dy.get(r, ch) * vx.get(r, ch)).sum();
                        gc.data_mut()[r] += acc;
                    }
                }
            }
            Op::ScaleBlocks { x, g, block } => {
                let (vx, vg) = (val(*x), val(*g));
                let (n, c) = vg.shape();
                let broadcast = vx.cols() == 1 && c != 1;
                if wants(*x) {
                    let gx = grad_of!(*x);
                    for k in 0..n {
                        for q in 0..*block {
                            let r = k * block + q;
                            if broadcast {
                                let acc: T = (0..c).map(|ch| dy.get(r, ch) * vg.get(k, ch)).sum();
                                gx.data_mut()[r] += acc;
                            } else {
                                for ch in 0..c {
                                    gx.data_mut()[r * c + ch] += dy.get(r, ch) * vg.get(k, ch);
                                }
                            }
                        }
                    }
                }
                if wants(*g) {
                    let gg = grad_of!(*g);
                    for k in 0..n {
                        for q in 0..*block {
                            let r = k * block + q;
                            for ch in 0..c {
                                let xv = if broadcast { vx.get(r, 0) } else { vx.get(r, ch) };
                                gg.data_mut()[k * c + ch] += dy.get(r, ch) * xv;
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let vx = val(*x);
                let gx = grad_of!(*x);
                for ((g, &d), &v) in gx.data_mut().iter_mut().zip(dy.data()).zip(vx.data()) {
                    let s = sigmoid(v);
                    *g += d * s * (T::one() + v * (T::one() - s));
                }
            }
            Op::Sigmoid(x) => {
                let gx = grad_of!(*x);
                for ((g, &d), &s) in gx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                    *g += d * s * (T::one() - s);
                }
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                let gx = grad_of!(*x);
                for ((g, &d), &v) in gx.data_mut().iter_mut().zip(dy.data()).zip(vx.data()) {
                    *g += d * sigmoid(v);
                }
            }
            Op::Concat(parts) => {
                let cols = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if wants(p) {
                        let gp = grad_of!(p);
                        for r in 0..dy.rows() {
                            let src = &dy.data()[r * cols + offset..r * cols + offset + pc];
                            for (g, &d) in gp.data_mut()[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Slice { x, start } => {
                let gx = grad_of!(*x);
                let xc = gx.cols();
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        gx.data_mut()[r * xc + start + c] += dy.get(r, c);
                    }
                }
            }
            Op::Transpose(x) => {
                let gx = grad_of!(*x);
                gx.add_assign(&dy.transpose());
            }
            Op::Gather { x, idx, block } => {
                let gx = grad_of!(*x);
                let w = block * dy.cols();
                for (e, &i) in idx.iter().enumerate() {
                    let src = &dy.data()[e * w..(e + 1) * w];
                    for (g, &d) in gx.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                        *g += d;
                    }
                }
            }
            Op::Scatter { x, idx, block } => {
                let gx = grad_of!(*x);
                let w = block * dy.cols();
                for (e, &i) in idx.iter().enumerate() {
                    let src = &dy.data()[i * w..(i + 1) * w];
                    for (g, &d) in gx.data_mut()[e * w..(e + 1) * w].iter_mut().zip(src) {
                        *g += d;
                    }
                }
            }
            Op::Dyadic(u, w) => {
                let (vu, vw) = (val(*u), val(*w));
                let n = vu.rows() / 3;
                let c = vu.cols();
                if wants(*u) {
                    let gu = grad_of!(*u);
                    for k in 0..n {
                        for a in 0..3 {
                            for b in 0..3 {
                                let r = 9 * k + 3 * a + b;
                                for ch in 0..c {
                                    gu.data_mut()[(3 * k + a) * c + ch] +=
                                        dy.get(r, ch) * vw.get(3 * k + b, ch);
                                }
                            }
                        }
                    }
                }
                if wants(*w) {
                    let gw = grad_of!(*w);
                    for k in 0..n {
                        for a in 0..3 {
                            for b in 0..3 {
                                let r = 9 * k + 3 * a + b;
                                for ch in 0..c {
                                    gw.data_mut()[(3 * k + b) * c + ch] +=
                                        dy.get(r, ch) * vu.get(3 * k + a, ch);
                                }
                            }
                        }
                    }
                }
            }
            // Both projections are self-adjoint.
            Op::Sym(x) => grad_of!(*x).add_assign(&sym_blocks(dy)),
            Op::Traceless(x) => grad_of!(*x).add_assign(&traceless_blocks(dy)),
            Op::ExpandIdentity(x) => {
                let gx = grad_of!(*x);
                let c = dy.cols();
                for k in 0..gx.rows() {
                    for ch in 0..c {
                        gx.data_mut()[k * c + ch] +=
                            dy.get(9 * k, ch) + dy.get(9 * k + 4, ch) + dy.get(9 * k + 8, ch);
                    }
                }
            }
            Op::BlockNorm { x, block } => {
                let vx = val(*x);
                let gx = grad_of!(*x);
                let c = vx.cols();
                for k in 0..y.rows() {
                    for ch in 0..c {
                        let norm = y.get(k, ch);
                        if norm > T::zero() {
                            let s = dy.get(k, ch) / norm;
                            for q in 0..*block {
                                let r = k * block + q;
                                gx.data_mut()[r * c + ch] += s * vx.get(r, ch);
                            }
                        }
                    }
                }
            }
            Op::BlockDot { a, b, block } => {
                let (va, vb) = (val(*a), val(*b));
                let c = va.cols();
                for (target, other) in [(*a, vb), (*b, va)] {
                    if !wants(target) {
                        continue;
                    }
                    let gt = grad_of!(target);
                    for k in 0..dy.rows() {
                        for q in 0..*block {
                            let r = k * block + q;
                            for ch in 0..c {
                                gt.data_mut()[r * c + ch] += dy.get(k, ch) * other.get(r, ch);
                            }
                        }
                    }
                }
            }
            Op::BlockTrace(x) => {
                let gx = grad_of!(*x);
                let c = dy.cols();
                for k in 0..dy.rows() {
                    for d in [0, 4, 8] {
                        for ch in 0..c {
                            gx.data_mut()[(9 * k + d) * c + ch] += dy.get(k, ch);
                        }
                    }
                }
            }
            Op::SumRows(x) => {
                let gx = grad_of!(*x);
                let c = gx.cols();
                if c > 0 {
                    for row in gx.data_mut().chunks_mut(c) {
                        for (g, &d) in row.iter_mut().zip(dy.data()) {
                            *g += d;
                        }
                    }
                }
            }
            Op::SumCols(x) => {
                let gx = grad_of!(*x);
                let c = gx.cols();
                if c > 0 {
                    for (row, &d) in gx.data_mut().chunks_mut(c).zip(dy.data()) {
                        for g in row {
                            *g += d;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let d = dy.get(0, 0);
                for g in grad_of!(*x).data_mut() {
                    *g += d;
                }
            }
            Op::FrobNorm(x) => {
                let norm = y.get(0, 0);
                if norm > T::zero() {
                    let s = dy.get(0, 0) / norm;
                    let vx = val(*x);
                    for (g, &v) in grad_of!(*x).data_mut().iter_mut().zip(vx.data()) {
                        *g += s * v;
                    }
                }
            }
            Op::Trace(x) => {
                let gx = grad_of!(*x);
                let d = dy.get(0, 0);
                for i in 0..gx.rows() {
                    let v = gx.get(i, i);
                    gx.set(i, i, v + d);
                }
            }
        }
    }
}

fn grad_buf<'a, T: Real>(
    nodes: &[Node<T>],
    adj: &'a mut [Option<Matrix<T>>],
    v: Var,
) -> &'a mut Matrix<T> {
    let (r, c) = nodes[v.0].value.shape();
    adj[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
}

pub(crate) fn sym_blocks<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let half = T::c(0.5);
    let c = x.cols();
    let mut out = x.clone();
    for k in 0..x.rows() / 9 {
        for a in 0..3 {
            for b in (a + 1)..3 {
                for ch in 0..c {
                    let s = half * (x.get(9 * k + 3 * a + b, ch) + x.get(9 * k + 3 * b + a, ch));
                    out.set(9 * k + 3 * a + b, ch, s);
                    out.set(9 * k + 3 * b + a, ch, s);
                }
            }
        }
    }
    out
}

pub(crate) fn traceless_blocks<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let third = T::c(1.0 / 3.0);
    let c = x.cols();
    let mut out = sym_blocks(x);
    for k in 0..x.rows() / 9 {
        for ch in 0..c {
            let mean =
                third * (out.get(9 * k, ch) + out.get(9 * k + 4, ch) + out.get(9 * k + 8, ch));
            for d in [0, 4, 8] {
                let v = out.get(9 * k + d, ch);
                out.set(9 * k + d, ch, v - mean);
            }
        }
    }
    out
}
