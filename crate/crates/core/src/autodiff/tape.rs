use std::sync::Arc;

use thiserror::Error;

use super::tensor::Mat;
use crate::exec::Exec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} expects a {expected} tensor")]
    Dtype { op: &'static str, expected: &'static str },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalar((usize, usize)),
    #[error("index {index} out of range for {op} with extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

type Res<T> = Result<T, AdError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant real left operator applied to every `n`-row block of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOp {
    pub s: Mat,
    pub s_t: Mat,
}

impl BlockOp {
    pub fn new(s: Mat) -> Arc<Self> {
        assert_eq!(s.rows, s.cols, "block operator must be square");
        let s_t = s.transpose();
        Arc::new(Self { s, s_t })
    }

    pub fn n(&self) -> usize {
        self.s.rows
    }
}

/// Constant complex left operator `S = re + j im` for the `[Re | Im]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexBlockOp {
    pub re: BlockOp,
    pub im: BlockOp,
}

impl ComplexBlockOp {
    pub fn new(re: Mat, im: Mat) -> Arc<Self> {
        assert_eq!(re.shape(), im.shape(), "complex operator parts");
        Arc::new(Self {
            re: Arc::unwrap_or_clone(BlockOp::new(re)),
            im: Arc::unwrap_or_clone(BlockOp::new(im)),
        })
    }

    pub fn n(&self) -> usize {
        self.re.n()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    CMatMul(Var, Var),
    CMul(Var, Var),
    BlockLeft(Arc<BlockOp>, Var),
    CBlockLeft(Arc<ComplexBlockOp>, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Conj(Var),
    RealPart(Var),
    ImagPart(Var),
    SquareNorm(Var),
    Magnitude(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Reshape(Var),
    SelectCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    complex: bool,
    requires_grad: bool,
}

/// Append-only computation graph. Node order is a topological order, so the
/// backward sweep is a single reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Grads {
    by_node: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt_or_zero(&self, v: Var) -> Mat {
        self.by_node[v.0].clone().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Mat::zeros(r, c)
        })
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Mat> {
        vars.iter().map(|&v| self.wrt_or_zero(v)).collect()
    }
}

fn swap_halves(x: &Mat) -> Mat {
    // [Xr | Xi] -> [-Xi | Xr], i.e. multiplication by j
    let c = x.cols / 2;
    Mat::from_fn(x.rows, x.cols, |i, j| if j < c { -x.at(i, j + c) } else { x.at(i, j - c) })
}

fn unswap_halves(g: &Mat) -> Mat {
    let c = g.cols / 2;
    Mat::from_fn(g.rows, g.cols, |i, j| if j < c { g.at(i, j + c) } else { -g.at(i, j - c) })
}

/// Applies `s` to each consecutive `n`-row block of `x` with one product:
/// blocks are laid side by side, multiplied, then unstacked.
fn block_apply(s: &Mat, x: &Mat, exec: Exec) -> Mat {
    let n = s.rows;
    let blocks = x.rows / n;
    let c = x.cols;
    let mut wide = Mat::zeros(n, blocks * c);
    for b in 0..blocks {
        for i in 0..n {
            let src = x.row(b * n + i);
            wide.data[i * blocks * c + b * c..i * blocks * c + (b + 1) * c].copy_from_slice(src);
        }
    }
    let prod = s.matmul(&wide, exec);
    let mut out = Mat::zeros(x.rows, c);
    for b in 0..blocks {
        for i in 0..n {
            let dst = (b * n + i) * c;
            out.data[dst..dst + c].copy_from_slice(&prod.data[i * blocks * c + b * c..i * blocks * c + (b + 1) * c]);
        }
    }
    out
}

fn embed_complex_weight(w: &Mat) -> Mat {
    // [Wr | Wi] (f x 2g) -> [[Wr, Wi], [-Wi, Wr]] (2f x 2g)
    let (f, g) = (w.rows, w.cols / 2);
    Mat::from_fn(2 * f, 2 * g, |i, j| {
        let (ii, re_row) = if i < f { (i, true) } else { (i - f, false) };
        let (jj, re_col) = if j < g { (j, true) } else { (j - g, false) };
        match (re_row, re_col) {
            (true, true) | (false, false) => w.at(ii, jj),
            (true, false) => w.at(ii, g + jj),
            (false, true) => -w.at(ii, g + jj),
        }
    })
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Exec::default())
    }
}

impl Tape {
    pub fn new(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_complex(&self, v: Var) -> bool {
        self.nodes[v.0].complex
    }

    fn push(&mut self, value: Mat, op: Op, complex: bool, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, complex, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Mat, complex: bool, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, complex, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false, false)
    }

    pub fn complex_constant(&mut self, value: Mat) -> Res<Var> {
        if value.cols % 2 != 0 {
            return Err(AdError::Dtype { op: "complex_constant", expected: "even-width" });
        }
        Ok(self.leaf(value, true, false))
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.leaf(value, false, true)
    }

    pub fn complex_variable(&mut self, value: Mat) -> Res<Var> {
        if value.cols % 2 != 0 {
            return Err(AdError::Dtype { op: "complex_variable", expected: "even-width" });
        }
        Ok(self.leaf(value, true, true))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Res<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AdError::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn need_complex(&self, op: &'static str, a: Var) -> Res<()> {
        if !self.is_complex(a) {
            return Err(AdError::Dtype { op, expected: "complex" });
        }
        Ok(())
    }

    fn same_dtype(&self, op: &'static str, a: Var, b: Var) -> Res<bool> {
        let (ca, cb) = (self.is_complex(a), self.is_complex(b));
        if ca != cb {
            return Err(AdError::Dtype { op, expected: if ca { "complex" } else { "real" } });
        }
        Ok(ca)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        self.same_shape("add", a, b)?;
        let c = self.same_dtype("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), c, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        self.same_shape("sub", a, b)?;
        let c = self.same_dtype("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), c, &[a, b]))
    }

    /// Elementwise (Hadamard) product of real tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        self.same_shape("mul", a, b)?;
        if self.is_complex(a) || self.is_complex(b) {
            return Err(AdError::Dtype { op: "mul", expected: "real" });
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), false, &[a, b]))
    }

    /// `a + 1 * bias` with `bias` a `1 x c` row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Res<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(AdError::Shape { op: "add_row", lhs: sa, rhs: sb });
        }
        let (va, vb) = (self.value(a), self.value(bias));
        let v = Mat::from_fn(sa.0, sa.1, |i, j| va.at(i, j) + vb.data[j]);
        let c = self.is_complex(a);
        Ok(self.push(v, Op::AddRow(a, bias), c, &[a, bias]))
    }

    /// Scales every column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Res<Var> {
        let (sa, sb) = (self.shape(a), self.shape(row));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(AdError::Shape { op: "mul_row", lhs: sa, rhs: sb });
        }
        let (va, vb) = (self.value(a), self.value(row));
        let v = Mat::from_fn(sa.0, sa.1, |i, j| va.at(i, j) * vb.data[j]);
        let c = self.is_complex(a);
        Ok(self.push(v, Op::MulRow(a, row), c, &[a, row]))
    }

    /// Scales every row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Res<Var> {
        let (sa, sb) = (self.shape(a), self.shape(col));
        if sb.1 != 1 || sb.0 != sa.0 {
            return Err(AdError::Shape { op: "mul_col", lhs: sa, rhs: sb });
        }
        let (va, vb) = (self.value(a), self.value(col));
        let v = Mat::from_fn(sa.0, sa.1, |i, j| va.at(i, j) * vb.data[i]);
        let c = self.is_complex(a);
        Ok(self.push(v, Op::MulCol(a, col), c, &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let c = self.is_complex(a);
        self.push(v, Op::Scale(a, s), c, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let c = self.is_complex(a);
        self.push(v, Op::AddScalar(a), c, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AdError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        if self.is_complex(a) || self.is_complex(b) {
            return Err(AdError::Dtype { op: "matmul", expected: "real" });
        }
        let v = self.value(a).matmul(self.value(b), self.exec);
        Ok(self.push(v, Op::MatMul(a, b), false, &[a, b]))
    }

    /// Complex product `X W` of an `r x f` and an `f x g` complex matrix.
    pub fn complex_matmul(&mut self, x: Var, w: Var) -> Res<Var> {
        self.need_complex("complex_matmul", x)?;
        self.need_complex("complex_matmul", w)?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.1 / 2 != sw.0 {
            return Err(AdError::Shape { op: "complex_matmul", lhs: sx, rhs: sw });
        }
        let big = embed_complex_weight(self.value(w));
        let v = self.value(x).matmul(&big, self.exec);
        Ok(self.push(v, Op::CMatMul(x, w), true, &[x, w]))
    }

    /// Elementwise complex product.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Res<Var> {
        self.need_complex("complex_mul", a)?;
        self.need_complex("complex_mul", b)?;
        self.same_shape("complex_mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols / 2;
        let v = Mat::from_fn(va.rows, va.cols, |i, j| {
            let k = j % c;
            let (ar, ai, br, bi) = (va.at(i, k), va.at(i, k + c), vb.at(i, k), vb.at(i, k + c));
            if j < c {
                ar * br - ai * bi
            } else {
                ar * bi + ai * br
            }
        });
        Ok(self.push(v, Op::CMul(a, b), true, &[a, b]))
    }

    /// `S X_b` for every `n`-row block `X_b` of `x`.
    pub fn block_left(&mut self, s: &Arc<BlockOp>, x: Var) -> Res<Var> {
        let sx = self.shape(x);
        if sx.0 % s.n() != 0 {
            return Err(AdError::Shape { op: "block_left", lhs: s.s.shape(), rhs: sx });
        }
        let v = block_apply(&s.s, self.value(x), self.exec);
        let c = self.is_complex(x);
        Ok(self.push(v, Op::BlockLeft(s.clone(), x), c, &[x]))
    }

    /// Complex `S X_b` for every `n`-row block of the complex tensor `x`.
    pub fn complex_block_left(&mut self, s: &Arc<ComplexBlockOp>, x: Var) -> Res<Var> {
        self.need_complex("complex_block_left", x)?;
        let sx = self.shape(x);
        if sx.0 % s.n() != 0 {
            return Err(AdError::Shape { op: "complex_block_left", lhs: s.re.s.shape(), rhs: sx });
        }
        let xv = self.value(x);
        let mut v = block_apply(&s.re.s, xv, self.exec);
        v.add_assign(&block_apply(&s.im.s, &swap_halves(xv), self.exec));
        Ok(self.push(v, Op::CBlockLeft(s.clone(), x), true, &[x]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let c = self.is_complex(a);
        self.push(v, op, c, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `[x]_+ = max(x, 0)` used by inequality penalties.
    pub fn relu_plus(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    /// ReLU applied separately to real and imaginary parts.
    pub fn crelu(&mut self, a: Var) -> Res<Var> {
        self.need_complex("crelu", a)?;
        Ok(self.relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn conj(&mut self, a: Var) -> Res<Var> {
        self.need_complex("conj", a)?;
        let va = self.value(a);
        let c = va.cols / 2;
        let v = Mat::from_fn(va.rows, va.cols, |i, j| if j < c { va.at(i, j) } else { -va.at(i, j) });
        Ok(self.push(v, Op::Conj(a), true, &[a]))
    }

    pub fn real_part(&mut self, a: Var) -> Res<Var> {
        self.need_complex("real_part", a)?;
        let va = self.value(a);
        let v = Mat::from_fn(va.rows, va.cols / 2, |i, j| va.at(i, j));
        Ok(self.push(v, Op::RealPart(a), false, &[a]))
    }

    pub fn imag_part(&mut self, a: Var) -> Res<Var> {
        self.need_complex("imag_part", a)?;
        let va = self.value(a);
        let c = va.cols / 2;
        let v = Mat::from_fn(va.rows, c, |i, j| va.at(i, j + c));
        Ok(self.push(v, Op::ImagPart(a), false, &[a]))
    }

    /// Builds the complex tensor `re + j im`.
    pub fn complex(&mut self, re: Var, im: Var) -> Res<Var> {
        self.same_shape("complex", re, im)?;
        if self.is_complex(re) || self.is_complex(im) {
            return Err(AdError::Dtype { op: "complex", expected: "real" });
        }
        let v = Mat::hcat(&[self.value(re), self.value(im)]);
        Ok(self.push(v, Op::HCat(vec![re, im]), true, &[re, im]))
    }

    /// `|z|^2` elementwise.
    pub fn square_norm(&mut self, a: Var) -> Res<Var> {
        self.need_complex("square_norm", a)?;
        let va = self.value(a);
        let c = va.cols / 2;
        let v = Mat::from_fn(va.rows, c, |i, j| va.at(i, j).powi(2) + va.at(i, j + c).powi(2));
        Ok(self.push(v, Op::SquareNorm(a), false, &[a]))
    }

    /// `|z|` elementwise; the gradient at 0 is taken as 0.
    pub fn magnitude(&mut self, a: Var) -> Res<Var> {
        self.need_complex("magnitude", a)?;
        let va = self.value(a);
        let c = va.cols / 2;
        let v = Mat::from_fn(va.rows, c, |i, j| va.at(i, j).hypot(va.at(i, j + c)));
        Ok(self.push(v, Op::Magnitude(a), false, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), false, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Mat::scalar(va.sum() / va.len().max(1) as f64);
        self.push(v, Op::Mean(a), false, &[a])
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut v = Mat::zeros(1, va.cols);
        for i in 0..va.rows {
            for (o, x) in v.data.iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        let c = self.is_complex(a);
        self.push(v, Op::SumRows(a), c, &[a])
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Mat::from_fn(va.rows, 1, |i, _| va.row(i).iter().sum());
        self.push(v, Op::SumCols(a), false, &[a])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Res<Var> {
        let sa = self.shape(a);
        if sa.0 * sa.1 != rows * cols {
            return Err(AdError::Shape { op: "reshape", lhs: sa, rhs: (rows, cols) });
        }
        let v = Mat::from_vec(rows, cols, self.value(a).data.clone());
        Ok(self.push(v, Op::Reshape(a), false, &[a]))
    }

    pub fn select_cols(&mut self, a: Var, idx: Vec<usize>) -> Res<Var> {
        let extent = self.shape(a).1;
        if let Some(&index) = idx.iter().find(|&&j| j >= extent) {
            return Err(AdError::Index { op: "select_cols", index, extent });
        }
        let v = self.value(a).select_cols(&idx);
        Ok(self.push(v, Op::SelectCols(a, idx), false, &[a]))
    }

    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Res<Var> {
        let extent = self.shape(a).0;
        if let Some(&index) = idx.iter().find(|&&i| i >= extent) {
            return Err(AdError::Index { op: "select_rows", index, extent });
        }
        let v = self.value(a).select_rows(&idx);
        let c = self.is_complex(a);
        Ok(self.push(v, Op::SelectRows(a, idx), c, &[a]))
    }

    /// Horizontal concatenation; the result is real.
    pub fn hcat(&mut self, parts: &[Var]) -> Res<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(AdError::Shape { op: "hcat", lhs: self.shape(parts[0]), rhs: self.shape(bad) });
        }
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::hcat(&mats);
        Ok(self.push(v, Op::HCat(parts.to_vec()), false, parts))
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Res<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(AdError::Shape { op: "vcat", lhs: self.shape(parts[0]), rhs: self.shape(bad) });
        }
        let complex = parts.first().is_some_and(|&p| self.is_complex(p));
        if parts.iter().any(|&p| self.is_complex(p) != complex) {
            return Err(AdError::Dtype { op: "vcat", expected: if complex { "complex" } else { "real" } });
        }
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::vcat(&mats);
        Ok(self.push(v, Op::VCat(parts.to_vec()), complex, parts))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Res<Grads> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AdError::NonScalar(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        let exec = self.exec;

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let mut acc = |p: Var, m: Mat| {
                if !nodes[p.0].requires_grad {
                    return;
                }
                match &mut grads[p.0] {
                    Some(a) => a.add_assign(&m),
                    slot @ None => *slot = Some(m),
                }
            };
            let val = |p: Var| &nodes[p.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::AddRow(a, bias) => {
                    acc(*a, g.clone());
                    let mut s = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in s.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*bias, s);
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (val(*a), val(*row));
                    acc(*a, Mat::from_fn(g.rows, g.cols, |r, c| g.at(r, c) * vr.data[c]));
                    let mut s = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            s.data[c] += g.at(r, c) * va.at(r, c);
                        }
                    }
                    acc(*row, s);
                }
                Op::MulCol(a, col) => {
                    let (va, vc) = (val(*a), val(*col));
                    acc(*a, Mat::from_fn(g.rows, g.cols, |r, c| g.at(r, c) * vc.data[r]));
                    let s = Mat::from_fn(g.rows, 1, |r, _| g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum());
                    acc(*col, s);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(*a, g.matmul_nt(val(*b), exec));
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, val(*a).matmul_tn(&g, exec));
                    }
                }
                Op::CMatMul(x, w) => {
                    let wv = val(*w);
                    if nodes[x.0].requires_grad {
                        acc(*x, g.matmul_nt(&embed_complex_weight(wv), exec));
                    }
                    if nodes[w.0].requires_grad {
                        let big = val(*x).matmul_tn(&g, exec);
                        let (f, h) = (wv.rows, wv.cols / 2);
                        let dw = Mat::from_fn(f, 2 * h, |r, c| {
                            if c < h {
                                big.at(r, c) + big.at(f + r, h + c)
                            } else {
                                big.at(r, c) - big.at(f + r, c - h)
                            }
                        });
                        acc(*w, dw);
                    }
                }
                Op::CMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let c = g.cols / 2;
                    let part = |other: &Mat| {
                        Mat::from_fn(g.rows, g.cols, |r, j| {
                            let k = j % c;
                            let (gr, gi, or, oi) = (g.at(r, k), g.at(r, k + c), other.at(r, k), other.at(r, k + c));
                            if j < c {
                                gr * or + gi * oi
                            } else {
                                -gr * oi + gi * or
                            }
                        })
                    };
                    acc(*a, part(vb));
                    acc(*b, part(va));
                }
                Op::BlockLeft(s, x) => acc(*x, block_apply(&s.s_t, &g, exec)),
                Op::CBlockLeft(s, x) => {
                    let mut d = block_apply(&s.re.s_t, &g, exec);
                    d.add_assign(&block_apply(&s.im.s_t, &unswap_halves(&g), exec));
                    acc(*x, d);
                }
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
                Op::Sin(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi * x.cos())),
                Op::Cos(a) => acc(*a, g.zip_map(val(*a), |gi, x| -gi * x.sin())),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |gi, x| 2.0 * gi * x)),
                Op::Conj(a) => {
                    let c = g.cols / 2;
                    acc(*a, Mat::from_fn(g.rows, g.cols, |r, j| if j < c { g.at(r, j) } else { -g.at(r, j) }));
                }
                Op::RealPart(a) => {
                    let c = g.cols;
                    acc(*a, Mat::from_fn(g.rows, 2 * c, |r, j| if j < c { g.at(r, j) } else { 0.0 }));
                }
                Op::ImagPart(a) => {
                    let c = g.cols;
                    acc(*a, Mat::from_fn(g.rows, 2 * c, |r, j| if j < c { 0.0 } else { g.at(r, j - c) }));
                }
                Op::SquareNorm(a) => {
                    let va = val(*a);
                    let c = g.cols;
                    acc(*a, Mat::from_fn(g.rows, 2 * c, |r, j| 2.0 * g.at(r, j % c) * va.at(r, j)));
                }
                Op::Magnitude(a) => {
                    let va = val(*a);
                    let c = g.cols;
                    acc(
                        *a,
                        Mat::from_fn(g.rows, 2 * c, |r, j| {
                            let m = node.value.at(r, j % c);
                            if m > 0.0 {
                                g.at(r, j % c) * va.at(r, j) / m
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::filled(r, c, g.data[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::filled(r, c, g.data[0] / (r * c).max(1) as f64));
                }
                Op::SumRows(a) => {
                    let r = val(*a).rows;
                    acc(*a, Mat::from_fn(r, g.cols, |_, j| g.data[j]));
                }
                Op::SumCols(a) => {
                    let c = val(*a).cols;
                    acc(*a, Mat::from_fn(g.rows, c, |r, _| g.data[r]));
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_vec(r, c, g.data.clone()));
                }
                Op::SelectCols(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for i in 0..r {
                        for (k, &j) in idx.iter().enumerate() {
                            *d.at_mut(i, j) += g.at(i, k);
                        }
                    }
                    acc(*a, d);
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            *d.at_mut(i, j) += g.at(k, j);
                        }
                    }
                    acc(*a, d);
                }
                Op::HCat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).cols;
                        acc(p, Mat::from_fn(g.rows, c, |i, j| g.at(i, off + j)));
                        off += c;
                    }
                }
                Op::VCat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        acc(p, Mat::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec()));
                        off += r;
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Grads { by_node: grads, shapes })
    }
}
