use crate::error::{CdsError, Result};
use crate::numerics::{ParamStore, Tensor};

/// Handle into a [`Tape`]. Cheap to copy; only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    MatMul(Val, Val),
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    AddRowBias(Val, Val),
    Scale(Val, f64),
    AddScalar(Val, f64),
    LeakyRelu(Val, f64),
    Sigmoid(Val),
    Tanh(Val),
    Exp(Val),
    Ln(Val),
    Sum(Val),
    Mean(Val),
    ConcatCols(Val, Val),
    Row(Val, usize),
    StackRows(Vec<Val>),
    SliceCols(Val, usize, usize),
    Transpose(Val),
    MulConst(Val, Tensor),
    AddConst(Val, Tensor),
    SoftmaxRows(Val),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive ops from one forward pass. Replaying the
/// record backwards propagates adjoints; parameter adjoints are accumulated
/// (`+=`) into the [`ParamStore`] gradient slots, which the caller zeroes
/// between steps.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("tape ops require rank 1 or 2, got {shape:?}"),
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, p) = as_2d(a.shape());
    let (p2, q) = as_2d(b.shape());
    debug_assert_eq!(p, p2);
    let mut out = vec![0.0; n * q];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        for j in 0..q {
            let mut s = 0.0;
            for k in 0..p {
                s += ad[i * p + k] * bd[k * q + j];
            }
            out[i * q + j] = s;
        }
    }
    Tensor::new(vec![n, q], out).expect("matmul output shape")
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (n, m) = as_2d(a.shape());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out).expect("transpose output shape")
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Val {
        debug_assert!(value.all_finite(), "non-finite tape value from {op:?}");
        self.nodes.push(Node { op, value });
        Val(self.nodes.len() - 1)
    }

    fn dims(&self, v: Val) -> (usize, usize) {
        as_2d(self.nodes[v.0].value.shape())
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Val {
        self.push(Op::Constant, t)
    }

    pub fn scalar(&mut self, x: f64) -> Val {
        self.push(Op::Constant, Tensor::scalar(x))
    }

    /// Leaf bound to a named parameter; its adjoint lands in the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Val> {
        let t = store.get(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), t))
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (n, p) = self.dims(a);
        let (p2, q) = self.dims(b);
        if p != p2 {
            return Err(CdsError::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let _ = (n, q);
        let out = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// y = x·W (+ b broadcast over rows).
    pub fn linear(&mut self, x: Val, w: Val, b: Option<Val>) -> Result<Val> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    fn zip_same_shape(&mut self, a: Val, b: Val, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CdsError::Dimension(format!(
                "{what} needs matching shapes: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.zip_same_shape(a, b, "add")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.zip_same_shape(a, b, "sub")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.zip_same_shape(a, b, "mul")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.zip_same_shape(a, b, "div")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x / y)
                .collect(),
        )?;
        Ok(self.push(Op::Div(a, b), out))
    }

    /// x (n×m) + b (1×m) broadcast over rows.
    pub fn add_row_bias(&mut self, x: Val, b: Val) -> Result<Val> {
        let (n, m) = self.dims(x);
        let (bn, bm) = self.dims(b);
        if bn != 1 || bm != m {
            return Err(CdsError::Dimension(format!(
                "bias shape {:?} does not broadcast over {:?}",
                self.value(b).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += bias[j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::AddRowBias(x, b), t))
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Val, c: f64) -> Val {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), out)
    }

    pub fn leaky_relu(&mut self, a: Val, slope: f64) -> Val {
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), out)
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let out = self.value(a).map(sigmoid_stable);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: Val) -> Val {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn ln(&mut self, a: Val) -> Val {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), out)
    }

    pub fn sum(&mut self, a: Val) -> Val {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Val) -> Val {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Mean(a), Tensor::scalar(s / n))
    }

    pub fn concat_cols(&mut self, a: Val, b: Val) -> Result<Val> {
        let (n, p) = self.dims(a);
        let (n2, q) = self.dims(b);
        if n != n2 {
            return Err(CdsError::Dimension(format!(
                "concat_cols row counts disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&self.value(b).data()[i * q..(i + 1) * q]);
        }
        let t = Tensor::new(vec![n, p + q], out)?;
        Ok(self.push(Op::ConcatCols(a, b), t))
    }

    pub fn row(&mut self, a: Val, i: usize) -> Result<Val> {
        let (n, m) = self.dims(a);
        if i >= n {
            return Err(CdsError::Dimension(format!(
                "row {i} out of range for shape {:?}",
                self.value(a).shape()
            )));
        }
        let t = Tensor::new(vec![1, m], self.value(a).data()[i * m..(i + 1) * m].to_vec())?;
        Ok(self.push(Op::Row(a, i), t))
    }

    /// Stack k row vectors (each 1×m) into k×m.
    pub fn stack_rows(&mut self, rows: &[Val]) -> Result<Val> {
        if rows.is_empty() {
            return Err(CdsError::Dimension("stack_rows of nothing".into()));
        }
        let (_, m) = self.dims(rows[0]);
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            let (rn, rm) = self.dims(r);
            if rn != 1 || rm != m {
                return Err(CdsError::Dimension(format!(
                    "stack_rows expects 1x{m} rows, got {:?}",
                    self.value(r).shape()
                )));
            }
            out.extend_from_slice(self.value(r).data());
        }
        let t = Tensor::new(vec![rows.len(), m], out)?;
        Ok(self.push(Op::StackRows(rows.to_vec()), t))
    }

    pub fn slice_cols(&mut self, a: Val, start: usize, len: usize) -> Result<Val> {
        let (n, m) = self.dims(a);
        if start + len > m {
            return Err(CdsError::Dimension(format!(
                "slice_cols [{start},{}) out of range for shape {:?}",
                start + len,
                self.value(a).shape()
            )));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * m + start..i * m + start + len]);
        }
        let t = Tensor::new(vec![n, len], out)?;
        Ok(self.push(Op::SliceCols(a, start, len), t))
    }

    pub fn transpose(&mut self, a: Val) -> Val {
        let out = transpose_raw(self.value(a));
        self.push(Op::Transpose(a), out)
    }

    /// Elementwise product with a constant tensor (masking).
    pub fn mul_const(&mut self, a: Val, c: Tensor) -> Result<Val> {
        if self.value(a).shape() != c.shape() {
            return Err(CdsError::Dimension(format!(
                "mul_const shapes disagree: {:?} vs {:?}",
                self.value(a).shape(),
                c.shape()
            )));
        }
        let out = Tensor::new(
            c.shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(c.data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(Op::MulConst(a, c), out))
    }

    pub fn add_const(&mut self, a: Val, c: Tensor) -> Result<Val> {
        if self.value(a).shape() != c.shape() {
            return Err(CdsError::Dimension(format!(
                "add_const shapes disagree: {:?} vs {:?}",
                self.value(a).shape(),
                c.shape()
            )));
        }
        let out = Tensor::new(
            c.shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(c.data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(Op::AddConst(a, c), out))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Val) -> Val {
        let (n, m) = self.dims(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &self.value(a).data()[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                out[i * m + j] = e;
                denom += e;
            }
            for j in 0..m {
                out[i * m + j] /= denom;
            }
        }
        let t = Tensor::new(vec![n, m], out).expect("softmax output shape");
        self.push(Op::SoftmaxRows(a), t)
    }

    /// Propagate ∂loss/∂· back through the recorded ops, accumulating
    /// parameter adjoints into `store` gradient slots.
    pub fn backward(&self, loss: Val, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(CdsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(name) => store.add_grad(name, &g)?,
                Op::MatMul(a, b) => {
                    let bt = transpose_raw(self.value(*b));
                    let at = transpose_raw(self.value(*a));
                    let ga = matmul_raw(&g, &bt);
                    let gb = matmul_raw(&at, &g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |g, y| g * y);
                    let gb = zip_map(&g, self.value(*a), |g, x| g * x);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Div(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |g, y| g / y);
                    let aval = self.value(*a);
                    let bval = self.value(*b);
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(aval.data().iter().zip(bval.data()))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    )?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRowBias(x, b) => {
                    let (n, m) = as_2d(g.shape());
                    let mut gb = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += g.data()[i * m + j];
                        }
                    }
                    accumulate(&mut adj, *x, g.clone());
                    accumulate(&mut adj, *b, Tensor::new(vec![1, m], gb)?);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.map(|x| x * c)),
                Op::AddScalar(a, _) => accumulate(&mut adj, *a, g),
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let ga = zip_map(&g, self.value(*a), |g, x| {
                        if x >= 0.0 {
                            g
                        } else {
                            g * slope
                        }
                    });
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &self.nodes[idx].value, |g, y| g * y * (1.0 - y));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &self.nodes[idx].value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip_map(&g, &self.nodes[idx].value, |g, y| g * y);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = zip_map(&g, self.value(*a), |g, x| g / x);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let seed = g.scalar_value();
                    accumulate(&mut adj, *a, Tensor::filled(self.value(*a).shape(), seed));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let seed = g.scalar_value() / n;
                    accumulate(&mut adj, *a, Tensor::filled(self.value(*a).shape(), seed));
                }
                Op::ConcatCols(a, b) => {
                    let (n, p) = as_2d(self.value(*a).shape());
                    let (_, q) = as_2d(self.value(*b).shape());
                    let mut ga = vec![0.0; n * p];
                    let mut gb = vec![0.0; n * q];
                    for i in 0..n {
                        ga[i * p..(i + 1) * p]
                            .copy_from_slice(&g.data()[i * (p + q)..i * (p + q) + p]);
                        gb[i * q..(i + 1) * q]
                            .copy_from_slice(&g.data()[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                    accumulate(&mut adj, *a, Tensor::new(vec![n, p], ga)?);
                    accumulate(&mut adj, *b, Tensor::new(vec![n, q], gb)?);
                }
                Op::Row(a, i) => {
                    let (n, m) = as_2d(self.value(*a).shape());
                    let mut ga = vec![0.0; n * m];
                    ga[i * m..(i + 1) * m].copy_from_slice(g.data());
                    accumulate(&mut adj, *a, Tensor::new(vec![n, m], ga)?);
                }
                Op::StackRows(rows) => {
                    let (_, m) = as_2d(g.shape());
                    for (j, &r) in rows.iter().enumerate() {
                        let part = Tensor::new(vec![1, m], g.data()[j * m..(j + 1) * m].to_vec())?;
                        accumulate(&mut adj, r, part);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (n, m) = as_2d(self.value(*a).shape());
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        ga[i * m + start..i * m + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut adj, *a, Tensor::new(vec![n, m], ga)?);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, transpose_raw(&g)),
                Op::MulConst(a, c) => {
                    let ga = zip_map(&g, c, |g, y| g * y);
                    accumulate(&mut adj, *a, ga);
                }
                Op::AddConst(a, _) => accumulate(&mut adj, *a, g),
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let (n, m) = as_2d(y.shape());
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        let yrow = &y.data()[i * m..(i + 1) * m];
                        let grow = &g.data()[i * m..(i + 1) * m];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..m {
                            ga[i * m + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, Tensor::new(vec![n, m], ga)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Val, delta: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (a, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.len(), other.len());
    Tensor::new(
        g.shape().to_vec(),
        g.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect(),
    )
    .expect("zip_map shape")
}
