use rand::Rng;

use super::kernels::{self, Conv1dDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Operation families, used for fault injection and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    ScaleBy,
    Affine,
    Tanh,
    Sigmoid,
    Relu,
    Log,
    Pow,
    Softmax,
    Concat,
    Narrow,
    Conv1d,
    MeanAxis,
    Sum,
    Mean,
    Dropout,
    Pick,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        let kind = match name.to_ascii_lowercase().as_str() {
            "matmul" => MatMul,
            "bmm" | "batch_matmul" => BatchMatMul,
            "transpose" => Transpose,
            "reshape" => Reshape,
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "scale_by" => ScaleBy,
            "affine" => Affine,
            "tanh" => Tanh,
            "sigmoid" => Sigmoid,
            "relu" => Relu,
            "log" => Log,
            "pow" => Pow,
            "softmax" => Softmax,
            "concat" => Concat,
            "narrow" => Narrow,
            "conv1d" => Conv1d,
            "mean_axis" => MeanAxis,
            "sum" => Sum,
            "mean" => Mean,
            "dropout" => Dropout,
            "pick" => Pick,
            _ => return None,
        };
        Some(kind)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Affine { x: Var, scale: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log { x: Var, floor: f64 },
    Pow { x: Var, exponent: f64 },
    Softmax { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Conv1d { x: Var, w: Var, b: Var },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Mask { x: Var, mask: Vec<f64> },
    Pick { x: Var, index: Vec<usize> },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::Affine { .. } => OpKind::Affine,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Log { .. } => OpKind::Log,
            Op::Pow { .. } => OpKind::Pow,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Mask { .. } => OpKind::Dropout,
            Op::Pick { .. } => OpKind::Pick,
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only operation record. Inputs always precede the nodes that use them.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor.grad`; zero contribution if
    /// the loss does not depend on `var`.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// Checks that `small` broadcasts onto `big` by leading-1 expansion: after
/// dropping leading unit extents, `small` must be a suffix of `big`.
fn broadcast_compatible(big: &[usize], small: &[usize]) -> bool {
    let stripped: &[usize] = {
        let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
        &small[first..]
    };
    stripped.len() <= big.len() && big[big.len() - stripped.len()..] == *stripped
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every backward contribution of `kind` by 1.5. Test hook for
    /// checking that gradient verification catches broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape; trainable iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad())
    }

    /// A trainable leaf regardless of the tensor's flag; used by gradient checks.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[batch, m, k]` and `[batch, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "batch_matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..bt {
            kernels::gemm_acc(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![bt, m, n], out, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                left: shape,
                right: vec![],
            });
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 2].iter().product();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = src[off + i * cols + j];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(new_shape, out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let out_shape = if na >= nb && broadcast_compatible(sa, sb) {
            sa.to_vec()
        } else if nb > na && broadcast_compatible(sb, sa) {
            sb.to_vec()
        } else {
            return Err(Error::Dimension {
                op: op_name,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let n = na.max(nb);
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..n).map(|i| f(av[i % na], bv[i % nb])).collect();
        Ok((out_shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape, out, Op::ScaleBy(x, s), rg))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where clamped.
    /// NaN passes through.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::Log { x, floor }, |v| if v < floor { floor.ln() } else { v.ln() })
    }

    /// `x^exponent` for nonnegative `x`.
    pub fn pow(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(x, Op::Pow { x, exponent }, |v| v.max(0.0).powf(exponent))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let out = kernels::softmax_forward(self.value(x), &shape, axis);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::Dimension {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {shape:?}"
            )));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * ext * inner + start * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(new_shape, out, Op::Narrow { x, axis, start }, rg))
    }

    /// Same-padded convolution along time: `x [B,T,Cin]`, `w [K,Cin,Cout]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims = self.conv_dims(x, w, b)?;
        let out = kernels::conv1d_forward(self.value(x), self.value(w), self.value(b), dims);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            vec![dims.batch, dims.time, dims.c_out],
            out,
            Op::Conv1d { x, w, b },
            rg,
        ))
    }

    pub(crate) fn conv_dims(&self, x: Var, w: Var, b: Var) -> Result<Conv1dDims> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 3
            && sw.len() == 3
            && sw[0] % 2 == 1
            && sx[2] == sw[1]
            && sb.len() == 1
            && sb[0] == sw[2];
        if !ok {
            return Err(Error::Dimension {
                op: "conv1d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        Ok(Conv1dDims {
            batch: sx[0],
            time: sx[1],
            c_in: sx[2],
            c_out: sw[2],
            kernel: sw[0],
        })
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::Contract(format!(
                "mean_axis({axis}) invalid for shape {shape:?}"
            )));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / ext as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(new_shape, out, Op::MeanAxis { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![m], Op::Mean(x), rg)
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1/(1-rate)`. Identity when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Mask { x, mask }, rg))
    }

    /// Picks `x[i, index[i]]` from a `[rows, cols]` tensor, giving `[rows]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(Error::Dimension {
                op: "pick",
                left: shape.to_vec(),
                right: vec![index.len()],
            });
        }
        let cols = shape[1];
        if let Some((row, &c)) = index.iter().enumerate().find(|(_, &c)| c >= cols) {
            return Err(Error::Data(format!(
                "class id {c} out of range [0, {cols}) at row {row}"
            )));
        }
        let v = self.value(x);
        let out = index.iter().enumerate().map(|(i, &c)| v[i * cols + c]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![index.len()],
            out,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
