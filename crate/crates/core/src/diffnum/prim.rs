//! Primitive operations: forward kernels and their vector-Jacobian products.
//!
//! Both the recording tape and the plain evaluator call [`Prim::forward`], so
//! the two modes produce bit-identical values.

use super::{DiffError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    /// `[n, k] x [k, m] -> [n, m]`
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    /// Concatenate along the last axis.
    Concat,
    /// Concatenate along the first axis (rank-2 only).
    ConcatRows,
    /// Columns `start..start + len` of the last axis.
    Slice { start: usize, len: usize },
    Sum,
    Mean,
    /// Sum over the last axis, keeping it with size 1.
    SumLast,
    /// `[k*n, q] -> [n, q]`: average of `k` consecutive row blocks of height `n`.
    MeanBlocks(usize),
    GatherRows(Vec<usize>),
    /// `inputs[0] + sum_i coeffs[i] * inputs[i + 1]`, accumulated left to right.
    LinComb(Vec<f64>),
}

impl Prim {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::MatMul => "matmul",
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Div => "div",
            Prim::Scale(_) => "scale",
            Prim::AddScalar(_) => "add_scalar",
            Prim::Tanh => "tanh",
            Prim::Sigmoid => "sigmoid",
            Prim::Relu => "relu",
            Prim::Softplus => "softplus",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::Sqrt => "sqrt",
            Prim::Square => "square",
            Prim::Concat => "concat",
            Prim::ConcatRows => "concat_rows",
            Prim::Slice { .. } => "slice",
            Prim::Sum => "sum",
            Prim::Mean => "mean",
            Prim::SumLast => "sum_last",
            Prim::MeanBlocks(_) => "mean_blocks",
            Prim::GatherRows(_) => "gather_rows",
            Prim::LinComb(_) => "lincomb",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Prim::MatMul | Prim::Add | Prim::Sub | Prim::Mul | Prim::Div => Some(2),
            Prim::Concat | Prim::ConcatRows => None,
            Prim::LinComb(c) => Some(c.len() + 1),
            _ => Some(1),
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(DiffError::Arity { op: self.name(), expected: n, found: inputs.len() });
            }
        } else if inputs.is_empty() {
            return Err(DiffError::Arity { op: self.name(), expected: 1, found: 0 });
        }
        match self {
            Prim::MatMul => matmul(inputs[0], inputs[1]),
            Prim::Add => binary(self.name(), inputs[0], inputs[1], |a, b| a + b),
            Prim::Sub => binary(self.name(), inputs[0], inputs[1], |a, b| a - b),
            Prim::Mul => binary(self.name(), inputs[0], inputs[1], |a, b| a * b),
            Prim::Div => binary(self.name(), inputs[0], inputs[1], |a, b| a / b),
            Prim::Scale(s) => Ok(unary(inputs[0], |x| s * x)),
            Prim::AddScalar(s) => Ok(unary(inputs[0], |x| x + s)),
            Prim::Tanh => Ok(unary(inputs[0], f64::tanh)),
            Prim::Sigmoid => Ok(unary(inputs[0], sigmoid)),
            Prim::Relu => Ok(unary(inputs[0], |x| if x > 0.0 { x } else { 0.0 })),
            Prim::Softplus => Ok(unary(inputs[0], softplus)),
            Prim::Exp => Ok(unary(inputs[0], f64::exp)),
            Prim::Log => Ok(unary(inputs[0], f64::ln)),
            Prim::Sqrt => Ok(unary(inputs[0], f64::sqrt)),
            Prim::Square => Ok(unary(inputs[0], |x| x * x)),
            Prim::Concat => concat_last(inputs),
            Prim::ConcatRows => concat_rows(inputs),
            Prim::Slice { start, len } => slice_last(inputs[0], *start, *len),
            Prim::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
            Prim::Mean => {
                let x = inputs[0];
                if x.is_empty() {
                    return Err(DiffError::Empty { op: "mean" });
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
            }
            Prim::SumLast => {
                let x = inputs[0];
                let c = x.cols();
                let data: Vec<f64> = x.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
                let mut shape = x.shape().to_vec();
                if shape.is_empty() {
                    shape.push(1);
                } else {
                    *shape.last_mut().unwrap() = 1;
                }
                Tensor::new(shape, data)
            }
            Prim::MeanBlocks(k) => mean_blocks(inputs[0], *k),
            Prim::GatherRows(idx) => gather_rows(inputs[0], idx),
            Prim::LinComb(coeffs) => {
                let base = inputs[0];
                for t in &inputs[1..] {
                    if t.shape() != base.shape() {
                        return Err(DiffError::Shape {
                            op: "lincomb",
                            lhs: base.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                }
                let terms: Vec<(f64, &[f64])> =
                    coeffs.iter().copied().zip(inputs[1..].iter().map(|t| t.data())).collect();
                Tensor::new(base.shape().to_vec(), lincomb(base.data(), &terms))
            }
        }
    }

    /// Gradients of a scalar objective with respect to each input, given the
    /// gradient `g` with respect to this op's output.
    pub fn vjp(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
        match self {
            Prim::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![matmul_nt(g, b), matmul_tn(a, g)]
            }
            Prim::Add => binary_vjp(inputs[0], inputs[1], g, |_, _| (1.0, 1.0)),
            Prim::Sub => binary_vjp(inputs[0], inputs[1], g, |_, _| (1.0, -1.0)),
            Prim::Mul => binary_vjp(inputs[0], inputs[1], g, |a, b| (b, a)),
            Prim::Div => binary_vjp(inputs[0], inputs[1], g, |a, b| (1.0 / b, -a / (b * b))),
            Prim::Scale(s) => vec![unary(g, |v| s * v)],
            Prim::AddScalar(_) => vec![g.clone()],
            Prim::Tanh => vec![zip_map(g, out, |gv, y| gv * (1.0 - y * y))],
            Prim::Sigmoid => vec![zip_map(g, out, |gv, y| gv * y * (1.0 - y))],
            Prim::Relu => vec![zip_map(g, inputs[0], |gv, x| if x > 0.0 { gv } else { 0.0 })],
            Prim::Softplus => vec![zip_map(g, inputs[0], |gv, x| gv * sigmoid(x))],
            Prim::Exp => vec![zip_map(g, out, |gv, y| gv * y)],
            Prim::Log => vec![zip_map(g, inputs[0], |gv, x| gv / x)],
            Prim::Sqrt => vec![zip_map(g, out, |gv, y| gv / (2.0 * y))],
            Prim::Square => vec![zip_map(g, inputs[0], |gv, x| 2.0 * x * gv)],
            Prim::Concat => {
                let rows = g.rows();
                let gc = g.cols();
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let c = t.cols();
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * gc + offset..r * gc + offset + c]);
                        }
                        offset += c;
                        Tensor::new(t.shape().to_vec(), d).expect("concat vjp shape")
                    })
                    .collect()
            }
            Prim::ConcatRows => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let n = t.len();
                        let d = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        Tensor::new(t.shape().to_vec(), d).expect("concat_rows vjp shape")
                    })
                    .collect()
            }
            Prim::Slice { start, len } => {
                let x = inputs[0];
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    gx.data_mut()[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![gx]
            }
            Prim::Sum => vec![Tensor::full(inputs[0].shape(), g.item())],
            Prim::Mean => {
                let x = inputs[0];
                vec![Tensor::full(x.shape(), g.item() / x.len() as f64)]
            }
            Prim::SumLast => {
                let x = inputs[0];
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for (r, row) in gx.data_mut().chunks_mut(c.max(1)).enumerate() {
                    row.fill(g.data()[r]);
                }
                vec![gx]
            }
            Prim::MeanBlocks(k) => {
                let x = inputs[0];
                let n = g.len();
                let inv = 1.0 / *k as f64;
                let mut gx = Tensor::zeros(x.shape());
                for b in 0..*k {
                    for (dst, src) in gx.data_mut()[b * n..(b + 1) * n].iter_mut().zip(g.data()) {
                        *dst = src * inv;
                    }
                }
                vec![gx]
            }
            Prim::GatherRows(idx) => {
                let x = inputs[0];
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for (i, &r) in idx.iter().enumerate() {
                    let src = &g.data()[i * c..(i + 1) * c];
                    for (dst, s) in gx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                vec![gx]
            }
            Prim::LinComb(coeffs) => {
                let mut grads = Vec::with_capacity(coeffs.len() + 1);
                grads.push(g.clone());
                for c in coeffs {
                    grads.push(unary(g, |v| c * v));
                }
                grads
            }
        }
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

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `base + sum_i c_i * t_i`, accumulated per element in term order.
pub fn lincomb(base: &[f64], terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = base.to_vec();
    for (c, t) in terms {
        for (o, v) in out.iter_mut().zip(t.iter()) {
            *o += c * v;
        }
    }
    out
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("unary shape")
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("zip shape")
}

fn pad3(shape: &[usize]) -> [usize; 3] {
    let mut p = [1; 3];
    let off = 3 - shape.len();
    p[off..].copy_from_slice(shape);
    p
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, DiffError> {
    let (pa, pb) = (pad3(a), pad3(b));
    let rank = a.len().max(b.len());
    let mut out = [1; 3];
    for i in 0..3 {
        out[i] = match (pa[i], pb[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(DiffError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() });
            }
        };
    }
    Ok(out[3 - rank..].to_vec())
}

fn bstrides(shape: &[usize]) -> [usize; 3] {
    let p = pad3(shape);
    let full = [p[1] * p[2], p[2], 1];
    let mut s = [0; 3];
    for i in 0..3 {
        s[i] = if p[i] == 1 { 0 } else { full[i] };
    }
    s
}

fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let po = pad3(out);
    let (sa, sb) = (bstrides(a), bstrides(b));
    let mut o = 0;
    for i in 0..po[0] {
        for j in 0..po[1] {
            for k in 0..po[2] {
                f(o, i * sa[0] + j * sa[1] + k * sa[2], i * sb[0] + j * sb[1] + k * sb[2]);
                o += 1;
            }
        }
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
        data[o] = f(ad[ia], bd[ib]);
    });
    Tensor::new(shape, data)
}

fn binary_vjp(a: &Tensor, b: &Tensor, g: &Tensor, d: impl Fn(f64, f64) -> (f64, f64)) -> Vec<Tensor> {
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    {
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
        if a.shape() == b.shape() {
            for o in 0..gd.len() {
                let (da, db) = d(ad[o], bd[o]);
                gad[o] += gd[o] * da;
                gbd[o] += gd[o] * db;
            }
        } else {
            for_each_broadcast(g.shape(), a.shape(), b.shape(), |o, ia, ib| {
                let (da, db) = d(ad[ia], bd[ib]);
                gad[ia] += gd[o] * da;
                gbd[ib] += gd[o] * db;
            });
        }
    }
    vec![ga, gb]
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(DiffError::Shape { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `g [n, m] x b^T [m, k] -> [n, k]`
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; n * k];
    let (gd, bd) = (g.data(), b.data());
    for i in 0..n {
        let grow = &gd[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &bd[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(n, k, out)
}

/// `a^T [k, n] x g [n, m] -> [k, m]`
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = g.shape()[1];
    let mut out = vec![0.0; k * m];
    let (ad, gd) = (a.data(), g.data());
    for i in 0..n {
        let grow = &gd[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, gv) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::matrix(k, m, out)
}

fn concat_last(inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
    let first = inputs[0];
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    let rows = first.rows();
    for t in &inputs[1..] {
        if t.rank() != first.rank() || &t.shape()[..t.rank().saturating_sub(1)] != lead {
            return Err(DiffError::Shape { op: "concat", lhs: first.shape().to_vec(), rhs: t.shape().to_vec() });
        }
    }
    let total: usize = inputs.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for t in inputs {
            data.extend_from_slice(t.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, data)
}

fn concat_rows(inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
    let first = inputs[0];
    if first.rank() != 2 {
        return Err(DiffError::Rank { op: "concat_rows", shape: first.shape().to_vec() });
    }
    let cols = first.cols();
    let mut rows = 0;
    let mut data = Vec::new();
    for t in inputs {
        if t.rank() != 2 || t.cols() != cols {
            return Err(DiffError::Shape { op: "concat_rows", lhs: first.shape().to_vec(), rhs: t.shape().to_vec() });
        }
        rows += t.rows();
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![rows, cols], data)
}

fn slice_last(x: &Tensor, start: usize, len: usize) -> Result<Tensor, DiffError> {
    let c = x.cols();
    if x.rank() == 0 || start + len > c || len == 0 {
        return Err(DiffError::Shape { op: "slice", lhs: x.shape().to_vec(), rhs: vec![start, len] });
    }
    let mut data = Vec::with_capacity(x.rows() * len);
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row(r)[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(shape, data)
}

fn mean_blocks(x: &Tensor, k: usize) -> Result<Tensor, DiffError> {
    if x.rank() != 2 || k == 0 || x.rows() % k != 0 {
        return Err(DiffError::Shape { op: "mean_blocks", lhs: x.shape().to_vec(), rhs: vec![k] });
    }
    let n = x.rows() / k;
    let c = x.cols();
    let block = n * c;
    let mut out = vec![0.0; block];
    for b in 0..k {
        for (o, v) in out.iter_mut().zip(&x.data()[b * block..(b + 1) * block]) {
            *o += v;
        }
    }
    let inv = 1.0 / k as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Tensor::new(vec![n, c], out)
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor, DiffError> {
    if x.rank() != 2 {
        return Err(DiffError::Rank { op: "gather_rows", shape: x.shape().to_vec() });
    }
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &r in idx {
        if r >= x.rows() {
            return Err(DiffError::Shape { op: "gather_rows", lhs: x.shape().to_vec(), rhs: vec![r] });
        }
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![idx.len(), c], data)
}
