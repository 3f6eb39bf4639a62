//! Forward and backward kernels for every recorded operation.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Silu,
    Sigmoid,
    Relu,
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input, constant, or parameter.
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Unary(Unary),
    Clamp { lo: f64, hi: f64 },
    /// `[m,k] × [k,n]`.
    MatMul,
    /// 2-D transpose.
    Transpose,
    /// Inputs `x [N,C,H,W]`, `w [O,C,kh,kw]`, optional `b [O]`.
    Conv2d { stride: usize, pad: usize },
    UpsampleNearest2x,
    MeanPool2x,
    /// Inputs `x [N,C,H,W]`, `gamma [C]`, `beta [C]`.
    GroupNorm { groups: usize, eps: f64 },
    /// `x [N,C,H,W] + b [N,C]` broadcast over space.
    AddChannelBias,
    /// `x [M,N] + b [N]` broadcast over rows.
    AddRowBias,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Sum,
    Mean,
    /// `[N,C,H,W] -> [N,C]`.
    SpatialMean,
    /// Euclidean norm of the whole tensor; subgradient 0 at the origin.
    Norm2,
    /// Rows of `[M,N]` scaled to unit length.
    NormalizeRows { eps: f64 },
    GatherRows(Vec<usize>),
    /// Mean over rows of `-log softmax(logits)[target]`.
    SoftmaxCrossEntropy(Vec<usize>),
}

impl FromStr for Op {
    type Err = Error;

    /// Parses attribute-free op tags.
    fn from_str(tag: &str) -> Result<Self> {
        Ok(match tag {
            "leaf" => Op::Leaf,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "neg" => Op::Unary(Unary::Neg),
            "silu" => Op::Unary(Unary::Silu),
            "sigmoid" => Op::Unary(Unary::Sigmoid),
            "relu" => Op::Unary(Unary::Relu),
            "abs" => Op::Unary(Unary::Abs),
            "square" => Op::Unary(Unary::Square),
            "sqrt" => Op::Unary(Unary::Sqrt),
            "exp" => Op::Unary(Unary::Exp),
            "log" => Op::Unary(Unary::Log),
            "tanh" => Op::Unary(Unary::Tanh),
            "matmul" => Op::MatMul,
            "transpose" => Op::Transpose,
            "upsample_nearest2x" => Op::UpsampleNearest2x,
            "mean_pool2x" => Op::MeanPool2x,
            "add_channel_bias" => Op::AddChannelBias,
            "add_row_bias" => Op::AddRowBias,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "spatial_mean" => Op::SpatialMean,
            "norm2" => Op::Norm2,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Unary(_) => "unary",
            Op::Clamp { .. } => "clamp",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::UpsampleNearest2x => "upsample_nearest2x",
            Op::MeanPool2x => "mean_pool2x",
            Op::GroupNorm { .. } => "group_norm",
            Op::AddChannelBias => "add_channel_bias",
            Op::AddRowBias => "add_row_bias",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SpatialMean => "spatial_mean",
            Op::Norm2 => "norm2",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::GatherRows(_) => "gather_rows",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Leaf => 0..=0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul => 2..=2,
            Op::AddChannelBias | Op::AddRowBias => 2..=2,
            Op::Conv2d { .. } => 2..=3,
            Op::GroupNorm { .. } => 3..=3,
            Op::Concat { .. } => 1..=usize::MAX,
            _ => 1..=1,
        }
    }
}

fn dims_str<E: Element>(ts: &[&Tensor<E>]) -> String {
    ts.iter()
        .map(|t| format!("{:?}", t.dims()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn e<E: Element>(v: f64) -> E {
    E::from_f64_lossy(v)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

fn unary_fwd(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Silu => x * sigmoid(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Relu => x.max(0.0),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Tanh => x.tanh(),
    }
}

/// Derivative given input `x` and output `y`.
fn unary_grad(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Neg => -1.0,
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Tanh => 1.0 - y * y,
    }
}

/// Splits dims around `axis` into (outer, axis_len, inner).
fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return None;
        }
        let (hp, wp) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if hp < w[2] || wp < w[3] {
            return None;
        }
        Some(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            ho: (hp - w[2]) / stride + 1,
            wo: (wp - w[3]) / stride + 1,
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<E: Element>(&self, x: &[E], cols: &mut [E]) {
        let p = self.p();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(E::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                E::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<E: Element>(&self, cols: &[E], dx: &mut [E]) {
        let p = self.p();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Validates shapes and evaluates `op` on `inputs`.
pub(crate) fn forward<E: Element>(op: &Op, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if !op.arity().contains(&inputs.len()) {
        return Err(Error::shape(
            op.name(),
            format!("expected {:?} inputs, got {}", op.arity(), inputs.len()),
        ));
    }
    let bad = || Error::shape(op.name(), dims_str(inputs));
    let out = match op {
        Op::Leaf => unreachable!("leaves are inserted directly"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.dims() != b.dims() {
                return Err(bad());
            }
            let f: fn(E, E) -> E = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                Op::Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            a.zip_map(b, f)?
        }
        Op::Scale(s) => {
            let s = e::<E>(*s);
            inputs[0].map(|x| x * s)
        }
        Op::AddScalar(s) => {
            let s = e::<E>(*s);
            inputs[0].map(|x| x + s)
        }
        Op::Unary(u) => inputs[0].map(|x| e(unary_fwd(*u, x.as_f64()))),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (e::<E>(*lo), e::<E>(*hi));
            inputs[0].map(|x| x.max(lo).min(hi))
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ad, bd) = (a.dims(), b.dims());
            if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
                return Err(bad());
            }
            let (m, k, n) = (ad[0], ad[1], bd[1]);
            let mut out = vec![E::zero(); m * n];
            E::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Tensor::from_parts(vec![m, n], out)
        }
        Op::Transpose => {
            let a = inputs[0];
            if a.dims().len() != 2 {
                return Err(bad());
            }
            let (m, n) = (a.dims()[0], a.dims()[1]);
            let d = a.data();
            Tensor::from_fn(&[n, m], |i| d[(i % m) * n + i / m])
        }
        Op::Conv2d { stride, pad } => {
            let (x, w) = (inputs[0], inputs[1]);
            let g = ConvGeom::new(x.dims(), w.dims(), *stride, *pad).ok_or_else(bad)?;
            if let Some(b) = inputs.get(2) {
                if b.dims() != [g.o] {
                    return Err(bad());
                }
            }
            let (k, p) = (g.k(), g.p());
            let mut out = vec![E::zero(); g.n * g.o * p];
            let mut cols = vec![E::zero(); k * p];
            let in_sz = g.c * g.h * g.w;
            for n in 0..g.n {
                g.im2col(&x.data()[n * in_sz..(n + 1) * in_sz], &mut cols);
                let dst = &mut out[n * g.o * p..(n + 1) * g.o * p];
                E::gemm(g.o, k, p, w.data(), false, &cols, false, dst, false);
                if let Some(b) = inputs.get(2) {
                    for (o, chunk) in dst.chunks_exact_mut(p).enumerate() {
                        let bo = b.data()[o];
                        chunk.iter_mut().for_each(|v| *v = *v + bo);
                    }
                }
            }
            Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out)
        }
        Op::UpsampleNearest2x => {
            let x = inputs[0];
            let d = x.dims();
            if d.len() != 4 {
                return Err(bad());
            }
            let (h, w) = (d[2], d[3]);
            let planes = d[0] * d[1];
            let mut out = Vec::with_capacity(planes * 4 * h * w);
            for plane in x.data().chunks_exact(h * w) {
                for y in 0..2 * h {
                    let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                    for xx in 0..2 * w {
                        out.push(row[xx / 2]);
                    }
                }
            }
            Tensor::from_parts(vec![d[0], d[1], 2 * h, 2 * w], out)
        }
        Op::MeanPool2x => {
            let x = inputs[0];
            let d = x.dims();
            if d.len() != 4 || d[2] % 2 != 0 || d[3] % 2 != 0 {
                return Err(bad());
            }
            let (h, w) = (d[2], d[3]);
            let quarter = e::<E>(0.25);
            let mut out = Vec::with_capacity(x.numel() / 4);
            for plane in x.data().chunks_exact(h * w) {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let i = 2 * y * w + 2 * xx;
                        out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                    }
                }
            }
            Tensor::from_parts(vec![d[0], d[1], h / 2, w / 2], out)
        }
        Op::GroupNorm { groups, eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let d = x.dims();
            if d.len() != 4 || *groups == 0 || d[1] % groups != 0 {
                return Err(bad());
            }
            if gamma.dims() != [d[1]] || beta.dims() != [d[1]] {
                return Err(bad());
            }
            let (out, _) = group_norm_fwd(x, gamma, beta, *groups, *eps);
            out
        }
        Op::AddChannelBias => {
            let (x, b) = (inputs[0], inputs[1]);
            let d = x.dims();
            if d.len() != 4 || b.dims() != [d[0], d[1]] {
                return Err(bad());
            }
            let hw = d[2] * d[3];
            let bd = b.data();
            let data = x
                .data()
                .chunks_exact(hw)
                .enumerate()
                .flat_map(|(nc, plane)| plane.iter().map(move |&v| v + bd[nc]))
                .collect();
            Tensor::from_parts(d.to_vec(), data)
        }
        Op::AddRowBias => {
            let (x, b) = (inputs[0], inputs[1]);
            let d = x.dims();
            if d.len() != 2 || b.dims() != [d[1]] {
                return Err(bad());
            }
            let bd = b.data();
            let data = x
                .data()
                .chunks_exact(d[1])
                .flat_map(|row| row.iter().zip(bd).map(|(&v, &bb)| v + bb))
                .collect();
            Tensor::from_parts(d.to_vec(), data)
        }
        Op::Reshape(dims) => inputs[0].reshape(dims)?,
        Op::Concat { axis } => {
            let first = inputs[0].dims();
            if *axis >= first.len() {
                return Err(bad());
            }
            let mut total = 0;
            for t in inputs {
                let d = t.dims();
                if d.len() != first.len()
                    || d.iter()
                        .zip(first)
                        .enumerate()
                        .any(|(i, (a, b))| i != *axis && a != b)
                {
                    return Err(bad());
                }
                total += d[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let len = t.dims()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut dims = first.to_vec();
            dims[*axis] = total;
            Tensor::from_parts(dims, out)
        }
        Op::Slice { axis, start, len } => {
            let d = inputs[0].dims();
            if *axis >= d.len() || *len == 0 || start + len > d[*axis] {
                return Err(bad());
            }
            let (outer, al, inner) = split_axis(d, *axis);
            let src = inputs[0].data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * al + start) * inner;
                out.extend_from_slice(&src[base..base + len * inner]);
            }
            let mut dims = d.to_vec();
            dims[*axis] = *len;
            Tensor::from_parts(dims, out)
        }
        Op::Sum => Tensor::scalar(e(inputs[0].sum_f64())),
        Op::Mean => Tensor::scalar(e(inputs[0].mean_f64())),
        Op::SpatialMean => {
            let d = inputs[0].dims();
            if d.len() != 4 {
                return Err(bad());
            }
            let hw = d[2] * d[3];
            let data = inputs[0]
                .data()
                .chunks_exact(hw)
                .map(|p| e(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
                .collect();
            Tensor::from_parts(vec![d[0], d[1]], data)
        }
        Op::Norm2 => {
            let s: f64 = inputs[0].data().iter().map(|v| v.as_f64().powi(2)).sum();
            Tensor::scalar(e(s.sqrt()))
        }
        Op::NormalizeRows { eps } => {
            let d = inputs[0].dims();
            if d.len() != 2 {
                return Err(bad());
            }
            let mut out = Vec::with_capacity(inputs[0].numel());
            for row in inputs[0].data().chunks_exact(d[1]) {
                let n = row_norm(row).max(*eps);
                out.extend(row.iter().map(|&v| e::<E>(v.as_f64() / n)));
            }
            Tensor::from_parts(d.to_vec(), out)
        }
        Op::GatherRows(idx) => {
            let d = inputs[0].dims();
            if d.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= d[0]) {
                return Err(bad());
            }
            let src = inputs[0].data();
            let mut out = Vec::with_capacity(idx.len() * d[1]);
            for &i in idx {
                out.extend_from_slice(&src[i * d[1]..(i + 1) * d[1]]);
            }
            Tensor::from_parts(vec![idx.len(), d[1]], out)
        }
        Op::SoftmaxCrossEntropy(targets) => {
            let d = inputs[0].dims();
            if d.len() != 2 || targets.len() != d[0] || targets.iter().any(|&t| t >= d[1]) {
                return Err(bad());
            }
            let mut total = 0.0;
            for (row, &t) in inputs[0].data().chunks_exact(d[1]).zip(targets) {
                let (lse, _) = log_sum_exp(row);
                total += lse - row[t].as_f64();
            }
            Tensor::scalar(e(total / d[0] as f64))
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite(format!("output of {}", op.name())));
    }
    Ok(out)
}

fn row_norm<E: Element>(row: &[E]) -> f64 {
    row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

fn log_sum_exp<E: Element>(row: &[E]) -> (f64, f64) {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    (max + s.ln(), max)
}

/// Returns the output and per-group (mean, inv_std).
fn group_norm_fwd<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    groups: usize,
    eps: f64,
) -> (Tensor<E>, Vec<(f64, f64)>) {
    let d = x.dims();
    let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
    let cg = c / groups;
    let gsz = cg * hw;
    let mut out = vec![E::zero(); x.numel()];
    let mut stats = Vec::with_capacity(n * groups);
    for (gi, chunk) in x.data().chunks_exact(gsz).enumerate() {
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / gsz as f64;
        let var = chunk
            .iter()
            .map(|v| (v.as_f64() - mean).powi(2))
            .sum::<f64>()
            / gsz as f64;
        let inv = 1.0 / (var + eps).sqrt();
        stats.push((mean, inv));
        let g = gi % groups;
        for (j, &v) in chunk.iter().enumerate() {
            let ch = g * cg + j / hw;
            let xhat = (v.as_f64() - mean) * inv;
            out[gi * gsz + j] =
                e(xhat * gamma.data()[ch].as_f64() + beta.data()[ch].as_f64());
        }
    }
    debug_assert_eq!(stats.len(), n * groups);
    (Tensor::from_parts(d.to_vec(), out), stats)
}

/// Gradients with respect to each input; `None` where `needs[i]` is false.
pub(crate) fn backward<E: Element>(
    op: &Op,
    inputs: &[&Tensor<E>],
    output: &Tensor<E>,
    grad: &Tensor<E>,
    needs: &[bool],
) -> Vec<Option<Vec<E>>> {
    let g = grad.data();
    let mut res: Vec<Option<Vec<E>>> = vec![None; inputs.len()];
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => {}
        Op::Add => {
            for (i, r) in res.iter_mut().enumerate() {
                if want(i) {
                    *r = Some(g.to_vec());
                }
            }
        }
        Op::Sub => {
            if want(0) {
                res[0] = Some(g.to_vec());
            }
            if want(1) {
                res[1] = Some(g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            if want(0) {
                res[0] = Some(g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect());
            }
            if want(1) {
                res[1] = Some(g.iter().zip(a).map(|(&gv, &av)| gv * av).collect());
            }
        }
        Op::Div => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            if want(0) {
                res[0] = Some(g.iter().zip(b).map(|(&gv, &bv)| gv / bv).collect());
            }
            if want(1) {
                res[1] = Some(
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect(),
                );
            }
        }
        Op::Scale(s) => {
            let s = e::<E>(*s);
            res[0] = Some(g.iter().map(|&v| v * s).collect());
        }
        Op::AddScalar(_) | Op::Reshape(_) => res[0] = Some(g.to_vec()),
        Op::Unary(u) => {
            let (x, y) = (inputs[0].data(), output.data());
            res[0] = Some(
                g.iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| gv * e::<E>(unary_grad(*u, xv.as_f64(), yv.as_f64())))
                    .collect(),
            );
        }
        Op::Clamp { lo, hi } => {
            let x = inputs[0].data();
            res[0] = Some(
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        let xf = xv.as_f64();
                        if xf >= *lo && xf <= *hi {
                            gv
                        } else {
                            E::zero()
                        }
                    })
                    .collect(),
            );
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
            if want(0) {
                let mut da = vec![E::zero(); m * k];
                E::gemm(m, n, k, g, false, b.data(), true, &mut da, false);
                res[0] = Some(da);
            }
            if want(1) {
                let mut db = vec![E::zero(); k * n];
                E::gemm(k, m, n, a.data(), true, g, false, &mut db, false);
                res[1] = Some(db);
            }
        }
        Op::Transpose => {
            let (m, n) = (inputs[0].dims()[0], inputs[0].dims()[1]);
            // grad has dims [n, m]
            res[0] = Some((0..m * n).map(|i| g[(i % n) * m + i / n]).collect());
        }
        Op::Conv2d { stride, pad } => {
            let (x, w) = (inputs[0], inputs[1]);
            let geo = ConvGeom::new(x.dims(), w.dims(), *stride, *pad).expect("validated in forward");
            let (k, p) = (geo.k(), geo.p());
            let in_sz = geo.c * geo.h * geo.w;
            let mut cols = vec![E::zero(); k * p];
            let mut dcols = vec![E::zero(); k * p];
            let mut dx = want(0).then(|| vec![E::zero(); x.numel()]);
            let mut dw = want(1).then(|| vec![E::zero(); w.numel()]);
            for n in 0..geo.n {
                let gout = &g[n * geo.o * p..(n + 1) * geo.o * p];
                if let Some(dw) = dw.as_mut() {
                    geo.im2col(&x.data()[n * in_sz..(n + 1) * in_sz], &mut cols);
                    E::gemm(geo.o, p, k, gout, false, &cols, true, dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    E::gemm(k, geo.o, p, w.data(), true, gout, false, &mut dcols, false);
                    geo.col2im(&dcols, &mut dx[n * in_sz..(n + 1) * in_sz]);
                }
            }
            res[0] = dx;
            res[1] = dw;
            if inputs.len() == 3 && want(2) {
                let mut db = vec![0.0f64; geo.o];
                for n in 0..geo.n {
                    for (o, chunk) in g[n * geo.o * p..(n + 1) * geo.o * p].chunks_exact(p).enumerate() {
                        db[o] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                res[2] = Some(db.into_iter().map(e).collect());
            }
        }
        Op::UpsampleNearest2x => {
            let d = inputs[0].dims();
            let (h, w) = (d[2], d[3]);
            let mut dx = vec![E::zero(); inputs[0].numel()];
            for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(4 * h * w)) {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let t = &mut plane[(y / 2) * w + xx / 2];
                        *t = *t + gp[y * 2 * w + xx];
                    }
                }
            }
            res[0] = Some(dx);
        }
        Op::MeanPool2x => {
            let d = inputs[0].dims();
            let (h, w) = (d[2], d[3]);
            let quarter = e::<E>(0.25);
            let mut dx = vec![E::zero(); inputs[0].numel()];
            for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(h * w / 4)) {
                for y in 0..h {
                    for xx in 0..w {
                        plane[y * w + xx] = gp[(y / 2) * (w / 2) + xx / 2] * quarter;
                    }
                }
            }
            res[0] = Some(dx);
        }
        Op::GroupNorm { groups, eps } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let d = x.dims();
            let (c, hw) = (d[1], d[2] * d[3]);
            let cg = c / groups;
            let gsz = cg * hw;
            let (_, stats) = group_norm_fwd(x, gamma, inputs[2], *groups, *eps);
            let mut dx = vec![E::zero(); x.numel()];
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            for (gi, chunk) in x.data().chunks_exact(gsz).enumerate() {
                let (mean, inv) = stats[gi];
                let grp = gi % groups;
                let gchunk = &g[gi * gsz..(gi + 1) * gsz];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..gsz {
                    let ch = grp * cg + j / hw;
                    let xhat = (chunk[j].as_f64() - mean) * inv;
                    let gv = gchunk[j].as_f64();
                    dgamma[ch] += gv * xhat;
                    dbeta[ch] += gv;
                    let dxhat = gv * gamma.data()[ch].as_f64();
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let m = gsz as f64;
                for j in 0..gsz {
                    let ch = grp * cg + j / hw;
                    let xhat = (chunk[j].as_f64() - mean) * inv;
                    let dxhat = gchunk[j].as_f64() * gamma.data()[ch].as_f64();
                    dx[gi * gsz + j] =
                        e(inv / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
                }
            }
            if want(0) {
                res[0] = Some(dx);
            }
            if want(1) {
                res[1] = Some(dgamma.into_iter().map(e).collect());
            }
            if want(2) {
                res[2] = Some(dbeta.into_iter().map(e).collect());
            }
        }
        Op::AddChannelBias => {
            let d = inputs[0].dims();
            let hw = d[2] * d[3];
            if want(0) {
                res[0] = Some(g.to_vec());
            }
            if want(1) {
                res[1] = Some(
                    g.chunks_exact(hw)
                        .map(|p| e(p.iter().map(|v| v.as_f64()).sum::<f64>()))
                        .collect(),
                );
            }
        }
        Op::AddRowBias => {
            let n = inputs[0].dims()[1];
            if want(0) {
                res[0] = Some(g.to_vec());
            }
            if want(1) {
                let mut db = vec![0.0f64; n];
                for row in g.chunks_exact(n) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v.as_f64();
                    }
                }
                res[1] = Some(db.into_iter().map(e).collect());
            }
        }
        Op::Concat { axis } => {
            let first = inputs[0].dims();
            let (outer, total, inner) = {
                let (o, _, i) = split_axis(first, *axis);
                (o, output.dims()[*axis], i)
            };
            let mut offset = 0;
            for (idx, t) in inputs.iter().enumerate() {
                let len = t.dims()[*axis];
                if want(idx) {
                    let mut d = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    res[idx] = Some(d);
                }
                offset += len;
            }
        }
        Op::Slice { axis, start, len } => {
            let d = inputs[0].dims();
            let (outer, al, inner) = split_axis(d, *axis);
            let mut dx = vec![E::zero(); inputs[0].numel()];
            for o in 0..outer {
                let base = (o * al + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            res[0] = Some(dx);
        }
        Op::Sum => res[0] = Some(vec![g[0]; inputs[0].numel()]),
        Op::Mean => {
            let n = inputs[0].numel();
            res[0] = Some(vec![g[0] / e(n as f64); n]);
        }
        Op::SpatialMean => {
            let d = inputs[0].dims();
            let hw = d[2] * d[3];
            let scale = e::<E>(1.0 / hw as f64);
            res[0] = Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * scale, hw)).collect());
        }
        Op::Norm2 => {
            let n = output.item();
            res[0] = Some(if n > E::zero() {
                inputs[0].data().iter().map(|&v| g[0] * v / n).collect()
            } else {
                vec![E::zero(); inputs[0].numel()]
            });
        }
        Op::NormalizeRows { eps } => {
            let cols = inputs[0].dims()[1];
            let mut dx = Vec::with_capacity(inputs[0].numel());
            for ((row, yrow), grow) in inputs[0]
                .data()
                .chunks_exact(cols)
                .zip(output.data().chunks_exact(cols))
                .zip(g.chunks_exact(cols))
            {
                let raw = row_norm(row);
                if raw < *eps {
                    dx.extend(grow.iter().map(|&v| e::<E>(v.as_f64() / eps)));
                } else {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y.as_f64() * gv.as_f64()).sum();
                    dx.extend(
                        yrow.iter()
                            .zip(grow)
                            .map(|(y, gv)| e::<E>((gv.as_f64() - y.as_f64() * dot) / raw)),
                    );
                }
            }
            res[0] = Some(dx);
        }
        Op::GatherRows(idx) => {
            let cols = inputs[0].dims()[1];
            let mut dx = vec![E::zero(); inputs[0].numel()];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    dx[i * cols + c] = dx[i * cols + c] + g[r * cols + c];
                }
            }
            res[0] = Some(dx);
        }
        Op::SoftmaxCrossEntropy(targets) => {
            let d = inputs[0].dims();
            let scale = g[0].as_f64() / d[0] as f64;
            let mut dx = Vec::with_capacity(inputs[0].numel());
            for (row, &t) in inputs[0].data().chunks_exact(d[1]).zip(targets) {
                let (lse, _) = log_sum_exp(row);
                for (j, v) in row.iter().enumerate() {
                    let p = (v.as_f64() - lse).exp();
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    dx.push(e((p - onehot) * scale));
                }
            }
            res[0] = Some(dx);
        }
    }
    for (i, r) in res.iter_mut().enumerate() {
        if !want(i) {
            *r = None;
        }
    }
    res
}
