//! Elementwise arithmetic, reductions and shape manipulation.

use super::tape::{BackCtx, Backward, Tape, Var};
use super::tensor::Tensor;
use crate::error::{arg_err, shape_err, Result};

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp(Binary);

impl Backward for BinaryOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.value(inputs[0]), ctx.value(inputs[1]));
        let (ga, gb) = match self.0 {
            Binary::Add => (grad.clone(), grad.clone()),
            Binary::Sub => (grad.clone(), grad.map(|g| -g)),
            Binary::Mul => (zip_map(grad, b, |g, y| g * y), zip_map(grad, a, |g, x| g * x)),
            Binary::Div => {
                let ga = zip_map(grad, b, |g, y| g / y);
                let t = zip_map(grad, a, |g, x| g * x);
                (ga, zip_map(&t, b, |gx, y| -gx / (y * y)))
            }
        };
        Ok(vec![needs[0].then_some(ga), needs[1].then_some(gb)])
    }
}

struct UnaryOp {
    /// Derivative as a function of (input, output).
    deriv: fn(f64, f64, f64) -> f64,
    param: f64,
}

impl Backward for UnaryOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.value(inputs[0]);
        let data = grad
            .data()
            .iter()
            .zip(x.data())
            .zip(output.data())
            .map(|((&g, &xi), &yi)| g * (self.deriv)(xi, yi, self.param))
            .collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))])
    }
}

struct SumOp {
    scale: f64,
}

impl Backward for SumOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let shape = ctx.value(inputs[0]).shape();
        Ok(vec![Some(Tensor::full(shape, grad.item() * self.scale))])
    }
}

struct CenterOp;

impl Backward for CenterOp {
    fn backward(
        &self,
        _ctx: &BackCtx<'_>,
        _inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let m = grad.sum() / grad.numel() as f64;
        Ok(vec![Some(grad.map(|g| g - m))])
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.reshape(ctx.value(inputs[0]).shape())?)])
    }
}

/// Views a tensor as `outer × axis × inner` around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct ConcatOp {
    axis: usize,
}

impl Backward for ConcatOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (outer, total, inner) = split_dims(grad.shape(), self.axis);
        let mut start = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (&v, &need) in inputs.iter().zip(needs) {
            let shape = ctx.value(v).shape();
            let len = shape[self.axis];
            if need {
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    data.extend_from_slice(&grad.data()[base..base + len * inner]);
                }
                out.push(Some(Tensor::from_parts(shape.to_vec(), data)));
            } else {
                out.push(None);
            }
            start += len;
        }
        Ok(out)
    }
}

struct SliceOp {
    axis: usize,
    start: usize,
}

impl Backward for SliceOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let shape = ctx.value(inputs[0]).shape();
        let (outer, total, inner) = split_dims(shape, self.axis);
        let len = grad.shape()[self.axis];
        let mut data = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
        }
        Ok(vec![Some(Tensor::from_parts(shape.to_vec(), data))])
    }
}

fn permute_data(src: &Tensor, axes: &[usize]) -> Tensor {
    let shape = src.shape();
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let s = src.data();
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    while data.len() < n {
        let base: usize = idx[..last].iter().zip(&strides[..last]).map(|(i, s)| i * s).sum();
        for k in 0..inner_len {
            data.push(s[base + k * inner_stride]);
        }
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl Backward for PermuteOp {
    fn backward(
        &self,
        _ctx: &BackCtx<'_>,
        _inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(permute_data(grad, &self.inverse))])
    }
}

struct ChannelBiasOp {
    axis: usize,
}

impl Backward for ChannelBiasOp {
    fn backward(
        &self,
        _ctx: &BackCtx<'_>,
        _inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let gb = needs[1].then(|| {
            let (outer, c, inner) = split_dims(grad.shape(), self.axis);
            let mut db = vec![0.0; c];
            for o in 0..outer {
                for (ch, acc) in db.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *acc += grad.data()[base..base + inner].iter().sum::<f64>();
                }
            }
            Tensor::from_parts(vec![c], db)
        });
        Ok(vec![needs[0].then(|| grad.clone()), gb])
    }
}

struct MeanTrailingOp {
    count: usize,
}

impl Backward for MeanTrailingOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let shape = ctx.value(inputs[0]).shape();
        let inv = 1.0 / self.count as f64;
        let mut data = Vec::with_capacity(grad.numel() * self.count);
        for &g in grad.data() {
            data.extend(std::iter::repeat_n(g * inv, self.count));
        }
        Ok(vec![Some(Tensor::from_parts(shape.to_vec(), data))])
    }
}

struct SoftmaxCeOp {
    target: usize,
}

impl Backward for SoftmaxCeOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let z = ctx.value(inputs[0]);
        let p = softmax(z.data());
        let g = grad.item();
        let data = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| g * (pk - if k == self.target { 1.0 } else { 0.0 }))
            .collect();
        Ok(vec![Some(Tensor::from_parts(z.shape().to_vec(), data))])
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &str) -> Result<Var> {
        same_shape(self, a, b, name)?;
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let value = zip_map(self.value(a), self.value(b), f);
        Ok(self.push_op(value, &[a, b], BinaryOp(kind)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, deriv: fn(f64, f64, f64) -> f64, param: f64) -> Var {
        let value = self.value(x).map(f);
        self.push_op(value, &[x], UnaryOp { deriv, param })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, |_, _, c| c, c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, |_, _, _| 1.0, c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _, _| if x > 0.0 { 1.0 } else { 0.0 }, 0.0)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }, 0.0)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y, _| 0.5 / y, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _, _| 2.0 * x, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(value, &[x], SumOp { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push_op(value, &[x], SumOp { scale: 1.0 / n })
    }

    /// Subtracts the mean over all elements.
    pub fn center(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        let value = t.map(|v| v - m);
        self.push_op(value, &[x], CenterOp)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(value, &[x], ReshapeOp))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return arg_err("concat of an empty list");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_dims(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push_op(Tensor::from_parts(out_shape, data), xs, ConcatOp { axis }))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(format!("slice [{start}, {}) on axis {axis} of {shape:?}", start + len));
        }
        let (outer, total, inner) = split_dims(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push_op(Tensor::from_parts(out_shape, data), &[x], SliceOp { axis, start }))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return arg_err("stack of an empty list");
        };
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape(first));
        let expanded: Vec<Var> =
            xs.iter().map(|&v| self.reshape(v, &shape)).collect::<Result<_>>()?;
        self.concat(&expanded, 0)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let nd = self.shape(x).len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return arg_err(format!("invalid permutation {axes:?} for rank {nd}"));
        }
        let mut inverse = vec![0; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let value = permute_data(self.value(x), axes);
        Ok(self.push_op(value, &[x], PermuteOp { inverse }))
    }

    /// Adds `bias[c]` along `axis`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return shape_err(format!(
                "bias {:?} does not match axis {axis} of {shape:?}",
                self.shape(bias)
            ));
        }
        let (outer, c, inner) = split_dims(&shape, axis);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for (ch, &bv) in b.iter().enumerate().take(c) {
                let base = (o * c + ch) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push_op(Tensor::from_parts(shape, data), &[x, bias], ChannelBiasOp { axis }))
    }

    /// Averages over the last `k` axes.
    pub fn mean_trailing(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if k == 0 || k >= shape.len() {
            return shape_err(format!("cannot average trailing {k} axes of {shape:?}"));
        }
        let keep = &shape[..shape.len() - k];
        let count: usize = shape[shape.len() - k..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks_exact(count)
            .map(|c| c.iter().sum::<f64>() / count as f64)
            .collect();
        Ok(self.push_op(Tensor::from_parts(keep.to_vec(), data), &[x], MeanTrailingOp { count }))
    }

    /// Cross-entropy of `softmax(logits)` against a one-hot target index.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.ndim() != 1 || target >= z.numel() {
            return arg_err(format!("target {target} outside logits of shape {:?}", z.shape()));
        }
        let m = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let value = Tensor::scalar(lse - z.data()[target]);
        Ok(self.push_op(value, &[logits], SoftmaxCeOp { target }))
    }
}
