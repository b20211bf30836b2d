//! Per-plane spatial operators on `C × H × W` values: bilinear resizing, backward
//! warping, neighbourhood unfolding and the per-position affine map.

use std::sync::Arc;

use super::gemm::{gemm, Layout};
use super::tape::{BackCtx, Backward, Tape, Var};
use super::tensor::Tensor;
use crate::error::{arg_err, shape_err, Result};

/// Linear interpolation tap: `(1 - w) * src[i0] + w * src[i1]`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w: f64,
}

impl Tap {
    /// Tap at a continuous coordinate, clamped to `[0, extent - 1]`.
    fn at(coord: f64, extent: usize) -> Self {
        let c = coord.clamp(0.0, (extent - 1) as f64);
        let i0 = c.floor() as usize;
        let i0 = i0.min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        Tap { i0, i1, w: c - i0 as f64 }
    }
}

/// Half-pixel-centre source coordinates for resizing `src` samples to `dst`.
fn resize_taps(src: usize, dst: usize) -> Vec<Tap> {
    let ratio = src as f64 / dst as f64;
    (0..dst).map(|i| Tap::at((i as f64 + 0.5) * ratio - 0.5, src)).collect()
}

/// Bilinear sample that returns the exact source value when both weights vanish.
#[inline]
fn sample(plane: &[f64], w: usize, ty: Tap, tx: Tap) -> f64 {
    let row0 = &plane[ty.i0 * w..];
    let top = if tx.w == 0.0 { row0[tx.i0] } else { row0[tx.i0] * (1.0 - tx.w) + row0[tx.i1] * tx.w };
    if ty.w == 0.0 {
        return top;
    }
    let row1 = &plane[ty.i1 * w..];
    let bottom = if tx.w == 0.0 { row1[tx.i0] } else { row1[tx.i0] * (1.0 - tx.w) + row1[tx.i1] * tx.w };
    top * (1.0 - ty.w) + bottom * ty.w
}

#[inline]
fn scatter(plane: &mut [f64], w: usize, ty: Tap, tx: Tap, g: f64) {
    let (a, b) = (1.0 - ty.w, ty.w);
    let (c, d) = (1.0 - tx.w, tx.w);
    plane[ty.i0 * w + tx.i0] += g * a * c;
    plane[ty.i0 * w + tx.i1] += g * a * d;
    plane[ty.i1 * w + tx.i0] += g * b * c;
    plane[ty.i1 * w + tx.i1] += g * b * d;
}

fn chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => shape_err(format!("{what} expects a C×H×W value, got {shape:?}")),
    }
}

/// Resizes a `C × h × w` tensor to `C × H × W` with half-pixel-centre bilinear sampling.
pub fn resize_bilinear(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = chw(input.shape(), "bilinear_resize")?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return arg_err(format!("resize target must be positive, got {th}×{tw}"));
    }
    if (th, tw) == (h, w) {
        return Ok(input.clone());
    }
    let (ty, tx) = (resize_taps(h, th), resize_taps(w, tw));
    let mut out = Vec::with_capacity(c * th * tw);
    for plane in input.data().chunks_exact(h * w) {
        for &y in &ty {
            for &x in &tx {
                out.push(sample(plane, w, y, x));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, th, tw], out))
}

/// Samples `input` at `(i + v(i,j), j + u(i,j))`; flow channel 0 is `u`, channel 1 is `v`.
pub fn warp_bilinear(input: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(input.shape(), "grid_sample")?;
    if flow.shape() != [2, h, w] {
        return shape_err(format!("flow {:?} does not match input extents {h}×{w}", flow.shape()));
    }
    let taps = warp_taps(flow, h, w);
    let mut out = Vec::with_capacity(c * h * w);
    for plane in input.data().chunks_exact(h * w) {
        out.extend(taps.iter().map(|&(ty, tx)| sample(plane, w, ty, tx)));
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

fn warp_taps(flow: &Tensor, h: usize, w: usize) -> Vec<(Tap, Tap)> {
    let (u, v) = flow.data().split_at(h * w);
    let mut taps = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            taps.push((Tap::at(i as f64 + v[k], h), Tap::at(j as f64 + u[k], w)));
        }
    }
    taps
}

struct ResizeOp;

impl Backward for ResizeOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.value(inputs[0]);
        let (c, h, w) = chw(x.shape(), "bilinear_resize")?;
        let (th, tw) = (grad.shape()[1], grad.shape()[2]);
        let (ty, tx) = (resize_taps(h, th), resize_taps(w, tw));
        let mut dx = vec![0.0; c * h * w];
        for (plane, g) in dx.chunks_exact_mut(h * w).zip(grad.data().chunks_exact(th * tw)) {
            for (yi, &y) in ty.iter().enumerate() {
                for (xi, &xt) in tx.iter().enumerate() {
                    scatter(plane, w, y, xt, g[yi * tw + xi]);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

struct GridSampleOp {
    flow: Arc<Tensor>,
}

impl Backward for GridSampleOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.value(inputs[0]);
        let (c, h, w) = chw(x.shape(), "grid_sample")?;
        let taps = warp_taps(&self.flow, h, w);
        let mut dx = vec![0.0; c * h * w];
        for (plane, g) in dx.chunks_exact_mut(h * w).zip(grad.data().chunks_exact(h * w)) {
            for (&(ty, tx), &gv) in taps.iter().zip(g) {
                scatter(plane, w, ty, tx, gv);
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

struct UnfoldOp {
    n: usize,
}

fn unfold_offsets(n: usize) -> Vec<(isize, isize)> {
    let r = (n / 2) as isize;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
}

impl Backward for UnfoldOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.value(inputs[0]);
        let (c, h, w) = chw(x.shape(), "unfold_neighbors")?;
        let mut dx = vec![0.0; c * h * w];
        let g = grad.data();
        for (k, (dy, dxo)) in unfold_offsets(self.n).into_iter().enumerate() {
            for ch in 0..c {
                let gp = &g[(k * c + ch) * h * w..][..h * w];
                let xp = &mut dx[ch * h * w..][..h * w];
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + dxo;
                        if sj >= 0 && sj < w as isize {
                            xp[si as usize * w + sj as usize] += gp[i * w + j];
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

struct LinearOp;

impl Backward for LinearOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.value(inputs[0]);
        let wt = ctx.value(inputs[1]);
        let (cout, cin) = (wt.shape()[0], wt.shape()[1]);
        let p = x.numel() / cin;
        let mut out = vec![None, None];
        if needs[0] {
            let mut dx = vec![0.0; cin * p];
            gemm(1.0, wt.data(), Layout::row_major(cout, cin).t(), grad.data(), Layout::row_major(cout, p), 0.0, &mut dx, Layout::row_major(cin, p));
            out[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
        }
        if needs[1] {
            let mut dw = vec![0.0; cout * cin];
            gemm(1.0, grad.data(), Layout::row_major(cout, p), x.data(), Layout::row_major(cin, p).t(), 0.0, &mut dw, Layout::row_major(cout, cin));
            out[1] = Some(Tensor::from_parts(vec![cout, cin], dw));
        }
        if inputs.len() > 2 {
            let db = needs[2].then(|| {
                Tensor::from_parts(vec![cout], grad.data().chunks_exact(p).map(|r| r.iter().sum()).collect())
            });
            out.push(db);
        }
        Ok(out)
    }
}

impl Tape {
    /// Bilinear resize of a `C × h × w` value to `C × H × W`.
    pub fn bilinear_resize(&mut self, input: Var, target: (usize, usize)) -> Result<Var> {
        let value = resize_bilinear(self.value(input), target)?;
        Ok(self.push_op(value, &[input], ResizeOp))
    }

    /// Backward warp of `input` by a constant flow field (`2 × H × W`, pixels).
    pub fn grid_sample(&mut self, input: Var, flow: Arc<Tensor>) -> Result<Var> {
        let value = warp_bilinear(self.value(input), &flow)?;
        Ok(self.push_op(value, &[input], GridSampleOp { flow }))
    }

    /// Stacks the `n × n` zero-padded neighbourhood of every position on channels:
    /// block `k` holds the neighbour at the `k`-th row-major offset.
    pub fn unfold_neighbors(&mut self, input: Var, n: usize) -> Result<Var> {
        if n % 2 == 0 {
            return arg_err(format!("neighbourhood size must be odd, got {n}"));
        }
        let (c, h, w) = chw(self.shape(input), "unfold_neighbors")?;
        let x = self.value(input).data();
        let offsets = unfold_offsets(n);
        let mut out = vec![0.0; offsets.len() * c * h * w];
        for (k, &(dy, dx)) in offsets.iter().enumerate() {
            for ch in 0..c {
                let xp = &x[ch * h * w..][..h * w];
                let op = &mut out[(k * c + ch) * h * w..][..h * w];
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + dx;
                        if sj >= 0 && sj < w as isize {
                            op[i * w + j] = xp[si as usize * w + sj as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![offsets.len() * c, h, w], out);
        Ok(self.push_op(value, &[input], UnfoldOp { n }))
    }

    /// The same affine map `weights · x + bias` applied at every spatial position
    /// of a `C_in × H × W` value (a 1×1 convolution).
    pub fn linear_per_position(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let (cin, h, w) = chw(self.shape(input), "linear_per_position")?;
        let ws = self.shape(weights).to_vec();
        if ws.len() != 2 || ws[1] != cin {
            return shape_err(format!("weights {ws:?} do not map {cin} input channels"));
        }
        let cout = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!("bias {:?} does not match {cout} outputs", self.shape(b)));
            }
        }
        let p = h * w;
        let mut y = vec![0.0; cout * p];
        if let Some(b) = bias {
            for (row, &bv) in y.chunks_exact_mut(p).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        gemm(
            1.0,
            self.value(weights).data(),
            Layout::row_major(cout, cin),
            self.value(input).data(),
            Layout::row_major(cin, p),
            1.0,
            &mut y,
            Layout::row_major(cout, p),
        );
        let mut inputs = vec![input, weights];
        inputs.extend(bias);
        Ok(self.push_op(Tensor::from_parts(vec![cout, h, w], y), &inputs, LinearOp))
    }
}
