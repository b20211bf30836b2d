//! Zero-padded cross-correlation and max pooling over 2 or 3 spatial dimensions.
//!
//! Both are implemented on a 3-D view; 2-D inputs use a unit depth axis. The
//! convolution lowers each output depth slice to an im2col matrix and a GEMM.

use super::gemm::{gemm, Layout};
use super::tape::{BackCtx, Backward, Tape, Var};
use super::tensor::Tensor;
use crate::error::{arg_err, shape_err, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.out[1] * self.out[2]
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn k_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }
}

fn lift3(v: &[usize], fill: usize) -> [usize; 3] {
    match v.len() {
        2 => [fill, v[0], v[1]],
        _ => [v[0], v[1], v[2]],
    }
}

fn check_dims(dims: usize) -> Result<()> {
    if dims == 2 || dims == 3 {
        Ok(())
    } else {
        arg_err(format!("only 2 or 3 spatial dims are supported, got {dims}"))
    }
}

/// Output positions per GEMM tile; keeps the lowered tile cache resident.
const TILE_COLS: usize = 512;

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with a reusable scratch buffer of at least `len` elements.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Output rows `rows` of one output depth slice, as a tile of `len()·ow` columns.
fn row_tiles(g: &Geometry) -> impl Iterator<Item = std::ops::Range<usize>> {
    let [_, oh, ow] = g.out;
    let step = (TILE_COLS / ow.max(1)).max(1);
    (0..oh).step_by(step).map(move |r| r..(r + step).min(oh))
}

/// Fills `col` (K × rows·OW) for output rows `rows` at output depth `od` of one
/// sample `x` (Cin × D × H × W).
fn im2col(x: &[f64], g: &Geometry, od: usize, rows: std::ops::Range<usize>, col: &mut [f64]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, _, ow] = g.out;
    let p = rows.len() * ow;
    let mut row = 0;
    for c in 0..g.cin {
        for kz in 0..kd {
            let iz = (od * g.stride[0] + kz) as isize - g.pad[0] as isize;
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    row += 1;
                    if iz < 0 || iz >= d as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let plane = &x[(c * d + iz as usize) * h * w..][..h * w];
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                        let seg = &mut dst[r * ow..(r + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let off = kx as isize - g.pad[2] as isize;
                        if g.stride[2] == 1 {
                            // valid ox satisfy 0 <= ox + off < w
                            let lo = (-off).clamp(0, ow as isize) as usize;
                            let hi = (w as isize - off).clamp(0, ow as isize) as usize;
                            seg[..lo].fill(0.0);
                            if hi > lo {
                                let s0 = (lo as isize + off) as usize;
                                seg[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                            }
                            seg[hi.max(lo)..].fill(0.0);
                        } else {
                            for (ox, v) in seg.iter_mut().enumerate() {
                                let ix = (ox * g.stride[2]) as isize + off;
                                *v = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im(col: &[f64], g: &Geometry, od: usize, rows: std::ops::Range<usize>, dx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, _, ow] = g.out;
    let p = rows.len() * ow;
    let mut row = 0;
    for c in 0..g.cin {
        for kz in 0..kd {
            let iz = (od * g.stride[0] + kz) as isize - g.pad[0] as isize;
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    row += 1;
                    if iz < 0 || iz >= d as isize {
                        continue;
                    }
                    let plane = &mut dx[(c * d + iz as usize) * h * w..][..h * w];
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let seg = &src[r * ow..(r + 1) * ow];
                        let off = kx as isize - g.pad[2] as isize;
                        for (ox, &v) in seg.iter().enumerate() {
                            let ix = (ox * g.stride[2]) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvOp {
    geo: Geometry,
}

impl Backward for ConvOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geo;
        let x = ctx.value(inputs[0]);
        let k = ctx.value(inputs[1]);
        let (kl, p) = (g.k_len(), g.out_plane());
        let ow = g.out[2];
        let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut dk = needs[1].then(|| vec![0.0; k.numel()]);
        let gy_all = grad.data();
        with_scratch(kl * TILE_COLS.max(ow), |scratch| {
            for n in 0..g.n {
                let xn = &x.data()[n * g.cin * g.in_vol()..][..g.cin * g.in_vol()];
                for od in 0..g.out[0] {
                    for rows in row_tiles(g) {
                        let cols = rows.len() * ow;
                        let col = &mut scratch[..kl * cols];
                        let gy = &gy_all[(n * g.cout * g.out[0] + od) * p + rows.start * ow..];
                        let gy_layout = Layout::with_row_stride(g.cout, cols, g.out[0] * p);
                        if let Some(dk) = dk.as_mut() {
                            im2col(xn, g, od, rows.clone(), col);
                            let lc = Layout::row_major(kl, cols).t();
                            gemm(1.0, gy, gy_layout, col, lc, 1.0, dk, Layout::row_major(g.cout, kl));
                        }
                        if let Some(dx) = dx.as_mut() {
                            let lk = Layout::row_major(g.cout, kl).t();
                            gemm(1.0, k.data(), lk, gy, gy_layout, 0.0, col, Layout::row_major(kl, cols));
                            let dxn = &mut dx[n * g.cin * g.in_vol()..][..g.cin * g.in_vol()];
                            col2im(col, g, od, rows.clone(), dxn);
                        }
                    }
                }
            }
        });
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
        ])
    }
}

struct MaxPoolOp {
    argmax: Vec<u32>,
}

impl Backward for MaxPoolOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.value(inputs[0]);
        let mut dx = vec![0.0; x.numel()];
        for (&i, &gv) in self.argmax.iter().zip(grad.data()) {
            dx[i as usize] += gv;
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

impl Tape {
    /// Cross-correlation of `input` (N × C_in × spatial) with `kernel`
    /// (C_out × C_in × kernel extents), zero padded, over `dims` ∈ {2, 3} spatial axes.
    pub fn conv(
        &mut self,
        input: Var,
        kernel: Var,
        stride: &[usize],
        padding: &[usize],
        dims: usize,
    ) -> Result<Var> {
        check_dims(dims)?;
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != dims + 2 || ks.len() != dims + 2 {
            return shape_err(format!("conv{dims}d expects rank {} input and kernel, got {xs:?} and {ks:?}", dims + 2));
        }
        if stride.len() != dims || padding.len() != dims || stride.contains(&0) {
            return arg_err(format!("conv{dims}d needs {dims} positive strides and paddings"));
        }
        if xs[1] != ks[1] {
            return shape_err(format!("conv: input has {} channels but kernel expects {}", xs[1], ks[1]));
        }
        let input3 = lift3(&xs[2..], 1);
        let kernel3 = lift3(&ks[2..], 1);
        let stride3 = lift3(stride, 1);
        let pad3 = lift3(padding, 0);
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input3[d] + 2 * pad3[d];
            if padded < kernel3[d] {
                return shape_err(format!("conv: kernel {ks:?} larger than padded input {xs:?}"));
            }
            out[d] = (padded - kernel3[d]) / stride3[d] + 1;
        }
        let geo = Geometry {
            n: xs[0],
            cin: xs[1],
            cout: ks[0],
            input: input3,
            kernel: kernel3,
            stride: stride3,
            pad: pad3,
            out,
        };
        let (kl, p) = (geo.k_len(), geo.out_plane());
        let ow = out[2];
        let mut y = vec![0.0; geo.n * geo.cout * geo.out_vol()];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        with_scratch(kl * TILE_COLS.max(ow), |scratch| {
            for n in 0..geo.n {
                let xn = &x[n * geo.cin * geo.in_vol()..][..geo.cin * geo.in_vol()];
                for od in 0..out[0] {
                    for rows in row_tiles(&geo) {
                        let cols = rows.len() * ow;
                        let col = &mut scratch[..kl * cols];
                        im2col(xn, &geo, od, rows.clone(), col);
                        let yo = &mut y[(n * geo.cout * out[0] + od) * p + rows.start * ow..];
                        gemm(
                            1.0,
                            k,
                            Layout::row_major(geo.cout, kl),
                            col,
                            Layout::row_major(kl, cols),
                            0.0,
                            yo,
                            Layout::with_row_stride(geo.cout, cols, out[0] * p),
                        );
                    }
                }
            }
        });
        let mut out_shape = vec![geo.n, geo.cout];
        out_shape.extend_from_slice(if dims == 2 { &out[1..] } else { &out[..] });
        Ok(self.push_op(Tensor::from_parts(out_shape, y), &[input, kernel], ConvOp { geo }))
    }

    /// Non-overlapping max pooling; every spatial extent must be divisible by its window.
    /// Ties route the gradient to the first maximum in scan order.
    pub fn max_pool(&mut self, input: Var, window: &[usize], dims: usize) -> Result<Var> {
        check_dims(dims)?;
        let xs = self.shape(input).to_vec();
        if xs.len() != dims + 2 || window.len() != dims || window.contains(&0) {
            return shape_err(format!("max_pool{dims}d: input {xs:?}, window {window:?}"));
        }
        for (e, w) in xs[2..].iter().zip(window) {
            if e % w != 0 {
                return shape_err(format!("max_pool: extent {e} not divisible by window {w}"));
            }
        }
        let [d, h, w] = lift3(&xs[2..], 1);
        let [wd, wh, ww] = lift3(window, 1);
        let (od, oh, ow) = (d / wd, h / wh, w / ww);
        let planes = xs[0] * xs[1];
        let x = self.value(input).data();
        let mut y = Vec::with_capacity(planes * od * oh * ow);
        let mut argmax = Vec::with_capacity(planes * od * oh * ow);
        for pl in 0..planes {
            let base = pl * d * h * w;
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for dz in 0..wd {
                            for dy in 0..wh {
                                let row = base + ((z * wd + dz) * h + yy * wh + dy) * w + xx * ww;
                                for (dxi, &v) in x[row..row + ww].iter().enumerate() {
                                    if best_i == usize::MAX || v > best {
                                        best = v;
                                        best_i = row + dxi;
                                    }
                                }
                            }
                        }
                        y.push(best);
                        argmax.push(best_i as u32);
                    }
                }
            }
        }
        let mut out_shape = xs[..2].to_vec();
        if dims == 3 {
            out_shape.push(od);
        }
        out_shape.extend_from_slice(&[oh, ow]);
        Ok(self.push_op(Tensor::from_parts(out_shape, y), &[input], MaxPoolOp { argmax }))
    }
}
