//! Dense optical flow by coarse-to-fine Horn–Schunck, and backward warping.
//!
//! Convention: [`estimate_flow`]`(a, b)` returns the field that maps `b` toward
//! `a`, i.e. sampling `b` at `(row + v, col + u)` approximates `a` at
//! `(row, col)`. If `b` is `a` shifted two pixels to the right, `u ≈ 2`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{resize_bilinear, warp_bilinear, Tape, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
    /// Horn–Schunck regularization weight α on a 0–255 intensity scale.
    pub smoothness: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { pyramid_levels: 3, iterations_per_level: 60, smoothness: 15.0 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.iterations_per_level == 0 {
            return arg_err("flow needs at least one level and one iteration");
        }
        if !(self.smoothness > 0.0) {
            return arg_err(format!("flow smoothness must be positive, got {}", self.smoothness));
        }
        Ok(())
    }
}

/// Per-pixel displacement in pixels, stored as a `2×H×W` tensor (u then v).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    field: Arc<Tensor>,
}

impl FlowField {
    pub fn new(field: Tensor) -> Result<Self> {
        if field.ndim() != 3 || field.shape()[0] != 2 {
            return shape_err(format!("flow field must be 2×H×W, got {:?}", field.shape()));
        }
        Ok(Self { field: Arc::new(field) })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { field: Arc::new(Tensor::zeros(&[2, h, w])) }
    }

    pub fn height(&self) -> usize {
        self.field.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.field.shape()[2]
    }

    pub fn u(&self) -> &[f64] {
        &self.field.data()[..self.height() * self.width()]
    }

    pub fn v(&self) -> &[f64] {
        &self.field.data()[self.height() * self.width()..]
    }

    pub fn tensor(&self) -> &Arc<Tensor> {
        &self.field
    }

    pub fn max_abs(&self) -> f64 {
        self.field.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Debug dump with header `row,col,u,v`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "row,col,u,v")?;
        let w = self.width();
        for (k, (u, v)) in self.u().iter().zip(self.v()).enumerate() {
            writeln!(out, "{},{},{u},{v}", k / w, k % w)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// ITU-R 601 luma of a `3×H×W` RGB frame.
pub fn to_luminance(frame: &Tensor) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return shape_err(format!("luminance expects 3×H×W, got {s:?}"));
    }
    let plane = s[1] * s[2];
    let d = frame.data();
    let y = (0..plane).map(|k| 0.299 * d[k] + 0.587 * d[plane + k] + 0.114 * d[2 * plane + k]);
    Tensor::new(&[s[1], s[2]], y.collect())
}

/// Largest usable level count: frames must be at least 2^levels pixels on each side.
fn effective_levels(h: usize, w: usize, requested: usize) -> usize {
    let mut levels = requested;
    while levels > 1 && (h.min(w) >> levels) == 0 {
        levels -= 1;
    }
    levels
}

fn gradients(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |i: usize, j: usize| img[i * w + j];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for i in 0..h {
        let (iu, id) = (i.saturating_sub(1), (i + 1).min(h - 1));
        for j in 0..w {
            let (jl, jr) = (j.saturating_sub(1), (j + 1).min(w - 1));
            if jr > jl {
                gx[i * w + j] = (at(i, jr) - at(i, jl)) / (jr - jl) as f64;
            }
            if id > iu {
                gy[i * w + j] = (at(id, j) - at(iu, j)) / (id - iu) as f64;
            }
        }
    }
    (gx, gy)
}

/// Horn–Schunck neighbourhood average (edge 1/6, corner 1/12), border replicated.
fn hs_average(f: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let at = |i: usize, j: usize, out: &mut [f64]| {
        let (iu, id) = (i.saturating_sub(1), (i + 1).min(h - 1));
        let (jl, jr) = (j.saturating_sub(1), (j + 1).min(w - 1));
        let edge = f[iu * w + j] + f[id * w + j] + f[i * w + jl] + f[i * w + jr];
        let corner = f[iu * w + jl] + f[iu * w + jr] + f[id * w + jl] + f[id * w + jr];
        out[i * w + j] = edge / 6.0 + corner / 12.0;
    };
    if h < 3 || w < 3 {
        for i in 0..h {
            for j in 0..w {
                at(i, j, out);
            }
        }
        return;
    }
    for j in 0..w {
        at(0, j, out);
        at(h - 1, j, out);
    }
    for i in 1..h - 1 {
        at(i, 0, out);
        at(i, w - 1, out);
        let (up, mid, down) = (&f[(i - 1) * w..i * w], &f[i * w..(i + 1) * w], &f[(i + 1) * w..(i + 2) * w]);
        let row = &mut out[i * w..(i + 1) * w];
        for j in 1..w - 1 {
            let edge = up[j] + down[j] + mid[j - 1] + mid[j + 1];
            let corner = up[j - 1] + up[j + 1] + down[j - 1] + down[j + 1];
            row[j] = edge / 6.0 + corner / 12.0;
        }
    }
}

/// Jacobi sweeps between re-linearizations within one level.
const SWEEPS_PER_WARP: usize = 10;

/// One pyramid level: repeatedly warp `b` by the current estimate and run
/// Jacobi sweeps on the Horn–Schunck energy linearized around it.
fn refine_level(a: &Tensor, b: &Tensor, init: &Tensor, cfg: &FlowConfig) -> Result<Tensor> {
    let mut flow = init.clone();
    let mut left = cfg.iterations_per_level;
    while left > 0 {
        let sweeps = left.min(SWEEPS_PER_WARP);
        flow = linearized_sweeps(a, b, &flow, cfg.smoothness, sweeps)?;
        left -= sweeps;
    }
    Ok(flow)
}

fn linearized_sweeps(a: &Tensor, b: &Tensor, init: &Tensor, smoothness: f64, sweeps: usize) -> Result<Tensor> {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let plane = h * w;
    let bw = warp_bilinear(b, init)?;
    let (ax, ay) = gradients(a.data(), h, w);
    let (bx, by) = gradients(bw.data(), h, w);
    let ix: Vec<f64> = ax.iter().zip(&bx).map(|(p, q)| 0.5 * (p + q)).collect();
    let iy: Vec<f64> = ay.iter().zip(&by).map(|(p, q)| 0.5 * (p + q)).collect();
    let it: Vec<f64> = bw.data().iter().zip(a.data()).map(|(p, q)| p - q).collect();
    let alpha2 = smoothness * smoothness;
    let denom: Vec<f64> = ix.iter().zip(&iy).map(|(x, y)| alpha2 + x * x + y * y).collect();

    let (u0, v0) = init.data().split_at(plane);
    let mut u = u0.to_vec();
    let mut v = v0.to_vec();
    let mut ub = vec![0.0; plane];
    let mut vb = vec![0.0; plane];
    for _ in 0..sweeps {
        hs_average(&u, h, w, &mut ub);
        hs_average(&v, h, w, &mut vb);
        for k in 0..plane {
            let r = (ix[k] * (ub[k] - u0[k]) + iy[k] * (vb[k] - v0[k]) + it[k]) / denom[k];
            u[k] = ub[k] - ix[k] * r;
            v[k] = vb[k] - iy[k] * r;
        }
    }
    u.extend(v);
    Tensor::new(&[2, h, w], u)
}

/// Flow mapping `frame_b` toward `frame_a`. Both are `3×H×W` RGB in [0, 1].
pub fn estimate_flow(frame_a: &Tensor, frame_b: &Tensor, cfg: &FlowConfig) -> Result<FlowField> {
    cfg.validate()?;
    if frame_a.shape() != frame_b.shape() {
        return shape_err(format!(
            "flow frames differ in shape: {:?} vs {:?}",
            frame_a.shape(),
            frame_b.shape()
        ));
    }
    let la = to_luminance(frame_a)?.map(|x| 255.0 * x);
    let lb = to_luminance(frame_b)?.map(|x| 255.0 * x);
    let (h, w) = (la.shape()[0], la.shape()[1]);
    let levels = effective_levels(h, w, cfg.pyramid_levels);
    if levels < cfg.pyramid_levels {
        log::warn!("{h}×{w} frames support only {levels} of {} pyramid levels", cfg.pyramid_levels);
    }

    let mut pyr = vec![(la.reshape(&[1, h, w])?, lb.reshape(&[1, h, w])?)];
    for _ in 1..levels {
        let (pa, pb) = pyr.last().expect("non-empty");
        let (ph, pw) = (pa.shape()[1], pa.shape()[2]);
        let target = ((ph / 2).max(1), (pw / 2).max(1));
        pyr.push((resize_bilinear(pa, target)?, resize_bilinear(pb, target)?));
    }

    let mut flow: Option<Tensor> = None;
    for (a, b) in pyr.iter().rev() {
        let (lh, lw) = (a.shape()[1], a.shape()[2]);
        let init = match flow {
            None => Tensor::zeros(&[2, lh, lw]),
            Some(coarse) => {
                let (ch, cw) = (coarse.shape()[1], coarse.shape()[2]);
                let mut up = resize_bilinear(&coarse, (lh, lw))?;
                let (sx, sy) = (lw as f64 / cw as f64, lh as f64 / ch as f64);
                let d = up.data_mut();
                d[..lh * lw].iter_mut().for_each(|x| *x *= sx);
                d[lh * lw..].iter_mut().for_each(|x| *x *= sy);
                up
            }
        };
        flow = Some(refine_level(a, b, &init, cfg)?);
    }
    FlowField::new(flow.expect("at least one level"))
}

/// Backward-warps `C×H×W` features by a constant flow field.
pub fn warp(tape: &mut Tape, features: Var, flow: &FlowField) -> Result<Var> {
    tape.grid_sample(features, flow.tensor().clone())
}
