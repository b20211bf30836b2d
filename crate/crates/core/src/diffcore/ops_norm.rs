//! Per-channel standardisation with a learned scale and shift.

use serde::{Deserialize, Serialize};

use super::tape::{BackCtx, Backward, Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Which elements share one set of statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One mean/variance per channel over the batch axis and all spatial axes.
    #[default]
    BatchSpatial,
    /// One mean/variance per (sample, channel) over the spatial axes only.
    PerSample,
}

struct NormOp {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    scope: NormScope,
}

/// Calls `f(group, channel, element range)` for every contiguous run of a group.
fn for_each_run(n: usize, c: usize, inner: usize, scope: NormScope, mut f: impl FnMut(usize, usize, std::ops::Range<usize>)) {
    for s in 0..n {
        for ch in 0..c {
            let group = match scope {
                NormScope::BatchSpatial => ch,
                NormScope::PerSample => s * c + ch,
            };
            let start = (s * c + ch) * inner;
            f(group, ch, start..start + inner);
        }
    }
}

impl Backward for NormOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let shape = ctx.value(inputs[0]).shape().to_vec();
        let gamma = ctx.value(inputs[1]).data();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let groups = self.inv_std.len();
        let g = grad.data();

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_dxh = vec![0.0; groups];
        let mut sum_dxh_xh = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        for_each_run(n, c, inner, self.scope, |grp, ch, r| {
            for i in r {
                let (gi, xh) = (g[i], self.x_hat[i]);
                dgamma[ch] += gi * xh;
                dbeta[ch] += gi;
                let dxh = gi * gamma[ch];
                sum_dxh[grp] += dxh;
                sum_dxh_xh[grp] += dxh * xh;
                count[grp] += 1;
            }
        });
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            for_each_run(n, c, inner, self.scope, |grp, ch, r| {
                let m = count[grp] as f64;
                let (mu_d, mu_dx) = (sum_dxh[grp] / m, sum_dxh_xh[grp] / m);
                for i in r {
                    let dxh = g[i] * gamma[ch];
                    dx[i] = self.inv_std[grp] * (dxh - mu_d - self.x_hat[i] * mu_dx);
                }
            });
            Tensor::from_parts(shape.clone(), dx)
        });
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

impl Tape {
    /// Normalises each channel of an `N × C × ...` value to zero mean and unit
    /// variance (ε = 1e-5 inside the square root), then applies `scale` and `shift`.
    pub fn channel_norm(&mut self, input: Var, scale: Var, shift: Var, scope: NormScope) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return shape_err(format!("channel_norm needs N × C × ..., got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return shape_err(format!("scale/shift must have {c} entries"));
        }
        let inner: usize = shape[2..].iter().product();
        let groups = match scope {
            NormScope::BatchSpatial => c,
            NormScope::PerSample => n * c,
        };
        let per_group = match scope {
            NormScope::BatchSpatial => n * inner,
            NormScope::PerSample => inner,
        };
        if per_group < 2 {
            return Err(Error::DegenerateVariance(format!(
                "statistics scope of {shape:?} holds a single element"
            )));
        }
        let x = self.value(input).data();
        let mut sum = vec![0.0; groups];
        for_each_run(n, c, inner, scope, |grp, _, r| sum[grp] += x[r].iter().sum::<f64>());
        let mean: Vec<f64> = sum.iter().map(|s| s / per_group as f64).collect();
        let mut sq = vec![0.0; groups];
        for_each_run(n, c, inner, scope, |grp, _, r| {
            sq[grp] += x[r].iter().map(|v| (v - mean[grp]).powi(2)).sum::<f64>();
        });
        let inv_std: Vec<f64> =
            sq.iter().map(|s| 1.0 / (s / per_group as f64 + NORM_EPS).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut x_hat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for_each_run(n, c, inner, scope, |grp, ch, r| {
            for i in r {
                let xh = (x[i] - mean[grp]) * inv_std[grp];
                x_hat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        });
        let op = NormOp { x_hat, inv_std, scope };
        Ok(self.push_op(Tensor::from_parts(shape, y), &[input, scale, shift], op))
    }
}
