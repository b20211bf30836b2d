//! Power spectrum of a real signal by direct DFT.

use std::f64::consts::PI;

use super::tape::{BackCtx, Backward, Tape, Var};
use super::tensor::Tensor;
use crate::error::{arg_err, Result};

struct Trig {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Trig {
    fn new(n: usize) -> Self {
        let (cos, sin) = (0..n)
            .map(|m| {
                let a = 2.0 * PI * m as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Trig { cos, sin }
    }
}

fn centered(signal: &[f64]) -> Vec<f64> {
    let m = signal.iter().sum::<f64>() / signal.len() as f64;
    signal.iter().map(|v| v - m).collect()
}

/// Real and imaginary DFT parts of the mean-removed, zero-padded signal for
/// bins `0..=pad/2`.
fn dft_half(signal: &[f64], pad: usize, trig: &Trig) -> (Vec<f64>, Vec<f64>) {
    let x = centered(signal);
    let bins = pad / 2 + 1;
    let mut re = vec![0.0; bins];
    let mut im = vec![0.0; bins];
    for k in 0..bins {
        let (mut r, mut i) = (0.0, 0.0);
        let mut idx = 0usize;
        for &v in &x {
            r += v * trig.cos[idx];
            i -= v * trig.sin[idx];
            idx += k;
            if idx >= pad {
                idx -= pad;
            }
        }
        re[k] = r;
        im[k] = i;
    }
    (re, im)
}

fn check_pad(len: usize, pad: usize) -> Result<()> {
    if len == 0 {
        return arg_err("power spectrum of an empty signal");
    }
    if pad < len {
        return arg_err(format!("pad length {pad} shorter than signal length {len}"));
    }
    Ok(())
}

/// Squared DFT magnitudes of the mean-removed signal zero-padded to `pad`;
/// bin `k` lies at `k · fs / pad`.
pub fn power_spectrum(signal: &[f64], pad: usize) -> Result<Vec<f64>> {
    check_pad(signal.len(), pad)?;
    let (re, im) = dft_half(signal, pad, &Trig::new(pad));
    Ok(re.iter().zip(&im).map(|(r, i)| r * r + i * i).collect())
}

struct DftPowerOp {
    pad: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Backward for DftPowerOp {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let t = ctx.value(inputs[0]).numel();
        let trig = Trig::new(self.pad);
        let g = grad.data();
        // dP_k/dx_t = 2 (Re_k cos θ_kt − Im_k sin θ_kt), then project out the mean.
        let mut dx = vec![0.0; t];
        for (k, &gk) in g.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            let (a, b) = (2.0 * gk * self.re[k], 2.0 * gk * self.im[k]);
            let mut idx = 0usize;
            for d in dx.iter_mut() {
                *d += a * trig.cos[idx] - b * trig.sin[idx];
                idx += k;
                if idx >= self.pad {
                    idx -= self.pad;
                }
            }
        }
        let m = dx.iter().sum::<f64>() / t as f64;
        dx.iter_mut().for_each(|v| *v -= m);
        Ok(vec![Some(Tensor::from_parts(vec![t], dx))])
    }
}

impl Tape {
    /// Differentiable [`power_spectrum`] of a 1-D value; output has `pad/2 + 1` bins.
    pub fn dft_power(&mut self, signal: Var, pad: usize) -> Result<Var> {
        let x = self.value(signal);
        if x.ndim() != 1 {
            return arg_err(format!("dft_power expects a 1-D signal, got {:?}", x.shape()));
        }
        check_pad(x.numel(), pad)?;
        let (re, im) = dft_half(x.data(), pad, &Trig::new(pad));
        let power: Vec<f64> = re.iter().zip(&im).map(|(r, i)| r * r + i * i).collect();
        let value = Tensor::from_parts(vec![power.len()], power);
        Ok(self.push_op(value, &[signal], DftPowerOp { pad, re, im }))
    }
}
