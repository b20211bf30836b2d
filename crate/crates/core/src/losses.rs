//! Training objectives: negative Pearson in time, softmax cross-entropy over the
//! in-band power spectrum, and the L1 agreement between two resolution views.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{arg_err, shape_err, Error, Result};

/// Added to the product of standard deviations in the Pearson denominator.
pub const PEARSON_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub fps: f64,
    /// Heart-rate band in bpm.
    pub band: [f64; 2],
    pub psd_pad: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.1, fps: 30.0, band: [40.0, 180.0], psd_pad: 2048 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.fps > 0.0) || !(self.band[0] < self.band[1]) {
            return arg_err(format!("invalid loss config {self:?}"));
        }
        Ok(())
    }
}

/// Inclusive range of DFT bins whose frequency (bpm) lies in `band`.
pub fn band_bins(band: [f64; 2], fps: f64, pad: usize) -> Result<(usize, usize)> {
    let per_bin = 60.0 * fps / pad as f64;
    let lo = (band[0] / per_bin).ceil() as usize;
    let hi = ((band[1] / per_bin).floor() as usize).min(pad / 2);
    if lo > hi {
        return arg_err(format!("no DFT bins in band {band:?} at pad {pad}"));
    }
    Ok((lo, hi))
}

/// `1 − ρ(y, gt)` for two length-`T` signals.
pub fn pearson_loss(tape: &mut Tape, y: Var, gt: Var) -> Result<Var> {
    let t = tape.shape(y).to_vec();
    if t.len() != 1 || tape.shape(gt) != t.as_slice() {
        return shape_err(format!("pearson needs equal 1-D signals, got {t:?} and {:?}", tape.shape(gt)));
    }
    if t[0] < 3 {
        return arg_err(format!("pearson needs at least 3 samples, got {}", t[0]));
    }
    let g = tape.value(gt).data();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    if g.iter().all(|&v| v == mean) {
        return Err(Error::DegenerateTarget("ground-truth signal is constant".into()));
    }
    let yc = tape.center(y);
    let gc = tape.center(gt);
    let prod = tape.mul(yc, gc)?;
    let cov = tape.sum(prod);
    let ysq = tape.square(yc);
    let ysq = tape.sum(ysq);
    let sy = tape.sqrt(ysq);
    let gsq = tape.square(gc);
    let gsq = tape.sum(gsq);
    let sg = tape.sqrt(gsq);
    let den = tape.mul(sy, sg)?;
    let den = tape.add_scalar(den, PEARSON_EPS);
    let rho = tape.div(cov, den)?;
    let neg = tape.neg(rho);
    Ok(tape.add_scalar(neg, 1.0))
}

/// In-band cross-entropy given a full one-sided power spectrum (`pad/2 + 1` bins).
pub fn freq_ce_from_power(tape: &mut Tape, power: Var, hr_gt: f64, cfg: &LossConfig) -> Result<Var> {
    if hr_gt < cfg.band[0] || hr_gt > cfg.band[1] {
        return arg_err(format!("ground-truth HR {hr_gt} bpm outside band {:?}", cfg.band));
    }
    let (lo, hi) = band_bins(cfg.band, cfg.fps, cfg.psd_pad)?;
    let per_bin = 60.0 * cfg.fps / cfg.psd_pad as f64;
    let target = ((hr_gt / per_bin).round() as usize).clamp(lo, hi);
    let logits = tape.slice(power, 0, lo, hi - lo + 1)?;
    tape.softmax_cross_entropy(logits, target - lo)
}

/// Softmax cross-entropy of the in-band power spectrum of `y` against the bin
/// nearest `hr_gt`. Power values are used as logits unscaled, so the loss
/// depends on the amplitude of `y`.
pub fn freq_ce_loss(tape: &mut Tape, y: Var, hr_gt: f64, cfg: &LossConfig) -> Result<Var> {
    let power = tape.dft_power(y, cfg.psd_pad)?;
    freq_ce_from_power(tape, power, hr_gt, cfg)
}

/// Mean absolute difference.
pub fn crc_loss(tape: &mut Tape, y1: Var, y2: Var) -> Result<Var> {
    if tape.shape(y1) != tape.shape(y2) {
        return shape_err(format!("crc needs equal lengths, got {:?} and {:?}", tape.shape(y1), tape.shape(y2)));
    }
    let d = tape.sub(y1, y2)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Handles to each term of the overall objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub time: Var,
    pub fre: Var,
    pub crc: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> [f64; 4] {
        [self.time, self.fre, self.crc, self.total].map(|v| tape.value(v).item())
    }
}

/// `½(time₁ + time₂) + ½(fre₁ + fre₂) + α·crc(Y₁, Y₂)`.
pub fn overall_loss(
    tape: &mut Tape,
    y1: Var,
    y2: Var,
    gt: &Tensor,
    hr_gt: f64,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let g = tape.constant(gt.clone());
    let t1 = pearson_loss(tape, y1, g)?;
    let t2 = pearson_loss(tape, y2, g)?;
    let time = tape.add(t1, t2)?;
    let time = tape.scale(time, 0.5);
    let f1 = freq_ce_loss(tape, y1, hr_gt, cfg)?;
    let f2 = freq_ce_loss(tape, y2, hr_gt, cfg)?;
    let fre = tape.add(f1, f2)?;
    let fre = tape.scale(fre, 0.5);
    let crc = crc_loss(tape, y1, y2)?;
    let weighted = tape.scale(crc, cfg.alpha);
    let sup = tape.add(time, fre)?;
    let total = tape.add(sup, weighted)?;
    Ok(LossTerms { time, fre, crc, total })
}
