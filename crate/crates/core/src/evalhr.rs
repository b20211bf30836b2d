//! Heart-rate estimation by periodogram peak, error metrics, and the
//! non-overlapping clip protocol for whole videos.

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::diffcore::{power_spectrum, Tensor};
use crate::error::{arg_err, Error, Result};
use crate::losses::band_bins;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub clip_len: usize,
    pub fps: f64,
    /// Heart-rate band in bpm.
    pub band: [f64; 2],
    pub psd_pad: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { clip_len: 160, fps: 30.0, band: [40.0, 180.0], psd_pad: 8192 }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len < 32 {
            return arg_err(format!("clip_len must be at least 32, got {}", self.clip_len));
        }
        if self.psd_pad < self.clip_len {
            return arg_err(format!("psd_pad {} is shorter than clip_len {}", self.psd_pad, self.clip_len));
        }
        if !(self.fps > 0.0) || !(self.band[0] < self.band[1]) {
            return arg_err("fps must be positive and the band non-empty");
        }
        Ok(())
    }
}

/// Frequency (bpm) of the strongest in-band periodogram bin of `y`.
pub fn estimate_hr(y: &[f64], protocol: &EvalProtocol) -> Result<f64> {
    if y.len() > protocol.psd_pad {
        return arg_err(format!("signal of {} samples exceeds psd_pad {}", y.len(), protocol.psd_pad));
    }
    let power = power_spectrum(y, protocol.psd_pad)?;
    let (lo, hi) = band_bins(protocol.band, protocol.fps, protocol.psd_pad)?;
    let mut best = lo;
    for k in lo..=hi {
        if power[k] > power[best] {
            best = k;
        }
    }
    if !(power[best] > 0.0) {
        return Err(Error::NoPeak("signal has no in-band power".into()));
    }
    Ok(60.0 * best as f64 * protocol.fps / protocol.psd_pad as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub pred_bpm: f64,
    pub gt_bpm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: EvalProtocol,
    pub per_clip: Vec<ClipResult>,
    pub mae_bpm: f64,
    pub rmse_bpm: f64,
}

/// MAE and RMSE over (predicted, ground-truth) pairs.
pub fn compute_metrics(pairs: &[(f64, f64)], protocol: &EvalProtocol) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return arg_err("no predictions to score");
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let rmse = (pairs.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    Ok(MetricsReport {
        protocol: protocol.clone(),
        per_clip: pairs.iter().map(|&(pred_bpm, gt_bpm)| ClipResult { pred_bpm, gt_bpm }).collect(),
        mae_bpm: mae,
        // RMSE ≥ MAE mathematically; guard against last-ulp rounding.
        rmse_bpm: rmse.max(mae),
    })
}

/// Anything that maps a clip of frames to one signal sample per frame.
pub trait SignalModel {
    /// `offset` is the index of `frames[0]` within the video.
    fn predict(&self, frames: &[Tensor], offset: usize) -> Result<Vec<f64>>;
}

impl SignalModel for Model {
    fn predict(&self, frames: &[Tensor], _offset: usize) -> Result<Vec<f64>> {
        Model::predict(self, frames)
    }
}

impl<F> SignalModel for F
where
    F: Fn(&[Tensor], usize) -> Result<Vec<f64>>,
{
    fn predict(&self, frames: &[Tensor], offset: usize) -> Result<Vec<f64>> {
        self(frames, offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoResult {
    pub clip_hr: Vec<f64>,
    pub video_hr: f64,
    /// Per-clip predicted signals, in clip order.
    pub signals: Vec<Vec<f64>>,
    pub report: MetricsReport,
}

/// Splits a video into consecutive non-overlapping `clip_len` windows (the
/// remainder is dropped), predicts each, and scores the per-clip HR against
/// the mean of `gt_hr` over the window.
pub fn eval_video<M: SignalModel + ?Sized>(
    model: &M,
    frames: &[Tensor],
    gt_hr: &[f64],
    protocol: &EvalProtocol,
) -> Result<VideoResult> {
    protocol.validate()?;
    if gt_hr.len() != frames.len() {
        return arg_err(format!("{} HR labels for {} frames", gt_hr.len(), frames.len()));
    }
    let l = protocol.clip_len;
    let clips = frames.len() / l;
    if clips == 0 {
        return arg_err(format!("video of {} frames is shorter than clip_len {l}", frames.len()));
    }
    let mut pairs = Vec::with_capacity(clips);
    let mut signals = Vec::with_capacity(clips);
    for k in 0..clips {
        let window = k * l..(k + 1) * l;
        let y = model.predict(&frames[window.clone()], k * l)?;
        if y.len() != l {
            return Err(Error::Shape(format!("model returned {} samples for {l} frames", y.len())));
        }
        let pred = estimate_hr(&y, protocol)?;
        let gt = gt_hr[window].iter().sum::<f64>() / l as f64;
        pairs.push((pred, gt));
        signals.push(y);
    }
    let clip_hr: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let video_hr = clip_hr.iter().sum::<f64>() / clips as f64;
    Ok(VideoResult { clip_hr, video_hr, signals, report: compute_metrics(&pairs, protocol)? })
}
