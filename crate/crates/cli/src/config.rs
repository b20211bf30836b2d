//! Run configuration, read from and written to TOML.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rppg_core::backbone::ModelConfig;
use rppg_core::evalhr::EvalProtocol;
use rppg_core::flow::FlowConfig;
use rppg_core::losses::LossConfig;
use rppg_core::synth::{MotionSchedule, ResolutionSchedule, Waveform};
use serde::{Deserialize, Serialize};

/// Seed used when a config does not set one.
pub const DEFAULT_SEED: u64 = 20240;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub fps: f64,
    /// Training clip length in frames.
    #[serde(rename = "T")]
    pub t: usize,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            fps: 30.0,
            t: 160,
            model: ModelConfig::default(),
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Weight of the cross-resolution term.
    pub alpha: f64,
    /// Downsampling factors drawn per view, relative to the 128×128 masters.
    pub scale_range: [f64; 2],
    pub horizontal_flip: bool,
    /// DFT length of the frequency loss.
    pub psd_pad: usize,
    /// Schedule used for the per-epoch validation MAE.
    pub val_schedule: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-5,
            batch: 2,
            epochs: 2,
            alpha: 0.1,
            scale_range: [1.0, 4.0],
            horizontal_flip: true,
            psd_pad: 2048,
            val_schedule: "64".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub frames_per_video: usize,
    /// Per-video heart rate is drawn uniformly from this range (bpm).
    pub hr_range: [f64; 2],
    pub amplitude: f64,
    pub waveform: Waveform,
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub motion: MotionSchedule,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_train: 20,
            num_val: 4,
            frames_per_video: 160,
            hr_range: [48.0, 120.0],
            amplitude: 0.02,
            waveform: Waveform::Sinusoid,
            noise_sigma: 0.01,
            drift_amplitude: 0.01,
            motion: MotionSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub clip_len: usize,
    pub band: [f64; 2],
    pub psd_pad: usize,
    /// Schedules evaluated when none are given on the command line.
    pub schedules: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = EvalProtocol::default();
        Self {
            clip_len: p.clip_len,
            band: p.band,
            psd_pad: p.psd_pad,
            schedules: ["128", "64", "32", "128to64", "64to32"].map(String::from).to_vec(),
        }
    }
}

/// Fixed resolutions of the resolution ablation.
pub const FIXED_LABELS: [&str; 9] = ["128", "96", "85", "75", "64", "51", "42", "36", "32"];
/// Within-clip varying resolutions.
pub const VARYING_LABELS: [&str; 4] = ["128to64", "64to32", "128to64to128", "64to32to64"];

/// Parses one of the supported schedule labels.
pub fn parse_schedule(label: &str) -> Result<ResolutionSchedule> {
    if !FIXED_LABELS.contains(&label) && !VARYING_LABELS.contains(&label) {
        let valid: Vec<&str> = FIXED_LABELS.iter().chain(&VARYING_LABELS).copied().collect();
        bail!("unknown schedule {label:?}; valid labels: {}", valid.join(", "));
    }
    Ok(label.parse()?)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flow.validate()?;
        self.protocol().validate()?;
        self.loss().validate()?;
        let tr = &self.train;
        if !(tr.scale_range[0] >= 1.0 && tr.scale_range[0] <= tr.scale_range[1]) {
            bail!("train.scale_range must satisfy 1 ≤ min ≤ max, got {:?}", tr.scale_range);
        }
        if 128.0 / tr.scale_range[1] < 8.0 {
            bail!("train.scale_range max {} shrinks frames below 8 pixels", tr.scale_range[1]);
        }
        if tr.batch == 0 || !(tr.lr > 0.0) || !(tr.weight_decay >= 0.0) {
            bail!("train needs batch ≥ 1, lr > 0 and weight_decay ≥ 0");
        }
        parse_schedule(&tr.val_schedule)?;
        for s in &self.eval.schedules {
            parse_schedule(s)?;
        }
        if self.t < 3 {
            bail!("T must be at least 3, got {}", self.t);
        }
        let d = &self.data;
        if !(40.0 <= d.hr_range[0] && d.hr_range[0] <= d.hr_range[1] && d.hr_range[1] <= 180.0) {
            bail!("data.hr_range must lie within [40, 180], got {:?}", d.hr_range);
        }
        if d.num_train > 0 && d.frames_per_video < self.t {
            bail!("data.frames_per_video {} is shorter than T {}", d.frames_per_video, self.t);
        }
        if d.num_val > 0 && d.frames_per_video < self.eval.clip_len {
            bail!("data.frames_per_video {} is shorter than eval.clip_len {}", d.frames_per_video, self.eval.clip_len);
        }
        Ok(())
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol { clip_len: self.eval.clip_len, fps: self.fps, band: self.eval.band, psd_pad: self.eval.psd_pad }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.train.alpha, fps: self.fps, band: self.eval.band, psd_pad: self.train.psd_pad }
    }
}
