//! Deterministic synthetic pulsatile face videos.
//!
//! A 128×128 master frame shows a shaded skin ellipse with a few darker facial
//! features over a static background. The skin colour is modulated by a pulse
//! waveform, the face undergoes optional rigid motion, and seeded pixel noise
//! and slow illumination drift are added before each frame is resized to the
//! size given by a resolution schedule.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{resize_bilinear, Tensor};
use crate::error::{arg_err, Error, Result};

pub const MIN_SIZE: usize = 16;
pub const MAX_SIZE: usize = 128;
/// Per-channel pulse weights (R, G, B).
pub const PULSE_RGB: [f64; 3] = [1.0, 0.7, 0.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveform {
    #[default]
    Sinusoid,
    PpgLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseParams {
    pub hr_bpm: f64,
    pub fps: f64,
    /// Peak intensity modulation on the [0, 1] scale.
    pub amplitude: f64,
    pub waveform: Waveform,
}

impl Default for PulseParams {
    fn default() -> Self {
        Self { hr_bpm: 72.0, fps: 30.0, amplitude: 0.02, waveform: Waveform::Sinusoid }
    }
}

impl PulseParams {
    pub fn validate(&self) -> Result<()> {
        if !(40.0..=180.0).contains(&self.hr_bpm) {
            return arg_err(format!("heart rate {} bpm outside [40, 180]", self.hr_bpm));
        }
        // Zero amplitude is allowed: it renders a pulse-free control clip.
        if !(self.amplitude >= 0.0) || !(self.fps > 0.0) {
            return arg_err("pulse amplitude must be non-negative and fps positive");
        }
        Ok(())
    }
}

/// Circular distance between two phases in [0, 1).
fn phase_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn ppg_cycle(phase: f64) -> f64 {
    let g = |centre: f64, width: f64| {
        let d = phase_dist(phase, centre);
        (-d * d / (2.0 * width * width)).exp()
    };
    g(0.2, 0.08) + 0.45 * g(0.55, 0.12)
}

/// Zero-mean, unit-peak pulse of `t` samples. Amplitude is applied at render time.
pub fn gen_pulse(t: usize, p: &PulseParams) -> Result<Vec<f64>> {
    p.validate()?;
    if t == 0 {
        return arg_err("pulse length must be positive");
    }
    let f = p.hr_bpm / 60.0;
    let raw: Vec<f64> = (0..t)
        .map(|i| {
            let phase = (f * i as f64 / p.fps).rem_euclid(1.0);
            match p.waveform {
                Waveform::Sinusoid => (2.0 * PI * phase).sin(),
                Waveform::PpgLike => ppg_cycle(phase),
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / t as f64;
    let centred: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let peak = centred.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(if peak > 0.0 { centred.iter().map(|v| v / peak).collect() } else { centred })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub base_size: usize,
    /// Ellipse centre (row, col) in master pixels.
    pub center: [f64; 2],
    /// Semi-axes (vertical, horizontal).
    pub axes: [f64; 2],
    pub skin_rgb: [f64; 3],
    pub background_rgb: [f64; 3],
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub drift_period_s: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            base_size: 128,
            center: [64.0, 64.0],
            axes: [44.0, 34.0],
            skin_rgb: [0.78, 0.56, 0.45],
            background_rgb: [0.20, 0.24, 0.30],
            noise_sigma: 0.01,
            drift_amplitude: 0.01,
            drift_period_s: 12.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    #[default]
    Static,
    Translate,
    Rotate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionProfile {
    /// From rest to the maximum over the clip.
    #[default]
    Linear,
    /// Oscillates between ± maximum.
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSchedule {
    pub kind: MotionKind,
    pub max_translation_px: f64,
    pub max_rotation_deg: f64,
    pub profile: MotionProfile,
    /// Period of the sinusoidal profile.
    pub period_s: f64,
}

impl Default for MotionSchedule {
    fn default() -> Self {
        Self {
            kind: MotionKind::Static,
            max_translation_px: 8.0,
            max_rotation_deg: 35.0,
            profile: MotionProfile::Linear,
            period_s: 8.0,
        }
    }
}

impl MotionSchedule {
    fn level(&self, i: usize, t: usize, fps: f64) -> f64 {
        match self.profile {
            MotionProfile::Linear => {
                if t > 1 {
                    i as f64 / (t - 1) as f64
                } else {
                    0.0
                }
            }
            MotionProfile::Sinusoidal => (2.0 * PI * i as f64 / (fps * self.period_s)).sin(),
        }
    }

    /// (row shift, col shift, angle in radians) at frame `i` of `t`.
    fn pose(&self, i: usize, t: usize, fps: f64) -> (f64, f64, f64) {
        let s = self.level(i, t, fps);
        match self.kind {
            MotionKind::Static => (0.0, 0.0, 0.0),
            MotionKind::Translate => (0.5 * s * self.max_translation_px, s * self.max_translation_px, 0.0),
            MotionKind::Rotate => (0.0, 0.0, s * self.max_rotation_deg.to_radians()),
        }
    }
}

/// Per-frame face resolution pattern. Labels: `"64"` (fixed), `"128to64"`
/// (ramp down), `"128to64to128"` (down then back up).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResolutionSchedule {
    Fixed(usize),
    RampDown { start: usize, end: usize },
    RampDownUp { start: usize, end: usize },
}

impl ResolutionSchedule {
    pub fn validate(&self) -> Result<()> {
        let sizes: &[usize] = match self {
            Self::Fixed(s) => &[*s],
            Self::RampDown { start, end } | Self::RampDownUp { start, end } => &[*start, *end],
        };
        if sizes.iter().any(|s| !(MIN_SIZE..=MAX_SIZE).contains(s)) {
            return arg_err(format!("schedule {self} has sizes outside [{MIN_SIZE}, {MAX_SIZE}]"));
        }
        Ok(())
    }
}

impl fmt::Display for ResolutionSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(s) => write!(f, "{s}"),
            Self::RampDown { start, end } => write!(f, "{start}to{end}"),
            Self::RampDownUp { start, end } => write!(f, "{start}to{end}to{start}"),
        }
    }
}

impl FromStr for ResolutionSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split("to").collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Argument(format!("unreadable schedule label {s:?}")))?;
        let sched = match nums.as_slice() {
            [a] => Self::Fixed(*a),
            [a, b] => Self::RampDown { start: *a, end: *b },
            [a, b, c] if a == c => Self::RampDownUp { start: *a, end: *b },
            _ => return arg_err(format!("unreadable schedule label {s:?}")),
        };
        sched.validate()?;
        Ok(sched)
    }
}

fn lerp_round(a: usize, b: usize, num: usize, den: usize) -> usize {
    let v = a as f64 + (b as f64 - a as f64) * num as f64 / den as f64;
    v.round() as usize
}

/// Square frame size for each of `t` frames.
pub fn schedule_resolution(schedule: ResolutionSchedule, t: usize) -> Result<Vec<(usize, usize)>> {
    schedule.validate()?;
    let sizes: Vec<usize> = match schedule {
        ResolutionSchedule::Fixed(s) => vec![s; t],
        ResolutionSchedule::RampDown { start, end } => {
            if t < 2 {
                return arg_err("ramp schedules need at least 2 frames");
            }
            (0..t).map(|i| lerp_round(start, end, i, t - 1)).collect()
        }
        ResolutionSchedule::RampDownUp { start, end } => {
            if t < 3 {
                return arg_err("down-up schedules need at least 3 frames");
            }
            let mid = t / 2;
            (0..t)
                .map(|i| {
                    if i <= mid {
                        lerp_round(start, end, i, mid)
                    } else {
                        lerp_round(end, start, i - mid, t - 1 - mid)
                    }
                })
                .collect()
        }
    };
    Ok(sizes.into_iter().map(|s| (s, s)).collect())
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSpec {
    pub frames: usize,
    pub pulse: PulseParams,
    pub scene: SceneParams,
    pub motion: MotionSchedule,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            frames: 160,
            pulse: PulseParams::default(),
            scene: SceneParams::default(),
            motion: MotionSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    /// `3×h_i×w_i` RGB frames in [0, 1].
    pub frames: Vec<Tensor>,
    pub gt_signal: Vec<f64>,
    pub gt_hr: f64,
    pub fps: f64,
    pub seed: u64,
}

/// Facial features as (row offset, col offset, row σ, col σ, darkening) relative
/// to the ellipse centre in its own frame.
const FEATURES: [(f64, f64, f64, f64, f64); 7] = [
    (-12.0, -13.0, 3.5, 5.0, 0.55),
    (-12.0, 13.0, 3.5, 5.0, 0.55),
    (-20.0, -13.0, 1.5, 6.0, 0.35),
    (-20.0, 13.0, 1.5, 6.0, 0.35),
    (2.0, 0.0, 7.0, 3.0, 0.15),
    (20.0, 0.0, 3.0, 9.0, 0.45),
    (8.0, -18.0, 5.0, 5.0, -0.08),
];

fn check_scene(scene: &SceneParams, motion: &MotionSchedule) -> Result<()> {
    if scene.noise_sigma < 0.0 || !scene.noise_sigma.is_finite() {
        return arg_err("noise sigma must be non-negative");
    }
    if scene.base_size < MIN_SIZE {
        return arg_err(format!("base size must be at least {MIN_SIZE}"));
    }
    let reach = match motion.kind {
        MotionKind::Static => [scene.axes[0], scene.axes[1]],
        MotionKind::Translate => [
            scene.axes[0] + 0.5 * motion.max_translation_px.abs(),
            scene.axes[1] + motion.max_translation_px.abs(),
        ],
        MotionKind::Rotate => {
            let r = scene.axes[0].max(scene.axes[1]);
            [r, r]
        }
    };
    let size = scene.base_size as f64;
    for k in 0..2 {
        if scene.center[k] - reach[k] < 0.0 || scene.center[k] + reach[k] > size {
            return arg_err("skin ellipse leaves the frame under the given motion");
        }
    }
    Ok(())
}

/// Renders the 128×128 master frame at one time step before noise and drift.
fn render_master(scene: &SceneParams, pose: (f64, f64, f64), pulse: f64, out: &mut [f64]) {
    let n = scene.base_size;
    let plane = n * n;
    let (dy, dx, theta) = pose;
    let (s, c) = theta.sin_cos();
    let [cy, cx] = scene.center;
    let [ay, ax] = scene.axes;
    for i in 0..n {
        for j in 0..n {
            let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
            // position in the face's own frame (inverse of rotate-then-translate)
            let (ry, rx) = (py - cy - dy, px - cx - dx);
            let (fy, fx) = (c * ry + s * rx, -s * ry + c * rx);
            let r = ((fy / ay).powi(2) + (fx / ax).powi(2)).sqrt();
            let inside = ((1.0 - r) * ay.min(ax) + 0.5).clamp(0.0, 1.0);
            // static background with a mild diagonal gradient
            let bg_shade = 0.85 + 0.3 * (i + j) as f64 / (2 * n) as f64;
            let mut shade = 1.0 - 0.25 * r * r;
            for &(oy, ox, sy, sx, depth) in &FEATURES {
                let g = (-((fy - oy) / sy).powi(2) / 2.0 - ((fx - ox) / sx).powi(2) / 2.0).exp();
                shade *= 1.0 - depth * g;
            }
            for ch in 0..3 {
                let skin = scene.skin_rgb[ch] * shade + pulse * PULSE_RGB[ch];
                let bg = scene.background_rgb[ch] * bg_shade;
                out[ch * plane + i * n + j] = inside * skin + (1.0 - inside) * bg;
            }
        }
    }
}

/// Clamps to [0, 1] and rounds through f32, matching what the frame files hold.
pub fn quantize(t: Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0) as f32 as f64)
}

/// Renders the master-resolution frames of a clip.
pub fn render_masters(spec: &ClipSpec, seed: u64) -> Result<SyntheticClip> {
    check_scene(&spec.scene, &spec.motion)?;
    let t = spec.frames;
    let pulse = gen_pulse(t, &spec.pulse)?;
    let fps = spec.pulse.fps;
    let n = spec.scene.base_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.scene.noise_sigma.max(0.0)).map_err(|e| Error::Argument(e.to_string()))?;
    let mut frames = Vec::with_capacity(t);
    let mut buf = vec![0.0; 3 * n * n];
    for (i, &p) in pulse.iter().enumerate() {
        let pose = spec.motion.pose(i, t, fps);
        render_master(&spec.scene, pose, spec.pulse.amplitude * p, &mut buf);
        if spec.scene.noise_sigma > 0.0 {
            buf.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        let period = spec.scene.drift_period_s * fps;
        let drift = 1.0 + spec.scene.drift_amplitude * (2.0 * PI * i as f64 / period).sin();
        let frame = Tensor::new(&[3, n, n], buf.iter().map(|v| v * drift).collect())?;
        frames.push(quantize(frame));
    }
    Ok(SyntheticClip { frames, gt_signal: pulse, gt_hr: spec.pulse.hr_bpm, fps, seed })
}

/// Resizes each frame to the size the schedule assigns it.
pub fn apply_schedule(frames: &[Tensor], schedule: ResolutionSchedule) -> Result<Vec<Tensor>> {
    let sizes = schedule_resolution(schedule, frames.len())?;
    frames.iter().zip(sizes).map(|(f, s)| Ok(quantize(resize_bilinear(f, s)?))).collect()
}

/// Full render: master frames, then per-frame resize by `schedule`.
pub fn render_clip(spec: &ClipSpec, schedule: ResolutionSchedule, seed: u64) -> Result<SyntheticClip> {
    let mut clip = render_masters(spec, seed)?;
    clip.frames = apply_schedule(&clip.frames, schedule)?;
    Ok(clip)
}

/// Clip as stored on disk: frames plus the per-frame ground-truth table.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipData {
    pub frames: Vec<Tensor>,
    pub time_s: Vec<f64>,
    pub bvp: Vec<f64>,
    pub hr_bpm: Vec<f64>,
}

impl ClipData {
    pub fn from_clip(clip: &SyntheticClip) -> Self {
        let t = clip.frames.len();
        Self {
            frames: clip.frames.clone(),
            time_s: (0..t).map(|i| i as f64 / clip.fps).collect(),
            bvp: clip.gt_signal.clone(),
            hr_bpm: vec![clip.gt_hr; t],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Path of frame `i` inside a clip directory.
pub fn frame_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("frame_{i:05}.bin"))
}

/// Writes `frame_%05d.bin` files (u32 LE height, u32 LE width, then f32 LE
/// planar RGB) and `gt.csv`.
pub fn write_clip(dir: &Path, clip: &ClipData) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        let s = f.shape();
        if s.len() != 3 || s[0] != 3 {
            return arg_err(format!("frame {i} is not 3×h×w"));
        }
        let mut out = BufWriter::new(fs::File::create(frame_path(dir, i))?);
        out.write_all(&(s[1] as u32).to_le_bytes())?;
        out.write_all(&(s[2] as u32).to_le_bytes())?;
        for &v in f.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.flush()?;
    }
    let mut gt = BufWriter::new(fs::File::create(dir.join("gt.csv"))?);
    writeln!(gt, "index,time_s,bvp,hr_bpm")?;
    for i in 0..clip.len() {
        writeln!(gt, "{i},{},{},{}", clip.time_s[i], clip.bvp[i], clip.hr_bpm[i])?;
    }
    gt.flush()?;
    Ok(())
}

/// Reads one frame file written by [`write_clip`].
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Format(format!("{} is truncated", path.display())));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if h == 0 || w == 0 || bytes.len() != 8 + 4 * 3 * h * w {
        return Err(Error::Format(format!("{} has a bad size for {h}×{w}", path.display())));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(&[3, h, w], data)
}

/// Reads only `gt.csv` of a clip directory; `frames` is left empty.
pub fn read_labels(dir: &Path) -> Result<ClipData> {
    let gt = BufReader::new(fs::File::open(dir.join("gt.csv"))?);
    let mut lines = gt.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != "index,time_s,bvp,hr_bpm" {
        return Err(Error::Format(format!("unexpected gt.csv header {header:?}")));
    }
    let mut clip = ClipData { frames: Vec::new(), time_s: Vec::new(), bvp: Vec::new(), hr_bpm: Vec::new() };
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |k: usize| -> Result<f64> {
            cols.get(k)
                .and_then(|c| c.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("gt.csv row {row}: bad column {k}")))
        };
        if parse(0)? as usize != row {
            return Err(Error::Format(format!("gt.csv row {row}: index out of order")));
        }
        clip.time_s.push(parse(1)?);
        clip.bvp.push(parse(2)?);
        clip.hr_bpm.push(parse(3)?);
    }
    Ok(clip)
}

/// Loads a clip directory written by [`write_clip`] (or prepared externally in
/// the same layout).
pub fn read_clip(dir: &Path) -> Result<ClipData> {
    let mut clip = read_labels(dir)?;
    clip.frames = (0..clip.bvp.len()).map(|i| read_frame(&frame_path(dir, i))).collect::<Result<_>>()?;
    Ok(clip)
}
