//! Synthetic dataset generation and loading.
//!
//! Layout: `manifest.json` plus `train/video_NNN/` and `val/video_NNN/`, each a
//! clip directory of 128×128 master frames in the synth export format.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rppg_core::synth::{
    frame_path, read_frame, read_labels, render_masters, write_clip, ClipData, ClipSpec, MotionKind, PulseParams,
    SceneParams,
};
use rppg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};

pub const MANIFEST: &str = "manifest.json";

/// Mixes a master seed with a purpose tag and an index (splitmix64 finaliser).
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TRAIN: u64 = 1;
const TAG_VAL: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub split: Split,
    /// Relative to the dataset root.
    pub dir: String,
    pub seed: u64,
    pub hr_bpm: f64,
    pub frames: usize,
    pub motion: MotionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub fps: f64,
    pub data: DataConfig,
    pub videos: Vec<VideoEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("missing dataset manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("unreadable manifest {}", path.display()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.videos.iter().filter(move |v| v.split == split)
    }
}

fn clip_spec(data: &DataConfig, fps: f64, hr: f64) -> ClipSpec {
    ClipSpec {
        frames: data.frames_per_video,
        pulse: PulseParams { hr_bpm: hr, fps, amplitude: data.amplitude, waveform: data.waveform },
        scene: SceneParams { noise_sigma: data.noise_sigma, drift_amplitude: data.drift_amplitude, ..Default::default() },
        motion: data.motion.clone(),
    }
}

fn plan(cfg: &RunConfig) -> Vec<VideoEntry> {
    let d = &cfg.data;
    let mut out = Vec::new();
    for (split, tag, count) in [(Split::Train, TAG_TRAIN, d.num_train), (Split::Val, TAG_VAL, d.num_val)] {
        for i in 0..count {
            let seed = derive_seed(cfg.seed, tag, i as u64);
            let hr = ChaCha8Rng::seed_from_u64(seed).random_range(d.hr_range[0]..=d.hr_range[1]);
            out.push(VideoEntry {
                split,
                dir: format!("{}/video_{i:03}", split.dir_name()),
                seed,
                hr_bpm: hr,
                frames: d.frames_per_video,
                motion: d.motion.kind,
            });
        }
    }
    out
}

/// Renders every video of `cfg.data` under `out`. Refuses a non-empty `out`
/// unless `force` is set, in which case its previous contents are removed.
pub fn generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            bail!("output directory {} is not empty (use --force to overwrite)", out.display());
        }
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    fs::create_dir_all(out)?;
    let videos = plan(cfg);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(videos.len().max(1));
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let videos = &videos;
                s.spawn(move || -> Result<()> {
                    for v in videos.iter().skip(w).step_by(workers) {
                        let spec = clip_spec(&cfg.data, cfg.fps, v.hr_bpm);
                        let clip = render_masters(&spec, v.seed)?;
                        write_clip(&out.join(&v.dir), &ClipData::from_clip(&clip))?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().map_err(|_| anyhow::anyhow!("generation worker panicked"))??;
        }
        Ok(())
    })?;
    let manifest = Manifest { master_seed: cfg.seed, fps: cfg.fps, data: cfg.data.clone(), videos };
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// One video on disk, with labels in memory and frames read on demand.
#[derive(Clone, Debug)]
pub struct Video {
    pub name: String,
    pub dir: PathBuf,
    pub bvp: Vec<f64>,
    pub hr_bpm: Vec<f64>,
}

impl Video {
    pub fn open(dir: &Path, name: impl Into<String>) -> Result<Self> {
        let labels = read_labels(dir).with_context(|| format!("reading labels of {}", dir.display()))?;
        if labels.bvp.is_empty() {
            bail!("video {} has no frames", dir.display());
        }
        Ok(Self { name: name.into(), dir: dir.to_path_buf(), bvp: labels.bvp, hr_bpm: labels.hr_bpm })
    }

    pub fn len(&self) -> usize {
        self.bvp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvp.is_empty()
    }

    pub fn frames(&self, range: std::ops::Range<usize>) -> Result<Vec<Tensor>> {
        range
            .map(|i| read_frame(&frame_path(&self.dir, i)).with_context(|| format!("reading frame {i} of {}", self.name)))
            .collect()
    }
}

/// Videos of one split of a generated dataset, or, when `root` has no
/// manifest, externally prepared clip directories (`root` itself if it holds a
/// `gt.csv`, otherwise each subdirectory that does).
pub fn open_split(root: &Path, split: Split) -> Result<Vec<Video>> {
    if root.join(MANIFEST).exists() {
        let m = Manifest::load(root)?;
        return m.split(split).map(|v| Video::open(&root.join(&v.dir), v.dir.clone())).collect();
    }
    if !root.exists() {
        bail!("data directory {} does not exist", root.display());
    }
    if root.join("gt.csv").exists() {
        return Ok(vec![Video::open(root, root.display().to_string())?]);
    }
    let mut dirs: Vec<PathBuf> =
        fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("gt.csv").exists()).collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no manifest and no clip directories under {}", root.display());
    }
    dirs.iter().map(|d| Video::open(d, d.file_name().unwrap_or_default().to_string_lossy())).collect()
}
