//! Dual-view training.
//!
//! Each sample is a random `T`-frame window of a training video. Two scale
//! factors are drawn from `scale_range` and the 128×128 masters are resized
//! to `round(128/s)` for each view, after one shared horizontal-flip decision.
//! View one runs through the first PFE instance, view two through the second;
//! TFA and the backbone are shared.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rppg_core::backbone::{Model, View};
use rppg_core::diffcore::{adam_step, resize_bilinear, AdamConfig, AdamState};
use rppg_core::losses::overall_loss;
use rppg_core::synth::{quantize, MAX_SIZE};
use rppg_core::{Tape, Tensor, Var};

use crate::checkpoint::{Checkpoint, EpochLog};
use crate::config::{parse_schedule, RunConfig};
use crate::data::{derive_seed, open_split, Manifest, Split, Video};
use crate::evaluate::eval_schedule;

pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train.log";

const TAG_INIT: u64 = 10;
const TAG_EPOCH: u64 = 11;
const TAG_STEP: u64 = 12;

/// The two resized views of one training window plus its labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub view1: Vec<Tensor>,
    pub view2: Vec<Tensor>,
    pub bvp: Tensor,
    pub hr_bpm: f64,
}

fn flip_horizontal(f: &Tensor) -> Tensor {
    let s = f.shape();
    let w = s[2];
    let src = f.data();
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    Tensor::new(s, out).expect("same shape")
}

fn view_size(scale: f64) -> usize {
    (MAX_SIZE as f64 / scale).round() as usize
}

/// Draws the window, scales and flip for one sample and builds both views.
pub fn draw_sample(video: &Video, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let t = cfg.t;
    if video.len() < t {
        bail!("video {} has {} frames, fewer than T = {t}", video.name, video.len());
    }
    let start = rng.random_range(0..=video.len() - t);
    let [lo, hi] = cfg.train.scale_range;
    let mut scale = || if hi > lo { rng.random_range(lo..hi) } else { lo };
    let (s1, s2) = (scale(), scale());
    let flip = cfg.train.horizontal_flip && rng.random_bool(0.5);
    let masters = video.frames(start..start + t)?;
    let masters: Vec<Tensor> = if flip { masters.iter().map(flip_horizontal).collect() } else { masters };
    let resize = |s: f64| -> Result<Vec<Tensor>> {
        let n = view_size(s);
        masters.iter().map(|f| Ok(quantize(resize_bilinear(f, (n, n))?))).collect()
    };
    let hr = video.hr_bpm[start..start + t].iter().sum::<f64>() / t as f64;
    Ok(Sample {
        view1: resize(s1)?,
        view2: resize(s2)?,
        bvp: Tensor::from_vec(video.bvp[start..start + t].to_vec()),
        hr_bpm: hr,
    })
}

/// Loss terms `[time, fre, crc, total]` and parameter gradients of one sample.
pub fn sample_grads(model: &Model, sample: &Sample, cfg: &RunConfig) -> Result<([f64; 4], Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let consts = |tape: &mut Tape, fs: &[Tensor]| -> Vec<Var> { fs.iter().map(|f| tape.constant(f.clone())).collect() };
    let v1 = consts(&mut tape, &sample.view1);
    let v2 = consts(&mut tape, &sample.view2);
    let y1 = model.forward(&mut tape, &v1, &bound, View::First, true)?;
    let y2 = model.forward(&mut tape, &v2, &bound, View::Second, true)?;
    let terms = overall_loss(&mut tape, y1, y2, &sample.bvp, sample.hr_bpm, &cfg.loss())?;
    let values = terms.values(&tape);
    if !values[3].is_finite() {
        return Ok((values, Vec::new()));
    }
    tape.backward(terms.total)?;
    Ok((values, bound.grads(&tape)))
}

fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig { lr: cfg.train.lr, weight_decay: cfg.train.weight_decay, ..AdamConfig::default() }
}

/// Configs agree on everything except the epoch budget.
fn resumable(a: &RunConfig, b: &RunConfig) -> bool {
    let mut a = a.clone();
    a.train.epochs = b.train.epochs;
    &a == b
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub steps: u64,
    pub last: PathBuf,
    pub best: PathBuf,
}

struct State {
    model: Model,
    adam: AdamState,
    epoch: u64,
    step: u64,
    history: Vec<EpochLog>,
}

fn initial_state(cfg: &RunConfig, resume: Option<&Path>) -> Result<State> {
    match resume {
        None => {
            let model = Model::new(cfg.model.clone(), cfg.flow.clone(), derive_seed(cfg.seed, TAG_INIT, 0))?;
            let adam = AdamState::new(model.params.tensors());
            Ok(State { model, adam, epoch: 0, step: 0, history: Vec::new() })
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if !resumable(&ck.config()?, cfg) {
                bail!("checkpoint {} was written under a different config", path.display());
            }
            let model = ck.model(Some(cfg))?;
            let adam = ck.optimizer.clone().context("checkpoint has no optimizer state to resume from")?;
            Ok(State { model, adam, epoch: ck.epoch, step: ck.step, history: ck.history()? })
        }
    }
}

fn snapshot(cfg: &RunConfig, s: &State) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config_toml: cfg.to_toml(),
        epoch: s.epoch,
        step: s.step,
        history_json: serde_json::to_string(&s.history)?,
        params: s.model.params.clone(),
        optimizer: Some(s.adam.clone()),
    })
}

/// Validation MAE of `model` on `videos` under the configured schedule; NaN
/// when there are no validation videos.
pub fn validate(model: &Model, videos: &[Video], cfg: &RunConfig) -> Result<f64> {
    if videos.is_empty() {
        return Ok(f64::NAN);
    }
    parse_schedule(&cfg.train.val_schedule)?;
    Ok(eval_schedule(model, videos, &cfg.train.val_schedule, &cfg.protocol())?.report.mae_bpm)
}

/// Trains for `cfg.train.epochs` epochs (counting those already in a resumed
/// checkpoint), writing `last.ckpt`, `best.ckpt` and `train.log` to `out`.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    Manifest::load(data)?;
    let train_videos = open_split(data, Split::Train)?;
    if train_videos.is_empty() {
        bail!("dataset {} has no training videos", data.display());
    }
    let val_videos = open_split(data, Split::Val)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (last, best) = (out.join(LAST_CKPT), out.join(BEST_CKPT));
    let adam_cfg = adam_config(cfg);
    let mut s = initial_state(cfg, resume)?;
    let mut best_mae = s.history.iter().map(|h| h.val_mae_bpm).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let have_best = resume.is_some() && best.exists();

    let batch = cfg.train.batch;
    while (s.epoch as usize) < cfg.train.epochs {
        let epoch = s.epoch as usize;
        let mut order: Vec<usize> = (0..train_videos.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_EPOCH, epoch as u64)));
        let mut sums = [0.0; 4];
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_STEP, s.step));
            let mut acc: Option<Vec<Tensor>> = None;
            for &vi in chunk {
                let sample = draw_sample(&train_videos[vi], cfg, &mut rng)?;
                let (terms, grads) = sample_grads(&s.model, &sample, cfg)?;
                if terms.iter().any(|v| !v.is_finite()) {
                    bail!(
                        "non-finite loss at step {} (epoch {}, video {}): time={} fre={} crc={} total={}",
                        s.step + 1,
                        epoch + 1,
                        train_videos[vi].name,
                        terms[0],
                        terms[1],
                        terms[2],
                        terms[3]
                    );
                }
                for (a, v) in sums.iter_mut().zip(terms) {
                    *a += v;
                }
                count += 1;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&grads) {
                            x.add_assign(g)?;
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let grads: Vec<Tensor> = acc.expect("non-empty batch").iter().map(|g| g.map(|v| v * inv)).collect();
            adam_step(&mut s.model.params.tensors_mut(), &grads, &mut s.adam, &adam_cfg)?;
            s.step += 1;
            log::debug!("step {} total {:.6}", s.step, sums[3] / count as f64);
        }
        let n = count as f64;
        let val_mae = validate(&s.model, &val_videos, cfg)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            l_time: sums[0] / n,
            l_fre: sums[1] / n,
            l_crc: sums[2] / n,
            total: sums[3] / n,
            val_mae_bpm: val_mae,
        };
        log::info!("{}", entry.line());
        s.history.push(entry);
        s.epoch += 1;
        let ck = snapshot(cfg, &s)?;
        ck.save(&last)?;
        if (!have_best && epoch == 0) || val_mae < best_mae {
            best_mae = best_mae.min(val_mae);
            ck.save(&best)?;
        }
        let log_text: String = s.history.iter().map(|h| h.line() + "\n").collect();
        fs::write(out.join(TRAIN_LOG), log_text)?;
    }
    if !last.exists() {
        snapshot(cfg, &s)?.save(&last)?;
    }
    if !best.exists() {
        fs::copy(&last, &best)?;
    }
    Ok(TrainOutcome { history: s.history, steps: s.step, last, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_reverses_rows() {
        let t = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(flip_horizontal(&t).data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn view_sizes_cover_the_scale_range() {
        assert_eq!(view_size(1.0), 128);
        assert_eq!(view_size(2.0), 64);
        assert_eq!(view_size(4.0), 32);
    }

    #[test]
    fn epoch_budget_may_change_on_resume() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 7;
        assert!(resumable(&a, &b));
        b.train.lr = 1.0;
        assert!(!resumable(&a, &b));
    }
}
