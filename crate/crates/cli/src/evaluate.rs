//! Checkpoint evaluation under resolution schedules.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rppg_core::backbone::Model;
use rppg_core::evalhr::{compute_metrics, eval_video, EvalProtocol, MetricsReport, VideoResult};
use rppg_core::synth::{apply_schedule, ResolutionSchedule};
use rppg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::parse_schedule;
use crate::data::Video;
use crate::plot;

#[derive(Clone, Debug)]
pub struct ScheduleEval {
    pub label: String,
    /// Pooled over every clip of every video.
    pub report: MetricsReport,
    pub videos: Vec<VideoResult>,
}

fn eval_one<P>(predict: &P, video: &Video, schedule: ResolutionSchedule, protocol: &EvalProtocol) -> Result<VideoResult>
where
    P: Fn(&[Tensor]) -> rppg_core::Result<Vec<f64>> + ?Sized,
{
    let frames = video.frames(0..video.len())?;
    // The schedule restarts in every clip window, so "128to64" reaches 64 at
    // the last frame of each clip.
    let scheduled = |clip: &[Tensor], _offset: usize| predict(&apply_schedule(clip, schedule)?);
    eval_video(&scheduled, &frames, &video.hr_bpm, protocol).with_context(|| format!("evaluating {}", video.name))
}

/// Evaluates every video under one schedule label with an arbitrary
/// predictor, videos spread over worker threads. Results are in video order.
pub fn eval_schedule_with<P>(predict: &P, videos: &[Video], label: &str, protocol: &EvalProtocol) -> Result<ScheduleEval>
where
    P: Fn(&[Tensor]) -> rppg_core::Result<Vec<f64>> + Sync + ?Sized,
{
    let schedule = parse_schedule(label)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(videos.len().max(1));
    let mut slots: Vec<Option<Result<VideoResult>>> = (0..videos.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    videos
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, v)| (i, eval_one(predict, v, schedule, protocol)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let results: Vec<VideoResult> = slots.into_iter().map(|r| r.expect("every video visited")).collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> =
        results.iter().flat_map(|r| r.report.per_clip.iter().map(|c| (c.pred_bpm, c.gt_bpm))).collect();
    Ok(ScheduleEval { label: label.to_string(), report: compute_metrics(&pairs, protocol)?, videos: results })
}

/// [`eval_schedule_with`] using the model's inference path (first PFE).
pub fn eval_schedule(model: &Model, videos: &[Video], label: &str, protocol: &EvalProtocol) -> Result<ScheduleEval> {
    eval_schedule_with(&|f: &[Tensor]| model.predict(f), videos, label, protocol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schedule: String,
    pub mae_bpm: f64,
    pub rmse_bpm: f64,
    pub clips: usize,
}

/// Writes `metrics_{label}.json` per schedule, `overlay_{label}.svg`,
/// `mae_vs_resolution.svg` and `summary.json` to `out`.
pub fn write_reports(evals: &[ScheduleEval], videos: &[Video], protocol: &EvalProtocol, out: &Path) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    for e in evals {
        fs::write(out.join(format!("metrics_{}.json", e.label)), serde_json::to_string_pretty(&e.report)? + "\n")?;
        if let (Some(v), Some(r)) = (videos.first(), e.videos.first()) {
            let l = protocol.clip_len;
            let title = format!("{} clip 0, schedule {}", v.name, e.label);
            plot::signal_overlay(&out.join(format!("overlay_{}.svg", e.label)), &title, &r.signals[0], &v.bvp[..l])?;
        }
        rows.push(SummaryRow {
            schedule: e.label.clone(),
            mae_bpm: e.report.mae_bpm,
            rmse_bpm: e.report.rmse_bpm,
            clips: e.report.per_clip.len(),
        });
    }
    let points: Vec<(String, f64)> = rows.iter().map(|r| (r.schedule.clone(), r.mae_bpm)).collect();
    plot::mae_vs_resolution(&out.join("mae_vs_resolution.svg"), &points)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(rows)
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<14} {:>9} {:>9} {:>6}\n", "schedule", "mae_bpm", "rmse_bpm", "clips");
    for r in rows {
        s += &format!("{:<14} {:>9.3} {:>9.3} {:>6}\n", r.schedule, r.mae_bpm, r.rmse_bpm, r.clips);
    }
    s
}
