//! Variant comparison: train (or load) one model per mode and evaluate each
//! under a set of schedules.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rppg_core::backbone::TfaSetting;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_schedule, RunConfig};
use crate::data::{open_split, Split};
use crate::evaluate::eval_schedule;
use crate::train::{train, LAST_CKPT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    PfeNoRae,
    PfeNoCrc,
    Pfe,
    Tfa,
    TfaSinglePfe,
    TfaPfe,
    /// PFE with an `n×n` neighbourhood.
    PfeN(usize),
}

pub const MODE_NAMES: [&str; 11] = [
    "baseline",
    "pfe-no-rae",
    "pfe-no-crc",
    "pfe",
    "tfa",
    "tfa-single-pfe",
    "tfa-pfe",
    "pfe-n1",
    "pfe-n3",
    "pfe-n5",
    "pfe-n7",
];

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Mode::Baseline,
            "pfe-no-rae" => Mode::PfeNoRae,
            "pfe-no-crc" => Mode::PfeNoCrc,
            "pfe" => Mode::Pfe,
            "tfa" => Mode::Tfa,
            "tfa-single-pfe" => Mode::TfaSinglePfe,
            "tfa-pfe" => Mode::TfaPfe,
            "pfe-n1" => Mode::PfeN(1),
            "pfe-n3" => Mode::PfeN(3),
            "pfe-n5" => Mode::PfeN(5),
            "pfe-n7" => Mode::PfeN(7),
            _ => bail!("unknown mode {s:?}; valid modes: {}", MODE_NAMES.join(", ")),
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Baseline => f.write_str("baseline"),
            Mode::PfeNoRae => f.write_str("pfe-no-rae"),
            Mode::PfeNoCrc => f.write_str("pfe-no-crc"),
            Mode::Pfe => f.write_str("pfe"),
            Mode::Tfa => f.write_str("tfa"),
            Mode::TfaSinglePfe => f.write_str("tfa-single-pfe"),
            Mode::TfaPfe => f.write_str("tfa-pfe"),
            Mode::PfeN(n) => write!(f, "pfe-n{n}"),
        }
    }
}

/// Comma-separated mode list.
pub fn parse_modes(list: &str) -> Result<Vec<Mode>> {
    let modes: Vec<Mode> = list.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
    if modes.is_empty() {
        bail!("no modes given");
    }
    Ok(modes)
}

impl Mode {
    /// The run config of this variant derived from `base`. Variants without
    /// PFE also drop the cross-resolution term, which constrains PFE outputs.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let m = &mut c.model;
        let (pfe, tfa, crc) = match self {
            Mode::Baseline => (false, TfaSetting::Off, false),
            Mode::PfeNoRae | Mode::Pfe | Mode::PfeN(_) => (true, TfaSetting::Off, true),
            Mode::PfeNoCrc => (true, TfaSetting::Off, false),
            Mode::Tfa => (false, TfaSetting::Bidirectional, false),
            Mode::TfaSinglePfe => (true, TfaSetting::Single, true),
            Mode::TfaPfe => (true, TfaSetting::Bidirectional, true),
        };
        m.pfe = pfe;
        m.tfa = tfa;
        m.rae = pfe && self != Mode::PfeNoRae;
        if let Mode::PfeN(n) = self {
            m.n = n;
        }
        if !crc {
            c.train.alpha = 0.0;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub checkpoint: String,
    /// One entry per schedule, in the report's schedule order.
    pub mae_bpm: Vec<f64>,
    pub rmse_bpm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schedules: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<16}", "mode");
        for l in &self.schedules {
            s += &format!(" {l:>12}");
        }
        s.push('\n');
        for r in &self.rows {
            s += &format!("{:<16}", r.mode);
            for v in &r.mae_bpm {
                s += &format!(" {v:>12.3}");
            }
            s.push('\n');
        }
        s
    }

    pub fn mae(&self, mode: &str, schedule: &str) -> Option<f64> {
        let j = self.schedules.iter().position(|l| l == schedule)?;
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.mae_bpm[j])
    }
}

pub struct AblateArgs<'a> {
    pub base: &'a RunConfig,
    /// Training dataset; its validation split is evaluated unless
    /// `eval_data` is given.
    pub data: &'a Path,
    pub eval_data: Option<&'a Path>,
    pub out: &'a Path,
    pub modes: &'a [Mode],
    pub schedules: &'a [String],
    /// Directory holding `{mode}.ckpt` or `{mode}/last.ckpt` to reuse instead
    /// of training.
    pub checkpoints: Option<&'a Path>,
}

fn existing_checkpoint(dir: &Path, mode: Mode) -> Option<PathBuf> {
    [dir.join(format!("{mode}.ckpt")), dir.join(mode.to_string()).join(LAST_CKPT)].into_iter().find(|p| p.exists())
}

pub fn ablate(a: &AblateArgs) -> Result<AblationReport> {
    for s in a.schedules {
        parse_schedule(s)?;
    }
    let eval_root = a.eval_data.unwrap_or(a.data);
    let videos = open_split(eval_root, Split::Val)?;
    if videos.is_empty() {
        bail!("no validation videos under {}", eval_root.display());
    }
    fs::create_dir_all(a.out)?;
    let mut rows = Vec::new();
    for &mode in a.modes {
        let cfg = mode.apply(a.base);
        let ckpt = match a.checkpoints.and_then(|d| existing_checkpoint(d, mode)) {
            Some(p) => p,
            None => {
                log::info!("training variant {mode}");
                train(&cfg, a.data, &a.out.join(mode.to_string()), None)?.last
            }
        };
        let model = Checkpoint::load(&ckpt)?
            .model(Some(&cfg))
            .with_context(|| format!("checkpoint {} does not hold variant {mode}", ckpt.display()))?;
        let mut row = AblationRow { mode: mode.to_string(), checkpoint: ckpt.display().to_string(), mae_bpm: vec![], rmse_bpm: vec![] };
        for s in a.schedules {
            let e = eval_schedule(&model, &videos, s, &cfg.protocol())?;
            log::info!("{mode} @ {s}: mae {:.3}", e.report.mae_bpm);
            row.mae_bpm.push(e.report.mae_bpm);
            row.rmse_bpm.push(e.report.rmse_bpm);
        }
        rows.push(row);
    }
    let report = AblationReport { schedules: a.schedules.to_vec(), rows };
    fs::write(a.out.join("ablation.txt"), report.table())?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
