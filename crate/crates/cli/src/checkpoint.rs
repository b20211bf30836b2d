//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "RPPGCKPT" | u32 version
//! str config_toml | u64 epoch | u64 step | str history_json
//! u32 count | count × (str name | u32 ndim | ndim × u64 dim | f64 data…)
//! u8 has_optimizer | [u64 adam_step | count × f64 m… | count × f64 v…]
//! ```
//!
//! where `str` is a u64 byte length followed by UTF-8. Strings are stored as
//! written, so loading and saving again reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rppg_core::backbone::Model;
use rppg_core::diffcore::AdamState;
use rppg_core::params::ParamStore;
use rppg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const MAGIC: &[u8; 8] = b"RPPGCKPT";
pub const VERSION: u32 = 1;

/// Losses and validation error of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_time: f64,
    pub l_fre: f64,
    pub l_crc: f64,
    pub total: f64,
    /// NaN without validation videos (stored as JSON null).
    #[serde(deserialize_with = "null_as_nan")]
    pub val_mae_bpm: f64,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} l_time={:.6} l_fre={:.6} l_crc={:.6} total={:.6} val_mae_bpm={:.4}",
            self.epoch, self.l_time, self.l_fre, self.l_crc, self.total, self.val_mae_bpm
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    /// Number of completed epochs.
    pub epoch: u64,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub history_json: String,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!("checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).context("checkpoint length field out of range")
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        Ok(String::from_utf8(self.take(n)?.to_vec())?)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).context("checkpoint array too large")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config_toml);
        w.u64(self.epoch);
        w.u64(self.step);
        w.str(&self.history_json);
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(st) => {
                w.u8(1);
                w.u64(st.step);
                for m in &st.m {
                    w.f64s(m.data());
                }
                for v in &st.v {
                    w.f64s(v.data());
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            bail!("not a checkpoint file (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!("unsupported checkpoint version {version} (expected {VERSION})");
        }
        let config_toml = r.str()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let history_json = r.str()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.len()).collect::<Result<_>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).context("parameter too large")?;
            params.insert(name, Tensor::new(&shape, r.f64s(n)?)?)?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let read_all = |r: &mut Reader| -> Result<Vec<Tensor>> {
                    params.tensors().iter().map(|p| Ok(Tensor::new(p.shape(), r.f64s(p.numel())?)?)).collect()
                };
                let m = read_all(&mut r)?;
                let v = read_all(&mut r)?;
                Some(AdamState { m, v, step })
            }
            b => bail!("bad optimizer flag {b}"),
        };
        if r.pos != buf.len() {
            bail!("{} trailing bytes after checkpoint", buf.len() - r.pos);
        }
        Ok(Self { config_toml, epoch, step, history_json, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_toml).context("checkpoint holds an unreadable config")
    }

    pub fn history(&self) -> Result<Vec<EpochLog>> {
        if self.history_json.is_empty() {
            return Ok(Vec::new());
        }
        Ok(serde_json::from_str(&self.history_json)?)
    }

    /// Rebuilds the model, checking the stored layout against its config.
    /// When `expected` is given, its model and flow sections must match the
    /// stored ones.
    pub fn model(&self, expected: Option<&RunConfig>) -> Result<Model> {
        let cfg = self.config()?;
        if let Some(e) = expected {
            if e.model != cfg.model || e.flow != cfg.flow {
                bail!("checkpoint was trained with a different model or flow config");
            }
        }
        let mut model = Model::new(cfg.model, cfg.flow, 0)?;
        let names_match = model.params.names() == self.params.names();
        let shapes_match = model.params.tensors().iter().zip(self.params.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !names_match || !shapes_match {
            bail!("checkpoint parameters do not match the layout of its config");
        }
        model.params = self.params.clone();
        Ok(model)
    }
}
