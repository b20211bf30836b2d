//! Temporal face alignment.
//!
//! Frames are first resized to a fixed grid. A hidden state is then carried
//! through the clip in each direction: the previous state is warped onto the
//! current frame with optical flow, concatenated with the frame, and refined by
//! an entry conv plus a stack of residual blocks. A 1×1 projection merges the
//! two directions per frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NormScope, Tape, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::flow::{estimate_flow, warp, FlowConfig, FlowField};
use crate::params::{kaiming, Bound, ParamStore};

/// Scale applied to the He init of each residual branch's last conv, so a
/// freshly initialised stack stays close to the identity over long clips.
const RESIDUAL_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfaMode {
    #[default]
    Bidirectional,
    /// Online variant: forward states only.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn key(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfaConfig {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub num_resblocks: usize,
    /// Per-channel normalization inside each residual block.
    pub resblock_norm: bool,
    pub mode: TfaMode,
    pub flow: FlowConfig,
}

impl Default for TfaConfig {
    fn default() -> Self {
        Self {
            c: 16,
            h: 64,
            w: 64,
            num_resblocks: 5,
            resblock_norm: true,
            mode: TfaMode::Bidirectional,
            flow: FlowConfig::default(),
        }
    }
}

impl TfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_resblocks == 0 {
            return arg_err("TFA needs at least one residual block");
        }
        if self.c == 0 || self.h == 0 || self.w == 0 {
            return arg_err("TFA extents must be positive");
        }
        self.flow.validate()
    }
}

pub fn init_tfa<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TfaConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.c;
    for dir in [Direction::Forward, Direction::Backward] {
        let p = format!("{prefix}.{}", dir.key());
        store.insert(format!("{p}.entry.w"), kaiming(&[c, 3 + c, 3, 3], (3 + c) * 9, rng))?;
        store.insert(format!("{p}.entry.b"), Tensor::zeros(&[c]))?;
        for r in 0..cfg.num_resblocks {
            let q = format!("{p}.res{r}");
            store.insert(format!("{q}.conv1.w"), kaiming(&[c, c, 3, 3], c * 9, rng))?;
            store.insert(format!("{q}.conv1.b"), Tensor::zeros(&[c]))?;
            store.insert(format!("{q}.norm.scale"), Tensor::full(&[c], 1.0))?;
            store.insert(format!("{q}.norm.shift"), Tensor::zeros(&[c]))?;
            let w2 = kaiming(&[c, c, 3, 3], c * 9, rng).map(|v| v * RESIDUAL_INIT_GAIN);
            store.insert(format!("{q}.conv2.w"), w2)?;
            store.insert(format!("{q}.conv2.b"), Tensor::zeros(&[c]))?;
        }
    }
    store.insert(format!("{prefix}.agg.w"), kaiming(&[c, 2 * c], 2 * c, rng))?;
    store.insert(format!("{prefix}.agg.b"), Tensor::zeros(&[c]))
}

/// Parameters of one propagation direction, flattened as
/// `[entry.w, entry.b, (conv1.w, conv1.b, scale, shift, conv2.w, conv2.b)*]`.
#[derive(Clone, Debug)]
pub struct DirectionVars(Vec<Var>);

impl DirectionVars {
    pub fn bind(p: &Bound, prefix: &str, dir: Direction, num_resblocks: usize) -> Result<Self> {
        let base = format!("{prefix}.{}", dir.key());
        let mut v = vec![p.get(&format!("{base}.entry.w"))?, p.get(&format!("{base}.entry.b"))?];
        for r in 0..num_resblocks {
            for name in ["conv1.w", "conv1.b", "norm.scale", "norm.shift", "conv2.w", "conv2.b"] {
                v.push(p.get(&format!("{base}.res{r}.{name}"))?);
            }
        }
        Ok(Self(v))
    }

    /// Wraps vars already in the flattened order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AggVars {
    pub w: Var,
    pub b: Var,
}

impl AggVars {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self { w: p.get(&format!("{prefix}.agg.w"))?, b: p.get(&format!("{prefix}.agg.b"))? })
    }
}

/// Resizes every frame of a clip to `h×w` and stacks them to `T×3×h×w`.
/// Returns the per-frame handles as well as the stack.
pub fn interp_sequence(tape: &mut Tape, frames: &[Var], h: usize, w: usize) -> Result<(Vec<Var>, Var)> {
    if frames.is_empty() {
        return arg_err("cannot interpolate an empty clip");
    }
    let resized: Vec<Var> =
        frames.iter().map(|&f| tape.bilinear_resize(f, (h, w))).collect::<Result<_>>()?;
    let stacked = tape.stack(&resized)?;
    Ok((resized, stacked))
}

/// Flow for each step of a direction. Entry `i` maps the neighbour visited just
/// before frame `i` toward frame `i`; the first visited frame gets `None`.
pub fn direction_flows(frames: &[Tensor], dir: Direction, cfg: &FlowConfig) -> Result<Vec<Option<FlowField>>> {
    let t = frames.len();
    (0..t)
        .map(|i| {
            let prev = match dir {
                Direction::Forward => i.checked_sub(1),
                Direction::Backward => (i + 1 < t).then_some(i + 1),
            };
            prev.map(|j| estimate_flow(&frames[i], &frames[j], cfg)).transpose()
        })
        .collect()
}

/// One recurrence step on `x` (3×H×W) and the previous state (C×H×W).
fn step(
    tape: &mut Tape,
    x: Var,
    prev: Var,
    flow: Option<&FlowField>,
    p: &[Var],
    resblock_norm: bool,
) -> Result<Var> {
    let (c, h, w) = {
        let s = tape.shape(prev);
        (s[0], s[1], s[2])
    };
    let aligned = match flow {
        Some(f) => warp(tape, prev, f)?,
        None => prev,
    };
    let cat = tape.concat(&[x, aligned], 0)?;
    let cat = tape.reshape(cat, &[1, 3 + c, h, w])?;
    let y = tape.conv(cat, p[0], &[1, 1], &[1, 1], 2)?;
    let y = tape.add_channel_bias(y, p[1], 1)?;
    let mut hcur = tape.relu(y);
    for r in p[2..].chunks(6) {
        let z = tape.conv(hcur, r[0], &[1, 1], &[1, 1], 2)?;
        let mut z = tape.add_channel_bias(z, r[1], 1)?;
        if resblock_norm {
            z = tape.channel_norm(z, r[2], r[3], NormScope::BatchSpatial)?;
        }
        let z = tape.relu(z);
        let z = tape.conv(z, r[4], &[1, 1], &[1, 1], 2)?;
        let z = tape.add_channel_bias(z, r[5], 1)?;
        hcur = tape.add(hcur, z)?;
    }
    tape.reshape(hcur, &[c, h, w])
}

/// Runs one direction over the interpolated frames. Returns the states in
/// frame order. `flows[i]` aligns the previously visited state to frame `i`.
pub fn propagate(
    tape: &mut Tape,
    frames: &[Var],
    dir: Direction,
    p: &DirectionVars,
    flows: &[Option<FlowField>],
    cfg: &TfaConfig,
    checkpointed: bool,
) -> Result<Vec<Var>> {
    let t = frames.len();
    if t == 0 {
        return arg_err("cannot propagate over an empty clip");
    }
    if flows.len() != t {
        return shape_err(format!("{} flows for {t} frames", flows.len()));
    }
    let zero = tape.constant(Tensor::zeros(&[cfg.c, cfg.h, cfg.w]));
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..t).collect(),
        Direction::Backward => (0..t).rev().collect(),
    };
    let mut states = vec![zero; t];
    let mut prev = zero;
    for i in order {
        let norm = cfg.resblock_norm;
        let h = if checkpointed {
            let flow = flows[i].clone();
            let mut inputs = vec![frames[i], prev];
            inputs.extend(&p.0);
            tape.checkpoint(&inputs, move |t, v| {
                Ok(vec![step(t, v[0], v[1], flow.as_ref(), &v[2..], norm)?])
            })?[0]
        } else {
            step(tape, frames[i], prev, flows[i].as_ref(), &p.0, norm)?
        };
        states[i] = h;
        prev = h;
    }
    Ok(states)
}

/// Per frame: concat(backward, forward) on channels, then a 1×1 projection
/// `2C→C`. Without backward states (single mode) zeros take their place.
pub fn aggregate(tape: &mut Tape, h_f: &[Var], h_b: Option<&[Var]>, p: AggVars) -> Result<Var> {
    if let Some(b) = h_b {
        if b.len() != h_f.len() {
            return shape_err(format!("{} backward vs {} forward states", b.len(), h_f.len()));
        }
    }
    if h_f.is_empty() {
        return arg_err("no states to aggregate");
    }
    let zero = tape.constant(Tensor::zeros(tape.shape(h_f[0])));
    let mut outs = Vec::with_capacity(h_f.len());
    for (i, &f) in h_f.iter().enumerate() {
        let b = h_b.map_or(zero, |b| b[i]);
        let cat = tape.concat(&[b, f], 0)?;
        outs.push(tape.linear_per_position(cat, p.w, Some(p.b))?);
    }
    tape.stack(&outs)
}

/// Full block: arbitrary-resolution frames (3×h_i×w_i) to `T×C×H×W`.
pub fn tfa_forward(
    tape: &mut Tape,
    frames: &[Var],
    params: &Bound,
    prefix: &str,
    cfg: &TfaConfig,
    checkpointed: bool,
) -> Result<Var> {
    cfg.validate()?;
    let (xhat, _) = interp_sequence(tape, frames, cfg.h, cfg.w)?;
    let values: Vec<Tensor> = xhat.iter().map(|&x| tape.value(x).clone()).collect();
    let fwd = DirectionVars::bind(params, prefix, Direction::Forward, cfg.num_resblocks)?;
    let flows = direction_flows(&values, Direction::Forward, &cfg.flow)?;
    let h_f = propagate(tape, &xhat, Direction::Forward, &fwd, &flows, cfg, checkpointed)?;
    let h_b = match cfg.mode {
        TfaMode::Single => None,
        TfaMode::Bidirectional => {
            let bwd = DirectionVars::bind(params, prefix, Direction::Backward, cfg.num_resblocks)?;
            let flows = direction_flows(&values, Direction::Backward, &cfg.flow)?;
            Some(propagate(tape, &xhat, Direction::Backward, &bwd, &flows, cfg, checkpointed)?)
        }
    };
    aggregate(tape, &h_f, h_b.as_deref(), AggVars::bind(params, prefix)?)
}
