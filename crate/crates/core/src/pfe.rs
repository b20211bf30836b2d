//! Physiological-signal feature extraction.
//!
//! A frame of any size goes through a conv block (5×5 conv, norm, relu, 2×2 max
//! pool) and is then mapped to a fixed `C×H×W` grid: bilinear resize, stacking of
//! each position's `n×n` neighbourhood on channels, two constant channels holding
//! the scale ratio between source and target extents, and a per-position MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NormScope, Tape, Tensor, Var};
use crate::error::{arg_err, Result};
use crate::params::{kaiming, Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfeConfig {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub mlp_hidden: usize,
    /// Append the two scale-ratio channels to the MLP input.
    pub rae: bool,
}

impl Default for PfeConfig {
    fn default() -> Self {
        Self { c: 16, h: 64, w: 64, n: 3, mlp_hidden: 128, rae: true }
    }
}

impl PfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n % 2 == 0 {
            return arg_err(format!("neighbourhood size must be odd, got {}", self.n));
        }
        if self.c == 0 || self.h == 0 || self.w == 0 || self.mlp_hidden == 0 {
            return arg_err("PFE extents and widths must be positive");
        }
        Ok(())
    }

    /// Input width of the first MLP layer.
    pub fn mlp_in(&self) -> usize {
        self.n * self.n * self.c + if self.rae { 2 } else { 0 }
    }
}

/// Adds conv block parameters (`3→c`, 5×5) under `prefix`.
pub fn init_conv_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.conv.w"), kaiming(&[c, 3, 5, 5], 3 * 25, rng))?;
    store.insert(format!("{prefix}.conv.b"), Tensor::zeros(&[c]))?;
    store.insert(format!("{prefix}.norm.scale"), Tensor::full(&[c], 1.0))?;
    store.insert(format!("{prefix}.norm.shift"), Tensor::zeros(&[c]))
}

/// Adds the MLP parameters under `prefix`.
pub fn init_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &PfeConfig,
    rng: &mut R,
) -> Result<()> {
    let (i, h, c) = (cfg.mlp_in(), cfg.mlp_hidden, cfg.c);
    store.insert(format!("{prefix}.mlp1.w"), kaiming(&[h, i], i, rng))?;
    store.insert(format!("{prefix}.mlp1.b"), Tensor::zeros(&[h]))?;
    store.insert(format!("{prefix}.mlp2.w"), kaiming(&[c, h], h, rng))?;
    store.insert(format!("{prefix}.mlp2.b"), Tensor::zeros(&[c]))
}

/// Full PFE instance: conv block under `{prefix}.block`, MLP under `{prefix}`.
pub fn init_pfe<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &PfeConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    init_conv_block(store, &format!("{prefix}.block"), cfg.c, rng)?;
    init_mlp(store, prefix, cfg, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub w: Var,
    pub b: Var,
    pub scale: Var,
    pub shift: Var,
}

impl ConvBlockVars {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: p.get(&format!("{prefix}.conv.w"))?,
            b: p.get(&format!("{prefix}.conv.b"))?,
            scale: p.get(&format!("{prefix}.norm.scale"))?,
            shift: p.get(&format!("{prefix}.norm.shift"))?,
        })
    }

    fn to_vec(self) -> Vec<Var> {
        vec![self.w, self.b, self.scale, self.shift]
    }

    fn from_slice(v: &[Var]) -> Self {
        Self { w: v[0], b: v[1], scale: v[2], shift: v[3] }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: p.get(&format!("{prefix}.mlp1.w"))?,
            b1: p.get(&format!("{prefix}.mlp1.b"))?,
            w2: p.get(&format!("{prefix}.mlp2.w"))?,
            b2: p.get(&format!("{prefix}.mlp2.b"))?,
        })
    }

    fn to_vec(self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    fn from_slice(v: &[Var]) -> Self {
        Self { w1: v[0], b1: v[1], w2: v[2], b2: v[3] }
    }
}

/// Conv block over a whole clip. Frames may differ in size; normalization
/// statistics are pooled over every pixel of every frame (per channel), which
/// is what batch normalization over a clip amounts to.
///
/// Each `3×h×w` frame becomes `C×⌊h/2⌋×⌊w/2⌋`; an odd trailing row or column
/// is dropped before pooling.
pub fn conv_block_clip(
    tape: &mut Tape,
    frames: &[Var],
    p: ConvBlockVars,
    scope: NormScope,
) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return arg_err("conv block needs at least one frame");
    }
    let c = tape.shape(p.w)[0];
    let mut dims = Vec::with_capacity(frames.len());
    let mut flat = Vec::with_capacity(frames.len());
    for &f in frames {
        let s = tape.shape(f).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return arg_err(format!("conv block expects 3×h×w frames, got {s:?}"));
        }
        let (h, w) = (s[1], s[2]);
        if h < 2 || w < 2 {
            return arg_err(format!("frame {h}×{w} is smaller than 2×2"));
        }
        let x = tape.reshape(f, &[1, 3, h, w])?;
        let y = tape.conv(x, p.w, &[1, 1], &[2, 2], 2)?;
        let y = tape.add_channel_bias(y, p.b, 1)?;
        flat.push(tape.reshape(y, &[c, h * w])?);
        dims.push((h, w));
    }
    // Normalize all frames jointly: C×ΣP as one sample, or per frame.
    let normed: Vec<Var> = match scope {
        NormScope::BatchSpatial => {
            let all = if flat.len() == 1 { flat[0] } else { tape.concat(&flat, 1)? };
            let total = tape.shape(all)[1];
            let all = tape.reshape(all, &[1, c, total])?;
            let all = tape.channel_norm(all, p.scale, p.shift, scope)?;
            let all = tape.reshape(all, &[c, total])?;
            let mut out = Vec::with_capacity(flat.len());
            let mut start = 0;
            for &(h, w) in &dims {
                out.push(if flat.len() == 1 { all } else { tape.slice(all, 1, start, h * w)? });
                start += h * w;
            }
            out
        }
        NormScope::PerSample => flat
            .iter()
            .zip(&dims)
            .map(|(&f, &(h, w))| {
                let x = tape.reshape(f, &[1, c, h * w])?;
                let y = tape.channel_norm(x, p.scale, p.shift, scope)?;
                tape.reshape(y, &[c, h * w])
            })
            .collect::<Result<_>>()?,
    };
    let mut out = Vec::with_capacity(frames.len());
    for (y, (h, w)) in normed.into_iter().zip(dims) {
        let y = tape.reshape(y, &[1, c, h, w])?;
        let mut y = tape.relu(y);
        if h % 2 == 1 {
            y = tape.slice(y, 2, 0, h - 1)?;
        }
        if w % 2 == 1 {
            y = tape.slice(y, 3, 0, w - 1)?;
        }
        let y = tape.max_pool(y, &[2, 2], 2)?;
        out.push(tape.reshape(y, &[c, h / 2, w / 2])?);
    }
    Ok(out)
}

/// [`conv_block_clip`] recorded as a single recomputed region.
pub fn conv_block_clip_checkpointed(
    tape: &mut Tape,
    frames: &[Var],
    p: ConvBlockVars,
    scope: NormScope,
) -> Result<Vec<Var>> {
    let n = frames.len();
    let mut inputs = frames.to_vec();
    inputs.extend(p.to_vec());
    tape.checkpoint(&inputs, move |t, v| {
        conv_block_clip(t, &v[..n], ConvBlockVars::from_slice(&v[n..]), scope)
    })
}

/// Single-frame conv block (statistics over that frame alone).
pub fn conv_block(tape: &mut Tape, frame: Var, p: ConvBlockVars) -> Result<Var> {
    Ok(conv_block_clip(tape, &[frame], p, NormScope::BatchSpatial)?[0])
}

/// Representative-area encoding: two constant channels `[h/H, w/W]`.
pub fn rae_encode(h: usize, w: usize, big_h: usize, big_w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 || big_h == 0 || big_w == 0 {
        return arg_err("RAE extents must be positive");
    }
    let plane = big_h * big_w;
    let mut data = vec![h as f64 / big_h as f64; plane];
    data.extend(std::iter::repeat_n(w as f64 / big_w as f64, plane));
    Tensor::new(&[2, big_h, big_w], data)
}

/// Maps one `C×h×w` feature map to `C×H×W`.
pub fn pfe_forward(tape: &mut Tape, x_ar: Var, p: MlpVars, cfg: &PfeConfig) -> Result<Var> {
    let s = tape.shape(x_ar).to_vec();
    if s.len() != 3 {
        return arg_err(format!("PFE expects C×h×w features, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let resized = tape.bilinear_resize(x_ar, (cfg.h, cfg.w))?;
    let mut x = tape.unfold_neighbors(resized, cfg.n)?;
    if cfg.rae {
        let rae = tape.constant(rae_encode(h, w, cfg.h, cfg.w)?);
        x = tape.concat(&[x, rae], 0)?;
    }
    let hidden = tape.linear_per_position(x, p.w1, Some(p.b1))?;
    let hidden = tape.relu(hidden);
    tape.linear_per_position(hidden, p.w2, Some(p.b2))
}

/// Applies [`pfe_forward`] per frame and stacks to `T×C×H×W`. With
/// `checkpointed`, each frame is a recomputed region.
pub fn pfe_sequence(
    tape: &mut Tape,
    features: &[Var],
    p: MlpVars,
    cfg: &PfeConfig,
    checkpointed: bool,
) -> Result<Var> {
    if features.is_empty() {
        return arg_err("PFE sequence needs at least one frame");
    }
    let mut outs = Vec::with_capacity(features.len());
    for &f in features {
        let y = if checkpointed {
            let cfg = cfg.clone();
            let mut inputs = vec![f];
            inputs.extend(p.to_vec());
            tape.checkpoint(&inputs, move |t, v| {
                Ok(vec![pfe_forward(t, v[0], MlpVars::from_slice(&v[1..]), &cfg)?])
            })?[0]
        } else {
            pfe_forward(tape, f, p, cfg)?
        };
        outs.push(y);
    }
    tape.stack(&outs)
}
