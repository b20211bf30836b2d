//! Analytic parameter and FLOP counts.
//!
//! FLOPs are twice the multiply-accumulate count of the learned layers
//! (convolutions and per-position linear maps) for one inference pass over
//! `T` frames of size `2H×2W`, the size at which the conv block output already
//! matches the PFE grid. Norms, activations, pooling, resizing and the
//! optical-flow solver are not counted. Parameters are those the inference
//! pass touches: one PFE instance and, in single mode, one TFA direction.

use rppg_core::backbone::{ModelConfig, TfaSetting};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

/// Parameters of a dense layer `fan_in → fan_out` with bias.
pub fn linear_params(fan_in: u64, fan_out: u64) -> u64 {
    fan_in * fan_out + fan_out
}

/// FLOPs of a stride-1 "same" convolution producing `out_positions` outputs.
pub fn conv_flops(c_in: u64, kernel_volume: u64, c_out: u64, out_positions: u64) -> u64 {
    2 * c_in * kernel_volume * c_out * out_positions
}

fn conv_params(c_in: u64, kernel_volume: u64, c_out: u64) -> u64 {
    c_in * kernel_volume * c_out + c_out
}

pub fn pfe_cost(m: &ModelConfig, t: u64) -> ModuleCost {
    let (c, h, w) = (m.c as u64, m.h as u64, m.w as u64);
    // Conv block: 5×5 conv 3→C over 2H×2W, plus norm scale and shift.
    let mut params = conv_params(3, 25, c) + 2 * c;
    let mut flops = conv_flops(3, 25, c, 4 * h * w);
    if m.pfe {
        let cfg = m.pfe_config();
        let (i, hid) = (cfg.mlp_in() as u64, m.mlp_hidden as u64);
        params += linear_params(i, hid) + linear_params(hid, c);
        flops += 2 * (i * hid + hid * c) * h * w;
    }
    ModuleCost { module: "pfe".into(), params, flops: flops * t }
}

pub fn tfa_cost(m: &ModelConfig, t: u64) -> ModuleCost {
    let (c, hw, r) = (m.c as u64, (m.h * m.w) as u64, m.num_resblocks as u64);
    let dirs = match m.tfa {
        TfaSetting::Off => return ModuleCost { module: "tfa".into(), params: 0, flops: 0 },
        TfaSetting::Single => 1,
        TfaSetting::Bidirectional => 2,
    };
    let dir_params = conv_params(3 + c, 9, c) + r * (2 * conv_params(c, 9, c) + 2 * c);
    let dir_flops = conv_flops(3 + c, 9, c, hw) + r * 2 * conv_flops(c, 9, c, hw);
    let agg_params = linear_params(2 * c, c);
    let agg_flops = 2 * 2 * c * c * hw;
    ModuleCost {
        module: "tfa".into(),
        params: dirs * dir_params + agg_params,
        flops: t * (dirs * dir_flops + agg_flops),
    }
}

pub fn backbone_cost(m: &ModelConfig, t: u64) -> ModuleCost {
    let (c, cb, h, w) = (m.c as u64, m.backbone_channels as u64, m.h as u64, m.w as u64);
    let extents = [h * w, h * w / 4, h * w / 16, h * w / 16];
    let mut params = 0;
    let mut flops = 0;
    let mut cin = c;
    for hw in extents {
        params += conv_params(cin, 27, cb) + 2 * cb;
        flops += conv_flops(cin, 27, cb, t * hw);
        cin = cb;
    }
    params += linear_params(cb, 1);
    flops += 2 * cb * t;
    ModuleCost { module: "backbone".into(), params, flops }
}

/// Per-module costs followed by the total.
pub fn report_cost(m: &ModelConfig, t: usize) -> Vec<ModuleCost> {
    let t = t as u64;
    let mut rows = vec![pfe_cost(m, t), tfa_cost(m, t), backbone_cost(m, t)];
    let total = ModuleCost {
        module: "total".into(),
        params: rows.iter().map(|r| r.params).sum(),
        flops: rows.iter().map(|r| r.flops).sum(),
    };
    rows.push(total);
    rows
}

pub fn cost_table(rows: &[ModuleCost]) -> String {
    let mut s = format!("{:<10} {:>12} {:>18} {:>10}\n", "module", "params", "flops", "gflops");
    for r in rows {
        s += &format!("{:<10} {:>12} {:>18} {:>10.3}\n", r.module, r.params, r.flops, r.flops as f64 / 1e9);
    }
    s
}
