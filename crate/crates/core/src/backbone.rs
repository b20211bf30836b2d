//! Spatio-temporal signal regressor and full-model assembly.
//!
//! The backbone stacks four 3×3×3 conv stages (norm, relu) with spatial-only
//! pooling after the first two, averages over space, and projects each time
//! step to one sample, so a `T×C×H×W` input yields exactly `T` outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NormScope, Tape, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::flow::FlowConfig;
use crate::params::{kaiming, Bound, ParamStore};
use crate::pfe::{self, ConvBlockVars, MlpVars, PfeConfig};
use crate::tfa::{self, TfaConfig, TfaMode};

const STAGES: usize = 4;
/// Stages followed by a (1,2,2) max pool.
const POOLED_STAGES: [usize; 2] = [0, 1];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfaSetting {
    Off,
    Single,
    #[default]
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub n: usize,
    pub mlp_hidden: usize,
    pub num_resblocks: usize,
    pub backbone_channels: usize,
    /// Off: frames are resized to 2H×2W and only the conv block is applied.
    pub pfe: bool,
    pub rae: bool,
    pub tfa: TfaSetting,
    pub resblock_norm: bool,
    pub norm_scope: NormScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 16,
            h: 64,
            w: 64,
            n: 3,
            mlp_hidden: 128,
            num_resblocks: 5,
            backbone_channels: 32,
            pfe: true,
            rae: true,
            tfa: TfaSetting::Bidirectional,
            resblock_norm: true,
            norm_scope: NormScope::BatchSpatial,
        }
    }
}

impl ModelConfig {
    pub fn pfe_config(&self) -> PfeConfig {
        PfeConfig { c: self.c, h: self.h, w: self.w, n: self.n, mlp_hidden: self.mlp_hidden, rae: self.rae }
    }

    pub fn tfa_config(&self, flow: &FlowConfig) -> TfaConfig {
        TfaConfig {
            c: self.c,
            h: self.h,
            w: self.w,
            num_resblocks: self.num_resblocks,
            resblock_norm: self.resblock_norm,
            mode: if self.tfa == TfaSetting::Single { TfaMode::Single } else { TfaMode::Bidirectional },
            flow: flow.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pfe_config().validate()?;
        if self.backbone_channels == 0 || self.num_resblocks == 0 {
            return arg_err("backbone channels and residual blocks must be positive");
        }
        let div = 1 << POOLED_STAGES.len();
        if self.h % div != 0 || self.w % div != 0 {
            return shape_err(format!(
                "H×W = {}×{} must be divisible by {div} for the backbone pooling plan",
                self.h, self.w
            ));
        }
        Ok(())
    }
}

/// Which unshared PFE instance to run. Inference always uses the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    First,
    Second,
}

impl View {
    fn prefix(self) -> &'static str {
        match self {
            View::First => "pfe1",
            View::Second => "pfe2",
        }
    }
}

pub fn init_backbone(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut cin = c_in;
    for s in 0..STAGES {
        let p = format!("{prefix}.stage{s}");
        store.insert(format!("{p}.conv.w"), kaiming(&[channels, cin, 3, 3, 3], cin * 27, rng))?;
        store.insert(format!("{p}.conv.b"), Tensor::zeros(&[channels]))?;
        store.insert(format!("{p}.norm.scale"), Tensor::full(&[channels], 1.0))?;
        store.insert(format!("{p}.norm.shift"), Tensor::zeros(&[channels]))?;
        cin = channels;
    }
    store.insert(format!("{prefix}.head.w"), kaiming(&[1, channels], channels, rng))?;
    store.insert(format!("{prefix}.head.b"), Tensor::zeros(&[1]))
}

/// Elementwise sum of the structure and motion streams.
pub fn fuse(tape: &mut Tape, x_st: Var, x_mo: Var) -> Result<Var> {
    tape.add(x_st, x_mo)
}

fn stage(tape: &mut Tape, x: Var, p: &[Var], pool: bool) -> Result<Var> {
    let y = tape.conv(x, p[0], &[1, 1, 1], &[1, 1, 1], 3)?;
    let y = tape.add_channel_bias(y, p[1], 1)?;
    let y = tape.channel_norm(y, p[2], p[3], NormScope::BatchSpatial)?;
    let y = tape.relu(y);
    if pool {
        tape.max_pool(y, &[1, 2, 2], 3)
    } else {
        Ok(y)
    }
}

/// `T×C×H×W` features to a length-`T` signal.
pub fn backbone_forward(tape: &mut Tape, x: Var, params: &Bound, prefix: &str, checkpointed: bool) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return shape_err(format!("backbone expects T×C×H×W, got {s:?}"));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let div = 1 << POOLED_STAGES.len();
    if h % div != 0 || w % div != 0 {
        return shape_err(format!("backbone input {h}×{w} is not divisible by {div}"));
    }
    let y = tape.permute(x, &[1, 0, 2, 3])?;
    let mut y = tape.reshape(y, &[1, c, t, h, w])?;
    for k in 0..STAGES {
        let p = format!("{prefix}.stage{k}");
        let vars = vec![
            params.get(&format!("{p}.conv.w"))?,
            params.get(&format!("{p}.conv.b"))?,
            params.get(&format!("{p}.norm.scale"))?,
            params.get(&format!("{p}.norm.shift"))?,
        ];
        let pool = POOLED_STAGES.contains(&k);
        y = if checkpointed {
            let mut inputs = vec![y];
            inputs.extend(vars);
            tape.checkpoint(&inputs, move |t, v| Ok(vec![stage(t, v[0], &v[1..], pool)?]))?[0]
        } else {
            stage(tape, y, &vars, pool)?
        };
    }
    let cb = tape.shape(y)[1];
    let pooled = tape.mean_trailing(y, 2)?;
    let pooled = tape.reshape(pooled, &[cb, t, 1])?;
    let hw = params.get(&format!("{prefix}.head.w"))?;
    let hb = params.get(&format!("{prefix}.head.b"))?;
    let out = tape.linear_per_position(pooled, hw, Some(hb))?;
    tape.reshape(out, &[t])
}

/// All parameters of one model variant plus the settings needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub flow: FlowConfig,
    pub params: ParamStore,
}

impl Model {
    /// Deterministic He initialisation from `seed`. Two PFE instances are
    /// always created so checkpoints have one layout per configuration.
    pub fn new(config: ModelConfig, flow: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        flow.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let pcfg = config.pfe_config();
        for view in [View::First, View::Second] {
            let prefix = view.prefix();
            pfe::init_conv_block(&mut params, &format!("{prefix}.block"), config.c, &mut rng)?;
            if config.pfe {
                pfe::init_mlp(&mut params, prefix, &pcfg, &mut rng)?;
            }
        }
        if config.tfa != TfaSetting::Off {
            tfa::init_tfa(&mut params, "tfa", &config.tfa_config(&flow), &mut rng)?;
        }
        init_backbone(&mut params, "backbone", config.c, config.backbone_channels, &mut rng)?;
        Ok(Self { config, flow, params })
    }

    /// Structure stream `T×C×H×W` for one view.
    pub fn structure_features(
        &self,
        tape: &mut Tape,
        frames: &[Var],
        params: &Bound,
        view: View,
        checkpointed: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        let block = ConvBlockVars::bind(params, &format!("{}.block", view.prefix()))?;
        let run_block = |tape: &mut Tape, frames: &[Var]| {
            if checkpointed {
                pfe::conv_block_clip_checkpointed(tape, frames, block, cfg.norm_scope)
            } else {
                pfe::conv_block_clip(tape, frames, block, cfg.norm_scope)
            }
        };
        if cfg.pfe {
            let feats = run_block(tape, frames)?;
            let mlp = MlpVars::bind(params, view.prefix())?;
            pfe::pfe_sequence(tape, &feats, mlp, &cfg.pfe_config(), checkpointed)
        } else {
            let resized: Vec<Var> = frames
                .iter()
                .map(|&f| tape.bilinear_resize(f, (2 * cfg.h, 2 * cfg.w)))
                .collect::<Result<_>>()?;
            let feats = run_block(tape, &resized)?;
            tape.stack(&feats)
        }
    }

    /// Full forward pass of one clip (frames `3×h_i×w_i`) to a length-`T` signal.
    pub fn forward(
        &self,
        tape: &mut Tape,
        frames: &[Var],
        params: &Bound,
        view: View,
        checkpointed: bool,
    ) -> Result<Var> {
        if frames.is_empty() {
            return arg_err("model needs at least one frame");
        }
        let mut x = self.structure_features(tape, frames, params, view, checkpointed)?;
        if self.config.tfa != TfaSetting::Off {
            let tcfg = self.config.tfa_config(&self.flow);
            let x_mo = tfa::tfa_forward(tape, frames, params, "tfa", &tcfg, checkpointed)?;
            x = fuse(tape, x, x_mo)?;
        }
        backbone_forward(tape, x, params, "backbone", checkpointed)
    }

    /// Inference with the first PFE instance and frozen parameters.
    pub fn predict(&self, frames: &[Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let y = self.forward(&mut tape, &vars, &bound, View::First, true)?;
        Ok(tape.value(y).data().to_vec())
    }
}
