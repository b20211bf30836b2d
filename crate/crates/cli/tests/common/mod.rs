#![allow(dead_code)]

use std::path::Path;

use rppg_cli::config::RunConfig;
use rppg_cli::data::generate;

/// Tiny model and dataset that train in a couple of seconds.
pub const SMOKE_TOML: &str = r#"
T = 32
[model]
C = 4
H = 16
W = 16
mlp_hidden = 16
num_resblocks = 1
backbone_channels = 8
[train]
epochs = 2
[data]
num_train = 2
num_val = 1
frames_per_video = 64
[eval]
clip_len = 64
psd_pad = 2048
schedules = ["64"]
"#;

pub fn smoke_config() -> RunConfig {
    RunConfig::from_toml(SMOKE_TOML).unwrap()
}

pub fn smoke_data(dir: &Path) -> RunConfig {
    let cfg = smoke_config();
    generate(&cfg, dir, false).unwrap();
    cfg
}
