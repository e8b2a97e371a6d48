//! TOML configuration files.
//!
//! ```toml
//! version = 1
//! [model]     # layers, heads, embedding, precision_bytes, ...
//! [topology]  # channels, dimms_per_channel, ranks_per_dimm, ...
//! [timing]    # tck_ns, bl, ccd, ..., trefi_ns, trfc_ns
//! [scheduler] # policy, chunk_granularity, window, ...
//! [baseline]  # cpu_bw, rank_pim_multiplier
//! ```
//!
//! Unknown keys are rejected and the version must match.

use std::fs;
use std::path::Path;

use dimmpim_core::SimConfig;

use crate::IoError;

pub fn parse_config(text: &str, path: &Path) -> Result<SimConfig, IoError> {
    let cfg: SimConfig =
        toml::from_str(text).map_err(|e| IoError::Toml { path: path.to_path_buf(), source: Box::new(e) })?;
    cfg.validate().map_err(dimmpim_core::Error::from)?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SimConfig, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(IoError::io(path))?;
    parse_config(&text, path)
}

pub fn config_to_toml(cfg: &SimConfig) -> String {
    toml::to_string_pretty(cfg).expect("config is always representable in TOML")
}

pub fn save_config(cfg: &SimConfig, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    fs::write(path, config_to_toml(cfg)).map_err(IoError::io(path))
}
