//! Plain `key=value` settings covering both the network and training
//! configuration. A config file holds one assignment per line (blank lines
//! and `#` comments allowed); command-line `--set key=value` overrides are
//! applied on top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::TrainConfig;

pub const VALID_KEYS: &[&str] = &[
    "levels",
    "resblocks",
    "base_channels",
    "max_channels",
    "decoder_variant",
    "dff",
    "refinement_blocks",
    "lr0",
    "lr_decay",
    "decay_every",
    "epochs",
    "batch_size",
    "beta1",
    "beta2",
    "eps",
    "patch",
    "scale_range",
    "scales_per_image",
    "flip",
    "seed",
    "grad_clip",
    "steps_per_epoch",
];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Settings {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Settings {
    /// Apply one assignment. Unknown keys are rejected with the full list
    /// of valid keys in the message.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for {key}: {value:?}")))
        }
        let n = &mut self.network;
        let t = &mut self.train;
        match key {
            "levels" => n.levels = num(key, value)?,
            "resblocks" => n.resblocks = num(key, value)?,
            "base_channels" => n.base_channels = num(key, value)?,
            "max_channels" => n.max_channels = num(key, value)?,
            "decoder_variant" => n.decoder_variant = value.parse()?,
            "dff" => n.dff_enabled = num(key, value)?,
            "refinement_blocks" => n.refinement_blocks = num(key, value)?,
            "lr0" => t.lr0 = num(key, value)?,
            "lr_decay" => t.lr_decay = num(key, value)?,
            "decay_every" => t.decay_every = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "eps" => t.eps = num(key, value)?,
            "patch" => t.patch = num(key, value)?,
            "scale_range" => {
                let (lo, hi) = value.split_once(',').ok_or_else(|| {
                    Error::invalid(format!("scale_range wants 'min,max', got {value:?}"))
                })?;
                t.scale_min = num(key, lo.trim())?;
                t.scale_max = num(key, hi.trim())?;
            }
            "scales_per_image" => t.scales_per_image = num(key, value)?,
            "flip" => t.flip = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "grad_clip" => {
                t.grad_clip = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "steps_per_epoch" => {
                t.steps_per_epoch = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown config key {other:?}; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::invalid(format!("expected key=value, got {assignment:?}"))
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_assignment(line).map_err(|e| {
                Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Config file (optional) plus overrides, then validation.
    pub fn resolve(config: Option<&Path>, sets: &[String]) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = config {
            s.load_file(path)?;
        }
        for assignment in sets {
            s.set_assignment(assignment)?;
        }
        s.network.validate()?;
        s.train.validate()?;
        Ok(s)
    }
}
