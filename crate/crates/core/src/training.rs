//! Training loop: manifest loading, random-scale crop/flip augmentation,
//! staircase learning-rate decay, CSV metric logs, per-epoch checkpoints,
//! and bit-exact resume from any epoch boundary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::image_io;
use crate::metrics;
use crate::network::{Model, NetworkConfig};
use crate::ops;
use crate::params::{adam_step, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f32,
    /// Multiplied into the learning rate every `decay_every` epochs.
    pub lr_decay: f32,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Square crop size for training patches.
    pub patch: usize,
    /// Random rescale factor range applied before cropping.
    pub scale_min: f32,
    pub scale_max: f32,
    /// Nominal augmented samples drawn per image per epoch; sets the
    /// default step count.
    pub scales_per_image: usize,
    pub flip: bool,
    pub seed: u64,
    pub grad_clip: Option<f32>,
    /// Overrides the derived number of optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr0: 1e-4,
            lr_decay: 0.75,
            decay_every: 10,
            epochs: 100,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patch: 256,
            scale_min: 0.5,
            scale_max: 1.0,
            scales_per_image: 3,
            flip: true,
            seed: 0,
            grad_clip: None,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patch == 0 {
            return Err(Error::invalid(
                "epochs, batch_size and patch must be positive".to_string(),
            ));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::invalid(format!(
                "scale range ({}, {}) must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::invalid("decay_every must be positive".to_string()));
        }
        Ok(())
    }

    /// Staircase schedule: lr0 * decay^floor(epoch / decay_every).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn steps_per_epoch(&self, pairs: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| (pairs * self.scales_per_image).div_ceil(self.batch_size))
            .max(1)
    }
}

/// A hazy/clean image pair kept in memory.
pub struct Pair {
    pub hazy: Tensor,
    pub clean: Tensor,
}

/// Reads a tab-separated manifest of `hazy<TAB>clean` image paths, relative
/// to the manifest's directory, and loads every pair. Blank lines and lines
/// starting with `#` are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<Pair>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (hazy, clean) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!(
                "{}:{}: expected 'hazy<TAB>clean'",
                path.display(),
                lineno + 1
            ))
        })?;
        let hazy = image_io::read_ppm(&base.join(hazy))?;
        let clean = image_io::read_ppm(&base.join(clean))?;
        if !hazy.same_shape(&clean) {
            return Err(Error::data(format!(
                "{}:{}: hazy {:?} and clean {:?} differ in shape",
                path.display(),
                lineno + 1,
                hazy.shape(),
                clean.shape()
            )));
        }
        pairs.push(Pair { hazy, clean });
    }
    if pairs.is_empty() {
        return Err(Error::data(format!(
            "{}: manifest lists no image pairs",
            path.display()
        )));
    }
    Ok(pairs)
}

/// Draw one augmented patch pair: random image, random rescale, aligned
/// random crop, optional random flips. Images too small for the patch at
/// the drawn scale are skipped and redrawn; 100 consecutive failures is an
/// error.
pub fn sample_patch(pairs: &[Pair], cfg: &TrainConfig, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    for _ in 0..100 {
        let pair = &pairs[rng.below(pairs.len())];
        let [_, _, h, w] = pair.hazy.shape();
        let s = rng.uniform(cfg.scale_min, cfg.scale_max);
        let sh = ((h as f32 * s).round() as usize).max(1);
        let sw = ((w as f32 * s).round() as usize).max(1);
        if sh < cfg.patch || sw < cfg.patch {
            continue;
        }
        let (hazy, clean) = if sh == h && sw == w {
            (pair.hazy.clone(), pair.clean.clone())
        } else {
            (
                ops::resize_bilinear(&pair.hazy, sh, sw)?,
                ops::resize_bilinear(&pair.clean, sh, sw)?,
            )
        };
        let y0 = if sh == cfg.patch { 0 } else { rng.below(sh - cfg.patch + 1) };
        let x0 = if sw == cfg.patch { 0 } else { rng.below(sw - cfg.patch + 1) };
        let mut hazy = ops::crop(&hazy, y0, x0, cfg.patch, cfg.patch)?;
        let mut clean = ops::crop(&clean, y0, x0, cfg.patch, cfg.patch)?;
        if cfg.flip {
            if rng.flip() {
                hazy = ops::flip_h(&hazy);
                clean = ops::flip_h(&clean);
            }
            if rng.flip() {
                hazy = ops::flip_v(&hazy);
                clean = ops::flip_v(&clean);
            }
        }
        return Ok((hazy, clean));
    }
    Err(Error::data(format!(
        "no image in the training set fits a {0}x{0} patch at the configured scales",
        cfg.patch
    )))
}

pub fn sample_batch(pairs: &[Pair], cfg: &TrainConfig, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let mut hazy = Vec::with_capacity(cfg.batch_size);
    let mut clean = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let (h, c) = sample_patch(pairs, cfg, rng)?;
        hazy.push(h);
        clean.push(c);
    }
    Ok((ops::stack_batch(&hazy)?, ops::stack_batch(&clean)?))
}

/// Mean PSNR and SSIM of clamped model outputs over a validation set.
pub fn evaluate(model: &Model, store: &ParameterStore, pairs: &[Pair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty validation set".to_string()));
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for pair in pairs {
        let out = model.infer(store, &pair.hazy)?.clamp(0.0, 1.0);
        psnr_sum += metrics::psnr(&out, &pair.clean, 1.0)?;
        ssim_sum += metrics::ssim(&out, &pair.clean)?;
    }
    Ok((psnr_sum / pairs.len() as f64, ssim_sum / pairs.len() as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

fn append_csv(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(format!("checkpoint-{epoch:04}.msbc"))
}

/// Run (or resume) training. Every epoch draws its batches from an
/// independent RNG stream keyed by the epoch index, so resuming from the
/// epoch-boundary checkpoint reproduces the original run bit for bit.
///
/// Writes `checkpoint-NNNN.msbc` per epoch (plus epoch 0 for the fresh
/// initialization), `final.msbc`, `train_log.csv` and `val_log.csv` under
/// `out_dir`.
pub fn train(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::data("empty training set".to_string()));
    }
    fs::create_dir_all(out_dir)?;

    let (model, mut store, start_epoch, mut step) = match resume {
        Some(path) => {
            let (cp, store) = checkpoint::load(path)?;
            if cp.network != *net {
                return Err(Error::invalid(format!(
                    "checkpoint network configuration {:?} does not match the requested {:?}",
                    cp.network, net
                )));
            }
            (Model::new(cp.network)?, store, cp.epoch as usize, cp.step)
        }
        None => {
            let (model, store) = Model::init(*net, cfg.seed)?;
            (model, store, 0, 0)
        }
    };
    let mult = net.spatial_multiple();
    if cfg.patch % mult != 0 {
        return Err(Error::invalid(format!(
            "patch {} must be divisible by {} (levels={})",
            cfg.patch, mult, net.levels
        )));
    }
    if resume.is_none() {
        let cp = Checkpoint {
            network: *net,
            epoch: 0,
            step: 0,
        };
        checkpoint::save(&checkpoint_path(out_dir, 0), &cp, &store, true)?;
    }

    let steps_per_epoch = cfg.steps_per_epoch(train_pairs.len());
    let train_log = out_dir.join("train_log.csv");
    let val_log = out_dir.join("val_log.csv");
    let mut last_loss = f64::NAN;
    let mut last_psnr = f64::NAN;
    let mut last_ssim = f64::NAN;

    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = Rng::stream(cfg.seed, 1 + epoch as u64);
        for _ in 0..steps_per_epoch {
            let (hazy, clean) = sample_batch(train_pairs, cfg, &mut rng)?;
            store.zero_grads();
            let loss = model.loss_and_grads(&mut store, &hazy, &clean)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at step {} (epoch {}, lr {:.3e}, grad norm {:.3e})",
                    step + 1,
                    epoch,
                    lr,
                    store.grad_norm()
                )));
            }
            if let Some(max_norm) = cfg.grad_clip {
                store.clip_grads(max_norm);
            }
            step += 1;
            adam_step(&mut store, lr, cfg.beta1, cfg.beta2, cfg.eps, step)?;
            last_loss = loss;
            append_csv(
                &train_log,
                "step,epoch,lr,loss",
                &format!("{step},{epoch},{lr:e},{loss:e}"),
            )?;
        }
        if !val_pairs.is_empty() {
            let (psnr, ssim) = evaluate(&model, &store, val_pairs)?;
            last_psnr = psnr;
            last_ssim = ssim;
            append_csv(
                &val_log,
                "epoch,val_psnr,val_ssim",
                &format!("{},{psnr},{ssim}", epoch + 1),
            )?;
        }
        let cp = Checkpoint {
            network: *net,
            epoch: epoch as u64 + 1,
            step,
        };
        checkpoint::save(&checkpoint_path(out_dir, epoch as u64 + 1), &cp, &store, true)?;
    }

    let cp = Checkpoint {
        network: *net,
        epoch: cfg.epochs as u64,
        step,
    };
    checkpoint::save(&out_dir.join("final.msbc"), &cp, &store, true)?;
    Ok(TrainReport {
        epochs_run: cfg.epochs - start_epoch,
        steps: step,
        final_loss: last_loss,
        val_psnr: last_psnr,
        val_ssim: last_ssim,
    })
}
