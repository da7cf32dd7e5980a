//! The multi-scale boosted encoder-decoder network.
//!
//! An encoder extracts per-level latent features (11x11 conv at level 1,
//! stride-2 3x3 convs with residual groups below), a trunk of residual
//! blocks restores features at the coarsest level, and the decoder walks
//! back up through boosted decoder modules. The decoder module variant is
//! selectable; `sos` computes G(i + up(j)) - up(j) with a learned stride-2
//! deconvolution as the upsampler and a residual group as the refinement
//! unit G. Optional dense feature fusion (DFF) modules refine each level's
//! feature against all preceding enhanced features with learned
//! back-projection sampler stacks.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderVariant {
    Sos,
    Diffusion,
    Twicing,
    Pyramid,
    UnetConcat,
}

pub const ALL_VARIANTS: [DecoderVariant; 5] = [
    DecoderVariant::Sos,
    DecoderVariant::Diffusion,
    DecoderVariant::Twicing,
    DecoderVariant::Pyramid,
    DecoderVariant::UnetConcat,
];

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DecoderVariant::Sos => "sos",
            DecoderVariant::Diffusion => "diffusion",
            DecoderVariant::Twicing => "twicing",
            DecoderVariant::Pyramid => "pyramid",
            DecoderVariant::UnetConcat => "unet_concat",
        };
        f.write_str(s)
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<DecoderVariant> {
        match s {
            "sos" => Ok(DecoderVariant::Sos),
            "diffusion" => Ok(DecoderVariant::Diffusion),
            "twicing" => Ok(DecoderVariant::Twicing),
            "pyramid" => Ok(DecoderVariant::Pyramid),
            "unet_concat" => Ok(DecoderVariant::UnetConcat),
            other => Err(Error::invalid(format!(
                "unknown decoder variant {other:?}; valid: sos, diffusion, twicing, pyramid, unet_concat"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Number of spatial levels L >= 2.
    pub levels: usize,
    /// Residual blocks in the trunk (0 allowed for degenerate test configs).
    pub resblocks: usize,
    /// Channel width at level 1; level n uses base * 2^(n-1), capped.
    pub base_channels: usize,
    pub max_channels: usize,
    pub decoder_variant: DecoderVariant,
    pub dff_enabled: bool,
    /// Residual blocks per refinement unit / encoder residual group.
    pub refinement_blocks: usize,
}

impl Default for NetworkConfig {
    fn default() -> NetworkConfig {
        NetworkConfig {
            levels: 5,
            resblocks: 18,
            base_channels: 16,
            max_channels: 256,
            decoder_variant: DecoderVariant::Sos,
            dff_enabled: true,
            refinement_blocks: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::invalid(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::invalid("channel widths must be positive".to_string()));
        }
        if self.refinement_blocks == 0 {
            return Err(Error::invalid(
                "refinement_blocks must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Channel width at a 1-based level.
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << (level - 1)).min(self.max_channels)
    }

    /// Input H and W must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Maps parameter names to tape leaves, binding each parameter once per
/// forward pass, and routes tape gradients back into the store.
#[derive(Default)]
pub struct Binder {
    map: HashMap<String, Var>,
    bound: Vec<(usize, Var)>,
}

impl Binder {
    pub fn new() -> Binder {
        Binder::default()
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(v) = self.map.get(name) {
            return Ok(*v);
        }
        let idx = store.index_of(name)?;
        let v = tape.leaf(store.entry(idx).value.clone());
        self.map.insert(name.to_string(), v);
        self.bound.push((idx, v));
        Ok(v)
    }

    /// Accumulate d(loss)/d(param) into each bound entry's grad buffer.
    pub fn accumulate_grads(&self, tape: &Tape, store: &mut ParameterStore) -> Result<()> {
        for &(idx, v) in &self.bound {
            let g = tape.grad(v);
            store.entry_mut(idx).grad.add_assign(&g)?;
        }
        Ok(())
    }
}

fn reg_conv(store: &mut ParameterStore, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
    store.register(&format!("{name}.w"), ParamKind::ConvWeight, [cout, cin, k, k])?;
    store.register(&format!("{name}.b"), ParamKind::Bias, [1, cout, 1, 1])
}

fn reg_deconv(store: &mut ParameterStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    store.register(&format!("{name}.w"), ParamKind::DeconvWeight, [cin, cout, k, k])?;
    store.register(&format!("{name}.b"), ParamKind::Bias, [1, cout, 1, 1])
}

fn reg_group(store: &mut ParameterStore, prefix: &str, channels: usize, blocks: usize) -> Result<()> {
    for r in 0..blocks {
        reg_conv(store, &format!("{prefix}.res{r}.c1"), channels, channels, 3)?;
        reg_conv(store, &format!("{prefix}.res{r}.c2"), channels, channels, 3)?;
    }
    Ok(())
}

pub struct Model {
    pub cfg: NetworkConfig,
}

impl Model {
    pub fn new(cfg: NetworkConfig) -> Result<Model> {
        cfg.validate()?;
        Ok(Model { cfg })
    }

    /// Create the model and a freshly initialized parameter store.
    pub fn init(cfg: NetworkConfig, seed: u64) -> Result<(Model, ParameterStore)> {
        let model = Model::new(cfg)?;
        let mut store = ParameterStore::new();
        model.register_params(&mut store)?;
        crate::params::init_weights(&mut store, &mut Rng::seed(seed));
        Ok((model, store))
    }

    /// Register every learnable tensor, shaped and zeroed, in a fixed
    /// deterministic order.
    pub fn register_params(&self, store: &mut ParameterStore) -> Result<()> {
        let cfg = &self.cfg;
        let levels = cfg.levels;
        reg_conv(store, "enc1.conv", cfg.channels(1), 3, 11)?;
        for n in 2..=levels {
            reg_conv(store, &format!("enc{n}.down"), cfg.channels(n), cfg.channels(n - 1), 3)?;
            if cfg.dff_enabled {
                // one sampler pair per preceding enhanced feature (levels 1..n-1)
                for t in 0..n - 1 {
                    let target = t + 1;
                    let gap = n - target;
                    for j in 0..gap {
                        reg_deconv(
                            store,
                            &format!("enc{n}.dff.t{t}.up{j}"),
                            cfg.channels(n - j),
                            cfg.channels(n - j - 1),
                            3,
                        )?;
                    }
                    for j in 0..gap {
                        reg_conv(
                            store,
                            &format!("enc{n}.dff.t{t}.down{j}"),
                            cfg.channels(target + j + 1),
                            cfg.channels(target + j),
                            3,
                        )?;
                    }
                }
            }
            reg_group(store, &format!("enc{n}"), cfg.channels(n), cfg.refinement_blocks)?;
        }
        reg_group(store, "trunk", cfg.channels(levels), cfg.resblocks)?;
        for n in (1..levels).rev() {
            reg_deconv(store, &format!("dec{n}.up"), cfg.channels(n + 1), cfg.channels(n), 3)?;
            if cfg.decoder_variant == DecoderVariant::UnetConcat {
                reg_conv(store, &format!("dec{n}.fuse"), cfg.channels(n), 2 * cfg.channels(n), 1)?;
            }
            reg_group(store, &format!("dec{n}"), cfg.channels(n), cfg.refinement_blocks)?;
            if cfg.dff_enabled {
                // preceding enhanced features live at levels L..n+1 (t-th is L-t)
                for t in 0..levels - n {
                    let target = levels - t;
                    let gap = target - n;
                    for j in 0..gap {
                        reg_conv(
                            store,
                            &format!("dec{n}.dff.t{t}.down{j}"),
                            cfg.channels(n + j + 1),
                            cfg.channels(n + j),
                            3,
                        )?;
                    }
                    for j in 0..gap {
                        reg_deconv(
                            store,
                            &format!("dec{n}.dff.t{t}.up{j}"),
                            cfg.channels(target - j),
                            cfg.channels(target - j - 1),
                            3,
                        )?;
                    }
                }
            }
        }
        reg_conv(store, "out.conv", 3, cfg.channels(1), 3)?;
        Ok(())
    }

    fn conv(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        name: &str,
        x: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let w = binder.var(tape, store, &format!("{name}.w"))?;
        let b = binder.var(tape, store, &format!("{name}.b"))?;
        tape.conv2d(x, w, b, stride, padding)
    }

    fn deconv(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let w = binder.var(tape, store, &format!("{name}.w"))?;
        let b = binder.var(tape, store, &format!("{name}.b"))?;
        tape.deconv2d(x, w, b, 2, 1, 1)
    }

    /// Residual group: a chain of (conv, lrelu, conv) residual blocks.
    /// With zeroed parameters this is the identity map.
    fn residual_group(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        prefix: &str,
        blocks: usize,
        mut x: Var,
    ) -> Result<Var> {
        for r in 0..blocks {
            let h = self.conv(tape, store, binder, &format!("{prefix}.res{r}.c1"), x, 1, 1)?;
            let h = tape.lrelu(h);
            let h = self.conv(tape, store, binder, &format!("{prefix}.res{r}.c2"), h, 1, 1)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// Strided sampler stack with LReLU between stacked layers and a linear
    /// final layer, so a zero-weighted stack contributes exactly zero.
    fn sampler_stack(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        prefix: &str,
        direction_up: bool,
        gap: usize,
        mut x: Var,
    ) -> Result<Var> {
        for j in 0..gap {
            x = if direction_up {
                self.deconv(tape, store, binder, &format!("{prefix}.up{j}"), x)?
            } else {
                self.conv(tape, store, binder, &format!("{prefix}.down{j}"), x, 2, 1)?
            };
            if j + 1 < gap {
                x = tape.lrelu(x);
            }
        }
        Ok(x)
    }

    /// Decoder-side dense feature fusion at level `n`. `preceding` holds the
    /// enhanced features ordered from level L down to n+1. Progressively:
    /// e_t = p_t(j_t) - preceding[t] (projection downsamples j_t to the
    /// preceding level), then j_{t+1} = q_t(e_t) + j_t (back-projection
    /// upsamples the error). Empty `preceding` returns the input unchanged.
    pub fn dff_decoder(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        n: usize,
        j: Var,
        preceding: &[Var],
    ) -> Result<Var> {
        let levels = self.cfg.levels;
        if preceding.len() != levels - n {
            return Err(Error::invalid(format!(
                "dff_decoder at level {n} expects {} preceding features, got {}",
                levels - n,
                preceding.len()
            )));
        }
        let mut current = j;
        for (t, &prev) in preceding.iter().enumerate() {
            let target = levels - t;
            let gap = target - n;
            let prefix = format!("dec{n}.dff.t{t}");
            let projected = self.sampler_stack(tape, store, binder, &prefix, false, gap, current)?;
            if !tape.value(projected).same_shape(tape.value(prev)) {
                return Err(Error::shape(format!(
                    "dff_decoder level {n} step {t}: projected {:?} vs preceding {:?}",
                    tape.value(projected).shape(),
                    tape.value(prev).shape()
                )));
            }
            let err = tape.sub(projected, prev)?;
            let back = self.sampler_stack(tape, store, binder, &prefix, true, gap, err)?;
            current = tape.add(back, current)?;
        }
        Ok(current)
    }

    /// Encoder-side dense feature fusion at level `n`: the same progressive
    /// loop with sampler roles swapped. `preceding` is ordered level 1
    /// first; the level-n feature is upsampled to each preceding level, the
    /// difference is downsampled back and added.
    pub fn dff_encoder(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        n: usize,
        i: Var,
        preceding: &[Var],
    ) -> Result<Var> {
        if preceding.len() != n - 1 {
            return Err(Error::invalid(format!(
                "dff_encoder at level {n} expects {} preceding features, got {}",
                n - 1,
                preceding.len()
            )));
        }
        let mut current = i;
        for (t, &prev) in preceding.iter().enumerate() {
            let target = t + 1;
            let gap = n - target;
            let prefix = format!("enc{n}.dff.t{t}");
            let lifted = self.sampler_stack(tape, store, binder, &prefix, true, gap, current)?;
            if !tape.value(lifted).same_shape(tape.value(prev)) {
                return Err(Error::shape(format!(
                    "dff_encoder level {n} step {t}: lifted {:?} vs preceding {:?}",
                    tape.value(lifted).shape(),
                    tape.value(prev).shape()
                )));
            }
            let err = tape.sub(lifted, prev)?;
            let down = self.sampler_stack(tape, store, binder, &prefix, false, gap, err)?;
            current = tape.add(down, current)?;
        }
        Ok(current)
    }

    /// Encoder pass; returns the per-level skip features i^1..i^L.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        image: Var,
    ) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        let shape = tape.value(image).shape();
        if shape[1] != 3 {
            return Err(Error::invalid(format!(
                "encoder expects a 3-channel image, got shape {shape:?}"
            )));
        }
        let mult = cfg.spatial_multiple();
        if shape[2] % mult != 0 || shape[3] % mult != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} must be divisible by {} (levels={})",
                shape[2], shape[3], mult, cfg.levels
            )));
        }
        let first = self.conv(tape, store, binder, "enc1.conv", image, 1, 5)?;
        let mut feature = tape.lrelu(first);
        let mut skips = vec![feature];
        let mut enhanced = vec![feature];
        for n in 2..=cfg.levels {
            let down = self.conv(tape, store, binder, &format!("enc{n}.down"), feature, 2, 1)?;
            let mut x = tape.lrelu(down);
            if cfg.dff_enabled {
                x = self.dff_encoder(tape, store, binder, n, x, &enhanced[..n - 1])?;
            }
            enhanced.push(x);
            let grouped =
                self.residual_group(tape, store, binder, &format!("enc{n}"), cfg.refinement_blocks, x)?;
            skips.push(grouped);
            feature = grouped;
        }
        Ok(skips)
    }

    /// Trunk of residual blocks at the coarsest level.
    pub fn trunk_forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        i_last: Var,
    ) -> Result<Var> {
        self.residual_group(tape, store, binder, "trunk", self.cfg.resblocks, i_last)
    }

    /// One boosted decoder module at level `n`, combining the skip feature
    /// i_n with the upsampled feature from level n+1 according to the
    /// configured variant.
    pub fn decoder_module(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        n: usize,
        i_n: Var,
        j_next: Var,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let expect_next = cfg.channels(n + 1);
        if tape.value(j_next).c() != expect_next {
            return Err(Error::invalid(format!(
                "decoder_module level {n}: expected {} channels from level {}, got {:?}",
                expect_next,
                n + 1,
                tape.value(j_next).shape()
            )));
        }
        let up = self.deconv(tape, store, binder, &format!("dec{n}.up"), j_next)?;
        if !tape.value(up).same_shape(tape.value(i_n)) {
            return Err(Error::invalid(format!(
                "decoder_module level {n}: upsampled {:?} vs skip {:?}",
                tape.value(up).shape(),
                tape.value(i_n).shape()
            )));
        }
        let prefix = format!("dec{n}");
        let blocks = cfg.refinement_blocks;
        match cfg.decoder_variant {
            DecoderVariant::Sos => {
                let strengthened = tape.add(i_n, up)?;
                let refined = self.residual_group(tape, store, binder, &prefix, blocks, strengthened)?;
                tape.sub(refined, up)
            }
            DecoderVariant::Diffusion => {
                self.residual_group(tape, store, binder, &prefix, blocks, up)
            }
            DecoderVariant::Twicing => {
                let diff = tape.sub(i_n, up)?;
                let refined = self.residual_group(tape, store, binder, &prefix, blocks, diff)?;
                tape.add(refined, up)
            }
            DecoderVariant::Pyramid => {
                let refined = self.residual_group(tape, store, binder, &prefix, blocks, i_n)?;
                tape.add(up, refined)
            }
            DecoderVariant::UnetConcat => {
                let cat = tape.concat_channels(i_n, up)?;
                let fused = self.conv(tape, store, binder, &format!("dec{n}.fuse"), cat, 1, 0)?;
                self.residual_group(tape, store, binder, &prefix, blocks, fused)
            }
        }
    }

    /// Full forward pass. The output is not clamped; clamp to [0, 1] only
    /// for image export.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        binder: &mut Binder,
        image: Var,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let skips = self.encoder_forward(tape, store, binder, image)?;
        let trunk = self.trunk_forward(tape, store, binder, skips[cfg.levels - 1])?;
        // enhanced decoder features ordered from level L downward
        let mut enhanced = vec![trunk];
        let mut current = trunk;
        for n in (1..cfg.levels).rev() {
            let boosted = self.decoder_module(tape, store, binder, n, skips[n - 1], current)?;
            current = if cfg.dff_enabled {
                self.dff_decoder(tape, store, binder, n, boosted, &enhanced)?
            } else {
                boosted
            };
            enhanced.push(current);
        }
        self.conv(tape, store, binder, "out.conv", current, 1, 1)
    }

    /// Inference convenience: forward on a fresh tape, returning the output
    /// tensor.
    pub fn infer(&self, store: &ParameterStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.leaf(image.clone());
        let out = self.forward(&mut tape, store, &mut binder, x)?;
        Ok(tape.value(out).clone())
    }

    /// Forward + MSE loss + backward; gradients are accumulated into the
    /// store (caller zeroes them), the loss value is returned.
    pub fn loss_and_grads(
        &self,
        store: &mut ParameterStore,
        input: &Tensor,
        target: &Tensor,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.leaf(input.clone());
        let out = self.forward(&mut tape, store, &mut binder, x)?;
        let loss = tape.mse_loss(out, target)?;
        tape.backward(loss)?;
        binder.accumulate_grads(&tape, store)?;
        Ok(tape.value(loss).data()[0] as f64)
    }
}

/// Exact count of learnable scalars for a configuration.
pub fn count_parameters(cfg: &NetworkConfig) -> Result<usize> {
    let model = Model::new(*cfg)?;
    let mut store = ParameterStore::new();
    model.register_params(&mut store)?;
    Ok(store.total_scalars())
}
