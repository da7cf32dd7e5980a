//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture` or on failure).

mod common;

use common::{random_tensor, report, synthetic_pairs};

use dehaze::autograd::Tape;
use dehaze::checkpoint::{self, Checkpoint};
use dehaze::haze::{self, SceneParams, TransmissionSpec};
use dehaze::metrics;
use dehaze::network::{count_parameters, DecoderVariant, Model, NetworkConfig, ALL_VARIANTS};
use dehaze::params::{ParamKind, ParameterStore};
use dehaze::rng::Rng;
use dehaze::training::{self, TrainConfig};
use dehaze::Tensor;

fn tiny_net(variant: DecoderVariant, dff: bool) -> NetworkConfig {
    NetworkConfig {
        levels: 2,
        resblocks: 1,
        base_channels: 2,
        max_channels: 64,
        decoder_variant: variant,
        dff_enabled: dff,
        refinement_blocks: 1,
    }
}

/// Criterion 1: finite-difference gradient checks for every primitive op
/// and for the end-to-end tiny model in all decoder variants with and
/// without fusion.
#[test]
fn acceptance_1_gradient_suite() {
    report("acceptance 1 (gradient suite)", || {
        let mut worst_primitive = 0f64;
        let mut run_primitive =
            |label: &str,
             store: &mut ParameterStore,
             loss: &mut dyn FnMut(&mut ParameterStore) -> dehaze::Result<f64>| {
                // the primitive losses are piecewise quadratic, so central
                // differences are truncation-free and a large step just
                // suppresses f32 rounding noise
                let rep = metrics::grad_check(store, 0.1, loss)
                    .map_err(|e| format!("{label}: {e}"))?;
                if rep.max_rel_err >= 1e-3 {
                    return Err(format!(
                        "{label}: rel err {:.3e} at {}[{}]",
                        rep.max_rel_err, rep.worst_param, rep.worst_index
                    ));
                }
                worst_primitive = worst_primitive.max(rep.max_rel_err);
                Ok(())
            };

        let mut rng = Rng::seed(11);
        let target = random_tensor(&mut rng, [1, 3, 6, 6], 0.0, 1.0);
        let target2 = random_tensor(&mut rng, [1, 3, 3, 3], 0.0, 1.0);
        let target_wide = random_tensor(&mut rng, [1, 3, 12, 12], 0.0, 1.0);

        // conv, stride 1: the input participates as a checked parameter too
        let mut store = ParameterStore::new();
        store.register("x", ParamKind::ConvWeight, [1, 2, 6, 6]).unwrap();
        store.register("c.w", ParamKind::ConvWeight, [3, 2, 3, 3]).unwrap();
        store.register("c.b", ParamKind::Bias, [1, 3, 1, 1]).unwrap();
        dehaze::params::init_weights(&mut store, &mut Rng::seed(12));
        for v in store.get_mut("x").unwrap().data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let t = target.clone();
        run_primitive("conv2d stride 1", &mut store, &mut |s| {
            s.zero_grads();
            let mut tape = Tape::new();
            let x = tape.leaf(s.get("x")?.clone());
            let w = tape.leaf(s.get("c.w")?.clone());
            let b = tape.leaf(s.get("c.b")?.clone());
            let y = tape.conv2d(x, w, b, 1, 1)?;
            let loss = tape.mse_loss(y, &t)?;
            tape.backward(loss)?;
            s.entry_mut(0).grad = tape.grad(x);
            s.entry_mut(1).grad = tape.grad(w);
            s.entry_mut(2).grad = tape.grad(b);
            Ok(tape.value(loss).data()[0] as f64)
        })?;

        // conv, stride 2
        let t = target2.clone();
        run_primitive("conv2d stride 2", &mut store, &mut |s| {
            s.zero_grads();
            let mut tape = Tape::new();
            let x = tape.leaf(s.get("x")?.clone());
            let w = tape.leaf(s.get("c.w")?.clone());
            let b = tape.leaf(s.get("c.b")?.clone());
            let y = tape.conv2d(x, w, b, 2, 1)?;
            let loss = tape.mse_loss(y, &t)?;
            tape.backward(loss)?;
            s.entry_mut(0).grad = tape.grad(x);
            s.entry_mut(1).grad = tape.grad(w);
            s.entry_mut(2).grad = tape.grad(b);
            Ok(tape.value(loss).data()[0] as f64)
        })?;

        // deconv, stride 2 with output padding 1
        let mut dstore = ParameterStore::new();
        dstore.register("x", ParamKind::ConvWeight, [1, 2, 6, 6]).unwrap();
        dstore.register("d.w", ParamKind::DeconvWeight, [2, 3, 3, 3]).unwrap();
        dstore.register("d.b", ParamKind::Bias, [1, 3, 1, 1]).unwrap();
        dehaze::params::init_weights(&mut dstore, &mut Rng::seed(13));
        for v in dstore.get_mut("x").unwrap().data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let t = target_wide.clone();
        run_primitive("deconv2d stride 2", &mut dstore, &mut |s| {
            s.zero_grads();
            let mut tape = Tape::new();
            let x = tape.leaf(s.get("x")?.clone());
            let w = tape.leaf(s.get("d.w")?.clone());
            let b = tape.leaf(s.get("d.b")?.clone());
            let y = tape.deconv2d(x, w, b, 2, 1, 1)?;
            let loss = tape.mse_loss(y, &t)?;
            tape.backward(loss)?;
            s.entry_mut(0).grad = tape.grad(x);
            s.entry_mut(1).grad = tape.grad(w);
            s.entry_mut(2).grad = tape.grad(b);
            Ok(tape.value(loss).data()[0] as f64)
        })?;

        // lrelu + add/sub/concat composite; inputs kept away from the kink
        let mut astore = ParameterStore::new();
        astore.register("a", ParamKind::ConvWeight, [1, 2, 4, 4]).unwrap();
        astore.register("b", ParamKind::ConvWeight, [1, 2, 4, 4]).unwrap();
        for (i, v) in astore.get_mut("a").unwrap().data_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.4 + 0.01 * i as f32 } else { -0.4 - 0.01 * i as f32 };
        }
        for (i, v) in astore.get_mut("b").unwrap().data_mut().iter_mut().enumerate() {
            *v = 0.2 + 0.005 * i as f32;
        }
        // zero target keeps every true gradient well away from zero, so the
        // relative-error denominator stays meaningful
        let t4 = Tensor::zeros([1, 4, 4, 4]);
        run_primitive("lrelu/add/sub/concat", &mut astore, &mut |s| {
            s.zero_grads();
            let mut tape = Tape::new();
            let a = tape.leaf(s.get("a")?.clone());
            let b = tape.leaf(s.get("b")?.clone());
            let act = tape.lrelu(a);
            let sum = tape.add(act, b)?;
            let diff = tape.sub(sum, a)?;
            let cat = tape.concat_channels(diff, act)?;
            let loss = tape.mse_loss(cat, &t4)?;
            tape.backward(loss)?;
            s.entry_mut(0).grad = tape.grad(a);
            s.entry_mut(1).grad = tape.grad(b);
            Ok(tape.value(loss).data()[0] as f64)
        })?;

        // end to end: every variant, fusion on and off
        let mut worst_model = 0f64;
        for variant in ALL_VARIANTS {
            for dff in [false, true] {
                let net = tiny_net(variant, dff);
                let (model, mut store) = Model::init(net, 21).unwrap();
                let mut rng = Rng::seed(22);
                let input = random_tensor(&mut rng, [1, 3, 8, 8], 0.0, 1.0);
                let target = random_tensor(&mut rng, [1, 3, 8, 8], 0.0, 1.0);
                // gate the full model on the whole-gradient L2 relative
                // error: float32 forward passes make isolated components
                // noisy near activation kinks, but any real backward bug
                // shifts the vector as a whole
                let rep = metrics::grad_check(&mut store, 3e-4, |s| {
                    s.zero_grads();
                    model.loss_and_grads(s, &input, &target)
                })
                .map_err(|e| format!("{variant} dff={dff}: {e}"))?;
                if rep.l2_rel_err >= 1e-2 {
                    return Err(format!(
                        "{variant} dff={dff}: gradient L2 rel err {:.3e} (worst component {:.3e} at {}[{}])",
                        rep.l2_rel_err, rep.max_rel_err, rep.worst_param, rep.worst_index
                    ));
                }
                worst_model = worst_model.max(rep.l2_rel_err);
            }
        }
        Ok(format!(
            "worst primitive rel err {worst_primitive:.2e}, worst end-to-end {worst_model:.2e}"
        ))
    });
}

/// Criterion 2: with the decoder module's learnable tensors zeroed, the sos
/// and twicing combinations return the skip feature exactly.
#[test]
fn acceptance_2_boosting_algebra_identities() {
    report("acceptance 2 (sos/twicing identity)", || {
        for variant in [DecoderVariant::Sos, DecoderVariant::Twicing] {
            let net = tiny_net(variant, false);
            let model = Model::new(net).unwrap();
            let mut store = ParameterStore::new();
            model.register_params(&mut store).unwrap();
            // realistic weights everywhere except the decoder module
            dehaze::params::init_weights(&mut store, &mut Rng::seed(31));
            for i in 0..store.len() {
                if store.entry(i).name.starts_with("dec1.") {
                    store.entry_mut(i).value.data_mut().fill(0.0);
                }
            }
            let mut rng = Rng::seed(32);
            let i_n = random_tensor(&mut rng, [1, 2, 8, 8], -1.0, 1.0);
            let j_next = random_tensor(&mut rng, [1, 4, 4, 4], -1.0, 1.0);
            let mut tape = Tape::new();
            let mut binder = dehaze::network::Binder::new();
            let vi = tape.leaf(i_n.clone());
            let vj = tape.leaf(j_next);
            let out = model
                .decoder_module(&mut tape, &store, &mut binder, 1, vi, vj)
                .map_err(|e| e.to_string())?;
            if tape.value(out) != &i_n {
                return Err(format!("{variant}: output differs from the skip feature"));
            }
        }
        Ok("sos and twicing return i_n elementwise".to_string())
    });
}

/// Criterion 3: boosting an ideal partial dehazer strictly reduces the
/// portion of haze at every iteration, over many random scenes.
#[test]
fn acceptance_3_boosting_reduces_haze() {
    report("acceptance 3 (boosting harness)", || {
        let mut checked = 0usize;
        for scene in 0..10u64 {
            let mut rng = Rng::seed(300 + scene);
            let clean = haze::procedural_clean(&mut rng, 16, 16);
            let depth = haze::procedural_depth(&mut rng, 16, 16);
            let beta = rng.uniform(0.4, 1.6);
            let a = rng.uniform(0.7, 1.0);
            let t = haze::transmission_from_depth(beta, &depth).map_err(|e| e.to_string())?;
            let pair = haze::synthesize_hazy(
                &clean,
                &SceneParams {
                    atmospheric_light: a,
                    transmission: TransmissionSpec::Map(t.clone()),
                },
                None,
            )
            .map_err(|e| e.to_string())?;
            for gamma in [0.25f32, 0.5, 0.75] {
                let dehazer = haze::ideal_dehazer(&t, a, gamma);
                let states =
                    haze::sos_boost_images(&pair.hazy, dehazer, 5).map_err(|e| e.to_string())?;
                let mut prev = f64::INFINITY;
                for state in &states {
                    let poh = haze::poh(&state.iterate, &t, a).map_err(|e| e.to_string())?;
                    if state.index > 0 && poh >= prev {
                        return Err(format!(
                            "scene {scene} gamma {gamma}: poh {poh:.6} >= {prev:.6} at iteration {}",
                            state.index
                        ));
                    }
                    prev = poh;
                    checked += 1;
                }
            }
        }
        Ok(format!("{checked} iterates, zero violations"))
    });
}

/// Criterion 4: the four boosted decoder variants share an identical
/// parameter count at any common configuration.
#[test]
fn acceptance_4_parameter_parity() {
    report("acceptance 4 (parameter parity)", || {
        let configs = [(2usize, 4usize, 1usize), (3, 8, 2), (4, 16, 3)];
        let mut counts = Vec::new();
        for (levels, base, blocks) in configs {
            let mut per_variant = Vec::new();
            for variant in [
                DecoderVariant::Sos,
                DecoderVariant::Diffusion,
                DecoderVariant::Twicing,
                DecoderVariant::Pyramid,
            ] {
                let net = NetworkConfig {
                    levels,
                    resblocks: blocks,
                    base_channels: base,
                    max_channels: 256,
                    decoder_variant: variant,
                    dff_enabled: true,
                    refinement_blocks: blocks,
                };
                per_variant.push(count_parameters(&net).map_err(|e| e.to_string())?);
            }
            if per_variant.windows(2).any(|w| w[0] != w[1]) {
                return Err(format!(
                    "config L={levels} base={base}: counts differ {per_variant:?}"
                ));
            }
            counts.push(per_variant[0]);
        }
        Ok(format!("counts {counts:?} identical across variants"))
    });
}

/// Criterion 5: classical back-projection has non-increasing residuals and
/// converges on consistent inputs.
#[test]
fn acceptance_5_back_projection_oracle() {
    report("acceptance 5 (back-projection)", || {
        for trial in 0..20u64 {
            let mut rng = Rng::seed(500 + trial);
            let l_ob = random_tensor(&mut rng, [1, 3, 8, 8], 0.0, 1.0);
            let mut estimate = haze::reference_back_projector(&l_ob).map_err(|e| e.to_string())?;
            let mut prev = f64::INFINITY;
            for it in 0..10 {
                let down = haze::reference_downsampler(&estimate).map_err(|e| e.to_string())?;
                let residual = l_ob.sub(&down).map_err(|e| e.to_string())?.norm();
                if residual > prev + 1e-9 {
                    return Err(format!(
                        "trial {trial}: residual {residual:.3e} grew at iteration {it}"
                    ));
                }
                prev = residual;
                let correction =
                    haze::reference_back_projector(&l_ob.sub(&down).map_err(|e| e.to_string())?)
                        .map_err(|e| e.to_string())?;
                estimate = estimate.add(&correction).map_err(|e| e.to_string())?;
            }
        }
        // a consistent observation (one actually produced by the projector)
        let mut rng = Rng::seed(555);
        let truth = random_tensor(&mut rng, [1, 3, 16, 16], 0.0, 1.0);
        let l_ob = haze::reference_downsampler(&truth).map_err(|e| e.to_string())?;
        let estimate = haze::iterative_back_projection(
            &l_ob,
            haze::reference_downsampler,
            haze::reference_back_projector,
            20,
        )
        .map_err(|e| e.to_string())?;
        let down = haze::reference_downsampler(&estimate).map_err(|e| e.to_string())?;
        let residual = l_ob.sub(&down).map_err(|e| e.to_string())?.norm()
            / (l_ob.len() as f64).sqrt();
        if residual >= 1e-4 {
            return Err(format!("consistent input residual {residual:.3e} >= 1e-4"));
        }
        Ok(format!("20 trials monotone; consistent residual {residual:.1e}"))
    });
}

/// Criterion 6: a small sos+fusion model overfits four synthetic pairs.
#[test]
fn acceptance_6_overfit_smoke() {
    report("acceptance 6 (overfit smoke)", || {
        let pairs = synthetic_pairs(600, 4, 64);
        let net = NetworkConfig {
            levels: 3,
            resblocks: 2,
            base_channels: 8,
            max_channels: 256,
            decoder_variant: DecoderVariant::Sos,
            dff_enabled: true,
            refinement_blocks: 1,
        };
        // Full-image batches with a high clipped learning rate held for 400
        // steps and cut for the last 100; memorizing four images in 500
        // steps needs far more aggressive settings than real training.
        let cfg = TrainConfig {
            lr0: 5e-3,
            lr_decay: 0.3,
            decay_every: 4,
            epochs: 5,
            steps_per_epoch: Some(100),
            batch_size: 4,
            patch: 64,
            scale_min: 1.0,
            scale_max: 1.0,
            scales_per_image: 1,
            flip: false,
            seed: 601,
            beta2: 0.99,
            grad_clip: Some(0.25),
            ..TrainConfig::default()
        };

        let mse_over = |model: &Model, store: &mut ParameterStore| -> Result<f64, String> {
            let mut acc = 0.0;
            for p in &pairs {
                store.zero_grads();
                acc += model
                    .loss_and_grads(store, &p.hazy, &p.clean)
                    .map_err(|e| e.to_string())?;
            }
            store.zero_grads();
            Ok(acc / pairs.len() as f64)
        };

        let (model, mut init_store) = Model::init(net, cfg.seed).unwrap();
        let initial_mse = mse_over(&model, &mut init_store)?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        training::train(&net, &cfg, &pairs, &[], dir.path(), None).map_err(|e| e.to_string())?;
        let (_, mut store) =
            checkpoint::load(&dir.path().join("final.msbc")).map_err(|e| e.to_string())?;
        let final_mse = mse_over(&model, &mut store)?;
        let (psnr, _) = training::evaluate(&model, &store, &pairs).map_err(|e| e.to_string())?;

        if final_mse > initial_mse / 100.0 {
            return Err(format!(
                "train MSE {final_mse:.3e} above initial/100 ({:.3e})",
                initial_mse / 100.0
            ));
        }
        if psnr < 30.0 {
            return Err(format!("train-set PSNR {psnr:.2} dB < 30"));
        }
        Ok(format!(
            "MSE {initial_mse:.2e} -> {final_mse:.2e}, train PSNR {psnr:.2} dB"
        ))
    });
}

/// Criterion 7: directional ablation. The fused sos network must beat the
/// diffusion decoder in median validation PSNR; the full ordering is
/// reported for information.
#[test]
fn acceptance_7_directional_ablation() {
    report("acceptance 7 (ablation ordering)", || {
        let train_pairs = synthetic_pairs(700, 8, 32);
        let val_pairs = synthetic_pairs(701, 32, 32);
        let base = NetworkConfig {
            levels: 2,
            resblocks: 2,
            base_channels: 8,
            max_channels: 256,
            decoder_variant: DecoderVariant::Sos,
            dff_enabled: true,
            refinement_blocks: 1,
        };
        let arms = [
            ("sos+dff", DecoderVariant::Sos, true),
            ("sos", DecoderVariant::Sos, false),
            ("diffusion", DecoderVariant::Diffusion, false),
        ];
        let mut medians = Vec::new();
        for (label, variant, dff) in arms {
            let net = NetworkConfig {
                decoder_variant: variant,
                dff_enabled: dff,
                ..base
            };
            let mut psnrs = Vec::new();
            for seed in [710u64, 711, 712] {
                // Same hold-then-cut recipe as the overfit smoke: high
                // clipped learning rate for the first three epochs, cut
                // for the last one.
                let cfg = TrainConfig {
                    lr0: 5e-3,
                    lr_decay: 0.3,
                    decay_every: 3,
                    epochs: 4,
                    steps_per_epoch: Some(500),
                    batch_size: 2,
                    patch: 16,
                    scale_min: 1.0,
                    scale_max: 1.0,
                    flip: true,
                    seed,
                    beta2: 0.99,
                    grad_clip: Some(0.25),
                    ..TrainConfig::default()
                };
                let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
                let report =
                    training::train(&net, &cfg, &train_pairs, &val_pairs, dir.path(), None)
                        .map_err(|e| format!("{label} seed {seed}: {e}"))?;
                psnrs.push(report.val_psnr);
            }
            psnrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push((label, psnrs[1]));
        }
        for (label, median) in &medians {
            println!("  ablation arm {label}: median val PSNR {median:.3} dB");
        }
        let fused = medians[0].1;
        let plain = medians[1].1;
        let diffusion = medians[2].1;
        let ordering_note = if fused >= plain && plain >= diffusion {
            "full ordering holds"
        } else {
            "full ordering not strict (informational)"
        };
        if fused < diffusion {
            return Err(format!(
                "fused sos {fused:.3} dB below diffusion {diffusion:.3} dB"
            ));
        }
        Ok(format!(
            "sos+dff {fused:.2} / sos {plain:.2} / diffusion {diffusion:.2} dB; {ordering_note}"
        ))
    });
}

/// Criterion 8: scattering-model round trip, metric invariants, checkpoint
/// round trip and seeded bit-determinism.
#[test]
fn acceptance_8_invariants_and_determinism() {
    report("acceptance 8 (invariants)", || {
        // scattering round trip: recover the clean image from the model
        let mut rng = Rng::seed(800);
        let clean = haze::procedural_clean(&mut rng, 16, 16);
        let depth = haze::procedural_depth(&mut rng, 16, 16);
        let t = haze::transmission_from_depth(1.0, &depth).map_err(|e| e.to_string())?;
        let a = 0.85;
        let pair = haze::synthesize_hazy(
            &clean,
            &SceneParams {
                atmospheric_light: a,
                transmission: TransmissionSpec::Map(t.clone()),
            },
            None,
        )
        .map_err(|e| e.to_string())?;
        let recovered = haze::recover_clean(&pair.hazy, &t, a).map_err(|e| e.to_string())?;
        let max_err = recovered
            .data()
            .iter()
            .zip(clean.data())
            .map(|(r, c)| (r - c).abs())
            .fold(0f32, f32::max);
        if max_err > 1e-5 {
            return Err(format!("round-trip error {max_err:.2e}"));
        }

        // metric invariants
        let x = random_tensor(&mut rng, [1, 3, 16, 16], 0.0, 1.0);
        let y = random_tensor(&mut rng, [1, 3, 16, 16], 0.0, 1.0);
        if metrics::psnr(&x, &x, 1.0).map_err(|e| e.to_string())? != metrics::PSNR_CAP_DB {
            return Err("psnr(x, x) below the cap".to_string());
        }
        let pxy = metrics::psnr(&x, &y, 1.0).map_err(|e| e.to_string())?;
        let pyx = metrics::psnr(&y, &x, 1.0).map_err(|e| e.to_string())?;
        if (pxy - pyx).abs() > 1e-9 {
            return Err("psnr asymmetric".to_string());
        }
        let sxx = metrics::ssim(&x, &x).map_err(|e| e.to_string())?;
        if (sxx - 1.0).abs() > 1e-9 {
            return Err(format!("ssim(x, x) = {sxx}"));
        }
        let sxy = metrics::ssim(&x, &y).map_err(|e| e.to_string())?;
        let syx = metrics::ssim(&y, &x).map_err(|e| e.to_string())?;
        if (sxy - syx).abs() > 1e-9 {
            return Err("ssim asymmetric".to_string());
        }

        // checkpoint round trip
        let net = tiny_net(DecoderVariant::Sos, true);
        let (model, store) = Model::init(net, 801).unwrap();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("a.msbc");
        let cp = Checkpoint {
            network: net,
            epoch: 2,
            step: 37,
        };
        checkpoint::save(&path, &cp, &store, true).map_err(|e| e.to_string())?;
        let (cp2, store2) = checkpoint::load(&path).map_err(|e| e.to_string())?;
        if cp2 != cp {
            return Err("checkpoint metadata changed in round trip".to_string());
        }
        let probe = random_tensor(&mut rng, [1, 3, 8, 8], 0.0, 1.0);
        let out1 = model.infer(&store, &probe).map_err(|e| e.to_string())?;
        let out2 = model.infer(&store2, &probe).map_err(|e| e.to_string())?;
        if out1 != out2 {
            return Err("restored parameters changed the output".to_string());
        }

        // bit determinism: identical short training runs, bitwise equal
        let pairs = synthetic_pairs(802, 2, 16);
        let cfg = TrainConfig {
            lr0: 1e-3,
            epochs: 2,
            steps_per_epoch: Some(3),
            batch_size: 1,
            patch: 8,
            scale_min: 1.0,
            scale_max: 1.0,
            seed: 803,
            ..TrainConfig::default()
        };
        let run = || -> Result<Vec<u8>, String> {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            training::train(&net, &cfg, &pairs, &[], dir.path(), None)
                .map_err(|e| e.to_string())?;
            std::fs::read(dir.path().join("final.msbc")).map_err(|e| e.to_string())
        };
        if run()? != run()? {
            return Err("two identically seeded runs produced different bytes".to_string());
        }

        Ok("round trip, metric invariants, checkpointing, determinism".to_string())
    });
}
