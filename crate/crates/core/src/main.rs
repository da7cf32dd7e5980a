//! Command-line front end: synthetic dataset generation, training,
//! inference, evaluation, decoder ablation, gradient and boosting checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use dehaze::config::Settings;
use dehaze::haze::{self, SceneParams, TransmissionSpec};
use dehaze::image_io;
use dehaze::metrics;
use dehaze::network::{DecoderVariant, Model, NetworkConfig, ALL_VARIANTS};
use dehaze::rng::Rng;
use dehaze::training;
use dehaze::{checkpoint, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "dehaze", version, about = "Multi-scale boosted dehazing laboratory")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a configuration key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hazy/clean dataset with transmission maps
    Synthesize {
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Directory of clean PPM images; omitted means procedural scenes
        #[arg(long)]
        clean_dir: Option<PathBuf>,
        /// Directory of PGM depth maps matching the clean image stems
        #[arg(long)]
        depth_dir: Option<PathBuf>,
        /// Number of procedural scenes when no clean directory is given
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        /// Scattering coefficient range, drawn uniformly per scene
        #[arg(long, default_value = "0.4,1.6", value_name = "MIN,MAX")]
        beta_range: String,
        /// Atmospheric light range, drawn uniformly per scene
        #[arg(long, default_value = "0.7,1.0", value_name = "MIN,MAX")]
        light_range: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the network on a manifest of hazy/clean pairs
    Train {
        /// Tab-separated manifest: hazy<TAB>clean per line
        #[arg(long)]
        manifest: PathBuf,
        /// Validation manifest; omitted disables per-epoch validation
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// Output directory for checkpoints and logs
        #[arg(long)]
        out: PathBuf,
        /// Resume from an epoch-boundary checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a trained network on one hazy image
    Dehaze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input hazy PPM
        #[arg(long)]
        input: PathBuf,
        /// Output dehazed PPM
        #[arg(long)]
        output: PathBuf,
    },
    /// Report PSNR/SSIM of a checkpoint over a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train and evaluate every decoder variant, with and without fusion
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variants (default: all five)
        #[arg(long)]
        variants: Option<String>,
        /// Fusion modes to cover: on, off or both
        #[arg(long, default_value = "both")]
        dff: String,
    },
    /// Finite-difference check of the end-to-end analytic gradients
    Gradcheck {
        /// Central-difference step
        #[arg(long, default_value_t = 3e-4)]
        eps: f64,
        /// Maximum tolerated whole-gradient L2 relative error
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify that boosting an ideal partial dehazer reduces the haze
    Boostcheck {
        /// Comma-separated dehazer strengths in [0, 1]
        #[arg(long, default_value = "0.0,0.25,0.5,0.75,1.0")]
        gammas: String,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene side length in pixels
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// List the learnable tensors and total parameter count
    Params,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::ShapeMismatch(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn parse_range(name: &str, s: &str) -> Result<(f32, f32)> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| Error::invalid(format!("{name} wants 'min,max', got {s:?}")))?;
    let lo: f32 = lo
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad {name} minimum {lo:?}")))?;
    let hi: f32 = hi
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad {name} maximum {hi:?}")))?;
    if lo > hi {
        return Err(Error::invalid(format!("{name}: min {lo} exceeds max {hi}")));
    }
    Ok((lo, hi))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize {
            out,
            clean_dir,
            depth_dir,
            count,
            width,
            height,
            beta_range,
            light_range,
            seed,
        } => synthesize(
            &out, clean_dir.as_deref(), depth_dir.as_deref(), count, width, height,
            &beta_range, &light_range, seed,
        ),
        Command::Train {
            manifest,
            val_manifest,
            out,
            resume,
        } => {
            let s = Settings::resolve(cli.config.as_deref(), &cli.set)?;
            let train_pairs = training::load_manifest(&manifest)?;
            let val_pairs = match val_manifest {
                Some(p) => training::load_manifest(&p)?,
                None => Vec::new(),
            };
            let report = training::train(
                &s.network,
                &s.train,
                &train_pairs,
                &val_pairs,
                &out,
                resume.as_deref(),
            )?;
            println!(
                "trained {} epochs ({} steps), final loss {:.6e}",
                report.epochs_run, report.steps, report.final_loss
            );
            if report.val_psnr.is_finite() {
                println!(
                    "validation: psnr {:.3} dB, ssim {:.4}",
                    report.val_psnr, report.val_ssim
                );
            }
            Ok(())
        }
        Command::Dehaze {
            checkpoint: ckpt,
            input,
            output,
        } => {
            let (cp, store) = checkpoint::load(&ckpt)?;
            let model = Model::new(cp.network)?;
            let hazy = image_io::read_ppm(&input)?;
            let out = model.infer(&store, &hazy)?.clamp(0.0, 1.0);
            image_io::write_ppm(&output, &out)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt,
            manifest,
        } => {
            let (cp, store) = checkpoint::load(&ckpt)?;
            let model = Model::new(cp.network)?;
            let pairs = training::load_manifest(&manifest)?;
            println!("index,psnr,ssim");
            let mut psnr_sum = 0.0;
            let mut ssim_sum = 0.0;
            for (i, pair) in pairs.iter().enumerate() {
                let out = model.infer(&store, &pair.hazy)?.clamp(0.0, 1.0);
                let psnr = metrics::psnr(&out, &pair.clean, 1.0)?;
                let ssim = metrics::ssim(&out, &pair.clean)?;
                psnr_sum += psnr;
                ssim_sum += ssim;
                println!("{i},{psnr:.4},{ssim:.5}");
            }
            println!(
                "mean,{:.4},{:.5}",
                psnr_sum / pairs.len() as f64,
                ssim_sum / pairs.len() as f64
            );
            Ok(())
        }
        Command::Ablate {
            manifest,
            val_manifest,
            out,
            variants,
            dff,
        } => {
            let s = Settings::resolve(cli.config.as_deref(), &cli.set)?;
            let variants = match variants {
                Some(list) => list
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<Vec<DecoderVariant>>>()?,
                None => ALL_VARIANTS.to_vec(),
            };
            let dff_modes: Vec<bool> = match dff.as_str() {
                "on" => vec![true],
                "off" => vec![false],
                "both" => vec![false, true],
                other => {
                    return Err(Error::invalid(format!(
                        "--dff must be on, off or both, got {other:?}"
                    )))
                }
            };
            ablate(&s, &manifest, val_manifest.as_deref(), &out, &variants, &dff_modes)
        }
        Command::Gradcheck { eps, tol, seed } => {
            gradcheck(cli.config.as_deref(), &cli.set, eps, tol, seed)
        }
        Command::Boostcheck {
            gammas,
            iterations,
            seed,
            size,
        } => boostcheck(&gammas, iterations, seed, size),
        Command::Params => {
            let s = Settings::resolve(cli.config.as_deref(), &cli.set)?;
            let model = Model::new(s.network)?;
            let mut store = dehaze::params::ParameterStore::new();
            model.register_params(&mut store)?;
            println!("name,shape,scalars");
            for e in store.iter() {
                let [a, b, c, d] = e.value.shape();
                println!("{},{a}x{b}x{c}x{d},{}", e.name, e.value.len());
            }
            println!("total,,{}", store.total_scalars());
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn synthesize(
    out: &Path,
    clean_dir: Option<&Path>,
    depth_dir: Option<&Path>,
    count: usize,
    width: usize,
    height: usize,
    beta_range: &str,
    light_range: &str,
    seed: u64,
) -> Result<()> {
    let (beta_lo, beta_hi) = parse_range("beta range", beta_range)?;
    let (a_lo, a_hi) = parse_range("light range", light_range)?;
    if beta_lo < 0.0 {
        return Err(Error::invalid("beta must be non-negative".to_string()));
    }
    if a_lo <= 0.0 || a_hi > 1.0 {
        return Err(Error::invalid(
            "atmospheric light must lie in (0, 1]".to_string(),
        ));
    }
    fs::create_dir_all(out)?;
    let mut rng = Rng::seed(seed);

    // (stem, clean image) sources
    let sources: Vec<(String, Result<Tensor>)> = match clean_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::data(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::data(format!(
                    "{}: no .ppm images found",
                    dir.display()
                )));
            }
            paths
                .into_iter()
                .map(|p| {
                    let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
                    (stem, image_io::read_ppm(&p))
                })
                .collect()
        }
        None => {
            if count == 0 || width == 0 || height == 0 {
                return Err(Error::invalid(
                    "count, width and height must be positive".to_string(),
                ));
            }
            (0..count)
                .map(|i| {
                    (
                        format!("scene_{i:03}"),
                        Ok(haze::procedural_clean(&mut rng, height, width)),
                    )
                })
                .collect()
        }
    };

    let mut manifest = String::new();
    let mut scenes = String::from("index,stem,atmospheric_light,beta\n");
    let mut ok = 0usize;
    let mut failed = 0usize;
    for (i, (stem, clean)) in sources.into_iter().enumerate() {
        let result = (|| -> Result<(f32, f32)> {
            let clean = clean?;
            let [_, _, h, w] = clean.shape();
            let depth = match depth_dir {
                Some(dir) => image_io::read_pgm(&dir.join(format!("{stem}.pgm")))?,
                None => haze::procedural_depth(&mut rng, h, w),
            };
            let beta = rng.uniform(beta_lo, beta_hi);
            let a = rng.uniform(a_lo, a_hi);
            let params = SceneParams {
                atmospheric_light: a,
                transmission: TransmissionSpec::Beta(beta),
            };
            let pair = haze::synthesize_hazy(&clean, &params, Some(&depth))?;
            image_io::write_ppm(&out.join(format!("hazy_{stem}.ppm")), &pair.hazy)?;
            image_io::write_ppm(&out.join(format!("clean_{stem}.ppm")), &pair.clean)?;
            image_io::write_pgm(
                &out.join(format!("trans_{stem}.pgm")),
                pair.transmission.as_ref().unwrap(),
            )?;
            Ok((a, beta))
        })();
        match result {
            Ok((a, beta)) => {
                manifest.push_str(&format!("hazy_{stem}.ppm\tclean_{stem}.ppm\n"));
                scenes.push_str(&format!("{i},{stem},{a},{beta}\n"));
                ok += 1;
            }
            Err(e) => {
                eprintln!("skipping scene {stem}: {e}");
                failed += 1;
            }
        }
    }
    if ok == 0 {
        return Err(Error::data("every scene failed to synthesize".to_string()));
    }
    fs::write(out.join("manifest.tsv"), manifest)?;
    fs::write(out.join("scenes.csv"), scenes)?;
    println!(
        "synthesized {ok} scenes into {} ({failed} skipped)",
        out.display()
    );
    Ok(())
}

fn ablate(
    s: &Settings,
    manifest: &Path,
    val_manifest: Option<&Path>,
    out: &Path,
    variants: &[DecoderVariant],
    dff_modes: &[bool],
) -> Result<()> {
    let train_pairs = training::load_manifest(manifest)?;
    let val_pairs = match val_manifest {
        Some(p) => training::load_manifest(p)?,
        None => training::load_manifest(manifest)?,
    };
    fs::create_dir_all(out)?;
    let mut csv = String::from("variant,dff,params,val_psnr,val_ssim\n");
    println!("variant,dff,params,val_psnr,val_ssim");
    for &variant in variants {
        for &dff in dff_modes {
            let net = NetworkConfig {
                decoder_variant: variant,
                dff_enabled: dff,
                ..s.network
            };
            let params = dehaze::network::count_parameters(&net)?;
            let run_dir = out.join(format!("{variant}_dff{}", dff as u8));
            let report =
                training::train(&net, &s.train, &train_pairs, &val_pairs, &run_dir, None)?;
            let line = format!(
                "{variant},{dff},{params},{:.4},{:.5}",
                report.val_psnr, report.val_ssim
            );
            println!("{line}");
            csv.push_str(&line);
            csv.push('\n');
        }
    }
    fs::write(out.join("ablation.csv"), csv)?;
    Ok(())
}

fn gradcheck(
    config: Option<&Path>,
    sets: &[String],
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<()> {
    // default to a tiny network so the sweep stays fast; config/--set override
    let mut s = Settings::default();
    s.network = NetworkConfig {
        levels: 2,
        resblocks: 1,
        base_channels: 2,
        max_channels: 64,
        decoder_variant: DecoderVariant::Sos,
        dff_enabled: true,
        refinement_blocks: 1,
    };
    if let Some(path) = config {
        s.load_file(path)?;
    }
    for assignment in sets {
        s.set_assignment(assignment)?;
    }
    s.network.validate()?;

    let (model, mut store) = Model::init(s.network, seed)?;
    let side = (2 * s.network.spatial_multiple()).max(8);
    let mut rng = Rng::seed(seed.wrapping_add(1));
    let mut input = Tensor::zeros([1, 3, side, side]);
    let mut target = Tensor::zeros([1, 3, side, side]);
    for v in input.data_mut() {
        *v = rng.uniform(0.0, 1.0);
    }
    for v in target.data_mut() {
        *v = rng.uniform(0.0, 1.0);
    }

    println!(
        "checking {} parameters of a {} network (eps {eps:e}, tol {tol:e})",
        store.total_scalars(),
        s.network.decoder_variant
    );
    let report = metrics::grad_check(&mut store, eps, |st| {
        st.zero_grads();
        model.loss_and_grads(st, &input, &target)
    })?;
    println!(
        "gradient L2 relative error {:.3e}; worst component {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        report.l2_rel_err, report.max_rel_err, report.worst_param, report.worst_index,
        report.analytic, report.numeric
    );
    if report.l2_rel_err > tol {
        return Err(Error::numeric(format!(
            "gradient check failed: {:.3e} > {tol:e}",
            report.l2_rel_err
        )));
    }
    println!("gradient check passed");
    Ok(())
}

fn boostcheck(gammas: &str, iterations: usize, seed: u64, size: usize) -> Result<()> {
    if size < 2 {
        return Err(Error::invalid("size must be at least 2".to_string()));
    }
    let gammas: Vec<f32> = gammas
        .split(',')
        .map(|g| {
            g.trim()
                .parse::<f32>()
                .map_err(|_| Error::invalid(format!("bad gamma {g:?}")))
        })
        .collect::<Result<Vec<f32>>>()?;
    if gammas.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
        return Err(Error::invalid("gammas must lie in [0, 1]".to_string()));
    }

    let mut rng = Rng::seed(seed);
    let clean = haze::procedural_clean(&mut rng, size, size);
    let depth = haze::procedural_depth(&mut rng, size, size);
    let beta = rng.uniform(0.4, 1.6);
    let a = rng.uniform(0.7, 1.0);
    let t = haze::transmission_from_depth(beta, &depth)?;
    let pair = haze::synthesize_hazy(
        &clean,
        &SceneParams {
            atmospheric_light: a,
            transmission: TransmissionSpec::Map(t.clone()),
        },
        None,
    )?;
    println!("scene: beta {beta:.3}, atmospheric light {a:.3}, {size}x{size}");
    println!("gamma,iteration,poh");
    let mut violations = Vec::new();
    for &gamma in &gammas {
        let dehazer = haze::ideal_dehazer(&t, a, gamma);
        let states = haze::sos_boost_images(&pair.hazy, dehazer, iterations)?;
        let mut prev = f64::INFINITY;
        for state in &states {
            let poh = haze::poh(&state.iterate, &t, a)?;
            println!("{gamma},{},{poh:.6}", state.index);
            if gamma > 0.0 && state.index > 0 && poh >= prev {
                violations.push(format!(
                    "gamma {gamma}: poh {poh:.6} did not decrease at iteration {}",
                    state.index
                ));
            }
            prev = poh;
        }
        if gamma == 0.0 {
            println!("# gamma 0 is the identity dehazer; its haze portion stays constant");
        }
    }
    if !violations.is_empty() {
        return Err(Error::numeric(violations.join("; ")));
    }
    println!("boosting strictly reduced the haze portion for every gamma > 0");
    Ok(())
}
