//! Command-line surface: data curation and synthesis, training, generation,
//! evaluation, and model diagnostics. Binary tensors use the shared `.msmd`
//! format; manifests are JSON lines. Every command is deterministic under a
//! fixed `--seed`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use facediff::audio_features::{self, SAMPLES_PER_FRAME};
use facediff::data_pipeline::{
    filter_manifest, gen_synthetic_dataset, read_manifest, split_train_val, write_manifest,
    FilterRules, SynthOptions,
};
use facediff::metrics::{decode_vertices, evaluate_latents, proxy_decoder, VertexDecoder};
use facediff::model::Model;
use facediff::sampler::{generate_traced, CfgScales};
use facediff::tensor_io::{read_matrix, read_tensor, write_matrix};
use facediff::training::{self, LoadedClip, TrainConfig, TrainEvent};
use facediff::Real;

#[derive(Parser)]
#[command(
    name = "facediff",
    version,
    about = "Style-controlled speech-driven facial motion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Filter a clip manifest by tags, head pose, and pose jumps.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum absolute yaw/pitch in degrees.
        #[arg(long, default_value_t = 45.0)]
        max_angle: f64,
        /// Maximum frame-to-frame pose jump in degrees.
        #[arg(long, default_value_t = 15.0)]
        jump: f64,
    },
    /// Generate a synthetic audio/motion dataset with known style parameters.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 67)]
        d_motion: usize,
        #[arg(long, default_value_t = 220)]
        min_frames: usize,
        #[arg(long, default_value_t = 320)]
        max_frames: usize,
    },
    /// Train a model from a manifest and a flat key-value config file.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed when given.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate motion for an audio file with an optional style reference.
    Generate {
        /// Waveform (rank-1) or precomputed feature (rank-2) tensor.
        #[arg(long)]
        audio: PathBuf,
        /// Style reference motion file, or `none` for the null style.
        #[arg(long)]
        style: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        cfg_audio: f64,
        #[arg(long, default_value_t = 1.0)]
        cfg_style: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Frame count override; defaults to the audio duration.
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the basis mixing weights (N x K) to this file.
        #[arg(long)]
        alpha_out: Option<PathBuf>,
        /// Sample the style code instead of using the posterior mean.
        #[arg(long)]
        stochastic_style: bool,
    },
    /// Compare generated motion against ground truth on vertex metrics.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long = "gen")]
        generated: PathBuf,
        /// Vertex decoder file; defaults to the seeded proxy decoder.
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        decoder_seed: u64,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the decoded style basis and an alpha trajectory for plotting.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Style reference motion file, or `none` for the null style.
        #[arg(long)]
        style: String,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        cfg_audio: f64,
        #[arg(long, default_value_t = 1.0)]
        cfg_style: f64,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Curate {
            manifest,
            out,
            max_angle,
            jump,
        } => curate(&manifest, &out, max_angle, jump),
        Command::Synth {
            n,
            seed,
            out_dir,
            d_motion,
            min_frames,
            max_frames,
        } => {
            let opts = SynthOptions {
                d_motion,
                min_frames,
                max_frames,
            };
            let ds = gen_synthetic_dataset(&out_dir, n, seed, &opts)?;
            println!(
                "wrote {} clips under {}",
                ds.records.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Train {
            manifest,
            config,
            out,
            seed,
        } => train(&manifest, &config, &out, seed),
        Command::Generate {
            audio,
            style,
            checkpoint,
            cfg_audio,
            cfg_style,
            seed,
            out,
            frames,
            alpha_out,
            stochastic_style,
        } => {
            let model = Model::<Real>::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let feats = load_audio(&audio, &model, frames)?;
            let style_clip = load_style(&style, &model)?;
            let scales = CfgScales {
                lambda_audio: cfg_audio,
                lambda_style: cfg_style,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gen = generate_traced(
                &model,
                &feats,
                style_clip.as_ref(),
                &scales,
                stochastic_style,
                &mut rng,
            )?;
            write_matrix(&out, &gen.motion)?;
            if let Some(alpha_path) = alpha_out {
                let Some(alpha) = &gen.alpha else {
                    bail!("model has no style basis (K=0); there are no weights to write");
                };
                write_matrix(&alpha_path, alpha)?;
            }
            println!(
                "generated {} frames -> {}",
                gen.motion.nrows(),
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            gt,
            generated,
            decoder,
            decoder_seed,
            out,
        } => {
            let gt_m = read_matrix::<Real>(&gt)?;
            let gen_m = read_matrix::<Real>(&generated)?;
            let dec = match decoder {
                Some(p) => VertexDecoder::<Real>::load(&p)?,
                None => proxy_decoder(gt_m.ncols(), decoder_seed),
            };
            let report = evaluate_latents(&gt_m, &gen_m, &dec)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(&path, json)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Diagnose {
            checkpoint,
            style,
            audio,
            seed,
            out_dir,
            cfg_audio,
            cfg_style,
        } => diagnose(
            &checkpoint,
            &style,
            &audio,
            seed,
            &out_dir,
            cfg_audio,
            cfg_style,
        ),
    }
}

fn curate(manifest: &Path, out: &Path, max_angle: f64, jump: f64) -> anyhow::Result<()> {
    let records = read_manifest(manifest)?;
    let rules = FilterRules {
        max_angle_deg: max_angle,
        max_jump_deg: jump,
        ..Default::default()
    };
    let kept = filter_manifest(&records, &rules)?;
    write_manifest(out, &kept)?;
    println!(
        "kept {} of {} records -> {}",
        kept.len(),
        records.len(),
        out.display()
    );
    Ok(())
}

fn train(manifest: &Path, config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut config = TrainConfig::from_file(config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let records = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let (train_recs, val_recs) = split_train_val(&records, config.train_ratio, config.split_seed)?;
    let load_set =
        |recs: &[facediff::data_pipeline::ClipRecord]| -> anyhow::Result<Vec<LoadedClip<Real>>> {
            recs.iter()
                .map(|r| {
                    training::load_clip(base, r, &config.model)
                        .with_context(|| format!("loading clip {}", r.id))
                })
                .collect()
        };
    let train_clips = load_set(&train_recs)?;
    let val_clips = load_set(&val_recs)?;
    println!(
        "loaded {} train / {} val clips",
        train_clips.len(),
        val_clips.len()
    );
    let train_pairs = training::pairs_from_clips(&train_clips, config.model.window)?;
    let val_pairs = training::pairs_from_clips(&val_clips, config.model.window)?;

    let mut model = Model::<Real>::new(config.model.clone(), config.seed)?;
    let report = training::train(
        &mut model,
        &train_pairs,
        &val_pairs,
        &config,
        out,
        |event| match event {
            TrainEvent::Step { step, losses } => {
                if step % 100 == 0 || *step == config.max_iters {
                    println!(
                        "step {step} loss {:.6} (simple {:.6} vel {:.6} smooth {:.6} kl {:.6})",
                        losses.total, losses.simple, losses.vel, losses.smooth, losses.kl
                    );
                }
            }
            TrainEvent::Validation {
                step,
                val_loss,
                improved,
            } => {
                let mark = if *improved { " *" } else { "" };
                println!("step {step} val {val_loss:.6}{mark}");
            }
            TrainEvent::Checkpoint { step, path } => {
                println!("step {step} checkpoint -> {}", path.display());
            }
            TrainEvent::EarlyStop { step, best_val } => {
                println!("early stop at step {step}, best val {best_val:.6}");
            }
        },
    )?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        report.steps_run,
        report.final_loss,
        report.checkpoint.display()
    );
    Ok(())
}

/// Loads audio at the model's feature width. Waveform length determines the
/// frame count unless overridden.
fn load_audio(
    path: &Path,
    model: &Model<Real>,
    frames: Option<usize>,
) -> anyhow::Result<Array2<Real>> {
    let raw = read_tensor::<Real>(path)?;
    let n_frames = match frames {
        Some(n) => n,
        None => match raw.ndim() {
            1 => raw.len().div_ceil(SAMPLES_PER_FRAME),
            2 => raw.shape()[0],
            d => bail!("audio tensor must be rank 1 or 2, got rank {d}"),
        },
    };
    if n_frames == 0 {
        bail!("audio file {} is empty", path.display());
    }
    Ok(audio_features::load_audio_for_frames::<Real>(
        path,
        n_frames,
        model.config.d_audio,
        model.config.audio_seed,
    )?)
}

/// `none` means the null style; otherwise a motion file, truncated to the
/// encoder's maximum reference length.
fn load_style(spec: &str, model: &Model<Real>) -> anyhow::Result<Option<Array2<Real>>> {
    if spec == "none" {
        return Ok(None);
    }
    let clip = read_matrix::<Real>(Path::new(spec))?;
    let max = model.config.max_style_frames;
    let clip = if clip.nrows() > max {
        clip.slice(ndarray::s![..max, ..]).to_owned()
    } else {
        clip
    };
    Ok(Some(clip))
}

fn write_tsv(path: &Path, header: &str, data: &Array2<Real>) -> anyhow::Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in data.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&line.join("\t"));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn diagnose(
    checkpoint: &Path,
    style: &str,
    audio: &Path,
    seed: u64,
    out_dir: &Path,
    cfg_audio: f64,
    cfg_style: f64,
) -> anyhow::Result<()> {
    let model = Model::<Real>::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let style_clip = load_style(style, &model)?;

    // Basis vectors for this style, decoded to proxy vertices.
    let code = match &style_clip {
        Some(clip) => model.encode_style(clip)?.mu,
        None => model.null_style_code(),
    };
    let basis = model.basis.decode_arrays(&model.params, &code)?;
    let basis_path = out_dir.join("basis_vertices.tsv");
    match &basis {
        Some(b) => {
            let dec = proxy_decoder::<Real>(model.config.d_motion, seed);
            let verts = decode_vertices(b, &dec)?;
            let (k, v, _) = verts.dim();
            let flat = verts.into_shape_with_order((k, 3 * v))?;
            write_tsv(
                &basis_path,
                "# one basis vector per row; columns x0 y0 z0 x1 y1 z1 ...",
                &flat,
            )?;
            println!(
                "wrote {} ({k} basis rows, {v} vertices)",
                basis_path.display()
            );
        }
        None => {
            std::fs::write(&basis_path, "# model has no style basis (K=0)\n")?;
            println!("wrote {} (no style basis)", basis_path.display());
        }
    }

    // Mixing-weight trajectory of one generation pass.
    let feats = load_audio(audio, &model, None)?;
    let scales = CfgScales {
        lambda_audio: cfg_audio,
        lambda_style: cfg_style,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = generate_traced(
        &model,
        &feats,
        style_clip.as_ref(),
        &scales,
        false,
        &mut rng,
    )?;
    let alpha_path = out_dir.join("alpha.tsv");
    match &gen.alpha {
        Some(alpha) => {
            write_tsv(
                &alpha_path,
                "# frame rows, one column per basis vector",
                alpha,
            )?;
            println!(
                "wrote {} ({} x {})",
                alpha_path.display(),
                alpha.nrows(),
                alpha.ncols()
            );
        }
        None => {
            std::fs::write(&alpha_path, "# model has no style basis (K=0)\n")?;
            println!("wrote {} (no style basis)", alpha_path.display());
        }
    }
    Ok(())
}
