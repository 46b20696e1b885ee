use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use cf3::autoencoder::{Autoencoder, TrainConfig};
use cf3::eval::{
    file_bytes, generate_synthetic, report_csv, report_table, Policy, RunSummary, SynthSpec,
};
use cf3::lifting::{lift, save_sidecar, variance_filter, Sampling};
use cf3::pipeline::{
    evaluate_segmentation, load_any_scene, measure_fps, render_decoded, run_all, save_dataset,
    train_autoencoder, Dataset, PipelineConfig, DONOR_FILE,
};
use cf3::quantize::{dequantize, quantize_scene, QuantizeConfig, QuantizedScene, CFVQ_MAGIC};
use cf3::raster::{render, RenderConfig};
use cf3::scene::{load_cameras, load_scene, save_scene, write_cffm, GaussianScene};
use cf3::sparsify::{
    build_references, encode_scene, lifted_targets, run as sparsify, write_progress_csv,
    Similarity, SparsifyConfig,
};
use cf3::{Error, Result};

/// Compact feature fields on pre-trained Gaussian splatting scenes.
#[derive(Parser)]
#[command(name = "cf3", version)]
struct Cli {
    /// TOML file with optional `seed`, `threads` and [lift], [train],
    /// [sparsify], [quantize], [eval] tables keyed by flag name
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lift multi-view feature maps onto a donor scene
    Lift {
        #[arg(long)]
        scene: PathBuf,
        /// Data set directory with cameras.json and features/
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variance norms and contributions of the kept Gaussians
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[command(flatten)]
        lift: LiftArgs,
    },
    /// Train the feature autoencoder on a lifted scene
    TrainAe {
        #[arg(long)]
        lifted: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the encoded latent scene
        #[arg(long)]
        latent_out: Option<PathBuf>,
        /// Per-epoch loss CSV
        #[arg(long)]
        losses: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Prune and merge a latent scene
    Sparsify {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Progress CSV
        #[arg(long)]
        log: Option<PathBuf>,
        /// Lifted feature scene; when given, decoded renders are fit to its
        /// renders instead of to the decoded initial latent renders
        #[arg(long)]
        lifted: Option<PathBuf>,
        #[command(flatten)]
        sparsify: SparsifyArgs,
    },
    /// Vector-quantize a latent scene into a bundle
    Quantize {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the dequantized scene as PLY
        #[arg(long)]
        dequantized: Option<PathBuf>,
        #[command(flatten)]
        quantize: QuantizeArgs,
    },
    /// Render a scene (PLY or bundle) from every camera
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Render a single view
        #[arg(long)]
        view: Option<usize>,
        /// Decode latent renders with this checkpoint
        #[arg(long)]
        decoder: Option<PathBuf>,
        /// Also write PNG images for three-channel renders
        #[arg(long)]
        png: bool,
    },
    /// Segment decoded renders and score them against label maps
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Data set directory with cameras.json, labels/ and queries.json
        #[arg(long)]
        data: PathBuf,
        /// Donor artifact for the compression ratio
        #[arg(long)]
        donor: Option<PathBuf>,
        /// Append-free CSV report
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "cf3")]
        name: String,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Generate the synthetic room data set
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clone_fraction: Option<f64>,
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        views: Option<usize>,
        /// Image width and height
        #[arg(long)]
        resolution: Option<u32>,
        #[arg(long)]
        feature_dim: Option<usize>,
    },
    /// Lift, filter, train, sparsify, optionally quantize, and evaluate
    RunAll {
        /// Data set directory
        #[arg(long)]
        data: PathBuf,
        /// Donor scene (default: donor.ply in the data set)
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Quantize the sparse scene
        #[arg(long)]
        quantize: bool,
        /// Fit decoded renders to the decoded initial latent renders instead
        /// of to the lifted feature renders
        #[arg(long)]
        latent_targets: bool,
        #[command(flatten)]
        lift: LiftArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        sparsify: SparsifyArgs,
        #[command(flatten)]
        quantize_args: QuantizeArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Print scene statistics
    Info {
        #[arg(long)]
        scene: PathBuf,
    },
}

/// Fills each `None` of `self` from `base`.
macro_rules! overlay {
    ($t:ident { $($f:ident),* $(,)? }) => {
        impl $t {
            fn or(self, base: Self) -> Self {
                $t { $($f: self.$f.or(base.$f)),* }
            }
        }
    };
}

#[derive(Args, Deserialize, Default, Clone, Debug)]
#[serde(default, deny_unknown_fields)]
struct LiftArgs {
    /// nearest or bilinear
    #[arg(long)]
    sampling: Option<String>,
    /// Fraction of highest-variance Gaussians removed after lifting
    #[arg(long)]
    variance_fraction: Option<f64>,
}
overlay!(LiftArgs {
    sampling,
    variance_fraction
});

#[derive(Args, Deserialize, Default, Clone, Debug)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    /// Hidden widths of the encoder, comma separated
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lambda_cos: Option<f64>,
    #[arg(long)]
    lambda_struc: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// End of a cosine learning-rate schedule
    #[arg(long)]
    final_learning_rate: Option<f64>,
    #[arg(long)]
    ae_beta1: Option<f64>,
    #[arg(long)]
    ae_beta2: Option<f64>,
    #[arg(long)]
    ae_epsilon: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Random partners per batch element in the structure loss
    #[arg(long)]
    pairs_per_element: Option<usize>,
    /// Rows per gradient shard
    #[arg(long)]
    shard_size: Option<usize>,
}
overlay!(TrainArgs {
    hidden,
    lambda_cos,
    lambda_struc,
    batch_size,
    learning_rate,
    final_learning_rate,
    ae_beta1,
    ae_beta2,
    ae_epsilon,
    epochs,
    pairs_per_element,
    shard_size,
});

#[derive(Args, Deserialize, Default, Clone, Debug)]
#[serde(default, deny_unknown_fields)]
struct SparsifyArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    merge_interval: Option<usize>,
    /// Enable merging (true or false)
    #[arg(long)]
    merge: Option<bool>,
    /// Prune iterations, comma separated
    #[arg(long, value_delimiter = ',')]
    prune_at: Option<Vec<usize>>,
    #[arg(long)]
    contribution_threshold: Option<f64>,
    #[arg(long)]
    similarity_threshold: Option<f64>,
    #[arg(long)]
    gradient_threshold: Option<f64>,
    #[arg(long)]
    mahalanobis_threshold: Option<f64>,
    #[arg(long)]
    k_neighbors: Option<usize>,
    #[arg(long)]
    depth_weight: Option<f64>,
    #[arg(long)]
    gradient_momentum: Option<f64>,
    /// Position step, multiplied by the scene extent
    #[arg(long)]
    lr_position: Option<f64>,
    #[arg(long)]
    lr_log_scale: Option<f64>,
    #[arg(long)]
    lr_rotation: Option<f64>,
    #[arg(long)]
    lr_opacity: Option<f64>,
    #[arg(long)]
    lr_latent: Option<f64>,
    #[arg(long)]
    sparsify_beta1: Option<f64>,
    #[arg(long)]
    sparsify_beta2: Option<f64>,
    #[arg(long)]
    sparsify_epsilon: Option<f64>,
    /// Merge similarity space: latent or decoded
    #[arg(long)]
    similarity: Option<String>,
}
overlay!(SparsifyArgs {
    iterations,
    merge_interval,
    merge,
    prune_at,
    contribution_threshold,
    similarity_threshold,
    gradient_threshold,
    mahalanobis_threshold,
    k_neighbors,
    depth_weight,
    gradient_momentum,
    lr_position,
    lr_log_scale,
    lr_rotation,
    lr_opacity,
    lr_latent,
    sparsify_beta1,
    sparsify_beta2,
    sparsify_epsilon,
    similarity,
});

#[derive(Args, Deserialize, Default, Clone, Debug)]
#[serde(default, deny_unknown_fields)]
struct QuantizeArgs {
    #[arg(long)]
    geometry_k: Option<usize>,
    #[arg(long)]
    latent_k: Option<usize>,
    #[arg(long)]
    kmeans_iterations: Option<usize>,
    /// Store positions as f16 (true or false)
    #[arg(long)]
    half_positions: Option<bool>,
}
overlay!(QuantizeArgs {
    geometry_k,
    latent_k,
    kmeans_iterations,
    half_positions,
});

#[derive(Args, Deserialize, Default, Clone, Debug)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    /// Background when the best cosine is below this
    #[arg(long)]
    background: Option<f64>,
    /// Per-query thresholds, comma separated, in query order
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}
overlay!(EvalArgs {
    background,
    thresholds
});

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    lift: LiftArgs,
    train: TrainArgs,
    sparsify: SparsifyArgs,
    quantize: QuantizeArgs,
    eval: EvalArgs,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

impl LiftArgs {
    fn apply(self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(s) = self.sampling {
            cfg.lift.sampling = match s.as_str() {
                "nearest" => Sampling::Nearest,
                "bilinear" => Sampling::Bilinear,
                other => return Err(Error::Config(format!("unknown sampling {other:?}"))),
            };
        }
        set(&mut cfg.variance_fraction, self.variance_fraction);
        Ok(())
    }
}

impl TrainArgs {
    fn apply(self, c: &mut TrainConfig) {
        set(&mut c.hidden, self.hidden);
        set(&mut c.lambda_cos, self.lambda_cos);
        set(&mut c.lambda_struc, self.lambda_struc);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.learning_rate, self.learning_rate);
        if self.final_learning_rate.is_some() {
            c.final_learning_rate = self.final_learning_rate;
        }
        set(&mut c.beta1, self.ae_beta1);
        set(&mut c.beta2, self.ae_beta2);
        set(&mut c.epsilon, self.ae_epsilon);
        set(&mut c.epochs, self.epochs);
        set(&mut c.pairs_per_element, self.pairs_per_element);
        set(&mut c.shard_size, self.shard_size);
    }
}

impl SparsifyArgs {
    fn apply(self, c: &mut SparsifyConfig) -> Result<()> {
        set(&mut c.max_iterations, self.iterations);
        set(&mut c.merge_interval, self.merge_interval);
        set(&mut c.merge, self.merge);
        set(&mut c.prune_at, self.prune_at);
        set(&mut c.contribution_threshold, self.contribution_threshold);
        set(&mut c.similarity_threshold, self.similarity_threshold);
        set(&mut c.gradient_threshold, self.gradient_threshold);
        set(&mut c.mahalanobis_threshold, self.mahalanobis_threshold);
        set(&mut c.k_neighbors, self.k_neighbors);
        set(&mut c.depth_weight, self.depth_weight);
        set(&mut c.gradient_momentum, self.gradient_momentum);
        set(&mut c.learning_rates.position, self.lr_position);
        set(&mut c.learning_rates.log_scale, self.lr_log_scale);
        set(&mut c.learning_rates.rotation, self.lr_rotation);
        set(&mut c.learning_rates.opacity, self.lr_opacity);
        set(&mut c.learning_rates.latent, self.lr_latent);
        set(&mut c.beta1, self.sparsify_beta1);
        set(&mut c.beta2, self.sparsify_beta2);
        set(&mut c.epsilon, self.sparsify_epsilon);
        if let Some(s) = self.similarity {
            c.similarity = match s.as_str() {
                "latent" => Similarity::Latent,
                "decoded" => Similarity::Decoded,
                other => return Err(Error::Config(format!("unknown similarity {other:?}"))),
            };
        }
        Ok(())
    }
}

impl QuantizeArgs {
    fn apply(self, c: &mut QuantizeConfig) {
        set(&mut c.geometry_k, self.geometry_k);
        set(&mut c.latent_k, self.latent_k);
        set(&mut c.iterations, self.kmeans_iterations);
        set(&mut c.half_positions, self.half_positions);
    }
}

impl EvalArgs {
    fn policy(self) -> Policy {
        match (self.thresholds, self.background) {
            (Some(t), _) => Policy::PerQuery(t),
            (None, Some(b)) => Policy::Argmax { background: b },
            (None, None) => Policy::default(),
        }
    }
}

fn show_config(cfg: &impl Debug) {
    eprintln!("effective config: {cfg:#?}");
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::Format(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| Error::Format(format!("cannot create {}: {e}", path.display())))
}

fn losses_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    out
}

fn save_png(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::SizeMismatch("image buffer does not match its size".into()))?;
    img.save(path)
        .map_err(|e| Error::Format(format!("cannot write {}: {e}", path.display())))
}

fn as_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn summary(
    name: &str,
    scene: &GaussianScene,
    artifact: &Path,
    decoder: &Autoencoder<f64>,
    data: &Dataset,
    donor: Option<&Path>,
    policy: &Policy,
) -> Result<RunSummary> {
    let (Some(labels), Some(queries)) = (&data.labels, &data.queries) else {
        return Err(Error::Format(
            "evaluation needs labels/ and queries.json in the data set".into(),
        ));
    };
    let render_cfg = RenderConfig::default();
    let metrics = evaluate_segmentation(
        scene,
        decoder,
        &data.cameras,
        labels,
        queries,
        policy,
        &render_cfg,
    )?;
    let storage_bytes = file_bytes(artifact)?;
    Ok(RunSummary {
        name: name.to_string(),
        storage_bytes,
        fps: measure_fps(scene, &data.cameras, &render_cfg)?,
        miou: metrics.miou,
        accuracy: metrics.accuracy,
        gaussians: scene.len(),
        donor_bytes: match donor {
            Some(p) => file_bytes(p)?,
            None => storage_bytes,
        },
    })
}

fn execute(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let threads = cli.threads.or(file.threads);
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);

    match cli.command {
        Command::Lift {
            scene,
            data,
            out,
            sidecar,
            lift: args,
        } => {
            let mut cfg = PipelineConfig::default();
            args.or(file.lift).apply(&mut cfg)?;
            show_config(&(&cfg.lift, cfg.variance_fraction));
            let donor = load_scene(&scene)?;
            let data = Dataset::load(&data)?;
            let field = lift(&donor, &data.cameras, &data.maps, &cfg.lift)?;
            let field = variance_filter(&field, cfg.variance_fraction)?;
            let lifted = field.to_scene(&donor)?;
            save_scene(&lifted, &out)?;
            if let Some(path) = sidecar {
                save_sidecar(&field, path)?;
            }
            log::info!("lifted {} of {} gaussians", lifted.len(), donor.len());
        }
        Command::TrainAe {
            lifted,
            out,
            latent_out,
            losses,
            train: args,
        } => {
            let mut cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            args.or(file.train).apply(&mut cfg);
            show_config(&cfg);
            let lifted = load_scene(&lifted)?;
            let outcome = train_autoencoder(&lifted, &cfg)?;
            outcome.model.save(&out)?;
            if let Some(path) = losses {
                write_text(&path, &losses_csv(&outcome.epoch_losses))?;
            }
            if let Some(epoch) = outcome.diverged_at {
                return Err(Error::Numerical(format!(
                    "training diverged in epoch {epoch}"
                )));
            }
            if let Some(path) = latent_out {
                save_scene(&encode_scene(&lifted, &outcome.model)?, path)?;
            }
            log::info!("final loss {:?}", outcome.epoch_losses.last());
        }
        Command::Sparsify {
            latent,
            model,
            cameras,
            out,
            log,
            lifted,
            sparsify: args,
        } => {
            let mut cfg = SparsifyConfig {
                seed,
                ..SparsifyConfig::default()
            };
            args.or(file.sparsify).apply(&mut cfg)?;
            show_config(&cfg);
            let latent = load_scene(&latent)?;
            let decoder = Autoencoder::<f32>::load(&model)?.to_f64();
            let cameras = load_cameras(&cameras)?;
            let mut refs = build_references(&latent, &cameras, Some(&decoder), &cfg.render)?;
            if let Some(path) = lifted {
                lifted_targets(&mut refs, &load_scene(&path)?, &cameras, &cfg.render)?;
            }
            let outcome = sparsify(&latent, &cameras, &refs, Some(&decoder), &cfg)?;
            save_scene(&outcome.scene, &out)?;
            if let Some(path) = log {
                write_progress_csv(&outcome.log, path)?;
            }
            log::info!("{} -> {} gaussians", latent.len(), outcome.scene.len());
            if let Some(err) = outcome.stopped {
                return Err(err);
            }
        }
        Command::Quantize {
            scene,
            out,
            dequantized,
            quantize: args,
        } => {
            let mut cfg = QuantizeConfig {
                seed,
                ..QuantizeConfig::default()
            };
            args.or(file.quantize).apply(&mut cfg);
            show_config(&cfg);
            let scene = load_scene(&scene)?;
            let bundle = quantize_scene(&scene, &cfg)?;
            bundle.save(&out)?;
            if let Some(path) = dequantized {
                save_scene(&dequantize(&bundle)?, path)?;
            }
            log::info!("bundle of {} bytes", bundle.byte_size());
        }
        Command::Render {
            scene,
            cameras,
            out,
            view,
            decoder,
            png,
        } => {
            let scene = load_any_scene(&scene)?;
            let cameras = load_cameras(&cameras)?;
            let decoder = decoder
                .map(|p| Autoencoder::<f32>::load(p))
                .transpose()?
                .map(|m| m.to_f64());
            let views: Vec<usize> = match view {
                Some(v) if v < cameras.len() => vec![v],
                Some(v) => {
                    return Err(Error::Config(format!(
                        "view {v} out of {} cameras",
                        cameras.len()
                    )))
                }
                None => (0..cameras.len()).collect(),
            };
            create_dir(&out)?;
            let cfg = RenderConfig::default();
            for v in views {
                let cam = &cameras[v];
                let (w, h) = (cam.width as usize, cam.height as usize);
                let (pixels, dim) = match &decoder {
                    Some(d) => (render_decoded(&scene, cam, d, &cfg)?, d.input_dim()),
                    None => (render(&scene, cam, &cfg)?.image, scene.payload_dim),
                };
                write_cffm(
                    out.join(format!("view_{v:03}.cffm")),
                    h,
                    w,
                    dim,
                    &as_f32(&pixels),
                )?;
                if png {
                    if dim != 3 {
                        return Err(Error::Config(format!(
                            "PNG export needs 3 channels, render has {dim}"
                        )));
                    }
                    save_png(&out.join(format!("view_{v:03}.png")), w, h, &pixels)?;
                }
            }
        }
        Command::Eval {
            scene,
            model,
            data,
            donor,
            report,
            name,
            eval: args,
        } => {
            let policy = args.or(file.eval).policy();
            show_config(&policy);
            let loaded = load_any_scene(&scene)?;
            let decoder = Autoencoder::<f32>::load(&model)?.to_f64();
            let data = Dataset::load(&data)?;
            let run = summary(
                &name,
                &loaded,
                &scene,
                &decoder,
                &data,
                donor.as_deref(),
                &policy,
            )?;
            print!("{}", report_table(std::slice::from_ref(&run)));
            if let Some(path) = report {
                write_text(&path, &report_csv(&[run]))?;
            }
        }
        Command::Synth {
            out,
            clone_fraction,
            jitter,
            views,
            resolution,
            feature_dim,
        } => {
            let mut spec = SynthSpec::default();
            set(&mut spec.clone_fraction, clone_fraction);
            set(&mut spec.jitter, jitter);
            set(&mut spec.views, views);
            set(&mut spec.width, resolution);
            set(&mut spec.height, resolution);
            set(&mut spec.feature_dim, feature_dim);
            show_config(&spec);
            let synth = generate_synthetic(&spec, seed)?;
            save_dataset(&synth, &out)?;
            log::info!(
                "{} gaussians, {} views",
                synth.scene.len(),
                synth.cameras.len()
            );
        }
        Command::RunAll {
            data,
            scene,
            out,
            quantize,
            latent_targets,
            lift: lift_args,
            train: train_args,
            sparsify: sparsify_args,
            quantize_args,
            eval: eval_args,
        } => {
            let mut cfg = PipelineConfig {
                quantize: quantize.then(QuantizeConfig::default),
                lifted_targets: !latent_targets,
                ..PipelineConfig::default()
            }
            .with_seed(seed);
            lift_args.or(file.lift).apply(&mut cfg)?;
            train_args.or(file.train).apply(&mut cfg.train);
            sparsify_args.or(file.sparsify).apply(&mut cfg.sparsify)?;
            if let Some(q) = &mut cfg.quantize {
                quantize_args.or(file.quantize).apply(q);
            }
            cfg.policy = eval_args.or(file.eval).policy();
            show_config(&cfg);

            let donor_path = scene.unwrap_or_else(|| data.join(DONOR_FILE));
            let donor = load_scene(&donor_path)?;
            let dataset = Dataset::load(&data)?;
            create_dir(&out)?;
            let result = run_all(&donor, &dataset.cameras, &dataset.maps, &cfg)?;
            save_scene(&result.lifted, out.join("lifted.ply"))?;
            save_sidecar(&result.field, out.join("lifted_stats.cffm"))?;
            result.training.model.save(out.join("model.cfae"))?;
            write_text(
                &out.join("losses.csv"),
                &losses_csv(&result.training.epoch_losses),
            )?;
            save_scene(&result.latent, out.join("latent.ply"))?;
            save_scene(&result.sparse.scene, out.join("sparse.ply"))?;
            write_progress_csv(&result.sparse.log, out.join("progress.csv"))?;
            if let Some(err) = result.sparse.stopped {
                return Err(err);
            }
            let artifact = match &result.quantized {
                Some(bundle) => {
                    let path = out.join("bundle.cfvq");
                    bundle.save(&path)?;
                    path
                }
                None => out.join("sparse.ply"),
            };
            println!(
                "gaussians: donor {} lifted {} final {} ({:.1}% of donor)",
                donor.len(),
                result.lifted.len(),
                result.sparse.scene.len(),
                100.0 * result.sparse.scene.len() as f64 / donor.len() as f64
            );
            if dataset.labels.is_some() && dataset.queries.is_some() {
                let decoder = result.training.model.to_f64();
                let final_scene = result.final_scene()?;
                let run = summary(
                    "cf3",
                    &final_scene,
                    &artifact,
                    &decoder,
                    &dataset,
                    Some(&donor_path),
                    &cfg.policy,
                )?;
                print!("{}", report_table(std::slice::from_ref(&run)));
                write_text(&out.join("report.csv"), &report_csv(&[run]))?;
            }
        }
        Command::Info { scene } => {
            let bytes = file_bytes(&scene)?;
            let mut magic = [0u8; 4];
            let head =
                fs::read(&scene).map_err(|e| Error::Format(format!("{}: {e}", scene.display())))?;
            magic.copy_from_slice(head.get(..4).unwrap_or(b"    "));
            let loaded = if &magic == CFVQ_MAGIC {
                let bundle = QuantizedScene::load(&scene)?;
                println!("format: CFVQ bundle");
                println!(
                    "codebooks: geometry {} latent {}",
                    bundle.geometry.len(),
                    bundle.latent.len()
                );
                dequantize(&bundle)?
            } else {
                let s = load_scene(&scene)?;
                println!("format: PLY");
                println!("stage: {}", s.metadata.stage.as_str());
                s
            };
            let (lo, hi) = if loaded.is_empty() {
                ([0.0; 3], [0.0; 3])
            } else {
                loaded.bounds()
            };
            println!("N: {}", loaded.len());
            println!("payload_dim: {}", loaded.payload_dim);
            println!("bytes: {bytes}");
            println!(
                "bounds: [{:.4}, {:.4}, {:.4}] .. [{:.4}, {:.4}, {:.4}]",
                lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if !usage {
                return ExitCode::SUCCESS;
            }
            eprintln!("cf3-error kind=usage code=1");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.exit_code();
            eprintln!(
                "cf3-error kind={} code={code} message={}",
                err.kind(),
                serde_json::to_string(&err.to_string()).unwrap_or_default()
            );
            ExitCode::from(code as u8)
        }
    }
}
