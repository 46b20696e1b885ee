//! Stage orchestration shared by the command-line tool and the examples.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;

use crate::autoencoder::{train, Autoencoder, TrainConfig, TrainOutcome, LATENT_DIM};
use crate::error::{Error, Result};
use crate::eval::{miou_accuracy, segment, Metrics, Policy, QuerySet, SynthScene};
use crate::lifting::{lift, variance_filter, LiftConfig, LiftedField};
use crate::quantize::{dequantize, quantize_scene, QuantizeConfig, QuantizedScene, CFVQ_MAGIC};
use crate::raster::{render, RenderConfig};
use crate::scene::{
    load_cameras, load_scene, read_cffm, save_cameras, save_scene, write_cffm, Camera, FeatureMap,
    GaussianScene,
};
use crate::sparsify::{
    build_references, encode_scene, lifted_targets, run as sparsify, SparsifyConfig,
    SparsifyOutcome,
};

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub lift: LiftConfig,
    /// Fraction of kept Gaussians dropped by the variance filter.
    pub variance_fraction: f64,
    pub train: TrainConfig,
    pub sparsify: SparsifyConfig,
    /// Fit decoded latent renders to renders of the lifted features instead
    /// of to the decoded renders of the initial latent scene.
    pub lifted_targets: bool,
    pub quantize: Option<QuantizeConfig>,
    pub policy: Policy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lift: LiftConfig::default(),
            variance_fraction: 1e-4,
            train: TrainConfig::default(),
            sparsify: SparsifyConfig::default(),
            lifted_targets: true,
            quantize: None,
            policy: Policy::default(),
        }
    }
}

impl PipelineConfig {
    /// Sets the seed of every randomized stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.sparsify.seed = seed;
        if let Some(q) = &mut self.quantize {
            q.seed = seed;
        }
        self
    }
}

/// Lifted features as training rows.
pub fn feature_rows(lifted: &GaussianScene) -> Array2<f32> {
    let mut rows = Array2::<f32>::zeros((lifted.len(), lifted.payload_dim));
    for (i, g) in lifted.gaussians.iter().enumerate() {
        for (d, v) in g.payload.iter().enumerate() {
            rows[[i, d]] = *v as f32;
        }
    }
    rows
}

/// Trains on the lifted features. A batch larger than the data set is
/// reduced to the data set size.
pub fn train_autoencoder(lifted: &GaussianScene, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let rows = feature_rows(lifted);
    let mut cfg = cfg.clone();
    if cfg.batch_size > rows.nrows() {
        log::warn!(
            "batch size {} reduced to the {} lifted features",
            cfg.batch_size,
            rows.nrows()
        );
        cfg.batch_size = rows.nrows();
    }
    train(rows.view(), &cfg)
}

/// Renders the latent scene and decodes every pixel; `H·W·D` values.
pub fn render_decoded(
    latent: &GaussianScene,
    cam: &Camera,
    decoder: &Autoencoder<f64>,
    cfg: &RenderConfig,
) -> Result<Vec<f64>> {
    if latent.payload_dim != LATENT_DIM {
        return Err(Error::DimensionMismatch {
            expected: LATENT_DIM,
            got: latent.payload_dim,
        });
    }
    let out = render(latent, cam, cfg)?;
    let view =
        ndarray::ArrayView2::from_shape((out.width * out.height, LATENT_DIM), &out.image[..])
            .map_err(|e| Error::SizeMismatch(e.to_string()))?;
    Ok(decoder.decode_batch(view)?.into_raw_vec_and_offset().0)
}

/// Mean absolute difference, over every pixel and channel of every view,
/// between the decoded latent render and the render of the lifted scene.
pub fn feature_error(
    latent: &GaussianScene,
    decoder: &Autoencoder<f64>,
    lifted: &GaussianScene,
    cameras: &[Camera],
    cfg: &RenderConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for cam in cameras {
        let decoded = render_decoded(latent, cam, decoder, cfg)?;
        let target = render(lifted, cam, cfg)?.image;
        if decoded.len() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: target.len(),
                got: decoded.len(),
            });
        }
        sum += decoded
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        count += target.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Segments the decoded render of every view and scores it against the
/// ground-truth label maps, pooling the pixels of all views.
pub fn evaluate_segmentation(
    latent: &GaussianScene,
    decoder: &Autoencoder<f64>,
    cameras: &[Camera],
    ground_truth: &[Vec<u32>],
    queries: &QuerySet,
    policy: &Policy,
    cfg: &RenderConfig,
) -> Result<Metrics> {
    if cameras.len() != ground_truth.len() {
        return Err(Error::SizeMismatch(format!(
            "{} cameras but {} label maps",
            cameras.len(),
            ground_truth.len()
        )));
    }
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (cam, labels) in cameras.iter().zip(ground_truth) {
        let decoded = render_decoded(latent, cam, decoder, cfg)?;
        pred.extend(segment(&decoded, decoder.input_dim(), queries, policy)?);
        gt.extend_from_slice(labels);
    }
    miou_accuracy(&pred, &gt, &queries.labels())
}

/// Frames per second of rendering the scene payload over all cameras.
pub fn measure_fps(scene: &GaussianScene, cameras: &[Camera], cfg: &RenderConfig) -> Result<f64> {
    let start = Instant::now();
    for cam in cameras {
        render(scene, cam, cfg)?;
    }
    Ok(cameras.len() as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

pub struct PipelineOutput {
    pub field: LiftedField,
    /// Kept, variance-filtered Gaussians with their lifted features.
    pub lifted: GaussianScene,
    pub training: TrainOutcome,
    /// Encoded lifted scene, the starting point of sparsification.
    pub latent: GaussianScene,
    pub sparse: SparsifyOutcome,
    pub quantized: Option<QuantizedScene>,
}

impl PipelineOutput {
    /// The final renderable scene: dequantized when quantization ran.
    pub fn final_scene(&self) -> Result<GaussianScene> {
        match &self.quantized {
            Some(q) => dequantize(q),
            None => Ok(self.sparse.scene.clone()),
        }
    }
}

/// Lift, filter, train, sparsify and optionally quantize.
pub fn run_all(
    donor: &GaussianScene,
    cameras: &[Camera],
    maps: &[FeatureMap],
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let field = lift(donor, cameras, maps, &cfg.lift)?;
    let field = variance_filter(&field, cfg.variance_fraction)?;
    let lifted = field.to_scene(donor)?;
    log::info!("lifted {} of {} gaussians", lifted.len(), donor.len());

    let training = train_autoencoder(&lifted, &cfg.train)?;
    if let Some(epoch) = training.diverged_at {
        return Err(Error::Numerical(format!(
            "autoencoder training diverged in epoch {epoch}"
        )));
    }
    let decoder = training.model.to_f64();
    let latent = encode_scene(&lifted, &training.model)?;
    let mut refs = build_references(&latent, cameras, Some(&decoder), &cfg.sparsify.render)?;
    if cfg.lifted_targets {
        lifted_targets(&mut refs, &lifted, cameras, &cfg.sparsify.render)?;
    }
    let sparse = sparsify(&latent, cameras, &refs, Some(&decoder), &cfg.sparsify)?;
    log::info!(
        "sparsified to {} gaussians in {:.1}s",
        sparse.scene.len(),
        sparse.wall_time.as_secs_f64()
    );
    let quantized = match (&cfg.quantize, &sparse.stopped) {
        (Some(q), None) => Some(quantize_scene(&sparse.scene, q)?),
        _ => None,
    };
    Ok(PipelineOutput {
        field,
        lifted,
        training,
        latent,
        sparse,
        quantized,
    })
}

pub const DONOR_FILE: &str = "donor.ply";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const FEATURES_DIR: &str = "features";
pub const LABELS_DIR: &str = "labels";
pub const QUERIES_FILE: &str = "queries.json";

/// Writes a synthetic data set as `donor.ply`, `cameras.json`,
/// `features/view_NNN.cffm`, `labels/view_NNN.cffm` and `queries.json`.
pub fn save_dataset(synth: &SynthScene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in [FEATURES_DIR, LABELS_DIR] {
        let path = dir.join(sub);
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
    }
    save_scene(&synth.scene, dir.join(DONOR_FILE))?;
    save_cameras(&synth.cameras, dir.join(CAMERAS_FILE))?;
    for (v, (map, labels)) in synth.maps.iter().zip(&synth.labels).enumerate() {
        let name = format!("view_{v:03}.cffm");
        map.save(dir.join(FEATURES_DIR).join(&name))?;
        let ids: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        write_cffm(
            dir.join(LABELS_DIR).join(&name),
            map.height,
            map.width,
            1,
            &ids,
        )?;
    }
    synth.queries.save(dir.join(QUERIES_FILE))
}

/// `.cffm` files of a directory in name order.
pub fn cffm_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "cffm") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_maps(dir: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    cffm_files(dir)?.iter().map(FeatureMap::load).collect()
}

/// Label maps stored as single-channel grids of label ids.
pub fn load_labels(dir: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    cffm_files(dir)?
        .iter()
        .map(|path| {
            let grid = read_cffm(path)?;
            if grid.dim != 1 {
                return Err(Error::Format(format!(
                    "{}: label maps need D=1, found {}",
                    path.display(),
                    grid.dim
                )));
            }
            grid.data
                .iter()
                .map(|&v| {
                    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as u32)
                    } else {
                        Err(Error::Format(format!(
                            "{}: invalid label id {v}",
                            path.display()
                        )))
                    }
                })
                .collect()
        })
        .collect()
}

/// A multi-view data set directory as written by [`save_dataset`]. Labels
/// and queries are optional.
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub maps: Vec<FeatureMap>,
    pub labels: Option<Vec<Vec<u32>>>,
    pub queries: Option<QuerySet>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cameras = load_cameras(dir.join(CAMERAS_FILE))?;
        let maps = load_maps(dir.join(FEATURES_DIR))?;
        if maps.len() != cameras.len() {
            return Err(Error::SizeMismatch(format!(
                "{} cameras but {} feature maps",
                cameras.len(),
                maps.len()
            )));
        }
        let labels = match dir.join(LABELS_DIR) {
            p if p.is_dir() => Some(load_labels(p)?),
            _ => None,
        };
        let queries = match dir.join(QUERIES_FILE) {
            p if p.is_file() => Some(QuerySet::load(p)?),
            _ => None,
        };
        Ok(Dataset {
            cameras,
            maps,
            labels,
            queries,
        })
    }
}

/// Loads a PLY scene, or dequantizes a `CFVQ` bundle.
pub fn load_any_scene(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let mut magic = [0u8; 4];
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let is_bundle = file.read_exact(&mut magic).is_ok() && &magic == CFVQ_MAGIC;
    if is_bundle {
        dequantize(&QuantizedScene::load(path)?)
    } else {
        load_scene(path)
    }
}
