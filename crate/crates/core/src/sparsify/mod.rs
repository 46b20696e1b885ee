//! Adaptive sparsification of a latent scene.
//!
//! The latent scene is optimized against references rendered once from its
//! frozen initial state, while Gaussians with a small global contribution are
//! pruned on a schedule and redundant neighbours are merged every few
//! iterations.

mod merge;

pub use merge::{
    cosine, factorize, mahalanobis, merge_pass, moment_match, MergeGate, MergeOutcome, Merged,
    Origin, MIN_EIGENVALUE,
};

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{Autoencoder, LATENT_DIM};
use crate::error::{Error, Result};
use crate::lifting::contributions;
use crate::raster::{
    gather_payloads, gaussian_gradients, project_scene, rasterize, render_backward, GaussianGrad,
    RenderConfig,
};
use crate::scene::{Camera, Gaussian, GaussianScene, SceneMetadata, Stage};

/// Adam step sizes per attribute group.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub latent: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            latent: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        LearningRates {
            position: 0.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            latent: 0.0,
        }
    }
}

/// Space in which merge candidates are compared by cosine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Latent,
    Decoded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsifyConfig {
    pub max_iterations: usize,
    pub merge_interval: usize,
    pub merge: bool,
    /// Iterations after which low-contribution Gaussians are pruned.
    pub prune_at: Vec<usize>,
    pub contribution_threshold: f64,
    pub similarity_threshold: f64,
    pub gradient_threshold: f64,
    pub mahalanobis_threshold: f64,
    pub k_neighbors: usize,
    pub depth_weight: f64,
    /// Momentum of the running 2D positional gradient norm.
    pub gradient_momentum: f64,
    pub learning_rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub similarity: Similarity,
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        SparsifyConfig {
            max_iterations: 3000,
            merge_interval: 50,
            merge: true,
            prune_at: vec![500, 1500],
            contribution_threshold: 0.25,
            similarity_threshold: 0.999,
            gradient_threshold: 1e-5,
            mahalanobis_threshold: 2.38,
            k_neighbors: 8,
            depth_weight: 0.1,
            gradient_momentum: 0.9,
            learning_rates: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            similarity: Similarity::Latent,
            render: RenderConfig::default(),
            seed: 0,
        }
    }
}

impl SparsifyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("contribution_threshold", self.contribution_threshold),
            ("similarity_threshold", self.similarity_threshold),
            ("gradient_threshold", self.gradient_threshold),
            ("mahalanobis_threshold", self.mahalanobis_threshold),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.merge_interval == 0 {
            return Err(Error::Config("merge_interval must be at least 1".into()));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if !(self.depth_weight >= 0.0) {
            return Err(Error::Config("depth_weight must be non-negative".into()));
        }
        for (name, b) in [
            ("gradient_momentum", self.gradient_momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        let lr = &self.learning_rates;
        if [
            lr.position,
            lr.log_scale,
            lr.rotation,
            lr.opacity,
            lr.latent,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn gate(&self) -> MergeGate {
        MergeGate {
            similarity: self.similarity_threshold,
            mahalanobis: self.mahalanobis_threshold,
            gradient: self.gradient_threshold,
            neighbors: self.k_neighbors,
        }
    }
}

/// Replaces every lifted feature by its latent code.
pub fn encode_scene(lifted: &GaussianScene, model: &Autoencoder<f32>) -> Result<GaussianScene> {
    let n = lifted.len();
    let dim = lifted.payload_dim;
    let mut rows = Array2::<f32>::zeros((n, dim));
    for (i, g) in lifted.gaussians.iter().enumerate() {
        for (d, v) in g.payload.iter().enumerate() {
            rows[[i, d]] = *v as f32;
        }
    }
    let latents = model.encode_batch(rows.view())?;
    let payloads = latents
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| *v as f64).collect())
        .collect();
    lifted.with_payloads(payloads, LATENT_DIM, Stage::Latent)
}

/// Decodes an `N × 3` block of latents.
fn decode_rows(decoder: &Autoencoder<f64>, latents: &[f64]) -> Result<Array2<f64>> {
    let view = ArrayView2::from_shape((latents.len() / LATENT_DIM, LATENT_DIM), latents)
        .map_err(|e| Error::SizeMismatch(e.to_string()))?;
    decoder.decode_batch(view)
}

/// Frozen render of one training view.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub width: usize,
    pub height: usize,
    /// `H·W·3` latent image.
    pub latent: Vec<f64>,
    pub depth: Vec<f64>,
    /// `H·W·D` decoded latent image, present when a decoder was supplied.
    pub decoded: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    pub views: Vec<Reference>,
}

/// Renders the references of every camera from the frozen latent scene.
pub fn build_references(
    latent: &GaussianScene,
    cameras: &[Camera],
    decoder: Option<&Autoencoder<f64>>,
    cfg: &RenderConfig,
) -> Result<ReferenceSet> {
    check_latent(latent)?;
    let views = cameras
        .iter()
        .map(|cam| {
            let splats = project_scene(&latent.gaussians, cam, cfg)?;
            let payloads = gather_payloads(latent, &splats);
            let (w, h) = (cam.width as usize, cam.height as usize);
            let out = rasterize(&splats, &payloads, LATENT_DIM, w, h, cfg);
            let decoded = match decoder {
                Some(dec) => Some(decode_rows(dec, &out.image)?.into_raw_vec_and_offset().0),
                None => None,
            };
            Ok(Reference {
                width: w,
                height: h,
                latent: out.image,
                depth: out.depth,
                decoded,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReferenceSet { views })
}

/// Replaces the decoded target of every reference by a render of the frozen
/// lifted feature scene, so the decoded latent render is fit to the lifted
/// features themselves.
pub fn lifted_targets(
    refs: &mut ReferenceSet,
    lifted: &GaussianScene,
    cameras: &[Camera],
    cfg: &RenderConfig,
) -> Result<()> {
    if cameras.len() != refs.views.len() {
        return Err(Error::SizeMismatch(format!(
            "{} cameras but {} references",
            cameras.len(),
            refs.views.len()
        )));
    }
    for (reference, cam) in refs.views.iter_mut().zip(cameras) {
        let (w, h) = (cam.width as usize, cam.height as usize);
        if (w, h) != (reference.width, reference.height) {
            return Err(Error::SizeMismatch(format!(
                "camera {} is {w}x{h}, reference {}x{}",
                cam.id, reference.width, reference.height
            )));
        }
        let splats = project_scene(&lifted.gaussians, cam, cfg)?;
        let payloads = gather_payloads(lifted, &splats);
        reference.decoded =
            Some(rasterize(&splats, &payloads, lifted.payload_dim, w, h, cfg).image);
    }
    Ok(())
}

fn check_latent(scene: &GaussianScene) -> Result<()> {
    if scene.payload_dim != LATENT_DIM {
        return Err(Error::DimensionMismatch {
            expected: LATENT_DIM,
            got: scene.payload_dim,
        });
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Losses and per-Gaussian gradients of one view.
#[derive(Clone, Debug)]
pub struct ViewLoss {
    /// Mean absolute feature difference over pixels and channels.
    pub feature: f64,
    /// Mean absolute depth difference over pixels.
    pub depth: f64,
    pub total: f64,
    pub grads: Vec<GaussianGrad>,
}

/// Feature and depth L1 losses of `scene` against `reference`, with their
/// gradients. The feature loss is taken on decoded features when the
/// reference carries them, otherwise on latents.
pub fn view_loss(
    scene: &GaussianScene,
    cam: &Camera,
    reference: &Reference,
    decoder: Option<&Autoencoder<f64>>,
    depth_weight: f64,
    cfg: &RenderConfig,
) -> Result<ViewLoss> {
    check_latent(scene)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    if (w, h) != (reference.width, reference.height) {
        return Err(Error::SizeMismatch(format!(
            "camera {} is {w}x{h}, reference {}x{}",
            cam.id, reference.width, reference.height
        )));
    }
    let splats = project_scene(&scene.gaussians, cam, cfg)?;
    let payloads = gather_payloads(scene, &splats);
    let out = rasterize(&splats, &payloads, LATENT_DIM, w, h, cfg);

    let (feature, grad_image) = match &reference.decoded {
        Some(target) => {
            let dec =
                decoder.ok_or_else(|| Error::Config("decoded references need a decoder".into()))?;
            if target.len() != w * h * dec.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: w * h * dec.input_dim(),
                    got: target.len(),
                });
            }
            let inv = 1.0 / target.len() as f64;
            let mut loss = 0.0;
            let view = ArrayView2::from_shape((w * h, LATENT_DIM), &out.image[..])
                .map_err(|e| Error::SizeMismatch(e.to_string()))?;
            let (_, grad) = dec.decode_with_vjp(view, |decoded| {
                let mut g = decoded.clone();
                for (gv, t) in g.iter_mut().zip(target) {
                    let d = *gv - t;
                    loss += d.abs();
                    *gv = sign(d) * inv;
                }
                g
            })?;
            (loss * inv, grad.into_raw_vec_and_offset().0)
        }
        None => {
            let inv = 1.0 / reference.latent.len() as f64;
            let mut loss = 0.0;
            let grad = out
                .image
                .iter()
                .zip(&reference.latent)
                .map(|(a, b)| {
                    loss += (a - b).abs();
                    sign(a - b) * inv
                })
                .collect();
            (loss * inv, grad)
        }
    };
    let inv = 1.0 / reference.depth.len() as f64;
    let mut depth = 0.0;
    let grad_depth: Vec<f64> = out
        .depth
        .iter()
        .zip(&reference.depth)
        .map(|(a, b)| {
            depth += (a - b).abs();
            depth_weight * sign(a - b) * inv
        })
        .collect();
    depth *= inv;

    let splat_grads = render_backward(
        &splats,
        &payloads,
        LATENT_DIM,
        w,
        h,
        cfg,
        &grad_image,
        &grad_depth,
    );
    let grads = gaussian_gradients(&scene.gaussians, &splats, &splat_grads, cam, cfg);
    Ok(ViewLoss {
        feature,
        depth,
        total: feature + depth_weight * depth,
        grads,
    })
}

/// Removes Gaussians whose global contribution over `cameras` is below
/// `threshold`. Returns the survivors and a keep mask over the input.
pub fn prune(
    gaussians: &[Gaussian],
    cameras: &[Camera],
    threshold: f64,
    cfg: &RenderConfig,
) -> Result<(Vec<Gaussian>, Vec<bool>)> {
    let contrib = contributions(gaussians, cameras, cfg)?;
    let keep: Vec<bool> = contrib.iter().map(|c| *c >= threshold).collect();
    let survivors: Vec<Gaussian> = gaussians
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(g, _)| g.clone())
        .collect();
    if survivors.is_empty() {
        let max = contrib.iter().cloned().fold(0.0, f64::max);
        return Err(Error::Numerical(format!(
            "pruning would remove all {} gaussians (largest contribution {max:.4e}, threshold {threshold})",
            gaussians.len()
        )));
    }
    Ok((survivors, keep))
}

const SLOTS: usize = 14; // mean 3, log_scale 3, rotation 4, opacity 1, latent 3

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<[f64; SLOTS]>,
    v: Vec<[f64; SLOTS]>,
    /// Running average of the 2D positional gradient norm.
    grad_avg: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![[0.0; SLOTS]; n],
            v: vec![[0.0; SLOTS]; n],
            grad_avg: vec![0.0; n],
        }
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.m.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.v.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.grad_avg.retain(|_| *it.next().unwrap());
    }

    fn remap(&mut self, origin: &[Origin]) {
        let mut next = Moments::new(origin.len());
        for (k, o) in origin.iter().enumerate() {
            match *o {
                Origin::Kept(i) => {
                    next.m[k] = self.m[i];
                    next.v[k] = self.v[i];
                    next.grad_avg[k] = self.grad_avg[i];
                }
                Origin::Merged(i, j) => next.grad_avg[k] = self.grad_avg[i].max(self.grad_avg[j]),
            }
        }
        *self = next;
    }
}

fn flatten(g: &GaussianGrad) -> [f64; SLOTS] {
    let mut out = [0.0; SLOTS];
    out[0..3].copy_from_slice(&g.mean);
    out[3..6].copy_from_slice(&g.log_scale);
    out[6..10].copy_from_slice(&g.rotation);
    out[10] = g.opacity_logit;
    out[11..14].copy_from_slice(&g.payload);
    out
}

fn slot_rates(lr: &LearningRates, extent: f64) -> [f64; SLOTS] {
    let mut out = [0.0; SLOTS];
    out[0..3].fill(lr.position * extent);
    out[3..6].fill(lr.log_scale);
    out[6..10].fill(lr.rotation);
    out[10] = lr.opacity;
    out[11..14].fill(lr.latent);
    out
}

fn apply_adam(
    gaussians: &mut [Gaussian],
    grads: &[GaussianGrad],
    moments: &mut Moments,
    step: i32,
    rates: &[f64; SLOTS],
    cfg: &SparsifyConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(step);
    let c2 = 1.0 - cfg.beta2.powi(step);
    for (i, (g, grad)) in gaussians.iter_mut().zip(grads).enumerate() {
        let flat = flatten(grad);
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        let mut delta = [0.0; SLOTS];
        for k in 0..SLOTS {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * flat[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * flat[k] * flat[k];
            if m[k] != 0.0 {
                delta[k] = rates[k] * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.epsilon);
            }
        }
        if delta.iter().all(|d| *d == 0.0) {
            continue;
        }
        for k in 0..3 {
            g.mean[k] -= delta[k];
            g.log_scale[k] -= delta[3 + k];
            g.payload[k] -= delta[11 + k];
        }
        for k in 0..4 {
            g.rotation[k] -= delta[6 + k];
        }
        g.opacity_logit -= delta[10];
        g.normalize_rotation();
    }
}

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub feature_loss: f64,
    pub depth_loss: f64,
    pub gaussian_count: usize,
    pub merged: usize,
    pub pruned: usize,
}

#[derive(Debug)]
pub struct SparsifyOutcome {
    pub scene: GaussianScene,
    pub log: Vec<IterationRecord>,
    pub wall_time: Duration,
    /// Set when the loop stopped early; `scene` is the last good state.
    pub stopped: Option<Error>,
}

/// Runs the sparsification loop on `latent`, the encoded lifted scene from
/// which `refs` were rendered.
pub fn run(
    latent: &GaussianScene,
    cameras: &[Camera],
    refs: &ReferenceSet,
    decoder: Option<&Autoencoder<f64>>,
    cfg: &SparsifyConfig,
) -> Result<SparsifyOutcome> {
    cfg.validate()?;
    check_latent(latent)?;
    if cameras.len() != refs.views.len() {
        return Err(Error::SizeMismatch(format!(
            "{} cameras but {} references",
            cameras.len(),
            refs.views.len()
        )));
    }
    if cameras.is_empty() {
        return Err(Error::Config(
            "sparsification needs at least one view".into(),
        ));
    }
    let start = Instant::now();
    let rates = slot_rates(&cfg.learning_rates, latent.extent());
    let mut gaussians = latent.gaussians.clone();
    let mut moments = Moments::new(gaussians.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.max_iterations);
    let mut stopped = None;
    let mut adam_step = 0;
    let metadata = SceneMetadata {
        source: latent.metadata.source.clone(),
        stage: Stage::Sparse,
    };

    for iteration in 1..=cfg.max_iterations {
        if order.is_empty() {
            order = (0..cameras.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view = order.pop().unwrap();
        let scene = GaussianScene {
            gaussians,
            payload_dim: LATENT_DIM,
            metadata: metadata.clone(),
        };
        let result = view_loss(
            &scene,
            &cameras[view],
            &refs.views[view],
            decoder,
            cfg.depth_weight,
            &cfg.render,
        );
        gaussians = scene.gaussians;
        let loss = match result {
            Ok(l) => l,
            Err(e) => {
                stopped = Some(e);
                break;
            }
        };
        let finite = loss.total.is_finite()
            && loss
                .grads
                .iter()
                .all(|g| flatten(g).iter().all(|v| v.is_finite()));
        if finite {
            for (avg, g) in moments.grad_avg.iter_mut().zip(&loss.grads) {
                if g.visible {
                    *avg = cfg.gradient_momentum * *avg
                        + (1.0 - cfg.gradient_momentum) * g.center2d_norm;
                }
            }
            adam_step += 1;
            apply_adam(
                &mut gaussians,
                &loss.grads,
                &mut moments,
                adam_step,
                &rates,
                cfg,
            );
        } else {
            log::warn!("iteration {iteration}: non-finite loss or gradient, update skipped");
        }

        let mut record = IterationRecord {
            iteration,
            feature_loss: loss.feature,
            depth_loss: loss.depth,
            gaussian_count: 0,
            merged: 0,
            pruned: 0,
        };
        if cfg.prune_at.contains(&iteration) {
            match prune(&gaussians, cameras, cfg.contribution_threshold, &cfg.render) {
                Ok((survivors, keep)) => {
                    record.pruned = gaussians.len() - survivors.len();
                    moments.retain(&keep);
                    gaussians = survivors;
                }
                Err(e) => {
                    stopped = Some(e);
                    record.gaussian_count = gaussians.len();
                    log.push(record);
                    break;
                }
            }
        }
        if cfg.merge && iteration % cfg.merge_interval == 0 {
            let features = similarity_features(&gaussians, decoder, cfg.similarity)?;
            let out = merge_pass(&gaussians, &moments.grad_avg, &features, &cfg.gate());
            record.merged = out.merged;
            moments.remap(&out.origin);
            gaussians = out.gaussians;
        }
        record.gaussian_count = gaussians.len();
        log::debug!(
            "iteration {iteration}: L_f {:.5} L_depth {:.5} N {} merged {} pruned {}",
            record.feature_loss,
            record.depth_loss,
            record.gaussian_count,
            record.merged,
            record.pruned
        );
        log.push(record);
    }

    if let Some(e) = &stopped {
        log::error!("sparsification stopped early: {e}");
    }
    Ok(SparsifyOutcome {
        scene: GaussianScene::new(gaussians, LATENT_DIM, metadata)?,
        log,
        wall_time: start.elapsed(),
        stopped,
    })
}

fn similarity_features(
    gaussians: &[Gaussian],
    decoder: Option<&Autoencoder<f64>>,
    mode: Similarity,
) -> Result<Vec<Vec<f64>>> {
    match (mode, decoder) {
        (Similarity::Latent, _) => Ok(gaussians.iter().map(|g| g.payload.clone()).collect()),
        (Similarity::Decoded, Some(dec)) => {
            let flat: Vec<f64> = gaussians
                .iter()
                .flat_map(|g| g.payload.iter().copied())
                .collect();
            let decoded = decode_rows(dec, &flat)?;
            Ok(decoded.rows().into_iter().map(|r| r.to_vec()).collect())
        }
        (Similarity::Decoded, None) => {
            Err(Error::Config("decoded similarity needs a decoder".into()))
        }
    }
}

/// Writes the progress log as CSV.
pub fn write_progress_csv(log: &[IterationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,feature_loss,depth_loss,gaussian_count,merged,pruned\n");
    for r in log {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{},{},{}\n",
            r.iteration, r.feature_loss, r.depth_loss, r.gaussian_count, r.merged, r.pruned
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
