//! Training-free feature lifting.
//!
//! Each Gaussian receives the blend-weighted mean of the 2D features of the
//! pixels it contributes to, across all views, together with the per-channel
//! weighted variance of those features. The weight total doubles as the
//! Gaussian's global contribution.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{render_weights, RenderConfig, WeightBuffer};
use crate::scene::{
    read_cffm, write_cffm, Camera, FeatureMap, Gaussian, GaussianScene, SceneMetadata, Stage,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Nearest feature-map pixel in normalized image coordinates.
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Clone, Debug, Default)]
pub struct LiftConfig {
    pub render: RenderConfig,
    pub sampling: Sampling,
}

/// Running weighted sums for every Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftAccumulator {
    pub dim: usize,
    pub sum: Vec<f64>,
    pub square_sum: Vec<f64>,
    pub total: Vec<f64>,
}

impl LiftAccumulator {
    pub fn new(n: usize, dim: usize) -> Self {
        LiftAccumulator {
            dim,
            sum: vec![0.0; n * dim],
            square_sum: vec![0.0; n * dim],
            total: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    /// Adds one view. Masked (zero) feature pixels contribute nothing.
    pub fn accumulate(&mut self, weights: &WeightBuffer, map: &FeatureMap, sampling: Sampling) {
        let dim = self.dim;
        let mut sample = vec![0.0f64; dim];
        for y in 0..weights.height {
            for x in 0..weights.width {
                let entries = weights.pixel(x, y);
                if entries.is_empty() {
                    continue;
                }
                if !sample_feature(
                    map,
                    x,
                    y,
                    weights.width,
                    weights.height,
                    sampling,
                    &mut sample,
                ) {
                    continue;
                }
                for e in entries {
                    let i = e.gaussian as usize;
                    let w = e.weight;
                    self.total[i] += w;
                    let sum = &mut self.sum[i * dim..(i + 1) * dim];
                    let sq = &mut self.square_sum[i * dim..(i + 1) * dim];
                    for d in 0..dim {
                        sum[d] += w * sample[d];
                        sq[d] += w * sample[d] * sample[d];
                    }
                }
            }
        }
    }

    pub fn merge(&mut self, other: &LiftAccumulator) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.square_sum.iter_mut().zip(&other.square_sum) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
    }
}

/// Looks up the feature under camera pixel `(x, y)`. Returns `false` for a
/// masked pixel.
fn sample_feature(
    map: &FeatureMap,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
    sampling: Sampling,
    out: &mut [f64],
) -> bool {
    let u = (x as f64 + 0.5) * map.width as f64 / width as f64;
    let v = (y as f64 + 0.5) * map.height as f64 / height as f64;
    match sampling {
        Sampling::Nearest => {
            let mx = (u.floor() as usize).min(map.width - 1);
            let my = (v.floor() as usize).min(map.height - 1);
            if map.is_masked(mx, my) {
                return false;
            }
            for (o, f) in out.iter_mut().zip(map.pixel(mx, my)) {
                *o = *f as f64;
            }
            true
        }
        Sampling::Bilinear => {
            let fu = (u - 0.5).clamp(0.0, (map.width - 1) as f64);
            let fv = (v - 0.5).clamp(0.0, (map.height - 1) as f64);
            let (x0, y0) = (fu.floor() as usize, fv.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(map.width - 1), (y0 + 1).min(map.height - 1));
            let (tx, ty) = (fu - x0 as f64, fv - y0 as f64);
            out.iter_mut().for_each(|o| *o = 0.0);
            let mut total = 0.0;
            for (px, py, w) in [
                (x0, y0, (1.0 - tx) * (1.0 - ty)),
                (x1, y0, tx * (1.0 - ty)),
                (x0, y1, (1.0 - tx) * ty),
                (x1, y1, tx * ty),
            ] {
                if w == 0.0 || map.is_masked(px, py) {
                    continue;
                }
                total += w;
                for (o, f) in out.iter_mut().zip(map.pixel(px, py)) {
                    *o += w * *f as f64;
                }
            }
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if total == 0.0 || norm == 0.0 {
                return false;
            }
            out.iter_mut().for_each(|o| *o /= norm);
            true
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LiftStatus {
    Observed,
    /// No captured weight in any view.
    Unobserved,
    /// Weighted mean is (numerically) zero and cannot be normalized.
    Degenerate,
    /// Removed by the variance filter.
    Filtered,
}

/// Lifted features, variances and contributions for every donor Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedField {
    pub dim: usize,
    /// Unit-normalized features, `N × D` (zero for non-observed Gaussians).
    pub features: Vec<f64>,
    /// Raw weighted means before normalization, `N × D`.
    pub means: Vec<f64>,
    /// Per-channel weighted variance, `N × D`, clamped at zero.
    pub variance: Vec<f64>,
    pub variance_norm: Vec<f64>,
    pub contributions: Vec<f64>,
    pub status: Vec<LiftStatus>,
}

impl LiftedField {
    pub fn from_accumulator(acc: &LiftAccumulator) -> Self {
        let (n, dim) = (acc.len(), acc.dim);
        let mut field = LiftedField {
            dim,
            features: vec![0.0; n * dim],
            means: vec![0.0; n * dim],
            variance: vec![0.0; n * dim],
            variance_norm: vec![0.0; n],
            contributions: acc.total.clone(),
            status: vec![LiftStatus::Unobserved; n],
        };
        for i in 0..n {
            let total = acc.total[i];
            if total <= 0.0 {
                continue;
            }
            let range = i * dim..(i + 1) * dim;
            let mut norm_sq = 0.0;
            let mut var_sq = 0.0;
            for d in range.clone() {
                let mean = acc.sum[d] / total;
                let var = (acc.square_sum[d] / total - mean * mean).max(0.0);
                field.means[d] = mean;
                field.variance[d] = var;
                norm_sq += mean * mean;
                var_sq += var * var;
            }
            field.variance_norm[i] = var_sq.sqrt();
            let norm = norm_sq.sqrt();
            if norm < 1e-9 {
                field.status[i] = LiftStatus::Degenerate;
                continue;
            }
            for d in range {
                field.features[d] = field.means[d] / norm;
            }
            field.status[i] = LiftStatus::Observed;
        }
        field
    }

    pub fn len(&self) -> usize {
        self.status.len()
    }

    pub fn is_empty(&self) -> bool {
        self.status.is_empty()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.status[i] == LiftStatus::Observed
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_kept(i)).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.status
            .iter()
            .filter(|s| **s == LiftStatus::Observed)
            .count()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Kept Gaussians of `donor` with their lifted features as payload.
    pub fn to_scene(&self, donor: &GaussianScene) -> Result<GaussianScene> {
        if donor.len() != self.len() {
            return Err(Error::SizeMismatch(format!(
                "field has {} gaussians, donor {}",
                self.len(),
                donor.len()
            )));
        }
        let gaussians: Vec<Gaussian> = self
            .kept_indices()
            .into_iter()
            .map(|i| Gaussian {
                payload: self.feature(i).to_vec(),
                ..donor.gaussians[i].clone()
            })
            .collect();
        if gaussians.is_empty() {
            return Err(Error::EmptyScene("no gaussian survived lifting".into()));
        }
        GaussianScene::new(
            gaussians,
            self.dim,
            SceneMetadata {
                source: donor.metadata.source.clone(),
                stage: Stage::Lifted,
            },
        )
    }
}

fn check_inputs(cameras: &[Camera], maps: &[FeatureMap]) -> Result<usize> {
    if cameras.len() != maps.len() {
        return Err(Error::SizeMismatch(format!(
            "{} cameras but {} feature maps",
            cameras.len(),
            maps.len()
        )));
    }
    let dim = maps
        .first()
        .map(|m| m.dim)
        .ok_or_else(|| Error::Config("no views to lift from".into()))?;
    for m in maps {
        if m.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: m.dim,
            });
        }
    }
    Ok(dim)
}

/// Lifts the feature maps onto the scene. One map per camera, in order.
pub fn lift(
    scene: &GaussianScene,
    cameras: &[Camera],
    maps: &[FeatureMap],
    cfg: &LiftConfig,
) -> Result<LiftedField> {
    let dim = check_inputs(cameras, maps)?;
    let n = scene.len();
    let per_view: Vec<LiftAccumulator> = cameras
        .par_iter()
        .zip(maps)
        .map(|(cam, map)| {
            let out = render_weights(&scene.gaussians, cam, &cfg.render)?;
            let mut acc = LiftAccumulator::new(n, dim);
            acc.accumulate(
                out.weights.as_ref().expect("weights captured"),
                map,
                cfg.sampling,
            );
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut total = LiftAccumulator::new(n, dim);
    for acc in &per_view {
        total.merge(acc);
    }
    let field = LiftedField::from_accumulator(&total);
    if field.kept_count() == 0 {
        log::warn!("no gaussian is observed by any view");
    }
    Ok(field)
}

/// Drops the `ceil(top_fraction · N_kept)` kept Gaussians with the largest
/// variance norm. Among equal norms the higher index goes first.
pub fn variance_filter(field: &LiftedField, top_fraction: f64) -> Result<LiftedField> {
    if !(0.0..1.0).contains(&top_fraction) {
        return Err(Error::Config(format!(
            "variance filter fraction {top_fraction} outside [0, 1)"
        )));
    }
    let mut kept = field.kept_indices();
    if kept.is_empty() {
        return Err(Error::EmptyScene(
            "variance filter needs at least one kept gaussian".into(),
        ));
    }
    let remove = (top_fraction * kept.len() as f64).ceil() as usize;
    kept.sort_by(|&a, &b| {
        field.variance_norm[b]
            .total_cmp(&field.variance_norm[a])
            .then(b.cmp(&a))
    });
    let mut out = field.clone();
    for &i in &kept[..remove] {
        out.status[i] = LiftStatus::Filtered;
    }
    Ok(out)
}

/// Global contribution `C(g)`: every Gaussian's captured blend weight summed
/// over all views.
pub fn contributions(
    gaussians: &[Gaussian],
    cameras: &[Camera],
    cfg: &RenderConfig,
) -> Result<Vec<f64>> {
    let per_view: Vec<Vec<f64>> = cameras
        .par_iter()
        .map(|cam| {
            let out = render_weights(gaussians, cam, cfg)?;
            Ok(out
                .weights
                .expect("weights captured")
                .weight_sums(gaussians.len()))
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; gaussians.len()];
    for sums in per_view {
        for (t, s) in total.iter_mut().zip(sums) {
            *t += s;
        }
    }
    Ok(total)
}

/// Writes variance norms and contributions of the kept Gaussians, aligned
/// with the lifted scene, as a `CFFM` grid of height 2 and depth 1.
pub fn save_sidecar(field: &LiftedField, path: impl AsRef<Path>) -> Result<()> {
    let kept = field.kept_indices();
    let mut data: Vec<f32> = kept
        .iter()
        .map(|&i| field.variance_norm[i] as f32)
        .collect();
    data.extend(kept.iter().map(|&i| field.contributions[i] as f32));
    write_cffm(path, 2, kept.len(), 1, &data)
}

/// Reads `(variance_norms, contributions)` written by [`save_sidecar`].
pub fn load_sidecar(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = read_cffm(path)?;
    if grid.height != 2 || grid.dim != 1 {
        return Err(Error::Format(format!(
            "sidecar must be 2xNx1, found {}x{}x{}",
            grid.height, grid.width, grid.dim
        )));
    }
    let (var, contrib) = grid.data.split_at(grid.width);
    Ok((
        var.iter().map(|&v| v as f64).collect(),
        contrib.iter().map(|&v| v as f64).collect(),
    ))
}
