//! Gaussian scenes, cameras and dense feature maps.
//!
//! Geometry is held in `f64` for the numerical stages; every on-disk format
//! stores `f32`, so a value read from disk survives a save/load cycle
//! unchanged.

mod camera;
mod feature_map;
mod ply;

pub use camera::{load_cameras, save_cameras, Camera};
pub use feature_map::{read_cffm, write_cffm, FeatureMap, RawGrid, CFFM_MAGIC, CFFM_VERSION};
pub use ply::{load_scene, save_scene};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// One anisotropic 3D Gaussian.
///
/// Scales are stored as logarithms and opacity as a logit, following the
/// usual splatting checkpoint layout. The rotation is a quaternion in
/// `(w, x, y, z)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub payload: Vec<f64>,
}

impl Gaussian {
    /// Activated opacity in `(0, 1)`.
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quaternion_to_matrix(self.rotation)
    }

    /// `Σ = R · diag(s²) · Rᵀ`, symmetrised so `Σ == Σᵀ` holds bit-for-bit.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = self.scale();
        let m = r * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
        let sigma = m * m.transpose();
        (sigma + sigma.transpose()) * 0.5
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = normalize_quaternion(self.rotation);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`], with the argument clamped away from 0 and 1.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

pub fn normalize_quaternion(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        q.map(|v| v / n)
    } else {
        [1.0, 0.0, 0.0, 0.0]
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = normalize_quaternion(q);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion `(w, x, y, z)` of a proper rotation matrix.
pub fn matrix_to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let mut out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        out = out.map(|v| -v);
    }
    out
}

/// Where a scene sits in the pipeline. Recorded in the PLY header comments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stage {
    /// Pre-trained color scene.
    #[default]
    Donor,
    /// Carries D-dimensional lifted features.
    Lifted,
    /// Carries 3-dimensional encoded latents.
    Latent,
    /// Latent scene after prune/merge.
    Sparse,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Donor => "donor",
            Stage::Lifted => "lifted",
            Stage::Latent => "latent",
            Stage::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "donor" => Stage::Donor,
            "lifted" => Stage::Lifted,
            "latent" => Stage::Latent,
            "sparse" => Stage::Sparse,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneMetadata {
    pub source: String,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub payload_dim: usize,
    pub metadata: SceneMetadata,
}

impl GaussianScene {
    pub fn new(
        gaussians: Vec<Gaussian>,
        payload_dim: usize,
        metadata: SceneMetadata,
    ) -> Result<Self> {
        let scene = GaussianScene {
            gaussians,
            payload_dim,
            metadata,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.is_empty() {
            return Err(Error::EmptyScene("scene has no gaussians".into()));
        }
        if self.payload_dim == 0 {
            return Err(Error::Format("payload_dim must be positive".into()));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.payload.len() != self.payload_dim {
                return Err(Error::Format(format!(
                    "gaussian {i}: payload length {} != payload_dim {}",
                    g.payload.len(),
                    self.payload_dim
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Axis-aligned bounds of the Gaussian centers.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for g in &self.gaussians {
            for k in 0..3 {
                lo[k] = lo[k].min(g.mean[k]);
                hi[k] = hi[k].max(g.mean[k]);
            }
        }
        (lo, hi)
    }

    /// Diagonal length of the center bounding box.
    pub fn extent(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Copy of the scene with every payload replaced.
    pub fn with_payloads(&self, payloads: Vec<Vec<f64>>, dim: usize, stage: Stage) -> Result<Self> {
        if payloads.len() != self.len() {
            return Err(Error::SizeMismatch(format!(
                "{} payloads for {} gaussians",
                payloads.len(),
                self.len()
            )));
        }
        let gaussians = self
            .gaussians
            .iter()
            .zip(payloads)
            .map(|(g, payload)| Gaussian {
                payload,
                ..g.clone()
            })
            .collect();
        GaussianScene::new(
            gaussians,
            dim,
            SceneMetadata {
                source: self.metadata.source.clone(),
                stage,
            },
        )
    }
}
