//! Synthetic labelled rooms with known ground truth.
//!
//! Surfaces are tiled with flat, opaque Gaussians on a regular grid. Each
//! surface carries a semantic label with its own unit feature. Feature maps
//! and label maps are produced by rendering one-hot label payloads with the
//! crate's rasterizer and taking the dominant label per pixel.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{QuerySet, BACKGROUND};
use crate::error::{Error, Result};
use crate::raster::{render_values, RenderConfig};
use crate::scene::{
    logit, matrix_to_quaternion, Camera, FeatureMap, Gaussian, GaussianScene, SceneMetadata, Stage,
};

/// Floor and four walls of an axis-aligned room centered on the y axis,
/// with the floor at `y = 0` and y pointing up.
#[derive(Clone, Debug, PartialEq)]
pub struct Room {
    pub half_width: f64,
    pub height: f64,
    pub half_depth: f64,
}

/// A box resting on the floor. Its bottom face is not tiled.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSpec {
    pub center: [f64; 2],
    pub half_size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub room: Option<Room>,
    pub boxes: Vec<BoxSpec>,
    /// Grid spacing of the Gaussians on every surface.
    pub spacing: f64,
    /// In-plane standard deviation as a multiple of the spacing.
    pub footprint: f64,
    /// Standard deviation along the surface normal, as a multiple of the spacing.
    pub thickness: f64,
    pub opacity: f64,
    pub feature_dim: usize,
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub fov_x: f64,
    pub orbit_radius: f64,
    pub eye_height: f64,
    pub target_height: f64,
    /// Cameras look at the point `-ratio · eye` across the orbit center.
    pub target_ratio: f64,
    /// Per-component standard deviation of the noise added to map features.
    pub jitter: f64,
    /// Fraction of Gaussians duplicated with identical attributes.
    pub clone_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            room: Some(Room {
                half_width: 2.0,
                height: 2.5,
                half_depth: 2.0,
            }),
            boxes: vec![
                BoxSpec {
                    center: [1.0, -1.0],
                    half_size: [0.4, 0.35, 0.4],
                },
                BoxSpec {
                    center: [-1.0, 0.9],
                    half_size: [0.35, 0.5, 0.35],
                },
            ],
            spacing: 0.16,
            footprint: 0.8,
            thickness: 0.08,
            opacity: 0.95,
            feature_dim: 16,
            views: 12,
            width: 64,
            height: 64,
            fov_x: 1.4,
            orbit_radius: 1.4,
            eye_height: 1.6,
            target_height: 0.5,
            target_ratio: 0.3,
            jitter: 0.0,
            clone_fraction: 0.0,
        }
    }
}

impl SynthSpec {
    /// Label names in label order: floor and wall when the room is present,
    /// then one per box.
    pub fn label_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.room.is_some() {
            names.push("floor".to_string());
            names.push("wall".to_string());
        }
        names.extend((0..self.boxes.len()).map(|k| format!("box_{k}")));
        names
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("degenerate synthetic layout: {m}")));
        if self.room.is_none() && self.boxes.is_empty() {
            return bad("no surfaces");
        }
        if !(self.spacing > 0.0 && self.footprint > 0.0 && self.thickness > 0.0) {
            return bad("spacing, footprint and thickness must be positive");
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return bad("opacity must lie in (0, 1)");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2");
        }
        if self.views == 0 || self.width == 0 || self.height == 0 {
            return bad("need at least one non-empty view");
        }
        if !(self.jitter >= 0.0) || !(0.0..=1.0).contains(&self.clone_fraction) {
            return bad("jitter must be non-negative and clone_fraction in [0, 1]");
        }
        if let Some(r) = &self.room {
            if !(r.half_width > 0.0 && r.height > 0.0 && r.half_depth > 0.0) {
                return bad("room dimensions must be positive");
            }
        }
        if self
            .boxes
            .iter()
            .any(|b| b.half_size.iter().any(|h| !(*h > 0.0)))
        {
            return bad("box sizes must be positive");
        }
        Ok(())
    }
}

/// Everything generated for one synthetic scene.
#[derive(Clone, Debug)]
pub struct SynthScene {
    /// Donor scene with a grey-level color payload per label.
    pub scene: GaussianScene,
    pub cameras: Vec<Camera>,
    pub maps: Vec<FeatureMap>,
    /// Per view, `H·W` label ids; 0 is background.
    pub labels: Vec<Vec<u32>>,
    pub queries: QuerySet,
    /// Label id of every Gaussian.
    pub gaussian_labels: Vec<u32>,
}

/// Unit features with pairwise cosine below 0.9.
fn label_features(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.iter().map(|x| x / n).collect();
        if out
            .iter()
            .all(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < 0.9)
        {
            out.push(v);
        }
    }
    out
}

/// A rectangle `origin + s·u + t·v` for `s ∈ [0, su]`, `t ∈ [0, sv]`,
/// with `u`, `v` unit and orthogonal.
struct Patch {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    su: f64,
    sv: f64,
    label: u32,
}

fn grid(extent: f64, spacing: f64) -> Vec<f64> {
    let n = (extent / spacing).round().max(1.0) as usize;
    let step = extent / n as f64;
    (0..n).map(|k| (k as f64 + 0.5) * step).collect()
}

fn tile(
    patch: &Patch,
    spec: &SynthSpec,
    skip: impl Fn(&Vector3<f64>) -> bool,
    out: &mut Vec<(Gaussian, u32)>,
) {
    let normal = patch.u.cross(&patch.v);
    let rot = Matrix3::from_columns(&[patch.u, patch.v, normal]);
    let rotation = matrix_to_quaternion(&rot);
    let in_plane = (spec.footprint * spec.spacing).ln();
    let across = (spec.thickness * spec.spacing).ln();
    for s in grid(patch.su, spec.spacing) {
        for t in grid(patch.sv, spec.spacing) {
            let p = patch.origin + patch.u * s + patch.v * t;
            if skip(&p) {
                continue;
            }
            out.push((
                Gaussian {
                    mean: p.into(),
                    log_scale: [in_plane, in_plane, across],
                    rotation,
                    opacity_logit: logit(spec.opacity),
                    payload: Vec::new(),
                },
                patch.label,
            ));
        }
    }
}

fn patches(spec: &SynthSpec) -> Vec<Patch> {
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    let mut out = Vec::new();
    let mut next_label = 1;
    if let Some(r) = &spec.room {
        let (w, h, d) = (r.half_width, r.height, r.half_depth);
        out.push(Patch {
            origin: Vector3::new(-w, 0.0, -d),
            u: x,
            v: z,
            su: 2.0 * w,
            sv: 2.0 * d,
            label: 1,
        });
        for (origin, u, su) in [
            (Vector3::new(-w, 0.0, -d), x, 2.0 * w),
            (Vector3::new(w, 0.0, d), -x, 2.0 * w),
            (Vector3::new(w, 0.0, -d), z, 2.0 * d),
            (Vector3::new(-w, 0.0, d), -z, 2.0 * d),
        ] {
            out.push(Patch {
                origin,
                u,
                v: y,
                su,
                sv: h,
                label: 2,
            });
        }
        next_label = 3;
    }
    for (k, b) in spec.boxes.iter().enumerate() {
        let label = next_label + k as u32;
        let [hx, hy, hz] = b.half_size;
        let c = Vector3::new(b.center[0], 0.0, b.center[1]);
        let lo = c - Vector3::new(hx, 0.0, hz);
        out.push(Patch {
            origin: lo + y * (2.0 * hy),
            u: x,
            v: z,
            su: 2.0 * hx,
            sv: 2.0 * hz,
            label,
        });
        for (origin, u, su) in [
            (lo, x, 2.0 * hx),
            (lo + Vector3::new(2.0 * hx, 0.0, 2.0 * hz), -x, 2.0 * hx),
            (lo + x * (2.0 * hx), z, 2.0 * hz),
            (lo + z * (2.0 * hz), -z, 2.0 * hz),
        ] {
            out.push(Patch {
                origin,
                u,
                v: y,
                su,
                sv: 2.0 * hy,
                label,
            });
        }
    }
    out
}

fn cameras(spec: &SynthSpec) -> Vec<Camera> {
    (0..spec.views)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / spec.views as f64;
            let (s, c) = a.sin_cos();
            let r = spec.orbit_radius;
            let eye = [r * c, spec.eye_height, r * s];
            let target = [
                -spec.target_ratio * r * c,
                spec.target_height,
                -spec.target_ratio * r * s,
            ];
            Camera::look_at(
                format!("view_{k:03}"),
                eye,
                target,
                [0.0, 1.0, 0.0],
                spec.width,
                spec.height,
                spec.fov_x,
            )
        })
        .collect()
}

/// Builds the scene, cameras, feature maps and ground truth for `spec`.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthScene> {
    spec.validate()?;
    let names = spec.label_names();
    let label_count = names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = label_features(label_count, spec.feature_dim, &mut rng);

    let mut tiled = Vec::new();
    let boxes = spec.boxes.clone();
    let under_box = move |p: &Vector3<f64>| {
        p.y.abs() < 1e-12
            && boxes.iter().any(|b| {
                (p.x - b.center[0]).abs() < b.half_size[0]
                    && (p.z - b.center[1]).abs() < b.half_size[2]
            })
    };
    for patch in patches(spec) {
        if patch.label == 1 && spec.room.is_some() {
            tile(&patch, spec, &under_box, &mut tiled);
        } else {
            tile(&patch, spec, |_| false, &mut tiled);
        }
    }
    if tiled.is_empty() {
        return Err(Error::Config(
            "degenerate synthetic layout: no gaussians".into(),
        ));
    }
    let clones = (spec.clone_fraction * tiled.len() as f64).round() as usize;
    if clones > 0 {
        let mut picked = sample(&mut rng, tiled.len(), clones).into_vec();
        picked.sort_unstable();
        for i in picked {
            tiled.push(tiled[i].clone());
        }
    }

    let gaussian_labels: Vec<u32> = tiled.iter().map(|(_, l)| *l).collect();
    let gaussians: Vec<Gaussian> = tiled
        .into_iter()
        .map(|(mut g, l)| {
            let grey = l as f64 / (label_count + 1) as f64;
            g.payload = vec![grey; 3];
            g
        })
        .collect();
    let scene = GaussianScene::new(
        gaussians,
        3,
        SceneMetadata {
            source: format!("synthetic seed {seed}"),
            stage: Stage::Donor,
        },
    )?;

    let cams = cameras(spec);
    let one_hot: Vec<f64> = gaussian_labels
        .iter()
        .flat_map(|&l| (1..=label_count as u32).map(move |k| f64::from(u8::from(k == l))))
        .collect();
    let cfg = RenderConfig::default();
    let per_view: Vec<(FeatureMap, Vec<u32>)> = cams
        .par_iter()
        .enumerate()
        .map(|(v, cam)| {
            let out = render_values(&scene.gaussians, &one_hot, label_count, cam, &cfg)?;
            let mut noise = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + v as u64));
            let pixels = out.width * out.height;
            let mut labels = vec![BACKGROUND; pixels];
            let mut data = vec![0f32; pixels * spec.feature_dim];
            for p in 0..pixels {
                let w = &out.image[p * label_count..(p + 1) * label_count];
                let coverage: f64 = w.iter().sum();
                if coverage < 0.5 {
                    continue;
                }
                let mut best = 0;
                for k in 1..label_count {
                    if w[k] > w[best] {
                        best = k;
                    }
                }
                labels[p] = best as u32 + 1;
                for (d, f) in features[best].iter().enumerate() {
                    let n: f64 = StandardNormal.sample(&mut noise);
                    data[p * spec.feature_dim + d] = (f + spec.jitter * n) as f32;
                }
            }
            let map = FeatureMap::from_pixels(out.height, out.width, spec.feature_dim, data)?;
            Ok((map, labels))
        })
        .collect::<Result<_>>()?;
    let (maps, labels) = per_view.into_iter().unzip();

    Ok(SynthScene {
        scene,
        cameras: cams,
        maps,
        labels,
        queries: QuerySet::new(names, features)?,
        gaussian_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_box_pixels_carry_its_feature() {
        let spec = SynthSpec {
            room: None,
            boxes: vec![BoxSpec {
                center: [0.0, 0.0],
                half_size: [0.5, 0.5, 0.5],
            }],
            spacing: 0.1,
            views: 1,
            orbit_radius: 3.0,
            eye_height: 1.5,
            target_height: 0.5,
            target_ratio: 0.0,
            ..SynthSpec::default()
        };
        let s = generate_synthetic(&spec, 1).unwrap();
        let q = &s.queries.vectors[0];
        let mut covered = 0;
        for (p, l) in s.labels[0].iter().enumerate() {
            let x = p % s.maps[0].width;
            let y = p / s.maps[0].width;
            if *l == 1 {
                covered += 1;
                for (a, b) in s.maps[0].pixel(x, y).iter().zip(q) {
                    assert!((*a as f64 - b).abs() < 1e-6);
                }
            } else {
                assert!(s.maps[0].is_masked(x, y));
            }
        }
        assert!(covered > 200);
    }

    #[test]
    fn full_clone_doubles_the_scene() {
        let base = generate_synthetic(&SynthSpec::default(), 3).unwrap();
        let spec = SynthSpec {
            clone_fraction: 1.0,
            ..SynthSpec::default()
        };
        let cloned = generate_synthetic(&spec, 3).unwrap();
        assert_eq!(cloned.scene.len(), 2 * base.scene.len());
        let n = base.scene.len();
        assert_eq!(&cloned.scene.gaussians[n..], &base.scene.gaussians[..]);
    }

    #[test]
    fn deterministic_and_well_separated() {
        let spec = SynthSpec {
            jitter: 0.05,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec, 9).unwrap();
        let b = generate_synthetic(&spec, 9).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.maps, b.maps);
        assert_eq!(a.labels, b.labels);
        let q = &a.queries.vectors;
        for i in 0..q.len() {
            for j in 0..i {
                let c: f64 = q[i].iter().zip(&q[j]).map(|(x, y)| x * y).sum();
                assert!(c < 0.9);
            }
        }
        assert_eq!(a.queries.names, vec!["floor", "wall", "box_0", "box_1"]);
        // Every label is visible somewhere.
        for l in 1..=4u32 {
            assert!(
                a.labels.iter().flatten().any(|v| *v == l),
                "label {l} never visible"
            );
        }
    }

    #[test]
    fn degenerate_layouts_are_rejected() {
        let spec = SynthSpec {
            room: None,
            boxes: vec![],
            ..SynthSpec::default()
        };
        assert!(matches!(
            generate_synthetic(&spec, 0),
            Err(Error::Config(_))
        ));
        let spec = SynthSpec {
            spacing: 0.0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }
}
