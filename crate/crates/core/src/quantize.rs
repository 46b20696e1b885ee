//! Vector quantization of latent scenes.
//!
//! Scale and rotation (7 values) and the latent payload (3 values) each get
//! a k-means codebook; positions and opacities are stored per Gaussian.
//!
//! Bundle layout, little endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `CFVQ` |
//! | 4 | u32 version |
//! | 4 | u32 N |
//! | 4 | u32 K geometry |
//! | 4 | u32 K latent |
//! | 4 | u32 flags, bit 0 = half-precision positions |
//! | 4 | u32 geometry width (7) |
//! | 4 | u32 latent width (3) |
//! | 4·K·7 | f32 geometry codebook |
//! | 4·K·3 | f32 latent codebook |
//! | N·b | geometry indices, `b` = 2 when K ≤ 65536 else 4 |
//! | N·b | latent indices |
//! | N·3·p | positions, `p` = 2 for f16 else 4 |
//! | N·4 | f32 opacity logits |

use std::path::Path;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autoencoder::LATENT_DIM;
use crate::error::{Error, Result};
use crate::scene::{normalize_quaternion, Gaussian, GaussianScene, SceneMetadata, Stage};

pub const CFVQ_MAGIC: &[u8; 4] = b"CFVQ";
pub const CFVQ_VERSION: u32 = 1;
pub const GEOMETRY_DIM: usize = 7;
const HEADER_BYTES: usize = 32;

/// K centroids of width `dim` and the index of each coded vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub entries: Vec<f32>,
    pub assignment: Vec<u32>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the entry nearest to `v`; ties go to the lower index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.len() {
            let d = dist2_f32(v, self.entry(k));
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    /// Reassigns `vectors` (row-major, width `dim`) to the existing entries.
    pub fn assign(&self, vectors: &[f64]) -> Vec<u32> {
        vectors
            .par_chunks(self.dim)
            .map(|v| self.nearest(v) as u32)
            .collect()
    }

    /// Sum of squared distances of `vectors` to their assigned entries.
    pub fn error(&self, vectors: &[f64]) -> f64 {
        vectors
            .chunks(self.dim)
            .zip(&self.assignment)
            .map(|(v, &a)| dist2_f32(v, self.entry(a as usize)))
            .sum()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist2_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).powi(2)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lower index.
fn nearest_centroid(v: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks(dim).enumerate() {
        let d = dist2(v, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// A codebook with the squared error after every assignment step.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub codebook: Codebook,
    pub errors: Vec<f64>,
}

fn plus_plus_init(vectors: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = vectors.len() / dim;
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), row(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(dist2(&vectors[i * dim..(i + 1) * dim], &c));
        });
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// k-means with k-means++ seeding and Lloyd iterations. Empty clusters are
/// moved onto the points farthest from their centroids.
pub fn build_codebook(
    vectors: &[f64],
    dim: usize,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<KMeans> {
    if dim == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(Error::SizeMismatch(format!(
            "{} values do not form rows of width {dim}",
            vectors.len()
        )));
    }
    let n = vectors.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "cannot build {k} centroids from {n} vectors"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(vectors, dim, k, &mut rng);
    let mut assignment = vec![0u32; n];
    let mut errors = Vec::with_capacity(iterations + 1);

    for iter in 0..=iterations {
        let assigned: Vec<(usize, f64)> = vectors
            .par_chunks(dim)
            .map(|v| nearest_centroid(v, &centroids, dim))
            .collect();
        let changed = assigned
            .iter()
            .zip(&assignment)
            .any(|((a, _), b)| *a as u32 != *b);
        for (slot, (a, _)) in assignment.iter_mut().zip(&assigned) {
            *slot = *a as u32;
        }
        errors.push(assigned.iter().map(|(_, d)| d).sum());
        if iter == iterations || (iter > 0 && !changed) {
            break;
        }

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            for d in 0..dim {
                sums[a * dim + d] += vectors[i * dim + d];
            }
        }
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            } else if let Some(p) = far.next() {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&vectors[p * dim..(p + 1) * dim]);
            }
        }
    }

    Ok(KMeans {
        codebook: Codebook {
            dim,
            entries: centroids.iter().map(|v| *v as f32).collect(),
            assignment,
        },
        errors,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeConfig {
    pub geometry_k: usize,
    pub latent_k: usize,
    pub iterations: usize,
    pub half_positions: bool,
    pub seed: u64,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        QuantizeConfig {
            geometry_k: 4096,
            latent_k: 256,
            iterations: 20,
            half_positions: true,
            seed: 0,
        }
    }
}

/// A quantized latent scene.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedScene {
    pub positions: Vec<[f32; 3]>,
    pub opacity_logits: Vec<f32>,
    pub geometry: Codebook,
    pub latent: Codebook,
    pub half_positions: bool,
}

fn geometry_vector(g: &Gaussian) -> [f64; GEOMETRY_DIM] {
    let mut q = normalize_quaternion(g.rotation);
    if q[0] < 0.0 {
        q = q.map(|v| -v);
    }
    [
        g.log_scale[0],
        g.log_scale[1],
        g.log_scale[2],
        q[0],
        q[1],
        q[2],
        q[3],
    ]
}

fn round_position(p: [f64; 3], half: bool) -> [f32; 3] {
    p.map(|v| {
        if half {
            f16::from_f64(v).to_f32()
        } else {
            v as f32
        }
    })
}

fn check_quantizable(scene: &GaussianScene) -> Result<()> {
    if scene.payload_dim != LATENT_DIM {
        return Err(Error::DimensionMismatch {
            expected: LATENT_DIM,
            got: scene.payload_dim,
        });
    }
    Ok(())
}

fn split_vectors(scene: &GaussianScene) -> (Vec<f64>, Vec<f64>) {
    let geometry = scene.gaussians.iter().flat_map(geometry_vector).collect();
    let latent = scene
        .gaussians
        .iter()
        .flat_map(|g| g.payload.iter().copied())
        .collect();
    (geometry, latent)
}

/// Quantizes a latent scene. Codebook sizes are capped at the scene size.
pub fn quantize_scene(scene: &GaussianScene, cfg: &QuantizeConfig) -> Result<QuantizedScene> {
    check_quantizable(scene)?;
    let n = scene.len();
    let (geometry, latent) = split_vectors(scene);
    let kg = cfg.geometry_k.min(n);
    let kl = cfg.latent_k.min(n);
    if kg < cfg.geometry_k || kl < cfg.latent_k {
        log::info!("codebook sizes capped at the scene size {n}");
    }
    let geometry = build_codebook(&geometry, GEOMETRY_DIM, kg, cfg.iterations, cfg.seed)?.codebook;
    let latent = build_codebook(
        &latent,
        LATENT_DIM,
        kl,
        cfg.iterations,
        cfg.seed.wrapping_add(1),
    )?
    .codebook;
    Ok(QuantizedScene {
        positions: scene
            .gaussians
            .iter()
            .map(|g| round_position(g.mean, cfg.half_positions))
            .collect(),
        opacity_logits: scene
            .gaussians
            .iter()
            .map(|g| g.opacity_logit as f32)
            .collect(),
        geometry,
        latent,
        half_positions: cfg.half_positions,
    })
}

/// Codes `scene` with the codebooks of `bundle`.
pub fn requantize(scene: &GaussianScene, bundle: &QuantizedScene) -> Result<QuantizedScene> {
    check_quantizable(scene)?;
    let (geometry, latent) = split_vectors(scene);
    Ok(QuantizedScene {
        positions: scene
            .gaussians
            .iter()
            .map(|g| round_position(g.mean, bundle.half_positions))
            .collect(),
        opacity_logits: scene
            .gaussians
            .iter()
            .map(|g| g.opacity_logit as f32)
            .collect(),
        geometry: Codebook {
            assignment: bundle.geometry.assign(&geometry),
            ..bundle.geometry.clone()
        },
        latent: Codebook {
            assignment: bundle.latent.assign(&latent),
            ..bundle.latent.clone()
        },
        half_positions: bundle.half_positions,
    })
}

pub fn dequantize(bundle: &QuantizedScene) -> Result<GaussianScene> {
    let gaussians = (0..bundle.len())
        .map(|i| {
            let geo = bundle
                .geometry
                .entry(bundle.geometry.assignment[i] as usize);
            let lat = bundle.latent.entry(bundle.latent.assignment[i] as usize);
            Gaussian {
                mean: bundle.positions[i].map(f64::from),
                log_scale: [geo[0] as f64, geo[1] as f64, geo[2] as f64],
                rotation: normalize_quaternion([
                    geo[3] as f64,
                    geo[4] as f64,
                    geo[5] as f64,
                    geo[6] as f64,
                ]),
                opacity_logit: bundle.opacity_logits[i] as f64,
                payload: lat.iter().map(|v| *v as f64).collect(),
            }
        })
        .collect();
    GaussianScene::new(
        gaussians,
        LATENT_DIM,
        SceneMetadata {
            source: "cfvq".into(),
            stage: Stage::Sparse,
        },
    )
}

fn index_bytes(k: usize) -> usize {
    if k <= 1 << 16 {
        2
    } else {
        4
    }
}

/// Serialized size of a bundle, from the layout alone.
pub fn bundle_bytes(n: usize, geometry_k: usize, latent_k: usize, half_positions: bool) -> usize {
    HEADER_BYTES
        + 4 * (geometry_k * GEOMETRY_DIM + latent_k * LATENT_DIM)
        + n * (index_bytes(geometry_k) + index_bytes(latent_k))
        + n * 3 * if half_positions { 2 } else { 4 }
        + n * 4
}

fn push_indices(out: &mut Vec<u8>, idx: &[u32], k: usize) {
    for &i in idx {
        if index_bytes(k) == 2 {
            out.extend_from_slice(&(i as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("CFVQ bundle is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("CFVQ size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn indices(&mut self, n: usize, k: usize) -> Result<Vec<u32>> {
        let b = index_bytes(k);
        let raw = self.take(n * b)?;
        let idx: Vec<u32> = if b == 2 {
            raw.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        if idx.iter().any(|i| *i as usize >= k) {
            return Err(Error::Format("CFVQ index out of codebook range".into()));
        }
        Ok(idx)
    }
}

impl QuantizedScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn byte_size(&self) -> usize {
        bundle_bytes(
            self.len(),
            self.geometry.len(),
            self.latent.len(),
            self.half_positions,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let (kg, kl) = (self.geometry.len(), self.latent.len());
        let mut out = Vec::with_capacity(self.byte_size());
        out.extend_from_slice(CFVQ_MAGIC);
        for v in [
            CFVQ_VERSION,
            n as u32,
            kg as u32,
            kl as u32,
            u32::from(self.half_positions),
            GEOMETRY_DIM as u32,
            LATENT_DIM as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.geometry.entries.iter().chain(&self.latent.entries) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        push_indices(&mut out, &self.geometry.assignment, kg);
        push_indices(&mut out, &self.latent.assignment, kl);
        for p in &self.positions {
            for v in p {
                if self.half_positions {
                    out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for v in &self.opacity_logits {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CFVQ_MAGIC {
            return Err(Error::Format("not a CFVQ bundle (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CFVQ_VERSION {
            return Err(Error::Format(format!("unsupported CFVQ version {version}")));
        }
        let n = r.u32()? as usize;
        let kg = r.u32()? as usize;
        let kl = r.u32()? as usize;
        let flags = r.u32()?;
        let (gd, ld) = (r.u32()? as usize, r.u32()? as usize);
        if gd != GEOMETRY_DIM || ld != LATENT_DIM {
            return Err(Error::Format(format!(
                "unexpected CFVQ widths {gd} and {ld}"
            )));
        }
        if kg == 0 || kl == 0 {
            return Err(Error::Format("CFVQ codebook is empty".into()));
        }
        let half = flags & 1 == 1;
        let expected = bundle_bytes(n, kg, kl, half);
        if bytes.len() != expected {
            return Err(Error::SizeMismatch(format!(
                "CFVQ bundle is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let geo_entries = r.f32s(kg * GEOMETRY_DIM)?;
        let lat_entries = r.f32s(kl * LATENT_DIM)?;
        let geo_idx = r.indices(n, kg)?;
        let lat_idx = r.indices(n, kl)?;
        let positions = (0..n)
            .map(|_| {
                let mut p = [0f32; 3];
                for v in &mut p {
                    *v = if half {
                        let b = r.take(2)?;
                        f16::from_le_bytes([b[0], b[1]]).to_f32()
                    } else {
                        f32::from_le_bytes(r.take(4)?.try_into().unwrap())
                    };
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let opacity_logits = r.f32s(n)?;
        let all_finite = geo_entries
            .iter()
            .chain(&lat_entries)
            .chain(&opacity_logits)
            .chain(positions.iter().flatten())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Format("CFVQ bundle holds non-finite values".into()));
        }
        Ok(QuantizedScene {
            positions,
            opacity_logits,
            geometry: Codebook {
                dim: GEOMETRY_DIM,
                entries: geo_entries,
                assignment: geo_idx,
            },
            latent: Codebook {
                dim: LATENT_DIM,
                entries: lat_entries,
                assignment: lat_idx,
            },
            half_positions: half,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
