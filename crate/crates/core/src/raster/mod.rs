//! Tile-based software rasterizer.
//!
//! Gaussians are projected with the EWA approximation, sorted once per image
//! by view-space depth (ties by index), binned into square tiles and blended
//! front to back. Optionally every per-pixel blend weight `w = α′·T` is
//! captured into a [`WeightBuffer`].

mod backward;
pub mod real;

pub use backward::{gaussian_gradients, render_backward, GaussianGrad, SplatGrad};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{Camera, Gaussian, GaussianScene};
use real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Added to the diagonal of every 2D covariance (pixels²).
    pub low_pass: f64,
    /// Contributions below this are skipped.
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Blending stops once transmittance falls below this.
    pub transmittance_min: f64,
    /// Minimum view-space depth of a projected center.
    pub near: f64,
    /// The projection Jacobian is evaluated with `x/z` and `y/z` clamped to
    /// this multiple of the image half-extent, which keeps Gaussians far
    /// outside the view from producing huge footprints.
    pub frustum_margin: f64,
    pub capture_weights: bool,
    /// Captured weights below this are dropped.
    pub weight_cutoff: f64,
    pub max_channels: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            low_pass: 0.3,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            near: 0.01,
            frustum_margin: 1.3,
            capture_weights: false,
            weight_cutoff: 1e-4,
            max_channels: 512,
        }
    }
}

impl RenderConfig {
    pub fn capturing(mut self) -> Self {
        self.capture_weights = true;
        self
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub gaussian_index: usize,
    pub center: [f64; 2],
    /// `[a, b, c]` of `[[a, b], [b, c]]`, low-pass included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d` in the same packing.
    pub conic: [f64; 3],
    pub alpha: f64,
    /// View-space z, used for ordering.
    pub depth_key: f64,
    /// Euclidean distance from the camera center, the blended depth value.
    pub depth_value: f64,
    pub bbox: PixelRect,
}

impl Splat2D {
    /// Unclamped opacity of this splat at pixel `(x, y)`.
    #[inline]
    pub fn raw_alpha_at(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.center[0];
        let dy = y as f64 + 0.5 - self.center[1];
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        let g = power.min(0.0).exp();
        (self.alpha * g, g)
    }
}

/// Projected quantities that carry gradients.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Projection<T> {
    pub center: [T; 2],
    pub cov2d: [T; 3],
    pub conic: [T; 3],
    pub depth_key: T,
    pub depth_value: T,
    pub alpha: T,
}

/// EWA projection of one Gaussian, generic over the scalar so the same
/// arithmetic feeds rendering and gradient evaluation.
pub(crate) fn project_params<T: Real>(
    mean: [T; 3],
    log_scale: [T; 3],
    rotation: [T; 4],
    opacity_logit: T,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Option<Projection<T>> {
    let c = T::cst;
    let r = &cam.rotation;
    let t = &cam.translation;
    let p: [T; 3] = std::array::from_fn(|row| {
        mean[0] * c(r[3 * row])
            + mean[1] * c(r[3 * row + 1])
            + mean[2] * c(r[3 * row + 2])
            + c(t[row])
    });
    if !(p[2].value() > cfg.near) {
        return None;
    }

    let [qw, qx, qy, qz] = rotation;
    let qn = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
    let (w, x, y, z) = (qw / qn, qx / qn, qy / qn, qz / qn);
    let one = c(1.0);
    let two = c(2.0);
    let rot = [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ];
    let s = log_scale.map(|v| v.exp());
    // M = R · diag(s), Σ = M Mᵀ
    let m: [[T; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| rot[i][j] * s[j]));
    let sigma = |i: usize, j: usize| m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
    let sig = [
        [sigma(0, 0), sigma(0, 1), sigma(0, 2)],
        [sigma(0, 1), sigma(1, 1), sigma(1, 2)],
        [sigma(0, 2), sigma(1, 2), sigma(2, 2)],
    ];

    let inv_z = one / p[2];
    let fx = c(cam.fx);
    let fy = c(cam.fy);
    let clamp = |ratio: T, lo: f64, hi: f64| {
        if ratio.value() < lo {
            c(lo)
        } else if ratio.value() > hi {
            c(hi)
        } else {
            ratio
        }
    };
    let m = cfg.frustum_margin;
    let rx = clamp(
        p[0] * inv_z,
        -m * cam.cx / cam.fx,
        m * (cam.width as f64 - cam.cx) / cam.fx,
    );
    let ry = clamp(
        p[1] * inv_z,
        -m * cam.cy / cam.fy,
        m * (cam.height as f64 - cam.cy) / cam.fy,
    );
    // Jacobian of the perspective map at p, composed with the view rotation.
    let j0 = [fx * inv_z, c(0.0), -fx * rx * inv_z];
    let j1 = [c(0.0), fy * inv_z, -fy * ry * inv_z];
    let tw =
        |jr: &[T; 3], col: usize| jr[0] * c(r[col]) + jr[1] * c(r[3 + col]) + jr[2] * c(r[6 + col]);
    let t0: [T; 3] = std::array::from_fn(|k| tw(&j0, k));
    let t1: [T; 3] = std::array::from_fn(|k| tw(&j1, k));
    let quad = |u: &[T; 3], v: &[T; 3]| {
        let mut acc = c(0.0);
        for i in 0..3 {
            let row = u[0] * sig[0][i] + u[1] * sig[1][i] + u[2] * sig[2][i];
            acc = acc + row * v[i];
        }
        acc
    };
    let a = quad(&t0, &t0) + c(cfg.low_pass);
    let b = quad(&t0, &t1);
    let cc = quad(&t1, &t1) + c(cfg.low_pass);
    let det = a * cc - b * b;
    if !(det.value() > 0.0) {
        return None;
    }
    let conic = [cc / det, -b / det, a / det];
    let center = [fx * p[0] * inv_z + c(cam.cx), fy * p[1] * inv_z + c(cam.cy)];

    let cam_center = cam.center();
    let d: [T; 3] = std::array::from_fn(|k| mean[k] - c(cam_center[k]));
    let depth_value = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let alpha = one / (one + (-opacity_logit).exp());

    Some(Projection {
        center,
        cov2d: [a, b, cc],
        conic,
        depth_key: p[2],
        depth_value,
        alpha,
    })
}

fn gaussian_is_finite(g: &Gaussian) -> bool {
    g.mean
        .iter()
        .chain(&g.log_scale)
        .chain(&g.rotation)
        .chain(std::iter::once(&g.opacity_logit))
        .all(|v| v.is_finite())
}

/// Projects one Gaussian. `None` when it lies behind the near plane or its
/// 3σ footprint misses the image.
pub fn project(g: &Gaussian, index: usize, cam: &Camera, cfg: &RenderConfig) -> Option<Splat2D> {
    let p = project_params(g.mean, g.log_scale, g.rotation, g.opacity_logit, cam, cfg)?;
    let [a, b, c] = p.cov2d;
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    let [cx, cy] = p.center;
    let clip = |lo: f64, hi: f64, size: u32| -> Option<(usize, usize)> {
        let lo = lo.floor().max(0.0);
        let hi = hi.ceil().min(size as f64);
        (lo < hi).then_some((lo as usize, hi as usize))
    };
    let (x0, x1) = clip(cx - radius, cx + radius, cam.width)?;
    let (y0, y1) = clip(cy - radius, cy + radius, cam.height)?;
    Some(Splat2D {
        gaussian_index: index,
        center: p.center,
        cov2d: p.cov2d,
        conic: p.conic,
        alpha: p.alpha,
        depth_key: p.depth_key,
        depth_value: p.depth_value,
        bbox: PixelRect { x0, y0, x1, y1 },
    })
}

/// Projects every Gaussian and returns the visible splats sorted front to
/// back, ties broken by Gaussian index.
pub fn project_scene(
    gaussians: &[Gaussian],
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<Vec<Splat2D>> {
    if let Some(i) = gaussians.iter().position(|g| !gaussian_is_finite(g)) {
        return Err(Error::Render(format!(
            "gaussian {i} has non-finite parameters"
        )));
    }
    let mut splats: Vec<Splat2D> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, i, cam, cfg))
        .collect();
    if let Some(s) = splats.iter().find(|s| {
        !(s.center.iter().chain(&s.conic).all(|v| v.is_finite()) && s.depth_value.is_finite())
    }) {
        return Err(Error::Render(format!(
            "gaussian {} projects to non-finite splat",
            s.gaussian_index
        )));
    }
    splats.sort_by(|a, b| {
        a.depth_key
            .total_cmp(&b.depth_key)
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
    Ok(splats)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightEntry {
    pub gaussian: u32,
    pub weight: f64,
}

/// Per-pixel, front-to-back blend weights plus the final transmittance.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBuffer {
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    entries: Vec<WeightEntry>,
    pub t_final: Vec<f64>,
}

impl WeightBuffer {
    /// Builds a buffer from row-major per-pixel lists; `t_final` is derived
    /// as one minus each pixel's weight sum.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Vec<WeightEntry>>) -> Self {
        assert_eq!(pixels.len(), width * height);
        let t_final = pixels
            .iter()
            .map(|p| 1.0 - p.iter().map(|e| e.weight).sum::<f64>())
            .collect();
        Self::assemble(width, height, pixels, t_final)
    }

    fn assemble(
        width: usize,
        height: usize,
        pixels: Vec<Vec<WeightEntry>>,
        t_final: Vec<f64>,
    ) -> Self {
        let mut offsets = Vec::with_capacity(pixels.len() + 1);
        offsets.push(0);
        let mut entries = Vec::with_capacity(pixels.iter().map(Vec::len).sum());
        for list in pixels {
            entries.extend(list);
            offsets.push(entries.len());
        }
        WeightBuffer {
            width,
            height,
            offsets,
            entries,
            t_final,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[WeightEntry] {
        let p = y * self.width + x;
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    /// Sum of captured weights per Gaussian, `n` being the scene size.
    pub fn weight_sums(&self, n: usize) -> Vec<f64> {
        let mut sums = vec![0.0; n];
        for e in &self.entries {
            sums[e.gaussian as usize] += e.weight;
        }
        sums
    }
}

/// Output of one view. `image` is `H × W × channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub image: Vec<f64>,
    pub depth: Vec<f64>,
    pub weights: Option<WeightBuffer>,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.image[start..start + self.channels]
    }

    /// `1 − T_final` per pixel.
    pub fn coverage(&self) -> Option<Vec<f64>> {
        self.weights
            .as_ref()
            .map(|w| w.t_final.iter().map(|t| 1.0 - t).collect())
    }
}

pub(crate) struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, tile_size: usize) -> Self {
        let tile_size = tile_size.max(1);
        TileGrid {
            tile_size,
            tiles_x: width.div_ceil(tile_size),
            tiles_y: height.div_ceil(tile_size),
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn rect(&self, tile: usize) -> PixelRect {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        PixelRect {
            x0: tx * self.tile_size,
            y0: ty * self.tile_size,
            x1: ((tx + 1) * self.tile_size).min(self.width),
            y1: ((ty + 1) * self.tile_size).min(self.height),
        }
    }

    /// Per-tile lists of splat positions, preserving the global order.
    pub fn bin(&self, splats: &[Splat2D]) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); self.len()];
        for (k, s) in splats.iter().enumerate() {
            let tx0 = s.bbox.x0 / self.tile_size;
            let tx1 = (s.bbox.x1 - 1) / self.tile_size;
            let ty0 = s.bbox.y0 / self.tile_size;
            let ty1 = (s.bbox.y1 - 1) / self.tile_size;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * self.tiles_x + tx].push(k as u32);
                }
            }
        }
        lists
    }
}

/// One splat's contribution to a pixel during blending.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    /// Position in the sorted splat list.
    pub splat: u32,
    pub alpha: f64,
    pub gauss: f64,
    pub clamped: bool,
    /// Transmittance in front of this splat.
    pub t_before: f64,
}

/// Front-to-back blend of one pixel, reporting each contribution.
#[inline]
pub(crate) fn blend_pixel(
    x: usize,
    y: usize,
    list: &[u32],
    splats: &[Splat2D],
    cfg: &RenderConfig,
    mut visit: impl FnMut(Contribution),
) -> f64 {
    let mut t = 1.0;
    for &k in list {
        let s = &splats[k as usize];
        if !s.bbox.contains(x, y) {
            continue;
        }
        let (raw, gauss) = s.raw_alpha_at(x, y);
        let clamped = raw > cfg.alpha_max;
        let alpha = if clamped { cfg.alpha_max } else { raw };
        if alpha < cfg.alpha_min {
            continue;
        }
        visit(Contribution {
            splat: k,
            alpha,
            gauss,
            clamped,
            t_before: t,
        });
        t *= 1.0 - alpha;
        if t < cfg.transmittance_min {
            break;
        }
    }
    t
}

struct TileOutput {
    image: Vec<f64>,
    depth: Vec<f64>,
    t_final: Vec<f64>,
    weights: Vec<Vec<WeightEntry>>,
}

/// Rasterizes pre-sorted splats. `payloads` holds `channels` values per
/// splat, in splat order.
pub fn rasterize(
    splats: &[Splat2D],
    payloads: &[f64],
    channels: usize,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> RenderOutput {
    debug_assert_eq!(payloads.len(), splats.len() * channels);
    let grid = TileGrid::new(width, height, cfg.tile_size);
    let lists = grid.bin(splats);

    let tiles: Vec<TileOutput> = (0..grid.len())
        .into_par_iter()
        .map(|tile| {
            let rect = grid.rect(tile);
            let n = (rect.x1 - rect.x0) * (rect.y1 - rect.y0);
            let mut out = TileOutput {
                image: vec![0.0; n * channels],
                depth: vec![0.0; n],
                t_final: vec![1.0; n],
                weights: if cfg.capture_weights {
                    Vec::with_capacity(n)
                } else {
                    Vec::new()
                },
            };
            let list = &lists[tile];
            let mut local = 0;
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    let color = &mut out.image[local * channels..(local + 1) * channels];
                    let mut depth = 0.0;
                    let mut captured = Vec::new();
                    let t = blend_pixel(x, y, list, splats, cfg, |c| {
                        let s = c.splat as usize;
                        let w = c.alpha * c.t_before;
                        for (dst, src) in color
                            .iter_mut()
                            .zip(&payloads[s * channels..(s + 1) * channels])
                        {
                            *dst += w * src;
                        }
                        depth += w * splats[s].depth_value;
                        if cfg.capture_weights && w >= cfg.weight_cutoff {
                            captured.push(WeightEntry {
                                gaussian: splats[s].gaussian_index as u32,
                                weight: w,
                            });
                        }
                    });
                    out.depth[local] = depth;
                    out.t_final[local] = t;
                    if cfg.capture_weights {
                        out.weights.push(captured);
                    }
                    local += 1;
                }
            }
            out
        })
        .collect();

    let mut image = vec![0.0; width * height * channels];
    let mut depth = vec![0.0; width * height];
    let mut t_final = vec![1.0; width * height];
    let mut per_pixel: Vec<Vec<WeightEntry>> = if cfg.capture_weights {
        vec![Vec::new(); width * height]
    } else {
        Vec::new()
    };
    for (tile, out) in tiles.into_iter().enumerate() {
        let rect = grid.rect(tile);
        let mut local = 0;
        let mut weights = out.weights.into_iter();
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let p = y * width + x;
                image[p * channels..(p + 1) * channels]
                    .copy_from_slice(&out.image[local * channels..(local + 1) * channels]);
                depth[p] = out.depth[local];
                t_final[p] = out.t_final[local];
                if let Some(w) = weights.next() {
                    per_pixel[p] = w;
                }
                local += 1;
            }
        }
    }

    let weights = cfg
        .capture_weights
        .then(|| WeightBuffer::assemble(width, height, per_pixel, t_final.clone()));

    RenderOutput {
        width,
        height,
        channels,
        image,
        depth,
        weights,
    }
}

/// Payloads of `splats`, gathered from the scene into splat order.
pub fn gather_payloads(scene: &GaussianScene, splats: &[Splat2D]) -> Vec<f64> {
    let mut out = Vec::with_capacity(splats.len() * scene.payload_dim);
    for s in splats {
        out.extend_from_slice(&scene.gaussians[s.gaussian_index].payload);
    }
    out
}

/// Renders the scene payload, blended depth and optionally blend weights.
pub fn render(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    if scene.payload_dim > cfg.max_channels {
        return Err(Error::Config(format!(
            "payload_dim {} exceeds channel limit {}",
            scene.payload_dim, cfg.max_channels
        )));
    }
    let splats = project_scene(&scene.gaussians, cam, cfg)?;
    let payloads = gather_payloads(scene, &splats);
    Ok(rasterize(
        &splats,
        &payloads,
        scene.payload_dim,
        cam.width as usize,
        cam.height as usize,
        cfg,
    ))
}

/// Blend weights and depth only; the payload is not touched.
pub fn render_weights(
    gaussians: &[Gaussian],
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    let splats = project_scene(gaussians, cam, cfg)?;
    let cfg = cfg.clone().capturing();
    Ok(rasterize(
        &splats,
        &[],
        0,
        cam.width as usize,
        cam.height as usize,
        &cfg,
    ))
}

/// Renders arbitrary per-Gaussian values (`channels` per Gaussian, indexed
/// by Gaussian) with the scene geometry.
pub fn render_values(
    gaussians: &[Gaussian],
    values: &[f64],
    channels: usize,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    if values.len() != gaussians.len() * channels {
        return Err(Error::SizeMismatch(format!(
            "{} values for {} gaussians with {channels} channels",
            values.len(),
            gaussians.len()
        )));
    }
    let splats = project_scene(gaussians, cam, cfg)?;
    let mut payloads = Vec::with_capacity(splats.len() * channels);
    for s in &splats {
        let i = s.gaussian_index;
        payloads.extend_from_slice(&values[i * channels..(i + 1) * channels]);
    }
    Ok(rasterize(
        &splats,
        &payloads,
        channels,
        cam.width as usize,
        cam.height as usize,
        cfg,
    ))
}
