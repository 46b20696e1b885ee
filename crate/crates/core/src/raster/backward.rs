//! Reverse pass through alpha blending, then through the projection.
//!
//! Blending is differentiated per pixel, back to front, using
//! `∂C/∂α_i = c_i·T_i − B_i/(1 − α_i)` with `B_i` the blended sum of
//! everything behind splat `i`. Projection gradients come from evaluating
//! the projection on forward-mode duals.

use rayon::prelude::*;

use super::real::{Dual, GEOM_PARAMS};
use super::{blend_pixel, project_params, Contribution, RenderConfig, Splat2D, TileGrid};
use crate::scene::{Camera, Gaussian};

/// Loss gradient with respect to one projected splat.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub payload: Vec<f64>,
    pub depth_value: f64,
    pub alpha: f64,
    pub center: [f64; 2],
    pub conic: [f64; 3],
}

/// Loss gradient with respect to one Gaussian's stored parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub payload: Vec<f64>,
    /// Norm of the gradient with respect to the projected 2D center.
    pub center2d_norm: f64,
    /// Whether the Gaussian was projected in this view.
    pub visible: bool,
}

const EXTRA: usize = 7; // depth, alpha, center x/y, conic a/b/c

/// Back-propagates per-pixel gradients of the blended image and depth to
/// the sorted splats. Returns one gradient per splat, in splat order.
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    splats: &[Splat2D],
    payloads: &[f64],
    channels: usize,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
    grad_image: &[f64],
    grad_depth: &[f64],
) -> Vec<SplatGrad> {
    debug_assert_eq!(grad_image.len(), width * height * channels);
    debug_assert_eq!(grad_depth.len(), width * height);
    let stride = channels + EXTRA;
    let grid = TileGrid::new(width, height, cfg.tile_size);
    let lists = grid.bin(splats);

    let tiles: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|tile| {
            let list = &lists[tile];
            let mut local = vec![0.0; list.len() * stride];
            if list.is_empty() {
                return local;
            }
            let rect = grid.rect(tile);
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut behind = vec![0.0; channels];
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    let p = y * width + x;
                    let d_color = &grad_image[p * channels..(p + 1) * channels];
                    let d_depth = grad_depth[p];
                    if d_depth == 0.0 && d_color.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    contribs.clear();
                    blend_pixel(x, y, list, splats, cfg, |c| contribs.push(c));
                    behind.iter_mut().for_each(|v| *v = 0.0);
                    let mut behind_depth = 0.0;
                    for c in contribs.iter().rev() {
                        let k = c.splat as usize;
                        let slot = list.binary_search(&c.splat).expect("splat in tile list");
                        let g = &mut local[slot * stride..(slot + 1) * stride];
                        let s = &splats[k];
                        let color = &payloads[k * channels..(k + 1) * channels];
                        let w = c.alpha * c.t_before;
                        let one_minus = 1.0 - c.alpha;

                        let mut d_alpha = 0.0;
                        for ch in 0..channels {
                            g[ch] += w * d_color[ch];
                            d_alpha +=
                                d_color[ch] * (color[ch] * c.t_before - behind[ch] / one_minus);
                            behind[ch] += color[ch] * w;
                        }
                        g[channels] += w * d_depth;
                        d_alpha +=
                            d_depth * (s.depth_value * c.t_before - behind_depth / one_minus);
                        behind_depth += s.depth_value * w;

                        if c.clamped {
                            continue;
                        }
                        // α′ = α·G, G = exp(power)
                        g[channels + 1] += c.gauss * d_alpha;
                        let d_power = s.alpha * c.gauss * d_alpha;
                        let dx = x as f64 + 0.5 - s.center[0];
                        let dy = y as f64 + 0.5 - s.center[1];
                        let [a, b, cc] = s.conic;
                        g[channels + 2] += (a * dx + b * dy) * d_power;
                        g[channels + 3] += (cc * dy + b * dx) * d_power;
                        g[channels + 4] += -0.5 * dx * dx * d_power;
                        g[channels + 5] += -dx * dy * d_power;
                        g[channels + 6] += -0.5 * dy * dy * d_power;
                    }
                }
            }
            local
        })
        .collect();

    let mut total = vec![0.0; splats.len() * stride];
    for (tile, local) in tiles.iter().enumerate() {
        for (slot, &k) in lists[tile].iter().enumerate() {
            let dst = &mut total[k as usize * stride..(k as usize + 1) * stride];
            for (d, s) in dst
                .iter_mut()
                .zip(&local[slot * stride..(slot + 1) * stride])
            {
                *d += s;
            }
        }
    }

    total
        .chunks_exact(stride)
        .map(|g| SplatGrad {
            payload: g[..channels].to_vec(),
            depth_value: g[channels],
            alpha: g[channels + 1],
            center: [g[channels + 2], g[channels + 3]],
            conic: [g[channels + 4], g[channels + 5], g[channels + 6]],
        })
        .collect()
}

/// Chains splat gradients through the projection to every Gaussian's
/// parameters. The result is indexed by Gaussian; invisible ones get zeros.
pub fn gaussian_gradients(
    gaussians: &[Gaussian],
    splats: &[Splat2D],
    splat_grads: &[SplatGrad],
    cam: &Camera,
    cfg: &RenderConfig,
) -> Vec<GaussianGrad> {
    let payload_dim = splat_grads.first().map_or(0, |g| g.payload.len());
    let mut out: Vec<GaussianGrad> = gaussians
        .iter()
        .map(|_| GaussianGrad {
            payload: vec![0.0; payload_dim],
            ..Default::default()
        })
        .collect();

    let computed: Vec<(usize, GaussianGrad)> = splats
        .par_iter()
        .zip(splat_grads)
        .filter_map(|(s, sg)| {
            let g = &gaussians[s.gaussian_index];
            let var = |v: f64, slot: usize| Dual::var(v, slot);
            let p = project_params(
                [var(g.mean[0], 0), var(g.mean[1], 1), var(g.mean[2], 2)],
                [
                    var(g.log_scale[0], 3),
                    var(g.log_scale[1], 4),
                    var(g.log_scale[2], 5),
                ],
                [
                    var(g.rotation[0], 6),
                    var(g.rotation[1], 7),
                    var(g.rotation[2], 8),
                    var(g.rotation[3], 9),
                ],
                var(g.opacity_logit, 10),
                cam,
                cfg,
            )?;
            let mut total = [0.0; GEOM_PARAMS];
            let upstream = [
                (p.center[0], sg.center[0]),
                (p.center[1], sg.center[1]),
                (p.conic[0], sg.conic[0]),
                (p.conic[1], sg.conic[1]),
                (p.conic[2], sg.conic[2]),
                (p.depth_value, sg.depth_value),
                (p.alpha, sg.alpha),
            ];
            for (out_dual, grad) in upstream {
                if grad != 0.0 {
                    for k in 0..GEOM_PARAMS {
                        total[k] += out_dual.d[k] * grad;
                    }
                }
            }
            Some((
                s.gaussian_index,
                GaussianGrad {
                    mean: [total[0], total[1], total[2]],
                    log_scale: [total[3], total[4], total[5]],
                    rotation: [total[6], total[7], total[8], total[9]],
                    opacity_logit: total[10],
                    payload: sg.payload.clone(),
                    center2d_norm: sg.center[0].hypot(sg.center[1]),
                    visible: true,
                },
            ))
        })
        .collect();

    for (i, g) in computed {
        out[i] = g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{project_scene, rasterize};
    use crate::scene::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera::look_at(
            "v",
            [0.3, -0.2, -4.0],
            [0.0; 3],
            [0.0, -1.0, 0.0],
            24,
            20,
            0.9,
        )
    }

    fn random_gaussians(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Gaussian> {
        (0..n)
            .map(|_| Gaussian {
                mean: [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                ],
                log_scale: [
                    rng.random_range(-1.8f64..-1.0),
                    rng.random_range(-1.8f64..-1.0),
                    rng.random_range(-1.8f64..-1.0),
                ],
                rotation: [
                    rng.random_range(0.5..1.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ],
                opacity_logit: logit(rng.random_range(0.2..0.7)),
                payload: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect()
    }

    /// Smooth-enough scalar loss: weighted sum of the image and depth.
    fn loss(
        gaussians: &[Gaussian],
        cam: &Camera,
        cfg: &RenderConfig,
        wi: &[f64],
        wd: &[f64],
    ) -> f64 {
        let splats = project_scene(gaussians, cam, cfg).unwrap();
        let dim = gaussians[0].payload.len();
        let payloads: Vec<f64> = splats
            .iter()
            .flat_map(|s| gaussians[s.gaussian_index].payload.clone())
            .collect();
        let out = rasterize(
            &splats,
            &payloads,
            dim,
            cam.width as usize,
            cam.height as usize,
            cfg,
        );
        out.image.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>()
            + out.depth.iter().zip(wd).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = camera();
        // No early termination or clamping so the loss is smooth in all parameters.
        let cfg = RenderConfig {
            alpha_min: 0.0,
            transmittance_min: 0.0,
            ..RenderConfig::default()
        };
        let dim = 3;
        let gaussians = random_gaussians(&mut rng, 5, dim);
        let npx = cam.pixel_count();
        let wi: Vec<f64> = (0..npx * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let wd: Vec<f64> = (0..npx).map(|_| rng.random_range(-1.0..1.0)).collect();

        let splats = project_scene(&gaussians, &cam, &cfg).unwrap();
        assert_eq!(splats.len(), 5);
        let payloads: Vec<f64> = splats
            .iter()
            .flat_map(|s| gaussians[s.gaussian_index].payload.clone())
            .collect();
        let sg = render_backward(&splats, &payloads, dim, 24, 20, &cfg, &wi, &wd);
        let grads = gaussian_gradients(&gaussians, &splats, &sg, &cam, &cfg);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..gaussians.len() {
            let analytic: Vec<f64> = grads[i]
                .mean
                .iter()
                .chain(&grads[i].log_scale)
                .chain(&grads[i].rotation)
                .chain(std::iter::once(&grads[i].opacity_logit))
                .chain(&grads[i].payload)
                .copied()
                .collect();
            for (slot, &a) in analytic.iter().enumerate() {
                let perturb = |delta: f64| {
                    let mut gs = gaussians.clone();
                    let g = &mut gs[i];
                    match slot {
                        0..=2 => g.mean[slot] += delta,
                        3..=5 => g.log_scale[slot - 3] += delta,
                        6..=9 => g.rotation[slot - 6] += delta,
                        10 => g.opacity_logit += delta,
                        _ => g.payload[slot - 11] += delta,
                    }
                    loss(&gs, &cam, &cfg, &wi, &wd)
                };
                let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                let err = (a - numeric).abs() / numeric.abs().max(1e-2);
                worst = worst.max(err);
                assert!(
                    err < 1e-4,
                    "gaussian {i} slot {slot}: analytic {a} numeric {numeric}"
                );
            }
        }
        assert!(worst < 1e-4);
    }
}
