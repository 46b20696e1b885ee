use ndarray::{s, Array2, ArrayView2, Axis, NdFloat, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{cst, Autoencoder, Layer, DEFAULT_HIDDEN};
use crate::error::{Error, Result};

const COS_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub lambda_cos: f64,
    pub lambda_struc: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// When set, the step size follows a cosine schedule from
    /// `learning_rate` down to this value over the whole run.
    pub final_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Random partners drawn per batch element for the structure term.
    pub pairs_per_element: usize,
    /// Rows per gradient shard. Shards are reduced in order, so results do
    /// not depend on the thread count.
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: DEFAULT_HIDDEN.to_vec(),
            lambda_cos: 1.0,
            lambda_struc: 0.1,
            batch_size: 4096,
            learning_rate: 1e-3,
            final_learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 200,
            pairs_per_element: 1,
            shard_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("batch_size", self.batch_size as f64),
            ("shard_size", self.shard_size as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr > 0.0 && lr <= self.learning_rate) {
                return Err(Error::Config(
                    "final_learning_rate must lie in (0, learning_rate]".into(),
                ));
            }
        }
        if self.lambda_cos < 0.0 || self.lambda_struc < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.lambda_struc > 0.0 && self.batch_size < 2 {
            return Err(Error::Config("structure loss needs batch_size >= 2".into()));
        }
        Ok(())
    }

    /// Step size for update `step` out of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        match self.final_learning_rate {
            None => self.learning_rate,
            Some(end) => {
                let t = if total <= 1 {
                    1.0
                } else {
                    step as f64 / (total - 1) as f64
                };
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Loss terms, each already averaged; `total = mse + λ_cos·cos + λ_struc·struc`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub cos: f64,
    pub struc: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.mse += o.mse;
        self.cos += o.cos;
        self.struc += o.struc;
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

type Grads<T> = (Vec<Layer<T>>, Vec<Layer<T>>);

fn row_f64<T: NdFloat>(a: &ArrayView2<T>, i: usize) -> Vec<f64> {
    a.row(i).iter().map(|v| v.to_f64().unwrap()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `cos(a, b)` with `ε` in the denominator and its gradient w.r.t. `a`.
fn cosine_and_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let d = dot(a, b);
    let den = na * nb + COS_EPS;
    let cos = d / den;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| {
            let radial = if na > 0.0 {
                d * nb / (den * den) * ai / na
            } else {
                0.0
            };
            bi / den - radial
        })
        .collect();
    (cos, grad)
}

/// Loss and parameter gradients on one shard. `inv_b` and `inv_p` are the
/// reciprocal batch and pair counts of the whole batch, so shard results sum
/// to batch results.
fn shard_loss_and_grad<T: NdFloat>(
    model: &Autoencoder<T>,
    x: ArrayView2<T>,
    pairs: &[(usize, usize)],
    inv_b: f64,
    inv_p: f64,
    cfg: &TrainConfig,
) -> (LossParts, Grads<T>) {
    let (mut enc_g, mut dec_g) = model.zero_grads();
    let enc = Autoencoder::trace(&model.encoder, x.to_owned(), true);
    let z = enc.output().clone();
    let dec = Autoencoder::trace(&model.decoder, z.clone(), false);
    let recon = dec.output();

    let mut parts = LossParts::default();
    let mut d_recon = Array2::<T>::zeros(recon.raw_dim());
    let recon_v = recon.view();
    for i in 0..x.nrows() {
        let xi = row_f64(&x, i);
        let ri = row_f64(&recon_v, i);
        let resid: Vec<f64> = ri.iter().zip(&xi).map(|(r, f)| r - f).collect();
        let n = norm(&resid);
        parts.mse += n * inv_b;
        let (cos, cos_grad) = cosine_and_grad(&ri, &xi);
        parts.cos += (1.0 - cos) * inv_b;
        let mut row = d_recon.row_mut(i);
        for d in 0..xi.len() {
            let mut g = -cfg.lambda_cos * inv_b * cos_grad[d];
            if n > 0.0 {
                g += inv_b * resid[d] / n;
            }
            row[d] = cst(g);
        }
    }

    let mut d_z = Autoencoder::backprop(&model.decoder, &dec, d_recon, false, Some(&mut dec_g));

    if cfg.lambda_struc > 0.0 && !pairs.is_empty() {
        let zv = z.view();
        for &(i, j) in pairs {
            let (xi, xj) = (row_f64(&x, i), row_f64(&x, j));
            let (zi, zj) = (row_f64(&zv, i), row_f64(&zv, j));
            let (feature_cos, _) = cosine_and_grad(&xi, &xj);
            let (latent_cos, grad_i) = cosine_and_grad(&zi, &zj);
            let (_, grad_j) = cosine_and_grad(&zj, &zi);
            let diff = feature_cos - latent_cos;
            parts.struc += diff.abs() * inv_p;
            let coef = -diff.signum() * cfg.lambda_struc * inv_p;
            if diff == 0.0 {
                continue;
            }
            for k in 0..zi.len() {
                d_z[[i, k]] += cst(coef * grad_i[k]);
                d_z[[j, k]] += cst(coef * grad_j[k]);
            }
        }
    }

    Autoencoder::backprop(&model.encoder, &enc, d_z, true, Some(&mut enc_g));
    parts.total = parts.mse + cfg.lambda_cos * parts.cos + cfg.lambda_struc * parts.struc;
    (parts, (enc_g, dec_g))
}

/// Loss and gradients of one batch evaluated as a single shard. `pairs`
/// index rows of `batch`.
pub fn loss_and_grad<T: NdFloat>(
    model: &Autoencoder<T>,
    batch: ArrayView2<T>,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> (LossParts, Vec<Layer<T>>, Vec<Layer<T>>) {
    let inv_b = 1.0 / batch.nrows() as f64;
    let inv_p = if pairs.is_empty() {
        0.0
    } else {
        1.0 / pairs.len() as f64
    };
    let (parts, (e, d)) = shard_loss_and_grad(model, batch, pairs, inv_b, inv_p, cfg);
    (parts, e, d)
}

/// Draws structure-loss partners: for every element of every shard,
/// `per_element` partners `j ≠ i` uniformly from the same shard.
pub fn sample_pairs(
    batch_len: usize,
    shard_size: usize,
    per_element: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<(usize, usize)>> {
    (0..batch_len)
        .step_by(shard_size)
        .map(|start| {
            let len = shard_size.min(batch_len - start);
            let mut pairs = Vec::new();
            if len < 2 {
                return pairs;
            }
            for i in 0..len {
                for _ in 0..per_element {
                    let mut j = rng.random_range(0..len - 1);
                    if j >= i {
                        j += 1;
                    }
                    pairs.push((i, j));
                }
            }
            pairs
        })
        .collect()
}

struct Adam<T> {
    m: Grads<T>,
    v: Grads<T>,
    step: i32,
}

impl<T: NdFloat> Adam<T> {
    fn new(model: &Autoencoder<T>) -> Self {
        Adam {
            m: model.zero_grads(),
            v: model.zero_grads(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut Autoencoder<T>, grads: &Grads<T>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let eps = cfg.epsilon;
        let apply = |p: &mut Layer<T>, g: &Layer<T>, m: &mut Layer<T>, v: &mut Layer<T>| {
            let step = |p: &mut T, &g: &T, m: &mut T, v: &mut T| {
                let gf = g.to_f64().unwrap();
                let mf = b1 * m.to_f64().unwrap() + (1.0 - b1) * gf;
                let vf = b2 * v.to_f64().unwrap() + (1.0 - b2) * gf * gf;
                *m = cst(mf);
                *v = cst(vf);
                let upd = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *p = cst(p.to_f64().unwrap() - upd);
            };
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(step);
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(step);
        };
        for l in 0..model.encoder.len() {
            apply(
                &mut model.encoder[l],
                &grads.0[l],
                &mut self.m.0[l],
                &mut self.v.0[l],
            );
        }
        for l in 0..model.decoder.len() {
            apply(
                &mut model.decoder[l],
                &grads.1[l],
                &mut self.m.1[l],
                &mut self.v.1[l],
            );
        }
    }
}

fn add_grads<T: NdFloat>(acc: &mut Grads<T>, g: &Grads<T>) {
    for (a, b) in acc.0.iter_mut().zip(&g.0).chain(acc.1.iter_mut().zip(&g.1)) {
        a.weight += &b.weight;
        a.bias += &b.bias;
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Autoencoder<f32>,
    /// Mean total loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Epoch at which a non-finite loss stopped training; `model` then holds
    /// the last finite parameters.
    pub diverged_at: Option<usize>,
}

/// Trains an autoencoder on `features` (`N × D`, one lifted feature per row).
pub fn train(features: ArrayView2<f32>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = features.nrows();
    if n < cfg.batch_size {
        return Err(Error::Config(format!(
            "{n} training features is fewer than the batch size {}",
            cfg.batch_size
        )));
    }
    let mut model = Autoencoder::<f32>::new(features.ncols(), &cfg.hidden, cfg.seed)?;
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let min_len = if cfg.lambda_struc > 0.0 { 2 } else { 1 };
    let per_epoch = n / cfg.batch_size + usize::from(n % cfg.batch_size >= min_len);
    let total_steps = per_epoch * cfg.epochs;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_len {
                continue;
            }
            let batch = features.select(Axis(0), chunk);
            let pairs = sample_pairs(chunk.len(), cfg.shard_size, cfg.pairs_per_element, &mut rng);
            let pair_count: usize = pairs.iter().map(Vec::len).sum();
            let inv_b = 1.0 / chunk.len() as f64;
            let inv_p = if pair_count == 0 {
                0.0
            } else {
                1.0 / pair_count as f64
            };

            let shards: Vec<(LossParts, Grads<f32>)> = pairs
                .par_iter()
                .enumerate()
                .map(|(s, shard_pairs)| {
                    let start = s * cfg.shard_size;
                    let end = (start + cfg.shard_size).min(chunk.len());
                    shard_loss_and_grad(
                        &model,
                        batch.slice(s![start..end, ..]),
                        shard_pairs,
                        inv_b,
                        inv_p,
                        cfg,
                    )
                })
                .collect();
            let mut parts = LossParts::default();
            let mut grads = model.zero_grads();
            for (p, g) in &shards {
                parts.add(p);
                add_grads(&mut grads, g);
            }
            parts.total = parts.mse + cfg.lambda_cos * parts.cos + cfg.lambda_struc * parts.struc;

            let grads_finite = grads
                .0
                .iter()
                .chain(&grads.1)
                .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()));
            if !parts.is_finite() || !grads_finite {
                log::error!("autoencoder training diverged in epoch {epoch}");
                return Ok(TrainOutcome {
                    model,
                    epoch_losses,
                    diverged_at: Some(epoch),
                });
            }
            let before = model.clone();
            adam.update(
                &mut model,
                &grads,
                cfg.learning_rate_at(step, total_steps),
                cfg,
            );
            step += 1;
            if !model.all_finite() {
                log::error!("autoencoder parameters became non-finite in epoch {epoch}");
                return Ok(TrainOutcome {
                    model: before,
                    epoch_losses,
                    diverged_at: Some(epoch),
                });
            }
            epoch_loss += parts.total * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = epoch_loss / seen.max(1) as f64;
        log::debug!("autoencoder epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        diverged_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    /// Central-difference check of every parameter on a float64 shadow.
    fn fd_check(
        model: &Autoencoder<f64>,
        batch: &Array2<f64>,
        pairs: &[(usize, usize)],
        cfg: &TrainConfig,
    ) -> f64 {
        let (_, ge, gd) = loss_and_grad(model, batch.view(), pairs, cfg);
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        let loss_of = |m: &Autoencoder<f64>| loss_and_grad(m, batch.view(), pairs, cfg).0.total;
        for part in 0..2 {
            let layers = if part == 0 {
                &model.encoder
            } else {
                &model.decoder
            };
            let grads = if part == 0 { &ge } else { &gd };
            for l in 0..layers.len() {
                let count = layers[l].weight.len() + layers[l].bias.len();
                for k in 0..count {
                    let nudge = |delta: f64| {
                        let mut m = model.clone();
                        let layer = if part == 0 {
                            &mut m.encoder[l]
                        } else {
                            &mut m.decoder[l]
                        };
                        let wlen = layer.weight.len();
                        if k < wlen {
                            let idx = (k / layer.weight.ncols(), k % layer.weight.ncols());
                            layer.weight[idx] += delta;
                        } else {
                            layer.bias[k - wlen] += delta;
                        }
                        loss_of(&m)
                    };
                    let numeric = (nudge(h) - nudge(-h)) / (2.0 * h);
                    let wlen = grads[l].weight.len();
                    let analytic = if k < wlen {
                        grads[l].weight.as_slice().unwrap()[k]
                    } else {
                        grads[l].bias[k - wlen]
                    };
                    let rel =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
        let mut b: Array2<f64> = Array2::from_shape_fn((rows, dim), |_| StandardNormal.sample(rng));
        for mut row in b.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        b
    }

    #[test]
    fn gradients_match_finite_differences_on_miniature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Autoencoder::<f64>::new(4, &[], 17).unwrap();
        let batch = random_batch(&mut rng, 6, 4);
        let cfg = TrainConfig {
            lambda_cos: 0.7,
            lambda_struc: 0.5,
            ..TrainConfig::default()
        };
        let pairs = vec![(0, 1), (2, 5), (3, 4), (5, 0)];
        let worst = fd_check(&model, &batch, &pairs, &cfg);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_match_with_hidden_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = Autoencoder::<f64>::new(5, &[6, 4], 3).unwrap();
        let batch = random_batch(&mut rng, 5, 5);
        let cfg = TrainConfig::default();
        let worst = fd_check(&model, &batch, &[(0, 3), (1, 2), (4, 1)], &cfg);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn orthogonal_reconstruction_costs_one() {
        let (cos, _) = cosine_and_grad(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(1.0 - cos, 1.0);
    }

    #[test]
    fn pairs_stay_in_shard_and_avoid_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = sample_pairs(10, 4, 3, &mut rng);
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].len(), 12);
        assert!(pairs[2].len() == 6);
        for shard in &pairs {
            for &(i, j) in shard {
                assert_ne!(i, j);
            }
        }
        assert!(pairs[2].iter().all(|&(i, j)| i < 2 && j < 2));
    }

    #[test]
    fn batch_larger_than_data_is_rejected() {
        let features = Array2::<f32>::zeros((10, 4));
        let cfg = TrainConfig {
            batch_size: 11,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(features.view(), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cosine_schedule_hits_both_ends() {
        let cfg = TrainConfig {
            final_learning_rate: Some(1e-5),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0, 100), 1e-3);
        assert!((cfg.learning_rate_at(99, 100) - 1e-5).abs() < 1e-15);
        let mid = cfg.learning_rate_at(50, 101);
        assert!((mid - 0.5 * (1e-3 + 1e-5)).abs() < 1e-12);
        assert_eq!(TrainConfig::default().learning_rate_at(7, 10), 1e-3);
    }
}
