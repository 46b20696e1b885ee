//! Moment-matched merging of nearby, similar Gaussians.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::scene::{logit, matrix_to_quaternion, Gaussian};
use crate::spatial::KdTree;

/// Smallest eigenvalue kept when a merged covariance is refactorized.
pub const MIN_EIGENVALUE: f64 = 1e-9;

/// Result of merging two Gaussians.
#[derive(Clone, Debug)]
pub struct Merged {
    pub gaussian: Gaussian,
    /// Covariance before refactorization.
    pub covariance: Matrix3<f64>,
    pub opacity: f64,
    /// Whether an eigenvalue had to be clamped.
    pub clamped: bool,
}

/// Replaces `a` and `b` by one Gaussian with the same opacity-weighted
/// first and second moments.
pub fn moment_match(a: &Gaussian, b: &Gaussian) -> Merged {
    let (wa, wb) = (a.opacity(), b.opacity());
    let w = wa + wb;
    let (ma, mb) = (Vector3::from(a.mean), Vector3::from(b.mean));
    let mean = (ma * wa + mb * wb) / w;
    let d = ma - mb;
    let covariance =
        (a.covariance() * wa + b.covariance() * wb) / w + d * d.transpose() * (wa * wb / (w * w));
    let covariance = (covariance + covariance.transpose()) * 0.5;
    let opacity = wa + wb - wa * wb;
    let payload = a
        .payload
        .iter()
        .zip(&b.payload)
        .map(|(x, y)| (wa * x + wb * y) / w)
        .collect();

    let (log_scale, rotation, clamped) = factorize(&covariance);
    Merged {
        gaussian: Gaussian {
            mean: mean.into(),
            log_scale,
            rotation,
            opacity_logit: logit(opacity),
            payload,
        },
        covariance,
        opacity,
        clamped,
    }
}

/// Splits a symmetric covariance into log-scales and a unit quaternion.
pub fn factorize(cov: &Matrix3<f64>) -> ([f64; 3], [f64; 4], bool) {
    let eig = SymmetricEigen::new(*cov);
    let mut clamped = false;
    let log_scale = std::array::from_fn(|k| {
        let mut v = eig.eigenvalues[k];
        if !(v >= MIN_EIGENVALUE) {
            v = MIN_EIGENVALUE;
            clamped = true;
        }
        0.5 * v.ln()
    });
    let mut rot = eig.eigenvectors;
    if rot.determinant() < 0.0 {
        rot.set_column(2, &(-rot.column(2)));
    }
    (log_scale, matrix_to_quaternion(&rot), clamped)
}

/// Squared Mahalanobis distance between the centers under each covariance,
/// taking the larger of the two.
pub fn mahalanobis(a: &Gaussian, b: &Gaussian) -> f64 {
    let d = Vector3::from(b.mean) - Vector3::from(a.mean);
    let form = |g: &Gaussian| {
        let r = g.rotation_matrix();
        let local = r.transpose() * d;
        let s = g.scale();
        (0..3).map(|k| (local[k] / s[k]).powi(2)).sum::<f64>()
    };
    form(a).max(form(b))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// Thresholds of the pairwise merge test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeGate {
    pub similarity: f64,
    pub mahalanobis: f64,
    pub gradient: f64,
    pub neighbors: usize,
}

impl MergeGate {
    /// Similarity and distance part of the test; symmetric in its arguments.
    pub fn accepts(&self, a: &Gaussian, b: &Gaussian, fa: &[f64], fb: &[f64]) -> bool {
        cosine(fa, fb) > self.similarity && mahalanobis(a, b) < self.mahalanobis
    }
}

/// Where each Gaussian after a merge pass came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    Merged(usize, usize),
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub gaussians: Vec<Gaussian>,
    pub origin: Vec<Origin>,
    pub merged: usize,
    pub clamped: usize,
}

/// One greedy merge pass. Gaussians are visited in ascending index order;
/// a Gaussian whose gradient norm is below the threshold is merged with the
/// first of its `k` nearest unconsumed neighbours that passes the gate.
/// Every Gaussian takes part in at most one merge per pass, and the merged
/// Gaussian takes the lower index of the pair.
///
/// `features` are the vectors compared by cosine, one per Gaussian.
pub fn merge_pass(
    gaussians: &[Gaussian],
    gradient_norms: &[f64],
    features: &[Vec<f64>],
    gate: &MergeGate,
) -> MergeOutcome {
    let n = gaussians.len();
    let means: Vec<[f64; 3]> = gaussians.iter().map(|g| g.mean).collect();
    let tree = KdTree::new(&means);
    let mut consumed = vec![false; n];
    let mut partner: Vec<Option<usize>> = vec![None; n];

    for i in 0..n {
        if consumed[i] || !(gradient_norms[i] < gate.gradient) {
            continue;
        }
        let neighbors = tree.nearest_filtered(means[i], gate.neighbors, |j| j != i && !consumed[j]);
        let hit = neighbors
            .iter()
            .map(|nb| nb.index)
            .find(|&j| gate.accepts(&gaussians[i], &gaussians[j], &features[i], &features[j]));
        if let Some(j) = hit {
            consumed[i] = true;
            consumed[j] = true;
            partner[i.min(j)] = Some(i.max(j));
        }
    }

    let mut out = MergeOutcome {
        gaussians: Vec::with_capacity(n),
        origin: Vec::with_capacity(n),
        merged: 0,
        clamped: 0,
    };
    for i in 0..n {
        match partner[i] {
            Some(j) => {
                let m = moment_match(&gaussians[i], &gaussians[j]);
                if m.clamped {
                    out.clamped += 1;
                }
                out.gaussians.push(m.gaussian);
                out.origin.push(Origin::Merged(i, j));
                out.merged += 1;
            }
            None if consumed[i] => {}
            None => {
                out.gaussians.push(gaussians[i].clone());
                out.origin.push(Origin::Kept(i));
            }
        }
    }
    if out.clamped > 0 {
        log::warn!(
            "{} merged covariances needed eigenvalue clamping",
            out.clamped
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::sigmoid;

    fn unit(mean: [f64; 3], alpha: f64, payload: Vec<f64>) -> Gaussian {
        Gaussian {
            mean,
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(alpha),
            payload,
        }
    }

    fn close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn identical_pair() {
        let g = Gaussian {
            mean: [0.3, -1.0, 2.0],
            log_scale: [-1.0, 0.2, 0.5],
            rotation: [0.8, 0.2, -0.3, 0.1],
            opacity_logit: 0.4,
            payload: vec![0.2, 0.5, 0.9],
        };
        let mut g = g;
        g.normalize_rotation();
        let m = moment_match(&g, &g);
        let a = g.opacity();
        assert!((m.opacity - (2.0 * a - a * a)).abs() < 1e-15);
        assert!((sigmoid(m.gaussian.opacity_logit) - m.opacity).abs() < 1e-12);
        for k in 0..3 {
            assert!((m.gaussian.mean[k] - g.mean[k]).abs() < 1e-15);
            assert!((m.gaussian.payload[k] - g.payload[k]).abs() < 1e-15);
        }
        assert!(close(&m.covariance, &g.covariance(), 1e-12));
        assert!(close(&m.gaussian.covariance(), &g.covariance(), 1e-9));
    }

    #[test]
    fn distant_unit_pair_fails_gate() {
        let a = unit([0.0; 3], 0.5, vec![1.0, 0.0, 0.0]);
        let b = unit([2.0, 0.0, 0.0], 0.5, vec![1.0, 0.0, 0.0]);
        assert!((mahalanobis(&a, &b) - 4.0).abs() < 1e-12);
        let gate = MergeGate {
            similarity: 0.999,
            mahalanobis: 2.38,
            gradient: 1e-5,
            neighbors: 8,
        };
        assert!(!gate.accepts(&a, &b, &a.payload, &b.payload));
        let out = merge_pass(
            &[a, b],
            &[0.0, 0.0],
            &[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]],
            &gate,
        );
        assert_eq!(out.merged, 0);
        assert_eq!(out.origin, vec![Origin::Kept(0), Origin::Kept(1)]);
    }

    #[test]
    fn close_unit_pair_merges() {
        let a = unit([0.0; 3], 0.5, vec![1.0, 0.0, 0.0]);
        let b = unit([1.0, 0.0, 0.0], 0.5, vec![1.0, 0.0, 0.0]);
        assert!((mahalanobis(&a, &b) - 1.0).abs() < 1e-12);
        let m = moment_match(&a, &b);
        assert_eq!(m.gaussian.mean, [0.5, 0.0, 0.0]);
        let expected = Matrix3::from_diagonal(&Vector3::new(1.25, 1.0, 1.0));
        assert!(close(&m.covariance, &expected, 1e-12));
        assert!(close(&m.gaussian.covariance(), &expected, 1e-9));

        let gate = MergeGate {
            similarity: 0.999,
            mahalanobis: 2.38,
            gradient: 1e-5,
            neighbors: 8,
        };
        let feats = vec![a.payload.clone(), b.payload.clone()];
        let out = merge_pass(&[a.clone(), b.clone()], &[0.0, 0.0], &feats, &gate);
        assert_eq!(out.origin, vec![Origin::Merged(0, 1)]);
        // A large gradient on the only candidate blocks the merge from its
        // side; its partner still proposes it.
        let out = merge_pass(&[a.clone(), b.clone()], &[1.0, 0.0], &feats, &gate);
        assert_eq!(out.origin, vec![Origin::Merged(0, 1)]);
        let out = merge_pass(&[a, b], &[1.0, 1.0], &feats, &gate);
        assert_eq!(out.merged, 0);
    }

    #[test]
    fn each_gaussian_merges_once_per_pass() {
        let gs: Vec<Gaussian> = (0..4)
            .map(|k| unit([0.1 * k as f64, 0.0, 0.0], 0.5, vec![1.0]))
            .collect();
        let feats: Vec<Vec<f64>> = gs.iter().map(|g| g.payload.clone()).collect();
        let gate = MergeGate {
            similarity: 0.9,
            mahalanobis: 2.38,
            gradient: 1.0,
            neighbors: 8,
        };
        let out = merge_pass(&gs, &[0.0; 4], &feats, &gate);
        assert_eq!(out.origin, vec![Origin::Merged(0, 1), Origin::Merged(2, 3)]);
    }

    #[test]
    fn dissimilar_features_block_merge() {
        let a = unit([0.0; 3], 0.5, vec![1.0, 0.0]);
        let b = unit([0.1, 0.0, 0.0], 0.5, vec![0.0, 1.0]);
        let gate = MergeGate {
            similarity: 0.999,
            mahalanobis: 2.38,
            gradient: 1e-5,
            neighbors: 8,
        };
        assert!(!gate.accepts(&a, &b, &a.payload, &b.payload));
    }

    #[test]
    fn factorize_clamps_singular_covariance() {
        let cov = Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, -1e-12));
        let (log_scale, q, clamped) = factorize(&cov);
        assert!(clamped);
        let mut s: Vec<f64> = log_scale.iter().map(|l| (2.0 * l).exp()).collect();
        s.sort_by(f64::total_cmp);
        assert!((s[0] - MIN_EIGENVALUE).abs() < 1e-18 && (s[2] - 1.0).abs() < 1e-12);
        let n: f64 = q.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
