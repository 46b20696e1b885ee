//! Query-based segmentation, metrics, back-mapping to the donor scene and
//! run reports.

pub mod synth;

pub use synth::{generate_synthetic, BoxSpec, Room, SynthScene, SynthSpec};

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::scene::GaussianScene;
use crate::spatial::KdTree;

/// Label id of pixels that match no query.
pub const BACKGROUND: u32 = 0;

/// Named unit query vectors. Query `k` produces label `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub names: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl QuerySet {
    /// Normalizes every vector; zero vectors and mixed widths are rejected.
    pub fn new(names: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != vectors.len() || names.is_empty() {
            return Err(Error::Config("queries need one name per vector".into()));
        }
        let dim = vectors[0].len();
        let mut out = Vec::with_capacity(vectors.len());
        for (name, v) in names.iter().zip(vectors) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Format(format!("query {name} has no direction")));
            }
            out.push(v.iter().map(|x| x / n).collect());
        }
        Ok(QuerySet {
            names,
            vectors: out,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Label ids, `1..=len`.
    pub fn labels(&self) -> Vec<u32> {
        (1..=self.len() as u32).collect()
    }

    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self
            .names
            .iter()
            .zip(&self.vectors)
            .map(|(n, v)| (n.clone(), Value::from(v.clone())))
            .collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("queries serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("queries: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Format("queries must be a JSON object".into()))?;
        let mut names = Vec::new();
        let mut vectors = Vec::new();
        for (name, v) in obj {
            let arr = v
                .as_array()
                .ok_or_else(|| Error::Format(format!("query {name} is not an array")))?;
            let vec = arr
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| Error::Format(format!("query {name} holds a non-number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            names.push(name.clone());
            vectors.push(vec);
        }
        QuerySet::new(names, vectors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// How similarities become labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    /// Best query, or background when its similarity is below the value.
    Argmax { background: f64 },
    /// Best query among those reaching their own threshold.
    PerQuery(Vec<f64>),
}

impl Default for Policy {
    fn default() -> Self {
        Policy::Argmax { background: 0.5 }
    }
}

fn cosine_to_unit(v: &[f64], unit: &[f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return 0.0;
    }
    v.iter().zip(unit).map(|(a, b)| a * b).sum::<f64>() / n
}

/// Labels every pixel of a `dim`-channel feature image. Equal similarities
/// go to the earlier query.
pub fn segment(
    pixels: &[f64],
    dim: usize,
    queries: &QuerySet,
    policy: &Policy,
) -> Result<Vec<u32>> {
    if dim != queries.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            got: dim,
        });
    }
    if let Policy::PerQuery(t) = policy {
        if t.len() != queries.len() {
            return Err(Error::Config(format!(
                "{} thresholds for {} queries",
                t.len(),
                queries.len()
            )));
        }
    }
    Ok(pixels
        .par_chunks(dim)
        .map(|f| {
            let mut best: Option<(usize, f64)> = None;
            for (k, q) in queries.vectors.iter().enumerate() {
                let s = cosine_to_unit(f, q);
                let allowed = match policy {
                    Policy::Argmax { .. } => true,
                    Policy::PerQuery(t) => s >= t[k],
                };
                if allowed && best.is_none_or(|(_, b)| s > b) {
                    best = Some((k, s));
                }
            }
            match (best, policy) {
                (Some((_, s)), Policy::Argmax { background }) if s < *background => BACKGROUND,
                (Some((k, _)), _) => k as u32 + 1,
                (None, _) => BACKGROUND,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub accuracy: f64,
}

/// Mean IoU over `labels` and pixel accuracy. Pixels whose ground truth is
/// background are ignored; labels absent from both maps are skipped.
pub fn miou_accuracy(pred: &[u32], gt: &[u32], labels: &[u32]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::SizeMismatch(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let labeled = gt.iter().filter(|g| **g != BACKGROUND).count();
    if labeled == 0 {
        return Err(Error::EmptyScene(
            "ground truth has no labeled pixel".into(),
        ));
    }
    let correct = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| **g != BACKGROUND && p == g)
        .count();
    let mut ious = Vec::new();
    for &l in labels {
        let (mut inter, mut union) = (0usize, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            if *g == BACKGROUND {
                continue;
            }
            let (a, b) = (*p == l, *g == l);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let miou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok(Metrics {
        miou,
        accuracy: correct as f64 / labeled as f64,
    })
}

/// Maps every donor Gaussian to one compact Gaussian: among the three
/// spatially nearest, the one whose feature is most cosine-similar.
/// `compact_features` are the decoded features, one row per compact Gaussian.
pub fn map_to_donor(
    compact: &GaussianScene,
    compact_features: &[Vec<f64>],
    donor: &GaussianScene,
) -> Result<Vec<usize>> {
    if compact.is_empty() {
        return Err(Error::EmptyScene("compact scene has no gaussians".into()));
    }
    if compact_features.len() != compact.len() {
        return Err(Error::SizeMismatch(format!(
            "{} features for {} gaussians",
            compact_features.len(),
            compact.len()
        )));
    }
    if compact_features[0].len() != donor.payload_dim {
        return Err(Error::DimensionMismatch {
            expected: donor.payload_dim,
            got: compact_features[0].len(),
        });
    }
    let means: Vec<[f64; 3]> = compact.gaussians.iter().map(|g| g.mean).collect();
    let tree = KdTree::new(&means);
    Ok(donor
        .gaussians
        .par_iter()
        .map(|g| {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for nb in tree.nearest(g.mean, 3) {
                let s = crate::sparsify::cosine(&g.payload, &compact_features[nb.index]);
                if s > best.1 || (s == best.1 && nb.index < best.0) {
                    best = (nb.index, s);
                }
            }
            best.0
        })
        .collect())
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub storage_bytes: u64,
    pub fps: f64,
    pub miou: f64,
    pub accuracy: f64,
    pub gaussians: usize,
    /// Size of the donor artifact, for the compression ratio.
    pub donor_bytes: u64,
}

impl RunSummary {
    pub fn compression_ratio(&self) -> f64 {
        self.donor_bytes as f64 / self.storage_bytes as f64
    }
}

/// Size in bytes of a file on disk.
pub fn file_bytes(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    Ok(std::fs::metadata(path)
        .map_err(|e| Error::io(path, e))?
        .len())
}

pub fn report_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("name,storage_bytes,compression,fps,miou,accuracy,gaussians\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{:.1},{:.2},{:.4},{:.4},{}",
            r.name,
            r.storage_bytes,
            r.compression_ratio(),
            r.fps,
            r.miou,
            r.accuracy,
            r.gaussians
        );
    }
    out
}

/// Human-readable table. FPS is measured on the CPU rasterizer.
pub fn report_table(runs: &[RunSummary]) -> String {
    let mut out = format!(
        "{:<16} {:>12} {:>7} {:>9} {:>7} {:>7} {:>8}\n",
        "run", "storage", "ratio", "fps(cpu)", "mIoU", "acc", "#G"
    );
    for r in runs {
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>6.1}x {:>9.2} {:>7.3} {:>7.3} {:>8}",
            r.name,
            r.storage_bytes,
            r.compression_ratio(),
            r.fps,
            r.miou,
            r.accuracy,
            r.gaussians
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Gaussian, SceneMetadata};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn queries() -> QuerySet {
        QuerySet::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 2.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        )
        .unwrap()
    }

    #[test]
    fn query_pixel_gets_its_label() {
        let q = queries();
        let labels = segment(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 3, &q, &Policy::default()).unwrap();
        assert_eq!(labels, vec![2, BACKGROUND]);
        let per = Policy::PerQuery(vec![0.9, 0.9, 0.9]);
        assert_eq!(
            segment(&[0.7, 0.7, 0.0], 3, &q, &per).unwrap(),
            vec![BACKGROUND]
        );
        assert!(segment(&[0.0; 2], 2, &q, &per).is_err());
    }

    #[test]
    fn segment_matches_exhaustive_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = queries();
        let pixels: Vec<f64> = (0..300 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = segment(&pixels, 3, &q, &Policy::default()).unwrap();
        for (p, label) in pixels.chunks(3).zip(got) {
            let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let sims: Vec<f64> = q
                .vectors
                .iter()
                .map(|v| p.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / n)
                .collect();
            let mut best = 0;
            for k in 1..3 {
                if sims[k] > sims[best] {
                    best = k;
                }
            }
            let expected = if sims[best] < 0.5 { 0 } else { best as u32 + 1 };
            assert_eq!(label, expected);
        }
    }

    #[test]
    fn metric_examples() {
        let gt = vec![1u32; 100];
        let m = miou_accuracy(&gt, &gt, &[1]).unwrap();
        assert_eq!((m.miou, m.accuracy), (1.0, 1.0));

        let m = miou_accuracy(&vec![2u32; 100], &gt, &[1, 2]).unwrap();
        assert_eq!(m.miou, 0.0);

        // 100 gt pixels of label 1; prediction hits 50 of them and marks 50
        // other pixels as label 1.
        let mut gt = vec![2u32; 200];
        gt[..100].fill(1);
        let mut pred = vec![2u32; 200];
        pred[..50].fill(1);
        pred[100..150].fill(1);
        let m = miou_accuracy(&pred, &gt, &[1]).unwrap();
        assert!((m.miou - 1.0 / 3.0).abs() < 1e-15);

        assert!(matches!(
            miou_accuracy(&[1], &[0], &[1]),
            Err(Error::EmptyScene(_))
        ));
        assert!(miou_accuracy(&[1, 1], &[1], &[1]).is_err());
    }

    #[test]
    fn queries_json_keeps_order() {
        let q = queries();
        let back = QuerySet::from_json(&q.to_json()).unwrap();
        assert_eq!(back, q);
        let q = QuerySet::from_json(r#"{"zeta": [1, 0], "alpha": [0, 3]}"#).unwrap();
        assert_eq!(q.names, vec!["zeta", "alpha"]);
        assert_eq!(q.vectors[1], vec![0.0, 1.0]);
        assert!(QuerySet::from_json(r#"{"z": [0, 0]}"#).is_err());
    }

    fn point_scene(points: &[[f64; 3]], features: &[Vec<f64>]) -> GaussianScene {
        let gaussians = points
            .iter()
            .zip(features)
            .map(|(p, f)| Gaussian {
                mean: *p,
                log_scale: [-2.0; 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: 0.0,
                payload: f.clone(),
            })
            .collect();
        GaussianScene::new(gaussians, features[0].len(), SceneMetadata::default()).unwrap()
    }

    #[test]
    fn self_mapping_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let feats: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let s = point_scene(&pts, &feats);
        assert_eq!(
            map_to_donor(&s, &feats, &s).unwrap(),
            (0..50).collect::<Vec<_>>()
        );
    }

    #[test]
    fn equidistant_donor_prefers_similar_feature_then_lower_index() {
        let compact = point_scene(
            &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let donor = point_scene(&[[0.0; 3]], &[vec![0.1, 1.0]]);
        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(map_to_donor(&compact, &feats, &donor).unwrap(), vec![1]);
        let same = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(map_to_donor(&compact, &same, &donor).unwrap(), vec![0]);
    }

    #[test]
    fn mapping_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_scene = |n: usize| {
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                .collect();
            let feats: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            (point_scene(&pts, &feats), feats)
        };
        let (compact, feats) = rand_scene(500);
        let (donor, _) = rand_scene(500);
        let got = map_to_donor(&compact, &feats, &donor).unwrap();
        for (d, &m) in donor.gaussians.iter().zip(&got) {
            let mut by_dist: Vec<(f64, usize)> = compact
                .gaussians
                .iter()
                .enumerate()
                .map(|(i, c)| ((0..3).map(|k| (c.mean[k] - d.mean[k]).powi(2)).sum(), i))
                .collect();
            by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let cos = |i: usize| {
                let f = &feats[i];
                let dot: f64 = f.iter().zip(&d.payload).map(|(a, b)| a * b).sum();
                dot / (f.iter().map(|x| x * x).sum::<f64>().sqrt()
                    * d.payload.iter().map(|x| x * x).sum::<f64>().sqrt())
            };
            let best = by_dist[..3]
                .iter()
                .map(|(_, i)| *i)
                .max_by(|a, b| cos(*a).total_cmp(&cos(*b)).then(b.cmp(a)))
                .unwrap();
            assert_eq!(m, best);
        }
        let empty_err = map_to_donor(&compact, &feats[..1], &donor);
        assert!(empty_err.is_err());
    }

    #[test]
    fn report_columns() {
        let r = RunSummary {
            name: "cf3".into(),
            storage_bytes: 1000,
            fps: 12.5,
            miou: 0.9,
            accuracy: 0.95,
            gaussians: 321,
            donor_bytes: 23456,
        };
        assert_eq!(format!("{:.1}", r.compression_ratio()), "23.5");
        let csv = report_csv(&[r.clone()]);
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "cf3,1000,23.5,12.50,0.9000,0.9500,321"
        );
        assert!(report_table(&[r]).contains("321"));
    }
}
