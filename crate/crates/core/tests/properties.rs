use cf3::autoencoder::Autoencoder;
use cf3::eval::{
    generate_synthetic, map_to_donor, miou_accuracy, segment, Policy, QuerySet, SynthSpec,
};
use cf3::lifting::{lift, LiftConfig};
use cf3::quantize::{quantize_scene, QuantizeConfig, QuantizedScene};
use cf3::raster::{render, RenderConfig};
use cf3::scene::{
    load_scene, read_cffm, save_scene, write_cffm, Camera, FeatureMap, Gaussian, GaussianScene,
    RawGrid, SceneMetadata, Stage,
};
use cf3::sparsify::{cosine, mahalanobis, moment_match};
use cf3::spatial::KdTree;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Gaussian {
    let mut g = Gaussian {
        mean: std::array::from_fn(|_| rng.random_range(-0.8..0.8)),
        log_scale: std::array::from_fn(|_| rng.random_range(-2.5..-0.8)),
        rotation: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        opacity_logit: rng.random_range(-2.0..3.0),
        payload: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    g.normalize_rotation();
    g
}

fn random_scene(seed: u64, n: usize, dim: usize) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n).map(|_| random_gaussian(&mut rng, dim)).collect();
    GaussianScene::new(
        gaussians,
        dim,
        SceneMetadata {
            source: "prop".into(),
            stage: if dim == 3 {
                Stage::Latent
            } else {
                Stage::Lifted
            },
        },
    )
    .unwrap()
}

fn camera(seed: u64) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let eye = [
        3.0 * angle.cos(),
        rng.random_range(-1.0..1.0),
        3.0 * angle.sin(),
    ];
    Camera::look_at("v", eye, [0.0; 3], [0.0, -1.0, 0.0], 40, 36, 1.0)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn unit_queries(seed: u64, count: usize, dim: usize) -> QuerySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    QuerySet::new((0..count).map(|k| format!("q{k}")).collect(), vectors).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn render_ignores_scene_order(seed in any::<u64>(), n in 1usize..60) {
        let scene = random_scene(seed, n, 3);
        let cam = camera(seed);
        let cfg = RenderConfig::default();
        let mut shuffled = scene.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        for i in (1..n).rev() {
            shuffled.gaussians.swap(i, rng.random_range(0..=i));
        }
        let a = render(&scene, &cam, &cfg).unwrap();
        let b = render(&shuffled, &cam, &cfg).unwrap();
        prop_assert!(max_diff(&a.image, &b.image) < 1e-6);
        prop_assert!(max_diff(&a.depth, &b.depth) < 1e-6);
    }

    #[test]
    fn render_ignores_tile_size(seed in any::<u64>(), n in 1usize..60) {
        let scene = random_scene(seed, n, 4);
        let cam = camera(seed);
        let base = render(&scene, &cam, &RenderConfig::default()).unwrap();
        for tile_size in [8, 32] {
            let cfg = RenderConfig { tile_size, ..RenderConfig::default() };
            let other = render(&scene, &cam, &cfg).unwrap();
            prop_assert!(max_diff(&base.image, &other.image) < 1e-6);
            prop_assert!(max_diff(&base.depth, &other.depth) < 1e-6);
        }
    }

    #[test]
    fn transmittance_falls_strictly_along_each_pixel(seed in any::<u64>(), n in 1usize..40) {
        let scene = random_scene(seed, n, 3);
        let cam = camera(seed);
        let cfg = RenderConfig { weight_cutoff: 0.0, ..RenderConfig::default() }.capturing();
        let out = render(&scene, &cam, &cfg).unwrap();
        let weights = out.weights.as_ref().unwrap();
        let coverage = out.coverage().unwrap();
        for y in 0..out.height {
            for x in 0..out.width {
                let mut t = 1.0;
                for e in weights.pixel(x, y) {
                    let next = t - e.weight;
                    prop_assert!(e.weight > 0.0 && next < t);
                    t = next;
                }
                prop_assert!((t - (1.0 - coverage[y * out.width + x])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn merge_is_symmetric_and_opacity_grows(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_gaussian(&mut rng, 3);
        let b = random_gaussian(&mut rng, 3);
        let ab = moment_match(&a, &b);
        let ba = moment_match(&b, &a);
        prop_assert!((ab.covariance - ba.covariance).abs().max() < 1e-12);
        for k in 0..3 {
            prop_assert!((ab.gaussian.mean[k] - ba.gaussian.mean[k]).abs() < 1e-12);
            prop_assert!((ab.gaussian.payload[k] - ba.gaussian.payload[k]).abs() < 1e-12);
        }
        prop_assert!(ab.opacity > 0.0 && ab.opacity < 1.0);
        prop_assert!(ab.opacity >= a.opacity().max(b.opacity()) - 1e-15);
        prop_assert!((mahalanobis(&a, &b) - mahalanobis(&b, &a)).abs() < 1e-9 * mahalanobis(&a, &b).max(1.0));
        prop_assert!((cosine(&a.payload, &b.payload) - cosine(&b.payload, &a.payload)).abs() < 1e-15);
    }

    #[test]
    fn segmentation_is_scale_invariant(seed in any::<u64>(), k in 0.01f64..100.0) {
        let queries = unit_queries(seed, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let pixels: Vec<f64> = (0..6 * 200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = pixels.iter().map(|v| v * k).collect();
        for policy in [Policy::default(), Policy::Argmax { background: 0.0 }, Policy::PerQuery(vec![0.2; 4])] {
            prop_assert_eq!(
                segment(&pixels, 6, &queries, &policy).unwrap(),
                segment(&scaled, 6, &queries, &policy).unwrap()
            );
        }
    }

    #[test]
    fn miou_is_bounded_and_symmetric(pred in prop::collection::vec(1u32..5, 1..300), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<u32> = pred.iter().map(|p| if rng.random_bool(0.3) { rng.random_range(1..5) } else { *p }).collect();
        let labels = [1, 2, 3, 4];
        let a = miou_accuracy(&pred, &gt, &labels).unwrap();
        let b = miou_accuracy(&gt, &pred, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.miou));
        prop_assert!((0.0..=1.0).contains(&a.accuracy));
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        prop_assert_eq!(miou_accuracy(&gt, &gt, &labels).unwrap().miou, 1.0);
    }

    #[test]
    fn ply_round_trip_is_exact(seed in any::<u64>(), n in 1usize..50, dim in prop::sample::select(vec![3usize, 5, 16])) {
        let scene = random_scene(seed, n, dim);
        // The file stores f32; round through f32 first so equality is exact.
        let mut scene32 = scene.clone();
        for g in &mut scene32.gaussians {
            for v in g.mean.iter_mut().chain(g.log_scale.iter_mut()).chain(g.rotation.iter_mut()).chain(g.payload.iter_mut()) {
                *v = *v as f32 as f64;
            }
            g.opacity_logit = g.opacity_logit as f32 as f64;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        save_scene(&scene32, &path).unwrap();
        let loaded = load_scene(&path).unwrap();
        prop_assert_eq!(loaded.len(), n);
        prop_assert_eq!(loaded.payload_dim, dim);
        for (a, b) in loaded.gaussians.iter().zip(&scene32.gaussians) {
            prop_assert_eq!(&a.payload, &b.payload);
            prop_assert_eq!(a.mean, b.mean);
            prop_assert_eq!(a.log_scale, b.log_scale);
            prop_assert_eq!(a.opacity_logit, b.opacity_logit);
            for k in 0..4 {
                prop_assert!((a.rotation[k] - b.rotation[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn feature_map_round_trip_is_exact(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dir = tempfile::tempdir().unwrap();
        let raw_path = dir.path().join("raw.cffm");
        write_cffm(&raw_path, h, w, dim, &data).unwrap();
        prop_assert_eq!(read_cffm(&raw_path).unwrap(), RawGrid { height: h, width: w, dim, data: data.clone() });

        let map = FeatureMap::from_pixels(h, w, dim, data).unwrap();
        let path = dir.path().join("m.cffm");
        map.save(&path).unwrap();
        let loaded = FeatureMap::load(&path).unwrap();
        prop_assert_eq!(&loaded.masked, &map.masked);
        for (a, b) in loaded.data.iter().zip(&map.data) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        for px in loaded.data.chunks(dim) {
            let norm = px.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact(seed in any::<u64>(), dim in 4usize..20) {
        let model = Autoencoder::<f32>::new(dim, &[8, 5], seed).unwrap();
        prop_assert_eq!(Autoencoder::<f32>::from_bytes(&model.to_bytes()).unwrap(), model);
    }

    #[test]
    fn bundle_round_trip_is_exact(seed in any::<u64>(), n in 4usize..80, half in any::<bool>()) {
        let scene = random_scene(seed, n, 3);
        let cfg = QuantizeConfig { geometry_k: 16, latent_k: 8, iterations: 5, half_positions: half, seed };
        let bundle = quantize_scene(&scene, &cfg).unwrap();
        let bytes = bundle.to_bytes();
        prop_assert_eq!(bytes.len(), bundle.byte_size());
        prop_assert_eq!(QuantizedScene::from_bytes(&bytes).unwrap(), bundle);
    }

    #[test]
    fn kd_tree_matches_linear_scan(seed in any::<u64>(), n in 1usize..200, k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let tree = KdTree::new(&points);
        let query: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.2..1.2));
        let mut scan: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((0..3).map(|d| (p[d] - query[d]).powi(2)).sum(), i))
            .collect();
        scan.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let found: Vec<usize> = tree.nearest(query, k).iter().map(|nb| nb.index).collect();
        let expected: Vec<usize> = scan.iter().take(k).map(|s| s.1).collect();
        prop_assert_eq!(found, expected);
    }

    #[test]
    fn donor_mapping_matches_brute_force(seed in any::<u64>(), n in 3usize..40, m in 1usize..60) {
        let compact = random_scene(seed, n, 3);
        let donor = random_scene(seed.wrapping_add(7), m, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let features: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mapping = map_to_donor(&compact, &features, &donor).unwrap();
        for (g, &chosen) in donor.gaussians.iter().zip(&mapping) {
            let mut near: Vec<(f64, usize)> = compact
                .gaussians
                .iter()
                .enumerate()
                .map(|(i, c)| ((0..3).map(|d| (c.mean[d] - g.mean[d]).powi(2)).sum(), i))
                .collect();
            near.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let best = near
                .iter()
                .take(3)
                .map(|&(_, i)| (cosine(&g.payload, &features[i]), i))
                .fold((f64::NEG_INFINITY, usize::MAX), |acc, c| if c.0 > acc.0 || (c.0 == acc.0 && c.1 < acc.1) { c } else { acc });
            prop_assert_eq!(chosen, best.1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn lifting_scales_means_and_keeps_features(seed in any::<u64>(), k in 0.1f64..10.0) {
        let synth = generate_synthetic(&SynthSpec { views: 4, width: 32, height: 32, jitter: 0.05, ..SynthSpec::default() }, seed).unwrap();
        let scaled: Vec<FeatureMap> = synth
            .maps
            .iter()
            .map(|m| FeatureMap { data: m.data.iter().map(|v| (*v as f64 * k) as f32).collect(), ..m.clone() })
            .collect();
        let cfg = LiftConfig::default();
        let a = lift(&synth.scene, &synth.cameras, &synth.maps, &cfg).unwrap();
        let b = lift(&synth.scene, &synth.cameras, &scaled, &cfg).unwrap();
        prop_assert_eq!(&a.status, &b.status);
        for (x, y) in a.means.iter().zip(&b.means) {
            prop_assert!((x * k - y).abs() < 1e-5 * k.max(1.0));
        }
        prop_assert!(max_diff(&a.features, &b.features) < 1e-5);

        let mut order: Vec<usize> = (0..synth.cameras.len()).collect();
        order.reverse();
        let cams: Vec<Camera> = order.iter().map(|&v| synth.cameras[v].clone()).collect();
        let maps: Vec<FeatureMap> = order.iter().map(|&v| synth.maps[v].clone()).collect();
        let c = lift(&synth.scene, &cams, &maps, &cfg).unwrap();
        prop_assert!(max_diff(&a.features, &c.features) < 1e-6);
        prop_assert!(max_diff(&a.variance, &c.variance) < 1e-6);
    }

    #[test]
    fn synthesis_is_deterministic(seed in any::<u64>()) {
        let spec = SynthSpec { views: 3, width: 24, height: 24, jitter: 0.05, clone_fraction: 0.3, ..SynthSpec::default() };
        let a = generate_synthetic(&spec, seed).unwrap();
        let b = generate_synthetic(&spec, seed).unwrap();
        prop_assert_eq!(&a.scene, &b.scene);
        prop_assert_eq!(&a.labels, &b.labels);
        prop_assert!(a.maps.iter().zip(&b.maps).all(|(x, y)| x == y));
    }
}
