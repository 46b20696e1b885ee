use super::*;
use crate::scene::logit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(id: &str, eye: [f64; 3]) -> Camera {
    Camera::look_at(id, eye, [0.0; 3], [0.0, -1.0, 0.0], 24, 20, 0.9)
}

fn latent_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let gaussians = (0..n)
        .map(|_| {
            let mut g = Gaussian {
                mean: std::array::from_fn(|_| rng.random_range(-0.6..0.6)),
                log_scale: std::array::from_fn(|_| rng.random_range(-1.8..-1.0)),
                rotation: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                opacity_logit: rng.random_range(-0.5..2.0),
                payload: (0..3).map(|_| rng.random_range(0.05..0.95)).collect(),
            };
            g.normalize_rotation();
            g
        })
        .collect();
    GaussianScene::new(
        gaussians,
        3,
        SceneMetadata {
            source: "test".into(),
            stage: Stage::Latent,
        },
    )
    .unwrap()
}

/// Sequential front-to-back blend of every splat over one pixel, without
/// tiles. Returns (payload, depth, weights by gaussian).
fn blend_oracle(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RenderConfig,
    x: usize,
    y: usize,
) -> (Vec<f64>, f64, Vec<f64>) {
    let splats = project_scene(&scene.gaussians, cam, cfg).unwrap();
    let mut color = vec![0.0; scene.payload_dim];
    let mut depth = 0.0;
    let mut weights = vec![0.0; scene.len()];
    let mut t = 1.0;
    for s in &splats {
        if !s.bbox.contains(x, y) {
            continue;
        }
        let (a, _) = s.raw_alpha_at(x, y);
        let a = a.min(cfg.alpha_max);
        if a < cfg.alpha_min {
            continue;
        }
        let w = a * t;
        for (c, p) in color
            .iter_mut()
            .zip(&scene.gaussians[s.gaussian_index].payload)
        {
            *c += w * p;
        }
        depth += w * s.depth_value;
        weights[s.gaussian_index] += w;
        t *= 1.0 - a;
        if t < cfg.transmittance_min {
            break;
        }
    }
    (color, depth, weights)
}

fn small_decoder() -> Autoencoder<f64> {
    Autoencoder::<f32>::new(5, &[8], 3).unwrap().to_f64()
}

#[test]
fn single_gaussian_reference_depth() {
    let cam = Camera {
        cx: 12.5,
        cy: 10.5,
        ..camera("v", [0.0, 0.0, -3.0])
    };
    let g = Gaussian {
        mean: [0.0; 3],
        log_scale: [-1.0; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: logit(0.6),
        payload: vec![0.2, 0.4, 0.6],
    };
    let scene = GaussianScene::new(vec![g], 3, SceneMetadata::default()).unwrap();
    let cfg = RenderConfig::default();
    let refs = build_references(&scene, &[cam.clone()], None, &cfg).unwrap();
    let (_, _, weights) = blend_oracle(&scene, &cam, &cfg, 12, 10);
    let r = &refs.views[0];
    let depth = r.depth[10 * 24 + 12];
    assert!((depth - weights[0] * 3.0).abs() < 1e-12);
    assert!((weights[0] - 0.6).abs() < 1e-12);
}

#[test]
fn references_match_blend_oracle_and_repeat() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scene = latent_scene(&mut rng, 30);
    let cams = [
        camera("a", [0.4, -0.3, -3.0]),
        camera("b", [-2.5, 0.2, -1.5]),
    ];
    let cfg = RenderConfig::default();
    let dec = small_decoder();
    let refs = build_references(&scene, &cams, Some(&dec), &cfg).unwrap();
    assert_eq!(
        refs,
        build_references(&scene, &cams, Some(&dec), &cfg).unwrap()
    );
    for (cam, r) in cams.iter().zip(&refs.views) {
        for y in 0..20 {
            for x in 0..24 {
                let (c, d, _) = blend_oracle(&scene, cam, &cfg, x, y);
                let p = y * 24 + x;
                for k in 0..3 {
                    assert!((r.latent[p * 3 + k] - c[k]).abs() < 1e-5);
                }
                assert!((r.depth[p] - d).abs() < 1e-5);
                let decoded = dec.decode(&r.latent[p * 3..p * 3 + 3]).unwrap();
                assert_eq!(&r.decoded.as_ref().unwrap()[p * 5..p * 5 + 5], &decoded[..]);
            }
        }
    }
}

#[test]
fn frozen_state_has_zero_loss_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = latent_scene(&mut rng, 20);
    let cam = camera("a", [0.4, -0.3, -3.0]);
    let cfg = RenderConfig::default();
    let dec = small_decoder();
    let refs = build_references(&scene, &[cam.clone()], Some(&dec), &cfg).unwrap();
    let loss = view_loss(&scene, &cam, &refs.views[0], Some(&dec), 0.1, &cfg).unwrap();
    assert_eq!(loss.feature, 0.0);
    assert_eq!(loss.depth, 0.0);
    for g in &loss.grads {
        assert!(flatten(g).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn depth_weight_scales_depth_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = latent_scene(&mut rng, 20);
    let moved = latent_scene(&mut rng, 20);
    let cam = camera("a", [0.4, -0.3, -3.0]);
    let cfg = RenderConfig::default();
    let refs = build_references(&scene, &[cam.clone()], None, &cfg).unwrap();
    let a = view_loss(&moved, &cam, &refs.views[0], None, 0.1, &cfg).unwrap();
    let b = view_loss(&moved, &cam, &refs.views[0], None, 0.2, &cfg).unwrap();
    assert!(a.depth > 0.0);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.total, a.feature + 0.1 * a.depth);
    assert_eq!(b.total, b.feature + 0.2 * b.depth);
    assert_eq!(0.2 * b.depth, 2.0 * (0.1 * a.depth));
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frozen = latent_scene(&mut rng, 5);
    let mut state = frozen.clone();
    for g in &mut state.gaussians {
        for p in &mut g.payload {
            *p += rng.random_range(-0.2..0.2);
        }
    }
    let cam = camera("a", [0.4, -0.3, -3.0]);
    let cfg = RenderConfig::default();
    let dec = small_decoder();
    let refs = build_references(&frozen, &[cam.clone()], Some(&dec), &cfg).unwrap();
    let loss =
        |s: &GaussianScene| view_loss(s, &cam, &refs.views[0], Some(&dec), 0.1, &cfg).unwrap();
    let base = loss(&state);
    let h = 1e-7;
    let mut checked = 0;
    for i in 0..state.len() {
        for k in 0..3 {
            let mut plus = state.clone();
            plus.gaussians[i].payload[k] += h;
            let mut minus = state.clone();
            minus.gaussians[i].payload[k] -= h;
            let fd = (loss(&plus).total - loss(&minus).total) / (2.0 * h);
            let an = base.grads[i].payload[k];
            if an.abs() < 1e-9 && fd.abs() < 1e-9 {
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(
                rel < 1e-3,
                "gaussian {i} channel {k}: fd {fd} analytic {an}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 9);
}

#[test]
fn prune_removes_invisible_and_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut scene = latent_scene(&mut rng, 40);
    scene.gaussians[7].mean = [0.0, 0.0, -10.0];
    let cams = [
        camera("a", [0.4, -0.3, -3.0]),
        camera("b", [-2.5, 0.2, -1.5]),
    ];
    let cfg = RenderConfig::default();

    let mut contrib = vec![0.0; scene.len()];
    for cam in &cams {
        for y in 0..20 {
            for x in 0..24 {
                let (_, _, w) = blend_oracle(&scene, cam, &cfg, x, y);
                for (c, v) in contrib.iter_mut().zip(w) {
                    // Captured weights stop at the cutoff.
                    if v >= cfg.weight_cutoff {
                        *c += v;
                    }
                }
            }
        }
    }
    assert_eq!(contrib[7], 0.0);
    let (survivors, keep) = prune(&scene.gaussians, &cams, 0.25, &cfg).unwrap();
    let expected: Vec<bool> = contrib.iter().map(|c| *c >= 0.25).collect();
    assert_eq!(keep, expected);
    assert!(!keep[7]);
    assert_eq!(survivors.len(), expected.iter().filter(|k| **k).count());

    let (same, keep) = prune(&scene.gaussians, &cams, 0.0, &cfg).unwrap();
    assert_eq!(same, scene.gaussians);
    assert!(keep.iter().all(|k| *k));

    let err = prune(&scene.gaussians, &cams, 1e9, &cfg).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
}

#[test]
fn disabled_run_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scene = latent_scene(&mut rng, 25);
    let cams = [
        camera("a", [0.4, -0.3, -3.0]),
        camera("b", [-2.5, 0.2, -1.5]),
    ];
    let cfg = SparsifyConfig {
        max_iterations: 20,
        merge: false,
        prune_at: vec![],
        learning_rates: LearningRates::zero(),
        ..SparsifyConfig::default()
    };
    let refs = build_references(&scene, &cams, None, &cfg.render).unwrap();
    let out = run(&scene, &cams, &refs, None, &cfg).unwrap();
    assert_eq!(out.scene.gaussians, scene.gaussians);
    assert_eq!(out.log.len(), 20);
    assert!(out.stopped.is_none());
}

#[test]
fn cloned_scene_halves_and_count_never_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let base = latent_scene(&mut rng, 30);
    let mut gaussians = Vec::new();
    for g in &base.gaussians {
        gaussians.push(g.clone());
        gaussians.push(g.clone());
    }
    let scene = GaussianScene::new(gaussians, 3, base.metadata.clone()).unwrap();
    let cams = [
        camera("a", [0.4, -0.3, -3.0]),
        camera("b", [-2.5, 0.2, -1.5]),
    ];
    let dec = small_decoder();
    let cfg = SparsifyConfig {
        max_iterations: 100,
        prune_at: vec![],
        ..SparsifyConfig::default()
    };
    let refs = build_references(&scene, &cams, Some(&dec), &cfg.render).unwrap();
    let out = run(&scene, &cams, &refs, Some(&dec), &cfg).unwrap();
    assert!(
        out.scene.len() * 100 <= scene.len() * 55,
        "{} of {}",
        out.scene.len(),
        scene.len()
    );
    let mut last = scene.len();
    for r in &out.log {
        assert!(r.gaussian_count <= last);
        last = r.gaussian_count;
    }
    assert_eq!(out.log[49].merged, 30);
}

#[test]
fn progress_csv_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("progress.csv");
    let log = vec![IterationRecord {
        iteration: 1,
        feature_loss: 0.5,
        depth_loss: 0.25,
        gaussian_count: 10,
        merged: 2,
        pruned: 0,
    }];
    write_progress_csv(&log, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "iteration,feature_loss,depth_loss,gaussian_count,merged,pruned"
    );
    assert!(lines[1].starts_with("1,5.00000000e-1,"));
    assert!(lines[1].ends_with(",10,2,0"));
}

#[test]
fn config_validation() {
    assert!(SparsifyConfig::default().validate().is_ok());
    for bad in [
        SparsifyConfig {
            merge_interval: 0,
            ..SparsifyConfig::default()
        },
        SparsifyConfig {
            similarity_threshold: 0.0,
            ..SparsifyConfig::default()
        },
        SparsifyConfig {
            gradient_momentum: 1.0,
            ..SparsifyConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

fn feature_scene(latent: &GaussianScene, rng: &mut ChaCha8Rng, dim: usize) -> GaussianScene {
    let payloads = (0..latent.len())
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    latent.with_payloads(payloads, dim, Stage::Lifted).unwrap()
}

#[test]
fn lifted_targets_match_blend_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let scene = latent_scene(&mut rng, 25);
    let lifted = feature_scene(&scene, &mut rng, 5);
    let cams = [
        camera("a", [0.4, -0.3, -3.0]),
        camera("b", [-2.5, 0.2, -1.5]),
    ];
    let cfg = RenderConfig::default();
    let dec = small_decoder();
    let plain = build_references(&scene, &cams, Some(&dec), &cfg).unwrap();
    let mut refs = plain.clone();
    lifted_targets(&mut refs, &lifted, &cams, &cfg).unwrap();
    for ((cam, r), p) in cams.iter().zip(&refs.views).zip(&plain.views) {
        assert_eq!(r.latent, p.latent);
        assert_eq!(r.depth, p.depth);
        let target = r.decoded.as_ref().unwrap();
        for y in 0..20 {
            for x in 0..24 {
                let (c, _, _) = blend_oracle(&lifted, cam, &cfg, x, y);
                let p = y * 24 + x;
                for k in 0..5 {
                    assert!((target[p * 5 + k] - c[k]).abs() < 1e-5);
                }
            }
        }
    }
    assert!(lifted_targets(&mut refs, &lifted, &cams[..1], &cfg).is_err());
}

#[test]
fn lifted_target_loss_is_decoded_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let scene = latent_scene(&mut rng, 20);
    let lifted = feature_scene(&scene, &mut rng, 5);
    let cam = camera("a", [0.4, -0.3, -3.0]);
    let cfg = RenderConfig::default();
    let dec = small_decoder();
    let mut refs = build_references(&scene, &[cam.clone()], Some(&dec), &cfg).unwrap();
    lifted_targets(&mut refs, &lifted, &[cam.clone()], &cfg).unwrap();
    let loss = view_loss(&scene, &cam, &refs.views[0], Some(&dec), 0.1, &cfg).unwrap();
    let latent = &refs.views[0].latent;
    let target = refs.views[0].decoded.as_ref().unwrap();
    let mut sum = 0.0;
    for p in 0..24 * 20 {
        let decoded = dec.decode(&latent[p * 3..p * 3 + 3]).unwrap();
        for k in 0..5 {
            sum += (decoded[k] - target[p * 5 + k]).abs();
        }
    }
    assert!((loss.feature - sum / (24.0 * 20.0 * 5.0)).abs() < 1e-12);
    assert_eq!(loss.depth, 0.0);
    assert!(loss
        .grads
        .iter()
        .any(|g| g.payload.iter().any(|v| *v != 0.0)));

    let wrong = feature_scene(&scene, &mut rng, 4);
    lifted_targets(&mut refs, &wrong, &[cam.clone()], &cfg).unwrap();
    assert!(view_loss(&scene, &cam, &refs.views[0], Some(&dec), 0.1, &cfg).is_err());
}
