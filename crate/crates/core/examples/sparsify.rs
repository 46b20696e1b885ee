//! Prunes and merges a clone-duplicated synthetic room.
//!
//! cargo run --release --example sparsify -- [iterations]

use cf3::autoencoder::TrainConfig;
use cf3::eval::{generate_synthetic, SynthSpec};
use cf3::lifting::{lift, variance_filter, LiftConfig};
use cf3::pipeline::{feature_error, train_autoencoder};
use cf3::sparsify::{build_references, encode_scene, lifted_targets, run, SparsifyConfig};

fn main() -> cf3::Result<()> {
    let iterations = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(600);
    let spec = SynthSpec {
        clone_fraction: 1.0,
        ..SynthSpec::default()
    };
    let synth = generate_synthetic(&spec, 3)?;
    let field = variance_filter(
        &lift(
            &synth.scene,
            &synth.cameras,
            &synth.maps,
            &LiftConfig::default(),
        )?,
        1e-4,
    )?;
    let lifted = field.to_scene(&synth.scene)?;
    let train_cfg = TrainConfig {
        batch_size: 256,
        epochs: 60,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = train_autoencoder(&lifted, &train_cfg)?.model;
    let decoder = model.to_f64();
    let latent = encode_scene(&lifted, &model)?;

    let cfg = SparsifyConfig {
        max_iterations: iterations,
        prune_at: vec![iterations / 6, iterations / 2],
        seed: 3,
        ..SparsifyConfig::default()
    };
    let mut refs = build_references(&latent, &synth.cameras, Some(&decoder), &cfg.render)?;
    lifted_targets(&mut refs, &lifted, &synth.cameras, &cfg.render)?;
    let outcome = run(&latent, &synth.cameras, &refs, Some(&decoder), &cfg)?;
    for r in outcome.log.iter().filter(|r| r.merged + r.pruned > 0) {
        println!(
            "iteration {:>5}: {:>5} gaussians (merged {}, pruned {})",
            r.iteration, r.gaussian_count, r.merged, r.pruned
        );
    }
    let before = feature_error(&latent, &decoder, &lifted, &synth.cameras, &cfg.render)?;
    let after = feature_error(
        &outcome.scene,
        &decoder,
        &lifted,
        &synth.cameras,
        &cfg.render,
    )?;
    println!(
        "{} -> {} gaussians in {:.1}s; feature L1 {before:.5} -> {after:.5}",
        latent.len(),
        outcome.scene.len(),
        outcome.wall_time.as_secs_f64()
    );
    Ok(())
}
