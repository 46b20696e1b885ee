//! Trains the feature autoencoder on lifted features of the synthetic room
//! and reports how well decoded latents reproduce the inputs.

use cf3::autoencoder::TrainConfig;
use cf3::eval::{generate_synthetic, SynthSpec};
use cf3::lifting::{lift, variance_filter, LiftConfig};
use cf3::pipeline::{feature_rows, train_autoencoder};
use cf3::sparsify::cosine;

fn main() -> cf3::Result<()> {
    let synth = generate_synthetic(&SynthSpec::default(), 2)?;
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

    let cfg = TrainConfig {
        batch_size: 256,
        epochs: 100,
        seed: 2,
        ..TrainConfig::default()
    };
    let outcome = train_autoencoder(&lifted, &cfg)?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate().step_by(20) {
        println!("epoch {epoch:>3}  loss {loss:.5}");
    }

    let rows = feature_rows(&lifted);
    let latents = outcome.model.encode_batch(rows.view())?;
    let decoded = outcome.model.decode_batch(latents.view())?;
    let mean_cos = rows
        .outer_iter()
        .zip(decoded.outer_iter())
        .map(|(a, b)| {
            let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            cosine(&a, &b)
        })
        .sum::<f64>()
        / rows.nrows() as f64;
    println!(
        "{} parameters, mean reconstruction cosine {mean_cos:.4}",
        outcome.model.parameter_count()
    );
    Ok(())
}
