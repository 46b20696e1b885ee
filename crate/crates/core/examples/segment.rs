//! Open-vocabulary style segmentation: renders the latent field, decodes
//! it, and labels every pixel by its most similar query.

use cf3::autoencoder::TrainConfig;
use cf3::eval::{generate_synthetic, segment, Policy, SynthSpec};
use cf3::lifting::{lift, variance_filter, LiftConfig};
use cf3::pipeline::{evaluate_segmentation, render_decoded, train_autoencoder};
use cf3::raster::RenderConfig;
use cf3::sparsify::encode_scene;

fn main() -> cf3::Result<()> {
    let spec = SynthSpec {
        jitter: 0.05,
        ..SynthSpec::default()
    };
    let synth = generate_synthetic(&spec, 5)?;
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
        epochs: 100,
        seed: 5,
        ..TrainConfig::default()
    };
    let model = train_autoencoder(&lifted, &train_cfg)?.model;
    let decoder = model.to_f64();
    let latent = encode_scene(&lifted, &model)?;

    let render_cfg = RenderConfig::default();
    let policy = Policy::default();
    let decoded = render_decoded(&latent, &synth.cameras[0], &decoder, &render_cfg)?;
    let labels = segment(&decoded, decoder.input_dim(), &synth.queries, &policy)?;
    let width = synth.cameras[0].width as usize;
    println!("view 0 labels (every 4th pixel):");
    for row in labels.chunks(width).step_by(4) {
        let line: String = row
            .iter()
            .step_by(4)
            .map(|&l| char::from_digit(l, 10).unwrap_or('?'))
            .collect();
        println!("  {line}");
    }
    println!("queries: {}", synth.queries.names.join(", "));

    let metrics = evaluate_segmentation(
        &latent,
        &decoder,
        &synth.cameras,
        &synth.labels,
        &synth.queries,
        &policy,
        &render_cfg,
    )?;
    println!(
        "all views: mIoU {:.3}, accuracy {:.3}",
        metrics.miou, metrics.accuracy
    );
    Ok(())
}
