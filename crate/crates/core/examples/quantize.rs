//! Vector-quantizes an encoded synthetic room and measures the storage and
//! the change in rendered features.

use cf3::autoencoder::TrainConfig;
use cf3::eval::{generate_synthetic, SynthSpec};
use cf3::lifting::{lift, variance_filter, LiftConfig};
use cf3::pipeline::train_autoencoder;
use cf3::quantize::{dequantize, quantize_scene, QuantizeConfig};
use cf3::raster::{render, RenderConfig};
use cf3::sparsify::encode_scene;

fn main() -> cf3::Result<()> {
    let synth = generate_synthetic(&SynthSpec::default(), 4)?;
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
        epochs: 40,
        seed: 4,
        ..TrainConfig::default()
    };
    let model = train_autoencoder(&lifted, &train_cfg)?.model;
    let latent = encode_scene(&lifted, &model)?;

    let render_cfg = RenderConfig::default();
    for (geometry_k, latent_k) in [(64, 16), (256, 64), (1024, 256)] {
        let cfg = QuantizeConfig {
            geometry_k,
            latent_k,
            seed: 4,
            ..QuantizeConfig::default()
        };
        let bundle = quantize_scene(&latent, &cfg)?;
        let restored = dequantize(&bundle)?;
        let (mut diff, mut total) = (0.0, 0.0);
        for cam in &synth.cameras {
            let a = render(&latent, cam, &render_cfg)?.image;
            let b = render(&restored, cam, &render_cfg)?.image;
            diff += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
            total += a.iter().map(|x| x.abs()).sum::<f64>();
        }
        println!(
            "K = {geometry_k:>4}/{latent_k:<3}  {:>7} bytes  rendered drift {:.2}%",
            bundle.byte_size(),
            100.0 * diff / total
        );
    }
    Ok(())
}
