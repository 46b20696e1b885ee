//! Full pipeline on the synthetic room: lift, filter, compress, sparsify,
//! quantize and evaluate, ending with the summary table.
//!
//! cargo run --release --example end_to_end -- [output dir]

use std::path::PathBuf;

use cf3::autoencoder::TrainConfig;
use cf3::eval::{file_bytes, generate_synthetic, report_table, RunSummary, SynthSpec};
use cf3::pipeline::{evaluate_segmentation, measure_fps, run_all, PipelineConfig};
use cf3::quantize::QuantizeConfig;
use cf3::scene::save_scene;

fn main() -> cf3::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&dir).map_err(|e| cf3::Error::Format(e.to_string()))?;
    let spec = SynthSpec {
        jitter: 0.05,
        ..SynthSpec::default()
    };
    let synth = generate_synthetic(&spec, 7)?;
    let mut cfg = PipelineConfig {
        train: TrainConfig {
            batch_size: 256,
            ..TrainConfig::default()
        },
        quantize: Some(QuantizeConfig::default()),
        ..PipelineConfig::default()
    }
    .with_seed(7);
    cfg.sparsify.max_iterations = 1500;
    cfg.sparsify.prune_at = vec![250, 750];

    let out = run_all(&synth.scene, &synth.cameras, &synth.maps, &cfg)?;
    let decoder = out.training.model.to_f64();
    let render_cfg = &cfg.sparsify.render;

    let donor_path = dir.join("cf3_donor.ply");
    save_scene(&synth.scene, &donor_path)?;
    let donor_bytes = file_bytes(&donor_path)?;
    let bundle_path = dir.join("cf3_bundle.cfvq");
    let bundle = out.quantized.as_ref().expect("quantization enabled");
    bundle.save(&bundle_path)?;

    let latent_path = dir.join("cf3_latent.ply");
    save_scene(&out.latent, &latent_path)?;
    let sparse_path = dir.join("cf3_sparse.ply");
    save_scene(&out.sparse.scene, &sparse_path)?;

    let mut runs = Vec::new();
    for (name, scene, artifact) in [
        ("lifted latent", out.latent.clone(), &latent_path),
        ("sparse", out.sparse.scene.clone(), &sparse_path),
        ("sparse + vq", out.final_scene()?, &bundle_path),
    ] {
        let m = evaluate_segmentation(
            &scene,
            &decoder,
            &synth.cameras,
            &synth.labels,
            &synth.queries,
            &cfg.policy,
            render_cfg,
        )?;
        runs.push(RunSummary {
            name: name.into(),
            storage_bytes: file_bytes(artifact)?,
            fps: measure_fps(&scene, &synth.cameras, render_cfg)?,
            miou: m.miou,
            accuracy: m.accuracy,
            gaussians: scene.len(),
            donor_bytes,
        });
    }
    print!("{}", report_table(&runs));
    println!(
        "kept {:.1}% of {} donor gaussians",
        100.0 * out.sparse.scene.len() as f64 / synth.scene.len() as f64,
        synth.scene.len()
    );
    Ok(())
}
