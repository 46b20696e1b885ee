//! Lifts the synthetic room's feature maps onto its Gaussians and checks
//! each lifted feature against the label it was generated from.

use cf3::eval::{generate_synthetic, SynthSpec};
use cf3::lifting::{lift, variance_filter, LiftConfig};
use cf3::sparsify::cosine;

fn main() -> cf3::Result<()> {
    let synth = generate_synthetic(&SynthSpec::default(), 1)?;
    let field = lift(
        &synth.scene,
        &synth.cameras,
        &synth.maps,
        &LiftConfig::default(),
    )?;
    let field = variance_filter(&field, 1e-4)?;

    let kept = field.kept_indices();
    let cosines: Vec<f64> = kept
        .iter()
        .map(|&i| {
            let label = synth.gaussian_labels[i] as usize;
            cosine(field.feature(i), &synth.queries.vectors[label - 1])
        })
        .collect();
    let worst = cosines.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    println!("kept {} of {} gaussians", kept.len(), synth.scene.len());
    println!("cosine to label feature: mean {mean:.4}, worst {worst:.4}");
    Ok(())
}
