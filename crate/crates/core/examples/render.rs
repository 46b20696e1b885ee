//! Renders a few coloured Gaussians and writes the image as PNG.
//!
//! cargo run --example render -- out.png

use cf3::raster::{render, RenderConfig};
use cf3::scene::{logit, Camera, Gaussian, GaussianScene, SceneMetadata};

fn blob(mean: [f64; 3], scale: f64, color: [f64; 3]) -> Gaussian {
    Gaussian {
        mean,
        log_scale: [scale.ln(); 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: logit(0.9),
        payload: color.to_vec(),
    }
}

fn main() -> cf3::Result<()> {
    let gaussians = vec![
        blob([-0.4, 0.0, 0.0], 0.25, [0.9, 0.2, 0.2]),
        blob([0.4, 0.0, 0.3], 0.3, [0.2, 0.8, 0.3]),
        blob([0.0, 0.35, -0.3], 0.2, [0.2, 0.3, 0.9]),
    ];
    let scene = GaussianScene::new(gaussians, 3, SceneMetadata::default())?;
    let cam = Camera::look_at(
        "front",
        [0.0, 0.0, 3.0],
        [0.0; 3],
        [0.0, 1.0, 0.0],
        128,
        128,
        1.0,
    );
    let out = render(&scene, &cam, &RenderConfig::default())?;

    let covered = out.depth.iter().filter(|d| **d > 0.0).count();
    println!(
        "{}x{} image, {covered} covered pixels",
        out.width, out.height
    );

    if let Some(path) = std::env::args().nth(1) {
        let bytes: Vec<u8> = out
            .image
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(out.width as u32, out.height as u32, bytes)
            .expect("buffer matches image size")
            .save(&path)
            .expect("png written");
        println!("wrote {path}");
    }
    Ok(())
}
