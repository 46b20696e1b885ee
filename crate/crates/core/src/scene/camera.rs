use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera pose: `x_cam = R · x_world + t`.
///
/// Camera space is x right, y down, z forward. Pixel `(u, v)` has its center
/// at `(u + 0.5, v + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    #[serde(rename = "t")]
    pub translation: [f64; 3],
}

impl Camera {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
        ]
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation_matrix().transpose() * Vector3::from(self.translation));
        [c.x, c.y, c.z]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera at `eye` looking at `target`, with `up` the approximate world up.
    /// Principal point at the image center; `fov_x` in radians.
    pub fn look_at(
        id: impl Into<String>,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: u32,
        height: u32,
        fov_x: f64,
    ) -> Self {
        let eye_v = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye_v).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        // image y points down
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye_v);
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Camera {
            id: id.into(),
            width,
            height,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Format(format!("camera {}: {msg}", self.id)));
        let all_finite = self
            .rotation
            .iter()
            .chain(&self.translation)
            .chain([&self.fx, &self.fy, &self.cx, &self.cy])
            .all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite parameter".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("zero-sized image".into());
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return bad(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            ));
        }
        if !(self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64)
        {
            return bad(format!(
                "principal point ({}, {}) outside image",
                self.cx, self.cy
            ));
        }
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-5 {
            return bad(format!("rotation not orthonormal (error {err:.2e})"));
        }
        Ok(())
    }
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cameras: Vec<Camera> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("camera json: {e}")))?;
    for cam in &cameras {
        cam.validate()?;
    }
    Ok(cameras)
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(cameras).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_places_target_on_axis() {
        let cam = Camera::look_at(
            "a",
            [3.0, 1.0, 2.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            64,
            48,
            1.0,
        );
        cam.validate().unwrap();
        let p = cam.to_camera([0.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!((p[2] - 14f64.sqrt()).abs() < 1e-12);
        let c = cam.center();
        for (a, b) in c.iter().zip([3.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        // world up maps to image up (negative y)
        let above = cam.to_camera([0.0, 1.0, 0.0]);
        assert!(above[1] < 0.0);
    }

    #[test]
    fn json_field_names() {
        let text = r#"[{"id":"v0","width":4,"height":4,"fx":2.0,"fy":2.0,"cx":2.0,"cy":2.0,
            "R":[1,0,0,0,1,0,0,0,1],"t":[0,0,1]}]"#;
        let cams: Vec<Camera> = serde_json::from_str(text).unwrap();
        cams[0].validate().unwrap();
        assert_eq!(cams[0].translation, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut cam = Camera::look_at("a", [0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 8, 8, 1.0);
        cam.rotation[0] = 1.1;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn rejects_principal_point_outside() {
        let mut cam = Camera::look_at("a", [0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 8, 8, 1.0);
        cam.cx = 8.0;
        assert!(cam.validate().is_err());
    }
}
