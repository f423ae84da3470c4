//! Camera list files for `splat render`.
//!
//! A JSON array; each entry is either
//! `{"mode": "identity2d", "width": 64, "height": 64}` or a pinhole camera
//! with `fx`, `fy`, optional `cx`/`cy` (image centre by default) and a
//! row-major 4×4 `world_to_camera` in OpenCV axes. `name` is optional and
//! becomes the output file stem.

use std::path::Path;

use nalgebra::Matrix4;
use serde::Deserialize;
use splat_mcmc::{Camera, CameraMode, Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraSpec {
    name: Option<String>,
    mode: CameraMode,
    width: usize,
    height: usize,
    fx: Option<f64>,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    world_to_camera: Option<[[f64; 4]; 4]>,
}

fn bad(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn load(path: &Path) -> Result<Vec<(Option<String>, Camera)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let specs: Vec<CameraSpec> = serde_json::from_str(&text).map_err(|e| bad(path, e))?;
    specs
        .into_iter()
        .map(|s| {
            let cam = match s.mode {
                CameraMode::Identity2D => Camera::identity_2d(s.width, s.height),
                CameraMode::Pinhole3D => {
                    let (Some(fx), Some(m)) = (s.fx, s.world_to_camera) else {
                        return Err(bad(path, "pinhole cameras need fx and world_to_camera"));
                    };
                    let w2c = Matrix4::from_fn(|r, c| m[r][c]);
                    let mut cam = Camera::pinhole(&w2c, fx, s.fy.unwrap_or(fx), s.width, s.height)
                        .map_err(|e| bad(path, e))?;
                    cam.cx = s.cx.unwrap_or(cam.cx);
                    cam.cy = s.cy.unwrap_or(cam.cy);
                    cam
                }
            };
            cam.validate().map_err(|e| bad(path, e))?;
            Ok((s.name, cam))
        })
        .collect()
}
