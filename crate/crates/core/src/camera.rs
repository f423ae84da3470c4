use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraMode {
    /// Perspective camera looking down +z in camera space (OpenCV axes).
    Pinhole3D,
    /// Positions are pixel coordinates; used for 2D image fitting.
    Identity2D,
}

/// Pinhole intrinsics plus a world-to-camera rigid transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub mode: CameraMode,
}

impl Camera {
    pub fn identity_2d(width: usize, height: usize) -> Self {
        Camera {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width,
            height,
            mode: CameraMode::Identity2D,
        }
    }

    pub fn pinhole(
        world_to_camera: &Matrix4<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Camera {
            rotation: world_to_camera.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: world_to_camera.fixed_view::<3, 1>(0, 3).into_owned(),
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            mode: CameraMode::Pinhole3D,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Builds a camera from an OpenCV-convention camera-to-world pose.
    pub fn from_camera_to_world(
        c2w: &Matrix4<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let r = c2w.fixed_view::<3, 3>(0, 0).into_owned();
        let t = c2w.fixed_view::<3, 1>(0, 3).into_owned();
        let rt = r.transpose();
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rt * t));
        Self::pinhole(&w2c, fx, fy, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
