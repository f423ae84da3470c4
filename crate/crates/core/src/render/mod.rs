//! Projection, depth-sorted alpha compositing and its reverse-mode gradient.

mod backward;
mod project;
mod raster;
pub mod sh;

pub use backward::render_backward;
pub use project::{project, sort_by_depth, Projected2DGaussian};
pub use raster::{alpha_at, composite, RenderOutput};
pub use sh::{eval_color, rgb_to_dc, ColorSample};

use crate::camera::{Camera, CameraMode};
use crate::error::Result;
use crate::gaussian::GaussianSet;

/// Rasterizer conventions. Defaults follow the 3DGS CUDA rasterizer.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterConfig {
    /// Upper clamp on a single α sample.
    pub alpha_clamp: f64,
    /// Samples with α below this are skipped entirely.
    pub alpha_skip: f64,
    /// Compositing stops once transmittance falls below this.
    pub t_min: f64,
    /// Added to the diagonal of projected pinhole covariances (px²).
    pub blur: f64,
    pub near_plane: f64,
    pub tile_size: usize,
    /// Process tiles on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            alpha_clamp: 0.999,
            alpha_skip: 1.0 / 255.0,
            t_min: 1e-4,
            blur: 0.3,
            near_plane: 0.01,
            tile_size: 16,
            parallel: true,
        }
    }
}

/// Direction used for view-dependent colour of Gaussian `i`.
pub(crate) fn view_direction(set: &GaussianSet, cam: &Camera, i: usize) -> [f64; 3] {
    match cam.mode {
        CameraMode::Identity2D => [0.0, 0.0, 1.0],
        CameraMode::Pinhole3D => {
            let c = cam.center();
            let p = set.position(i);
            [p[0] - c.x, p[1] - c.y, p[2] - c.z]
        }
    }
}

/// Projects, colours, sorts and composites `set` as seen from `cam`.
pub fn render(set: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    cam.validate()?;
    let mut projected = project(set, cam, cfg);
    sort_by_depth(&mut projected);
    let colors = projected
        .iter()
        .map(|p| {
            eval_color(
                set.color_coeffs(p.index),
                set.sh_degree,
                view_direction(set, cam, p.index),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    composite(projected, colors, cam, cfg)
}
