use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::RasterConfig;
use crate::camera::{Camera, CameraMode};
use crate::gaussian::GaussianSet;

/// A Gaussian projected onto the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected2DGaussian {
    pub index: usize,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Camera-space z in pinhole mode; the source index in 2D mode.
    pub depth: f64,
    pub opacity: f64,
    /// Footprint half-extents in pixels; outside them α is below the skip
    /// threshold.
    pub radius: Vector2<f64>,
    /// Exponent above which α is certainly below the skip threshold; lets
    /// the rasterizer reject samples without evaluating `exp`.
    pub(crate) skip_power: f64,
}

/// Intermediate values of the projection, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ProjectionCache {
    pub cam_point: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub cov3: Matrix3<f64>,
}

/// Projects every Gaussian; culls those behind the near plane, those with a
/// degenerate footprint and those whose opacity can never reach `alpha_skip`.
pub fn project(set: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Vec<Projected2DGaussian> {
    project_with_cache(set, cam, cfg)
        .into_iter()
        .map(|(p, _)| p)
        .collect()
}

pub(crate) fn project_with_cache(
    set: &GaussianSet,
    cam: &Camera,
    cfg: &RasterConfig,
) -> Vec<(Projected2DGaussian, ProjectionCache)> {
    let mut out = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let opacity = set.opacity(i);
        if opacity < cfg.alpha_skip {
            continue;
        }
        let Ok(cov3) = set.covariance(i) else {
            continue;
        };
        let mu = Vector3::from(set.position(i));
        let (mean, cov, depth, cam_point, jacobian) = match cam.mode {
            CameraMode::Identity2D => {
                let cov = cov3.fixed_view::<2, 2>(0, 0).into_owned();
                let j = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
                (Vector2::new(mu.x, mu.y), cov, i as f64, mu, j)
            }
            CameraMode::Pinhole3D => {
                let t = cam.rotation * mu + cam.translation;
                if t.z <= cfg.near_plane {
                    continue;
                }
                let (x, y, z) = (t.x, t.y, t.z);
                let mean = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
                let j = Matrix2x3::new(
                    cam.fx / z,
                    0.0,
                    -cam.fx * x / (z * z),
                    0.0,
                    cam.fy / z,
                    -cam.fy * y / (z * z),
                );
                let jw = j * cam.rotation;
                let mut cov = jw * cov3 * jw.transpose();
                cov[(0, 0)] += cfg.blur;
                cov[(1, 1)] += cfg.blur;
                (mean, cov, z, t, j)
            }
        };
        let cov = (cov + cov.transpose()) * 0.5;
        let det = cov.determinant();
        if !(det > 0.0) || !det.is_finite() || cov[(0, 0)] <= 0.0 {
            continue;
        }
        let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        // o·exp(-m²/2) < alpha_skip whenever m > kappa
        let log_ratio = (opacity / cfg.alpha_skip).ln();
        let kappa = (2.0 * log_ratio).max(0.0).sqrt();
        let radius = Vector2::new(kappa * cov[(0, 0)].sqrt(), kappa * cov[(1, 1)].sqrt());
        out.push((
            Projected2DGaussian {
                index: i,
                mean,
                cov,
                conic,
                depth,
                opacity,
                radius,
                skip_power: log_ratio + 1e-9 * log_ratio.abs().max(1.0),
            },
            ProjectionCache {
                cam_point,
                jacobian,
                cov3,
            },
        ));
    }
    out
}

/// Sorts by increasing depth, ties by ascending source index.
pub fn sort_by_depth(projected: &mut [Projected2DGaussian]) {
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
}
