use nalgebra::{Matrix4, Rotation3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::camera::{Camera, CameraMode};
use crate::gaussian::{logit, GaussianSet};
use crate::img::Image;
use crate::relocate::RelocationPlan;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// A random scene of `n` Gaussians that fills a `width × height` view.
///
/// In 2D the Gaussians are spread over the image with footprints of one to
/// a few pixels. In pinhole mode they sit 2 to 6 units in front of a
/// slightly rotated camera.
pub fn random_scene<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    mode: CameraMode,
    width: usize,
    height: usize,
    sh_degree: u8,
) -> (GaussianSet, Camera) {
    let (w, h) = (width as f64, height as f64);
    let cam = match mode {
        CameraMode::Identity2D => Camera::identity_2d(width, height),
        CameraMode::Pinhole3D => {
            let rot = Rotation3::from_euler_angles(
                0.1 * normal(rng),
                0.1 * normal(rng),
                0.1 * normal(rng),
            );
            let mut w2c = Matrix4::identity();
            w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
            w2c[(0, 3)] = 0.2 * normal(rng);
            w2c[(1, 3)] = 0.2 * normal(rng);
            Camera::pinhole(&w2c, 1.2 * w, 1.2 * w, width, height).expect("valid focal length")
        }
    };
    let mut set = GaussianSet::with_capacity(n, sh_degree);
    let k = set.coeffs_per_gaussian();
    for _ in 0..n {
        let (pos, raw) = match mode {
            CameraMode::Identity2D => (
                [rng.random_range(-2.0..w + 1.0), rng.random_range(-2.0..h + 1.0), 0.0],
                [
                    rng.random_range(0.6f64..3.0).ln(),
                    rng.random_range(0.6f64..3.0).ln(),
                    rng.random_range(0.5f64..2.0).ln(),
                ],
            ),
            CameraMode::Pinhole3D => {
                let z = rng.random_range(2.0..6.0);
                let cam_pt = nalgebra::Vector3::new(
                    rng.random_range(-0.55..0.55) * z * w / cam.fx,
                    rng.random_range(-0.55..0.55) * z * h / cam.fy,
                    z,
                );
                let world = cam.rotation.transpose() * (cam_pt - cam.translation);
                (
                    [world.x, world.y, world.z],
                    std::array::from_fn(|_| (rng.random_range(0.04f64..0.2) * z).ln()),
                )
            }
        };
        let q = [normal(rng), normal(rng), normal(rng), normal(rng)];
        let o = rng.random_range(0.05..0.95);
        let dc = std::array::from_fn(|_| 0.8 * normal(rng));
        set.push(pos, raw, q, o, dc).expect("capacity reserved");
        let start = set.colors.len() - 3 * k;
        for c in &mut set.colors[start + 3..] {
            *c = 0.3 * normal(rng);
        }
    }
    (set, cam)
}

/// Uniform random RGB image.
pub fn random_target<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Image {
    let data = (0..width * height * 3).map(|_| rng.random()).collect();
    Image::from_data(width, height, data).expect("sized buffer")
}

/// Every source takes all parameters of its target; nothing is adjusted.
pub fn naive_clone(set: &GaussianSet, plan: &RelocationPlan) -> GaussianSet {
    let mut out = set.clone();
    for &(src, target) in &plan.assignments {
        out.copy_slot(target, src);
    }
    out
}

/// Targets and sources get the opacity that preserves the centre value;
/// covariances are left as they were.
pub fn opacity_only_clone(set: &GaussianSet, plan: &RelocationPlan) -> GaussianSet {
    let mut out = set.clone();
    for (&target, &n) in &plan.counts {
        let o = set.opacity(target);
        out.raw_opacities[target] = logit(1.0 - (1.0 - o).powf(1.0 / n as f64));
    }
    for &(src, target) in &plan.assignments {
        out.copy_slot(target, src);
    }
    out
}

/// Procedural test picture: a two-tone gradient backdrop with soft-edged
/// discs, a rotated ellipse and a Gaussian blob. Deterministic for a given
/// size; features scale with the image.
pub fn test_image(width: usize, height: usize) -> Image {
    let (w, h) = (width as f64, height as f64);
    let s = w.min(h) / 64.0;
    // coverage of a shape whose signed distance is `d` (negative inside)
    let edge = |d: f64| 1.0 / (1.0 + (d / (0.6 * s.max(0.5))).exp());
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let t = (fx / w + fy / h) / 2.0;
            let mut c = [0.15 + 0.55 * t, 0.2 + 0.4 * t, 0.35 + 0.05 * t];
            let mut blend = |cover: f64, col: [f64; 3]| {
                for ch in 0..3 {
                    c[ch] += cover * (col[ch] - c[ch]);
                }
            };
            let blob = (-((fx - 16.0 * s).powi(2) + (fy - 48.0 * s).powi(2)) / (2.0 * (6.0 * s).powi(2))).exp();
            blend(0.8 * blob, [0.1, 0.3, 0.9]);
            let r = ((fx - 20.0 * s).powi(2) + (fy - 22.0 * s).powi(2)).sqrt();
            blend(edge(r - 10.0 * s), [0.85, 0.2, 0.15]);
            let (dx, dy) = (fx - 44.0 * s, fy - 40.0 * s);
            let (ca, sa) = (0.5f64.cos(), 0.5f64.sin());
            let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
            let q = ((u / (14.0 * s)).powi(2) + (v / (7.0 * s)).powi(2)).sqrt();
            blend(edge((q - 1.0) * 7.0 * s), [0.2, 0.75, 0.3]);
            let r2 = ((fx - 46.0 * s).powi(2) + (fy - 14.0 * s).powi(2)).sqrt();
            blend(edge(r2 - 5.0 * s), [0.95, 0.85, 0.2]);
            for ch in 0..3 {
                img.set(x, y, ch, c[ch].clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// `n` grey points spread uniformly over the top-left quadrant of a
/// `width × height` image plane.
pub fn quadrant_cloud<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    width: usize,
    height: usize,
) -> crate::scene_io::PointCloud {
    let (qw, qh) = (width as f64 / 2.0, height as f64 / 2.0);
    crate::scene_io::PointCloud {
        positions: (0..n)
            .map(|_| [rng.random_range(0.0..qw), rng.random_range(0.0..qh), 0.0])
            .collect(),
        colors: vec![[0.5; 3]; n],
    }
}
