use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::project::project_with_cache;
use super::raster::{sample_alpha, tile_bounds, RenderOutput};
use super::sh::eval_color_vjp;
use super::view_direction;
use crate::camera::{Camera, CameraMode};
use crate::error::{Error, Result};
use crate::gaussian::{rotation_matrix, rotation_matrix_vjp, GaussianGrads, GaussianSet};

/// Image-space gradients of one projected Gaussian.
#[derive(Clone, Copy, Default)]
struct Grad2D {
    mean: [f64; 2],
    /// dL/d(conic) on entries (0,0), (0,1)+(1,0), (1,1).
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl Grad2D {
    fn add(&mut self, o: &Grad2D) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct Sample {
    local: usize,
    alpha: f64,
    clamped: bool,
    t: f64,
    d: Vector2<f64>,
}

/// Reverse-mode gradient of a render. `d_image` is dL/dC in the layout of
/// `output.image`. The early-termination points of the forward pass are
/// replayed exactly.
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    output: &RenderOutput,
    d_image: &[f64],
) -> Result<GaussianGrads> {
    let (w, h) = (output.width, output.height);
    if d_image.len() != output.image.len() || w != cam.width || h != cam.height {
        return Err(Error::ContractViolation(format!(
            "gradient buffer of {} values for a {w}×{h} render",
            d_image.len()
        )));
    }
    let cfg = &output.config;
    let ts = cfg.tile_size.max(1);
    let tiles_x = output.tiles_x;
    let n_tiles = output.tile_lists.len();

    let run_tile = |tile: usize| -> Vec<Grad2D> {
        let list = &output.tile_lists[tile];
        let mut acc = vec![Grad2D::default(); list.len()];
        if list.is_empty() {
            return acc;
        }
        let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, ts, w, h);
        let mut samples: Vec<Sample> = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                let g_pix = [d_image[3 * p], d_image[3 * p + 1], d_image[3 * p + 2]];
                if g_pix == [0.0; 3] {
                    continue;
                }
                let px = Vector2::new(x as f64, y as f64);
                samples.clear();
                let mut t = 1.0;
                for (local, &j) in list[..output.processed[p] as usize].iter().enumerate() {
                    let g = &output.projected[j as usize];
                    let (alpha, clamped) = sample_alpha(g, px, cfg);
                    if alpha < cfg.alpha_skip {
                        continue;
                    }
                    samples.push(Sample {
                        local,
                        alpha,
                        clamped,
                        t,
                        d: px - g.mean,
                    });
                    t *= 1.0 - alpha;
                }
                // colour seen behind the current sample
                let mut behind = [0.0; 3];
                for s in samples.iter().rev() {
                    let j = list[s.local] as usize;
                    let g = &output.projected[j];
                    let rgb = output.colors[j].rgb;
                    let a = &mut acc[s.local];
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        a.color[ch] += s.alpha * s.t * g_pix[ch];
                        d_alpha += s.t * (rgb[ch] - behind[ch]) * g_pix[ch];
                        behind[ch] = s.alpha * rgb[ch] + (1.0 - s.alpha) * behind[ch];
                    }
                    if s.clamped {
                        continue;
                    }
                    let gauss = s.alpha / g.opacity;
                    a.opacity += d_alpha * gauss;
                    let d_power = -d_alpha * s.alpha;
                    let (dx, dy) = (s.d.x, s.d.y);
                    let c = &g.conic;
                    a.mean[0] -= d_power * (c[(0, 0)] * dx + c[(0, 1)] * dy);
                    a.mean[1] -= d_power * (c[(0, 1)] * dx + c[(1, 1)] * dy);
                    a.conic[0] += d_power * 0.5 * dx * dx;
                    a.conic[1] += d_power * dx * dy;
                    a.conic[2] += d_power * 0.5 * dy * dy;
                }
            }
        }
        acc
    };

    let per_tile: Vec<Vec<Grad2D>> = if cfg.parallel {
        (0..n_tiles).into_par_iter().map(run_tile).collect()
    } else {
        (0..n_tiles).map(run_tile).collect()
    };
    // fixed tile order keeps the reduction deterministic
    let mut grads_2d = vec![Grad2D::default(); output.projected.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (local, g) in acc.iter().enumerate() {
            grads_2d[output.tile_lists[tile][local] as usize].add(g);
        }
    }

    let caches = project_with_cache(set, cam, cfg);
    let mut by_index = vec![usize::MAX; set.len()];
    for (k, (p, _)) in caches.iter().enumerate() {
        by_index[p.index] = k;
    }

    let mut grads = GaussianGrads::zeros_like(set);
    let k_coeffs = 3 * set.coeffs_per_gaussian();
    for (j, g2) in grads_2d.iter().enumerate() {
        let proj = &output.projected[j];
        let i = proj.index;
        let cache_k = by_index[i];
        if cache_k == usize::MAX {
            return Err(Error::ContractViolation(format!(
                "Gaussian {i} present in the render but not in the projection"
            )));
        }
        let cache = &caches[cache_k].1;

        let o = proj.opacity;
        grads.raw_opacities[i] += g2.opacity * o * (1.0 - o);

        let coeffs = set.color_coeffs(i);
        let d_dir = eval_color_vjp(
            coeffs,
            set.sh_degree,
            view_direction(set, cam, i),
            output.colors[j].clamped,
            g2.color,
            &mut grads.colors[k_coeffs * i..k_coeffs * (i + 1)],
        );

        // conic = cov⁻¹  ⇒  dL/dcov = -conic · D · conic
        let d_conic = Matrix2::new(g2.conic[0], 0.5 * g2.conic[1], 0.5 * g2.conic[1], g2.conic[2]);
        let d_cov2 = -proj.conic * d_conic * proj.conic;

        let mut d_mu = Vector3::zeros();
        let d_cov3: Matrix3<f64> = match cam.mode {
            CameraMode::Identity2D => {
                // the view direction is constant in 2D mode
                d_mu.x += g2.mean[0];
                d_mu.y += g2.mean[1];
                let mut m = Matrix3::zeros();
                m.fixed_view_mut::<2, 2>(0, 0).copy_from(&d_cov2);
                m
            }
            CameraMode::Pinhole3D => {
                let jac = cache.jacobian;
                let jw = jac * cam.rotation;
                let v = cam.rotation * cache.cov3 * cam.rotation.transpose();
                let d_j = (d_cov2 + d_cov2.transpose()) * jac * v;
                let t = cache.cam_point;
                let (x, y, z) = (t.x, t.y, t.z);
                let (fx, fy) = (cam.fx, cam.fy);
                let z2 = z * z;
                let z3 = z2 * z;
                let mut d_t = Vector3::zeros();
                d_t.x += g2.mean[0] * fx / z;
                d_t.y += g2.mean[1] * fy / z;
                d_t.z -= g2.mean[0] * fx * x / z2 + g2.mean[1] * fy * y / z2;
                d_t.x -= d_j[(0, 2)] * fx / z2;
                d_t.y -= d_j[(1, 2)] * fy / z2;
                d_t.z += -d_j[(0, 0)] * fx / z2 + d_j[(0, 2)] * 2.0 * fx * x / z3
                    - d_j[(1, 1)] * fy / z2
                    + d_j[(1, 2)] * 2.0 * fy * y / z3;
                d_mu += cam.rotation.transpose() * d_t + Vector3::from(d_dir);
                jw.transpose() * d_cov2 * jw
            }
        };
        for a in 0..3 {
            grads.positions[3 * i + a] += d_mu[a];
        }

        // Σ3 = M Mᵀ with M = R diag(s)
        let q = set.rotation(i);
        let r = rotation_matrix(q)?;
        let s = set.scale(i);
        let m = r * Matrix3::from_diagonal(&Vector3::from(s));
        let d_m = (d_cov3 + d_cov3.transpose()) * m;
        let mut d_r = Matrix3::zeros();
        for col in 0..3 {
            let ds: f64 = (0..3).map(|row| d_m[(row, col)] * r[(row, col)]).sum();
            grads.raw_scales[3 * i + col] += ds * s[col];
            for row in 0..3 {
                d_r[(row, col)] = d_m[(row, col)] * s[col];
            }
        }
        let d_q = rotation_matrix_vjp(q, &d_r);
        for a in 0..4 {
            grads.rotations[4 * i + a] += d_q[a];
        }
    }
    Ok(grads)
}
