//! Slow reference implementations used to check the engine: a per-pixel
//! compositor written from scratch, finite-difference gradients, 1D slice
//! integrals of split Gaussians, and the three-way cloning comparison.
//!
//! Nothing here calls into the projection, compositing or relocation code
//! it is used to check.

mod scenes;
mod verify;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

pub use scenes::{
    naive_clone, opacity_only_clone, quadrant_cloud, random_scene, random_target, test_image,
};
pub use verify::{
    analytic_gradient, center_exactness, check_gradients, gradient_scene, integral_error,
    raster_fidelity, relocation_trial, run_verify, sign_flipped_factor, CheckRow, FactorFn,
    GradientCheck, SweepRow, VerifyOptions, VerifyReport, GRAD_ABS_FLOOR, GRAD_REL_TOL,
};

use crate::camera::{Camera, CameraMode};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianGrads, GaussianSet, Group};
use crate::img::Image;
use crate::loss::{loss_total, LossWeights};
use crate::numeric::NeumaierSum;
use crate::render::{render, RasterConfig};

const Y0: f64 = 0.282_094_791_773_878_14;
const Y1: f64 = 0.488_602_511_902_919_9;

/// Real SH basis up to degree 3 at unit direction `(x, y, z)`, in the
/// coefficient order used by the splat file convention.
fn sh_values(degree: u8, x: f64, y: f64, z: f64) -> Vec<f64> {
    let mut v = vec![Y0];
    if degree >= 1 {
        v.extend([-Y1 * y, Y1 * z, -Y1 * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v.extend([
            1.092_548_430_592_079_2 * x * y,
            -1.092_548_430_592_079_2 * y * z,
            0.315_391_565_252_520_05 * (2.0 * zz - xx - yy),
            -1.092_548_430_592_079_2 * x * z,
            0.546_274_215_296_039_6 * (xx - yy),
        ]);
        if degree >= 3 {
            v.extend([
                -0.590_043_589_926_643_5 * y * (3.0 * xx - yy),
                2.890_611_442_640_554 * x * y * z,
                -0.457_045_799_464_465_8 * y * (4.0 * zz - xx - yy),
                0.373_176_332_590_115_4 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                -0.457_045_799_464_465_8 * x * (4.0 * zz - xx - yy),
                1.445_305_721_320_277 * z * (xx - yy),
                -0.590_043_589_926_643_5 * x * (xx - 3.0 * yy),
            ]);
        }
    }
    v
}

/// 2×2 symmetric matrix `[a b; b c]`.
#[derive(Clone, Copy, Debug)]
struct Sym2 {
    a: f64,
    b: f64,
    c: f64,
}

struct Splat {
    index: usize,
    depth: f64,
    mean: [f64; 2],
    inv: Sym2,
    opacity: f64,
    rgb: [f64; 3],
}

fn quat_to_matrix(q: [f64; 4]) -> Option<[[f64; 3]; 3]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > 0.0) {
        return None;
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Some([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn transpose3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

fn world_covariance(set: &GaussianSet, i: usize) -> Option<[[f64; 3]; 3]> {
    let r = quat_to_matrix(set.rotation(i))?;
    let s: Vec<f64> = (0..3).map(|a| set.raw_scales[3 * i + a].exp()).collect();
    let mut rs = r;
    for row in rs.iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v *= s[c];
        }
    }
    Some(matmul3(&rs, &transpose3(&rs)))
}

fn splats(set: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Vec<Splat> {
    let rot: [[f64; 3]; 3] =
        std::array::from_fn(|r| std::array::from_fn(|c| cam.rotation[(r, c)]));
    let centre: [f64; 3] = std::array::from_fn(|a| {
        -(0..3).map(|r| cam.rotation[(r, a)] * cam.translation[r]).sum::<f64>()
    });
    let mut out = Vec::new();
    for i in 0..set.len() {
        let opacity = 1.0 / (1.0 + (-set.raw_opacities[i]).exp());
        if opacity < cfg.alpha_skip {
            continue;
        }
        let Some(sigma) = world_covariance(set, i) else {
            continue;
        };
        let p = set.position(i);
        let (mean, cov, depth, dir) = match cam.mode {
            CameraMode::Identity2D => (
                [p[0], p[1]],
                Sym2 {
                    a: sigma[0][0],
                    b: 0.5 * (sigma[0][1] + sigma[1][0]),
                    c: sigma[1][1],
                },
                i as f64,
                [0.0, 0.0, 1.0],
            ),
            CameraMode::Pinhole3D => {
                let t: [f64; 3] = std::array::from_fn(|r| {
                    (0..3).map(|k| rot[r][k] * p[k]).sum::<f64>() + cam.translation[r]
                });
                if t[2] <= cfg.near_plane {
                    continue;
                }
                let (x, y, z) = (t[0], t[1], t[2]);
                let jac = [
                    [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
                    [0.0, cam.fy / z, -cam.fy * y / (z * z)],
                    [0.0, 0.0, 0.0],
                ];
                let m = matmul3(&jac, &rot);
                let cov = matmul3(&matmul3(&m, &sigma), &transpose3(&m));
                (
                    [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy],
                    Sym2 {
                        a: cov[0][0] + cfg.blur,
                        b: 0.5 * (cov[0][1] + cov[1][0]),
                        c: cov[1][1] + cfg.blur,
                    },
                    z,
                    [p[0] - centre[0], p[1] - centre[1], p[2] - centre[2]],
                )
            }
        };
        let det = cov.a * cov.c - cov.b * cov.b;
        if !(det > 0.0) || !det.is_finite() || cov.a <= 0.0 {
            continue;
        }
        let inv = Sym2 {
            a: cov.c / det,
            b: -cov.b / det,
            c: cov.a / det,
        };
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let basis = sh_values(set.sh_degree, dir[0] / norm, dir[1] / norm, dir[2] / norm);
        let coeffs = set.color_coeffs(i);
        let rgb = std::array::from_fn(|ch| {
            let v: f64 = basis.iter().enumerate().map(|(k, y)| y * coeffs[3 * k + ch]).sum();
            (v + 0.5).max(0.0)
        });
        out.push(Splat {
            index: i,
            depth,
            mean,
            inv,
            opacity,
            rgb,
        });
    }
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

/// Per-pixel front-to-back compositing of every Gaussian: no tiles, no
/// footprint bound, no early termination, compensated sums. Returns the
/// image and the final transmittance per pixel.
pub fn naive_composite_with(
    set: &GaussianSet,
    cam: &Camera,
    cfg: &RasterConfig,
) -> (Image, Vec<f64>) {
    let splats = splats(set, cam, cfg);
    let (w, h) = (cam.width, cam.height);
    let mut img = Image::new(w, h);
    let mut t_final = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [NeumaierSum::default(); 3];
            let mut t = 1.0;
            for s in &splats {
                let dx = x as f64 - s.mean[0];
                let dy = y as f64 - s.mean[1];
                let q = s.inv.a * dx * dx + 2.0 * s.inv.b * dx * dy + s.inv.c * dy * dy;
                let alpha = (s.opacity * (-0.5 * q).exp()).min(cfg.alpha_clamp);
                if alpha < cfg.alpha_skip {
                    continue;
                }
                for ch in 0..3 {
                    acc[ch].add(s.rgb[ch] * alpha * t);
                }
                t *= 1.0 - alpha;
            }
            for ch in 0..3 {
                img.set(x, y, ch, acc[ch].value());
            }
            t_final[y * w + x] = t;
        }
    }
    (img, t_final)
}

/// [`naive_composite_with`] under the default rasterizer conventions.
pub fn naive_composite(set: &GaussianSet, cam: &Camera) -> Image {
    naive_composite_with(set, cam, &RasterConfig::default()).0
}

fn perturbed(set: &GaussianSet, g: Group, k: usize, delta: f64) -> GaussianSet {
    let mut s = set.clone();
    s.group_mut(g)[k] += delta;
    s
}

/// Central differences `(L(p+h) - L(p-h)) / 2h` for every scalar parameter.
pub fn finite_diff_grad(
    set: &GaussianSet,
    loss: impl Fn(&GaussianSet) -> Result<f64>,
    h: f64,
) -> Result<GaussianGrads> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be > 0, got {h}")));
    }
    let mut grads = GaussianGrads::zeros_like(set);
    for g in Group::ALL {
        for k in 0..set.group(g).len() {
            let plus = loss(&perturbed(set, g, k, h))?;
            let minus = loss(&perturbed(set, g, k, -h))?;
            grads.group_mut(g)[k] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// How a pipeline finite difference was formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdKind {
    Central,
    Forward,
    Backward,
    /// Both neighbours cross a discontinuity at every tried step.
    Skipped,
}

pub struct PipelineFd {
    pub grads: GaussianGrads,
    pub kinds: Vec<(Group, usize, FdKind)>,
}

impl PipelineFd {
    pub fn kind(&self, g: Group, k: usize) -> FdKind {
        self.kinds
            .iter()
            .find(|e| e.0 == g && e.1 == k)
            .map_or(FdKind::Central, |e| e.2)
    }

    pub fn skipped(&self) -> usize {
        self.kinds.iter().filter(|e| e.2 == FdKind::Skipped).count()
    }
}

/// Loss of the full render + loss pipeline together with a fingerprint of
/// every discrete choice made along the way.
pub fn pipeline_loss(
    set: &GaussianSet,
    cam: &Camera,
    target: &Image,
    weights: &LossWeights,
    cfg: &RasterConfig,
) -> Result<(f64, u64)> {
    let out = render(set, cam, cfg)?;
    let mut h = DefaultHasher::new();
    out.structure_signature().hash(&mut h);
    for (r, t) in out.image.iter().zip(&target.data) {
        (r > t).hash(&mut h);
    }
    let (l, _, _) = loss_total(&out.to_image(), target, set, weights)?;
    Ok((l.total, h.finish()))
}

/// Finite differences through the whole pipeline. When a perturbation
/// changes the discrete structure of the render (a sample crossing the skip
/// or clamp threshold, a change of depth order, a residual changing sign),
/// the step is shrunk; if one side stays smooth a one-sided difference is
/// used, otherwise the parameter is reported as skipped.
pub fn pipeline_fd_grad(
    set: &GaussianSet,
    cam: &Camera,
    target: &Image,
    weights: &LossWeights,
    cfg: &RasterConfig,
    h: f64,
) -> Result<PipelineFd> {
    let eval = |s: &GaussianSet| pipeline_loss(s, cam, target, weights, cfg);
    let (l0, sig0) = eval(set)?;
    let mut grads = GaussianGrads::zeros_like(set);
    let mut kinds = Vec::new();
    for g in Group::ALL {
        for k in 0..set.group(g).len() {
            let mut step = h * set.group(g)[k].abs().max(1.0);
            let mut result = None;
            let mut last = None;
            for _ in 0..4 {
                let (lp, sp) = eval(&perturbed(set, g, k, step))?;
                let (lm, sm) = eval(&perturbed(set, g, k, -step))?;
                if sp == sig0 && sm == sig0 {
                    result = Some(((lp - lm) / (2.0 * step), FdKind::Central));
                    break;
                }
                last = Some((lp, sp, lm, sm, step));
                step /= 10.0;
            }
            let (value, kind) = match (result, last) {
                (Some(r), _) => r,
                (None, Some((lp, sp, _, _, s))) if sp == sig0 => ((lp - l0) / s, FdKind::Forward),
                (None, Some((_, _, lm, sm, s))) if sm == sig0 => ((l0 - lm) / s, FdKind::Backward),
                _ => (0.0, FdKind::Skipped),
            };
            grads.group_mut(g)[k] = value;
            if kind != FdKind::Central {
                kinds.push((g, k, kind));
            }
        }
    }
    Ok(PipelineFd { grads, kinds })
}

/// `|a - b| ≤ max(rel·max(|a|, |b|), abs_floor)`.
pub fn grad_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs_floor)
}

/// Integrals along a line through the centre of one Gaussian and of `n`
/// co-located copies composited on top of each other.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceIntegrals {
    pub old: f64,
    pub new: f64,
    /// `o·√(2πΣ)`.
    pub old_closed_form: f64,
}

const SLICE_SAMPLES: usize = 100_000;

/// Composited 1D profile of `n` copies with opacity `o` and variance `var`,
/// summed term by term in front-to-back order.
fn composed_profile(x: f64, n: usize, o: f64, var: f64) -> f64 {
    let a = o * (-0.5 * x * x / var).exp();
    let mut acc = NeumaierSum::default();
    let mut t = 1.0;
    for _ in 0..n {
        acc.add(a * t);
        t *= 1.0 - a;
    }
    acc.value()
}

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, samples: usize) -> f64 {
    let dx = (hi - lo) / (samples - 1) as f64;
    let mut acc = NeumaierSum::default();
    for i in 0..samples {
        let w = if i == 0 || i == samples - 1 { 0.5 } else { 1.0 };
        acc.add(w * f(lo + i as f64 * dx));
    }
    acc.value() * dx
}

/// Trapezoid integrals over `±8σ` (the wider of the two) with 10⁵ samples.
pub fn slice_integral(
    o: f64,
    var: f64,
    n_copies: usize,
    o_copy: f64,
    var_copy: f64,
) -> Result<SliceIntegrals> {
    if !(var > 0.0 && var_copy > 0.0) || n_copies == 0 {
        return Err(Error::InvalidInput(format!(
            "slice integral needs positive variances and ≥ 1 copy (Σ = {var}, Σ' = {var_copy}, N = {n_copies})"
        )));
    }
    let half = 8.0 * var.max(var_copy).sqrt();
    Ok(SliceIntegrals {
        old: trapezoid(|x| composed_profile(x, 1, o, var), -half, half, SLICE_SAMPLES),
        new: trapezoid(
            |x| composed_profile(x, n_copies, o_copy, var_copy),
            -half,
            half,
            SLICE_SAMPLES,
        ),
        old_closed_form: o * (2.0 * std::f64::consts::PI * var).sqrt(),
    })
}

/// RMS deviation of three splitting strategies from the original profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloningRmse {
    /// Every copy keeps the original opacity and covariance.
    pub naive: f64,
    /// Opacity corrected so the centre matches; covariance unchanged.
    pub center_corrected: f64,
    /// Opacity and covariance both corrected.
    pub ours: f64,
}

const CLONING_SAMPLES: usize = 20_001;

/// Compares the strategies on a dense grid over `±8σ`. The split opacity
/// is computed here directly; `factor` supplies the covariance factor.
pub fn compare_cloning_with(
    o_old: f64,
    var_old: f64,
    n: usize,
    factor: &FactorFn,
) -> Result<CloningRmse> {
    if !(o_old > 0.0 && o_old < 1.0 && var_old > 0.0) || n == 0 {
        return Err(Error::InvalidInput(format!(
            "cloning comparison needs o ∈ (0,1), Σ > 0, N ≥ 1 (o = {o_old}, Σ = {var_old}, N = {n})"
        )));
    }
    let o_split = 1.0 - (1.0 - o_old).powf(1.0 / n as f64);
    let f = factor(o_old, n)?;
    let half = 8.0 * var_old.sqrt();
    let dx = 2.0 * half / (CLONING_SAMPLES - 1) as f64;
    let mut sums = [NeumaierSum::default(); 3];
    for i in 0..CLONING_SAMPLES {
        let x = -half + i as f64 * dx;
        let reference = composed_profile(x, 1, o_old, var_old);
        let candidates = [
            composed_profile(x, n, o_old, var_old),
            composed_profile(x, n, o_split, var_old),
            composed_profile(x, n, o_split, f * var_old),
        ];
        for (s, c) in sums.iter_mut().zip(candidates) {
            s.add((c - reference).powi(2));
        }
    }
    let rmse = |s: &NeumaierSum| (s.value() / CLONING_SAMPLES as f64).sqrt();
    Ok(CloningRmse {
        naive: rmse(&sums[0]),
        center_corrected: rmse(&sums[1]),
        ours: rmse(&sums[2]),
    })
}

/// [`compare_cloning_with`] using the engine's covariance factor.
pub fn compare_cloning(o_old: f64, var_old: f64, n: usize) -> Result<CloningRmse> {
    compare_cloning_with(o_old, var_old, n, &crate::relocate::relocated_covariance_factor)
}

/// Root-mean-square difference of two equally sized images.
pub fn image_rmse(a: &Image, b: &Image) -> f64 {
    let n = a.data.len().max(1) as f64;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum();
    (s / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::rgb_to_dc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_set_gives_black() {
        let cam = Camera::identity_2d(5, 4);
        let img = naive_composite(&GaussianSet::with_capacity(0, 0), &cam);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_is_alpha_times_colour() {
        let mut set = GaussianSet::with_capacity(1, 0);
        set.push([4.0, 3.0, 0.0], [0.7, 0.3, 0.0], [0.9, 0.0, 0.0, 0.4], 0.7, [rgb_to_dc(0.6); 3])
            .unwrap();
        let cam = Camera::identity_2d(9, 7);
        let img = naive_composite(&set, &cam);
        let cfg = RasterConfig::default();
        let g = &crate::render::project(&set, &cam, &cfg)[0];
        for y in 0..7 {
            for x in 0..9 {
                let a = crate::render::alpha_at(g, g.opacity, [x as f64, y as f64], &cfg).unwrap();
                assert!((img.get(x, y, 1) - 0.6 * a).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn agrees_with_the_engine_on_a_random_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [CameraMode::Identity2D, CameraMode::Pinhole3D] {
            let (set, cam) = random_scene(&mut rng, 24, mode, 20, 18, 2);
            let fast = render(&set, &cam, &RasterConfig::default()).unwrap().to_image();
            assert!(image_rmse(&fast, &naive_composite(&set, &cam)) < 1e-5);
        }
    }

    #[test]
    fn finite_differences_on_closed_forms() {
        let mut set = GaussianSet::with_capacity(1, 0);
        set.push([3.0, 0.0, 0.0], [0.0; 3], [1.0, 0.0, 0.0, 0.0], 0.5, [0.0; 3]).unwrap();
        let zero = finite_diff_grad(&set, |_| Ok(1.5), 1e-4).unwrap();
        assert_eq!(zero, GaussianGrads::zeros_like(&set));
        let g = finite_diff_grad(&set, |s| Ok(s.positions[0].powi(2)), 1e-4).unwrap();
        assert!((g.positions[0] - 6.0).abs() < 1e-6);
        assert!(finite_diff_grad(&set, |_| Ok(0.0), 0.0).is_err());
    }

    #[test]
    fn slice_integrals_identity_and_split() {
        let s = slice_integral(0.4, 2.0, 1, 0.4, 2.0).unwrap();
        assert!((s.old - s.new).abs() < 1e-8);
        assert!((s.old - s.old_closed_form).abs() < 1e-10 * s.old);

        let f = crate::relocate::relocated_covariance_factor(0.75, 2).unwrap();
        let s = slice_integral(0.75, 1.3, 2, 0.5, f * 1.3).unwrap();
        assert!((s.new - s.old).abs() < 1e-5 * s.old);

        let s = slice_integral(0.95, 1.0, 4, 0.95, 1.0).unwrap();
        assert!(s.new > s.old);
    }

    #[test]
    fn cloning_comparison() {
        let one = compare_cloning(0.6, 1.0, 1).unwrap();
        assert!(one.naive == 0.0 && one.center_corrected < 1e-15 && one.ours < 1e-15);
        let r = compare_cloning(0.95, 1.0, 4).unwrap();
        assert!(r.ours < r.center_corrected && r.center_corrected < r.naive, "{r:?}");
    }
}
