use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    compare_cloning_with, grad_close, image_rmse, naive_clone, naive_composite_with,
    pipeline_fd_grad, random_scene, random_target, slice_integral, FdKind,
};
use crate::camera::{Camera, CameraMode};
use crate::error::{Error, Result};
use crate::gaussian::{classify_liveness, GaussianSet, Group, DEFAULT_LIVE_THRESHOLD};
use crate::img::Image;
use crate::loss::{loss_total, LossWeights};
use crate::mcmc::OptimizerState;
use crate::relocate::{
    apply_plan, binomial, build_plan, relocated_covariance_factor, relocated_opacity_exact,
    N_MAX,
};
use crate::render::{render, render_backward, rgb_to_dc, RasterConfig};

/// Covariance factor under test, `(o_old, N) -> f`.
pub type FactorFn = dyn Fn(f64, usize) -> Result<f64> + Sync;

/// The covariance factor with every alternating sign made positive. Used
/// to confirm that the checks catch a broken factor.
pub fn sign_flipped_factor(o_old: f64, n: usize) -> Result<f64> {
    let o_new = relocated_opacity_exact(o_old, n)?;
    let mut denom = 0.0;
    for i in 1..=n {
        for k in 0..i {
            denom += binomial(i - 1, k) * o_new.powi(k as i32 + 1) / ((k + 1) as f64).sqrt();
        }
    }
    Ok((o_old / denom).powi(2))
}

pub struct VerifyOptions<'a> {
    pub seed: u64,
    pub raster_scenes: usize,
    pub gradient_scenes: usize,
    pub relocation_trials: usize,
    pub factor: &'a FactorFn,
}

impl Default for VerifyOptions<'static> {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            raster_scenes: 10,
            gradient_scenes: 4,
            relocation_trials: 20,
            factor: &relocated_covariance_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub passed: bool,
    pub measured: String,
    pub tolerance: String,
}

/// One `(o_old, N)` cell of the relocation sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub o_old: f64,
    pub n: usize,
    pub o_new: f64,
    pub factor: f64,
    pub center_abs_err: f64,
    pub integral_rel_err: f64,
    pub rmse_naive: f64,
    pub rmse_center_corrected: f64,
    pub rmse_ours: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckRow>,
    pub sweep: Vec<SweepRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn write_sweep_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e))?;
        for row in &self.sweep {
            w.serialize(row).map_err(|e| Error::load(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest `|1 - (1 - o_new)^N - o|` over `o ∈ {0.01, …, 0.99}`, `N ∈ 1..=N_MAX`.
pub fn center_exactness() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for step in 1..100 {
        let o = step as f64 / 100.0;
        for n in 1..=N_MAX {
            let o_new = relocated_opacity_exact(o, n)?;
            worst = worst.max((1.0 - (1.0 - o_new).powi(n as i32) - o).abs());
        }
    }
    Ok(worst)
}

/// Relative slice-integral error for one cell, with unit variance.
pub fn integral_error(o: f64, n: usize, factor: &FactorFn) -> Result<f64> {
    let o_new = relocated_opacity_exact(o, n)?;
    let f = factor(o, n)?;
    if !(f > 0.0 && f.is_finite()) {
        return Ok(f64::INFINITY);
    }
    let s = slice_integral(o, 1.0, n, o_new, f)?;
    Ok((s.new - s.old).abs() / s.old)
}

/// `(max abs image error, max transmittance conservation error)` of the
/// engine against the naive compositor over `scenes` random scenes,
/// alternating 2D and pinhole cameras.
pub fn raster_fidelity<R: Rng + ?Sized>(rng: &mut R, scenes: usize) -> Result<(f64, f64)> {
    let cfg = RasterConfig::default();
    let mut worst_img: f64 = 0.0;
    let mut worst_t: f64 = 0.0;
    for k in 0..scenes {
        let mode = if k % 2 == 0 { CameraMode::Identity2D } else { CameraMode::Pinhole3D };
        let n = rng.random_range(1..=48);
        let (w, h) = (rng.random_range(8..40), rng.random_range(8..40));
        let (mut set, cam) = random_scene(rng, n, mode, w, h, (k % 4) as u8);
        let fast = render(&set, &cam, &cfg)?;
        let (slow, _) = naive_composite_with(&set, &cam, &cfg);
        for (a, b) in fast.image.iter().zip(&slow.data) {
            worst_img = worst_img.max((a - b).abs());
        }
        // with every colour 1, accumulated colour plus leftover transmittance is 1
        set.colors.fill(0.0);
        let k_coeffs = 3 * set.coeffs_per_gaussian();
        for i in 0..set.len() {
            set.colors[k_coeffs * i..k_coeffs * i + 3].fill(rgb_to_dc(1.0));
        }
        let white = render(&set, &cam, &cfg)?;
        for (p, t) in white.t_final.iter().enumerate() {
            worst_t = worst_t.max((white.image[3 * p] + t - 1.0).abs());
        }
    }
    Ok((worst_img, worst_t))
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
    /// Largest `|a - fd| / max(|a|, |fd|)` among entries whose magnitude
    /// exceeds the absolute floor.
    pub worst_rel: f64,
}

pub const GRAD_REL_TOL: f64 = 1e-3;
pub const GRAD_ABS_FLOOR: f64 = 1e-6;

/// Analytic gradient of the full objective for one view.
pub fn analytic_gradient(
    set: &GaussianSet,
    cam: &Camera,
    target: &Image,
    weights: &LossWeights,
    cfg: &RasterConfig,
) -> Result<crate::gaussian::GaussianGrads> {
    let out = render(set, cam, cfg)?;
    let (_, d_image, mut grads) = loss_total(&out.to_image(), target, set, weights)?;
    grads.add_assign(&render_backward(set, cam, &out, &d_image)?);
    Ok(grads)
}

pub fn check_gradients(
    set: &GaussianSet,
    cam: &Camera,
    target: &Image,
    weights: &LossWeights,
) -> Result<GradientCheck> {
    let cfg = RasterConfig::default();
    let analytic = analytic_gradient(set, cam, target, weights, &cfg)?;
    let fd = pipeline_fd_grad(set, cam, target, weights, &cfg, 1e-6)?;
    let mut report = GradientCheck::default();
    for g in Group::ALL {
        for k in 0..set.group(g).len() {
            if fd.kind(g, k) == FdKind::Skipped {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let (a, b) = (analytic.group(g)[k], fd.grads.group(g)[k]);
            let scale = a.abs().max(b.abs());
            if scale > GRAD_ABS_FLOOR {
                report.worst_rel = report.worst_rel.max((a - b).abs() / scale);
            }
            if !grad_close(a, b, GRAD_REL_TOL, GRAD_ABS_FLOOR) {
                report.failures.push(format!(
                    "{g:?}[{k}]: analytic {a:.9e}, finite difference {b:.9e} ({:?})",
                    fd.kind(g, k)
                ));
            }
        }
    }
    Ok(report)
}

/// Random scene for gradient checks: at most 32 Gaussians on a 16×16 view.
pub fn gradient_scene<R: Rng + ?Sized>(
    rng: &mut R,
    mode: CameraMode,
) -> (GaussianSet, Camera, Image) {
    let n = rng.random_range(1..=32);
    let degree = rng.random_range(0..=3u8);
    let (set, cam) = random_scene(rng, n, mode, 16, 16, degree);
    let target = random_target(rng, 16, 16);
    (set, cam, target)
}

/// One relocation trial on a random 2D scene with some dead Gaussians.
/// Returns `(rmse after relocation, rmse after naive cloning)`, both
/// measured against the render before the move.
pub fn relocation_trial<R: Rng + ?Sized>(rng: &mut R) -> Result<(f64, f64)> {
    let live = rng.random_range(4..24);
    let dead = rng.random_range(1..12);
    let (mut set, cam) = random_scene(rng, live + dead, CameraMode::Identity2D, 24, 24, 0);
    for i in 0..set.len() {
        if rng.random_bool(dead as f64 / (live + dead) as f64) {
            set.raw_opacities[i] = crate::gaussian::logit(rng.random_range(1e-4..3e-3));
        }
    }
    if !set.raw_opacities.iter().any(|&r| crate::gaussian::sigmoid(r) < DEFAULT_LIVE_THRESHOLD) {
        set.raw_opacities[0] = crate::gaussian::logit(1e-3);
    }
    let cfg = RasterConfig::default();
    let before = render(&set, &cam, &cfg)?.to_image();
    let mask = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD);
    let plan = build_plan(&mask, &set.opacities(), rng)?;
    let mut moved = set.clone();
    let mut opt = OptimizerState::new(&moved);
    apply_plan(&mut moved, &mut opt, &plan)?;
    let after = render(&moved, &cam, &cfg)?.to_image();
    let cloned = render(&naive_clone(&set, &plan), &cam, &cfg)?.to_image();
    Ok((image_rmse(&after, &before), image_rmse(&cloned, &before)))
}

/// Runs every oracle check and the relocation sweep.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let factor = opts.factor;

    let center = center_exactness()?;
    report.checks.push(CheckRow {
        name: "relocation centre value",
        passed: center <= 1e-12,
        measured: format!("{center:.3e}"),
        tolerance: "1e-12".into(),
    });

    let mut worst_integral: f64 = 0.0;
    for oi in 0..10 {
        let o = 0.05 + 0.1 * oi as f64;
        for n in 1..=8 {
            let o_new = relocated_opacity_exact(o, n)?;
            let f = factor(o, n)?;
            let integral = integral_error(o, n, factor)?;
            worst_integral = worst_integral.max(integral);
            let rmse = compare_cloning_with(o, 1.0, n, factor)?;
            report.sweep.push(SweepRow {
                o_old: o,
                n,
                o_new,
                factor: f,
                center_abs_err: (1.0 - (1.0 - o_new).powi(n as i32) - o).abs(),
                integral_rel_err: integral,
                rmse_naive: rmse.naive,
                rmse_center_corrected: rmse.center_corrected,
                rmse_ours: rmse.ours,
            });
        }
    }
    report.checks.push(CheckRow {
        name: "relocation slice integral",
        passed: worst_integral <= 1e-5,
        measured: format!("{worst_integral:.3e}"),
        tolerance: "1e-5 rel".into(),
    });

    let mut ordered = true;
    for oi in 1..=9 {
        for n in [2, 4, 8] {
            let r = compare_cloning_with(oi as f64 / 10.0, 1.0, n, factor)?;
            ordered &= r.ours < r.center_corrected && r.center_corrected < r.naive;
        }
    }
    let fig = compare_cloning_with(0.95, 1.0, 4, factor)?;
    let ratio = fig.ours / fig.naive;
    report.checks.push(CheckRow {
        name: "cloning strategy ordering",
        passed: ordered,
        measured: format!("ordered={ordered}, ours/naive at (0.95, 4) = {ratio:.4}"),
        tolerance: "ours < centre-corrected < naive".into(),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (img_err, t_err) = raster_fidelity(&mut rng, opts.raster_scenes)?;
    report.checks.push(CheckRow {
        name: "rasterizer vs naive compositor",
        passed: img_err <= 1e-4 && t_err <= 1e-6,
        measured: format!("image {img_err:.3e}, transmittance {t_err:.3e}"),
        tolerance: "1e-4, 1e-6".into(),
    });

    let mut failures = 0;
    let mut checked = 0;
    let mut skipped = 0;
    for k in 0..opts.gradient_scenes {
        let mode = if k % 2 == 0 { CameraMode::Identity2D } else { CameraMode::Pinhole3D };
        let (set, cam, target) = gradient_scene(&mut rng, mode);
        let r = check_gradients(&set, &cam, &target, &LossWeights::default())?;
        failures += r.failures.len();
        checked += r.checked;
        skipped += r.skipped;
    }
    report.checks.push(CheckRow {
        name: "gradients vs finite differences",
        passed: failures == 0,
        measured: format!("{failures} mismatches in {checked} entries ({skipped} skipped)"),
        tolerance: format!("rel {GRAD_REL_TOL:e}, abs {GRAD_ABS_FLOOR:e}"),
    });

    let mut wins = 0;
    for _ in 0..opts.relocation_trials {
        let (ours, naive) = relocation_trial(&mut rng)?;
        wins += usize::from(ours < naive);
    }
    report.checks.push(CheckRow {
        name: "relocation render change",
        passed: wins == opts.relocation_trials,
        measured: format!("{wins}/{} below naive cloning", opts.relocation_trials),
        tolerance: "all trials".into(),
    });
    Ok(report)
}
