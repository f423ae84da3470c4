//! Photometric loss, the opacity/scale regularizers, and image metrics.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied as a same-size
//! separable convolution with edge replication, so every pixel has a local
//! SSIM value and the mean runs over the full image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianGrads, GaussianSet};
use crate::img::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dssim: f64,
    pub opacity: f64,
    pub scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dssim: 0.2,
            opacity: 0.01,
            scale: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dssim) {
            return Err(Error::InvalidParameter(format!(
                "λ_D-SSIM = {} outside [0, 1]",
                self.dssim
            )));
        }
        if !(self.opacity >= 0.0 && self.scale >= 0.0) {
            return Err(Error::InvalidParameter(
                "regularizer weights must be ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// Individual loss terms; `total` already includes the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub reg_opacity: f64,
    pub reg_scale: f64,
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) || a.data.len() != b.data.len() {
        return Err(Error::ContractViolation(format!(
            "image shapes differ: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as isize - half;
        *v = (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Same-size separable convolution with edge replication on a single
/// channel plane.
struct Blur {
    w: usize,
    h: usize,
    kernel: [f64; SSIM_WINDOW],
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        Blur {
            w,
            h,
            kernel: gaussian_window(),
        }
    }

    /// Index of tap `k` around position `i` on a line of length `n`.
    #[inline]
    fn tap(i: usize, k: usize, n: usize) -> usize {
        (i as isize + k as isize - (SSIM_WINDOW / 2) as isize).clamp(0, n as isize - 1) as usize
    }

    /// Convolves `n` samples spaced `stride` apart, starting at `src[0]`.
    fn line(&self, src: &[f64], dst: &mut [f64], n: usize, stride: usize) {
        let half = SSIM_WINDOW / 2;
        for i in 0..n {
            let mut acc = 0.0;
            if i >= half && i + half < n {
                let base = (i - half) * stride;
                for (k, kv) in self.kernel.iter().enumerate() {
                    acc += kv * src[base + k * stride];
                }
            } else {
                for (k, kv) in self.kernel.iter().enumerate() {
                    acc += kv * src[Self::tap(i, k, n) * stride];
                }
            }
            dst[i * stride] = acc;
        }
    }

    /// Transpose of [`Blur::line`], accumulated into `dst`.
    fn line_adjoint(&self, src: &[f64], dst: &mut [f64], n: usize, stride: usize) {
        let half = SSIM_WINDOW / 2;
        for i in 0..n {
            let g = src[i * stride];
            if i >= half && i + half < n {
                let base = (i - half) * stride;
                for (k, kv) in self.kernel.iter().enumerate() {
                    dst[base + k * stride] += kv * g;
                }
            } else {
                for (k, kv) in self.kernel.iter().enumerate() {
                    dst[Self::tap(i, k, n) * stride] += kv * g;
                }
            }
        }
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            self.line(&src[y * w..], &mut tmp[y * w..], w, 1);
        }
        let mut out = vec![0.0; w * h];
        for x in 0..w {
            self.line(&tmp[x..], &mut out[x..], h, w);
        }
        out
    }

    /// Adjoint of [`Blur::apply`].
    fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for x in 0..w {
            self.line_adjoint(&grad[x..], &mut tmp[x..], h, w);
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            self.line_adjoint(&tmp[y * w..], &mut out[y * w..], w, 1);
        }
        out
    }
}

fn plane(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM, and optionally its gradient w.r.t. `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {}×{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let blur = Blur::new(w, h);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; n * 3]);
    let norm = 1.0 / (3 * n) as f64;
    for ch in 0..3 {
        let x = plane(a, ch);
        let y = plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur.apply(&x);
        let my = blur.apply(&y);
        let exx = blur.apply(&xx);
        let eyy = blur.apply(&yy);
        let exy = blur.apply(&xy);
        let mut g_mx = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for p in 0..n {
            let (m1, m2) = (mx[p], my[p]);
            let s11 = exx[p] - m1 * m1;
            let s22 = eyy[p] - m2 * m2;
            let s12 = exy[p] - m1 * m2;
            let a1 = 2.0 * m1 * m2 + SSIM_C1;
            let a2 = 2.0 * s12 + SSIM_C2;
            let b1 = m1 * m1 + m2 * m2 + SSIM_C1;
            let b2 = s11 + s22 + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                g_mx[p] = norm
                    * (2.0 * m2 * (a2 - a1) / (b1 * b2) - 2.0 * m1 * s * (1.0 / b1 - 1.0 / b2));
                g_exx[p] = -norm * s / b2;
                g_exy[p] = norm * 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let d_mx = blur.adjoint(&g_mx);
            let d_exx = blur.adjoint(&g_exx);
            let d_exy = blur.adjoint(&g_exy);
            for p in 0..n {
                g[3 * p + ch] = d_mx[p] + 2.0 * x[p] * d_exx[p] + y[p] * d_exy[p];
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and dSSIM/da.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Peak signal-to-noise ratio over unit dynamic range; `+∞` for identical
/// images.
pub fn psnr(rendered: &Image, target: &Image) -> Result<f64> {
    check_shapes(rendered, target)?;
    let mse = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / rendered.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// `(1-λ)·L1 + λ·(1 - SSIM)` and its gradient w.r.t. the rendered image.
pub fn loss_orig(rendered: &Image, target: &Image, lambda_dssim: f64) -> Result<(LossBreakdown, Vec<f64>)> {
    check_shapes(rendered, target)?;
    let n = rendered.data.len() as f64;
    let mut grad = Vec::with_capacity(rendered.data.len());
    let mut l1 = 0.0;
    for (a, b) in rendered.data.iter().zip(&target.data) {
        let d = a - b;
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.push((1.0 - lambda_dssim) * sign / n);
    }
    l1 /= n;
    let mut dssim = 0.0;
    if lambda_dssim > 0.0 {
        let (s, g) = ssim_with_grad(rendered, target)?;
        dssim = 1.0 - s;
        for (acc, gs) in grad.iter_mut().zip(g) {
            *acc -= lambda_dssim * gs;
        }
    }
    let total = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim;
    Ok((
        LossBreakdown {
            total,
            l1,
            dssim,
            ..LossBreakdown::default()
        },
        grad,
    ))
}

/// Adds `λ_o Σ_i o_i + λ_Σ Σ_ij s_ij` to `breakdown` and its gradient to
/// `grads`. The square roots of the covariance eigenvalues are exactly the
/// physical scales, so no eigendecomposition is needed.
pub fn add_regularizers(
    set: &GaussianSet,
    weights: &LossWeights,
    breakdown: &mut LossBreakdown,
    grads: &mut GaussianGrads,
) {
    let mut reg_o = 0.0;
    let mut reg_s = 0.0;
    for i in 0..set.len() {
        let o = set.opacity(i);
        reg_o += o;
        grads.raw_opacities[i] += weights.opacity * o * (1.0 - o);
        for a in 0..3 {
            let s = set.raw_scales[3 * i + a].exp();
            reg_s += s;
            grads.raw_scales[3 * i + a] += weights.scale * s;
        }
    }
    breakdown.reg_opacity = weights.opacity * reg_o;
    breakdown.reg_scale = weights.scale * reg_s;
    breakdown.total += breakdown.reg_opacity + breakdown.reg_scale;
}

/// Full objective: photometric loss plus regularizers. Returns the loss,
/// dL/dC for the render, and the regularizer gradients on the parameters.
pub fn loss_total(
    rendered: &Image,
    target: &Image,
    set: &GaussianSet,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>, GaussianGrads)> {
    let (mut breakdown, d_image) = loss_orig(rendered, target, weights.dssim)?;
    let mut grads = GaussianGrads::zeros_like(set);
    add_regularizers(set, weights, &mut breakdown, &mut grads);
    Ok((breakdown, d_image, grads))
}
