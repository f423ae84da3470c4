//! Real spherical-harmonic colour, 3DGS sign conventions, degrees 0–3.

use crate::error::{Error, Result};
use crate::gaussian::sh_coeff_count;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Converts an RGB value to the degree-0 coefficient producing it.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

/// Basis values at a unit direction and their partials w.r.t. (x, y, z).
pub fn sh_basis(degree: u8, d: [f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
    let [x, y, z] = d;
    let mut b = Vec::with_capacity(sh_coeff_count(degree));
    let mut g = Vec::with_capacity(sh_coeff_count(degree));
    b.push(SH_C0);
    g.push([0.0; 3]);
    if degree >= 1 {
        b.push(-SH_C1 * y);
        g.push([0.0, -SH_C1, 0.0]);
        b.push(SH_C1 * z);
        g.push([0.0, 0.0, SH_C1]);
        b.push(-SH_C1 * x);
        g.push([-SH_C1, 0.0, 0.0]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.push(SH_C2[0] * x * y);
        g.push([SH_C2[0] * y, SH_C2[0] * x, 0.0]);
        b.push(SH_C2[1] * y * z);
        g.push([0.0, SH_C2[1] * z, SH_C2[1] * y]);
        b.push(SH_C2[2] * (2.0 * zz - xx - yy));
        g.push([-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z]);
        b.push(SH_C2[3] * x * z);
        g.push([SH_C2[3] * z, 0.0, SH_C2[3] * x]);
        b.push(SH_C2[4] * (xx - yy));
        g.push([2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c = SH_C3;
        b.push(c[0] * y * (3.0 * xx - yy));
        g.push([c[0] * 6.0 * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0]);
        b.push(c[1] * x * y * z);
        g.push([c[1] * y * z, c[1] * x * z, c[1] * x * y]);
        b.push(c[2] * y * (4.0 * zz - xx - yy));
        g.push([
            c[2] * (-2.0 * x * y),
            c[2] * (4.0 * zz - xx - 3.0 * yy),
            c[2] * 8.0 * y * z,
        ]);
        b.push(c[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy));
        g.push([
            c[3] * (-6.0 * x * z),
            c[3] * (-6.0 * y * z),
            c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ]);
        b.push(c[4] * x * (4.0 * zz - xx - yy));
        g.push([
            c[4] * (4.0 * zz - 3.0 * xx - yy),
            c[4] * (-2.0 * x * y),
            c[4] * 8.0 * x * z,
        ]);
        b.push(c[5] * z * (xx - yy));
        g.push([c[5] * 2.0 * x * z, c[5] * (-2.0 * y * z), c[5] * (xx - yy)]);
        b.push(c[6] * x * (xx - 3.0 * yy));
        g.push([c[6] * (3.0 * xx - 3.0 * yy), c[6] * (-6.0 * x * y), 0.0]);
    }
    (b, g)
}

/// Evaluated colour and which channels hit the zero clamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorSample {
    pub rgb: [f64; 3],
    pub clamped: [bool; 3],
}

fn normalize(dir: [f64; 3]) -> Result<([f64; 3], f64)> {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput(format!(
            "view direction {dir:?} has zero length"
        )));
    }
    Ok((dir.map(|c| c / n), n))
}

/// RGB = Σ_k c_k Y_k(dir) + 0.5, clamped at zero.
pub fn eval_color(coeffs: &[f64], degree: u8, dir: [f64; 3]) -> Result<ColorSample> {
    let k = sh_coeff_count(degree);
    if coeffs.len() != 3 * k {
        return Err(Error::InvalidInput(format!(
            "{} colour coefficients for degree {degree}, expected {}",
            coeffs.len(),
            3 * k
        )));
    }
    let (unit, _) = normalize(dir)?;
    let (basis, _) = sh_basis(degree, unit);
    let mut rgb = [0.5; 3];
    for (j, b) in basis.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += b * coeffs[3 * j + ch];
        }
    }
    let clamped = rgb.map(|v| v < 0.0);
    Ok(ColorSample {
        rgb: rgb.map(|v| v.max(0.0)),
        clamped,
    })
}

/// Pulls `d_rgb` back to the coefficients (accumulated into `d_coeffs`) and
/// returns the gradient on the unnormalized direction.
pub fn eval_color_vjp(
    coeffs: &[f64],
    degree: u8,
    dir: [f64; 3],
    clamped: [bool; 3],
    d_rgb: [f64; 3],
    d_coeffs: &mut [f64],
) -> [f64; 3] {
    let d_rgb = [0, 1, 2].map(|c| if clamped[c] { 0.0 } else { d_rgb[c] });
    if degree == 0 {
        for ch in 0..3 {
            d_coeffs[ch] += SH_C0 * d_rgb[ch];
        }
        return [0.0; 3];
    }
    let Ok((unit, norm)) = normalize(dir) else {
        return [0.0; 3];
    };
    let (basis, grads) = sh_basis(degree, unit);
    let mut d_unit = [0.0; 3];
    for (j, (b, g)) in basis.iter().zip(&grads).enumerate() {
        let mut dot = 0.0;
        for ch in 0..3 {
            d_coeffs[3 * j + ch] += b * d_rgb[ch];
            dot += coeffs[3 * j + ch] * d_rgb[ch];
        }
        for a in 0..3 {
            d_unit[a] += dot * g[a];
        }
    }
    let proj: f64 = (0..3).map(|a| d_unit[a] * unit[a]).sum();
    [0, 1, 2].map(|a| (d_unit[a] - unit[a] * proj) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_zero_offset() {
        let c = eval_color(&[0.0; 3], 0, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(c.rgb, [0.5; 3]);
    }

    #[test]
    fn degree_zero_is_view_independent() {
        let coeffs = [0.3, -0.7, 1.2];
        let a = eval_color(&coeffs, 0, [0.0, 0.0, 1.0]).unwrap();
        let b = eval_color(&coeffs, 0, [0.3, -0.8, -2.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_direction_rejected() {
        assert!(eval_color(&[0.0; 12], 1, [0.0; 3]).is_err());
    }

    #[test]
    fn band_one_z_difference() {
        let mut coeffs = vec![0.0; 12];
        coeffs[0] = 0.4;
        // band-1 z coefficient sits at basis index 2
        coeffs[3 * 2] = 0.3;
        coeffs[3 * 2 + 1] = 0.3;
        coeffs[3 * 2 + 2] = 0.3;
        let up = eval_color(&coeffs, 1, [0.0, 0.0, 1.0]).unwrap();
        let down = eval_color(&coeffs, 1, [0.0, 0.0, -1.0]).unwrap();
        // direct Y_1^0 evaluation: sqrt(3 / 4π) z
        let y10 = (3.0 / (4.0 * std::f64::consts::PI)).sqrt();
        for ch in 0..3 {
            assert!((up.rgb[ch] - down.rgb[ch] - 2.0 * 0.3 * y10).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_gradients_match_finite_difference() {
        let d = [0.3, -0.5, 0.8];
        let (_, g) = sh_basis(3, d);
        let h = 1e-6;
        for a in 0..3 {
            let mut p = d;
            let mut m = d;
            p[a] += h;
            m[a] -= h;
            let (bp, _) = sh_basis(3, p);
            let (bm, _) = sh_basis(3, m);
            for j in 0..16 {
                let fd = (bp[j] - bm[j]) / (2.0 * h);
                assert!((fd - g[j][a]).abs() < 1e-8, "basis {j} axis {a}");
            }
        }
    }

    #[test]
    fn direction_vjp_matches_finite_difference() {
        let coeffs: Vec<f64> = (0..48).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.05).collect();
        let dir = [0.4, 0.7, -1.3];
        let w = [0.3, -0.6, 0.9];
        let f = |d: [f64; 3]| {
            let c = eval_color(&coeffs, 3, d).unwrap();
            (0..3).map(|ch| w[ch] * c.rgb[ch]).sum::<f64>()
        };
        let c = eval_color(&coeffs, 3, dir).unwrap();
        let mut dc = vec![0.0; 48];
        let dd = eval_color_vjp(&coeffs, 3, dir, c.clamped, w, &mut dc);
        for a in 0..3 {
            let h = 1e-6;
            let mut p = dir;
            let mut m = dir;
            p[a] += h;
            m[a] -= h;
            let fd = (f(p) - f(m)) / (2.0 * h);
            assert!((fd - dd[a]).abs() < 1e-7, "axis {a}: {fd} vs {}", dd[a]);
        }
    }
}
