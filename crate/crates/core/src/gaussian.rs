//! Gaussian parameter storage.
//!
//! Parameters are stored raw, structure-of-arrays, one flat `Vec<f64>` per
//! group. Physical values come from the activations: opacity is
//! `logistic(raw)`, scale is `exp(raw)`, and rotations are normalized on use.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Liveness threshold on physical opacity.
pub const DEFAULT_LIVE_THRESHOLD: f64 = 0.005;

/// Maximum supported spherical-harmonic degree.
pub const MAX_SH_DEGREE: u8 = 3;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of colour coefficients (per channel) at a given SH degree.
pub fn sh_coeff_count(degree: u8) -> usize {
    let d = degree as usize + 1;
    d * d
}

/// The five parameter groups, each with its own optimizer moments and rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Position,
    Scale,
    Rotation,
    Opacity,
    Color,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Position,
        Group::Scale,
        Group::Rotation,
        Group::Opacity,
        Group::Color,
    ];

    pub fn index(self) -> usize {
        match self {
            Group::Position => 0,
            Group::Scale => 1,
            Group::Rotation => 2,
            Group::Opacity => 3,
            Group::Color => 4,
        }
    }

    /// Scalars per Gaussian in this group.
    pub fn stride(self, sh_degree: u8) -> usize {
        match self {
            Group::Position | Group::Scale => 3,
            Group::Rotation => 4,
            Group::Opacity => 1,
            Group::Color => 3 * sh_coeff_count(sh_degree),
        }
    }
}

/// Structure-of-arrays Gaussian parameters.
///
/// `len()` slots are allocated; `capacity` bounds how many may ever exist.
/// Slots beyond `len()` are "unused" and are activated by growth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub positions: Vec<f64>,
    pub raw_scales: Vec<f64>,
    /// Quaternions stored as (w, x, y, z).
    pub rotations: Vec<f64>,
    pub raw_opacities: Vec<f64>,
    /// Per Gaussian `sh_coeff_count(sh_degree)` RGB triples, coefficient-major.
    pub colors: Vec<f64>,
    pub sh_degree: u8,
    pub capacity: usize,
}

impl GaussianSet {
    pub fn with_capacity(capacity: usize, sh_degree: u8) -> Self {
        assert!(sh_degree <= MAX_SH_DEGREE, "SH degree above {MAX_SH_DEGREE}");
        let k = 3 * sh_coeff_count(sh_degree);
        GaussianSet {
            positions: Vec::with_capacity(3 * capacity),
            raw_scales: Vec::with_capacity(3 * capacity),
            rotations: Vec::with_capacity(4 * capacity),
            raw_opacities: Vec::with_capacity(capacity),
            colors: Vec::with_capacity(k * capacity),
            sh_degree,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.raw_opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_opacities.is_empty()
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    /// Appends a Gaussian given physical opacity, raw log-scales and a
    /// degree-0 colour coefficient; higher SH coefficients start at zero.
    pub fn push(
        &mut self,
        position: [f64; 3],
        raw_scale: [f64; 3],
        rotation: [f64; 4],
        opacity: f64,
        dc: [f64; 3],
    ) -> Result<usize> {
        if self.len() >= self.capacity {
            return Err(Error::InvalidInput(format!(
                "capacity {} exhausted",
                self.capacity
            )));
        }
        if !(opacity > 0.0 && opacity < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "opacity {opacity} outside (0,1)"
            )));
        }
        self.positions.extend_from_slice(&position);
        self.raw_scales.extend_from_slice(&raw_scale);
        self.rotations.extend_from_slice(&rotation);
        self.raw_opacities.push(logit(opacity));
        self.colors.extend_from_slice(&dc);
        let rest = 3 * (self.coeffs_per_gaussian() - 1);
        self.colors.extend(std::iter::repeat_n(0.0, rest));
        Ok(self.len() - 1)
    }

    /// Allocates `count` unused slots as dead placeholders.
    pub(crate) fn push_placeholders(&mut self, count: usize) {
        for _ in 0..count {
            self.positions.extend_from_slice(&[0.0; 3]);
            self.raw_scales.extend_from_slice(&[0.0; 3]);
            self.rotations.extend_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            self.raw_opacities.push(logit(1e-9));
            let k = 3 * self.coeffs_per_gaussian();
            self.colors.extend(std::iter::repeat_n(0.0, k));
        }
    }

    pub fn group(&self, g: Group) -> &[f64] {
        match g {
            Group::Position => &self.positions,
            Group::Scale => &self.raw_scales,
            Group::Rotation => &self.rotations,
            Group::Opacity => &self.raw_opacities,
            Group::Color => &self.colors,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut Vec<f64> {
        match g {
            Group::Position => &mut self.positions,
            Group::Scale => &mut self.raw_scales,
            Group::Rotation => &mut self.rotations,
            Group::Opacity => &mut self.raw_opacities,
            Group::Color => &mut self.colors,
        }
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        let p = &self.positions[3 * i..3 * i + 3];
        [p[0], p[1], p[2]]
    }

    pub fn raw_scale(&self, i: usize) -> [f64; 3] {
        let s = &self.raw_scales[3 * i..3 * i + 3];
        [s[0], s[1], s[2]]
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.raw_scale(i).map(f64::exp)
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let q = &self.rotations[4 * i..4 * i + 4];
        [q[0], q[1], q[2], q[3]]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.raw_opacities[i])
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.raw_opacities.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn color_coeffs(&self, i: usize) -> &[f64] {
        let k = 3 * self.coeffs_per_gaussian();
        &self.colors[k * i..k * (i + 1)]
    }

    pub fn covariance(&self, i: usize) -> Result<Matrix3<f64>> {
        assemble_covariance(self.raw_scale(i), self.rotation(i))
    }

    /// Copies every parameter of slot `src` onto slot `dst`.
    pub(crate) fn copy_slot(&mut self, src: usize, dst: usize) {
        let degree = self.sh_degree;
        for g in Group::ALL {
            let s = g.stride(degree);
            self.group_mut(g).copy_within(s * src..s * (src + 1), s * dst);
        }
    }

    /// Checks internal shape consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for g in Group::ALL {
            let want = n * g.stride(self.sh_degree);
            if self.group(g).len() != want {
                return Err(Error::ContractViolation(format!(
                    "{g:?} buffer has {} scalars, expected {want}",
                    self.group(g).len()
                )));
            }
        }
        if n > self.capacity {
            return Err(Error::ContractViolation(format!(
                "{n} Gaussians exceed capacity {}",
                self.capacity
            )));
        }
        Ok(())
    }
}

/// Gradients mirroring the layout of a [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub positions: Vec<f64>,
    pub raw_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub raw_opacities: Vec<f64>,
    pub colors: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros_like(set: &GaussianSet) -> Self {
        GaussianGrads {
            positions: vec![0.0; set.positions.len()],
            raw_scales: vec![0.0; set.raw_scales.len()],
            rotations: vec![0.0; set.rotations.len()],
            raw_opacities: vec![0.0; set.raw_opacities.len()],
            colors: vec![0.0; set.colors.len()],
        }
    }

    pub fn group(&self, g: Group) -> &[f64] {
        match g {
            Group::Position => &self.positions,
            Group::Scale => &self.raw_scales,
            Group::Rotation => &self.rotations,
            Group::Opacity => &self.raw_opacities,
            Group::Color => &self.colors,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [f64] {
        match g {
            Group::Position => &mut self.positions,
            Group::Scale => &mut self.raw_scales,
            Group::Rotation => &mut self.rotations,
            Group::Opacity => &mut self.raw_opacities,
            Group::Color => &mut self.colors,
        }
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        for g in Group::ALL {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        Group::ALL
            .iter()
            .all(|&g| self.group(g).iter().all(|v| v.is_finite()))
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = norm4(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "quaternion {q:?} has zero or non-finite norm"
        )));
    }
    let [w, x, y, z] = q.map(|c| c / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Pulls a gradient on the rotation matrix back to the raw (unnormalized)
/// quaternion.
pub fn rotation_matrix_vjp(q: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = norm4(q);
    let [w, x, y, z] = q.map(|c| c / n);
    let g = |i: usize, j: usize| d_r[(i, j)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dn = [dw, dx, dy, dz];
    let unit = [w, x, y, z];
    let proj: f64 = dn.iter().zip(&unit).map(|(a, b)| a * b).sum();
    [
        (dn[0] - unit[0] * proj) / n,
        (dn[1] - unit[1] * proj) / n,
        (dn[2] - unit[2] * proj) / n,
        (dn[3] - unit[3] * proj) / n,
    ]
}

fn norm4(q: [f64; 4]) -> f64 {
    q.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// `R diag(exp(raw_scale))² Rᵀ` for the normalized quaternion.
pub fn assemble_covariance(raw_scale: [f64; 3], rotation: [f64; 4]) -> Result<Matrix3<f64>> {
    let r = rotation_matrix(rotation)?;
    let s = Vector3::from(raw_scale.map(f64::exp));
    let m = r * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    // exact symmetry regardless of rounding order
    Ok((cov + cov.transpose()) * 0.5)
}

/// Per-Gaussian liveness, `live[i] ⇔ o_i ≥ threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct LivenessMask {
    pub live: Vec<bool>,
    pub threshold: f64,
}

impl LivenessMask {
    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }

    pub fn dead_count(&self) -> usize {
        self.live.len() - self.live_count()
    }

    pub fn live_indices(&self) -> Vec<usize> {
        (0..self.live.len()).filter(|&i| self.live[i]).collect()
    }

    pub fn dead_indices(&self) -> Vec<usize> {
        (0..self.live.len()).filter(|&i| !self.live[i]).collect()
    }
}

pub fn classify_liveness(set: &GaussianSet, threshold: f64) -> LivenessMask {
    LivenessMask {
        live: set
            .raw_opacities
            .iter()
            .map(|&r| sigmoid(r) >= threshold)
            .collect(),
        threshold,
    }
}
