//! Langevin parameter update: an Adam step on every group, then Gaussian
//! noise on positions only, shaped by each Gaussian's covariance and gated
//! off for opaque Gaussians.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{sigmoid, GaussianGrads, GaussianSet, Group};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub lambda_noise: f64,
    /// Sharpness of the opacity gate.
    pub k: f64,
    /// Opacity at which the gate is one half.
    pub t: f64,
    /// Use the gate argument exactly as typeset, `σ(-k(t - o))`, which
    /// favours opaque Gaussians. Off by default.
    pub gate_as_printed: bool,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            lambda_noise: 5e5,
            k: 100.0,
            t: 0.005,
            gate_as_printed: false,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.t > 0.0 && self.t < 1.0 && self.lambda_noise >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise parameters need k > 0, t ∈ (0,1), λ_noise ≥ 0; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn gate(&self, opacity: f64) -> f64 {
        if self.gate_as_printed {
            sigmoid(-self.k * (self.t - opacity))
        } else {
            noise_gate(opacity, self.k, self.t)
        }
    }
}

/// `σ(-k(o - t))`: close to 1 for dead Gaussians, close to 0 for opaque ones.
pub fn noise_gate(opacity: f64, k: f64, t: f64) -> f64 {
    sigmoid(-k * (opacity - t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub position_init: f64,
    pub position_final: f64,
    /// Multiplies both position rates (3DGS "spatial_lr_scale").
    pub position_scale: f64,
    pub total_steps: u64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            position_scale: 1.0,
            total_steps: 30_000,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.position_init,
            self.position_final,
            self.position_scale,
            self.scale,
            self.rotation,
            self.opacity,
            self.color,
        ];
        if rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "learning rates must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Geometric interpolation `a·(b/a)^(step/total)`, held at `b` past the end.
    pub fn position_rate(&self, step: u64) -> f64 {
        let (a, b) = (self.position_init, self.position_final);
        let frac = if self.total_steps == 0 {
            0.0
        } else {
            (step.min(self.total_steps) as f64) / self.total_steps as f64
        };
        self.position_scale * a * (b / a).powf(frac)
    }

    pub fn rate(&self, group: Group, step: u64) -> f64 {
        match group {
            Group::Position => self.position_rate(step),
            Group::Scale => self.scale,
            Group::Rotation => self.rotation,
            Group::Opacity => self.opacity,
            Group::Color => self.color,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First/second moments per parameter group, shaped like the Gaussian set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: [Vec<f64>; 5],
    pub second: [Vec<f64>; 5],
    /// Adam steps taken per group; drives bias correction.
    pub steps: [u64; 5],
}

impl OptimizerState {
    pub fn new(set: &GaussianSet) -> Self {
        let zeros = |g: Group| vec![0.0; set.group(g).len()];
        OptimizerState {
            first: Group::ALL.map(zeros),
            second: Group::ALL.map(zeros),
            steps: [0; 5],
        }
    }

    /// Grows the buffers with zeros to match `set`.
    pub fn resize_to(&mut self, set: &GaussianSet) {
        for g in Group::ALL {
            let n = set.group(g).len();
            self.first[g.index()].resize(n, 0.0);
            self.second[g.index()].resize(n, 0.0);
        }
    }

    /// Zeros the moments of Gaussian `i` in every group.
    pub fn reset(&mut self, i: usize, sh_degree: u8) {
        for g in Group::ALL {
            let s = g.stride(sh_degree);
            self.first[g.index()][s * i..s * (i + 1)].fill(0.0);
            self.second[g.index()][s * i..s * (i + 1)].fill(0.0);
        }
    }

    pub fn matches(&self, set: &GaussianSet) -> bool {
        Group::ALL.iter().all(|&g| {
            self.first[g.index()].len() == set.group(g).len()
                && self.second[g.index()].len() == set.group(g).len()
        })
    }
}

/// One Adam update of a single parameter buffer.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    lr: f64,
    adam: &AdamParams,
) {
    let bias1 = 1.0 - adam.beta1.powi(step as i32);
    let bias2 = 1.0 - adam.beta2.powi(step as i32);
    for k in 0..params.len() {
        let g = grads[k];
        first[k] = adam.beta1 * first[k] + (1.0 - adam.beta1) * g;
        second[k] = adam.beta2 * second[k] + (1.0 - adam.beta2) * g * g;
        let m_hat = first[k] / bias1;
        let v_hat = second[k] / bias2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + adam.eps);
    }
}

/// `lr_now · gate(o_i) · Σ_i η_i` for every Gaussian, η ~ N(0, I). Draws three
/// normals per Gaussian in index order. In planar mode the z component is
/// zeroed after drawing.
pub fn position_noise<R: Rng + ?Sized>(
    set: &GaussianSet,
    lr_now: f64,
    params: &NoiseParams,
    planar: bool,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let eta = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let gate = params.gate(set.opacity(i));
        let e = set.covariance(i)? * eta * (lr_now * gate);
        out.push([e.x, e.y, if planar { 0.0 } else { e.z }]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    pub adam: AdamParams,
    pub schedule: LrSchedule,
    pub noise: NoiseParams,
    /// 2D image fitting: the third position component stays fixed.
    pub planar: bool,
}

/// Adam step on all groups at their scheduled rates, then
/// `positions += λ_noise · ε_μ` with the noise computed from the updated
/// parameters.
pub fn sgld_step<R: Rng + ?Sized>(
    set: &mut GaussianSet,
    grads: &GaussianGrads,
    opt: &mut OptimizerState,
    cfg: &SgldConfig,
    step: u64,
    rng: &mut R,
) -> Result<()> {
    if !grads.all_finite() {
        let bad = Group::ALL
            .iter()
            .find(|&&g| grads.group(g).iter().any(|v| !v.is_finite()))
            .copied();
        return Err(Error::NonFinite {
            what: format!("{bad:?} gradient"),
            step,
        });
    }
    if !opt.matches(set) {
        return Err(Error::ContractViolation(
            "optimizer buffers do not mirror the Gaussian set".into(),
        ));
    }
    for g in Group::ALL {
        let gi = g.index();
        opt.steps[gi] += 1;
        let lr = cfg.schedule.rate(g, step);
        adam_update(
            set.group_mut(g),
            grads.group(g),
            &mut opt.first[gi],
            &mut opt.second[gi],
            opt.steps[gi],
            lr,
            &cfg.adam,
        );
    }
    if cfg.noise.lambda_noise > 0.0 {
        let lr_now = cfg.schedule.position_rate(step);
        let noise = position_noise(set, lr_now, &cfg.noise, cfg.planar, rng)?;
        for (i, e) in noise.iter().enumerate() {
            for a in 0..3 {
                set.positions[3 * i + a] += cfg.noise.lambda_noise * e[a];
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_of(n: usize, opacity: f64, raw_scale: [f64; 3], q: [f64; 4]) -> GaussianSet {
        let mut set = GaussianSet::with_capacity(n, 0);
        for i in 0..n {
            set.push([i as f64, 0.5, -0.5], raw_scale, q, opacity, [0.1, 0.2, 0.3])
                .unwrap();
        }
        set
    }

    fn random_grads(set: &GaussianSet, rng: &mut ChaCha8Rng) -> GaussianGrads {
        let mut g = GaussianGrads::zeros_like(set);
        for grp in Group::ALL {
            for v in g.group_mut(grp) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        g
    }

    #[test]
    fn gate_values() {
        assert!((noise_gate(0.005, 100.0, 0.005) - 0.5).abs() < 1e-15);
        assert!(noise_gate(0.9999, 100.0, 0.005) < 1e-40);
        assert!((noise_gate(0.0, 100.0, 0.005) - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_interpolation() {
        let s = LrSchedule {
            total_steps: 1000,
            ..LrSchedule::default()
        };
        assert!((s.position_rate(0) - 1.6e-4).abs() < 1e-12);
        assert!((s.position_rate(1000) - 1.6e-6).abs() < 1e-12);
        for step in [1, 250, 500, 999] {
            let want = 1.6e-4 * (1.6e-6f64 / 1.6e-4).powf(step as f64 / 1000.0);
            assert!((s.position_rate(step) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_without_noise_is_a_no_op() {
        let mut set = set_of(4, 0.3, [0.1; 3], [1.0, 0.0, 0.0, 0.0]);
        let before = set.clone();
        let mut opt = OptimizerState::new(&set);
        let cfg = SgldConfig {
            adam: AdamParams::default(),
            schedule: LrSchedule::default(),
            noise: NoiseParams {
                lambda_noise: 0.0,
                ..NoiseParams::default()
            },
            planar: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        sgld_step(&mut set, &GaussianGrads::zeros_like(&before), &mut opt, &cfg, 0, &mut rng)
            .unwrap();
        assert_eq!(set, before);
    }

    #[test]
    fn matches_textbook_adam_bitwise_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut set = set_of(5, 0.4, [0.2, -0.1, 0.3], [0.9, 0.1, -0.2, 0.3]);
        let mut reference = set.clone();
        let mut opt = OptimizerState::new(&set);
        let cfg = SgldConfig {
            adam: AdamParams::default(),
            schedule: LrSchedule {
                total_steps: 10,
                ..LrSchedule::default()
            },
            noise: NoiseParams {
                lambda_noise: 0.0,
                ..NoiseParams::default()
            },
            planar: false,
        };
        let mut m: Vec<Vec<f64>> = Group::ALL.iter().map(|&g| vec![0.0; set.group(g).len()]).collect();
        let mut v = m.clone();
        for step in 0..10u64 {
            let grads = random_grads(&set, &mut rng);
            sgld_step(&mut set, &grads, &mut opt, &cfg, step, &mut rng).unwrap();
            // textbook Adam (Kingma & Ba, Algorithm 1)
            let t = (step + 1) as i32;
            for (gi, &grp) in Group::ALL.iter().enumerate() {
                let lr = match grp {
                    Group::Position => 1.6e-4 * (1.6e-6f64 / 1.6e-4).powf(step as f64 / 10.0),
                    Group::Scale => 5e-3,
                    Group::Rotation => 1e-3,
                    Group::Opacity => 5e-2,
                    Group::Color => 2.5e-3,
                };
                let p = reference.group_mut(grp);
                for k in 0..p.len() {
                    let g = grads.group(grp)[k];
                    m[gi][k] = 0.9 * m[gi][k] + (1.0 - 0.9) * g;
                    v[gi][k] = 0.999 * v[gi][k] + (1.0 - 0.999) * g * g;
                    let m_hat = m[gi][k] / (1.0 - 0.9f64.powi(t));
                    let v_hat = v[gi][k] / (1.0 - 0.999f64.powi(t));
                    p[k] -= lr * m_hat / (v_hat.sqrt() + 1e-15);
                }
            }
            for grp in Group::ALL {
                let a: Vec<u64> = set.group(grp).iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = reference.group(grp).iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b, "{grp:?} at step {step}");
            }
        }
    }

    #[test]
    fn noise_only_touches_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = set_of(6, 0.003, [0.4, -0.2, 0.1], [0.8, 0.3, 0.1, -0.2]);
        let grads = random_grads(&base, &mut rng);
        let run = |lambda: f64| {
            let mut set = base.clone();
            let mut opt = OptimizerState::new(&set);
            let cfg = SgldConfig {
                adam: AdamParams::default(),
                schedule: LrSchedule::default(),
                noise: NoiseParams {
                    lambda_noise: lambda,
                    ..NoiseParams::default()
                },
                planar: false,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for step in 0..3 {
                sgld_step(&mut set, &grads, &mut opt, &cfg, step, &mut rng).unwrap();
            }
            set
        };
        let quiet = run(0.0);
        let noisy = run(5e5);
        for g in [Group::Scale, Group::Rotation, Group::Opacity, Group::Color] {
            assert_eq!(quiet.group(g), noisy.group(g));
        }
        assert_ne!(quiet.positions, noisy.positions);
    }

    #[test]
    fn opaque_gaussians_get_no_noise() {
        let set = set_of(3, 0.999_999, [0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lr = 1.6e-4;
        for e in position_noise(&set, lr, &NoiseParams::default(), false, &mut rng).unwrap() {
            let n = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
            assert!(n < 1e-30 * lr);
        }
    }

    #[test]
    fn planar_noise_keeps_z() {
        let set = set_of(3, 0.001, [0.0; 3], [0.7, 0.5, 0.3, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for e in position_noise(&set, 1.0, &NoiseParams::default(), true, &mut rng).unwrap() {
            assert_eq!(e[2], 0.0);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut set = set_of(2, 0.3, [0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        let mut opt = OptimizerState::new(&set);
        let mut grads = GaussianGrads::zeros_like(&set);
        grads.raw_scales[1] = f64::NAN;
        let cfg = SgldConfig {
            adam: AdamParams::default(),
            schedule: LrSchedule::default(),
            noise: NoiseParams::default(),
            planar: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sgld_step(&mut set, &grads, &mut opt, &cfg, 7, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 7, .. }));
    }

    #[test]
    fn printed_gate_sign_is_the_mirror_image() {
        let p = NoiseParams {
            gate_as_printed: true,
            ..NoiseParams::default()
        };
        assert!(p.gate(0.9) > 0.99);
        assert!(NoiseParams::default().gate(0.9) < 1e-30);
    }
}
