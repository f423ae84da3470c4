//! Moving dead Gaussians onto live ones.
//!
//! A live Gaussian with opacity `o` that receives `N - 1` dead Gaussians is
//! replaced by `N` co-located copies whose opacity and covariance are chosen
//! so that the composited result matches the original as closely as
//! possible: exactly at the centre, and in integral along any line through
//! the centre.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gaussian::{classify_liveness, logit, GaussianSet, Group, LivenessMask};
use crate::mcmc::OptimizerState;
use crate::numeric::NeumaierSum;

/// Largest number of co-located copies one target may be split into.
pub const N_MAX: usize = 51;

/// Relocated opacities are clamped into `[OPACITY_FLOOR, OPACITY_CEIL]`.
/// The floor sits just above the default liveness threshold.
pub const OPACITY_FLOOR: f64 = 0.005 + 1e-4;
pub const OPACITY_CEIL: f64 = 1.0 - 1e-7;

const BINOMIAL: [[u64; N_MAX]; N_MAX] = binomial_table();

const fn binomial_table() -> [[u64; N_MAX]; N_MAX] {
    let mut t = [[0u64; N_MAX]; N_MAX];
    let mut n = 0;
    while n < N_MAX {
        t[n][0] = 1;
        let mut k = 1;
        while k <= n {
            t[n][k] = t[n - 1][k - 1] + t[n - 1][k];
            k += 1;
        }
        n += 1;
    }
    t
}

/// `C(n, k)` for `n < N_MAX`; exact as `f64` since every entry is below 2⁵³.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    BINOMIAL[n][k] as f64
}

fn check_inputs(o_old: f64, n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidInput(format!("split count must be ≥ 1, got {n}")));
    }
    if n > N_MAX {
        return Err(Error::InvalidInput(format!(
            "split count {n} exceeds the maximum of {N_MAX}"
        )));
    }
    if !(o_old > 0.0 && o_old < 1.0) {
        return Err(Error::InvalidInput(format!(
            "opacity must lie in (0, 1), got {o_old}"
        )));
    }
    Ok(())
}

/// `1 - (1 - o)^(1/N)` without clamping.
pub fn relocated_opacity_exact(o_old: f64, n: usize) -> Result<f64> {
    check_inputs(o_old, n)?;
    // -expm1(ln1p(-o)/N) keeps full precision for small o
    Ok(-((-o_old).ln_1p() / n as f64).exp_m1())
}

/// Per-copy opacity after splitting into `n` copies, clamped to the
/// admissible range.
pub fn relocated_opacity(o_old: f64, n: usize) -> Result<f64> {
    Ok(relocated_opacity_exact(o_old, n)?.clamp(OPACITY_FLOOR, OPACITY_CEIL))
}

/// Integral of the composited profile of `n` copies at opacity `o_new`,
/// in units of the integral of a single unit-opacity profile.
fn composed_mass(o_new: f64, n: usize) -> f64 {
    let mut acc = NeumaierSum::default();
    for i in 1..=n {
        let mut power = o_new;
        for k in 0..i {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            acc.add(sign * binomial(i - 1, k) * power / ((k + 1) as f64).sqrt());
            power *= o_new;
        }
    }
    acc.value()
}

/// Factor `f` with `Σ_new = f·Σ_old`; scales are multiplied by `√f`.
pub fn relocated_covariance_factor(o_old: f64, n: usize) -> Result<f64> {
    let o_new = relocated_opacity_exact(o_old, n)?;
    let denom = composed_mass(o_new, n);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::DegenerateRelocation {
            opacity: o_old,
            count: n,
            value: denom,
        });
    }
    let f = (o_old / denom).powi(2);
    if !(f > 0.0 && f.is_finite()) {
        return Err(Error::DegenerateRelocation {
            opacity: o_old,
            count: n,
            value: f,
        });
    }
    Ok(f)
}

/// Which dead Gaussians move onto which live targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelocationPlan {
    /// `(source, target)` pairs in ascending source order.
    pub assignments: Vec<(usize, usize)>,
    /// Target index to split count `N` (the target plus its sources).
    pub counts: BTreeMap<usize, usize>,
    /// Sources whose redraws all hit saturated targets.
    pub dropped: Vec<usize>,
    /// Set when there were sources but no live Gaussian to receive them.
    pub no_live_targets: bool,
    /// Liveness the plan was built against.
    pub mask: Option<LivenessMask>,
}

impl RelocationPlan {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn relocated(&self) -> usize {
        self.assignments.len()
    }
}

/// Assigns each dead Gaussian to a live target drawn with probability
/// proportional to opacity.
pub fn build_plan<R: Rng + ?Sized>(
    mask: &LivenessMask,
    opacities: &[f64],
    rng: &mut R,
) -> Result<RelocationPlan> {
    build_plan_capped(mask, &mask.dead_indices(), opacities, N_MAX, rng)
}

/// Like [`build_plan`] but for an explicit list of sources and an arbitrary
/// per-target cap. A draw landing on a target already at `max_count` is
/// redrawn up to `N_MAX` times before the source is dropped.
pub fn build_plan_capped<R: Rng + ?Sized>(
    mask: &LivenessMask,
    sources: &[usize],
    opacities: &[f64],
    max_count: usize,
    rng: &mut R,
) -> Result<RelocationPlan> {
    if mask.live.len() != opacities.len() {
        return Err(Error::ContractViolation(format!(
            "liveness mask of {} entries for {} opacities",
            mask.live.len(),
            opacities.len()
        )));
    }
    let mut plan = RelocationPlan {
        mask: Some(mask.clone()),
        ..RelocationPlan::default()
    };
    if sources.is_empty() {
        return Ok(plan);
    }
    let live = mask.live_indices();
    if live.is_empty() {
        plan.no_live_targets = true;
        plan.dropped = sources.to_vec();
        return Ok(plan);
    }
    let weights: Vec<f64> = live.iter().map(|&i| opacities[i]).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| {
        Error::InvalidInput(format!("live opacities are not valid sampling weights: {e}"))
    })?;
    let mut sorted = sources.to_vec();
    sorted.sort_unstable();
    for src in sorted {
        if mask.live.get(src) != Some(&false) {
            return Err(Error::ContractViolation(format!(
                "relocation source {src} is not dead"
            )));
        }
        let mut placed = false;
        for _ in 0..=N_MAX {
            let target = live[dist.sample(rng)];
            let n = plan.counts.entry(target).or_insert(1);
            if *n < max_count {
                *n += 1;
                plan.assignments.push((src, target));
                placed = true;
                break;
            }
        }
        if !placed {
            plan.dropped.push(src);
        }
    }
    Ok(plan)
}

/// Applies a plan: each target and its sources become `N` copies of the
/// target with opacity and scale adjusted. All inputs are read before any
/// slot is written. Target moments are zeroed, source moments are kept.
pub fn apply_plan(
    set: &mut GaussianSet,
    opt: &mut OptimizerState,
    plan: &RelocationPlan,
) -> Result<()> {
    if plan.is_empty() {
        return Ok(());
    }
    let mask = plan.mask.as_ref().ok_or_else(|| {
        Error::ContractViolation("relocation plan carries no liveness snapshot".into())
    })?;
    if mask.live.len() != set.len() || *mask != classify_liveness(set, mask.threshold) {
        return Err(Error::ContractViolation(
            "relocation plan was built against a different liveness state".into(),
        ));
    }
    if !opt.matches(set) {
        return Err(Error::ContractViolation(
            "optimizer buffers do not mirror the Gaussian set".into(),
        ));
    }
    for (&target, &n) in &plan.counts {
        if !mask.live[target] || n > N_MAX {
            return Err(Error::ContractViolation(format!(
                "relocation target {target} with count {n} is invalid"
            )));
        }
    }

    struct Update {
        raw_opacity: f64,
        log_scale_shift: f64,
    }
    let mut updates = BTreeMap::new();
    for (&target, &n) in &plan.counts {
        if n < 2 {
            continue;
        }
        let o_old = set.opacity(target);
        let o_new = relocated_opacity(o_old, n)?;
        let f = relocated_covariance_factor(o_old, n)?;
        updates.insert(
            target,
            Update {
                raw_opacity: logit(o_new),
                log_scale_shift: 0.5 * f.ln(),
            },
        );
    }

    for (&target, u) in &updates {
        set.raw_opacities[target] = u.raw_opacity;
        for a in 0..3 {
            set.raw_scales[3 * target + a] += u.log_scale_shift;
        }
        opt.reset(target, set.sh_degree);
    }
    // targets are never sources, so copying the updated target is the same
    // as deriving each source from the snapshot
    for &(src, target) in &plan.assignments {
        set.copy_slot(target, src);
    }
    Ok(())
}

/// Outcome of one growth step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GrowReport {
    pub requested: usize,
    pub appended: usize,
    pub plan: RelocationPlan,
}

/// Activates `min(ceil(rate·live), cap - live)` more Gaussians. Dead slots
/// are reused first; new slots are appended for the remainder. Activated
/// slots are filled by splitting opacity-sampled live targets.
pub fn grow_step<R: Rng + ?Sized>(
    set: &mut GaussianSet,
    opt: &mut OptimizerState,
    current_live: usize,
    cap: usize,
    rate: f64,
    threshold: f64,
    rng: &mut R,
) -> Result<GrowReport> {
    if cap > set.capacity {
        return Err(Error::InvalidParameter(format!(
            "growth cap {cap} exceeds capacity {}",
            set.capacity
        )));
    }
    if !(rate >= 0.0) {
        return Err(Error::InvalidParameter(format!("growth rate {rate} is negative")));
    }
    let wanted = (rate * current_live as f64).ceil() as usize;
    let delta = wanted.min(cap.saturating_sub(current_live));
    if delta == 0 {
        return Ok(GrowReport::default());
    }
    let mask = classify_liveness(set, threshold);
    let appended = delta
        .saturating_sub(mask.dead_count())
        .min(cap.saturating_sub(set.len()));
    set.push_placeholders(appended);
    opt.resize_to(set);
    let mask = classify_liveness(set, threshold);
    let sources: Vec<usize> = mask.dead_indices().into_iter().take(delta).collect();
    let plan = build_plan_capped(&mask, &sources, &set.opacities(), N_MAX, rng)?;
    apply_plan(set, opt, &plan)?;
    Ok(GrowReport {
        requested: delta,
        appended,
        plan,
    })
}

/// Group-wise equality of slot `i` in two sets, used to check that
/// relocation leaves untouched Gaussians alone.
pub fn slot_bits_equal(a: &GaussianSet, b: &GaussianSet, i: usize) -> bool {
    Group::ALL.iter().all(|&g| {
        let s = g.stride(a.sh_degree);
        a.group(g)[s * i..s * (i + 1)]
            .iter()
            .zip(&b.group(g)[s * i..s * (i + 1)])
            .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::DEFAULT_LIVE_THRESHOLD;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_with(opacities: &[f64]) -> GaussianSet {
        let mut set = GaussianSet::with_capacity(opacities.len() + 16, 0);
        for (i, &o) in opacities.iter().enumerate() {
            let x = i as f64;
            set.push([x, 2.0 * x, -x], [0.1 * x, -0.2, 0.3], [1.0, 0.1 * x, 0.2, -0.1], o, [x, 0.5, -0.5])
                .unwrap();
        }
        set
    }

    #[test]
    fn binomial_table_spot_values() {
        assert_eq!(binomial(0, 0), 1.0);
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(50, 25), 126_410_606_437_752.0);
        assert_eq!(binomial(3, 4), 0.0);
    }

    #[test]
    fn opacity_examples() {
        assert_eq!(relocated_opacity(0.5, 1).unwrap(), 0.5);
        assert!((relocated_opacity(0.75, 2).unwrap() - 0.5).abs() < 1e-15);
        let o = relocated_opacity(0.95, 4).unwrap();
        assert!((o - (1.0 - 0.05f64.powf(0.25))).abs() < 1e-15);
        assert!((o - 0.52713).abs() < 1e-5);
        assert!(matches!(relocated_opacity(0.5, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn covariance_factor_examples() {
        assert!((relocated_covariance_factor(0.3, 1).unwrap() - 1.0).abs() < 1e-15);
        let f = relocated_covariance_factor(0.75, 2).unwrap();
        let denom = 0.5 + 0.5 - 0.25 / 2f64.sqrt();
        assert!((f - 0.5625 / (denom * denom)).abs() < 1e-14);
        assert!((f - 0.830016).abs() < 2e-6);
        assert!(matches!(
            relocated_covariance_factor(0.5, N_MAX + 1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn centre_alpha_is_exact_over_the_grid() {
        for step in 1..100 {
            let o = step as f64 / 100.0;
            for n in 1..=N_MAX {
                let o_new = relocated_opacity_exact(o, n).unwrap();
                let composed = 1.0 - (1.0 - o_new).powi(n as i32);
                assert!((composed - o).abs() < 1e-12, "o {o} n {n}");
            }
        }
    }

    #[test]
    fn factor_positive_and_opacity_decreasing() {
        for step in 1..100 {
            let o = step as f64 / 100.0;
            let mut prev = f64::INFINITY;
            for n in 1..=N_MAX {
                let f = relocated_covariance_factor(o, n).unwrap();
                assert!(f > 0.0 && f.is_finite());
                let o_new = relocated_opacity_exact(o, n).unwrap();
                assert!(o_new < prev);
                prev = o_new;
            }
        }
    }

    #[test]
    fn no_dead_gives_empty_plan() {
        let set = set_with(&[0.3, 0.4]);
        let mask = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD);
        let plan = build_plan(&mask, &set.opacities(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(plan.is_empty() && plan.counts.is_empty());
    }

    #[test]
    fn single_live_target_takes_everything() {
        let set = set_with(&[0.001, 0.6, 0.002, 0.0001]);
        let mask = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD);
        let plan = build_plan(&mask, &set.opacities(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(plan.assignments, vec![(0, 1), (2, 1), (3, 1)]);
        assert_eq!(plan.counts[&1], 4);
    }

    #[test]
    fn no_live_gaussians_flags_the_plan() {
        let set = set_with(&[0.001, 0.002]);
        let mask = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD);
        let plan = build_plan(&mask, &set.opacities(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(plan.no_live_targets && plan.is_empty());
        assert_eq!(plan.dropped, vec![0, 1]);
    }

    #[test]
    fn saturated_targets_are_respected() {
        let mut ops = vec![0.9];
        ops.extend(std::iter::repeat_n(0.001, 120));
        let mut set = GaussianSet::with_capacity(ops.len(), 0);
        for &o in &ops {
            set.push([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0, 0.0], o, [0.0; 3]).unwrap();
        }
        let mask = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD);
        let plan = build_plan(&mask, &set.opacities(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(plan.counts[&0], N_MAX);
        assert_eq!(plan.relocated(), N_MAX - 1);
        assert_eq!(plan.dropped.len(), 120 - (N_MAX - 1));
    }

    #[test]
    fn four_way_split_matches_the_closed_form() {
        let mut set = set_with(&[0.001, 0.002, 0.95, 0.003]);
        let before = set.clone();
        let mut opt = OptimizerState::new(&set);
        for buf in opt.first.iter_mut().chain(opt.second.iter_mut()) {
            buf.fill(0.7);
        }
        let mask = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD);
        let plan = build_plan(&mask, &set.opacities(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        apply_plan(&mut set, &mut opt, &plan).unwrap();
        let scale_mult = relocated_covariance_factor(0.95, 4).unwrap().sqrt();
        for i in 0..4 {
            assert_eq!(set.position(i), before.position(2));
            assert_eq!(set.rotation(i), before.rotation(2));
            assert_eq!(set.color_coeffs(i), before.color_coeffs(2));
            assert!((set.opacity(i) - 0.527_129_2).abs() < 1e-6);
            for a in 0..3 {
                let want = before.scale(2)[a] * scale_mult;
                assert!((set.scale(i)[a] - want).abs() < 1e-13 * want);
            }
        }
        let s = Group::Position.stride(0);
        assert!(opt.first[0][s * 2..s * 3].iter().all(|&v| v == 0.0));
        assert!(opt.first[0][0..s].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn empty_plan_is_a_no_op() {
        let mut set = set_with(&[0.3, 0.4]);
        let before = set.clone();
        let mut opt = OptimizerState::new(&set);
        apply_plan(&mut set, &mut opt, &RelocationPlan::default()).unwrap();
        assert_eq!(set, before);
        assert_eq!(opt, OptimizerState::new(&before));
    }

    #[test]
    fn stale_plan_is_rejected() {
        let mut set = set_with(&[0.001, 0.6]);
        let mask = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD);
        let plan = build_plan(&mask, &set.opacities(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        set.raw_opacities[0] = logit(0.5);
        let mut opt = OptimizerState::new(&set);
        assert!(matches!(
            apply_plan(&mut set, &mut opt, &plan),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn growth_counts() {
        let mut set = set_with(&[0.5; 100]);
        set.capacity = 400;
        let mut opt = OptimizerState::new(&set);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = grow_step(&mut set, &mut opt, 100, 400, 0.05, DEFAULT_LIVE_THRESHOLD, &mut rng).unwrap();
        assert_eq!((r.requested, r.appended), (5, 5));
        assert_eq!(set.len(), 105);
        assert_eq!(classify_liveness(&set, DEFAULT_LIVE_THRESHOLD).live_count(), 105);
        assert!(opt.matches(&set));

        let before = set.clone();
        let r = grow_step(&mut set, &mut opt, 105, 105, 0.05, DEFAULT_LIVE_THRESHOLD, &mut rng).unwrap();
        assert_eq!(r.requested, 0);
        assert_eq!(set, before);
    }

    #[test]
    fn growth_reuses_dead_slots_first() {
        let mut set = set_with(&[0.5, 0.001, 0.5, 0.5]);
        let mut opt = OptimizerState::new(&set);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = grow_step(&mut set, &mut opt, 3, 10, 0.5, DEFAULT_LIVE_THRESHOLD, &mut rng).unwrap();
        assert_eq!((r.requested, r.appended), (2, 1));
        assert_eq!(set.len(), 5);
        assert_eq!(r.plan.assignments.iter().map(|a| a.0).collect::<Vec<_>>(), vec![1, 4]);
    }

    proptest! {
        #[test]
        fn untouched_slots_stay_bitwise_identical(
            ops in prop::collection::vec(prop_oneof![0.0001f64..0.004, 0.01f64..0.99], 2..40),
            seed in any::<u64>(),
        ) {
            let mut set = set_with(&ops);
            let before = set.clone();
            let mut opt = OptimizerState::new(&set);
            for (k, buf) in opt.first.iter_mut().enumerate() {
                for (j, v) in buf.iter_mut().enumerate() {
                    *v = (k * 1000 + j) as f64;
                }
            }
            let opt_before = opt.clone();
            let mask = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD);
            let plan = build_plan(&mask, &set.opacities(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            apply_plan(&mut set, &mut opt, &plan).unwrap();
            let mut touched: Vec<usize> = plan.assignments.iter().map(|a| a.0).collect();
            touched.extend(plan.counts.keys());
            for i in 0..ops.len() {
                if !touched.contains(&i) {
                    prop_assert!(slot_bits_equal(&set, &before, i));
                }
                // sources keep their moments
                if plan.assignments.iter().any(|a| a.0 == i) {
                    for g in Group::ALL {
                        let s = g.stride(0);
                        prop_assert_eq!(
                            &opt.first[g.index()][s * i..s * (i + 1)],
                            &opt_before.first[g.index()][s * i..s * (i + 1)]
                        );
                    }
                }
            }
            let live_after = classify_liveness(&set, DEFAULT_LIVE_THRESHOLD).live_count();
            prop_assert_eq!(live_after, mask.live_count() + plan.relocated());
        }
    }
}
