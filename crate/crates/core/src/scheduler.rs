//! Noise schedules, forward noising, and the deterministic DDIM step pair.
//!
//! All ladders are indexed by integer level `t ∈ [0, T]` with `ᾱ_0 = 1`. The
//! cumulative products are precomputed once so every step is O(1) in the
//! schedule and bit-reproducible.

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// Default β range of the linear schedule (see `NoiseSchedule::default_ladder`).
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_STEPS: usize = 50;

/// Cumulative signal-retention sequence `ᾱ_0 ..= ᾱ_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-β schedule: `ᾱ_t = Π_{s=1..t} (1 − β_s)`, β linearly spaced.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!("betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}")));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 0..steps {
            let beta = if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64 };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Validates the ladder invariants: `ᾱ_0 = 1`, strictly decreasing, all in (0, 1].
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidArgument(format!("alpha_bar[0] must be 1, got {}", alpha_bar[0])));
        }
        for t in 1..alpha_bar.len() {
            let a = alpha_bar[t];
            if !(a > 0.0 && a <= 1.0) || !(a < alpha_bar[t - 1]) {
                return Err(Error::InvalidArgument(format!("alpha_bar must be strictly decreasing in (0, 1]; violated at t={t} ({a})")));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// A ladder with every `ᾱ_t = 1`. It violates strict monotonicity on
    /// purpose: DDIM steps are the identity on it, which makes it a handy
    /// reference ladder for inversion and reconstruction checks.
    pub fn degenerate(steps: usize) -> Self {
        assert!(steps >= 1);
        Self { alpha_bar: vec![1.0; steps + 1] }
    }

    /// The default editing ladder.
    pub fn default_ladder() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }

    /// Keep every `stride`-th level. The endpoints are preserved, so a strided
    /// ladder spans the same noise range with fewer, larger steps.
    pub fn strided(&self, stride: usize) -> Result<Self> {
        if stride == 0 || !self.steps().is_multiple_of(stride) {
            return Err(Error::InvalidArgument(format!("stride {stride} does not divide {} steps", self.steps())));
        }
        Ok(Self { alpha_bar: self.alpha_bar.iter().copied().step_by(stride).collect() })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_level(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, lo, hi: self.steps() });
        }
        Ok(())
    }
}

/// Free-function form of [`NoiseSchedule::linear`].
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// A latent tensor `(c, h, w)` tagged with the noise level it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Array3<f64>,
    pub timestep: usize,
}

impl Latent {
    pub fn new(data: Array3<f64>, timestep: usize) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent has non-finite entries".into()));
        }
        Ok(Self { data, timestep })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { data: Array3::zeros((c, h, w)), timestep: 0 }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.data.dim();
        [c, h, w]
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn noise_to_level(z0: &Latent, t: usize, eps: &Array3<f64>, schedule: &NoiseSchedule) -> Result<Latent> {
    if z0.timestep != 0 {
        return Err(Error::TimestepMismatch(z0.timestep, 0));
    }
    check_same_shape(&z0.data, eps)?;
    schedule.check_level(t, 0)?;
    let a = schedule.alpha_bar(t);
    let (signal, noise) = (a.sqrt(), (1.0 - a).sqrt());
    let data = Zip::from(&z0.data).and(eps).map_collect(|&z, &e| signal * z + noise * e);
    Ok(Latent { data, timestep: t })
}

/// One deterministic DDIM step `z_t → z_{t−1}`.
pub fn ddim_sample_step(z_t: &Latent, eps_pred: &Array3<f64>, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    schedule.check_level(t, 1)?;
    check_same_shape(&z_t.data, eps_pred)?;
    let data = ddim_transfer(&z_t.data, eps_pred, schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    Ok(Latent { data, timestep: t - 1 })
}

/// One DDIM inversion step `ẑ_{t−1} → ẑ_t`; the algebraic inverse of
/// [`ddim_sample_step`] when both see the same `eps_pred`.
pub fn ddim_invert_step(z_prev: &Latent, eps_pred: &Array3<f64>, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    schedule.check_level(t, 1)?;
    if z_prev.timestep != t - 1 {
        return Err(Error::TimestepMismatch(z_prev.timestep, t - 1));
    }
    check_same_shape(&z_prev.data, eps_pred)?;
    let data = ddim_transfer(&z_prev.data, eps_pred, schedule.alpha_bar(t - 1), schedule.alpha_bar(t));
    Ok(Latent { data, timestep: t })
}

/// Moves a latent from level `from` to level `to` along the DDIM direction
/// fixed by `eps`: `√ᾱ_to·(z − √(1−ᾱ_from)·ε)/√ᾱ_from + √(1−ᾱ_to)·ε`.
fn ddim_transfer(z: &Array3<f64>, eps: &Array3<f64>, from: f64, to: f64) -> Array3<f64> {
    if from == to {
        return z.clone();
    }
    let (sf, nf) = (from.sqrt(), (1.0 - from).sqrt());
    let (st, nt) = (to.sqrt(), (1.0 - to).sqrt());
    Zip::from(z).and(eps).map_collect(|&z, &e| st * (z - nf * e) / sf + nt * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    fn scalar(v: f64, t: usize) -> Latent {
        Latent { data: arr3(&[[[v]]]), timestep: t }
    }

    fn two_level(prev: f64, cur: f64) -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![1.0, prev, cur]).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn default_ladder_endpoint_regression() {
        // Independent cumulative product in extended precision:
        // python -c "from mpmath import mp,mpf; mp.dps=30; a=mpf(1)
        //   for s in range(50): a*=1-(mpf('0.00085')+(mpf('0.012')-mpf('0.00085'))*s/49)
        //   print(a)"
        let s = make_schedule(50, 0.00085, 0.012).unwrap();
        assert!((s.alpha_bar(50) - 0.724_292_809_916_387_2).abs() < 1e-12, "{}", s.alpha_bar(50));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(5, 0.0, 0.2).is_err());
        assert!(make_schedule(5, 0.3, 0.2).is_err());
        assert!(make_schedule(5, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn strided_keeps_endpoints() {
        let s = NoiseSchedule::default_ladder();
        let coarse = s.strided(5).unwrap();
        assert_eq!(coarse.steps(), 10);
        assert_eq!(coarse.alpha_bar(10), s.alpha_bar(50));
        assert_eq!(coarse.alpha_bar(1), s.alpha_bar(5));
        assert!(s.strided(7).is_err());
    }

    #[test]
    fn noising_identity_at_level_zero() {
        let s = NoiseSchedule::default_ladder();
        let z0 = scalar(0.37, 0);
        let out = noise_to_level(&z0, 0, &arr3(&[[[5.0]]]), &s).unwrap();
        assert_eq!(out.data, z0.data);
        assert_eq!(out.timestep, 0);
    }

    #[test]
    fn noising_zero_signal() {
        let s = NoiseSchedule::default_ladder();
        let out = noise_to_level(&scalar(0.0, 0), 30, &arr3(&[[[2.0]]]), &s).unwrap();
        assert_eq!(out.data[[0, 0, 0]], (1.0 - s.alpha_bar(30)).sqrt() * 2.0);
        assert_eq!(out.timestep, 30);
    }

    #[test]
    fn noising_scalar_oracle() {
        // ᾱ_1 = 0.25: 0.5·2 + √0.75·1 = 1.866025...
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let out = noise_to_level(&scalar(2.0, 0), 1, &arr3(&[[[1.0]]]), &s).unwrap();
        assert!((out.data[[0, 0, 0]] - 1.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn noising_errors() {
        let s = NoiseSchedule::default_ladder();
        let z0 = scalar(1.0, 0);
        assert!(noise_to_level(&z0, 51, &arr3(&[[[1.0]]]), &s).is_err());
        assert!(noise_to_level(&z0, 3, &Array3::zeros((2, 1, 1)), &s).is_err());
        assert!(noise_to_level(&scalar(1.0, 4), 3, &arr3(&[[[1.0]]]), &s).is_err());
    }

    #[test]
    fn sample_step_degenerate_is_identity() {
        let s = NoiseSchedule::degenerate(3);
        let z = scalar(0.731, 2);
        let out = ddim_sample_step(&z, &arr3(&[[[0.4]]]), 2, &s).unwrap();
        assert_eq!(out.data, z.data);
        assert_eq!(out.timestep, 1);
    }

    #[test]
    fn sample_step_pure_rescaling() {
        let out = ddim_sample_step(&scalar(1.0, 2), &arr3(&[[[0.0]]]), 2, &two_level(0.8, 0.5)).unwrap();
        assert!((out.data[[0, 0, 0]] - (0.8f64 / 0.5).sqrt()).abs() < 1e-12);
        assert!((out.data[[0, 0, 0]] - 1.26491).abs() < 1e-5);
    }

    #[test]
    fn sample_step_scalar_oracle() {
        // √0.8·(1 − √0.5·0.2)/√0.5 + √0.2·0.2, evaluated term by term.
        let expected =
            0.894_427_190_999_915_9 * (1.0 - 0.707_106_781_186_547_5 * 0.2) / 0.707_106_781_186_547_5 + 0.447_213_595_499_958 * 0.2;
        let out = ddim_sample_step(&scalar(1.0, 2), &arr3(&[[[0.2]]]), 2, &two_level(0.8, 0.5)).unwrap();
        assert!((out.data[[0, 0, 0]] - expected).abs() < 1e-12);
        assert!((out.data[[0, 0, 0]] - 1.175_468_344_967_360_1).abs() < 1e-9);
    }

    #[test]
    fn invert_step_scalar_oracle_and_round_trip() {
        // √0.5·(1 − √0.2·0.2)/√0.8 + √0.5·0.2
        let expected =
            0.707_106_781_186_547_5 * (1.0 - 0.447_213_595_499_958 * 0.2) / 0.894_427_190_999_915_9 + 0.707_106_781_186_547_5 * 0.2;
        let s = two_level(0.8, 0.5);
        let eps = arr3(&[[[0.2]]]);
        let up = ddim_invert_step(&scalar(1.0, 1), &eps, 2, &s).unwrap();
        assert!((up.data[[0, 0, 0]] - expected).abs() < 1e-12);
        assert!((up.data[[0, 0, 0]] - 0.861_280_093_160_749_6).abs() < 1e-9);
        let back = ddim_sample_step(&up, &eps, 2, &s).unwrap();
        assert!((back.data[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(back.timestep, 1);
    }

    #[test]
    fn invert_step_degenerate_is_identity() {
        let s = NoiseSchedule::degenerate(2);
        let z = scalar(-0.25, 0);
        assert_eq!(ddim_invert_step(&z, &arr3(&[[[9.0]]]), 1, &s).unwrap().data, z.data);
    }

    #[test]
    fn step_errors() {
        let s = NoiseSchedule::default_ladder();
        let eps = arr3(&[[[0.0]]]);
        assert!(ddim_sample_step(&scalar(1.0, 0), &eps, 0, &s).is_err());
        assert!(ddim_invert_step(&scalar(1.0, 0), &eps, 0, &s).is_err());
        assert!(ddim_invert_step(&scalar(1.0, 3), &eps, 2, &s).is_err());
        assert!(ddim_sample_step(&scalar(1.0, 51), &eps, 51, &s).is_err());
        assert!(ddim_sample_step(&scalar(1.0, 2), &Array3::zeros((1, 2, 1)), 2, &s).is_err());
    }

    #[test]
    fn latent_rejects_non_finite() {
        assert!(Latent::new(arr3(&[[[f64::NAN]]]), 0).is_err());
        assert!(Latent::new(arr3(&[[[1.0]]]), 0).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn linear_schedules_satisfy_invariants(steps in 1usize..200, b0 in 1e-5f64..0.5, frac in 0.0f64..1.0) {
                let b1 = b0 + (0.99 - b0) * frac;
                let s = make_schedule(steps, b0, b1).unwrap();
                prop_assert_eq!(s.alpha_bar(0), 1.0);
                for t in 1..=steps {
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                    prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
                }
            }

            #[test]
            fn steps_are_mutual_inverses(vals in proptest::collection::vec(-3.0f64..3.0, 8), t in 1usize..=50) {
                let s = NoiseSchedule::default_ladder();
                let z = Array3::from_shape_vec((2, 2, 2), vals.clone()).unwrap();
                let eps = z.mapv(|v| (v * 1.7).sin());
                let prev = Latent { data: z.clone(), timestep: t - 1 };
                let round = ddim_sample_step(&ddim_invert_step(&prev, &eps, t, &s).unwrap(), &eps, t, &s).unwrap();
                let cur = Latent { data: z.clone(), timestep: t };
                let other = ddim_invert_step(&ddim_sample_step(&cur, &eps, t, &s).unwrap(), &eps, t, &s).unwrap();
                for ((a, b), c) in z.iter().zip(round.data.iter()).zip(other.data.iter()) {
                    prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3));
                    prop_assert!((a - c).abs() <= 1e-5 * a.abs().max(1e-3));
                }
            }

            #[test]
            fn steps_are_deterministic(v in -5.0f64..5.0, e in -5.0f64..5.0, t in 1usize..=50) {
                let s = NoiseSchedule::default_ladder();
                let z = Latent { data: arr3(&[[[v]]]), timestep: t };
                let eps = arr3(&[[[e]]]);
                let a = ddim_sample_step(&z, &eps, t, &s).unwrap();
                let b = ddim_sample_step(&z, &eps, t, &s).unwrap();
                prop_assert_eq!(a.data[[0, 0, 0]].to_bits(), b.data[[0, 0, 0]].to_bits());
            }
        }
    }
}
