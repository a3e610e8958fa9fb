//! Diffusion noise schedule, forward noising and min-SNR loss weights.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_GAMMA: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: DEFAULT_TIMESTEPS, beta_start: 0.00085, beta_end: 0.012, gamma: DEFAULT_GAMMA }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    gamma: f64,
}

impl NoiseSchedule {
    /// Linearly spaced betas; `alpha_bar[t] = prod_{s<=t} (1 - beta_s)`.
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.timesteps < 2 {
            return Err(Error::Config { field: "schedule.timesteps".into(), reason: "must be at least 2".into() });
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config {
                field: "schedule.beta_start".into(),
                reason: "need 0 < beta_start < beta_end < 1".into(),
            });
        }
        let t = cfg.timesteps;
        let mut acc = 1.0;
        let alpha_bar = (0..t)
            .map(|i| {
                let beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar, cfg.gamma)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>, gamma: f64) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(invalid("alpha_bar is empty"));
        }
        if !(gamma > 0.0) {
            return Err(Error::Config { field: "schedule.gamma".into(), reason: "must be positive".into() });
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(invalid("alpha_bar entries must lie in (0, 1)"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("alpha_bar must be strictly decreasing"));
        }
        Ok(Self { alpha_bar, gamma })
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| self.range_error(t))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(a / (1.0 - a))
    }

    /// `min(SNR_t, gamma) / SNR_t`.
    pub fn min_snr_weight(&self, t: usize) -> Result<f64> {
        Ok(min_snr_weight(self.snr(t)?, self.gamma))
    }

    fn range_error(&self, t: usize) -> Error {
        invalid(format!("timestep {t} outside [0, {})", self.alpha_bar.len()))
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
    pub fn forward_noise(&self, x0: &ArrayD<f32>, t: usize, noise: &ArrayD<f32>) -> Result<ArrayD<f32>> {
        let a = self.alpha_bar(t)?;
        forward_noise_with(x0, noise, a)
    }
}

/// Forward noising for an explicit `alpha_bar` (which may be 0 or 1).
pub fn forward_noise_with(x0: &ArrayD<f32>, noise: &ArrayD<f32>, alpha_bar: f64) -> Result<ArrayD<f32>> {
    if x0.shape() != noise.shape() {
        return Err(crate::error::dim(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(invalid("alpha_bar must lie in [0, 1]"));
    }
    let (sa, sn) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    let mut out = x0.clone();
    Zip::from(&mut out).and(noise).for_each(|o, &n| *o = sa * *o + sn * n);
    Ok(out)
}

/// `min(snr, gamma) / snr`; 1 when `snr <= gamma`, including `gamma = inf`.
pub fn min_snr_weight(snr: f64, gamma: f64) -> f64 {
    if snr <= gamma {
        1.0
    } else {
        gamma / snr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn linear_schedule_shape() {
        let s = sched();
        assert_eq!(s.timesteps(), 1000);
        assert!((s.alpha_bar(0).unwrap() - (1.0 - 0.00085)).abs() < 1e-12);
        // Second-order expansion of sum(log(1 - beta)) over the linear betas.
        let (a, b) = (0.00085f64, 0.012f64);
        let sum = 1000.0 * (a + b) / 2.0;
        let sum_sq = 1000.0 * (a * a + a * b + b * b) / 3.0;
        let approx = (-sum - sum_sq / 2.0).exp();
        assert!((s.alpha_bar(999).unwrap() / approx - 1.0).abs() < 2e-3);
        for t in 1..1000 {
            assert!(s.snr(t).unwrap() < s.snr(t - 1).unwrap());
        }
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(min_snr_weight(0.5 / 0.5, 5.0), 1.0);
        assert!((min_snr_weight(0.9 / 0.1, 5.0) - 5.0 / 9.0).abs() < 1e-12);
        for snr in [1e-3, 1.0, 9.0, 1e6] {
            assert_eq!(min_snr_weight(snr, f64::INFINITY), 1.0);
        }
    }

    #[test]
    fn forward_noise_limits() {
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| i[0] as f32 - i[1] as f32);
        let n = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f32 * 0.1);
        assert_eq!(forward_noise_with(&x0, &n, 1.0).unwrap(), x0);
        assert_eq!(forward_noise_with(&x0, &n, 0.0).unwrap(), n);
        assert!(sched().forward_noise(&x0, 1000, &n).is_err());
    }

    #[test]
    fn forward_noise_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> ArrayD<f32> {
            ArrayD::from_shape_simple_fn(IxDyn(&[10_000]), || StandardNormal.sample(rng))
        };
        let x0 = draw(&mut rng);
        let n = draw(&mut rng);
        let xt = forward_noise_with(&x0, &n, 0.25).unwrap();
        let var = |a: &ArrayD<f32>| {
            let m = a.iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64;
            a.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / a.len() as f64
        };
        let expected = 0.25 * var(&x0) + 0.75;
        assert!((var(&xt) / expected - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn weight_non_increasing_in_snr(a in 1e-4f64..1e4, b in 1e-4f64..1e4, gamma in 0.1f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(min_snr_weight(hi, gamma) <= min_snr_weight(lo, gamma));
            if lo <= gamma {
                prop_assert_eq!(min_snr_weight(lo, gamma), 1.0);
            }
        }

        #[test]
        fn forward_noise_is_linear(
            vals in proptest::collection::vec(-3.0f32..3.0, 16),
            t in 0usize..1000,
            a in -2.0f32..2.0,
        ) {
            let s = sched();
            let x = ArrayD::from_shape_vec(IxDyn(&[2, 4]), vals[..8].to_vec()).unwrap();
            let n = ArrayD::from_shape_vec(IxDyn(&[2, 4]), vals[8..].to_vec()).unwrap();
            let lhs = s.forward_noise(&(&x * a), t, &(&n * a)).unwrap();
            let rhs = s.forward_noise(&x, t, &n).unwrap() * a;
            prop_assert_eq!(lhs.shape(), &[2, 4]);
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-5);
            }
        }
    }
}
