//! Cascaded two-tank process used as a ground-truth data generator.
//!
//! Continuous-time model with zero-order-hold input `u`:
//!
//! ```text
//! dx1/dt = -k1 sqrt(x1) + k4 u + w1
//! dx2/dt =  k2 sqrt(x1) - k3 sqrt(x2) + w2
//! y      =  x2 + e
//! ```
//!
//! Integrated with classical RK4 at `1 / (fs * oversample)`. States are clamped
//! to `[0, x_max]` after every substep. When the upper tank overfills, a fraction
//! `alpha ~ U[alpha_lo, alpha_hi]` of the excess volume (redrawn per overflowing
//! substep) spills into the lower tank and the rest is lost; the split law is a
//! modelling choice of this crate, not a measured property. Process noise is
//! held constant over each output-sample interval.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::signals::std_dev;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TankParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub x1_max: f64,
    pub x2_max: f64,
    /// `[alpha_lo, alpha_hi]`: fraction of upper-tank overflow that reaches the lower tank.
    pub overflow_fraction_range: [f64; 2],
    pub process_noise_std: f64,
    /// Output SNR in dB; `f64::INFINITY` disables measurement noise.
    pub output_snr_db: f64,
    pub seed: u64,
}

impl Default for TankParams {
    /// Surrogate constants; the real benchmark's values are not published.
    fn default() -> Self {
        Self {
            k1: 0.5,
            k2: 0.4,
            k3: 0.3,
            k4: 1.0,
            x1_max: 10.0,
            x2_max: 10.0,
            overflow_fraction_range: [0.3, 0.7],
            process_noise_std: 0.0,
            output_snr_db: 40.0,
            seed: 0,
        }
    }
}

impl TankParams {
    /// Same physics with every noise source switched off.
    pub fn noiseless(&self) -> Self {
        Self { process_noise_std: 0.0, output_snr_db: f64::INFINITY, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.k1, self.k2, self.k3, self.k4, self.x1_max, self.x2_max];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("k1..k4 and tank capacities must be positive".into()));
        }
        let [lo, hi] = self.overflow_fraction_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument("overflow fraction range must satisfy 0 <= lo <= hi <= 1".into()));
        }
        if !(self.process_noise_std >= 0.0) {
            return Err(Error::InvalidArgument("process noise std must be nonnegative".into()));
        }
        Ok(())
    }

    /// Steady state for a constant input, ignoring capacity limits.
    pub fn equilibrium(&self, u: f64) -> [f64; 2] {
        let x1 = (self.k4 * u / self.k1).powi(2);
        let x2 = (self.k2 * x1.sqrt() / self.k3).powi(2);
        [x1, x2]
    }

    fn drift(&self, x: [f64; 2], u: f64, w: [f64; 2]) -> [f64; 2] {
        let s1 = x[0].max(0.0).sqrt();
        let s2 = x[1].max(0.0).sqrt();
        [-self.k1 * s1 + self.k4 * u + w[0], self.k2 * s1 - self.k3 * s2 + w[1]]
    }
}

/// Output of [`simulate_tanks`]: states and output at the sample instants.
#[derive(Clone, Debug, PartialEq)]
pub struct TankTrajectory {
    pub states: Vec<[f64; 2]>,
    pub y: Vec<f64>,
    /// Number of substeps in which the upper tank overflowed.
    pub overflow_events: usize,
}

/// Simulates the tanks for the ZOH input `u` sampled at `fs`.
///
/// `states[t]` and `y[t]` are taken at `t / fs`, before the input sample `u[t]` acts.
pub fn simulate_tanks(
    params: &TankParams,
    u: &[f64],
    fs: f64,
    x_init: [f64; 2],
    oversample: usize,
) -> Result<TankTrajectory> {
    params.validate()?;
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    if oversample == 0 {
        return Err(Error::InvalidArgument("oversample must be at least 1".into()));
    }
    if x_init.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("initial levels must be nonnegative".into()));
    }
    if let Some(t) = u.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("input sample {t} is negative or not finite")));
    }

    let mut rng = seeded_rng(params.seed);
    let process =
        (params.process_noise_std > 0.0).then(|| Normal::new(0.0, params.process_noise_std).expect("valid std"));
    let [alpha_lo, alpha_hi] = params.overflow_fraction_range;
    let h = 1.0 / (fs * oversample as f64);

    let mut x = [x_init[0].min(params.x1_max), x_init[1].min(params.x2_max)];
    let mut states = Vec::with_capacity(u.len());
    let mut overflow_events = 0;
    for &uk in u {
        states.push(x);
        let w = match &process {
            Some(n) => [n.sample(&mut rng), n.sample(&mut rng)],
            None => [0.0, 0.0],
        };
        for _ in 0..oversample {
            let k1 = params.drift(x, uk, w);
            let k2 = params.drift(axpy(x, 0.5 * h, k1), uk, w);
            let k3 = params.drift(axpy(x, 0.5 * h, k2), uk, w);
            let k4 = params.drift(axpy(x, h, k3), uk, w);
            for i in 0..2 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if x[0] > params.x1_max {
                let excess = x[0] - params.x1_max;
                let alpha = if alpha_hi > alpha_lo { rng.random_range(alpha_lo..=alpha_hi) } else { alpha_lo };
                x[0] = params.x1_max;
                x[1] += alpha * excess;
                overflow_events += 1;
            }
            x[0] = x[0].max(0.0);
            x[1] = x[1].clamp(0.0, params.x2_max);
        }
    }

    let clean: Vec<f64> = states.iter().map(|s| s[1]).collect();
    let y = snr_scale_noise(&clean, params.output_snr_db, params.seed.wrapping_add(0x5eed))?;
    Ok(TankTrajectory { states, y, overflow_events })
}

fn axpy(x: [f64; 2], a: f64, d: [f64; 2]) -> [f64; 2] {
    [x[0] + a * d[0], x[1] + a * d[1]]
}

/// Adds white Gaussian noise with std `rms(clean - mean(clean)) * 10^(-snr_db / 20)`.
pub fn snr_scale_noise(clean: &[f64], snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    if snr_db == f64::INFINITY {
        return Ok(clean.to_vec());
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("SNR must not be NaN".into()));
    }
    let sigma = std_dev(clean) * 10f64.powf(-snr_db / 20.0);
    if sigma == 0.0 {
        return Ok(clean.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    Ok(clean.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> TankParams {
        TankParams { k1: 1.0, k4: 1.0, ..TankParams::default() }.noiseless()
    }

    #[test]
    fn constant_input_reaches_equilibrium() {
        let p = unit_params();
        let tr = simulate_tanks(&p, &vec![1.0; 200], 1.0, [0.2, 0.1], 10).unwrap();
        let x1 = tr.states.last().unwrap()[0];
        assert!((x1 - 1.0).abs() < 1e-6, "x1 = {x1}");
        let eq = p.equilibrium(1.0);
        assert!((eq[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn origin_is_absorbing_without_input() {
        let p = unit_params();
        let tr = simulate_tanks(&p, &vec![0.0; 50], 1.0, [0.0, 0.0], 4).unwrap();
        assert!(tr.states.iter().all(|s| s[0] == 0.0 && s[1] == 0.0));
        assert!(tr.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_inputs() {
        let p = unit_params();
        assert!(simulate_tanks(&p, &[0.5, -0.1], 1.0, [0.0, 0.0], 1).is_err());
        assert!(simulate_tanks(&p, &[0.5], 0.0, [0.0, 0.0], 1).is_err());
        assert!(simulate_tanks(&p, &[0.5], 1.0, [-1.0, 0.0], 1).is_err());
    }

    fn smooth_input(n: usize) -> Vec<f64> {
        (0..n).map(|t| 0.6 + 0.3 * (t as f64 * 0.21).sin()).collect()
    }

    #[test]
    fn matches_fine_step_reference() {
        let p = TankParams::default().noiseless();
        let u = smooth_input(120);
        let coarse = simulate_tanks(&p, &u, 0.25, [2.0, 1.5], 16).unwrap();
        let fine = simulate_tanks(&p, &u, 0.25, [2.0, 1.5], 1600).unwrap();
        for (a, b) in coarse.states.iter().zip(&fine.states) {
            for i in 0..2 {
                assert!((a[i] - b[i]).abs() <= 1e-6 * b[i].abs().max(1e-3), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let p = TankParams::default().noiseless();
        let u = smooth_input(60);
        let reference = simulate_tanks(&p, &u, 0.25, [2.0, 1.5], 512).unwrap();
        let err = |os: usize| {
            let tr = simulate_tanks(&p, &u, 0.25, [2.0, 1.5], os).unwrap();
            tr.states
                .iter()
                .zip(&reference.states)
                .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
                .fold(0.0, f64::max)
        };
        let ratio = err(2) / err(4);
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn states_stay_within_capacity() {
        let p = TankParams { process_noise_std: 0.05, ..TankParams::default() };
        let u: Vec<f64> = (0..400).map(|t| if (t / 50) % 2 == 0 { 3.0 } else { 0.0 }).collect();
        let tr = simulate_tanks(&p, &u, 0.25, [0.0, 0.0], 4).unwrap();
        assert!(tr.overflow_events > 0);
        for s in &tr.states {
            assert!((0.0..=p.x1_max).contains(&s[0]));
            assert!((0.0..=p.x2_max).contains(&s[1]));
        }
    }

    #[test]
    fn lower_tank_rises_while_inflow_dominates() {
        let p = TankParams::default().noiseless();
        let tr = simulate_tanks(&p, &vec![0.8; 100], 1.0, [0.0, 0.0], 4).unwrap();
        for w in tr.states.windows(2) {
            let [x1, x2] = w[0];
            if p.k2 * x1.sqrt() > p.k3 * x2.sqrt() {
                assert!(w[1][1] >= x2 - 1e-12);
            }
        }
    }

    #[test]
    fn infinite_snr_is_identity() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(snr_scale_noise(&x, f64::INFINITY, 1).unwrap(), x.to_vec());
    }

    #[test]
    fn noise_level_matches_snr() {
        let mut rng = seeded_rng(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let clean: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let sig = std_dev(&clean);
        for (snr, target) in [(0.0, sig), (40.0, 0.01 * sig)] {
            let noisy = snr_scale_noise(&clean, snr, 5).unwrap();
            let noise: Vec<f64> = noisy.iter().zip(&clean).map(|(a, b)| a - b).collect();
            let got = std_dev(&noise);
            let tol = if snr == 0.0 { 0.05 } else { 0.10 };
            assert!((got / target - 1.0).abs() < tol, "snr {snr}: {got} vs {target}");
        }
    }
}
