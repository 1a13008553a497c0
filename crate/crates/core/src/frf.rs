//! Nonparametric Best Linear Approximation from periodic multisine data.
//!
//! Robust averaging: per realization the period spectra of `u` and `y` are
//! averaged and divided bin-wise at the excited harmonics. The noise variance
//! comes from the spread over periods, the total variance (noise plus
//! nonlinear distortion) from the spread over realizations.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_range, Execution};
use crate::signals::{period_spectra, Dataset, MultisineSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrfEstimate {
    pub period_length: usize,
    pub sample_rate: f64,
    pub excited_bins: Vec<usize>,
    pub g: Vec<Complex64>,
    /// Variance of `g` due to noise (needs at least two periods).
    pub var_noise: Option<Vec<f64>>,
    /// Variance of `g` over realizations (needs at least two realizations).
    pub var_total: Option<Vec<f64>>,
    pub n_periods_used: usize,
    pub n_realizations_used: usize,
}

impl FrfEstimate {
    /// Normalized angular frequency `2 pi k / N` of each excited bin.
    pub fn omegas(&self) -> Vec<f64> {
        self.excited_bins.iter().map(|&k| 2.0 * std::f64::consts::PI * k as f64 / self.period_length as f64).collect()
    }

    pub fn frequencies_hz(&self) -> Vec<f64> {
        let df = self.sample_rate / self.period_length as f64;
        self.excited_bins.iter().map(|&k| k as f64 * df).collect()
    }

    /// Best available variance: total if present, otherwise noise.
    pub fn variance(&self) -> Result<&[f64]> {
        self.var_total.as_deref().or(self.var_noise.as_deref()).ok_or_else(|| {
            Error::VarianceUnavailable(format!(
                "{} period(s) and {} realization(s) after transient removal",
                self.n_periods_used, self.n_realizations_used
            ))
        })
    }

    /// Fit weights: the variance where available and strictly positive, else ones.
    pub fn default_weights(&self) -> Vec<f64> {
        match self.variance() {
            Ok(v) if v.iter().all(|x| *x > 0.0 && x.is_finite()) => v.to_vec(),
            _ => vec![1.0; self.g.len()],
        }
    }

    /// CSV with columns `bin,freq_hz,re,im,var_noise,var_total`; unavailable variances are `NaN`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bin,freq_hz,re,im,var_noise,var_total")?;
        let freqs = self.frequencies_hz();
        for (i, (&k, g)) in self.excited_bins.iter().zip(&self.g).enumerate() {
            let vn = self.var_noise.as_ref().map_or(f64::NAN, |v| v[i]);
            let vt = self.var_total.as_ref().map_or(f64::NAN, |v| v[i]);
            writeln!(f, "{k},{},{},{},{vn},{vt}", freqs[i], g.re, g.im)?;
        }
        f.flush()?;
        Ok(())
    }
}

struct RealizationFrf {
    g: Vec<Complex64>,
    var: Option<Vec<f64>>,
}

/// Estimates the BLA at the excited harmonics of `spec`, discarding the first
/// `discard_periods` periods of every realization as transient.
pub fn estimate_bla(data: &Dataset, spec: &MultisineSpec, discard_periods: usize) -> Result<FrfEstimate> {
    estimate_bla_with(data, spec, discard_periods, Execution::default())
}

pub fn estimate_bla_with(
    data: &Dataset,
    spec: &MultisineSpec,
    discard_periods: usize,
    exec: Execution,
) -> Result<FrfEstimate> {
    data.validate()?;
    spec.validate()?;
    if spec.period_length != data.period_length {
        return Err(Error::Dimension(format!(
            "excitation period {} differs from data period {}",
            spec.period_length, data.period_length
        )));
    }
    if discard_periods >= data.n_periods {
        return Err(Error::InvalidArgument(format!(
            "discarding {discard_periods} of {} periods leaves nothing to average",
            data.n_periods
        )));
    }
    let bins = spec.excited_bins();
    if bins.is_empty() {
        return Err(Error::InvalidSpec("no excited harmonics".into()));
    }
    let n = data.period_length;
    let p_used = data.n_periods - discard_periods;

    let per_real: Vec<Result<RealizationFrf>> = map_range(exec, data.n_realizations, |m| {
        let (u, y) = data.realization(m);
        let u_spec = period_spectra(&u[discard_periods * n..], n)?;
        let y_spec = period_spectra(&y[discard_periods * n..], n)?;
        let pf = p_used as f64;
        let mut g = Vec::with_capacity(bins.len());
        let mut var = Vec::with_capacity(bins.len());
        for &k in &bins {
            let u_mean: Complex64 = u_spec.iter().map(|s| s[k]).sum::<Complex64>() / pf;
            let y_mean: Complex64 = y_spec.iter().map(|s| s[k]).sum::<Complex64>() / pf;
            let scale = u_spec.iter().map(|s| s[k].norm()).fold(0.0, f64::max).max(1e-300);
            if u_mean.norm() <= 1e-12 * scale || u_mean.norm() == 0.0 {
                return Err(Error::Singular(format!("input spectrum vanishes at excited bin {k}")));
            }
            let gk = y_mean / u_mean;
            g.push(gk);
            if p_used >= 2 {
                let ss: f64 = u_spec.iter().zip(&y_spec).map(|(us, ys)| (ys[k] - gk * us[k]).norm_sqr()).sum();
                var.push(ss / ((pf - 1.0) * pf * u_mean.norm_sqr()));
            }
        }
        Ok(RealizationFrf { g, var: (p_used >= 2).then_some(var) })
    });
    let per_real: Vec<RealizationFrf> = per_real.into_iter().collect::<Result<_>>()?;

    let m = per_real.len() as f64;
    let g: Vec<Complex64> = (0..bins.len()).map(|i| per_real.iter().map(|r| r.g[i]).sum::<Complex64>() / m).collect();
    let var_noise = (p_used >= 2).then(|| {
        (0..bins.len())
            .map(|i| per_real.iter().map(|r| r.var.as_ref().expect("p >= 2")[i]).sum::<f64>() / (m * m))
            .collect()
    });
    let var_total = (per_real.len() >= 2).then(|| {
        (0..bins.len())
            .map(|i| per_real.iter().map(|r| (r.g[i] - g[i]).norm_sqr()).sum::<f64>() / (m * (m - 1.0)))
            .collect()
    });
    Ok(FrfEstimate {
        period_length: n,
        sample_rate: data.sample_rate,
        excited_bins: bins,
        g,
        var_noise,
        var_total,
        n_periods_used: p_used,
        n_realizations_used: per_real.len(),
    })
}
