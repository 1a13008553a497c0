//! Multisine excitation, full-period DFTs, the dataset container and error metrics.
//!
//! DFT normalization used throughout the crate: for one period of length `N`,
//! `X(k) = sum_t x(t) exp(-j 2 pi k t / N)` (no scaling). Parseval then reads
//! `sum_t |x(t)|^2 = (1/N) sum_k |X(k)|^2`, and a constant `c` lands in bin 0 as `N c`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

/// Random-phase multisine definition.
///
/// `harmonics`, `amplitudes` and `phases` are parallel vectors. A harmonic with
/// zero amplitude is listed but not excited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    pub period_length: usize,
    pub sample_rate: f64,
    pub harmonics: Vec<usize>,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub seed: u64,
}

impl MultisineSpec {
    /// Harmonics `1..=k_max` with the default profile: `a0` up to `ceil(k_max / 3)`,
    /// `0.3 a0` above, and phases uniform on `[0, 2 pi)` drawn from `seed`.
    pub fn random_phase(period_length: usize, sample_rate: f64, k_max: usize, a0: f64, seed: u64) -> Result<Self> {
        let knee = k_max.div_ceil(3);
        let harmonics: Vec<usize> = (1..=k_max).collect();
        let amplitudes = harmonics.iter().map(|&k| if k <= knee { a0 } else { 0.3 * a0 }).collect();
        let mut rng = seeded_rng(seed);
        let phases = (0..k_max).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let spec = Self { period_length, sample_rate, harmonics, amplitudes, phases, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Replaces the amplitude profile (one entry per listed harmonic).
    pub fn with_amplitudes(mut self, amplitudes: Vec<f64>) -> Result<Self> {
        self.amplitudes = amplitudes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_length == 0 {
            return Err(Error::InvalidSpec("period length must be positive".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::InvalidSpec("sample rate must be positive".into()));
        }
        if self.amplitudes.len() != self.harmonics.len() || self.phases.len() != self.harmonics.len() {
            return Err(Error::InvalidSpec("harmonics, amplitudes and phases must have equal length".into()));
        }
        for (&k, &a) in self.harmonics.iter().zip(&self.amplitudes) {
            if k == 0 || 2 * k >= self.period_length {
                return Err(Error::InvalidSpec(format!(
                    "harmonic {k} outside the band 1..N/2 (N = {})",
                    self.period_length
                )));
            }
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidSpec(format!("negative amplitude at harmonic {k}")));
            }
        }
        let mut sorted = self.harmonics.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.harmonics.len() {
            return Err(Error::InvalidSpec("duplicate harmonics".into()));
        }
        Ok(())
    }

    /// Harmonics carrying nonzero amplitude, ascending.
    pub fn excited_bins(&self) -> Vec<usize> {
        let mut bins: Vec<usize> =
            self.harmonics.iter().zip(&self.amplitudes).filter(|(_, &a)| a > 0.0).map(|(&k, _)| k).collect();
        bins.sort_unstable();
        bins
    }

    pub fn frequency_resolution(&self) -> f64 {
        self.sample_rate / self.period_length as f64
    }
}

/// Highest harmonic index for a band edge `f_max`: `round(f_max N / fs)`.
pub fn harmonic_for_frequency(f_max: f64, sample_rate: f64, period_length: usize) -> usize {
    (f_max * period_length as f64 / sample_rate).round() as usize
}

/// `u(t) = sum_k A(k) cos(2 pi k t / N + phi_k)` for `t = 0..n_samples`.
///
/// The phase argument uses `t mod N`, so the output repeats bit-for-bit every period.
pub fn generate_multisine(spec: &MultisineSpec, n_samples: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let n = spec.period_length;
    let one_period: Vec<f64> = (0..n)
        .map(|t| {
            spec.harmonics
                .iter()
                .zip(&spec.amplitudes)
                .zip(&spec.phases)
                .map(|((&k, &a), &phi)| {
                    let arg = 2.0 * PI * ((k * t) % n) as f64 / n as f64 + phi;
                    a * arg.cos()
                })
                .sum()
        })
        .collect();
    Ok((0..n_samples).map(|t| one_period[t % n]).collect())
}

/// Unnormalized DFT of every full period in `samples`.
pub fn period_spectra(samples: &[f64], period_length: usize) -> Result<Vec<Vec<Complex64>>> {
    if period_length == 0 {
        return Err(Error::InvalidArgument("period length must be positive".into()));
    }
    if samples.is_empty() || !samples.len().is_multiple_of(period_length) {
        return Err(Error::InvalidArgument(format!(
            "{} samples is not an integer number of periods of length {period_length}",
            samples.len()
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(period_length);
    Ok(samples
        .chunks_exact(period_length)
        .map(|chunk| {
            let mut buf: Vec<Complex64> = chunk.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            fft.process(&mut buf);
            buf
        })
        .collect())
}

/// Period-averaged unnormalized DFT (see module docs for the convention).
pub fn dft_spectrum(samples: &[f64], period_length: usize) -> Result<Vec<Complex64>> {
    let spectra = period_spectra(samples, period_length)?;
    let p = spectra.len() as f64;
    let mut avg = vec![Complex64::new(0.0, 0.0); period_length];
    for spec in &spectra {
        for (a, x) in avg.iter_mut().zip(spec) {
            *a += x;
        }
    }
    avg.iter_mut().for_each(|a| *a /= p);
    Ok(avg)
}

pub fn rms_error(y_mod: &[f64], y: &[f64]) -> Result<f64> {
    if y_mod.len() != y.len() {
        return Err(Error::Dimension(format!("rms_error: lengths differ ({} vs {})", y_mod.len(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("rms_error: empty sequences".into()));
    }
    let ss: f64 = y_mod.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

pub(crate) fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Sampled single-input single-output record.
///
/// Realizations are stored back to back: realization `m` occupies samples
/// `m*N*P .. (m+1)*N*P`. A non-periodic record is represented with
/// `period_length = len`, `n_periods = 1`, `n_realizations = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub sample_rate: f64,
    pub period_length: usize,
    pub n_periods: usize,
    pub n_realizations: usize,
    /// Excitation used to generate `u`, when known (needed for BLA estimation).
    pub excitation: Option<MultisineSpec>,
}

impl Dataset {
    pub fn new(
        u: Vec<f64>,
        y: Vec<f64>,
        sample_rate: f64,
        period_length: usize,
        n_periods: usize,
        n_realizations: usize,
    ) -> Result<Self> {
        let d = Self { u, y, sample_rate, period_length, n_periods, n_realizations, excitation: None };
        d.validate()?;
        Ok(d)
    }

    /// A single non-periodic record.
    pub fn record(u: Vec<f64>, y: Vec<f64>, sample_rate: f64) -> Result<Self> {
        let n = u.len();
        Self::new(u, y, sample_rate, n, 1, 1)
    }

    pub fn with_excitation(mut self, spec: MultisineSpec) -> Self {
        self.excitation = Some(spec);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if self.period_length == 0 || self.n_periods == 0 || self.n_realizations == 0 {
            return Err(Error::InvalidArgument("N, P and M must all be at least 1".into()));
        }
        let expected = self.period_length * self.n_periods * self.n_realizations;
        if self.u.len() != expected || self.y.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} samples (N={} P={} M={}), got u={} y={}",
                self.period_length,
                self.n_periods,
                self.n_realizations,
                self.u.len(),
                self.y.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn samples_per_realization(&self) -> usize {
        self.period_length * self.n_periods
    }

    pub fn realization(&self, m: usize) -> (&[f64], &[f64]) {
        let len = self.samples_per_realization();
        let r = m * len..(m + 1) * len;
        (&self.u[r.clone()], &self.y[r])
    }

    /// Contiguous sub-record `range` as a non-periodic dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::InvalidArgument(format!("slice {range:?} out of bounds for {} samples", self.len())));
        }
        Self::record(self.u[range.clone()].to_vec(), self.y[range].to_vec(), self.sample_rate)
    }

    /// Writes `t,u,y` rows to `path` and the metadata sidecar next to it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "u", "y"])?;
        for (i, (u, y)) in self.u.iter().zip(&self.y).enumerate() {
            let t = i as f64 / self.sample_rate;
            w.write_record([format!("{t}"), format!("{u}"), format!("{y}")])?;
        }
        w.flush()?;
        let meta = DatasetMeta {
            sample_rate: self.sample_rate,
            period_length: self.period_length,
            n_periods: self.n_periods,
            n_realizations: self.n_realizations,
            excitation: self.excitation.clone(),
        };
        fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a `t,u,y` CSV. Metadata comes from the sidecar when present;
    /// otherwise the file is a single record and `fs` is inferred from `t`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Format(format!("missing column `{name}` in {}", path.display())))
        };
        let (ct, cu, cy) = (col("t")?, col("u")?, col("y")?);
        let (mut t, mut u, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Format(format!("bad number on data row {}", line + 1)))
            };
            t.push(parse(ct)?);
            u.push(parse(cu)?);
            y.push(parse(cy)?);
        }
        let meta_file = meta_path(path);
        if meta_file.exists() {
            let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(meta_file)?)?;
            let mut d = Self::new(u, y, meta.sample_rate, meta.period_length, meta.n_periods, meta.n_realizations)?;
            d.excitation = meta.excitation;
            Ok(d)
        } else {
            if t.len() < 2 || !(t[1] > t[0]) {
                return Err(Error::Format("cannot infer sample rate without a metadata sidecar".into()));
            }
            Self::record(u, y, 1.0 / (t[1] - t[0]))
        }
    }
}

/// Sidecar metadata for a dataset CSV (`<stem>.meta.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub sample_rate: f64,
    pub period_length: usize,
    pub n_periods: usize,
    pub n_realizations: usize,
    #[serde(default)]
    pub excitation: Option<MultisineSpec>,
}

pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}
