//! Experiment pipeline: data generation or loading, the linear stage, the
//! nonlinear model roster and the comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decouple::{
    count_decoupled_parameters, decouple, CpdSettings, DecoupleSettings, DecoupledModel, SamplingScale,
};
use crate::error::{Error, Result};
use crate::frf::{estimate_bla_with, FrfEstimate};
use crate::io::ModelFile;
use crate::linfit::{
    balance_realization, fit_transfer_function_with, realize_state_space, LinearStateSpace, TransferFunctionFit,
};
use crate::model::{fit_output_error, fit_output_error_scored, NlssModel, NonlinearPart, ValidationRecord};
use crate::nlss2::{estimate_states, initialize_from_states, select_lambda, Activation, NetworkFitSettings};
use crate::optimizer::{FitReport, LmSettings};
use crate::par::{map_slice, Execution};
use crate::pnlss::{build_basis, count_nonlinear_parameters, structural_nonlinear_parameters, BasisMask, PnlssModel};
use crate::seeded_rng;
use crate::signals::{
    dft_spectrum, generate_multisine, harmonic_for_frequency, mean, rms_error, Dataset, MultisineSpec,
};
use crate::tanksim::{simulate_tanks, TankParams};

/// Models the pipeline can fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "BLA")]
    Bla,
    #[serde(rename = "PNLSS")]
    Pnlss,
    #[serde(rename = "PNLSS-I")]
    PnlssI,
    #[serde(rename = "PNLSS-I_DEC")]
    PnlssIDec,
    #[serde(rename = "NLSS2")]
    Nlss2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::Bla, ModelKind::Pnlss, ModelKind::PnlssI, ModelKind::PnlssIDec, ModelKind::Nlss2];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bla => "BLA",
            ModelKind::Pnlss => "PNLSS",
            ModelKind::PnlssI => "PNLSS-I",
            ModelKind::PnlssIDec => "PNLSS-I_DEC",
            ModelKind::Nlss2 => "NLSS2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model '{s}'")))
    }
}

/// Simulated two-tank records: an estimation record and, optionally, a
/// separate validation record started from the same initial levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TankExperiment {
    pub params: TankParams,
    pub period_length: usize,
    pub sample_rate: f64,
    /// Band edge of the multisine in Hz.
    pub f_max: f64,
    /// Input DC level.
    pub input_offset: f64,
    /// Peak deviation of the multisine from the offset.
    pub input_peak: f64,
    /// Shared initial levels; drawn from the seed when absent.
    pub initial_state: Option<[f64; 2]>,
    pub oversample: usize,
    /// Generate a second record for validation instead of splitting the first.
    pub separate_validation: bool,
}

impl Default for TankExperiment {
    fn default() -> Self {
        Self {
            params: TankParams::default(),
            period_length: 1024,
            sample_rate: 0.25,
            f_max: 0.0144,
            input_offset: 0.8,
            input_peak: 0.15,
            initial_state: None,
            oversample: 16,
            separate_validation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Simulate(TankExperiment),
    Csv {
        estimation: PathBuf,
        #[serde(default)]
        validation: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Simulate(TankExperiment::default())
    }
}

/// Fractions of a single record used for estimation, validation and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub estimation: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { estimation: 0.7, validation: 0.3, test: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    /// State dimension (and transfer-function denominator order).
    pub n: usize,
    /// Numerator order; defaults to `n`.
    pub numerator_order: Option<usize>,
    pub degree: u32,
    pub mask: BasisMask,
    pub rank: usize,
    pub n_samples: usize,
    pub sampling_scale: SamplingScale,
    pub cpd_restarts: usize,
    pub lambda_grid: Vec<f64>,
    pub hidden: usize,
    pub activation: Activation,
    pub network_restarts: usize,
    pub linear_lm: LmSettings,
    pub network_lm: LmSettings,
    pub lm: LmSettings,
    /// Return the LM iterate that simulates best on the holdout.
    pub early_stopping: bool,
    /// During that selection, skip iterates whose linear part (the
    /// linearization at the operating point) has spectral radius >= 1.
    pub stable_linear_part: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            n: 3,
            numerator_order: None,
            degree: 3,
            mask: BasisMask::Full,
            rank: 5,
            n_samples: 500,
            sampling_scale: SamplingScale::Empirical,
            cpd_restarts: 10,
            lambda_grid: vec![1e-2, 1.0, 1e2, 1e4],
            hidden: 2,
            activation: Activation::Tanh,
            network_restarts: 10,
            linear_lm: LmSettings::default().with_max_iterations(100),
            network_lm: LmSettings::default().with_max_iterations(100),
            lm: LmSettings::default(),
            early_stopping: true,
            stable_linear_part: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitFractions,
    /// Truncates the estimation record (estimation-length studies).
    pub estimation_samples: Option<usize>,
    pub roster: Vec<ModelKind>,
    pub models: ModelSettings,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            split: SplitFractions::default(),
            estimation_samples: None,
            roster: ModelKind::ALL.to_vec(),
            models: ModelSettings::default(),
            execution: Execution::Parallel,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roster.is_empty() {
            return Err(Error::InvalidSpec("model roster is empty".into()));
        }
        let f = self.split;
        if !(f.estimation > 0.0 && f.validation >= 0.0 && f.test >= 0.0)
            || f.estimation + f.validation + f.test > 1.0 + 1e-12
        {
            return Err(Error::InvalidSpec(
                "split fractions must be nonnegative, estimation positive, sum <= 1".into(),
            ));
        }
        let m = &self.models;
        if m.n == 0 || m.degree < 2 || m.rank == 0 || m.lambda_grid.is_empty() {
            return Err(Error::InvalidSpec("need n >= 1, degree >= 2, rank >= 1 and a nonempty lambda grid".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn split_lengths(len: usize, f: SplitFractions) -> (usize, usize, usize) {
    let n_val = (f.validation * len as f64).floor() as usize;
    let n_test = (f.test * len as f64).floor() as usize;
    let total = f.estimation + f.validation + f.test;
    let n_est =
        if (total - 1.0).abs() <= 1e-12 { len - n_val - n_test } else { (f.estimation * len as f64).floor() as usize };
    (n_est, n_val, n_test)
}

/// Contiguous estimation / validation / test segments.
///
/// Validation and test lengths are `floor(fraction * len)`; when the
/// fractions sum to one the estimation segment takes the remainder
/// (1024 samples at 70/30 give 717/307). An empty test segment is allowed
/// only when its fraction is zero.
pub fn split_dataset(data: &Dataset, fractions: SplitFractions) -> Result<(Dataset, Dataset, Option<Dataset>)> {
    let (n_est, n_val, n_test) = split_lengths(data.len(), fractions);
    if n_val == 0 {
        return Err(Error::InvalidArgument("validation segment is empty".into()));
    }
    for (name, n) in [("estimation", n_est), ("validation", n_val)] {
        if n < 10 {
            return Err(Error::InvalidArgument(format!("{name} segment has {n} samples (minimum 10)")));
        }
    }
    if fractions.test > 0.0 && n_test < 10 {
        return Err(Error::InvalidArgument(format!("test segment has {n_test} samples (minimum 10)")));
    }
    let est = data.slice(0..n_est)?;
    let val = data.slice(n_est..n_est + n_val)?;
    let test = (n_test > 0).then(|| data.slice(n_est + n_val..n_est + n_val + n_test)).transpose()?;
    Ok((est, val, test))
}

/// Estimation and (optional) validation record.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    pub estimation: Dataset,
    pub validation: Option<Dataset>,
}

/// Simulates the estimation record (and the validation record when configured).
pub fn simulate_experiment(exp: &TankExperiment, seed: u64) -> Result<ExperimentData> {
    if !(exp.input_peak > 0.0 && exp.input_peak <= exp.input_offset) {
        return Err(Error::InvalidSpec("input peak must be positive and at most the offset (pump input >= 0)".into()));
    }
    let k_max = harmonic_for_frequency(exp.f_max, exp.sample_rate, exp.period_length);
    let x_init = match exp.initial_state {
        Some(x) => x,
        None => {
            let eq = exp.params.equilibrium(exp.input_offset);
            let mut rng = seeded_rng(seed.wrapping_add(4));
            [
                (eq[0] * rng.random_range(0.3..0.7)).min(exp.params.x1_max),
                (eq[1] * rng.random_range(0.3..0.7)).min(exp.params.x2_max),
            ]
        }
    };
    let record = |phase_seed: u64, noise_seed: u64| -> Result<Dataset> {
        let spec = MultisineSpec::random_phase(exp.period_length, exp.sample_rate, k_max, 1.0, phase_seed)?;
        let ms = generate_multisine(&spec, exp.period_length)?;
        let peak = ms.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let gain = exp.input_peak / peak;
        let spec = spec.clone().with_amplitudes(spec.amplitudes.iter().map(|a| a * gain).collect())?;
        let u: Vec<f64> = ms.iter().map(|v| exp.input_offset + gain * v).collect();
        let params = TankParams { seed: noise_seed, ..exp.params.clone() };
        let traj = simulate_tanks(&params, &u, exp.sample_rate, x_init, exp.oversample)?;
        Ok(Dataset::new(u, traj.y, exp.sample_rate, exp.period_length, 1, 1)?.with_excitation(spec))
    };
    let estimation = record(seed, seed.wrapping_add(2))?;
    let validation = exp.separate_validation.then(|| record(seed.wrapping_add(1), seed.wrapping_add(3))).transpose()?;
    Ok(ExperimentData { estimation, validation })
}

/// Loads or simulates the configured data.
pub fn load_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    match &config.data {
        DataConfig::Simulate(exp) => simulate_experiment(exp, config.seed),
        DataConfig::Csv { estimation, validation } => Ok(ExperimentData {
            estimation: Dataset::read_csv(estimation)?,
            validation: validation.as_deref().map(Dataset::read_csv).transpose()?,
        }),
    }
}

/// BLA of a record: the multisine estimator when the record carries its
/// excitation and spans whole periods, otherwise a single-record DFT ratio
/// at the bins where the input has at least 5% of its peak spectral magnitude.
pub fn record_bla(data: &Dataset, exec: Execution) -> Result<FrfEstimate> {
    if let Some(spec) = &data.excitation {
        if spec.period_length == data.period_length {
            return estimate_bla_with(data, spec, 0, exec);
        }
    }
    let n = data.len();
    let u0 = mean(&data.u);
    let y0 = mean(&data.y);
    let uc: Vec<f64> = data.u.iter().map(|v| v - u0).collect();
    let yc: Vec<f64> = data.y.iter().map(|v| v - y0).collect();
    let us = dft_spectrum(&uc, n)?;
    let ys = dft_spectrum(&yc, n)?;
    let half = n.div_ceil(2);
    let peak = (1..half).map(|k| us[k].norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::Singular("input has no spectral content".into()));
    }
    let bins: Vec<usize> = (1..half).filter(|&k| us[k].norm() >= 0.05 * peak).collect();
    let g: Vec<Complex64> = bins.iter().map(|&k| ys[k] / us[k]).collect();
    Ok(FrfEstimate {
        period_length: n,
        sample_rate: data.sample_rate,
        excited_bins: bins,
        g,
        var_noise: None,
        var_total: None,
        n_periods_used: 1,
        n_realizations_used: 1,
    })
}

/// Output of the linear stage.
#[derive(Clone, Debug)]
pub struct LinearStage {
    pub frf: FrfEstimate,
    pub tf: TransferFunctionFit,
    pub balanced: LinearStateSpace,
    /// Balanced model refined by time-domain LM from zero initial state.
    pub bla: PnlssModel,
    pub report: FitReport,
    /// Same refinement with the initial state free; seeds the models that estimate `x0`.
    pub bla_x0: PnlssModel,
}

/// BLA, rational fit, realization, balancing and time-domain refinement.
pub fn linear_stage(data: &Dataset, settings: &ModelSettings, exec: Execution) -> Result<LinearStage> {
    let frf = record_bla(data, exec)?;
    let n_b = settings.numerator_order.unwrap_or(settings.n);
    let tf = fit_transfer_function_with(&frf, settings.n, n_b, None, &settings.linear_lm)?;
    let stable = if tf.stable {
        tf.model.clone()
    } else {
        log::warn!("rational fit has poles outside the unit circle; reflecting them");
        tf.model.stabilized()
    };
    let ss = realize_state_space(&stable)?;
    let balanced = balance_realization(&ss)?;
    let start = PnlssModel::linear_only(balanced.clone(), false)?;
    let (bla, report) = fit_output_error(&start, &data.u, &data.y, &start.default_free(), 0, &settings.linear_lm)?;
    let start = PnlssModel::linear_only(balanced.clone(), true)?;
    let (bla_x0, _) = fit_output_error(&start, &data.u, &data.y, &start.default_free(), 0, &settings.linear_lm)?;
    Ok(LinearStage { frf, tf, balanced, bla, report, bla_x0 })
}

/// A record to score: simulate `u` in full from the model's `x0`, compare over `range`.
#[derive(Clone, Debug)]
struct Evaluation {
    name: &'static str,
    u: Vec<f64>,
    y: Vec<f64>,
    range: Range<usize>,
}

/// One row of the comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    /// `"ok"` or the failure message.
    pub status: String,
    /// Counted parameters (entries of every estimated matrix, `x0` when estimated).
    pub n_params: Option<usize>,
    /// Same, with the closed-form nonlinear counts.
    pub n_params_formula: Option<usize>,
    pub rmse: BTreeMap<String, f64>,
    pub iterations: Option<usize>,
    pub note: String,
}

impl ModelRow {
    fn failed(kind: ModelKind, msg: String) -> Self {
        Self {
            model: kind.name().into(),
            status: format!("failed: {msg}"),
            n_params: None,
            n_params_formula: None,
            rmse: BTreeMap::new(),
            iterations: None,
            note: String::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub splits: Vec<String>,
    pub rows: Vec<ModelRow>,
}

fn fmt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.9e}"))
}

impl ComparisonReport {
    pub fn row(&self, kind: ModelKind) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == kind.name())
    }

    pub fn rmse(&self, kind: ModelKind, split: &str) -> Option<f64> {
        self.row(kind).and_then(|r| r.rmse.get(split).copied())
    }

    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(ModelRow::is_ok)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,status,n_params,n_params_formula");
        for s in &self.splits {
            write!(out, ",rmse_{s}").unwrap();
        }
        out.push_str(",iterations,note\n");
        for r in &self.rows {
            let status = if r.is_ok() { "ok".to_string() } else { format!("\"{}\"", r.status.replace('"', "'")) };
            write!(
                out,
                "{},{},{},{}",
                r.model,
                status,
                r.n_params.map_or("NA".into(), |v| v.to_string()),
                r.n_params_formula.map_or("NA".into(), |v| v.to_string())
            )
            .unwrap();
            for s in &self.splits {
                write!(out, ",{}", fmt_num(r.rmse.get(s).copied())).unwrap();
            }
            writeln!(out, ",{},\"{}\"", r.iterations.map_or("NA".into(), |v| v.to_string()), r.note).unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("config {}  seed {}  version {}\n", &self.config_hash[..16], self.seed, self.version);
        write!(out, "{:<12} {:>8} {:>8}", "model", "N_theta", "formula").unwrap();
        for s in &self.splits {
            write!(out, " {:>14}", format!("rmse_{s}")).unwrap();
        }
        out.push_str("  status\n");
        for r in &self.rows {
            write!(
                out,
                "{:<12} {:>8} {:>8}",
                r.model,
                r.n_params.map_or("-".into(), |v| v.to_string()),
                r.n_params_formula.map_or("-".into(), |v| v.to_string())
            )
            .unwrap();
            for s in &self.splits {
                write!(out, " {:>14}", r.rmse.get(s).map_or("-".into(), |v| format!("{v:.6e}"))).unwrap();
            }
            writeln!(out, "  {}", r.status).unwrap();
        }
        out
    }
}

/// Everything a pipeline run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: ComparisonReport,
    pub data: ExperimentData,
    pub linear: Option<LinearStage>,
    pub models: Vec<(ModelKind, ModelFile)>,
    /// Per split: the measured output and each model's simulated output over the scored range.
    pub predictions: BTreeMap<String, (Vec<f64>, Vec<(String, Vec<f64>)>)>,
}

struct Fitted {
    kind: ModelKind,
    file: ModelFile,
    row: ModelRow,
}

fn simulate_file(file: &ModelFile, u: &[f64]) -> Result<Vec<f64>> {
    Ok(match file {
        ModelFile::Pnlss(m) => m.simulate(u)?.y,
        ModelFile::Nlss2(m) => m.simulate(u)?.y,
        ModelFile::Decoupled(m) => m.simulate(u)?.y,
        ModelFile::Linear(l) => l.simulate(u, &DVector::zeros(l.order()))?,
        ModelFile::TransferFunction(tf) => realize_state_space(tf)?.simulate(u, &DVector::zeros(tf.n_a()))?,
    })
}

/// RMSE of a saved model on a record (simulated from the model's own `x0`).
pub fn evaluate_model(file: &ModelFile, data: &Dataset) -> Result<f64> {
    rms_error(&simulate_file(file, &data.u)?, &data.y)
}

fn score(file: &ModelFile, evals: &[Evaluation], row: &mut ModelRow) {
    for ev in evals {
        match simulate_file(file, &ev.u).and_then(|y| rms_error(&y[ev.range.clone()], &ev.y[ev.range.clone()])) {
            Ok(r) => {
                row.rmse.insert(ev.name.into(), r);
            }
            Err(e) => {
                row.rmse.insert(ev.name.into(), f64::NAN);
                row.note = format!("{} simulation failed: {e}", ev.name);
            }
        }
    }
}

enum Task {
    Pnlss,
    PnlssIChain { report_i: bool, dec: bool },
    Nlss2,
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    /// Training record for the nonlinear fits.
    u: &'a [f64],
    y: &'a [f64],
    /// Record whose tail scores LM iterates and the lambda grid.
    holdout: Option<ValidationRecord<'a>>,
    bla: &'a PnlssModel,
    bla_x0: &'a PnlssModel,
    n_linear: usize,
}

fn fit_model<N: NonlinearPart>(
    ctx: &Context,
    start: &NlssModel<N>,
    free: &[usize],
) -> Result<(NlssModel<N>, FitReport)> {
    let m = &ctx.config.models;
    match &ctx.holdout {
        Some(h) if m.early_stopping => {
            let score = |model: &NlssModel<N>| {
                if m.stable_linear_part && model.linear.spectral_radius() >= 1.0 {
                    return f64::INFINITY;
                }
                h.rmse(model).unwrap_or(f64::INFINITY)
            };
            let (fitted, mut report) = fit_output_error_scored(start, ctx.u, ctx.y, free, 0, &m.lm, &score)?;
            report.rmse.insert("holdout".into(), h.rmse(&fitted).unwrap_or(f64::INFINITY));
            Ok((fitted, report))
        }
        _ => fit_output_error(start, ctx.u, ctx.y, free, 0, &m.lm),
    }
}

fn poly_counts(ctx: &Context, x0: bool) -> (usize, usize) {
    let m = &ctx.config.models;
    let extra = ctx.n_linear + if x0 { m.n } else { 0 };
    let (struct_nl, formula_nl) = if m.mask == BasisMask::Full {
        let s = structural_nonlinear_parameters(m.n, 1, 1, m.degree).expect("degree checked");
        let f = count_nonlinear_parameters(m.n, 1, 1, m.degree).expect("degree checked");
        (usize::try_from(s).unwrap_or(usize::MAX), usize::try_from(f).unwrap_or(usize::MAX))
    } else {
        let b = build_basis(m.n, 1, m.degree, m.mask).expect("degree checked");
        (b.len() * (m.n + 1), b.len() * (m.n + 1))
    };
    (extra + struct_nl, extra + formula_nl)
}

/// Halves the branch coefficients until the decoupled model simulates `u`
/// finitely; zero coefficients (the linear model) always do.
fn shrink_until_finite(model: &DecoupledModel, u: &[f64]) -> (DecoupledModel, f64) {
    let mut alpha = 1.0;
    for _ in 0..10 {
        let candidate = NlssModel { nonlinear: model.nonlinear.scaled(alpha), ..model.clone() };
        if candidate.simulate(u).is_ok() {
            return (candidate, alpha);
        }
        alpha *= 0.5;
    }
    (NlssModel { nonlinear: model.nonlinear.scaled(0.0), ..model.clone() }, 0.0)
}

fn fit_pnlss(ctx: &Context, x0_estimated: bool) -> Result<(PnlssModel, FitReport)> {
    let m = &ctx.config.models;
    let basis = build_basis(m.n, 1, m.degree, m.mask)?;
    let lin = if x0_estimated { ctx.bla_x0 } else { ctx.bla };
    let mut start = PnlssModel::from_linear(lin.linear.clone(), basis, x0_estimated)?;
    start.x0 = lin.x0.clone();
    fit_model(ctx, &start, &start.default_free())
}

fn run_task(task: &Task, ctx: &Context) -> Vec<std::result::Result<Fitted, (ModelKind, String)>> {
    let m = &ctx.config.models;
    let seed = ctx.config.seed;
    match task {
        Task::Pnlss => {
            let res = fit_pnlss(ctx, false).map(|(model, rep)| {
                let (n_params, n_formula) = poly_counts(ctx, false);
                Fitted {
                    kind: ModelKind::Pnlss,
                    file: ModelFile::Pnlss(model),
                    row: row_from(ModelKind::Pnlss, n_params, n_formula, &rep, String::new()),
                }
            });
            vec![res.map_err(|e| (ModelKind::Pnlss, e.to_string()))]
        }
        Task::PnlssIChain { report_i, dec } => {
            let mut out = Vec::new();
            match fit_pnlss(ctx, true) {
                Ok((model, rep)) => {
                    if *dec {
                        let settings = DecoupleSettings {
                            rank: m.rank,
                            n_samples: m.n_samples,
                            seed: seed.wrapping_add(11),
                            scale: m.sampling_scale.clone(),
                            cpd: CpdSettings {
                                restarts: m.cpd_restarts,
                                execution: Execution::Sequential,
                                ..CpdSettings::default()
                            },
                            degree: None,
                        };
                        let res = decouple(&model, ctx.u, &settings).and_then(|dec| {
                            let (start, alpha) = shrink_until_finite(&dec.model, ctx.u);
                            let (fitted, drep) = fit_model(ctx, &start, &start.default_free())?;
                            let counts = count_decoupled_parameters(m.n, 1, 1, m.degree as usize, m.rank);
                            let base = ctx.n_linear + m.n;
                            let mut note = format!("cpd_residual={:.3e}", dec.factors.residual);
                            if alpha < 1.0 {
                                write!(note, " branches_scaled={alpha}").unwrap();
                            }
                            Ok(Fitted {
                                kind: ModelKind::PnlssIDec,
                                file: ModelFile::Decoupled(fitted),
                                row: row_from(
                                    ModelKind::PnlssIDec,
                                    base + counts.structural,
                                    base + counts.formula,
                                    &drep,
                                    note,
                                ),
                            })
                        });
                        out.push(res.map_err(|e| (ModelKind::PnlssIDec, e.to_string())));
                    }
                    if *report_i {
                        let (n_params, n_formula) = poly_counts(ctx, true);
                        out.insert(
                            0,
                            Ok(Fitted {
                                kind: ModelKind::PnlssI,
                                file: ModelFile::Pnlss(model),
                                row: row_from(ModelKind::PnlssI, n_params, n_formula, &rep, String::new()),
                            }),
                        );
                    }
                }
                Err(e) => {
                    if *report_i {
                        out.push(Err((ModelKind::PnlssI, e.to_string())));
                    }
                    if *dec {
                        out.push(Err((ModelKind::PnlssIDec, format!("base PNLSS-I fit failed: {e}"))));
                    }
                }
            }
            out
        }
        Task::Nlss2 => vec![fit_nlss2(ctx).map_err(|e| (ModelKind::Nlss2, e.to_string()))],
    }
}

fn fit_nlss2(ctx: &Context) -> Result<Fitted> {
    let m = &ctx.config.models;
    let ss = &ctx.bla_x0.linear;
    let net = NetworkFitSettings {
        hidden: m.hidden,
        activation: m.activation,
        restarts: m.network_restarts,
        seed: ctx.config.seed.wrapping_add(21),
        lm: m.network_lm.clone(),
        execution: Execution::Sequential,
    };
    let (lambda, note) = match &ctx.holdout {
        Some(h) => {
            let sel = select_lambda(ss, ctx.u, ctx.y, h, &m.lambda_grid, &net)?;
            (sel.lambda, format!("lambda={:e}", sel.lambda))
        }
        None => (m.lambda_grid[0], format!("lambda={:e} (no holdout)", m.lambda_grid[0])),
    };
    let est = estimate_states(ss, ctx.u, ctx.y, lambda)?;
    let init = initialize_from_states(ss, ctx.u, ctx.y, &est, &net)?;
    let (model, rep) = fit_model(ctx, &init, &init.layout().all())?;
    let n_params = model.n_free_params();
    Ok(Fitted {
        kind: ModelKind::Nlss2,
        file: ModelFile::Nlss2(model),
        row: row_from(ModelKind::Nlss2, n_params, n_params, &rep, note),
    })
}

fn row_from(kind: ModelKind, n_params: usize, n_formula: usize, rep: &FitReport, note: String) -> ModelRow {
    ModelRow {
        model: kind.name().into(),
        status: "ok".into(),
        n_params: Some(n_params),
        n_params_formula: Some(n_formula),
        rmse: BTreeMap::new(),
        iterations: Some(rep.n_iterations),
        note,
    }
}

/// Runs the whole workflow. Stage failures are recorded per model; the
/// function only errors when the data cannot be produced.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let data = load_data(config)?;
    run_pipeline_on(config, data)
}

/// [`run_pipeline`] on already loaded data.
pub fn run_pipeline_on(config: &ExperimentConfig, data: ExperimentData) -> Result<PipelineOutput> {
    config.validate()?;
    // fitting record and scored ranges
    let est = &data.estimation;
    let (fit, evals_raw): (Dataset, Vec<(&'static str, &Dataset, Range<usize>)>) = match &data.validation {
        Some(val) => {
            let fit_len = config.estimation_samples.map_or(est.len(), |n| n.min(est.len()));
            let fit = if fit_len == est.len() { est.clone() } else { est.slice(0..fit_len)? };
            (fit, vec![("estimation", est, 0..fit_len), ("validation", val, 0..val.len())])
        }
        None => {
            let (e, v, t) = split_dataset(est, config.split)?;
            let n_e = e.len();
            let mut evals = vec![("estimation", est, 0..n_e), ("validation", est, n_e..n_e + v.len())];
            if let Some(t) = &t {
                evals.push(("test", est, n_e + v.len()..n_e + v.len() + t.len()));
            }
            let fit_len = config.estimation_samples.map_or(n_e, |n| n.min(n_e));
            (if fit_len == n_e { e } else { e.slice(0..fit_len)? }, evals)
        }
    };
    // deviations from the estimation-record means
    let u0 = mean(&fit.u);
    let y0 = mean(&fit.y);
    let centre = |d: &Dataset| -> Dataset {
        let mut c = d.clone();
        c.u.iter_mut().for_each(|v| *v -= u0);
        c.y.iter_mut().for_each(|v| *v -= y0);
        c
    };
    let fit_c = centre(&fit);
    // training prefix and holdout tail for early stopping and lambda selection
    let (train_len, hold_data, hold_range) = match &data.validation {
        Some(_) => {
            let (n_inner, n_hold, _) = split_lengths(fit_c.len(), SplitFractions { test: 0.0, ..config.split });
            (n_inner, fit_c.clone(), n_inner..n_inner + n_hold)
        }
        None => {
            let v = &evals_raw[1].2;
            (fit_c.len(), centre(&est.slice(0..v.end)?), v.clone())
        }
    };
    let holdout = (train_len >= 10 && hold_range.len() >= 10).then(|| ValidationRecord {
        u: &hold_data.u,
        y: &hold_data.y,
        score: hold_range.clone(),
    });
    let train_len = if holdout.is_some() { train_len } else { fit_c.len() };
    let evals: Vec<Evaluation> = evals_raw
        .iter()
        .map(|(name, d, r)| {
            let c = centre(d);
            Evaluation { name, u: c.u[..r.end].to_vec(), y: c.y[..r.end].to_vec(), range: r.clone() }
        })
        .collect();
    let splits: Vec<String> = evals.iter().map(|e| e.name.to_string()).collect();

    let mut rows: Vec<ModelRow> = Vec::new();
    let mut models = Vec::new();
    let linear = linear_stage(&fit_c, &config.models, config.execution);
    let report_base = |rows: Vec<ModelRow>| ComparisonReport {
        config_hash: config.hash(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        splits: splits.clone(),
        rows,
    };
    let linear = match linear {
        Ok(l) => l,
        Err(e) => {
            for &k in &config.roster {
                rows.push(ModelRow::failed(k, format!("linear stage failed: {e}")));
            }
            return Ok(PipelineOutput {
                report: report_base(rows),
                data,
                linear: None,
                models,
                predictions: BTreeMap::new(),
            });
        }
    };

    let n_linear = linear.bla.linear.n_params();
    let ctx = Context {
        config,
        u: &fit_c.u[..train_len],
        y: &fit_c.y[..train_len],
        holdout,
        bla: &linear.bla,
        bla_x0: &linear.bla_x0,
        n_linear,
    };
    let has = |k: ModelKind| config.roster.contains(&k);
    let mut tasks = Vec::new();
    if has(ModelKind::Pnlss) {
        tasks.push(Task::Pnlss);
    }
    if has(ModelKind::PnlssI) || has(ModelKind::PnlssIDec) {
        tasks.push(Task::PnlssIChain { report_i: has(ModelKind::PnlssI), dec: has(ModelKind::PnlssIDec) });
    }
    if has(ModelKind::Nlss2) {
        tasks.push(Task::Nlss2);
    }
    let results: Vec<_> = map_slice(config.execution, &tasks, |t| run_task(t, &ctx)).into_iter().flatten().collect();

    let mut fitted: BTreeMap<ModelKind, Fitted> = BTreeMap::new();
    let mut failures: BTreeMap<ModelKind, String> = BTreeMap::new();
    if has(ModelKind::Bla) {
        let n_p = n_linear;
        fitted.insert(
            ModelKind::Bla,
            Fitted {
                kind: ModelKind::Bla,
                file: ModelFile::Pnlss(linear.bla.clone()),
                row: row_from(
                    ModelKind::Bla,
                    n_p,
                    n_p,
                    &linear.report,
                    format!("tf_cost={:.3e}", linear.tf.report.final_cost()),
                ),
            },
        );
    }
    for r in results {
        match r {
            Ok(f) => {
                fitted.insert(f.kind, f);
            }
            Err((k, msg)) => {
                failures.insert(k, msg);
            }
        }
    }

    let mut predictions: BTreeMap<String, (Vec<f64>, Vec<(String, Vec<f64>)>)> = BTreeMap::new();
    for ev in &evals {
        predictions.insert(ev.name.into(), (ev.y[ev.range.clone()].iter().map(|v| v + y0).collect(), Vec::new()));
    }
    for &k in &config.roster {
        if let Some(mut f) = fitted.remove(&k) {
            score(&f.file, &evals, &mut f.row);
            for ev in &evals {
                if let Ok(y) = simulate_file(&f.file, &ev.u) {
                    let entry = predictions.get_mut(ev.name).expect("inserted above");
                    entry.1.push((k.name().into(), y[ev.range.clone()].iter().map(|v| v + y0).collect()));
                }
            }
            rows.push(f.row);
            models.push((k, f.file));
        } else {
            let msg = failures.remove(&k).unwrap_or_else(|| "not run".into());
            log::warn!("{} failed: {msg}", k.name());
            rows.push(ModelRow::failed(k, msg));
        }
    }
    Ok(PipelineOutput { report: report_base(rows), data, linear: Some(linear), models, predictions })
}

impl PipelineOutput {
    /// Writes the report (CSV, text, JSON), models, FRF and per-split prediction CSVs.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir.join("models"))?;
        fs::write(out_dir.join("report.csv"), self.report.to_csv())?;
        fs::write(out_dir.join("report.txt"), self.report.to_table())?;
        fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        for (k, file) in &self.models {
            file.save(&out_dir.join("models").join(format!("{}.json", k.name().to_lowercase().replace('-', "_"))))?;
        }
        if let Some(lin) = &self.linear {
            lin.frf.write_csv(&out_dir.join("frf.csv"))?;
            ModelFile::TransferFunction(lin.tf.model.clone())
                .save(&out_dir.join("models").join("transfer_function.json"))?;
            ModelFile::Linear(lin.balanced.clone()).save(&out_dir.join("models").join("balanced.json"))?;
        }
        self.data.estimation.write_csv(&out_dir.join("estimation.csv"))?;
        if let Some(v) = &self.data.validation {
            v.write_csv(&out_dir.join("validation.csv"))?;
        }
        for (split, (y, preds)) in &self.predictions {
            let mut out = String::from("t,y");
            for (name, _) in preds {
                write!(out, ",y_{}", name.to_lowercase().replace('-', "_")).unwrap();
            }
            out.push('\n');
            for (t, yt) in y.iter().enumerate() {
                write!(out, "{t},{yt}").unwrap();
                for (_, p) in preds {
                    write!(out, ",{}", p[t]).unwrap();
                }
                out.push('\n');
            }
            fs::write(out_dir.join(format!("predictions_{split}.csv")), out)?;
        }
        Ok(())
    }
}
