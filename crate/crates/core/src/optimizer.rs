//! Levenberg-Marquardt for nonlinear least squares, plus the frequency-domain
//! output-error cost used for reporting.
//!
//! Each step solves `(J'J + lambda diag(J'J)) delta = -J'r`, computed from an SVD
//! of the column-scaled Jacobian rather than from `J'J` itself. A step is
//! accepted only if it lowers the mean-square cost; otherwise the damping is raised
//! and the parameters stay untouched. Residual providers signal a failed
//! simulation with [`Error::Divergence`], which is treated as an infinite cost.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::dft_spectrum;

/// Residual vector `r(theta)` with its Jacobian `dr/dtheta`.
pub trait LeastSquaresProblem: Sync {
    fn n_params(&self) -> usize;

    fn residuals(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Residuals and Jacobian at `theta` (rows match `residuals`).
    fn residuals_and_jacobian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Stop once the mean-square cost is at or below this value.
    pub abs_cost_tol: f64,
    /// Stop when an accepted step improves the cost by less than this fraction.
    pub rel_cost_tol: f64,
    /// Stop when an accepted step satisfies `|delta| <= step_tol (|theta| + step_tol)`.
    pub step_tol: f64,
    /// Give up once damping exceeds this value.
    pub max_damping: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_damping: 1e-6,
            damping_increase: 10.0,
            damping_decrease: 3.0,
            abs_cost_tol: 0.0,
            rel_cost_tol: 1e-10,
            step_tol: 1e-14,
            max_damping: 1e16,
        }
    }
}

impl LmSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_damping > 0.0) || !(self.damping_increase > 1.0) || !(self.damping_decrease > 1.0) {
            return Err(Error::InvalidArgument("damping must be positive and its factors > 1".into()));
        }
        Ok(())
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIterations,
    CostTolerance,
    RelativeCostTolerance,
    StepTolerance,
    DampingOverflow,
    NoFreeParameters,
}

/// One LM iteration, accepted or not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost after the iteration (the trial cost for rejected steps, `inf` on divergence).
    pub cost: f64,
    pub damping: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean-square cost at the start and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub theta: Vec<f64>,
    pub n_iterations: usize,
    pub termination: Termination,
    /// RMSE per named dataset, filled in by callers.
    pub rmse: BTreeMap<String, f64>,
    /// Holdout score at the start and after every accepted step (iterate selection only).
    #[serde(default)]
    pub holdout_trace: Vec<f64>,
    /// Index into `cost_trace` of the iterate returned in `theta` when it is not the last one.
    #[serde(default)]
    pub selected_step: Option<usize>,
}

impl FitReport {
    pub fn initial_cost(&self) -> f64 {
        self.cost_trace[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("cost trace is never empty")
    }

    pub fn accepted_steps(&self) -> usize {
        self.cost_trace.len() - 1
    }

    /// Fixed-width iteration table (iter, cost, damping, step norm).
    pub fn iteration_table(&self) -> String {
        let mut out = format!("{:>5} {:>14} {:>10} {:>11} {:>4}\n", "iter", "cost", "damping", "step", "ok");
        for it in &self.iterations {
            out.push_str(&format!(
                "{:>5} {:>14.6e} {:>10.2e} {:>11.3e} {:>4}\n",
                it.iteration,
                it.cost,
                it.damping,
                it.step_norm,
                if it.accepted { "y" } else { "n" }
            ));
        }
        out
    }
}

fn mean_square(r: &DVector<f64>) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        r.norm_squared() / r.len() as f64
    }
}

/// Minimizes the mean square of `problem`'s residuals starting from `theta_init`.
pub fn minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    theta_init: &DVector<f64>,
    settings: &LmSettings,
) -> Result<FitReport> {
    run_lm(problem, theta_init, settings, &mut |_| {})
}

/// [`minimize`], then returns the iterate (initial point or accepted step)
/// with the lowest `holdout` score instead of the last one. Non-finite
/// scores count as infinite.
pub fn minimize_selected<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    theta_init: &DVector<f64>,
    settings: &LmSettings,
    holdout: &dyn Fn(&DVector<f64>) -> f64,
) -> Result<FitReport> {
    let mut best: (f64, usize, DVector<f64>) = (f64::INFINITY, 0, theta_init.clone());
    let mut trace = Vec::new();
    let mut report = run_lm(problem, theta_init, settings, &mut |theta| {
        let score = holdout(theta);
        let score = if score.is_finite() { score } else { f64::INFINITY };
        if score < best.0 || trace.is_empty() {
            best = (score, trace.len(), theta.clone());
        }
        trace.push(score);
    })?;
    if best.1 + 1 != report.cost_trace.len() {
        report.selected_step = Some(best.1);
        report.theta = best.2.as_slice().to_vec();
    }
    report.holdout_trace = trace;
    Ok(report)
}

fn run_lm<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    theta_init: &DVector<f64>,
    settings: &LmSettings,
    on_iterate: &mut dyn FnMut(&DVector<f64>),
) -> Result<FitReport> {
    settings.validate()?;
    if theta_init.len() != problem.n_params() {
        return Err(Error::Dimension(format!(
            "theta has {} entries, problem expects {}",
            theta_init.len(),
            problem.n_params()
        )));
    }
    let (mut r, jac) = problem.residuals_and_jacobian(theta_init).map_err(|e| match e {
        Error::Divergence { step } => {
            Error::InvalidArgument(format!("initial parameters do not simulate finitely (diverged at step {step})"))
        }
        other => other,
    })?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite residual at the initial parameters".into()));
    }

    let mut theta = theta_init.clone();
    on_iterate(&theta);
    let mut cost = mean_square(&r);
    let mut report = FitReport {
        cost_trace: vec![cost],
        iterations: Vec::new(),
        theta: theta.as_slice().to_vec(),
        n_iterations: 0,
        termination: Termination::MaxIterations,
        rmse: BTreeMap::new(),
        holdout_trace: Vec::new(),
        selected_step: None,
    };
    if theta.is_empty() {
        report.termination = Termination::NoFreeParameters;
        return Ok(report);
    }
    if cost <= settings.abs_cost_tol {
        report.termination = Termination::CostTolerance;
        return Ok(report);
    }

    let mut damping = settings.initial_damping;
    let mut system = DampedSystem::new(&jac, &r);
    for iteration in 1..=settings.max_iterations {
        report.n_iterations = iteration;
        let step = system.step(damping);
        if !step.iter().all(|v| v.is_finite()) {
            report.iterations.push(IterationRecord {
                iteration,
                cost: f64::INFINITY,
                damping,
                step_norm: f64::NAN,
                accepted: false,
            });
            damping *= settings.damping_increase;
            if damping > settings.max_damping {
                report.termination = Termination::DampingOverflow;
                break;
            }
            continue;
        }
        let step_norm = step.norm();
        let trial = &theta + &step;
        let trial_cost = match problem.residuals(&trial) {
            Ok(rt) if rt.iter().all(|v| v.is_finite()) => mean_square(&rt),
            Ok(_) => f64::INFINITY,
            Err(e) if e.is_divergence() => f64::INFINITY,
            Err(e) => return Err(e),
        };

        if trial_cost < cost {
            let improvement = (cost - trial_cost) / cost;
            theta = trial;
            let (rn, jn) = problem.residuals_and_jacobian(&theta)?;
            r = rn;
            system = DampedSystem::new(&jn, &r);
            cost = mean_square(&r);
            on_iterate(&theta);
            report.cost_trace.push(cost);
            report.iterations.push(IterationRecord { iteration, cost, damping, step_norm, accepted: true });
            damping = (damping / settings.damping_decrease).max(1e-300);
            if cost <= settings.abs_cost_tol {
                report.termination = Termination::CostTolerance;
                break;
            }
            if improvement < settings.rel_cost_tol {
                report.termination = Termination::RelativeCostTolerance;
                break;
            }
            if step_norm <= settings.step_tol * (theta.norm() + settings.step_tol) {
                report.termination = Termination::StepTolerance;
                break;
            }
        } else {
            report.iterations.push(IterationRecord {
                iteration,
                cost: trial_cost,
                damping,
                step_norm,
                accepted: false,
            });
            damping *= settings.damping_increase;
            if damping > settings.max_damping {
                report.termination = Termination::DampingOverflow;
                break;
            }
        }
    }
    report.theta = theta.as_slice().to_vec();
    Ok(report)
}

/// SVD of the column-scaled Jacobian, reused for every damping value tried
/// at one iterate. The step minimizes `|J delta + r|^2 + lambda |S delta|^2`
/// with `S^2` the diagonal of `J'J` (floored so parameters without influence
/// stay damped), without forming `J'J`.
struct DampedSystem {
    col_scale: Vec<f64>,
    v: DMatrix<f64>,
    sigma: DVector<f64>,
    ut_r: DVector<f64>,
}

impl DampedSystem {
    fn new(jac: &DMatrix<f64>, r: &DVector<f64>) -> Self {
        let norms: Vec<f64> = (0..jac.ncols()).map(|j| jac.column(j).norm()).collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let floor = if max > 0.0 { 1e-6 * max } else { 1.0 };
        let col_scale: Vec<f64> = norms.into_iter().map(|c| c.max(floor)).collect();
        let mut scaled = jac.clone();
        for (j, c) in col_scale.iter().enumerate() {
            scaled.column_mut(j).scale_mut(1.0 / c);
        }
        let svd = scaled.svd(true, true);
        let u = svd.u.expect("requested");
        let v = svd.v_t.expect("requested").transpose();
        let ut_r = u.tr_mul(r);
        Self { col_scale, v, sigma: svd.singular_values, ut_r }
    }

    fn step(&self, damping: f64) -> DVector<f64> {
        let coef = DVector::from_fn(self.sigma.len(), |i, _| {
            let s = self.sigma[i];
            -s * self.ut_r[i] / (s * s + damping)
        });
        let mut step = &self.v * coef;
        for (j, c) in self.col_scale.iter().enumerate() {
            step[j] /= c;
        }
        step
    }
}

/// `sum_k |Y_mod(k) - Y(k)|^2 / W(k)` over `bins`, with the DFT taken over the
/// whole record as one period. With all bins and `W = 1` this equals
/// `N * sum_t (y_mod - y)^2`.
pub fn frequency_cost(y_mod: &[f64], y: &[f64], bins: &[usize], weights: &[f64]) -> Result<f64> {
    if y_mod.len() != y.len() {
        return Err(Error::Dimension(format!("lengths differ ({} vs {})", y_mod.len(), y.len())));
    }
    if bins.len() != weights.len() {
        return Err(Error::Dimension("one weight per selected bin is required".into()));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidArgument("weights must be positive".into()));
    }
    let err: Vec<f64> = y_mod.iter().zip(y).map(|(a, b)| a - b).collect();
    let spec = dft_spectrum(&err, err.len())?;
    bins.iter()
        .zip(weights)
        .map(|(&k, &w)| {
            spec.get(k).map(|c| c.norm_sqr() / w).ok_or_else(|| Error::InvalidArgument(format!("bin {k} out of range")))
        })
        .sum()
}

/// [`frequency_cost`] over all bins with unit weights.
pub fn frequency_cost_unweighted(y_mod: &[f64], y: &[f64]) -> Result<f64> {
    let bins: Vec<usize> = (0..y.len()).collect();
    frequency_cost(y_mod, y, &bins, &vec![1.0; y.len()])
}
