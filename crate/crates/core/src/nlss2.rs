//! Nonlinear state-space models with small sigmoid networks, initialized from a
//! regularized estimate of the state sequence.
//!
//! The linear model's states are re-estimated from the data by a quadratic
//! program trading output fit against state-equation consistency; the
//! residuals of both equations then become two static regression problems.

use nalgebra::{DMatrix, DVector, SVD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linfit::LinearStateSpace;
pub use crate::model::ValidationRecord;
use crate::model::{fit_output_error, NlssModel, NonlinearJacobians, NonlinearPart};
use crate::optimizer::{minimize, FitReport, LeastSquaresProblem, LmSettings};
use crate::par::{map_range, Execution};
use crate::seeded_rng;

/// Minimizer of `sum |y - C x - D u|^2 + lambda sum |x(t+1) - A x - B u|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateEstimate {
    /// `n` values per sample.
    pub states: Vec<f64>,
    pub n_states: usize,
    pub lambda: f64,
    /// Output term at the optimum.
    pub e_y: f64,
    /// State-equation term at the optimum (without the factor `lambda`).
    pub e_x: f64,
}

impl StateEstimate {
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.n_states.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn check_siso(ss: &LinearStateSpace, u: &[f64], y: &[f64]) -> Result<()> {
    if ss.n_inputs() != 1 || ss.n_outputs() != 1 {
        return Err(Error::Dimension("state estimation is implemented for single-input single-output data".into()));
    }
    if u.len() != y.len() || u.is_empty() {
        return Err(Error::Dimension(format!("u has {} samples, y has {}", u.len(), y.len())));
    }
    Ok(())
}

/// Objective terms `(E_y, E_x)` for a candidate state sequence.
pub fn state_objective_terms(ss: &LinearStateSpace, u: &[f64], y: &[f64], states: &[f64]) -> (f64, f64) {
    let n = ss.order();
    let steps = y.len();
    let mut e_y = 0.0;
    let mut e_x = 0.0;
    for t in 0..steps {
        let x = DVector::from_column_slice(&states[t * n..(t + 1) * n]);
        let r = y[t] - (&ss.c * &x)[0] - ss.d[(0, 0)] * u[t];
        e_y += r * r;
        if t + 1 < steps {
            let xn = DVector::from_column_slice(&states[(t + 1) * n..(t + 2) * n]);
            let rx = xn - &ss.a * &x - ss.b.column(0) * u[t];
            e_x += rx.norm_squared();
        }
    }
    (e_y, e_x)
}

/// Solves the block-tridiagonal normal equations of the regularized state problem.
pub fn estimate_states(ss: &LinearStateSpace, u: &[f64], y: &[f64], lambda: f64) -> Result<StateEstimate> {
    check_siso(ss, u, y)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    let n = ss.order();
    let steps = y.len();
    if n == 0 {
        return Ok(StateEstimate { states: Vec::new(), n_states: 0, lambda, e_y: 0.0, e_x: 0.0 });
    }
    let (a, b, c) = (&ss.a, ss.b.column(0).into_owned(), &ss.c);
    let d = ss.d[(0, 0)];
    let ctc = c.transpose() * c;
    let ata = a.transpose() * a;
    let eye = DMatrix::<f64>::identity(n, n);
    let upper = -a.transpose() * lambda; // block (t, t+1); block (t+1, t) is its transpose

    let mut diag = Vec::with_capacity(steps);
    let mut rhs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut dt = ctc.clone();
        let mut rt: DVector<f64> = c.row(0).transpose() * (y[t] - d * u[t]);
        if t >= 1 {
            dt += &eye * lambda;
            rt += &b * (lambda * u[t - 1]);
        }
        if t + 1 < steps {
            dt += &ata * lambda;
            rt -= a.transpose() * &b * (lambda * u[t]);
        }
        diag.push(dt);
        rhs.push(rt);
    }

    // block LDL' forward sweep
    let lower = upper.transpose();
    let mut factors: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(steps);
    let mut gains: Vec<DMatrix<f64>> = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            let update = &lower * &gains[t - 1];
            diag[t] -= update;
            let prev = rhs[t - 1].clone();
            rhs[t] -= &lower * factors[t - 1].solve(&prev);
        }
        let chol = diag[t].clone().cholesky().ok_or_else(|| {
            let eig = diag[t].clone().symmetric_eigenvalues();
            let rank = eig.iter().filter(|v| **v > 1e-12 * eig.amax().max(1e-300)).count();
            Error::Singular(format!(
                "state normal equations singular at sample {t}: pivot block rank {rank} of {n} (lambda = {lambda}); \
                 states are not determined by the output alone"
            ))
        })?;
        if t + 1 < steps {
            gains.push(chol.solve(&upper));
        }
        factors.push(chol);
    }
    let mut x = vec![DVector::zeros(n); steps];
    x[steps - 1] = factors[steps - 1].solve(&rhs[steps - 1]);
    for t in (0..steps - 1).rev() {
        let rt = &rhs[t] - &upper * &x[t + 1];
        x[t] = factors[t].solve(&rt);
    }
    let states: Vec<f64> = x.iter().flat_map(|v| v.iter().cloned()).collect();
    let (e_y, e_x) = state_objective_terms(ss, u, y, &states);
    Ok(StateEstimate { states, n_states: n, lambda, e_y, e_x })
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Logistic,
}

impl Activation {
    fn value_and_slope(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let h = z.tanh();
                (h, 1.0 - h * h)
            }
            Activation::Logistic => {
                let h = 1.0 / (1.0 + (-z).exp());
                (h, h * (1.0 - h))
            }
        }
    }
}

/// `W2 sigma(W1 s + b1) + b2` with one hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidNetwork {
    pub activation: Activation,
    #[serde(with = "crate::io::matrix")]
    pub w1: DMatrix<f64>,
    #[serde(with = "crate::io::vector")]
    pub b1: DVector<f64>,
    #[serde(with = "crate::io::matrix")]
    pub w2: DMatrix<f64>,
    #[serde(with = "crate::io::vector")]
    pub b2: DVector<f64>,
}

impl SigmoidNetwork {
    pub fn zeros(n_in: usize, n_out: usize, hidden: usize, activation: Activation) -> Self {
        Self {
            activation,
            w1: DMatrix::zeros(hidden, n_in),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(n_out, hidden),
            b2: DVector::zeros(n_out),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.w2.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    /// `N_n (m + 1) + p (N_n + 1)`.
    pub fn n_params(&self) -> usize {
        self.hidden() * (self.n_inputs() + 1) + self.n_outputs() * (self.hidden() + 1)
    }

    /// `[W1 row-major, b1, W2 row-major, b2]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for i in 0..self.w1.nrows() {
            p.extend(self.w1.row(i).iter());
        }
        p.extend(self.b1.iter());
        for i in 0..self.w2.nrows() {
            p.extend(self.w2.row(i).iter());
        }
        p.extend(self.b2.iter());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Dimension(format!("network expects {} weights, got {}", self.n_params(), p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network weight".into()));
        }
        let (h, m, o) = (self.hidden(), self.n_inputs(), self.n_outputs());
        let mut k = 0;
        for i in 0..h {
            for j in 0..m {
                self.w1[(i, j)] = p[k];
                k += 1;
            }
        }
        for i in 0..h {
            self.b1[i] = p[k];
            k += 1;
        }
        for i in 0..o {
            for j in 0..h {
                self.w2[(i, j)] = p[k];
                k += 1;
            }
        }
        for i in 0..o {
            self.b2[i] = p[k];
            k += 1;
        }
        Ok(())
    }

    fn hidden_layer(&self, s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (0..self.hidden())
            .map(|k| {
                let z = self.b1[k] + self.w1.row(k).iter().zip(s).map(|(w, v)| w * v).sum::<f64>();
                self.activation.value_and_slope(z)
            })
            .unzip()
    }

    pub fn eval_into(&self, s: &[f64], out: &mut [f64]) {
        let (h, _) = self.hidden_layer(s);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.b2[i] + self.w2.row(i).iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn eval(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_outputs()];
        self.eval_into(s, &mut out);
        out
    }

    /// Writes `d out / d s` and `d out / d params` into the given blocks.
    fn derivatives(&self, s: &[f64], d_s: &mut DMatrix<f64>, d_p: &mut DMatrix<f64>, p_off: usize) {
        let (h, slope) = self.hidden_layer(s);
        let (nh, m, o) = (self.hidden(), self.n_inputs(), self.n_outputs());
        let b1_off = p_off + nh * m;
        let w2_off = b1_off + nh;
        let b2_off = w2_off + o * nh;
        for i in 0..o {
            for k in 0..nh {
                let g = self.w2[(i, k)] * slope[k];
                for j in 0..m {
                    d_s[(i, j)] += g * self.w1[(k, j)];
                    d_p[(i, p_off + k * m + j)] = g * s[j];
                }
                d_p[(i, b1_off + k)] = g;
                d_p[(i, w2_off + i * nh + k)] = h[k];
            }
            d_p[(i, b2_off + i)] = 1.0;
        }
    }
}

/// The two networks of an NLSS2 model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkPart {
    /// State-equation term, `n + n_u -> n`.
    pub f_net: SigmoidNetwork,
    /// Output-equation term, `n + n_u -> n_y`.
    pub g_net: SigmoidNetwork,
}

impl NonlinearPart for NetworkPart {
    fn n_states(&self) -> usize {
        self.f_net.n_outputs()
    }

    fn n_outputs(&self) -> usize {
        self.g_net.n_outputs()
    }

    fn n_vars(&self) -> usize {
        self.f_net.n_inputs()
    }

    fn n_params(&self) -> usize {
        self.f_net.n_params() + self.g_net.n_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.f_net.params();
        p.extend(self.g_net.params());
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let k = self.f_net.n_params();
        if p.len() != self.n_params() {
            return Err(Error::Dimension("network weight count".into()));
        }
        self.f_net.set_params(&p[..k])?;
        self.g_net.set_params(&p[k..])
    }

    fn eval(&self, s: &[f64], fx: &mut [f64], gy: &mut [f64]) {
        self.f_net.eval_into(s, fx);
        self.g_net.eval_into(s, gy);
    }

    fn jacobians(&self, s: &[f64], out: &mut NonlinearJacobians) {
        self.f_net.derivatives(s, &mut out.fx_s, &mut out.fx_p, 0);
        self.g_net.derivatives(s, &mut out.gy_s, &mut out.gy_p, self.f_net.n_params());
    }
}

pub type Nlss2Model = NlssModel<NetworkPart>;

/// Options for the static network regressions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFitSettings {
    pub hidden: usize,
    pub activation: Activation,
    pub restarts: usize,
    pub seed: u64,
    pub lm: LmSettings,
    pub execution: Execution,
}

impl Default for NetworkFitSettings {
    fn default() -> Self {
        Self {
            hidden: 2,
            activation: Activation::Tanh,
            restarts: 10,
            seed: 0,
            lm: LmSettings::default().with_max_iterations(100),
            execution: Execution::Parallel,
        }
    }
}

/// A trained network and its training RMSE in target units.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkFit {
    pub network: SigmoidNetwork,
    pub rmse: f64,
}

struct RegressionProblem<'a> {
    template: SigmoidNetwork,
    inputs: &'a [Vec<f64>],
    targets: &'a [Vec<f64>],
}

impl RegressionProblem<'_> {
    fn net(&self, theta: &DVector<f64>) -> Result<SigmoidNetwork> {
        let mut net = self.template.clone();
        net.set_params(theta.as_slice())?;
        Ok(net)
    }
}

impl LeastSquaresProblem for RegressionProblem<'_> {
    fn n_params(&self) -> usize {
        self.template.n_params()
    }

    fn residuals(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let net = self.net(theta)?;
        let p = net.n_outputs();
        let mut r = DVector::zeros(self.inputs.len() * p);
        for (t, (s, y)) in self.inputs.iter().zip(self.targets).enumerate() {
            let o = net.eval(s);
            for i in 0..p {
                r[t * p + i] = o[i] - y[i];
            }
        }
        Ok(r)
    }

    fn residuals_and_jacobian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let net = self.net(theta)?;
        let (p, m, np) = (net.n_outputs(), net.n_inputs(), net.n_params());
        let mut r = DVector::zeros(self.inputs.len() * p);
        let mut jac = DMatrix::zeros(self.inputs.len() * p, np);
        let mut d_s = DMatrix::zeros(p, m);
        let mut d_p = DMatrix::zeros(p, np);
        for (t, (s, y)) in self.inputs.iter().zip(self.targets).enumerate() {
            let o = net.eval(s);
            d_p.fill(0.0);
            net.derivatives(s, &mut d_s, &mut d_p, 0);
            for i in 0..p {
                r[t * p + i] = o[i] - y[i];
                jac.row_mut(t * p + i).copy_from(&d_p.row(i));
            }
        }
        Ok((r, jac))
    }
}

fn column_stats(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..dim).map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    (mean, std)
}

/// Least-squares output layer for fixed hidden weights.
fn fit_output_layer(net: &mut SigmoidNetwork, inputs: &[Vec<f64>], targets: &[Vec<f64>]) {
    let nh = net.hidden();
    let mut phi = DMatrix::zeros(inputs.len(), nh + 1);
    for (t, s) in inputs.iter().enumerate() {
        let (h, _) = net.hidden_layer(s);
        for k in 0..nh {
            phi[(t, k)] = h[k];
        }
        phi[(t, nh)] = 1.0;
    }
    let svd = SVD::new(phi, true, true);
    for i in 0..net.n_outputs() {
        let rhs = DVector::from_iterator(targets.len(), targets.iter().map(|y| y[i]));
        if let Ok(w) = svd.solve(&rhs, 1e-12) {
            if w.iter().all(|v| v.is_finite()) {
                for k in 0..nh {
                    net.w2[(i, k)] = w[k];
                }
                net.b2[i] = w[nh];
            }
        }
    }
}

/// Trains a one-hidden-layer network on `inputs -> targets` by LM from
/// `restarts` seeded initializations and keeps the best.
///
/// Inputs and targets are standardized for training; the scaling is folded
/// back into the returned weights.
pub fn fit_static_nonlinearity(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    settings: &NetworkFitSettings,
) -> Result<NetworkFit> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Dimension(format!("{} inputs, {} targets", inputs.len(), targets.len())));
    }
    if settings.hidden == 0 || settings.restarts == 0 {
        return Err(Error::InvalidArgument("need at least one hidden neuron and one restart".into()));
    }
    let m = inputs[0].len();
    let p = targets[0].len();
    if inputs.iter().any(|r| r.len() != m) || targets.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension("ragged regression data".into()));
    }
    if inputs.iter().chain(targets).flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite regression data".into()));
    }
    let (mu, sigma) = column_stats(inputs, m);
    if let Some(j) = sigma.iter().position(|s| !(*s > 1e-12 * (1.0 + mu.iter().map(|v| v.abs()).fold(0.0, f64::max)))) {
        return Err(Error::InvalidArgument(format!("regression input {j} has zero variance")));
    }
    let (nu, tau) = column_stats(targets, p);
    let tau: Vec<f64> = tau.iter().map(|t| if *t > 1e-300 { *t } else { 1.0 }).collect();
    let xs: Vec<Vec<f64>> = inputs.iter().map(|r| (0..m).map(|j| (r[j] - mu[j]) / sigma[j]).collect()).collect();
    let ys: Vec<Vec<f64>> = targets.iter().map(|r| (0..p).map(|i| (r[i] - nu[i]) / tau[i]).collect()).collect();

    let template = SigmoidNetwork::zeros(m, p, settings.hidden, settings.activation);
    let candidates = map_range(settings.execution, settings.restarts, |k| -> Result<(f64, SigmoidNetwork)> {
        let mut rng = seeded_rng(settings.seed.wrapping_add(k as u64));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut net = template.clone();
        net.w1 = DMatrix::from_fn(settings.hidden, m, |_, _| normal.sample(&mut rng));
        net.b1 = DVector::from_fn(settings.hidden, |_, _| 0.5 * normal.sample(&mut rng));
        fit_output_layer(&mut net, &xs, &ys);
        let problem = RegressionProblem { template: net.clone(), inputs: &xs, targets: &ys };
        let report = minimize(&problem, &DVector::from_vec(net.params()), &settings.lm)?;
        let net = problem.net(&DVector::from_column_slice(&report.theta))?;
        Ok((report.final_cost(), net))
    });
    let mut best: Option<(f64, SigmoidNetwork)> = None;
    let mut last_err = None;
    for c in candidates {
        match c {
            Ok((cost, net)) if cost.is_finite() => {
                if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                    best = Some((cost, net));
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let (_, net) = best.ok_or_else(|| {
        Error::AllCandidatesFailed(format!(
            "every network restart failed: {}",
            last_err.map_or("non-finite cost".into(), |e| e.to_string())
        ))
    })?;

    // undo the standardization
    let mut out = net.clone();
    for k in 0..settings.hidden {
        let mut shift = 0.0;
        for j in 0..m {
            out.w1[(k, j)] = net.w1[(k, j)] / sigma[j];
            shift += out.w1[(k, j)] * mu[j];
        }
        out.b1[k] = net.b1[k] - shift;
    }
    for i in 0..p {
        for k in 0..settings.hidden {
            out.w2[(i, k)] = net.w2[(i, k)] * tau[i];
        }
        out.b2[i] = net.b2[i] * tau[i] + nu[i];
    }
    if out.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("network weights became non-finite".into()));
    }
    let ss: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(s, y)| out.eval(s).iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    let rmse = (ss / (inputs.len() * p) as f64).sqrt();
    Ok(NetworkFit { network: out, rmse })
}

/// Networks fitted to the state- and output-equation residuals of a state estimate.
pub fn initialize_from_states(
    ss: &LinearStateSpace,
    u: &[f64],
    y: &[f64],
    est: &StateEstimate,
    settings: &NetworkFitSettings,
) -> Result<Nlss2Model> {
    let n = ss.order();
    let steps = y.len();
    if steps < 2 || est.len() != steps {
        return Err(Error::Dimension("state estimate does not cover the record".into()));
    }
    let inputs: Vec<Vec<f64>> = (0..steps)
        .map(|t| {
            let mut s = est.state(t).to_vec();
            s.push(u[t]);
            s
        })
        .collect();
    let f_targets: Vec<Vec<f64>> = (0..steps - 1)
        .map(|t| {
            let x = DVector::from_column_slice(est.state(t));
            let xn = DVector::from_column_slice(est.state(t + 1));
            (xn - &ss.a * x - ss.b.column(0) * u[t]).iter().cloned().collect()
        })
        .collect();
    let g_targets: Vec<Vec<f64>> = (0..steps)
        .map(|t| {
            let x = DVector::from_column_slice(est.state(t));
            vec![y[t] - (&ss.c * x)[0] - ss.d[(0, 0)] * u[t]]
        })
        .collect();
    let f_fit = fit_static_nonlinearity(&inputs[..steps - 1], &f_targets, settings)?;
    let g_settings = NetworkFitSettings { seed: settings.seed.wrapping_add(1_000_003), ..settings.clone() };
    let g_fit = fit_static_nonlinearity(&inputs, &g_targets, &g_settings)?;
    let x0 = DVector::from_column_slice(&est.states[..n]);
    NlssModel::new(ss.clone(), NetworkPart { f_net: f_fit.network, g_net: g_fit.network }, x0, true)
}

/// Outcome of the lambda grid search.
#[derive(Clone, Debug)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// Per grid entry: validation RMSE, or the failure message.
    pub scores: Vec<(f64, std::result::Result<f64, String>)>,
    pub model: Nlss2Model,
}

/// For each `lambda`: estimate states on the estimation record, fit networks,
/// score on `val`. Returns the smallest RMSE (ties go to the smaller lambda).
pub fn select_lambda(
    ss: &LinearStateSpace,
    u: &[f64],
    y: &[f64],
    val: &ValidationRecord<'_>,
    grid: &[f64],
    settings: &NetworkFitSettings,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if val.score.is_empty() || val.score.end > val.y.len() || val.u.len() != val.y.len() {
        return Err(Error::InvalidArgument("validation record or score range is invalid".into()));
    }
    let results = map_range(settings.execution, grid.len(), |i| -> Result<(f64, Nlss2Model)> {
        let est = estimate_states(ss, u, y, grid[i])?;
        let inner = NetworkFitSettings { execution: Execution::Sequential, ..settings.clone() };
        let model = initialize_from_states(ss, u, y, &est, &inner)?;
        let r = val.rmse(&model)?;
        if !r.is_finite() {
            return Err(Error::InvalidArgument("non-finite validation RMSE".into()));
        }
        Ok((r, model))
    });
    let mut best: Option<(usize, f64, Nlss2Model)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok((r, model)) => {
                scores.push((grid[i], Ok(r)));
                let better = match &best {
                    None => true,
                    Some((j, br, _)) => r < *br || (r == *br && grid[i] < grid[*j]),
                };
                if better {
                    best = Some((i, r, model));
                }
            }
            Err(e) => scores.push((grid[i], Err(e.to_string()))),
        }
    }
    match best {
        Some((i, _, model)) => Ok(LambdaSelection { lambda: grid[i], scores, model }),
        None => {
            let detail: Vec<String> = scores
                .iter()
                .map(|(l, r)| format!("lambda={l}: {}", r.as_ref().err().map_or("", |s| s.as_str())))
                .collect();
            Err(Error::AllCandidatesFailed(detail.join("; ")))
        }
    }
}

/// Joint LM over the linear matrices, both networks and `x0`.
pub fn optimize_full_nlss2(
    model: &Nlss2Model,
    u: &[f64],
    y: &[f64],
    settings: &LmSettings,
) -> Result<(Nlss2Model, FitReport)> {
    let free = model.layout().all();
    fit_output_error(model, u, y, &free, 0, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn network_parameter_count() {
        let f = SigmoidNetwork::zeros(4, 3, 2, Activation::Tanh);
        let g = SigmoidNetwork::zeros(4, 1, 2, Activation::Tanh);
        assert_eq!(f.n_params(), 19);
        assert_eq!(g.n_params(), 13);
        assert_eq!(16 + 3 + f.n_params() + g.n_params(), 51);
    }

    #[test]
    fn scalar_output_only_state() {
        let ss = LinearStateSpace::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
        )
        .unwrap();
        let u = vec![0.3, -0.1, 0.7, 0.2];
        let y = vec![1.0, 2.0, -1.0, 0.5];
        let est = estimate_states(&ss, &u, &y, 0.0).unwrap();
        assert_eq!(est.states, y);
        assert_eq!(est.e_y, 0.0);
    }

    #[test]
    fn unobservable_without_regularization() {
        let ss = LinearStateSpace::new(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let u = vec![0.0; 5];
        let y = vec![1.0; 5];
        match estimate_states(&ss, &u, &y, 0.0) {
            Err(Error::Singular(msg)) => assert!(msg.contains("rank")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn logistic_slope() {
        let (h, s) = Activation::Logistic.value_and_slope(0.0);
        assert_eq!(h, 0.5);
        assert_eq!(s, 0.25);
    }
}
