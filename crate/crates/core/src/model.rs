//! Shared nonlinear state-space machinery
//!
//! `x(t+1) = A x + B u + f(s)`, `y = C x + D u + g(s)` with `s = [x; u]`.
//! The static maps `f`, `g` are supplied by a [`NonlinearPart`]; the engine
//! handles simulation, parameter vectors, forward sensitivities and the
//! output-error least-squares problem for every model family in the crate.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linfit::LinearStateSpace;
use crate::optimizer::{minimize, minimize_selected, FitReport, LeastSquaresProblem, LmSettings};
use crate::signals::rms_error;

/// States larger than this in magnitude abort a simulation.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Derivatives of the static maps at one point `s`.
#[derive(Clone, Debug)]
pub struct NonlinearJacobians {
    /// `df/ds`, `n x (n + n_u)`.
    pub fx_s: DMatrix<f64>,
    /// `dg/ds`, `n_y x (n + n_u)`.
    pub gy_s: DMatrix<f64>,
    /// `df/dp`, `n x n_params`.
    pub fx_p: DMatrix<f64>,
    /// `dg/dp`, `n_y x n_params`.
    pub gy_p: DMatrix<f64>,
}

impl NonlinearJacobians {
    pub fn zeros(n: usize, n_y: usize, n_vars: usize, n_params: usize) -> Self {
        Self {
            fx_s: DMatrix::zeros(n, n_vars),
            gy_s: DMatrix::zeros(n_y, n_vars),
            fx_p: DMatrix::zeros(n, n_params),
            gy_p: DMatrix::zeros(n_y, n_params),
        }
    }

    fn clear(&mut self) {
        self.fx_s.fill(0.0);
        self.gy_s.fill(0.0);
        self.fx_p.fill(0.0);
        self.gy_p.fill(0.0);
    }
}

/// The nonlinear terms `f(s)` and `g(s)` of a state-space model.
pub trait NonlinearPart: Clone + Send + Sync {
    /// State dimension `n`.
    fn n_states(&self) -> usize;
    fn n_outputs(&self) -> usize;
    /// `n + n_u`.
    fn n_vars(&self) -> usize;
    fn n_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]) -> Result<()>;
    /// Writes `f(s)` into `fx` and `g(s)` into `gy`.
    fn eval(&self, s: &[f64], fx: &mut [f64], gy: &mut [f64]);
    /// Fills `out` (zeroed by the caller) with the derivatives at `s`.
    fn jacobians(&self, s: &[f64], out: &mut NonlinearJacobians);
}

/// Index ranges of the blocks in a model's parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub a: Range<usize>,
    pub b: Range<usize>,
    pub c: Range<usize>,
    pub d: Range<usize>,
    pub nonlinear: Range<usize>,
    pub x0: Range<usize>,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.x0.end
    }

    /// Every index except the initial state.
    pub fn without_x0(&self) -> Vec<usize> {
        (0..self.x0.start).collect()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.total()).collect()
    }
}

/// Simulated trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    /// `x(t)` for `t = 0..N`, stored sample-major (`n` values per sample).
    pub states: Vec<f64>,
    /// `y(t)`, `n_y` values per sample.
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlssModel<N> {
    pub linear: LinearStateSpace,
    pub nonlinear: N,
    #[serde(with = "crate::io::vector")]
    pub x0: DVector<f64>,
    /// True when `x0` is a free parameter of the fit.
    pub x0_estimated: bool,
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn read_row_major(m: &mut DMatrix<f64>, p: &[f64]) {
    let cols = m.ncols();
    for (k, v) in p.iter().enumerate() {
        m[(k / cols, k % cols)] = *v;
    }
}

impl<N: NonlinearPart> NlssModel<N> {
    pub fn new(linear: LinearStateSpace, nonlinear: N, x0: DVector<f64>, x0_estimated: bool) -> Result<Self> {
        let n = linear.order();
        let (n_u, n_y) = (linear.n_inputs(), linear.n_outputs());
        if nonlinear.n_states() != n || nonlinear.n_outputs() != n_y || nonlinear.n_vars() != n + n_u {
            return Err(Error::Dimension(format!(
                "nonlinear part maps {} variables to {}+{} values, linear part has n={n}, n_u={n_u}, n_y={n_y}",
                nonlinear.n_vars(),
                nonlinear.n_states(),
                nonlinear.n_outputs()
            )));
        }
        if x0.len() != n {
            return Err(Error::Dimension(format!("x0 has {} entries, n = {n}", x0.len())));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("x0 must be finite".into()));
        }
        Ok(Self { linear, nonlinear, x0, x0_estimated })
    }

    pub fn order(&self) -> usize {
        self.linear.order()
    }

    pub fn n_inputs(&self) -> usize {
        self.linear.n_inputs()
    }

    pub fn n_outputs(&self) -> usize {
        self.linear.n_outputs()
    }

    pub fn layout(&self) -> ParamLayout {
        let l = &self.linear;
        let a = 0..l.a.len();
        let b = a.end..a.end + l.b.len();
        let c = b.end..b.end + l.c.len();
        let d = c.end..c.end + l.d.len();
        let nonlinear = d.end..d.end + self.nonlinear.n_params();
        let x0 = nonlinear.end..nonlinear.end + self.order();
        ParamLayout { a, b, c, d, nonlinear, x0 }
    }

    /// Length of [`Self::params`].
    pub fn n_params(&self) -> usize {
        self.layout().total()
    }

    /// Parameters counted for reporting: `x0` only when it is estimated.
    pub fn n_free_params(&self) -> usize {
        let l = self.layout();
        if self.x0_estimated {
            l.total()
        } else {
            l.x0.start
        }
    }

    /// Indices optimized by default: everything, minus `x0` unless estimated.
    pub fn default_free(&self) -> Vec<usize> {
        let l = self.layout();
        if self.x0_estimated {
            l.all()
        } else {
            l.without_x0()
        }
    }

    /// `[vec(A), vec(B), vec(C), vec(D), nonlinear, x0]`, matrices row-major.
    pub fn params(&self) -> DVector<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        push_row_major(&mut p, &self.linear.a);
        push_row_major(&mut p, &self.linear.b);
        push_row_major(&mut p, &self.linear.c);
        push_row_major(&mut p, &self.linear.d);
        p.extend(self.nonlinear.params());
        p.extend(self.x0.iter());
        DVector::from_vec(p)
    }

    pub fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        let l = self.layout();
        if p.len() != l.total() {
            return Err(Error::Dimension(format!("{} parameters given, model has {}", p.len(), l.total())));
        }
        let s = p.as_slice();
        read_row_major(&mut self.linear.a, &s[l.a]);
        read_row_major(&mut self.linear.b, &s[l.b]);
        read_row_major(&mut self.linear.c, &s[l.c]);
        read_row_major(&mut self.linear.d, &s[l.d]);
        self.nonlinear.set_params(&s[l.nonlinear])?;
        self.x0.copy_from_slice(&s[l.x0]);
        Ok(())
    }

    pub fn with_params(&self, p: &DVector<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(p)?;
        Ok(m)
    }

    fn check_input(&self, u: &[f64]) -> Result<usize> {
        let n_u = self.n_inputs();
        if n_u == 0 || !u.len().is_multiple_of(n_u) {
            return Err(Error::Dimension(format!("input length {} is not a multiple of n_u = {n_u}", u.len())));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("input contains non-finite samples".into()));
        }
        Ok(u.len() / n_u)
    }

    /// Simulates from the model's own `x0`.
    pub fn simulate(&self, u: &[f64]) -> Result<Simulation> {
        self.simulate_from(u, &self.x0)
    }

    pub fn simulate_from(&self, u: &[f64], x0: &DVector<f64>) -> Result<Simulation> {
        let steps = self.check_input(u)?;
        let (n, n_u, n_y) = (self.order(), self.n_inputs(), self.n_outputs());
        if x0.len() != n {
            return Err(Error::Dimension("initial state length".into()));
        }
        let l = &self.linear;
        let mut states = Vec::with_capacity(steps * n);
        let mut y = Vec::with_capacity(steps * n_y);
        let mut x = x0.clone();
        let mut s = vec![0.0; n + n_u];
        let mut fx = vec![0.0; n];
        let mut gy = vec![0.0; n_y];
        for t in 0..steps {
            let ut = &u[t * n_u..(t + 1) * n_u];
            s[..n].copy_from_slice(x.as_slice());
            s[n..].copy_from_slice(ut);
            self.nonlinear.eval(&s, &mut fx, &mut gy);
            for i in 0..n_y {
                let mut v = gy[i];
                for j in 0..n {
                    v += l.c[(i, j)] * x[j];
                }
                for j in 0..n_u {
                    v += l.d[(i, j)] * ut[j];
                }
                y.push(v);
            }
            states.extend(x.iter());
            let mut next = DVector::zeros(n);
            for i in 0..n {
                let mut v = fx[i];
                for j in 0..n {
                    v += l.a[(i, j)] * x[j];
                }
                for j in 0..n_u {
                    v += l.b[(i, j)] * ut[j];
                }
                if !(v.abs() <= DIVERGENCE_THRESHOLD) {
                    return Err(Error::Divergence { step: t + 1 });
                }
                next[i] = v;
            }
            x = next;
        }
        Ok(Simulation { states, y })
    }

    /// Output and its Jacobian `dy/dtheta` restricted to the `free` columns.
    ///
    /// Rows follow the output layout (`n_y` per sample).
    pub fn output_jacobian(&self, u: &[f64], free: &[usize]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let steps = self.check_input(u)?;
        let (n, n_u, n_y) = (self.order(), self.n_inputs(), self.n_outputs());
        let lay = self.layout();
        let total = lay.total();
        let mut col_of = vec![usize::MAX; total];
        for (c, &p) in free.iter().enumerate() {
            if p >= total {
                return Err(Error::InvalidArgument(format!("free index {p} out of range ({total} parameters)")));
            }
            if col_of[p] != usize::MAX {
                return Err(Error::InvalidArgument(format!("free index {p} listed twice")));
            }
            col_of[p] = c;
        }
        let nf = free.len();
        let np = self.nonlinear.n_params();
        let nl_cols: Vec<(usize, usize)> = (0..np)
            .filter_map(|k| {
                let c = col_of[lay.nonlinear.start + k];
                (c != usize::MAX).then_some((k, c))
            })
            .collect();
        let l = &self.linear;

        let mut sens = DMatrix::<f64>::zeros(n, nf);
        for i in 0..n {
            let c = col_of[lay.x0.start + i];
            if c != usize::MAX {
                sens[(i, c)] = 1.0;
            }
        }
        let mut jac = DMatrix::<f64>::zeros(steps * n_y, nf);
        let mut y = Vec::with_capacity(steps * n_y);
        let mut x = self.x0.clone();
        let mut s = vec![0.0; n + n_u];
        let mut fx = vec![0.0; n];
        let mut gy = vec![0.0; n_y];
        let mut nj = NonlinearJacobians::zeros(n, n_y, n + n_u, np);

        for t in 0..steps {
            let ut = &u[t * n_u..(t + 1) * n_u];
            s[..n].copy_from_slice(x.as_slice());
            s[n..].copy_from_slice(ut);
            self.nonlinear.eval(&s, &mut fx, &mut gy);
            nj.clear();
            self.nonlinear.jacobians(&s, &mut nj);

            // output row block
            let c_eff = &l.c + nj.gy_s.columns(0, n);
            let dy = &c_eff * &sens;
            for i in 0..n_y {
                let row = t * n_y + i;
                let mut v = gy[i];
                for j in 0..n {
                    v += l.c[(i, j)] * x[j];
                }
                for j in 0..n_u {
                    v += l.d[(i, j)] * ut[j];
                }
                y.push(v);
                for c in 0..nf {
                    jac[(row, c)] = dy[(i, c)];
                }
                for j in 0..n {
                    let c = col_of[lay.c.start + i * n + j];
                    if c != usize::MAX {
                        jac[(row, c)] += x[j];
                    }
                }
                for j in 0..n_u {
                    let c = col_of[lay.d.start + i * n_u + j];
                    if c != usize::MAX {
                        jac[(row, c)] += ut[j];
                    }
                }
                for &(k, c) in &nl_cols {
                    jac[(row, c)] += nj.gy_p[(i, k)];
                }
            }

            // state sensitivity
            let a_eff = &l.a + nj.fx_s.columns(0, n);
            let mut next_sens = &a_eff * &sens;
            let mut next = DVector::zeros(n);
            for i in 0..n {
                let mut v = fx[i];
                for j in 0..n {
                    v += l.a[(i, j)] * x[j];
                }
                for j in 0..n_u {
                    v += l.b[(i, j)] * ut[j];
                }
                if !(v.abs() <= DIVERGENCE_THRESHOLD) {
                    return Err(Error::Divergence { step: t + 1 });
                }
                next[i] = v;
                for j in 0..n {
                    let c = col_of[lay.a.start + i * n + j];
                    if c != usize::MAX {
                        next_sens[(i, c)] += x[j];
                    }
                }
                for j in 0..n_u {
                    let c = col_of[lay.b.start + i * n_u + j];
                    if c != usize::MAX {
                        next_sens[(i, c)] += ut[j];
                    }
                }
                for &(k, c) in &nl_cols {
                    next_sens[(i, c)] += nj.fx_p[(i, k)];
                }
            }
            if next_sens.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: t + 1 });
            }
            x = next;
            sens = next_sens;
        }
        Ok((y, jac))
    }

    /// Output RMSE against `y` when simulated on `u` from the model's `x0`.
    pub fn rmse(&self, u: &[f64], y: &[f64]) -> Result<f64> {
        rms_error(&self.simulate(u)?.y, y)
    }
}

/// Time-domain output error `y_model - y` as a least-squares problem over a
/// subset of a model's parameters.
pub struct OutputErrorProblem<'a, N> {
    template: &'a NlssModel<N>,
    base: DVector<f64>,
    u: &'a [f64],
    y: &'a [f64],
    free: Vec<usize>,
    skip: usize,
}

impl<'a, N: NonlinearPart> OutputErrorProblem<'a, N> {
    /// `skip` leading samples are left out of the residual (transient).
    pub fn new(model: &'a NlssModel<N>, u: &'a [f64], y: &'a [f64], free: Vec<usize>, skip: usize) -> Result<Self> {
        let steps = model.check_input(u)?;
        if y.len() != steps * model.n_outputs() {
            return Err(Error::Dimension(format!("{} output samples for {steps} input samples", y.len())));
        }
        if skip >= steps {
            return Err(Error::InvalidArgument(format!("transient of {skip} samples leaves no data")));
        }
        let total = model.n_params();
        if let Some(&bad) = free.iter().find(|&&p| p >= total) {
            return Err(Error::InvalidArgument(format!("free index {bad} out of range")));
        }
        Ok(Self { template: model, base: model.params(), u, y, free, skip })
    }

    pub fn initial_theta(&self) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&p| self.base[p]))
    }

    /// Model with the free entries replaced by `theta`.
    pub fn model_at(&self, theta: &DVector<f64>) -> Result<NlssModel<N>> {
        let mut p = self.base.clone();
        for (k, &i) in self.free.iter().enumerate() {
            p[i] = theta[k];
        }
        self.template.with_params(&p)
    }

    fn offset(&self) -> usize {
        self.skip * self.template.n_outputs()
    }
}

impl<N: NonlinearPart> LeastSquaresProblem for OutputErrorProblem<'_, N> {
    fn n_params(&self) -> usize {
        self.free.len()
    }

    fn residuals(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let sim = self.model_at(theta)?.simulate(self.u)?;
        let o = self.offset();
        Ok(DVector::from_iterator(self.y.len() - o, sim.y[o..].iter().zip(&self.y[o..]).map(|(a, b)| a - b)))
    }

    fn residuals_and_jacobian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (ym, jac) = self.model_at(theta)?.output_jacobian(self.u, &self.free)?;
        let o = self.offset();
        let r = DVector::from_iterator(self.y.len() - o, ym[o..].iter().zip(&self.y[o..]).map(|(a, b)| a - b));
        let rows = jac.nrows() - o;
        Ok((r, jac.rows(o, rows).into_owned()))
    }
}

/// Minimizes the output error over `free`; the report's `rmse` carries the
/// estimation-record value under `"estimation"`.
pub fn fit_output_error<N: NonlinearPart>(
    model: &NlssModel<N>,
    u: &[f64],
    y: &[f64],
    free: &[usize],
    skip: usize,
    settings: &LmSettings,
) -> Result<(NlssModel<N>, FitReport)> {
    let problem = OutputErrorProblem::new(model, u, y, free.to_vec(), skip)?;
    let mut report = minimize(&problem, &problem.initial_theta(), settings)?;
    let fitted = problem.model_at(&DVector::from_column_slice(&report.theta))?;
    report.rmse.insert("estimation".into(), fitted.rmse(u, y)?);
    Ok((fitted, report))
}

/// Record used to score a model: simulated in full from the model's `x0`,
/// RMSE computed over `score`.
#[derive(Clone, Debug)]
pub struct ValidationRecord<'a> {
    pub u: &'a [f64],
    pub y: &'a [f64],
    pub score: Range<usize>,
}

impl ValidationRecord<'_> {
    pub fn rmse<N: NonlinearPart>(&self, model: &NlssModel<N>) -> Result<f64> {
        if self.score.is_empty() || self.score.end > self.y.len() || self.u.len() != self.y.len() {
            return Err(Error::InvalidArgument("validation record or score range is invalid".into()));
        }
        let sim = model.simulate(self.u)?;
        rms_error(&sim.y[self.score.clone()], &self.y[self.score.clone()])
    }
}

/// [`fit_output_error`] returning the LM iterate that scores best on `holdout`
/// (early stopping). The holdout RMSE of the returned model is stored as
/// `rmse["holdout"]`.
pub fn fit_output_error_selected<N: NonlinearPart>(
    model: &NlssModel<N>,
    u: &[f64],
    y: &[f64],
    free: &[usize],
    skip: usize,
    settings: &LmSettings,
    holdout: &ValidationRecord<'_>,
) -> Result<(NlssModel<N>, FitReport)> {
    let score = |m: &NlssModel<N>| holdout.rmse(m).unwrap_or(f64::INFINITY);
    let (fitted, mut report) = fit_output_error_scored(model, u, y, free, skip, settings, &score)?;
    report.rmse.insert("holdout".into(), score(&fitted));
    Ok((fitted, report))
}

/// [`fit_output_error`] returning the iterate with the lowest `score`.
pub fn fit_output_error_scored<N: NonlinearPart>(
    model: &NlssModel<N>,
    u: &[f64],
    y: &[f64],
    free: &[usize],
    skip: usize,
    settings: &LmSettings,
    score: &(dyn Fn(&NlssModel<N>) -> f64 + Sync),
) -> Result<(NlssModel<N>, FitReport)> {
    let problem = OutputErrorProblem::new(model, u, y, free.to_vec(), skip)?;
    let by_theta = |theta: &DVector<f64>| problem.model_at(theta).map_or(f64::INFINITY, |m| score(&m));
    let mut report = minimize_selected(&problem, &problem.initial_theta(), settings, &by_theta)?;
    let fitted = problem.model_at(&DVector::from_column_slice(&report.theta))?;
    report.rmse.insert("estimation".into(), fitted.rmse(u, y)?);
    Ok((fitted, report))
}
