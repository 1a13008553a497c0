//! Decoupling of the multivariate polynomial terms of a PNLSS model into
//! parallel univariate branches `W g(V' s)`.
//!
//! Jacobians of the stacked map `p(s) = [E zeta(s); F eta(s)]` are sampled at
//! random points and stacked into a third-order tensor; its canonical
//! polyadic decomposition gives `W`, `V` and samples of each branch
//! derivative, which are fitted by polynomials and integrated.

use nalgebra::{DMatrix, DVector, SVD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fit_output_error, NlssModel, NonlinearJacobians, NonlinearPart};
use crate::optimizer::{FitReport, LmSettings};
use crate::par::{map_range, Execution};
use crate::pnlss::{all_exponents, build_basis, BasisMask, PnlssModel, PolynomialPart};
use crate::seeded_rng;
use crate::signals::std_dev;

/// Jacobians of `p` at `N_s` points: slice `k` is `dp/ds` at `points[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianTensor {
    pub points: Vec<Vec<f64>>,
    pub slices: Vec<DMatrix<f64>>,
    pub seed: u64,
}

impl JacobianTensor {
    /// Builds a tensor from explicit slices (`(n + n_y) x (n + n_u)` each).
    pub fn from_slices(points: Vec<Vec<f64>>, slices: Vec<DMatrix<f64>>) -> Result<Self> {
        if slices.is_empty() || points.len() != slices.len() {
            return Err(Error::Dimension("tensor needs one point per slice".into()));
        }
        let (i, j) = slices[0].shape();
        if slices.iter().any(|s| s.shape() != (i, j)) || points.iter().any(|p| p.len() != j) {
            return Err(Error::Dimension("ragged tensor slices".into()));
        }
        Ok(Self { points, slices, seed: 0 })
    }

    /// `(n + n_y, n + n_u, N_s)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (i, j) = self.slices[0].shape();
        (i, j, self.slices.len())
    }

    pub fn entry(&self, i: usize, j: usize, k: usize) -> f64 {
        self.slices[k][(i, j)]
    }

    pub fn norm(&self) -> f64 {
        self.slices.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Standard deviation of each sampled variable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScale {
    /// Standard normal points.
    Unit,
    /// Per-variable std of the model's simulated states and the input.
    #[default]
    Empirical,
}

/// Std of each state (simulated on `u`) and of the input.
pub fn empirical_scale(model: &PnlssModel, u: &[f64]) -> Result<Vec<f64>> {
    let sim = model.simulate(u)?;
    let (n, n_u) = (model.order(), model.n_inputs());
    let steps = u.len() / n_u;
    let mut scale = Vec::with_capacity(n + n_u);
    for i in 0..n {
        let col: Vec<f64> = (0..steps).map(|t| sim.states[t * n + i]).collect();
        scale.push(std_dev(&col));
    }
    for j in 0..n_u {
        let col: Vec<f64> = (0..steps).map(|t| u[t * n_u + j]).collect();
        scale.push(std_dev(&col));
    }
    Ok(scale.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect())
}

/// Samples `dp/ds` at `n_samples` Gaussian points with per-variable std `scale`.
pub fn sample_jacobians(part: &PolynomialPart, n_samples: usize, seed: u64, scale: &[f64]) -> Result<JacobianTensor> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("need at least one sampling point".into()));
    }
    let nv = part.basis_state.n_vars;
    if scale.len() != nv || scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("sampling scale needs {nv} positive entries")));
    }
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let points: Vec<Vec<f64>> =
        (0..n_samples).map(|_| scale.iter().map(|s| s * normal.sample(&mut rng)).collect()).collect();
    let slices = points.iter().map(|p| part.stacked_jacobian(p)).collect();
    Ok(JacobianTensor { points, slices, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpdSettings {
    pub restarts: usize,
    pub max_sweeps: usize,
    /// Stop when the relative residual decreases by less than this fraction.
    pub tol: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for CpdSettings {
    fn default() -> Self {
        Self { restarts: 10, max_sweeps: 500, tol: 1e-10, seed: 0, execution: Execution::Parallel }
    }
}

/// `T_ijk ~ sum_l W_il V_jl H_kl` with unit columns in `V` and `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct CpdFactors {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub rank: usize,
    /// `|T - model|_F / |T|_F` (0 for the zero tensor).
    pub residual: f64,
    /// Residual after each sweep of the returned restart.
    pub residual_trace: Vec<f64>,
    /// The returned restart met the tolerance before running out of sweeps.
    pub converged: bool,
    /// Set when the residual stays above `1e-6`: the rank may be too small.
    pub rank_warning: bool,
    /// Set when every restart produced nearly collinear `V` columns.
    pub degenerate: bool,
}

fn pinv_solve(m: &DMatrix<f64>, gram: &DMatrix<f64>) -> DMatrix<f64> {
    // m * gram^+ (gram is symmetric)
    let svd = SVD::new(gram.clone(), true, true);
    let tol = 1e-13 * svd.singular_values.max().max(1e-300);
    match svd.pseudo_inverse(tol) {
        Ok(p) => m * p,
        Err(_) => DMatrix::zeros(m.nrows(), m.ncols()),
    }
}

fn relative_residual(t: &JacobianTensor, w: &DMatrix<f64>, v: &DMatrix<f64>, h: &DMatrix<f64>, t_norm: f64) -> f64 {
    let mut ss = 0.0;
    for (k, slice) in t.slices.iter().enumerate() {
        let mut model = w.clone();
        for l in 0..w.ncols() {
            model.column_mut(l).scale_mut(h[(k, l)]);
        }
        ss += (slice - model * v.transpose()).norm_squared();
    }
    ss.sqrt() / t_norm
}

struct AlsRun {
    w: DMatrix<f64>,
    v: DMatrix<f64>,
    h: DMatrix<f64>,
    trace: Vec<f64>,
    converged: bool,
}

fn als_run(t: &JacobianTensor, r: usize, settings: &CpdSettings, seed: u64, t_norm: f64) -> AlsRun {
    let (ni, nj, nk) = t.shape();
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut w = DMatrix::from_fn(ni, r, |_, _| normal.sample(&mut rng));
    let mut v = DMatrix::from_fn(nj, r, |_, _| normal.sample(&mut rng));
    let mut h = DMatrix::from_fn(nk, r, |_, _| normal.sample(&mut rng));
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev = f64::INFINITY;
    for _ in 0..settings.max_sweeps {
        // W
        let mut m = DMatrix::zeros(ni, r);
        for (k, s) in t.slices.iter().enumerate() {
            let sv = s * &v;
            for l in 0..r {
                m.column_mut(l).axpy(h[(k, l)], &sv.column(l), 1.0);
            }
        }
        w = pinv_solve(&m, &(v.transpose() * &v).component_mul(&(h.transpose() * &h)));
        // V
        let mut m = DMatrix::zeros(nj, r);
        for (k, s) in t.slices.iter().enumerate() {
            let sw = s.transpose() * &w;
            for l in 0..r {
                m.column_mut(l).axpy(h[(k, l)], &sw.column(l), 1.0);
            }
        }
        v = pinv_solve(&m, &(w.transpose() * &w).component_mul(&(h.transpose() * &h)));
        // H
        let mut m = DMatrix::zeros(nk, r);
        for (k, s) in t.slices.iter().enumerate() {
            let sv = s * &v;
            for l in 0..r {
                m[(k, l)] = w.column(l).dot(&sv.column(l));
            }
        }
        h = pinv_solve(&m, &(w.transpose() * &w).component_mul(&(v.transpose() * &v)));

        let res = relative_residual(t, &w, &v, &h, t_norm);
        trace.push(res);
        if res < 1e-15 || (prev - res).abs() < settings.tol * prev {
            converged = true;
            break;
        }
        prev = res;
    }
    AlsRun { w, v, h, trace, converged }
}

/// Unit columns in `V`, `W`, sign-fixed, branches sorted by `|h_l|` descending.
fn normalize(w: &mut DMatrix<f64>, v: &mut DMatrix<f64>, h: &mut DMatrix<f64>) {
    let r = w.ncols();
    for l in 0..r {
        for m in [&mut *v, &mut *w] {
            let nrm = m.column(l).norm();
            if nrm > 0.0 {
                m.column_mut(l).scale_mut(1.0 / nrm);
                h.column_mut(l).scale_mut(nrm);
            }
            let imax = m.column(l).iamax();
            if m[(imax, l)] < 0.0 {
                m.column_mut(l).neg_mut();
                h.column_mut(l).neg_mut();
            }
        }
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| h.column(b).norm().total_cmp(&h.column(a).norm()));
    let perm = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), r, |i, j| m[(i, order[j])]);
    *w = perm(w);
    *v = perm(v);
    *h = perm(h);
}

fn has_collinear_columns(v: &DMatrix<f64>) -> bool {
    let r = v.ncols();
    (0..r).any(|a| (a + 1..r).any(|b| v.column(a).dot(&v.column(b)).abs() > 0.999))
}

/// Rank-`r` CPD by alternating least squares, best of seeded restarts.
pub fn cpd_als(tensor: &JacobianTensor, r: usize, settings: &CpdSettings) -> Result<CpdFactors> {
    if r == 0 || settings.restarts == 0 {
        return Err(Error::InvalidArgument("rank and restart count must be positive".into()));
    }
    if tensor.slices.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("tensor has non-finite entries".into()));
    }
    let (ni, nj, nk) = tensor.shape();
    let t_norm = tensor.norm();
    if t_norm == 0.0 {
        return Ok(CpdFactors {
            w: DMatrix::zeros(ni, r),
            v: DMatrix::zeros(nj, r),
            h: DMatrix::zeros(nk, r),
            rank: r,
            residual: 0.0,
            residual_trace: vec![0.0],
            converged: true,
            rank_warning: false,
            degenerate: false,
        });
    }
    let runs = map_range(settings.execution, settings.restarts, |k| {
        let mut run = als_run(tensor, r, settings, settings.seed.wrapping_add(k as u64), t_norm);
        normalize(&mut run.w, &mut run.v, &mut run.h);
        run
    });
    let pick = |allow_degenerate: bool| {
        runs.iter()
            .filter(|run| allow_degenerate || !has_collinear_columns(&run.v))
            .filter(|run| run.trace.last().is_some_and(|v| v.is_finite()))
            .min_by(|a, b| a.trace.last().unwrap().total_cmp(b.trace.last().unwrap()))
    };
    let (best, degenerate) = match pick(false) {
        Some(run) => (run, false),
        None => {
            log::warn!("every CPD restart produced collinear components; keeping the best one");
            (pick(true).ok_or_else(|| Error::AllCandidatesFailed("CPD restarts diverged".into()))?, true)
        }
    };
    let residual = *best.trace.last().expect("at least one sweep");
    let rank_warning = residual > 1e-6;
    if rank_warning {
        log::warn!("CPD residual {residual:.3e} after {} restarts; rank {r} may be insufficient", settings.restarts);
    }
    Ok(CpdFactors {
        w: best.w.clone(),
        v: best.v.clone(),
        h: best.h.clone(),
        rank: r,
        residual,
        residual_trace: best.trace.clone(),
        converged: best.converged,
        rank_warning,
        degenerate,
    })
}

/// Least-squares fit of one branch derivative by powers `1..d-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchDerivativeFit {
    /// Coefficients of `z^1 .. z^(d-1)`.
    pub coefficients: Vec<f64>,
    /// Euclidean norm of the fit residual.
    pub residual: f64,
}

/// Fits `h_kl ~ sum_m c_lm (v_l' s_k)^m`, `m = 1..d-1`, for every branch.
pub fn fit_branch_derivatives(
    factors: &CpdFactors,
    tensor: &JacobianTensor,
    d: u32,
) -> Result<Vec<BranchDerivativeFit>> {
    if d < 2 {
        return Err(Error::InvalidArgument("degree must be at least 2".into()));
    }
    let powers = (d - 1) as usize;
    let nk = tensor.slices.len();
    if nk < powers {
        return Err(Error::InvalidArgument(format!("{nk} samples cannot determine {powers} coefficients")));
    }
    (0..factors.rank)
        .map(|l| {
            let vl = factors.v.column(l);
            let z: Vec<f64> = tensor.points.iter().map(|p| p.iter().zip(vl.iter()).map(|(a, b)| a * b).sum()).collect();
            let vander = DMatrix::from_fn(nk, powers, |k, m| z[k].powi(m as i32 + 1));
            let h = DVector::from_iterator(nk, factors.h.column(l).iter().cloned());
            if vl.norm() == 0.0 {
                return Ok(BranchDerivativeFit { coefficients: vec![0.0; powers], residual: h.norm() });
            }
            let col_norms: Vec<f64> = (0..powers).map(|m| vander.column(m).norm()).collect();
            let mut scaled = vander.clone();
            for (m, cn) in col_norms.iter().enumerate() {
                scaled.column_mut(m).scale_mut(1.0 / cn.max(1e-300));
            }
            let svd = SVD::new(scaled, true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if !(smin > 1e-10 * smax) {
                return Err(Error::Singular(format!(
                    "Vandermonde system for branch {l} is rank deficient; increase the number of sampling points"
                )));
            }
            let c = svd.solve(&h, 0.0).map_err(|e| Error::Singular(e.to_string()))?;
            let coefficients: Vec<f64> = (0..powers).map(|m| c[m] / col_norms[m]).collect();
            let fitted = &vander * DVector::from_column_slice(&coefficients);
            Ok(BranchDerivativeFit { coefficients, residual: (h - fitted).norm() })
        })
        .collect()
}

/// Branch coefficients for degrees `2..=d` from derivative coefficients of powers `1..d-1`.
pub fn integrate_branches(derivatives: &[Vec<f64>]) -> Vec<Vec<f64>> {
    derivatives.iter().map(|c| c.iter().enumerate().map(|(i, v)| v / (i as f64 + 2.0)).collect()).collect()
}

/// `f(s) = W_x g(V' s)`, `g(s) = W_y g(V' s)` with `g_l(z) = sum_{m=2..d} c_lm z^m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupledPart {
    /// `(n + n_u) x r`.
    #[serde(with = "crate::io::matrix")]
    pub v: DMatrix<f64>,
    #[serde(with = "crate::io::matrix")]
    pub w_x: DMatrix<f64>,
    #[serde(with = "crate::io::matrix")]
    pub w_y: DMatrix<f64>,
    /// Row `l` holds the coefficients of degrees `2..=d` of branch `l`.
    #[serde(with = "crate::io::matrix")]
    pub coefficients: DMatrix<f64>,
}

impl DecoupledPart {
    pub fn new(v: DMatrix<f64>, w_x: DMatrix<f64>, w_y: DMatrix<f64>, coefficients: DMatrix<f64>) -> Result<Self> {
        let r = v.ncols();
        if w_x.ncols() != r || w_y.ncols() != r || coefficients.nrows() != r || coefficients.ncols() == 0 {
            return Err(Error::Dimension("V, W and branch coefficients disagree on the number of branches".into()));
        }
        Ok(Self { v, w_x, w_y, coefficients })
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    pub fn degree(&self) -> u32 {
        self.coefficients.ncols() as u32 + 1
    }

    /// Same branches with every coefficient multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self { coefficients: &self.coefficients * alpha, ..self.clone() }
    }

    fn branch(&self, l: usize, z: f64) -> (f64, f64) {
        let mut g = 0.0;
        let mut dg = 0.0;
        let mut zp = z; // z^(m-1)
        for (i, c) in self.coefficients.row(l).iter().enumerate() {
            let m = i as f64 + 2.0;
            dg += m * c * zp;
            zp *= z;
            g += c * zp;
        }
        (g, dg)
    }

    fn projections(&self, s: &[f64]) -> Vec<f64> {
        (0..self.rank()).map(|l| self.v.column(l).iter().zip(s).map(|(a, b)| a * b).sum()).collect()
    }

    /// Coupled coefficients on the full degree-`d` basis by multinomial expansion.
    pub fn expand(&self, n: usize, n_u: usize) -> Result<PolynomialPart> {
        let d = self.degree();
        let basis = build_basis(n, n_u, d, BasisMask::Full)?;
        let nv = n + n_u;
        if self.v.nrows() != nv || self.w_x.nrows() != n {
            return Err(Error::Dimension("expansion dimensions".into()));
        }
        let mut e = DMatrix::zeros(n, basis.len());
        let mut f = DMatrix::zeros(self.w_y.nrows(), basis.len());
        let factorial = |k: u32| (1..=k).map(|v| v as f64).product::<f64>();
        let mut col = 0;
        for m in 2..=d {
            for alpha in all_exponents(nv, m) {
                debug_assert_eq!(basis.exponents[col], alpha);
                let multinom = factorial(m) / alpha.iter().map(|&a| factorial(a)).product::<f64>();
                for l in 0..self.rank() {
                    let vprod: f64 = alpha.iter().enumerate().map(|(j, &a)| self.v[(j, l)].powi(a as i32)).product();
                    let coef = self.coefficients[(l, (m - 2) as usize)] * multinom * vprod;
                    for i in 0..n {
                        e[(i, col)] += self.w_x[(i, l)] * coef;
                    }
                    for i in 0..self.w_y.nrows() {
                        f[(i, col)] += self.w_y[(i, l)] * coef;
                    }
                }
                col += 1;
            }
        }
        PolynomialPart::new(basis.clone(), basis, e, f)
    }
}

impl NonlinearPart for DecoupledPart {
    fn n_states(&self) -> usize {
        self.w_x.nrows()
    }

    fn n_outputs(&self) -> usize {
        self.w_y.nrows()
    }

    fn n_vars(&self) -> usize {
        self.v.nrows()
    }

    fn n_params(&self) -> usize {
        self.v.len() + self.w_x.len() + self.w_y.len() + self.coefficients.len()
    }

    /// `[V, W_x, W_y, coefficients]`, each row-major.
    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for m in [&self.v, &self.w_x, &self.w_y, &self.coefficients] {
            for i in 0..m.nrows() {
                p.extend(m.row(i).iter());
            }
        }
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Dimension("decoupled parameter count".into()));
        }
        let mut k = 0;
        for m in [&mut self.v, &mut self.w_x, &mut self.w_y, &mut self.coefficients] {
            let cols = m.ncols();
            for idx in 0..m.len() {
                m[(idx / cols, idx % cols)] = p[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn eval(&self, s: &[f64], fx: &mut [f64], gy: &mut [f64]) {
        let g: Vec<f64> = self.projections(s).iter().enumerate().map(|(l, &z)| self.branch(l, z).0).collect();
        for (i, o) in fx.iter_mut().enumerate() {
            *o = self.w_x.row(i).iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        for (i, o) in gy.iter_mut().enumerate() {
            *o = self.w_y.row(i).iter().zip(&g).map(|(a, b)| a * b).sum();
        }
    }

    fn jacobians(&self, s: &[f64], out: &mut NonlinearJacobians) {
        let r = self.rank();
        let nv = self.n_vars();
        let (n, n_y) = (self.n_states(), self.n_outputs());
        let nc = self.coefficients.ncols();
        let z = self.projections(s);
        let (g, dg): (Vec<f64>, Vec<f64>) = z.iter().enumerate().map(|(l, &zl)| self.branch(l, zl)).unzip();
        let wx_off = nv * r;
        let wy_off = wx_off + n * r;
        let c_off = wy_off + n_y * r;
        let fill = |w: &DMatrix<f64>, d_s: &mut DMatrix<f64>, d_p: &mut DMatrix<f64>, w_off: usize| {
            for i in 0..w.nrows() {
                for l in 0..r {
                    let wg = w[(i, l)] * dg[l];
                    for j in 0..nv {
                        d_s[(i, j)] += wg * self.v[(j, l)];
                        d_p[(i, j * r + l)] = wg * s[j];
                    }
                    d_p[(i, w_off + i * r + l)] = g[l];
                    let mut zp = z[l];
                    for m in 0..nc {
                        zp *= z[l];
                        d_p[(i, c_off + l * nc + m)] = w[(i, l)] * zp;
                    }
                }
            }
        };
        fill(&self.w_x, &mut out.fx_s, &mut out.fx_p, wx_off);
        fill(&self.w_y, &mut out.gy_s, &mut out.gy_p, wy_off);
    }
}

pub type DecoupledModel = NlssModel<DecoupledPart>;

/// Nonlinear parameter counts of a decoupled model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoupledCounts {
    /// `(2n + n_u + n_y + d) r`.
    pub formula: usize,
    /// `((n + n_u) + (n + n_y) + (d - 1)) r`: entries of `V`, `W` and the branch coefficients.
    pub structural: usize,
}

pub fn count_decoupled_parameters(n: usize, n_u: usize, n_y: usize, d: usize, r: usize) -> DecoupledCounts {
    DecoupledCounts {
        formula: (2 * n + n_u + n_y + d) * r,
        structural: ((n + n_u) + (n + n_y) + d.saturating_sub(1)) * r,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupleSettings {
    pub rank: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub scale: SamplingScale,
    pub cpd: CpdSettings,
    /// Branch polynomial degree; defaults to the degree of the base model.
    pub degree: Option<u32>,
}

impl Default for DecoupleSettings {
    fn default() -> Self {
        Self {
            rank: 5,
            n_samples: 500,
            seed: 0,
            scale: SamplingScale::Empirical,
            cpd: CpdSettings::default(),
            degree: None,
        }
    }
}

/// Result of the constructive decoupling step (before re-optimization).
#[derive(Clone, Debug)]
pub struct Decoupling {
    pub model: DecoupledModel,
    pub factors: CpdFactors,
    pub branch_fits: Vec<BranchDerivativeFit>,
}

/// Samples, decomposes and integrates the polynomial part of `base`.
///
/// `u` is only used for [`SamplingScale::Empirical`].
pub fn decouple(base: &PnlssModel, u: &[f64], settings: &DecoupleSettings) -> Result<Decoupling> {
    let part = &base.nonlinear;
    let d = settings.degree.unwrap_or_else(|| part.basis_state.degree.max(part.basis_output.degree));
    if d < 2 {
        return Err(Error::InvalidArgument("branch degree must be at least 2".into()));
    }
    let (n, n_u, n_y) = (base.order(), base.n_inputs(), base.n_outputs());
    let r = settings.rank;
    if r == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    if settings.n_samples < r * (n + n_y).max(n + n_u) {
        log::warn!(
            "{} sampling points for rank {r} and a {}x{} Jacobian; the decomposition may be poorly determined",
            settings.n_samples,
            n + n_y,
            n + n_u
        );
    }
    let scale = match settings.scale {
        SamplingScale::Unit => vec![1.0; n + n_u],
        SamplingScale::Empirical => empirical_scale(base, u)?,
    };
    let tensor = sample_jacobians(part, settings.n_samples, settings.seed, &scale)?;
    let cpd = CpdSettings { seed: settings.seed.wrapping_add(1), ..settings.cpd.clone() };
    let factors = cpd_als(&tensor, r, &cpd)?;
    let branch_fits = fit_branch_derivatives(&factors, &tensor, d)?;
    let derivs: Vec<Vec<f64>> = branch_fits.iter().map(|b| b.coefficients.clone()).collect();
    let coeffs = integrate_branches(&derivs);
    let coefficients = DMatrix::from_fn(r, (d - 1) as usize, |l, m| coeffs[l][m]);
    let w_x = factors.w.rows(0, n).into_owned();
    let w_y = factors.w.rows(n, n_y).into_owned();
    let part = DecoupledPart::new(factors.v.clone(), w_x, w_y, coefficients)?;
    let model = NlssModel::new(base.linear.clone(), part, base.x0.clone(), base.x0_estimated)?;
    Ok(Decoupling { model, factors, branch_fits })
}

/// LM over every parameter of the decoupled model (x0 included when estimated).
pub fn optimize_decoupled(
    model: &DecoupledModel,
    u: &[f64],
    y: &[f64],
    settings: &LmSettings,
) -> Result<(DecoupledModel, FitReport)> {
    fit_output_error(model, u, y, &model.default_free(), 0, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let c = count_decoupled_parameters(3, 1, 1, 3, 5);
        assert_eq!(c.formula, 55);
        assert_eq!(c.structural, 50);
        assert_eq!(count_decoupled_parameters(3, 1, 1, 3, 0), DecoupledCounts { formula: 0, structural: 0 });
    }

    #[test]
    fn integration_examples() {
        assert_eq!(integrate_branches(&[vec![0.0, 3.0]]), vec![vec![0.0, 1.0]]);
        assert_eq!(integrate_branches(&[vec![2.0, 0.0]]), vec![vec![1.0, 0.0]]);
    }

    #[test]
    fn square_jacobian_is_2s() {
        let basis = build_basis(1, 0, 2, BasisMask::Full).unwrap();
        let part =
            PolynomialPart::new(basis.clone(), basis, DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(0, 1)).unwrap();
        let t = sample_jacobians(&part, 20, 4, &[1.0]).unwrap();
        for (p, s) in t.points.iter().zip(&t.slices) {
            assert!((s[(0, 0)] - 2.0 * p[0]).abs() <= 1e-14 * p[0].abs().max(1.0));
        }
    }
}
