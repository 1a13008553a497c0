//! Parametric linear modelling of an FRF: rational transfer-function fit,
//! state-space realization and balancing.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frf::FrfEstimate;
use crate::optimizer::{minimize, FitReport, LeastSquaresProblem, LmSettings};

/// Discrete-time `x(t+1) = A x + B u`, `y = C x + D u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearRepr", into = "LinearRepr")]
pub struct LinearStateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct LinearRepr {
    n: usize,
    n_u: usize,
    n_y: usize,
    #[serde(with = "crate::io::matrix")]
    a: DMatrix<f64>,
    #[serde(with = "crate::io::matrix")]
    b: DMatrix<f64>,
    #[serde(with = "crate::io::matrix")]
    c: DMatrix<f64>,
    #[serde(with = "crate::io::matrix")]
    d: DMatrix<f64>,
}

impl From<LinearStateSpace> for LinearRepr {
    fn from(s: LinearStateSpace) -> Self {
        Self { n: s.order(), n_u: s.n_inputs(), n_y: s.n_outputs(), a: s.a, b: s.b, c: s.c, d: s.d }
    }
}

impl TryFrom<LinearRepr> for LinearStateSpace {
    type Error = Error;

    fn try_from(r: LinearRepr) -> Result<Self> {
        let s = LinearStateSpace::new(r.a, r.b, r.c, r.d)?;
        if (s.order(), s.n_inputs(), s.n_outputs()) != (r.n, r.n_u, r.n_y) {
            return Err(Error::Format("declared dimensions disagree with the matrices".into()));
        }
        Ok(s)
    }
}

impl LinearStateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let ok = a.ncols() == n && b.nrows() == n && c.ncols() == n && d.nrows() == c.nrows() && d.ncols() == b.ncols();
        if !ok {
            return Err(Error::Dimension(format!(
                "A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    /// Static gain system (`n = 0`).
    pub fn gain(d: f64) -> Self {
        Self {
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, 1),
            c: DMatrix::zeros(1, 0),
            d: DMatrix::from_element(1, 1, d),
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Entries in A, B, C and D.
    pub fn n_params(&self) -> usize {
        self.a.len() + self.b.len() + self.c.len() + self.d.len()
    }

    /// Output for inputs stored sample-major (`u[t * n_u + j]`), starting from `x0`.
    pub fn simulate(&self, u: &[f64], x0: &DVector<f64>) -> Result<Vec<f64>> {
        let (n_u, n_y) = (self.n_inputs(), self.n_outputs());
        if x0.len() != self.order() || n_u == 0 || !u.len().is_multiple_of(n_u) {
            return Err(Error::Dimension("input length or initial state does not match the model".into()));
        }
        let mut x = x0.clone();
        let mut y = Vec::with_capacity(u.len() / n_u * n_y);
        for ut in u.chunks_exact(n_u) {
            let ut = DVector::from_column_slice(ut);
            let yt = &self.c * &x + &self.d * &ut;
            y.extend(yt.iter());
            x = &self.a * &x + &self.b * &ut;
        }
        Ok(y)
    }

    /// `C (zI - A)^-1 B + D` at a complex point.
    pub fn transfer_at(&self, z: Complex64) -> Result<DMatrix<Complex64>> {
        let n = self.order();
        let cd = |m: &DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
        let d = cd(&self.d);
        if n == 0 {
            return Ok(d);
        }
        let zi_a = DMatrix::<Complex64>::identity(n, n) * z - cd(&self.a);
        let x = zi_a.lu().solve(&cd(&self.b)).ok_or_else(|| Error::Singular(format!("zI - A singular at z = {z}")))?;
        Ok(cd(&self.c) * x + d)
    }

    /// SISO frequency response at `z = exp(j omega)`.
    pub fn frequency_response(&self, omega: f64) -> Result<Complex64> {
        Ok(self.transfer_at(Complex64::from_polar(1.0, omega))?[(0, 0)])
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.order() == 0 {
            return 0.0;
        }
        self.a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
    }

    /// Coordinates `x = T x'`: returns `(T^-1 A T, T^-1 B, C T, D)`.
    pub fn similarity(&self, t: &DMatrix<f64>, t_inv: &DMatrix<f64>) -> Self {
        Self { a: t_inv * &self.a * t, b: t_inv * &self.b, c: &self.c * t, d: self.d.clone() }
    }

    /// `Wc = A Wc A' + B B'`.
    pub fn controllability_gramian(&self) -> Result<DMatrix<f64>> {
        dlyap(&self.a, &(&self.b * self.b.transpose()))
    }

    /// `Wo = A' Wo A + C' C`.
    pub fn observability_gramian(&self) -> Result<DMatrix<f64>> {
        dlyap(&self.a.transpose(), &(self.c.transpose() * &self.c))
    }
}

/// Solves the discrete Lyapunov equation `X = A X A' + Q` by a Kronecker linear solve.
pub fn dlyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    // column-major vec: vec(A X A') = (A kron A) vec(X)
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - a.kronecker(a);
    let rhs = DVector::from_column_slice(q.as_slice());
    let x = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Lyapunov operator is singular (eigenvalue pair with product 1)".into()))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// `G(q) = (b0 + b1 q^-1 + ... ) / (1 + a1 q^-1 + ...)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunctionModel {
    pub numerator: Vec<f64>,
    /// Leading coefficient is 1.
    pub denominator: Vec<f64>,
}

impl TransferFunctionModel {
    pub fn new(numerator: Vec<f64>, denominator: Vec<f64>) -> Result<Self> {
        if numerator.is_empty() || denominator.is_empty() {
            return Err(Error::InvalidArgument("empty polynomial".into()));
        }
        if denominator[0] == 0.0 {
            return Err(Error::InvalidArgument("leading denominator coefficient is zero".into()));
        }
        let a0 = denominator[0];
        Ok(Self {
            numerator: numerator.iter().map(|b| b / a0).collect(),
            denominator: denominator.iter().map(|a| a / a0).collect(),
        })
    }

    pub fn n_a(&self) -> usize {
        self.denominator.len() - 1
    }

    pub fn n_b(&self) -> usize {
        self.numerator.len() - 1
    }

    /// Evaluates at `z = exp(j omega)`.
    pub fn frequency_response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        polyval_backward(&self.numerator, z1) / polyval_backward(&self.denominator, z1)
    }

    /// Roots of `z^na + a1 z^(na-1) + ... + a_na`.
    pub fn poles(&self) -> Vec<Complex64> {
        let na = self.n_a();
        if na == 0 {
            return Vec::new();
        }
        let mut comp = DMatrix::<f64>::zeros(na, na);
        for j in 0..na {
            comp[(0, j)] = -self.denominator[j + 1];
        }
        for i in 1..na {
            comp[(i, i - 1)] = 1.0;
        }
        comp.complex_eigenvalues().iter().cloned().collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Reflects poles with `|p| >= 1` to `1 / conj(p)` and rescales the
    /// numerator so the magnitude response is unchanged. Poles on the unit
    /// circle are pulled to radius `1 - 1e-6` first.
    pub fn stabilized(&self) -> Self {
        let poles = self.poles();
        if poles.iter().all(|p| p.norm() < 1.0) {
            return self.clone();
        }
        let mut gain = 1.0;
        let reflected: Vec<Complex64> = poles
            .iter()
            .map(|&p| {
                let r = p.norm();
                if r < 1.0 {
                    p
                } else {
                    let p = if r < 1.0 + 1e-6 { p / r * (1.0 - 1e-6) } else { p };
                    gain *= p.norm();
                    1.0 / p.conj()
                }
            })
            .collect();
        // monic polynomial from roots, coefficients of z^na .. z^0
        let mut coeffs = vec![Complex64::new(1.0, 0.0)];
        for p in &reflected {
            let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
            for (i, c) in coeffs.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= c * p;
            }
            coeffs = next;
        }
        Self {
            numerator: self.numerator.iter().map(|b| b / gain).collect(),
            denominator: coeffs.iter().map(|c| c.re).collect(),
        }
    }
}

/// `sum_i c_i z1^i` with `z1 = q^-1`.
fn polyval_backward(c: &[f64], z1: Complex64) -> Complex64 {
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &ci| acc * z1 + ci)
}

/// Result of [`fit_transfer_function`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunctionFit {
    pub model: TransferFunctionModel,
    pub report: FitReport,
    /// False when the fitted denominator has roots on or outside the unit circle.
    pub stable: bool,
}

struct TfProblem {
    z1: Vec<Complex64>,
    g: Vec<Complex64>,
    inv_sqrt_w: Vec<f64>,
    n_a: usize,
    n_b: usize,
}

impl TfProblem {
    fn split(&self, theta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut den = vec![1.0];
        den.extend(theta.iter().take(self.n_a));
        let num = theta.iter().skip(self.n_a).cloned().collect();
        (num, den)
    }

    fn eval(&self, theta: &DVector<f64>, with_jac: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let (num, den) = self.split(theta);
        let f = self.g.len();
        let np = self.n_a + self.n_b + 1;
        let mut r = DVector::zeros(2 * f);
        let mut jac = with_jac.then(|| DMatrix::zeros(2 * f, np));
        for k in 0..f {
            let z1 = self.z1[k];
            let a = polyval_backward(&den, z1);
            let b = polyval_backward(&num, z1);
            let e = (self.g[k] - b / a) * self.inv_sqrt_w[k];
            r[2 * k] = e.re;
            r[2 * k + 1] = e.im;
            if let Some(j) = jac.as_mut() {
                let mut zp = z1;
                for i in 0..self.n_a {
                    let d = b * zp / (a * a) * self.inv_sqrt_w[k];
                    j[(2 * k, i)] = d.re;
                    j[(2 * k + 1, i)] = d.im;
                    zp *= z1;
                }
                let mut zp = Complex64::new(1.0, 0.0);
                for i in 0..=self.n_b {
                    let d = -zp / a * self.inv_sqrt_w[k];
                    j[(2 * k, self.n_a + i)] = d.re;
                    j[(2 * k + 1, self.n_a + i)] = d.im;
                    zp *= z1;
                }
            }
        }
        (r, jac)
    }
}

impl LeastSquaresProblem for TfProblem {
    fn n_params(&self) -> usize {
        self.n_a + self.n_b + 1
    }

    fn residuals(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval(theta, false).0)
    }

    fn residuals_and_jacobian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (r, j) = self.eval(theta, true);
        Ok((r, j.expect("requested")))
    }
}

/// Weighted fit of `B/A` to the FRF (`a0 = 1`).
///
/// `weights` default to [`FrfEstimate::default_weights`]. The start value comes
/// from the linearized (Levy) problem refined by a few Sanathanan-Koerner
/// reweightings; Levenberg-Marquardt then minimizes
/// `sum_k |G_k - B/A|^2 / w_k`.
pub fn fit_transfer_function(
    frf: &FrfEstimate,
    n_a: usize,
    n_b: usize,
    weights: Option<&[f64]>,
) -> Result<TransferFunctionFit> {
    fit_transfer_function_with(frf, n_a, n_b, weights, &LmSettings::default())
}

pub fn fit_transfer_function_with(
    frf: &FrfEstimate,
    n_a: usize,
    n_b: usize,
    weights: Option<&[f64]>,
    settings: &LmSettings,
) -> Result<TransferFunctionFit> {
    let f = frf.g.len();
    let np = n_a + n_b + 1;
    if 2 * f < np {
        return Err(Error::InvalidArgument(format!(
            "{f} frequency bins cannot determine {np} transfer-function parameters"
        )));
    }
    let w = match weights {
        Some(w) => w.to_vec(),
        None => frf.default_weights(),
    };
    if w.len() != f || w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("weights must be positive, one per excited bin".into()));
    }
    let problem = TfProblem {
        z1: frf.omegas().iter().map(|&om| Complex64::from_polar(1.0, -om)).collect(),
        g: frf.g.clone(),
        inv_sqrt_w: w.iter().map(|v| 1.0 / v.sqrt()).collect(),
        n_a,
        n_b,
    };

    let mut theta = levy_solve(&problem, None)?;
    for _ in 0..10 {
        let (_, den) = problem.split(&theta);
        let a_prev: Vec<f64> = problem.z1.iter().map(|&z| polyval_backward(&den, z).norm()).collect();
        if a_prev.iter().any(|v| !(*v > 1e-12)) {
            break;
        }
        let next = levy_solve(&problem, Some(&a_prev))?;
        let change = (&next - &theta).norm() / theta.norm().max(1e-300);
        theta = next;
        if change < 1e-12 {
            break;
        }
    }

    let report = minimize(&problem, &theta, settings)?;
    let (num, den) = problem.split(&DVector::from_column_slice(&report.theta));
    let model = TransferFunctionModel { numerator: num, denominator: den };
    let stable = model.is_stable();
    if !stable {
        log::warn!("fitted denominator is not stable; balancing will reject it");
    }
    Ok(TransferFunctionFit { model, report, stable })
}

/// Linear least squares for `A G - B = 0`, optionally divided by `|A_prev|`.
fn levy_solve(p: &TfProblem, a_prev: Option<&[f64]>) -> Result<DVector<f64>> {
    let f = p.g.len();
    let np = p.n_a + p.n_b + 1;
    let mut m = DMatrix::<f64>::zeros(2 * f, np);
    let mut rhs = DVector::<f64>::zeros(2 * f);
    for k in 0..f {
        let s = p.inv_sqrt_w[k] / a_prev.map_or(1.0, |a| a[k]);
        let z1 = p.z1[k];
        let g = p.g[k];
        let mut zp = z1;
        for i in 0..p.n_a {
            let v = g * zp * s;
            m[(2 * k, i)] = v.re;
            m[(2 * k + 1, i)] = v.im;
            zp *= z1;
        }
        let mut zp = Complex64::new(1.0, 0.0);
        for i in 0..=p.n_b {
            let v = -zp * s;
            m[(2 * k, p.n_a + i)] = v.re;
            m[(2 * k + 1, p.n_a + i)] = v.im;
            zp *= z1;
        }
        let r = -g * s;
        rhs[2 * k] = r.re;
        rhs[2 * k + 1] = r.im;
    }
    let col_norms: Vec<f64> = (0..np).map(|j| m.column(j).norm().max(1e-300)).collect();
    for (j, cn) in col_norms.iter().enumerate() {
        m.column_mut(j).scale_mut(1.0 / cn);
    }
    let svd = SVD::new(m, true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < 1e13) {
        return Err(Error::Singular(format!(
            "linearized transfer-function problem is rank deficient (condition number {cond:.3e})"
        )));
    }
    let x = svd.solve(&rhs, 0.0).map_err(|e| Error::Singular(e.to_string()))?;
    Ok(DVector::from_fn(np, |j, _| x[j] / col_norms[j]))
}

/// Controllable canonical realization with `n = n_a`.
pub fn realize_state_space(tf: &TransferFunctionModel) -> Result<LinearStateSpace> {
    let n = tf.n_a();
    if tf.n_b() > n {
        return Err(Error::InvalidArgument(format!("improper transfer function: n_b = {} > n_a = {n}", tf.n_b())));
    }
    let a0 = tf.denominator[0];
    let den: Vec<f64> = tf.denominator.iter().map(|v| v / a0).collect();
    let mut num: Vec<f64> = tf.numerator.iter().map(|v| v / a0).collect();
    num.resize(n + 1, 0.0);
    let b0 = num[0];
    if n == 0 {
        return Ok(LinearStateSpace::gain(b0));
    }
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        a[(0, j)] = -den[j + 1];
    }
    for i in 1..n {
        a[(i, i - 1)] = 1.0;
    }
    let mut b = DMatrix::zeros(n, 1);
    b[(0, 0)] = 1.0;
    let c = DMatrix::from_fn(1, n, |_, j| num[j + 1] - b0 * den[j + 1]);
    LinearStateSpace::new(a, b, c, DMatrix::from_element(1, 1, b0))
}

fn sqrt_factor(w: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(w.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-14 * max.max(1e-300)) {
        return Err(Error::Singular(format!(
            "{what} Gramian is not positive definite (eigenvalues {min:.3e}..{max:.3e}); realization is not minimal"
        )));
    }
    let mut l = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        l.column_mut(j).scale_mut(lam.sqrt());
    }
    Ok(l)
}

/// Square-root balancing: the returned system has equal, diagonal Gramians.
pub fn balance_realization(ss: &LinearStateSpace) -> Result<LinearStateSpace> {
    let n = ss.order();
    if n == 0 {
        return Ok(ss.clone());
    }
    let rho = ss.spectral_radius();
    if !(rho < 1.0) {
        return Err(Error::Unstable(rho));
    }
    let lc = sqrt_factor(&ss.controllability_gramian()?, "controllability")?;
    let lo = sqrt_factor(&ss.observability_gramian()?, "observability")?;
    let svd = SVD::new(lo.transpose() * &lc, false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut t = DMatrix::zeros(n, n);
    let v = v_t.transpose();
    for (new, &old) in order.iter().enumerate() {
        let is = 1.0 / svd.singular_values[old].sqrt();
        t.set_column(new, &(&lc * v.column(old) * is));
    }
    // explicit inverse keeps the transformed system consistent to rounding
    // even when the Hankel singular values spread over many decades
    let t_inv = t.clone().try_inverse().ok_or_else(|| Error::Singular("balancing transformation".into()))?;
    let mut out = ss.similarity(&t, &t_inv);
    // sign convention: first output row of C nonnegative
    for i in 0..n {
        if out.c[(0, i)] < 0.0 {
            out.a.row_mut(i).neg_mut();
            out.a.column_mut(i).neg_mut();
            out.b.row_mut(i).neg_mut();
            out.c.column_mut(i).neg_mut();
        }
    }
    Ok(out)
}
