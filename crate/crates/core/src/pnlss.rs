//! Polynomial nonlinear state-space models.
//!
//! `x(t+1) = A x + B u + E zeta(s)`, `y = C x + D u + F eta(s)` where
//! `zeta` and `eta` collect monomials of total degree `2..=d` in `s = [x; u]`.

use nalgebra::{DMatrix, DVector};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linfit::LinearStateSpace;
use crate::model::{NlssModel, NonlinearJacobians, NonlinearPart};

/// Which monomials of the full basis are kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMask {
    #[default]
    Full,
    /// No cross terms: `s_i^k` only.
    PurePowers,
    /// No monomials; the model is linear.
    Empty,
}

/// Monomials over `n_vars` variables with total degree in `2..=degree`.
///
/// Ordered by total degree, then descending lexicographic exponent vector:
/// for `(x, u)` at degree 2 that is `x^2, x u, u^2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialBasis {
    pub n_vars: usize,
    pub degree: u32,
    pub mask: BasisMask,
    pub exponents: Vec<Vec<u32>>,
}

fn exponents_of_degree(n_vars: usize, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == n_vars {
        prefix.push(k);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=k).rev() {
        prefix.push(first);
        exponents_of_degree(n_vars, k - first, prefix, out);
        prefix.pop();
    }
}

/// All exponent vectors of total degree `k` over `n_vars` variables, descending lex.
pub(crate) fn all_exponents(n_vars: usize, k: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    if n_vars > 0 {
        exponents_of_degree(n_vars, k, &mut Vec::with_capacity(n_vars), &mut out);
    }
    out
}

/// Enumerates the basis for `n` states and `n_u` inputs up to degree `d`.
pub fn build_basis(n: usize, n_u: usize, d: u32, mask: BasisMask) -> Result<MonomialBasis> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("polynomial degree must be at least 2, got {d}")));
    }
    let n_vars = n + n_u;
    if n_vars == 0 {
        return Err(Error::InvalidArgument("basis needs at least one variable".into()));
    }
    let mut exponents = Vec::new();
    if mask != BasisMask::Empty {
        for k in 2..=d {
            for e in all_exponents(n_vars, k) {
                let pure = e.iter().filter(|&&v| v > 0).count() == 1;
                if mask == BasisMask::Full || pure {
                    exponents.push(e);
                }
            }
        }
    }
    Ok(MonomialBasis { n_vars, degree: d, mask, exponents })
}

impl MonomialBasis {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    fn power_table(&self, s: &[f64]) -> Vec<Vec<f64>> {
        s.iter()
            .map(|&v| {
                let mut p = Vec::with_capacity(self.degree as usize + 1);
                let mut acc = 1.0;
                for _ in 0..=self.degree {
                    p.push(acc);
                    acc *= v;
                }
                p
            })
            .collect()
    }

    pub fn eval_into(&self, s: &[f64], out: &mut [f64]) {
        let pw = self.power_table(s);
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().enumerate().map(|(i, &k)| pw[i][k as usize]).product();
        }
    }

    pub fn eval(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(s, &mut out);
        out
    }

    /// Values and the gradient matrix (`len x n_vars`).
    pub fn eval_with_gradient(&self, s: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let pw = self.power_table(s);
        let mut vals = Vec::with_capacity(self.len());
        let mut grad = DMatrix::zeros(self.len(), self.n_vars);
        for (r, e) in self.exponents.iter().enumerate() {
            vals.push(e.iter().enumerate().map(|(i, &k)| pw[i][k as usize]).product());
            for j in 0..self.n_vars {
                if e[j] == 0 {
                    continue;
                }
                let mut g = e[j] as f64 * pw[j][e[j] as usize - 1];
                for (i, &k) in e.iter().enumerate() {
                    if i != j {
                        g *= pw[i][k as usize];
                    }
                }
                grad[(r, j)] = g;
            }
        }
        (vals, grad)
    }
}

fn binomial(n: usize, k: usize) -> BigUint {
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc *= BigUint::from(n - i);
        acc /= BigUint::from(i + 1);
    }
    acc
}

/// `(C(n + n_u + d, d) - (n + n_u)) * (n + n_y)`.
///
/// The binomial counts every monomial of degree `0..=d` including the
/// constant, so this exceeds the size of the actual basis by `n + n_y`; see
/// [`structural_nonlinear_parameters`].
pub fn count_nonlinear_parameters(n: usize, n_u: usize, n_y: usize, d: u32) -> Result<BigUint> {
    if d < 1 {
        return Err(Error::InvalidArgument("degree must be at least 1".into()));
    }
    let nv = n + n_u;
    Ok((binomial(nv + d as usize, d as usize) - BigUint::from(nv)) * BigUint::from(n + n_y))
}

/// Entries of `E` and `F` for the full basis (constant and linear terms excluded).
pub fn structural_nonlinear_parameters(n: usize, n_u: usize, n_y: usize, d: u32) -> Result<BigUint> {
    if d < 1 {
        return Err(Error::InvalidArgument("degree must be at least 1".into()));
    }
    let nv = n + n_u;
    Ok((binomial(nv + d as usize, d as usize) - BigUint::from(nv + 1)) * BigUint::from(n + n_y))
}

/// `E zeta(s)` and `F eta(s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialPart {
    pub basis_state: MonomialBasis,
    pub basis_output: MonomialBasis,
    #[serde(with = "crate::io::matrix")]
    pub e: DMatrix<f64>,
    #[serde(with = "crate::io::matrix")]
    pub f: DMatrix<f64>,
}

impl PolynomialPart {
    pub fn new(
        basis_state: MonomialBasis,
        basis_output: MonomialBasis,
        e: DMatrix<f64>,
        f: DMatrix<f64>,
    ) -> Result<Self> {
        if e.ncols() != basis_state.len() || f.ncols() != basis_output.len() {
            return Err(Error::Dimension(format!(
                "E has {} columns for {} monomials, F has {} for {}",
                e.ncols(),
                basis_state.len(),
                f.ncols(),
                basis_output.len()
            )));
        }
        if basis_state.n_vars != basis_output.n_vars {
            return Err(Error::Dimension("state and output bases use different variables".into()));
        }
        Ok(Self { basis_state, basis_output, e, f })
    }

    /// Zero coefficients on a shared basis.
    pub fn zeros(n: usize, n_y: usize, basis: MonomialBasis) -> Self {
        let len = basis.len();
        Self { basis_state: basis.clone(), basis_output: basis, e: DMatrix::zeros(n, len), f: DMatrix::zeros(n_y, len) }
    }

    /// Evaluates `[E zeta(s); F eta(s)]`.
    pub fn stacked(&self, s: &[f64]) -> Vec<f64> {
        let mut fx = vec![0.0; self.e.nrows()];
        let mut gy = vec![0.0; self.f.nrows()];
        self.eval(s, &mut fx, &mut gy);
        fx.extend(gy);
        fx
    }

    /// Jacobian of [`Self::stacked`] with respect to `s`.
    pub fn stacked_jacobian(&self, s: &[f64]) -> DMatrix<f64> {
        let (n, n_y) = (self.e.nrows(), self.f.nrows());
        let (_, gz) = self.basis_state.eval_with_gradient(s);
        let (_, ge) = self.basis_output.eval_with_gradient(s);
        let mut j = DMatrix::zeros(n + n_y, self.basis_state.n_vars);
        j.rows_mut(0, n).copy_from(&(&self.e * gz));
        j.rows_mut(n, n_y).copy_from(&(&self.f * ge));
        j
    }
}

impl NonlinearPart for PolynomialPart {
    fn n_states(&self) -> usize {
        self.e.nrows()
    }

    fn n_outputs(&self) -> usize {
        self.f.nrows()
    }

    fn n_vars(&self) -> usize {
        self.basis_state.n_vars
    }

    fn n_params(&self) -> usize {
        self.e.len() + self.f.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for m in [&self.e, &self.f] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    p.push(m[(i, j)]);
                }
            }
        }
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Dimension("polynomial coefficient count".into()));
        }
        let ne = self.e.len();
        for (m, chunk) in [(&mut self.e, &p[..ne]), (&mut self.f, &p[ne..])] {
            let cols = m.ncols();
            for (k, v) in chunk.iter().enumerate() {
                m[(k / cols, k % cols)] = *v;
            }
        }
        Ok(())
    }

    fn eval(&self, s: &[f64], fx: &mut [f64], gy: &mut [f64]) {
        if !self.basis_state.is_empty() {
            let z = self.basis_state.eval(s);
            for (i, o) in fx.iter_mut().enumerate() {
                *o = self.e.row(i).iter().zip(&z).map(|(a, b)| a * b).sum();
            }
        } else {
            fx.fill(0.0);
        }
        if !self.basis_output.is_empty() {
            let z = if self.basis_output == self.basis_state {
                self.basis_state.eval(s)
            } else {
                self.basis_output.eval(s)
            };
            for (i, o) in gy.iter_mut().enumerate() {
                *o = self.f.row(i).iter().zip(&z).map(|(a, b)| a * b).sum();
            }
        } else {
            gy.fill(0.0);
        }
    }

    fn jacobians(&self, s: &[f64], out: &mut NonlinearJacobians) {
        let (n, n_y) = (self.e.nrows(), self.f.nrows());
        let nz = self.basis_state.len();
        let ne = self.basis_output.len();
        if nz > 0 {
            let (z, gz) = self.basis_state.eval_with_gradient(s);
            out.fx_s.copy_from(&(&self.e * gz));
            for i in 0..n {
                for (j, zj) in z.iter().enumerate() {
                    out.fx_p[(i, i * nz + j)] = *zj;
                }
            }
        }
        if ne > 0 {
            let (h, gh) = self.basis_output.eval_with_gradient(s);
            out.gy_s.copy_from(&(&self.f * gh));
            let off = n * nz;
            for i in 0..n_y {
                for (j, hj) in h.iter().enumerate() {
                    out.gy_p[(i, off + i * ne + j)] = *hj;
                }
            }
        }
    }
}

pub type PnlssModel = NlssModel<PolynomialPart>;

impl NlssModel<PolynomialPart> {
    /// Linear model with zero polynomial coefficients on the given basis.
    pub fn from_linear(linear: LinearStateSpace, basis: MonomialBasis, x0_estimated: bool) -> Result<Self> {
        let (n, n_y) = (linear.order(), linear.n_outputs());
        if basis.n_vars != n + linear.n_inputs() {
            return Err(Error::Dimension("basis variables do not match n + n_u".into()));
        }
        let part = PolynomialPart::zeros(n, n_y, basis);
        NlssModel::new(linear, part, DVector::zeros(n), x0_estimated)
    }

    /// Linear model with no monomials (only A, B, C, D and x0).
    pub fn linear_only(linear: LinearStateSpace, x0_estimated: bool) -> Result<Self> {
        let basis = build_basis(linear.order(), linear.n_inputs(), 2, BasisMask::Empty)?;
        Self::from_linear(linear, basis, x0_estimated)
    }
}
