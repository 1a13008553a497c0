#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nlss::decouple::DecoupledPart;
use nlss::linfit::LinearStateSpace;
use nlss::model::{NlssModel, NonlinearPart};
use nlss::nlss2::{Activation, NetworkPart, SigmoidNetwork};
use nlss::pnlss::{build_basis, BasisMask, PnlssModel, PolynomialPart};
use nlss::seeded_rng;
use nlss::signals::{generate_multisine, MultisineSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    scale * rng.random_range(-1.0..1.0)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| uniform(rng, scale))
}

/// Random SISO system with spectral radius `radius`.
pub fn random_stable(n: usize, radius: f64, seed: u64) -> LinearStateSpace {
    let mut rng = seeded_rng(seed);
    let mut a = random_matrix(&mut rng, n, n, 1.0);
    let rho = a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
    if rho > 0.0 {
        a *= radius / rho;
    }
    let b = random_matrix(&mut rng, n, 1, 1.0);
    let c = random_matrix(&mut rng, 1, n, 1.0);
    let d = random_matrix(&mut rng, 1, 1, 1.0);
    LinearStateSpace::new(a, b, c, d).unwrap()
}

pub fn random_pnlss(n: usize, d: u32, coef: f64, seed: u64) -> PnlssModel {
    let lin = random_stable(n, 0.6, seed);
    let basis = build_basis(n, 1, d, BasisMask::Full).unwrap();
    let mut rng = seeded_rng(seed ^ 0xabcd);
    let e = random_matrix(&mut rng, n, basis.len(), coef);
    let f = random_matrix(&mut rng, 1, basis.len(), coef);
    let part = PolynomialPart::new(basis.clone(), basis, e, f).unwrap();
    let x0 = DVector::from_fn(n, |_, _| uniform(&mut rng, 0.3));
    NlssModel::new(lin, part, x0, true).unwrap()
}

pub fn random_network(n_in: usize, n_out: usize, hidden: usize, scale: f64, rng: &mut ChaCha8Rng) -> SigmoidNetwork {
    let mut net = SigmoidNetwork::zeros(n_in, n_out, hidden, Activation::Tanh);
    let p: Vec<f64> = (0..net.n_params()).map(|_| uniform(rng, scale)).collect();
    net.set_params(&p).unwrap();
    net
}

pub fn random_nlss2(n: usize, hidden: usize, seed: u64) -> NlssModel<NetworkPart> {
    let lin = random_stable(n, 0.6, seed);
    let mut rng = seeded_rng(seed ^ 0x5151);
    let mut f_net = random_network(n + 1, n, hidden, 1.0, &mut rng);
    f_net.w2 *= 0.1;
    let g_net = random_network(n + 1, 1, hidden, 0.5, &mut rng);
    let x0 = DVector::from_fn(n, |_, _| uniform(&mut rng, 0.3));
    NlssModel::new(lin, NetworkPart { f_net, g_net }, x0, true).unwrap()
}

pub fn random_decoupled(n: usize, r: usize, d: u32, seed: u64) -> NlssModel<DecoupledPart> {
    let lin = random_stable(n, 0.6, seed);
    let mut rng = seeded_rng(seed ^ 0x7777);
    let v = random_matrix(&mut rng, n + 1, r, 1.0);
    let w_x = random_matrix(&mut rng, n, r, 0.1);
    let w_y = random_matrix(&mut rng, 1, r, 0.3);
    let coeffs = random_matrix(&mut rng, r, (d - 1) as usize, 0.5);
    let part = DecoupledPart::new(v, w_x, w_y, coeffs).unwrap();
    let x0 = DVector::from_fn(n, |_, _| uniform(&mut rng, 0.3));
    NlssModel::new(lin, part, x0, true).unwrap()
}

pub fn multisine(n: usize, periods: usize, k_max: usize, rms: f64, seed: u64) -> (MultisineSpec, Vec<f64>) {
    let spec = MultisineSpec::random_phase(n, 1.0, k_max, 1.0, seed).unwrap();
    let u = generate_multisine(&spec, n * periods).unwrap();
    let s = (u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64).sqrt();
    let amps = spec.amplitudes.iter().map(|a| a * rms / s).collect();
    let spec = spec.with_amplitudes(amps).unwrap();
    let u = generate_multisine(&spec, n * periods).unwrap();
    (spec, u)
}

pub fn white(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| uniform(&mut rng, scale)).collect()
}

pub fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Central differences of the simulated output w.r.t. the `free` parameters,
/// step `1e-6 * max(|p|, 1)`.
pub fn fd_jacobian<N: NonlinearPart>(model: &NlssModel<N>, u: &[f64], free: &[usize]) -> DMatrix<f64> {
    let p = model.params();
    let rows = u.len() * model.n_outputs();
    let mut jac = DMatrix::zeros(rows, free.len());
    for (k, &i) in free.iter().enumerate() {
        let h = 1e-6 * p[i].abs().max(1.0);
        let mut plus = p.clone();
        plus[i] += h;
        let mut minus = p.clone();
        minus[i] -= h;
        let yp = model.with_params(&plus).unwrap().simulate(u).unwrap().y;
        let ym = model.with_params(&minus).unwrap().simulate(u).unwrap().y;
        for t in 0..rows {
            jac[(t, k)] = (yp[t] - ym[t]) / (2.0 * h);
        }
    }
    jac
}

/// Largest column-wise relative deviation between two Jacobians.
pub fn max_column_error(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    (0..analytic.ncols())
        .map(|k| {
            let a = analytic.column(k);
            let diff = (a - fd.column(k)).norm();
            diff / a.norm().max(1e-6)
        })
        .fold(0.0, f64::max)
}

/// Every exponent vector over `n_vars` variables with total degree `<= d`,
/// by exhaustive search over `[0, d]^n_vars`.
pub fn brute_monomials(n_vars: usize, d: u32) -> Vec<Vec<u32>> {
    let base = d as usize + 1;
    let total = base.pow(n_vars as u32);
    let mut out = Vec::new();
    for code in 0..total {
        let mut c = code;
        let mut e = Vec::with_capacity(n_vars);
        for _ in 0..n_vars {
            e.push((c % base) as u32);
            c /= base;
        }
        if e.iter().sum::<u32>() <= d {
            out.push(e);
        }
    }
    out
}

/// Plain loop over the polynomial state-space recursion with monomials
/// evaluated by `powi` on the basis exponents.
pub fn reference_pnlss(model: &PnlssModel, u: &[f64]) -> Vec<f64> {
    let lin = &model.linear;
    let n = lin.order();
    let part = &model.nonlinear;
    let mut x: Vec<f64> = model.x0.iter().cloned().collect();
    let mut y = Vec::with_capacity(u.len());
    for &ut in u {
        let mut s = x.clone();
        s.push(ut);
        let mono = |exps: &Vec<Vec<u32>>| -> Vec<f64> {
            exps.iter().map(|e| e.iter().zip(&s).map(|(&k, v)| v.powi(k as i32)).product()).collect()
        };
        let zeta = mono(&part.basis_state.exponents);
        let eta = mono(&part.basis_output.exponents);
        let mut yt = lin.d[(0, 0)] * ut;
        for j in 0..n {
            yt += lin.c[(0, j)] * x[j];
        }
        for (m, z) in eta.iter().enumerate() {
            yt += part.f[(0, m)] * z;
        }
        y.push(yt);
        let mut xn = vec![0.0; n];
        for i in 0..n {
            let mut v = lin.b[(i, 0)] * ut;
            for j in 0..n {
                v += lin.a[(i, j)] * x[j];
            }
            for (m, z) in zeta.iter().enumerate() {
                v += part.e[(i, m)] * z;
            }
            xn[i] = v;
        }
        x = xn;
    }
    y
}

/// Truncated series `sum_k A^k Q (A')^k` until the term drops below `1e-14` relative.
pub fn gramian_series(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sum = q.clone();
    let mut term = q.clone();
    for _ in 0..100_000 {
        term = a * &term * a.transpose();
        sum += &term;
        if term.norm() < 1e-14 * sum.norm() {
            break;
        }
    }
    sum
}

/// True when the cost never rises between accepted iterates.
pub fn accepted_costs_non_increasing(report: &nlss::optimizer::FitReport) -> bool {
    report.cost_trace.windows(2).all(|w| w[1] <= w[0])
}

/// Outcome of fitting a polynomial model to noiseless data from a known one.
pub struct SelfConsistency {
    pub relative_validation_rmse: f64,
    pub report: nlss::optimizer::FitReport,
    pub bla_relative_rmse: f64,
}

/// Hand-written `n = 2`, `d = 2` model. Basis order: `x1^2, x1 x2, x1 u, x2^2, x2 u, u^2`.
pub fn known_pnlss() -> PnlssModel {
    let lin = LinearStateSpace::new(
        DMatrix::from_row_slice(2, 2, &[0.6, 0.25, -0.25, 0.5]),
        DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.3]),
        DMatrix::from_row_slice(1, 1, &[0.1]),
    )
    .unwrap();
    let basis = build_basis(2, 1, 2, BasisMask::Full).unwrap();
    let e = DMatrix::from_row_slice(2, 6, &[0.1, 0.0, 0.05, 0.0, 0.0, 0.0, 0.0, 0.05, 0.0, -0.08, 0.0, 0.02]);
    let f = DMatrix::from_row_slice(1, 6, &[0.0, 0.05, 0.0, 0.0, 0.03, 0.0]);
    let part = PolynomialPart::new(basis.clone(), basis, e, f).unwrap();
    NlssModel::new(lin, part, DVector::zeros(2), false).unwrap()
}

/// Random `n = 2`, `d = 2` model with polynomial coefficients up to 0.1.
pub fn random_quadratic_pnlss(seed: u64) -> PnlssModel {
    let n = 2;
    let lin = random_stable(n, 0.7, seed);
    let basis = build_basis(n, 1, 2, BasisMask::Full).unwrap();
    let mut rng = seeded_rng(seed ^ 0x2222);
    let e = random_matrix(&mut rng, n, basis.len(), 0.1);
    let f = random_matrix(&mut rng, 1, basis.len(), 0.1);
    let part = PolynomialPart::new(basis.clone(), basis, e, f).unwrap();
    NlssModel::new(lin, part, DVector::zeros(n), false).unwrap()
}

/// Noiseless data from `model` (4 realizations x 3 periods of 256 samples);
/// BLA -> transfer function -> balanced realization -> output-error fit of
/// every parameter; scored on a fresh two-period realization.
pub fn self_consistency(model: &PnlssModel, seed: u64, settings: &nlss::optimizer::LmSettings) -> SelfConsistency {
    use nlss::frf::estimate_bla;
    use nlss::linfit::{balance_realization, fit_transfer_function, realize_state_space};
    use nlss::model::fit_output_error;
    use nlss::signals::Dataset;

    let n = model.order();
    let basis = model.nonlinear.basis_state.clone();
    let (lin, e, f) = (&model.linear, &model.nonlinear.e, &model.nonlinear.f);
    let period = 256;
    let realizations = 4;
    let mut u = Vec::new();
    let mut spec = None;
    for m in 0..realizations {
        let (s, um) = multisine(period, 3, 80, 0.25, seed * 16 + 100 + m);
        spec.get_or_insert(s);
        u.extend(um);
    }
    let spec = spec.expect("at least one realization");
    let (_, u_val) = multisine(period, 2, 80, 0.25, seed + 200);
    // halve the polynomial terms until the system stays bounded on both records
    let mut alpha = 1.0;
    let truth = loop {
        let part = PolynomialPart::new(basis.clone(), basis.clone(), e * alpha, f * alpha).unwrap();
        let m = NlssModel::new(lin.clone(), part, DVector::zeros(n), false).unwrap();
        let bounded = |u: &[f64]| m.simulate(u).map(|s| s.y.iter().all(|v| v.abs() < 1e3)).unwrap_or(false);
        if bounded(&u) && bounded(&u_val) {
            break m;
        }
        alpha *= 0.5;
    };

    let y = truth.simulate(&u).unwrap().y;
    let data = Dataset::new(u.clone(), y.clone(), 1.0, period, 3, realizations as usize)
        .unwrap()
        .with_excitation(spec.clone());
    let frf = estimate_bla(&data, &spec, 1).unwrap();
    let tf = fit_transfer_function(&frf, n, n, None).unwrap();
    let tf = if tf.stable { tf.model } else { tf.model.stabilized() };
    let ss = balance_realization(&realize_state_space(&tf).unwrap()).unwrap();

    let init = PnlssModel::from_linear(ss, basis, false).unwrap();
    let free = init.default_free();
    let (fitted, report) = fit_output_error(&init, &u, &y, &free, 0, settings).unwrap();

    let y_val = truth.simulate(&u_val).unwrap().y;
    let scale = std_dev(&y_val);
    let relative_validation_rmse = rms(&fitted.simulate(&u_val).unwrap().y, &y_val) / scale;
    let bla_relative_rmse = rms(&init.simulate(&u_val).unwrap().y, &y_val) / scale;
    SelfConsistency { relative_validation_rmse, report, bla_relative_rmse }
}
