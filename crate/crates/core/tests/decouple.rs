mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use nlss::decouple::{
    count_decoupled_parameters, cpd_als, decouple, fit_branch_derivatives, integrate_branches, optimize_decoupled,
    sample_jacobians, CpdFactors, CpdSettings, DecoupleSettings, DecoupledPart, JacobianTensor, SamplingScale,
};
use nlss::model::{NlssModel, NonlinearPart};
use nlss::optimizer::LmSettings;
use nlss::pnlss::{build_basis, BasisMask, PolynomialPart};
use nlss::seeded_rng;
use nlss::Execution;

fn settings(rank: usize) -> CpdSettings {
    CpdSettings { restarts: 5, seed: 10 + rank as u64, execution: Execution::Sequential, ..CpdSettings::default() }
}

/// Slices `W diag(h_k) V'` from explicit generators.
fn synthetic_tensor(w: &DMatrix<f64>, v: &DMatrix<f64>, h: &DMatrix<f64>) -> JacobianTensor {
    let nk = h.nrows();
    let points: Vec<Vec<f64>> = (0..nk).map(|k| vec![k as f64; v.nrows()]).collect();
    let slices = (0..nk)
        .map(|k| {
            let mut wk = w.clone();
            for l in 0..w.ncols() {
                wk.column_mut(l).scale_mut(h[(k, l)]);
            }
            wk * v.transpose()
        })
        .collect();
    JacobianTensor::from_slices(points, slices).unwrap()
}

fn abs_cosine(a: nalgebra::DVectorView<f64>, b: nalgebra::DVectorView<f64>) -> f64 {
    a.dot(&b).abs() / (a.norm() * b.norm())
}

#[test]
fn rank_two_tensor_is_decomposed_exactly() {
    let mut rng = seeded_rng(1);
    let w = random_matrix(&mut rng, 3, 2, 1.0);
    let v = random_matrix(&mut rng, 4, 2, 1.0);
    let h = random_matrix(&mut rng, 40, 2, 1.0);
    let t = synthetic_tensor(&w, &v, &h);
    let f = cpd_als(&t, 2, &settings(2)).unwrap();
    assert!(f.residual < 1e-8, "{:e}", f.residual);
    assert!(!f.rank_warning && !f.degenerate);
    // each generator direction is matched by some recovered column
    for l in 0..2 {
        let best_v = (0..2).map(|m| abs_cosine(v.column(l), f.v.column(m))).fold(0.0, f64::max);
        let best_w = (0..2).map(|m| abs_cosine(w.column(l), f.w.column(m))).fold(0.0, f64::max);
        assert!(best_v > 1.0 - 1e-8 && best_w > 1.0 - 1e-8);
    }
    assert!(accepted_trace_non_increasing(&f));
}

fn accepted_trace_non_increasing(f: &CpdFactors) -> bool {
    f.residual_trace.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-9) + 1e-15)
}

#[test]
fn rank_one_tensor() {
    let mut rng = seeded_rng(2);
    let w = random_matrix(&mut rng, 2, 1, 1.0);
    let v = random_matrix(&mut rng, 3, 1, 1.0);
    let h = random_matrix(&mut rng, 10, 1, 1.0);
    let f = cpd_als(&synthetic_tensor(&w, &v, &h), 1, &settings(1)).unwrap();
    assert!(f.residual < 1e-10);
}

#[test]
fn zero_tensor() {
    let t = JacobianTensor::from_slices(vec![vec![0.0; 2]; 5], vec![DMatrix::zeros(2, 2); 5]).unwrap();
    let f = cpd_als(&t, 3, &settings(3)).unwrap();
    assert_eq!(f.residual, 0.0);
    assert!(f.w.iter().chain(f.v.iter()).chain(f.h.iter()).all(|x| *x == 0.0));
}

#[test]
fn sampled_jacobians_match_finite_differences() {
    let model = random_pnlss(2, 3, 0.3, 4);
    let scale = [1.0, 0.7, 1.3];
    let t = sample_jacobians(&model.nonlinear, 10, 5, &scale).unwrap();
    for (p, slice) in t.points.iter().zip(&t.slices) {
        for j in 0..3 {
            let h = 1e-6 * p[j].abs().max(1.0);
            let mut a = p.clone();
            a[j] += h;
            let mut b = p.clone();
            b[j] -= h;
            let fa = model.nonlinear.stacked(&a);
            let fb = model.nonlinear.stacked(&b);
            for i in 0..3 {
                let fd = (fa[i] - fb[i]) / (2.0 * h);
                assert!((fd - slice[(i, j)]).abs() <= 1e-8 * slice[(i, j)].abs().max(1.0));
            }
        }
    }
    let basis = build_basis(2, 1, 3, BasisMask::Full).unwrap();
    let zero = PolynomialPart::zeros(2, 1, basis);
    let t = sample_jacobians(&zero, 5, 1, &scale).unwrap();
    assert_eq!(t.norm(), 0.0);
}

fn factors_with_direction(v: &[f64], h: Vec<f64>) -> CpdFactors {
    let nk = h.len();
    CpdFactors {
        w: DMatrix::from_element(1, 1, 1.0),
        v: DMatrix::from_column_slice(v.len(), 1, v),
        h: DMatrix::from_vec(nk, 1, h),
        rank: 1,
        residual: 0.0,
        residual_trace: vec![0.0],
        converged: true,
        rank_warning: false,
        degenerate: false,
    }
}

#[test]
fn exact_branch_derivative() {
    let points: Vec<Vec<f64>> = (0..12).map(|k| vec![k as f64 * 0.3 - 1.5, 0.0]).collect();
    let h = points.iter().map(|p| 3.0 * p[0] * p[0]).collect();
    let t = JacobianTensor::from_slices(points, vec![DMatrix::zeros(1, 2); 12]).unwrap();
    let fit = fit_branch_derivatives(&factors_with_direction(&[1.0, 0.0], h), &t, 3).unwrap();
    assert!((fit[0].coefficients[0]).abs() < 1e-10 && (fit[0].coefficients[1] - 3.0).abs() < 1e-10);
    assert!(fit[0].residual < 1e-10);
}

#[test]
fn constant_branch_residual_equals_projection_error() {
    let z: Vec<f64> = (0..9).map(|k| k as f64 * 0.25 - 1.0).collect();
    let points: Vec<Vec<f64>> = z.iter().map(|&v| vec![v]).collect();
    let t = JacobianTensor::from_slices(points, vec![DMatrix::zeros(1, 1); 9]).unwrap();
    let fit = fit_branch_derivatives(&factors_with_direction(&[1.0], vec![2.0; 9]), &t, 3).unwrap();
    // normal equations for the columns z and z^2
    let m = DMatrix::from_fn(9, 2, |k, j| z[k].powi(j as i32 + 1));
    let rhs = DVector::from_element(9, 2.0);
    let c = (m.transpose() * &m).lu().solve(&(m.transpose() * &rhs)).unwrap();
    let oracle = (rhs - &m * c).norm();
    assert!(oracle > 0.1);
    assert!((fit[0].residual - oracle).abs() < 1e-10 * oracle);
}

#[test]
fn integration_round_trip() {
    let derivs = vec![vec![0.0, 3.0], vec![2.0, 0.0], vec![1.5, -0.4, 0.8]];
    let ints = integrate_branches(&derivs);
    assert_eq!(ints[0], vec![0.0, 1.0]);
    assert_eq!(ints[1], vec![1.0, 0.0]);
    for (c, g) in derivs.iter().zip(&ints) {
        let back: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * (i as f64 + 2.0)).collect();
        assert_eq!(&back, c);
    }
}

fn constructive_base() -> (NlssModel<DecoupledPart>, nlss::pnlss::PnlssModel) {
    let n = 2;
    let lin = random_stable(n, 0.6, 61);
    let mut rng = seeded_rng(62);
    let v = random_matrix(&mut rng, n + 1, 2, 1.0);
    let w_x = random_matrix(&mut rng, n, 2, 0.2);
    let w_y = random_matrix(&mut rng, 1, 2, 0.2);
    let coeffs = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, -0.4, 0.2]);
    let part = DecoupledPart::new(v, w_x, w_y, coeffs).unwrap();
    let truth = NlssModel::new(lin.clone(), part.clone(), DVector::zeros(n), false).unwrap();
    let base = NlssModel::new(lin, part.expand(n, 1).unwrap(), DVector::zeros(n), false).unwrap();
    (truth, base)
}

#[test]
fn constructive_pipeline_recovers_the_static_map() {
    let (_, base) = constructive_base();
    let u = white(500, 1.0, 63);
    let settings = DecoupleSettings {
        rank: 2,
        n_samples: 200,
        seed: 3,
        scale: SamplingScale::Unit,
        cpd: CpdSettings { execution: Execution::Sequential, ..CpdSettings::default() },
        degree: None,
    };
    let dec = decouple(&base, &u, &settings).unwrap();
    assert!(dec.factors.residual < 1e-8);
    assert!(dec.branch_fits.iter().all(|b| b.residual < 1e-8));
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for k in 0..200 {
        let s = white(3, 1.5, 1000 + k);
        let a = base.nonlinear.stacked(&s);
        let mut fx = vec![0.0; 2];
        let mut gy = vec![0.0; 1];
        dec.model.nonlinear.eval(&s, &mut fx, &mut gy);
        fx.extend(gy);
        for (x, y) in a.iter().zip(&fx) {
            worst = worst.max((x - y).abs());
            scale = scale.max(x.abs());
        }
    }
    assert!(worst < 1e-6 * scale, "{worst:e} of {scale:e}");
    let y_base = base.simulate(&u).unwrap().y;
    let y_dec = dec.model.simulate(&u).unwrap().y;
    assert!(rms(&y_base, &y_dec) < 1e-6 * std_dev(&y_base));
}

#[test]
fn decoupled_and_expanded_simulations_agree() {
    for seed in 0..5 {
        let model = random_decoupled(3, 3, 3 + seed as u32 % 2, seed + 70);
        let expanded = NlssModel::new(
            model.linear.clone(),
            model.nonlinear.expand(3, 1).unwrap(),
            model.x0.clone(),
            model.x0_estimated,
        )
        .unwrap();
        let u = white(400, 0.8, seed + 71);
        let a = model.simulate(&u).unwrap().y;
        let b = expanded.simulate(&u).unwrap().y;
        assert!(rms(&a, &b) < 1e-10, "{:e}", rms(&a, &b));
    }
}

#[test]
fn output_jacobian_matches_finite_differences() {
    for seed in 0..5 {
        let model = random_decoupled(2, 2, 3, seed + 80);
        let u = white(100, 0.8, seed + 81);
        let free = model.layout().all();
        let (_, jac) = model.output_jacobian(&u, &free).unwrap();
        let fd = fd_jacobian(&model, &u, &free);
        let err = max_column_error(&jac, &fd);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn parameter_counts() {
    let c = count_decoupled_parameters(3, 1, 1, 3, 5);
    assert_eq!((c.formula, c.structural), (55, 50));
    assert_eq!(count_decoupled_parameters(3, 1, 1, 3, 0).formula, 0);
    for (n, r, d) in [(2, 1, 2), (3, 5, 3), (4, 2, 4)] {
        let m = random_decoupled(n, r, d, 5);
        assert_eq!(m.nonlinear.n_params(), count_decoupled_parameters(n, 1, 1, d as usize, r).structural);
    }
    // for this shape the decoupled form grows linearly in d, the coupled one polynomially
    let coupled: Vec<usize> = (2..=6).map(|d| build_basis(3, 1, d, BasisMask::Full).unwrap().len() * 4).collect();
    let decoupled: Vec<usize> = (2..=6).map(|d| count_decoupled_parameters(3, 1, 1, d, 5).structural).collect();
    assert!(coupled.windows(2).zip(decoupled.windows(2)).all(|(c, d)| c[1] - c[0] > d[1] - d[0]));
}

#[test]
fn reoptimization_does_not_raise_the_cost() {
    let (truth, base) = constructive_base();
    let u = white(300, 1.0, 90);
    let y: Vec<f64> = truth.simulate(&u).unwrap().y.iter().zip(white(300, 0.01, 91)).map(|(a, b)| a + b).collect();
    let settings = DecoupleSettings {
        rank: 2,
        n_samples: 100,
        seed: 1,
        scale: SamplingScale::Unit,
        cpd: CpdSettings { execution: Execution::Sequential, restarts: 3, ..CpdSettings::default() },
        degree: None,
    };
    let dec = decouple(&base, &u, &settings).unwrap();
    let (_, report) = optimize_decoupled(&dec.model, &u, &y, &LmSettings::default().with_max_iterations(20)).unwrap();
    assert!(report.final_cost() <= report.initial_cost());
    assert!(accepted_costs_non_increasing(&report));
}
