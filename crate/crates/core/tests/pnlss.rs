mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use nlss::linfit::LinearStateSpace;
use nlss::model::{fit_output_error, NlssModel};
use nlss::optimizer::LmSettings;
use nlss::pnlss::{
    build_basis, count_nonlinear_parameters, structural_nonlinear_parameters, BasisMask, PnlssModel, PolynomialPart,
};
use num_bigint::BigUint;
use proptest::prelude::*;

#[test]
fn zero_polynomial_terms_reduce_to_the_linear_model() {
    for seed in 0..5 {
        let mut model = random_pnlss(3, 3, 0.1, seed);
        model.nonlinear.e.fill(0.0);
        model.nonlinear.f.fill(0.0);
        let u = white(400, 1.0, seed + 50);
        let y = model.simulate(&u).unwrap().y;
        let y_lin = model.linear.simulate(&u, &model.x0).unwrap();
        let scale = y_lin.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in y.iter().zip(&y_lin) {
            assert!((a - b).abs() <= 1e-13 * scale, "{a} vs {b}");
        }
    }
}

#[test]
fn parameter_counts_match_enumeration() {
    for n in 0..=4usize {
        for n_u in 0..=2usize {
            for n_y in 0..=2usize {
                for d in 1..=4u32 {
                    let nv = n + n_u;
                    let all = brute_monomials(nv, d).len();
                    let formula = count_nonlinear_parameters(n, n_u, n_y, d).unwrap();
                    assert_eq!(formula, BigUint::from((all - nv) * (n + n_y)), "n={n} n_u={n_u} n_y={n_y} d={d}");
                    let structural = structural_nonlinear_parameters(n, n_u, n_y, d).unwrap();
                    assert_eq!(structural, BigUint::from((all - nv - 1) * (n + n_y)));
                    if nv > 0 && d >= 2 {
                        let basis = build_basis(n, n_u, d, BasisMask::Full).unwrap();
                        let mut expected: Vec<Vec<u32>> =
                            brute_monomials(nv, d).into_iter().filter(|e| e.iter().sum::<u32>() >= 2).collect();
                        let mut got = basis.exponents.clone();
                        expected.sort();
                        got.sort();
                        assert_eq!(got, expected);
                    }
                }
            }
        }
    }
}

#[test]
fn worked_counts() {
    assert_eq!(count_nonlinear_parameters(3, 1, 1, 3).unwrap(), BigUint::from(124u32));
    assert_eq!(count_nonlinear_parameters(0, 1, 0, 1).unwrap(), BigUint::from(0u32));
    assert_eq!(build_basis(3, 1, 3, BasisMask::Full).unwrap().len(), 30);
    let pure = build_basis(2, 1, 3, BasisMask::PurePowers).unwrap();
    assert_eq!(pure.len(), 6);
    assert!(pure.exponents.iter().all(|e| e.iter().filter(|&&k| k > 0).count() == 1));
}

#[test]
fn simulation_matches_reference_recursion() {
    for seed in 0..5 {
        let model = random_pnlss(2 + seed as usize % 2, 3, 0.05, seed);
        let u = white(300, 0.8, seed + 7);
        let y = model.simulate(&u).unwrap().y;
        let y_ref = reference_pnlss(&model, &u);
        let scale = y_ref.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in y.iter().zip(&y_ref) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }
}

#[test]
fn output_jacobian_matches_finite_differences() {
    for seed in 0..5 {
        let model = random_pnlss(2, 3, 0.05, seed + 20);
        let u = white(120, 0.8, seed + 21);
        let free = model.layout().all();
        let (_, jac) = model.output_jacobian(&u, &free).unwrap();
        let fd = fd_jacobian(&model, &u, &free);
        let err = max_column_error(&jac, &fd);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn jacobian_special_columns() {
    let model = {
        let mut m = random_pnlss(2, 2, 0.0, 3);
        m.nonlinear.e.fill(0.0);
        m.nonlinear.f.fill(0.0);
        m
    };
    let u = white(50, 1.0, 4);
    let layout = model.layout();
    let (_, jac) = model.output_jacobian(&u, &[layout.d.start]).unwrap();
    for (t, ut) in u.iter().enumerate() {
        assert_eq!(jac[(t, 0)], *ut);
    }

    // two outputs with C = I: the x0 block at t = 0 is the identity
    let lin = LinearStateSpace::new(
        DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]),
        DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        DMatrix::identity(2, 2),
        DMatrix::zeros(2, 1),
    )
    .unwrap();
    let basis = build_basis(2, 1, 2, BasisMask::Full).unwrap();
    let part = PolynomialPart::zeros(2, 2, basis);
    let mut model = NlssModel::new(lin, part, DVector::from_vec(vec![0.2, -0.1]), true).unwrap();
    model.nonlinear.e[(0, 0)] = 0.3;
    let x0 = model.layout().x0;
    let (_, jac) = model.output_jacobian(&u, &x0.clone().collect::<Vec<_>>()).unwrap();
    assert_eq!(jac.view((0, 0), (2, 2)).into_owned(), DMatrix::identity(2, 2));
}

#[test]
fn squaring_map_hand_recursion() {
    let lin = LinearStateSpace::new(
        DMatrix::zeros(1, 1),
        DMatrix::zeros(1, 1),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::zeros(1, 1),
    )
    .unwrap();
    let basis = build_basis(1, 1, 2, BasisMask::Full).unwrap();
    let mut part = PolynomialPart::zeros(1, 1, basis);
    part.e[(0, 0)] = 1.0;
    let model = NlssModel::new(lin, part, DVector::from_element(1, 2.0), false).unwrap();
    assert_eq!(model.simulate(&[0.0; 4]).unwrap().y, vec![2.0, 4.0, 16.0, 256.0]);
}

#[test]
fn known_model_is_recovered_from_its_bla() {
    let out = self_consistency(&known_pnlss(), 0, &LmSettings::default());
    assert!(out.report.n_iterations <= 200);
    assert!(out.relative_validation_rmse < 1e-6, "{:e}", out.relative_validation_rmse);
    assert!(out.bla_relative_rmse > 1e-2);
    assert!(accepted_costs_non_increasing(&out.report));
}

#[test]
fn most_random_quadratic_models_are_recovered() {
    let settings = LmSettings::default();
    let recovered = (0..10)
        .filter(|&seed| {
            let out = self_consistency(&random_quadratic_pnlss(seed), seed, &settings);
            assert!(accepted_costs_non_increasing(&out.report));
            out.relative_validation_rmse < 1e-6
        })
        .count();
    assert!(recovered >= 7, "{recovered} of 10");
}

#[test]
fn estimating_x0_does_not_raise_the_cost() {
    let truth = {
        let mut m = random_pnlss(2, 2, 0.05, 31);
        m.x0 = DVector::from_vec(vec![1.0, -0.8]);
        m
    };
    let u = white(300, 0.5, 32);
    let y = truth.simulate(&u).unwrap().y;
    let mut start = truth.clone();
    start.x0.fill(0.0);
    let settings = LmSettings::default().with_max_iterations(50);
    let frozen = fit_output_error(&start, &u, &y, &start.layout().without_x0(), 0, &settings).unwrap();
    let free = fit_output_error(&start, &u, &y, &start.layout().all(), 0, &settings).unwrap();
    assert!(free.1.final_cost() <= frozen.1.final_cost());
    assert!(accepted_costs_non_increasing(&frozen.1) && accepted_costs_non_increasing(&free.1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn empty_basis_model_equals_linear_simulation(seed in 0u64..1000, len in 1usize..80) {
        let lin = random_stable(3, 0.9, seed);
        let model = PnlssModel::linear_only(lin.clone(), false).unwrap();
        let u = white(len, 2.0, seed + 1);
        let y = model.simulate(&u).unwrap().y;
        let y_lin = lin.simulate(&u, &DVector::zeros(3)).unwrap();
        for (a, b) in y.iter().zip(&y_lin) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn parameter_vector_round_trips(seed in 0u64..1000) {
        let model = random_pnlss(2, 3, 0.1, seed);
        let p = model.params();
        prop_assert_eq!(p.len(), model.layout().total());
        let back = model.with_params(&p).unwrap();
        prop_assert_eq!(back, model);
    }
}
