mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use nlss::linfit::LinearStateSpace;
use nlss::model::ValidationRecord;
use nlss::nlss2::{
    estimate_states, fit_static_nonlinearity, initialize_from_states, optimize_full_nlss2, select_lambda,
    state_objective_terms, Activation, NetworkFitSettings, SigmoidNetwork,
};
use nlss::optimizer::LmSettings;
use nlss::seeded_rng;
use nlss::Execution;
use rand_distr::{Distribution, Normal};

/// Objective and its gradient w.r.t. every state, written out term by term.
fn objective_and_gradient(ss: &LinearStateSpace, u: &[f64], y: &[f64], x: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let n = ss.order();
    let steps = y.len();
    let mut grad = vec![0.0; n * steps];
    let mut obj = 0.0;
    for t in 0..steps {
        let xt = DVector::from_column_slice(&x[t * n..(t + 1) * n]);
        let e = y[t] - (&ss.c * &xt)[0] - ss.d[(0, 0)] * u[t];
        obj += e * e;
        for i in 0..n {
            grad[t * n + i] -= 2.0 * ss.c[(0, i)] * e;
        }
        if t + 1 < steps {
            let xn = DVector::from_column_slice(&x[(t + 1) * n..(t + 2) * n]);
            let w = xn - &ss.a * &xt - ss.b.column(0) * u[t];
            obj += lambda * w.norm_squared();
            for i in 0..n {
                grad[(t + 1) * n + i] += 2.0 * lambda * w[i];
            }
            let back = ss.a.transpose() * &w;
            for i in 0..n {
                grad[t * n + i] -= 2.0 * lambda * back[i];
            }
        }
    }
    (obj, grad)
}

#[test]
fn state_estimate_is_a_minimizer() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    for seed in 0..5 {
        let ss = random_stable(2, 0.8, seed);
        let u = white(50, 1.0, seed + 10);
        let y = white(50, 1.0, seed + 11);
        let lambda = [0.01, 1.0, 100.0][seed as usize % 3];
        let est = estimate_states(&ss, &u, &y, lambda).unwrap();
        let (obj, grad) = objective_and_gradient(&ss, &u, &y, &est.states, lambda);
        let scale = obj + y.iter().map(|v| v * v).sum::<f64>();
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(gnorm < 1e-8 * scale, "gradient {gnorm:e}, scale {scale:e}");
        let (e_y, e_x) = state_objective_terms(&ss, &u, &y, &est.states);
        assert!((e_y + lambda * e_x - obj).abs() <= 1e-12 * scale);

        let mut rng = seeded_rng(seed + 99);
        for k in 0..100 {
            let size = 10f64.powi(-(k % 6));
            let x: Vec<f64> = est.states.iter().map(|v| v + size * normal.sample(&mut rng)).collect();
            let (perturbed, _) = objective_and_gradient(&ss, &u, &y, &x, lambda);
            assert!(perturbed >= obj);
        }
    }
}

#[test]
fn strong_regularization_recovers_simulated_states() {
    let ss = random_stable(2, 0.7, 5);
    let u = white(200, 1.0, 6);
    let x0 = DVector::from_vec(vec![0.3, -0.2]);
    let y = ss.simulate(&u, &x0).unwrap();
    let mut x = x0.clone();
    let mut states = Vec::new();
    for &ut in &u {
        states.extend(x.iter().cloned());
        x = &ss.a * &x + ss.b.column(0) * ut;
    }
    let est = estimate_states(&ss, &u, &y, 1e8).unwrap();
    let scale = states.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (a, b) in est.states.iter().zip(&states) {
        assert!((a - b).abs() <= 1e-6 * scale);
    }
}

#[test]
fn unregularized_scalar_state_equals_output() {
    let ss = LinearStateSpace::new(
        DMatrix::from_element(1, 1, 0.5),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::zeros(1, 1),
    )
    .unwrap();
    let u = white(30, 1.0, 1);
    let y = white(30, 1.0, 2);
    let est = estimate_states(&ss, &u, &y, 0.0).unwrap();
    assert_eq!(est.states, y);
}

fn regression_settings(seed: u64) -> NetworkFitSettings {
    NetworkFitSettings { seed, restarts: 5, execution: Execution::Sequential, ..NetworkFitSettings::default() }
}

#[test]
fn zero_targets_give_a_zero_network() {
    let inputs: Vec<Vec<f64>> = (0..100).map(|k| white(3, 2.0, k)).collect();
    let targets = vec![vec![0.0]; 100];
    let fit = fit_static_nonlinearity(&inputs, &targets, &regression_settings(0)).unwrap();
    assert!(fit.rmse < 1e-8 * 2.0);
}

#[test]
fn known_network_function_is_recovered() {
    let mut rng = seeded_rng(3);
    let truth = random_network(2, 1, 2, 1.5, &mut rng);
    let inputs: Vec<Vec<f64>> = (0..300).map(|k| white(2, 1.5, 1000 + k)).collect();
    let targets: Vec<Vec<f64>> = inputs.iter().map(|s| truth.eval(s)).collect();
    let settings = NetworkFitSettings { lm: LmSettings::default().with_max_iterations(500), ..regression_settings(1) };
    let fit = fit_static_nonlinearity(&inputs, &targets, &settings).unwrap();
    for k in 0..100 {
        let s = white(2, 1.5, 5000 + k);
        let err = (fit.network.eval(&s)[0] - truth.eval(&s)[0]).abs();
        assert!(err < 1e-4, "held-out error {err:e}");
    }
}

#[test]
fn linear_targets_are_approximated() {
    let inputs: Vec<Vec<f64>> = (0..200).map(|k| white(2, 1.0, 300 + k)).collect();
    let targets: Vec<Vec<f64>> = inputs.iter().map(|s| vec![0.7 * s[0] - 1.2 * s[1] + 0.3]).collect();
    let fit = fit_static_nonlinearity(&inputs, &targets, &regression_settings(2)).unwrap();
    let t: Vec<f64> = targets.iter().map(|v| v[0]).collect();
    assert!(fit.rmse < 0.01 * std_dev(&t));
}

#[test]
fn sequential_and_parallel_regressions_agree() {
    let inputs: Vec<Vec<f64>> = (0..80).map(|k| white(2, 1.0, 700 + k)).collect();
    let targets: Vec<Vec<f64>> = inputs.iter().map(|s| vec![(s[0] * s[1]).sin()]).collect();
    let seq = fit_static_nonlinearity(&inputs, &targets, &regression_settings(4)).unwrap();
    let par = NetworkFitSettings { execution: Execution::Parallel, ..regression_settings(4) };
    let par = fit_static_nonlinearity(&inputs, &targets, &par).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn output_jacobian_matches_finite_differences() {
    for seed in 0..5 {
        let model = random_nlss2(2, 3, seed + 40);
        let u = white(100, 1.0, seed + 41);
        let free = model.layout().all();
        let (_, jac) = model.output_jacobian(&u, &free).unwrap();
        let fd = fd_jacobian(&model, &u, &free);
        let err = max_column_error(&jac, &fd);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn data_from_the_model_is_a_fixed_point() {
    let model = random_nlss2(2, 2, 8);
    let u = white(150, 1.0, 9);
    let y = model.simulate(&u).unwrap().y;
    let (fitted, report) = optimize_full_nlss2(&model, &u, &y, &LmSettings::default()).unwrap();
    assert_eq!(report.accepted_steps(), 0);
    assert_eq!(fitted, model);
}

#[test]
fn perturbed_start_does_not_get_worse() {
    let truth = random_nlss2(2, 2, 12);
    let u = white(200, 1.0, 13);
    let y = truth.simulate(&u).unwrap().y;
    let mut rng = seeded_rng(14);
    let p = truth.params();
    let net = truth.layout().nonlinear;
    let mut q = p.clone();
    for i in net {
        q[i] *= 1.0 + 0.01 * uniform(&mut rng, 1.0);
    }
    let start = truth.with_params(&q).unwrap();
    let (_, report) = optimize_full_nlss2(&start, &u, &y, &LmSettings::default().with_max_iterations(30)).unwrap();
    assert!(report.final_cost() < report.initial_cost());
    assert!(accepted_costs_non_increasing(&report));
}

#[test]
fn lambda_selection_is_consistent() {
    let truth = random_nlss2(2, 2, 21);
    let u = white(300, 1.0, 22);
    let y = truth.simulate(&u).unwrap().y;
    let u_val = white(200, 1.0, 23);
    let y_val = truth.simulate(&u_val).unwrap().y;
    let val = ValidationRecord { u: &u_val, y: &y_val, score: 0..200 };
    let settings = NetworkFitSettings { restarts: 2, ..regression_settings(5) };

    let one = select_lambda(&truth.linear, &u, &y, &val, &[1.0], &settings).unwrap();
    assert_eq!(one.lambda, 1.0);

    let grid = [1e-2, 1.0, 1e2, 1e4];
    let sel = select_lambda(&truth.linear, &u, &y, &val, &grid, &settings).unwrap();
    let best = sel.scores.iter().filter_map(|(_, r)| r.as_ref().ok().copied()).fold(f64::INFINITY, f64::min);
    let chosen = sel.scores.iter().find(|(l, _)| *l == sel.lambda).unwrap().1.clone().unwrap();
    assert_eq!(chosen, best);

    let dup = select_lambda(&truth.linear, &u, &y, &val, &[1.0, 1.0], &settings).unwrap();
    assert_eq!(dup.scores[0].1, dup.scores[1].1);
    assert_eq!(dup.lambda, 1.0);
}

#[test]
fn initialization_uses_the_estimated_initial_state() {
    let truth = random_nlss2(2, 2, 31);
    let u = white(120, 1.0, 32);
    let y = truth.simulate(&u).unwrap().y;
    let est = estimate_states(&truth.linear, &u, &y, 1.0).unwrap();
    let model = initialize_from_states(&truth.linear, &u, &y, &est, &regression_settings(6)).unwrap();
    assert_eq!(model.x0.as_slice(), est.state(0));
    assert!(model.x0_estimated);
    let template = SigmoidNetwork::zeros(3, 2, 2, Activation::Tanh);
    assert_eq!(model.nonlinear.f_net.n_params(), template.n_params());
}
