mod common;

use common::white;
use ctident::estimator::{
    bcd_identify, bias_condition, excitation_order_check, gn_step, one_descent, phi_matrix,
    stationarity_check, EstimatorConfig, InnerMethod, ModelSetup, SetupKind,
};
use ctident::experiments::{benchmark_systems, bias_spec, generate_record};
use ctident::poly::bias_vector;
use ctident::regression::{residual_output, Subproblem};
use ctident::{DataRecord, Intersample, ModelStructure, ParameterVector, TransferFunction};
use nalgebra::DMatrix;

fn perturbed(theta: &ParameterVector, rel: f64) -> ParameterVector {
    let v = theta
        .values()
        .iter()
        .enumerate()
        .map(|(k, x)| x * (1.0 + rel * if k % 2 == 0 { 1.0 } else { -1.0 }))
        .collect();
    ParameterVector::new(theta.structure(), v).unwrap()
}

fn miso_record(len: usize, seed: u64) -> (DataRecord, ModelSetup) {
    let sys = benchmark_systems();
    let spec = bias_spec(SetupKind::Miso, sys.g1a, "miso", 1, vec![len], seed);
    (generate_record(&spec, 0, 0).unwrap(), spec.setup.clone())
}

#[test]
fn gn_step_moves_toward_the_common_fixed_point() {
    let sys = benchmark_systems();
    let (record, setup) = miso_record(10_000, 3);
    let s2 = sys.g2.structure();
    let start = perturbed(&sys.g2.parameters(s2).unwrap(), 0.005);
    let fixed = [sys.g1a.clone(), sys.g2.clone()];
    let mut fixed_points = Vec::new();
    for method in [InnerMethod::Srivc, InnerMethod::Gn] {
        let cfg = EstimatorConfig {
            inner_method: method,
            inner_max_iters: 200,
            inner_rel_tol: 1e-11,
            ..Default::default()
        };
        let out = one_descent(&record, &setup, &fixed, 1, &start, &cfg).unwrap();
        assert!(out.converged);
        fixed_points.push(out.theta);
    }
    assert!(fixed_points[0].distance(&fixed_points[1]) < 1e-6);

    let y_tilde = residual_output(&record, &setup, &fixed, 1).unwrap();
    let sub = Subproblem::new(&y_tilde, &record.inputs[1], record.h, Intersample::Zoh, 0).unwrap();
    let next = gn_step(&start, &sub, &EstimatorConfig::default()).unwrap();
    let target = &fixed_points[0];
    assert!(next.distance(target) < start.distance(target));
}

#[test]
fn first_submodel_converges_to_a_stationary_point() {
    let sys = benchmark_systems();
    let (record, setup) = miso_record(50_000, 5);
    let s1 = sys.g1.structure();
    let start = sys.g1a.parameters(s1).unwrap();
    let fixed = [sys.g1a.clone(), sys.g2.clone()];
    let cfg = EstimatorConfig::default();
    let out = one_descent(&record, &setup, &fixed, 0, &start, &cfg).unwrap();
    assert!(out.converged);
    assert!(out.stationarity < 1e-6);
    let g2 = sys.g2.parameters(sys.g2.structure()).unwrap();
    let at_fixed_point =
        stationarity_check(&[out.theta.clone(), g2.clone()], &record, &setup, &cfg).unwrap();
    assert!(at_fixed_point[0] < 1e-6);

    let off =
        stationarity_check(&[perturbed(&out.theta, 0.02), g2], &record, &setup, &cfg).unwrap();
    assert!(off[0] > at_fixed_point[0]);
}

#[test]
fn safeguarded_descent_never_increases_the_cost() {
    let sys = benchmark_systems();
    let spec = bias_spec(
        SetupKind::Additive,
        sys.g1b.clone(),
        "add",
        1,
        vec![4000],
        11,
    );
    let record = generate_record(&spec, 0, 0).unwrap();
    let s = ModelStructure::new(2, 0).unwrap();
    let init = vec![
        sys.g1b.parameters(s).unwrap(),
        ParameterVector::new(s, vec![0.05, 0.05, 0.5]).unwrap(),
    ];
    let cfg = EstimatorConfig {
        outer_max_iters: 15,
        ..Default::default()
    };
    let report = bcd_identify(&record, &spec.setup, &init, &cfg).unwrap();
    let mut previous = report.initial_cost;
    for &c in &report.cost_trajectory {
        assert!(c <= previous * (1.0 + 1e-12), "{} after {}", c, previous);
        previous = c;
    }
}

/// Oracle: eigenvalues of the `r x r` Toeplitz matrix of biased autocovariances.
fn toeplitz_rank(u: &[f64], r: usize) -> usize {
    let n = u.len();
    let acf: Vec<f64> = (0..r)
        .map(|l| (l..n).map(|k| u[k] * u[k - l]).sum::<f64>() / n as f64)
        .collect();
    let t = DMatrix::from_fn(r, r, |i, j| acf[i.abs_diff(j)]);
    let eig = t.symmetric_eigenvalues();
    let top = eig.max();
    eig.iter().filter(|&&v| v > 1e-6 * top).count()
}

#[test]
fn excitation_order_matches_spectral_line_count() {
    let h = 0.02;
    let len = 20_000;
    let sines = |freqs: &[f64]| -> Vec<f64> {
        (0..len)
            .map(|k| freqs.iter().map(|w| (w * k as f64 * h).sin()).sum())
            .collect()
    };
    let three = sines(&[25.0, 60.0, 110.0]);
    assert_eq!(toeplitz_rank(&three, 6), 6);
    assert!(excitation_order_check(&three, 6).unwrap().full_rank);
    assert!(!excitation_order_check(&three, 7).unwrap().full_rank);

    let one = sines(&[1.3]);
    assert!(!excitation_order_check(&one, 4).unwrap().full_rank);
    assert_eq!(excitation_order_check(&one, 4).unwrap().rank, 2);
    assert!(excitation_order_check(&white(1, len), 8).unwrap().full_rank);
}

#[test]
fn single_submodel_phi_is_nonsingular_under_white_input() {
    let sys = benchmark_systems();
    let u = white(21, 20_000);
    let y = ctident::ltisim::filter_signal(&sys.g2, &u, 0.02, Intersample::Zoh).unwrap();
    let record = DataRecord::new(0.02, vec![u], y, Intersample::Zoh).unwrap();
    let setup = ModelSetup::new(SetupKind::Miso, vec![sys.g2.structure()]).unwrap();
    let diag = phi_matrix(
        &record,
        &setup,
        &[sys.g1b.den().clone()],
        &[sys.g2.den().clone()],
        0,
    )
    .unwrap();
    assert!(diag.is_full_rank());
    assert!(diag.condition.is_finite());
}

/// The one-descent fixed point of the additive setup satisfies the empirical bias condition,
/// and the residual shrinks as the record grows.
#[test]
fn additive_one_descent_satisfies_the_empirical_bias_condition() {
    let sys = benchmark_systems();
    let s = sys.g2.structure();
    let sizes = vec![2000, 10_000, 50_000];
    let spec = bias_spec(
        SetupKind::Additive,
        sys.g1a.clone(),
        "add",
        1,
        sizes.clone(),
        17,
    );
    let cfg = EstimatorConfig::default();
    let runs = 4;
    let mut mean_residual = Vec::new();
    for n_index in 0..sizes.len() {
        let mut acc = 0.0;
        for run in 0..runs {
            let record = generate_record(&spec, n_index, run).unwrap();
            let fixed = [sys.g1a.clone(), sys.g2.clone()];
            let start = sys.g2.parameters(s).unwrap();
            let out = one_descent(&record, &spec.setup, &fixed, 1, &start, &cfg).unwrap();
            let g2_hat: TransferFunction = out.theta.to_transfer_function().unwrap();
            let phi = phi_matrix(
                &record,
                &spec.setup,
                &[sys.g1a.den().clone(), g2_hat.den().clone()],
                &[sys.g1.den().clone(), sys.g2.den().clone()],
                0,
            )
            .unwrap();
            let etas = [
                bias_vector(&sys.g1, &sys.g1a).unwrap(),
                bias_vector(&sys.g2, &g2_hat).unwrap(),
            ];
            acc += bias_condition(&phi.matrix, &etas).unwrap()[1];
        }
        mean_residual.push(acc / runs as f64);
    }
    assert!(
        mean_residual.windows(2).all(|w| w[1] < w[0]),
        "{:?}",
        mean_residual
    );
}
