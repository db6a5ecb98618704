use dem::baseline::{em_identify, em_predict_n_step, kalman_smoother, EmModel};
use dem::linalg::foh;
use dem::simkit::{generate_dataset, quadrotor_system, InputSignal, SimSpec};
use dem::DemError;
use nalgebra::{DMatrix, DVector};

const DT: f64 = 0.0083;

/// Matrix logarithm by its series around the identity.
fn logm_near_identity(f: &DMatrix<f64>) -> DMatrix<f64> {
    let n = f.nrows();
    let e = f - DMatrix::identity(n, n);
    let mut term = e.clone();
    let mut out = DMatrix::zeros(n, n);
    for k in 1..60 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        out += &term * (sign / k as f64);
        term = &term * &e;
    }
    out
}

fn exact_model(c: DMatrix<f64>, r: f64, q: f64) -> EmModel {
    let truth = quadrotor_system(2).unwrap();
    let (phi, p0, p1) = foh(&truth.a, DT);
    let g = (p0 + p1) * &truth.b;
    let m = c.nrows();
    EmModel {
        f: phi,
        g,
        c,
        q: DMatrix::identity(2, 2) * q,
        r: DMatrix::identity(m, m) * r,
        x0: DVector::zeros(2),
        p0: DMatrix::identity(2, 2) * 1e-12,
        dt: DT,
    }
}

#[test]
fn exact_observations_are_reproduced() {
    let truth = quadrotor_system(2).unwrap();
    let ds = generate_dataset(&truth, "2", &SimSpec::new(0.0, 12.0, 8.0, 4)).unwrap();
    let mut model = exact_model(DMatrix::identity(2, 2), 1e-12, 1.0);
    model.p0 = DMatrix::identity(2, 2);
    let sm = kalman_smoother(&model, &ds.y, &ds.v).unwrap();
    let dev = (0..ds.len())
        .map(|k| (&sm.mean[k] - ds.y.row(k).transpose()).amax())
        .fold(0.0, f64::max);
    assert!(dev < 1e-4, "max deviation {dev:e}");
}

#[test]
fn true_model_recovers_noise_free_states() {
    let truth = quadrotor_system(2).unwrap();
    let mut spec = SimSpec::new(0.0, 0.0, 0.0, 4).noise_free();
    // Constant inputs make the hold-based simulation exactly discrete.
    spec.input = InputSignal::Constant(vec![0.4, -0.1, 0.2, 0.3]);
    let ds = generate_dataset(&truth, "2", &spec).unwrap();
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let y = ds.y.columns(0, 1).into_owned();
    let model = exact_model(c, 1e-6, 1e-12);
    let sm = kalman_smoother(&model, &y, &ds.v).unwrap();
    let xs = ds.x.as_ref().unwrap();
    let err = (0..ds.len())
        .map(|k| (&sm.mean[k] - xs.row(k).transpose()).amax())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "max state error {err:e}");
}

#[test]
fn smoothing_never_increases_uncertainty() {
    let truth = quadrotor_system(2).unwrap();
    let ds = generate_dataset(&truth, "2", &SimSpec::new(0.0, 8.0, 6.0, 2)).unwrap();
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let y = ds.y.columns(0, 1).into_owned();
    let mut model = exact_model(c, (-8.0f64).exp(), (-6.0f64).exp());
    model.p0 = DMatrix::identity(2, 2);
    let sm = kalman_smoother(&model, &y, &ds.v).unwrap();
    for k in 0..ds.len() {
        let gap = &sm.filtered_cov[k] - &sm.cov[k];
        let min_eig = gap.symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= -1e-12 * sm.filtered_cov[k].amax(), "step {k}: {min_eig:e}");
    }
}

#[test]
fn log_likelihood_never_decreases() {
    for seed in 1..=3 {
        let truth = quadrotor_system(2).unwrap();
        let ds = generate_dataset(&truth, "2", &SimSpec::new(2.0 * DT, 20.0, 8.0, seed)).unwrap();
        let (y, v) = ds.train();
        let res = em_identify(&y, &v, 2, Some(&truth.c), DT, 60, 1e-12).unwrap();
        for w in res.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0), "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn white_noise_recovery_within_fifteen_percent() {
    let truth = quadrotor_system(2).unwrap();
    let ds = generate_dataset(&truth, "2", &SimSpec::new(0.0, 20.0, 8.0, 7)).unwrap();
    let (y, v) = ds.train();
    assert_eq!(y.nrows(), 700);
    let res = em_identify(&y, &v, 2, Some(&truth.c), DT, 300, 1e-9).unwrap();
    let a = logm_near_identity(&res.model.f) / DT;
    let scale = truth.a.amax();
    for i in 0..2 {
        for j in 0..2 {
            let err = (a[(i, j)] - truth.a[(i, j)]).abs();
            assert!(err <= 0.15 * scale, "A[{i}][{j}] = {} vs {}", a[(i, j)], truth.a[(i, j)]);
        }
    }
}

#[test]
fn frozen_output_matrix_is_kept() {
    let truth = quadrotor_system(2).unwrap();
    let ds = generate_dataset(&truth, "2", &SimSpec::new(DT, 20.0, 8.0, 1)).unwrap();
    let (y, v) = ds.train();
    let res = em_identify(&y, &v, 2, Some(&truth.c), DT, 5, 1e-9).unwrap();
    assert_eq!(res.model.c, truth.c);
    let free = em_identify(&y, &v, 2, None, DT, 5, 1e-9).unwrap();
    assert_ne!(free.model.c, truth.c);
}

#[test]
fn prediction_contract() {
    let model = exact_model(DMatrix::identity(2, 2), 1e-6, 1e-6);
    let truth = quadrotor_system(2).unwrap();
    let mut spec = SimSpec::new(0.0, 0.0, 0.0, 4).noise_free();
    spec.input = InputSignal::Constant(vec![0.4, -0.1, 0.2, 0.3]);
    let ds = generate_dataset(&truth, "2", &spec).unwrap();
    let x0 = ds.x.as_ref().unwrap().row(ds.split - 1).transpose();
    let inputs = ds.prediction_inputs().unwrap();
    let yh = em_predict_n_step(&model, &x0, &inputs, 150).unwrap();
    assert!((&yh - ds.test_outputs().rows(0, 150)).amax() < 1e-8);

    let mut still = model.clone();
    still.f = DMatrix::identity(2, 2);
    still.g = DMatrix::zeros(2, 4);
    let x0 = DVector::from_vec(vec![0.3, -0.2]);
    let yh = em_predict_n_step(&still, &x0, &inputs, 150).unwrap();
    for i in 0..150 {
        assert_eq!(yh.row(i).transpose(), &still.c * &x0);
    }

    assert!(em_predict_n_step(&model, &x0, &inputs.rows(0, 10).into_owned(), 150).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = exact_model(DMatrix::identity(2, 2), 1e-6, 1e-6);
    let y = DMatrix::zeros(10, 2);
    assert!(kalman_smoother(&model, &y, &DMatrix::zeros(9, 4)).is_err());
    assert!(kalman_smoother(&model, &DMatrix::zeros(10, 3), &DMatrix::zeros(10, 4)).is_err());
    let mut bad = model.clone();
    bad.r = -bad.r;
    assert!(matches!(kalman_smoother(&bad, &y, &DMatrix::zeros(10, 4)), Err(DemError::NotPositiveDefinite { .. })));
    assert!(em_identify(&y, &DMatrix::zeros(10, 4), 0, None, DT, 5, 1e-9).is_err());
}
