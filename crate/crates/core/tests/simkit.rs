use dem::diagnostics::autocorrelation;
use dem::linalg::foh;
use dem::model::LtiModel;
use dem::noise::sample_colored_noise;
use dem::simkit::{
    generate_dataset, load_csv, preprocess_inputs, quadrotor_system, save_csv, sidecar_path, split_dataset,
    InputSignal, SimSpec, DEFAULT_DT, DEFAULT_STEPS,
};
use dem::DemError;
use nalgebra::{DMatrix, DVector};

#[test]
fn table_entries() {
    let s2 = quadrotor_system(2).unwrap();
    assert_eq!(s2.a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
    assert_eq!(s2.b.row(1).iter().copied().collect::<Vec<_>>(), vec![0.3748, -0.3748, -0.3748, 0.3748]);
    assert!(s2.b.row(0).iter().all(|&v| v == 0.0));
    assert_eq!(s2.c, DMatrix::identity(2, 2));

    let s4 = quadrotor_system(4).unwrap();
    assert_eq!(s4.a[(1, 2)], -9.81);
    assert_eq!(s4.a[(0, 1)], 1.0);
    assert_eq!(s4.a[(2, 3)], 1.0);

    let s3 = quadrotor_system(3).unwrap();
    assert_eq!(s3.a[(0, 1)], -9.81);

    let s1 = quadrotor_system(1).unwrap();
    assert_eq!(s1.dims().n, 1);
    assert_eq!(s1.a[(0, 0)], 0.0);

    assert!(matches!(quadrotor_system(0), Err(DemError::Parameter(_))));
    assert!(quadrotor_system(5).is_err());
}

#[test]
fn silent_system_stays_at_rest() {
    let model = quadrotor_system(3).unwrap();
    let mut spec = SimSpec::new(0.0, 0.0, 0.0, 1).noise_free();
    spec.input = InputSignal::Constant(vec![0.0; 4]);
    let ds = generate_dataset(&model, "3", &spec).unwrap();
    assert!(ds.y.iter().all(|&v| v == 0.0));
}

#[test]
fn constant_thrust_gives_a_ramp() {
    let model = quadrotor_system(1).unwrap();
    let mut spec = SimSpec::new(0.0, 0.0, 0.0, 1).noise_free();
    spec.input = InputSignal::Constant(vec![1.0, 0.0, 0.0, 0.0]);
    let ds = generate_dataset(&model, "1", &spec).unwrap();
    for k in 1..ds.len() {
        let expected = 0.3748 * k as f64 * ds.dt;
        assert!(((ds.y[(k, 0)] - expected) / expected).abs() < 1e-6, "step {k}");
    }
}

#[test]
fn fixed_seed_reproduces_the_dataset() {
    let model = quadrotor_system(2).unwrap();
    let spec = SimSpec::new(2.0 * DEFAULT_DT, 20.0, 8.0, 42);
    let a = generate_dataset(&model, "2", &spec).unwrap();
    let b = generate_dataset(&model, "2", &spec).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&model, "2", &SimSpec::new(2.0 * DEFAULT_DT, 20.0, 8.0, 43)).unwrap();
    assert_ne!(a.y, c.y);
}

#[test]
fn default_layout_is_850_steps_split_700_150() {
    let model = quadrotor_system(2).unwrap();
    let ds = generate_dataset(&model, "2", &SimSpec::new(DEFAULT_DT, 20.0, 8.0, 1)).unwrap();
    assert_eq!(ds.len(), DEFAULT_STEPS);
    assert_eq!(ds.split, 700);
    assert_eq!(ds.test_outputs().nrows(), 150);
    assert!((ds.t[1] - ds.t[0] - 0.0083).abs() < 1e-15);
}

#[test]
fn unstable_growth_is_reported() {
    let model = LtiModel::new(
        DMatrix::from_element(1, 1, 40.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let mut spec = SimSpec::new(0.0, 0.0, 0.0, 1).noise_free();
    spec.input = InputSignal::Constant(vec![1.0]);
    match generate_dataset(&model, "unstable", &spec) {
        Err(DemError::Numerical { detail, .. }) => assert!(detail.contains("step")),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn preprocessing_examples() {
    let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
    let (out, tf) = preprocess_inputs(&v).unwrap();
    assert_eq!(out.as_slice(), &[-0.5, 0.0, 0.5]);
    assert_eq!(tf.mean, vec![2.0]);
    assert_eq!(tf.range, vec![2.0]);

    let raw = DMatrix::from_fn(50, 2, |i, j| ((i * 37 + j * 11) % 17) as f64 * 0.3 - 1.1);
    let (scaled, _) = preprocess_inputs(&raw).unwrap();
    for j in 0..2 {
        let col = scaled.column(j);
        assert!(col.mean().abs() < 1e-12);
        assert!((col.max() - col.min() - 1.0).abs() < 1e-12);
        // Independent oracle: the formula written out directly.
        let orig = raw.column(j);
        let (mean, range) = (orig.sum() / 50.0, orig.max() - orig.min());
        for i in 0..50 {
            assert!((col[i] - (orig[i] - mean) / range).abs() < 1e-15);
        }
    }
    // A second pass leaves zero-mean, unit-range data unchanged.
    let (again, _) = preprocess_inputs(&scaled).unwrap();
    assert!((&again - &scaled).amax() < 1e-12);

    let flat = DMatrix::from_element(4, 1, 3.0);
    assert!(matches!(preprocess_inputs(&flat), Err(DemError::Data(_))));
}

#[test]
fn split_examples() {
    let model = quadrotor_system(2).unwrap();
    let ds = generate_dataset(&model, "2", &SimSpec::new(DEFAULT_DT, 20.0, 8.0, 1)).unwrap();
    let (train, test) = split_dataset(&ds, 700.0 / 850.0, 4).unwrap();
    assert_eq!((train.len(), test.len()), (700, 150));
    let joined = DMatrix::from_fn(ds.len(), 2, |k, j| if k < 700 { train.y[(k, j)] } else { test.y[(k - 700, j)] });
    assert_eq!(joined, ds.y);
    assert_eq!(test.t[0], ds.t[700]);

    let mut small = ds.clone();
    small.t = small.t.rows(0, 10).into_owned();
    small.y = small.y.rows(0, 10).into_owned();
    small.v = small.v.rows(0, 10).into_owned();
    small.x = None;
    small.split = 5;
    let (a, b) = split_dataset(&small, 0.5, 4).unwrap();
    assert_eq!((a.len(), b.len()), (5, 5));

    assert!(split_dataset(&small, 0.5, 6).is_err());
    assert!(split_dataset(&small, 1.0, 1).is_err());
    assert!(split_dataset(&small, 0.0, 1).is_err());
}

#[test]
fn csv_round_trip_is_lossless() {
    let model = quadrotor_system(2).unwrap();
    let ds = generate_dataset(&model, "2", &SimSpec::new(2.0 * DEFAULT_DT, 20.0, 8.0, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_csv(&ds, &path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = load_csv(&path).unwrap();
    assert!((&back.y - &ds.y).amax() <= 1e-12);
    assert!((&back.v - &ds.v).amax() <= 1e-12);
    assert!((&back.t - &ds.t).amax() <= 1e-12);
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.split, ds.split);
}

#[test]
fn missing_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "t,y1,y2,v2\n0,1,2,3\n0.1,1,2,3\n").unwrap();
    match load_csv(&path) {
        Err(DemError::Data(msg)) => assert!(msg.contains("v1"), "{msg}"),
        other => panic!("expected a schema error, got {other:?}"),
    }
    std::fs::write(&path, "y1,v1\n1,2\n").unwrap();
    match load_csv(&path) {
        Err(DemError::Data(msg)) => assert!(msg.contains("`t`"), "{msg}"),
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn hand_written_file_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hand.csv");
    std::fs::write(&path, "t,y1,v1,v2\n0.0,1.5,0.25,-1\n0.5,2.5,0.5,-2\n1.0,3.5,0.75,-3\n").unwrap();
    let ds = load_csv(&path).unwrap();
    assert_eq!(ds.y.as_slice(), &[1.5, 2.5, 3.5]);
    assert_eq!(ds.v, DMatrix::from_row_slice(3, 2, &[0.25, -1.0, 0.5, -2.0, 0.75, -3.0]));
    assert_eq!(ds.dt, 0.5);
    assert_eq!(ds.t, DVector::from_vec(vec![0.0, 0.5, 1.0]));
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "t,y1,v1\n0,1,2\n0.1,1\n0.2,1,2\n").unwrap();
    assert!(matches!(load_csv(&path), Err(DemError::Data(_))));
    std::fs::write(&path, "t,y1,v1\n0,1,2\n0.1,1,2\n0.35,1,2\n").unwrap();
    assert!(matches!(load_csv(&path), Err(DemError::Data(_))));
    std::fs::write(&path, "t,y1,v1\n0,1,2\n0.1,x,2\n").unwrap();
    assert!(matches!(load_csv(&path), Err(DemError::Data(_))));
    assert!(matches!(load_csv(&dir.path().join("absent.csv")), Err(DemError::Io(_))));
}

/// One step of `ẋ = A x + B sin(ω t)` from `x = 0` at t = 0, integrated
/// with many first-order-hold substeps as a reference.
fn sine_step(model: &LtiModel, dt: f64, substeps: usize) -> DVector<f64> {
    let omega = 7.0;
    let h = dt / substeps as f64;
    let (phi, p0, p1) = foh(&model.a, h);
    let u = |t: f64| &model.b * DVector::from_element(model.b.ncols(), (omega * t).sin());
    let mut x = DVector::zeros(model.a.nrows());
    for k in 0..substeps {
        x = &phi * &x + &p0 * u(k as f64 * h) + &p1 * u((k + 1) as f64 * h);
    }
    x
}

#[test]
fn discretization_defect_shrinks_with_the_step() {
    let model = quadrotor_system(3).unwrap();
    let defect = |dt: f64| (sine_step(&model, dt, 1) - sine_step(&model, dt, 512)).norm();
    let (coarse, fine) = (defect(0.02), defect(0.01));
    assert!(fine <= 0.5 * coarse, "defect {coarse:e} -> {fine:e}");
}

#[test]
fn colored_noise_is_detectably_colored() {
    let pi = DMatrix::from_element(1, 1, 1.0);
    let colored = sample_colored_noise(4000, DEFAULT_DT, 2.0 * DEFAULT_DT, &pi, 3).unwrap().interior();
    let white = sample_colored_noise(4000, DEFAULT_DT, 0.0, &pi, 3).unwrap().interior();
    let ac = autocorrelation(colored.column(0).as_slice(), 5).unwrap();
    assert!(ac.values[1] > ac.bound);
    let aw = autocorrelation(white.column(0).as_slice(), 5).unwrap();
    assert!(aw.values[1].abs() < aw.bound);
}
