use dem::free_energy::{Covariances, Objective, StepRef, TrajectoryStats};
use dem::gencoord::GenVec;
use dem::linalg::{frob, spd_inverse};
use dem::model::{ModelDims, Priors, ThetaVec};
use dem::noise::HyperParams;
use dem::DemError;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P: usize = 2;
const D: usize = 1;
const SIGMA: f64 = 0.5;

struct Instance {
    dims: ModelDims,
    theta: ThetaVec,
    hyper: HyperParams,
    priors: Priors,
    ys: Vec<DVector<f64>>,
    xs: Vec<DVector<f64>>,
    vs: Vec<DVector<f64>>,
}

fn random_spd(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    (&g * g.transpose() + DMatrix::identity(k, k)) * scale
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims::new(2, 1, 2);
    let nt = 5;
    let theta = ThetaVec(DVector::from_fn(dims.theta_len(), |_, _| rng.random_range(-1.0..1.0)));
    let mut hyper = HyperParams::new(0.3, -0.2, dims.m, dims.n);
    hyper.omega_z = random_spd(&mut rng, dims.m, 0.5);
    hyper.omega_w = random_spd(&mut rng, dims.n, 0.5);
    let eta_v = (0..nt)
        .map(|_| {
            GenVec::from_values(
                dims.r,
                D,
                DVector::from_fn((D + 1) * dims.r, |_, _| rng.random_range(-1.0..1.0)),
            )
            .unwrap()
        })
        .collect();
    let priors = Priors {
        eta_v,
        p_v: random_spd(&mut rng, dims.r, 1.0),
        eta_theta: ThetaVec(DVector::from_fn(dims.theta_len(), |_, _| rng.random_range(-1.0..1.0))),
        p_theta: random_spd(&mut rng, dims.theta_len(), 0.5),
        frozen: vec![false; dims.theta_len()],
        eta_lambda: DVector::from_vec(vec![0.5, 0.1]),
        p_lambda: random_spd(&mut rng, 2, 1.0),
    };
    let mut vecs = |len: usize| -> Vec<DVector<f64>> {
        (0..nt)
            .map(|_| DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0)))
            .collect()
    };
    let ys = vecs((P + 1) * dims.m);
    let xs = vecs((P + 1) * dims.n);
    let vs = vecs((D + 1) * dims.r);
    Instance {
        dims,
        theta,
        hyper,
        priors,
        ys,
        xs,
        vs,
    }
}

impl Instance {
    fn objective(&self) -> Objective<'_> {
        Objective::new(self.theta.clone(), self.dims, self.hyper.clone(), &self.priors, P, D, SIGMA).unwrap()
    }

    fn stats(&self, obj: &Objective<'_>) -> TrajectoryStats {
        obj.stats(&self.ys, &self.xs, &self.vs).unwrap()
    }

    fn step<'s>(&'s self, t: usize, eta: &'s DVector<f64>) -> StepRef<'s> {
        StepRef {
            y: &self.ys[t],
            eta_v: eta,
            x: &self.xs[t],
            v: &self.vs[t],
        }
    }
}

fn random_covariances(obj: &Objective<'_>, seed: u64) -> Covariances {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Covariances {
        x: random_spd(&mut rng, obj.x_len(), 0.1),
        v: random_spd(&mut rng, obj.v_len(), 0.1),
        theta: random_spd(&mut rng, obj.dims().theta_len(), 0.1),
        lambda: random_spd(&mut rng, 2, 0.1),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Error terms summed densely over the trajectory with the lifted matrices.
#[test]
fn moment_error_terms_match_dense_sum() {
    let inst = instance(1);
    let obj = inst.objective();
    let st = inst.stats(&obj);
    let cov = random_covariances(&obj, 2);
    let act = obj.action(&st, &cov).unwrap();
    let l = obj.lifted();
    let (mut qy, mut qv, mut qw) = (0.0, 0.0, 0.0);
    for t in 0..st.n_t {
        let eta = obj.eta_v_at(t);
        let e = obj.prediction_errors(inst.step(t, &eta)).unwrap();
        qy += e.output().dot(&(&l.pi_z * e.output()));
        qv += e.input().dot(&(&l.p_v * e.input()));
        qw += e.state().dot(&(&l.pi_w * e.state()));
    }
    assert!(close(act.output_error, -0.5 * qy, 1e-12), "{} vs {}", act.output_error, -0.5 * qy);
    assert!(close(act.input_error, -0.5 * qv, 1e-12));
    assert!(close(act.state_error, -0.5 * qw, 1e-12));
}

#[test]
fn moment_mean_field_matches_dense_traces() {
    let inst = instance(3);
    let obj = inst.objective();
    let st = inst.stats(&obj);
    let cov = random_covariances(&obj, 4);
    let act = obj.action(&st, &cov).unwrap();

    let nt = st.n_t as f64;
    let l = obj.lifted();
    let w_state = frob(&cov.x, &l.u_xx) + frob(&cov.v, &l.u_vv);
    // Per-step curvatures each carry the prior once; the action carries it once.
    let mut u_tt = &inst.priors.p_theta * (nt - 1.0);
    let mut u_ll = &inst.priors.p_lambda * (nt - 1.0);
    for t in 0..st.n_t {
        let eta = obj.eta_v_at(t);
        let ie = obj.internal_energy(inst.step(t, &eta)).unwrap();
        u_tt += ie.u_theta_theta;
        u_ll += ie.u_lambda_lambda;
    }
    let expected = 0.5 * (nt * w_state + frob(&cov.theta, &u_tt) + frob(&cov.lambda, &u_ll));
    assert!(close(act.mean_field, expected, 1e-11), "{} vs {expected}", act.mean_field);
    assert!(close(
        frob(&cov.theta, &u_tt),
        frob(&cov.theta, &obj.u_bar_theta_theta(&st)),
        1e-11
    ));
}

#[test]
fn theta_derivatives_match_finite_differences() {
    let inst = instance(5);
    let obj = inst.objective();
    let st = inst.stats(&obj);
    let cov = random_covariances(&obj, 6);
    let (grad, hess) = obj.action_theta_derivatives(&st, &cov).unwrap();
    let len = inst.dims.theta_len();
    let h = 1e-5;
    let eval = |th: &DVector<f64>| {
        let o = obj.with_theta(ThetaVec(th.clone())).unwrap();
        let (g, _) = o.action_theta_derivatives(&st, &cov).unwrap();
        (o.action(&st, &cov).unwrap().total, g)
    };
    for k in 0..len {
        let mut up = inst.theta.0.clone();
        up[k] += h;
        let mut dn = inst.theta.0.clone();
        dn[k] -= h;
        let (fu, gu) = eval(&up);
        let (fd, gd) = eval(&dn);
        let fd_grad = (fu - fd) / (2.0 * h);
        assert!(close(grad[k], fd_grad, 1e-6), "grad[{k}] {} vs {fd_grad}", grad[k]);
        for j in 0..len {
            let fd_hess = (gu[j] - gd[j]) / (2.0 * h);
            assert!(close(hess[(j, k)], fd_hess, 1e-6), "hess[{j},{k}] {} vs {fd_hess}", hess[(j, k)]);
        }
    }
}

#[test]
fn lambda_derivatives_match_finite_differences() {
    let inst = instance(7);
    let obj = inst.objective();
    let st = inst.stats(&obj);
    let cov = random_covariances(&obj, 8);
    let (grad, hess) = obj.action_lambda_derivatives(&st, &cov).unwrap();
    let h = 1e-5;
    let lam = obj.lambda();
    let eval = |l: &DVector<f64>| {
        let o = obj.with_lambda(l[0], l[1]).unwrap();
        let (g, _) = o.action_lambda_derivatives(&st, &cov).unwrap();
        (o.action(&st, &cov).unwrap().total, g)
    };
    for k in 0..2 {
        let mut up = lam.clone();
        up[k] += h;
        let mut dn = lam.clone();
        dn[k] -= h;
        let (fu, gu) = eval(&up);
        let (fd, gd) = eval(&dn);
        assert!(close(grad[k], (fu - fd) / (2.0 * h), 1e-6));
        for j in 0..2 {
            assert!(close(hess[(j, k)], (gu[j] - gd[j]) / (2.0 * h), 1e-6));
        }
    }
}

#[test]
fn optimal_action_equals_action_at_optimal_covariances() {
    for seed in 10..15 {
        let inst = instance(seed);
        let obj = inst.objective();
        let st = inst.stats(&obj);
        let cov = obj.optimal_covariances(&st).unwrap();
        let direct = obj.action(&st, &cov).unwrap().total;
        let closed = obj.action_optimal(&st).unwrap().total;
        assert!(
            (direct - closed).abs() <= 1e-9 * closed.abs().max(1.0),
            "{direct} vs {closed}"
        );
    }
}

/// `∂F̄/∂Σ^θ = ½ (Σ^θ⁻¹ + Ū_θθ)`, which vanishes at the optimum.
#[test]
fn covariance_gradient_matches_closed_form() {
    let inst = instance(20);
    let obj = inst.objective();
    let st = inst.stats(&obj);
    let cov = random_covariances(&obj, 21);
    let len = inst.dims.theta_len();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dir = DMatrix::from_fn(len, len, |_, _| rng.random_range(-1.0..1.0));
    let dir = (&dir + dir.transpose()) * 0.5;
    let h = 1e-6;
    let f = |c: &Covariances| obj.action(&st, c).unwrap().total;
    let shifted = |s: f64| {
        let mut c = cov.clone();
        c.theta += &dir * s;
        c
    };
    let fd = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
    let analytic = 0.5 * frob(&(spd_inverse(&cov.theta, "Σ").unwrap() + obj.u_bar_theta_theta(&st)), &dir);
    assert!(close(fd, analytic, 1e-6), "{fd} vs {analytic}");

    let opt = obj.optimal_covariances(&st).unwrap();
    let grad_at_opt = spd_inverse(&opt.theta, "Σ").unwrap() + obj.u_bar_theta_theta(&st);
    assert!(grad_at_opt.abs().max() < 1e-8 * obj.u_bar_theta_theta(&st).abs().max());
}

#[test]
fn internal_energy_gradients_match_finite_differences() {
    let inst = instance(30);
    let obj = inst.objective();
    let eta = obj.eta_v_at(0);
    let ie = obj.internal_energy(inst.step(0, &eta)).unwrap();
    let h = 1e-6;
    let u_at = |x: &DVector<f64>, v: &DVector<f64>| {
        obj.internal_energy(StepRef {
            y: &inst.ys[0],
            eta_v: &eta,
            x,
            v,
        })
        .unwrap()
    };
    for k in 0..obj.x_len() {
        let mut up = inst.xs[0].clone();
        up[k] += h;
        let mut dn = inst.xs[0].clone();
        dn[k] -= h;
        let (a, b) = (u_at(&up, &inst.vs[0]), u_at(&dn, &inst.vs[0]));
        assert!(close(ie.u_x[k], (a.u - b.u) / (2.0 * h), 1e-6));
        for j in 0..obj.x_len() {
            assert!(close(ie.u_xx[(j, k)], (a.u_x[j] - b.u_x[j]) / (2.0 * h), 1e-6));
        }
        for j in 0..obj.v_len() {
            assert!(close(ie.u_xv[(k, j)], (a.u_v[j] - b.u_v[j]) / (2.0 * h), 1e-6));
        }
    }
    for k in 0..obj.v_len() {
        let mut up = inst.vs[0].clone();
        up[k] += h;
        let mut dn = inst.vs[0].clone();
        dn[k] -= h;
        let (a, b) = (u_at(&inst.xs[0], &up), u_at(&inst.xs[0], &dn));
        assert!(close(ie.u_v[k], (a.u - b.u) / (2.0 * h), 1e-6));
    }
    for k in 0..inst.dims.theta_len() {
        let mut up = inst.theta.0.clone();
        up[k] += h;
        let mut dn = inst.theta.0.clone();
        dn[k] -= h;
        let uu = obj.with_theta(ThetaVec(up)).unwrap().internal_energy(inst.step(0, &eta)).unwrap();
        let ud = obj.with_theta(ThetaVec(dn)).unwrap().internal_energy(inst.step(0, &eta)).unwrap();
        assert!(close(ie.u_theta[k], (uu.u - ud.u) / (2.0 * h), 1e-6));
    }
    let lam = obj.lambda();
    for k in 0..2 {
        let mut up = lam.clone();
        up[k] += h;
        let mut dn = lam.clone();
        dn[k] -= h;
        let uu = obj.with_lambda(up[0], up[1]).unwrap().internal_energy(inst.step(0, &eta)).unwrap();
        let ud = obj.with_lambda(dn[0], dn[1]).unwrap().internal_energy(inst.step(0, &eta)).unwrap();
        assert!(close(ie.u_lambda[k], (uu.u - ud.u) / (2.0 * h), 1e-6));
    }
}

#[test]
fn internal_energy_log_det_matches_dense_precision() {
    let inst = instance(40);
    let obj = inst.objective();
    let (lz, lv, lw) = obj.noise_log_dets().unwrap();
    let dense = obj.lifted().pi.determinant().ln();
    assert!(close(lz + lv + lw, dense, 1e-9), "{} vs {dense}", lz + lv + lw);
}

#[test]
fn consistent_trajectory_has_zero_output_and_leading_state_errors() {
    let inst = instance(50);
    let obj = inst.objective();
    let m = obj.model().clone();
    let n = inst.dims.n;
    let x0 = DVector::from_vec(vec![0.4, -1.1]);
    let v = DVector::from_vec(vec![0.7, -0.3]);
    let x1 = &m.a * &x0 + &m.b * v.rows(0, 1);
    let x2 = &m.a * &x1 + &m.b * v.rows(1, 1);
    let mut xg = DVector::zeros(3 * n);
    xg.rows_mut(0, n).copy_from(&x0);
    xg.rows_mut(n, n).copy_from(&x1);
    xg.rows_mut(2 * n, n).copy_from(&x2);
    let y = obj.lifted().c.clone() * &xg;
    let e = obj
        .prediction_errors(StepRef {
            y: &y,
            eta_v: &v,
            x: &xg,
            v: &v,
        })
        .unwrap();
    assert!(e.output().amax() < 1e-14);
    assert!(e.input().amax() < 1e-14);
    assert!(e.state().rows(0, 2 * n).amax() < 1e-14);
    assert!((e.state().rows(2 * n, n) + &m.a * &x2).amax() < 1e-14);
}

#[test]
fn step_free_energy_adds_up() {
    let inst = instance(60);
    let obj = inst.objective();
    let st = inst.stats(&obj);
    let cov = obj.optimal_covariances(&st).unwrap();
    let eta = obj.eta_v_at(0);
    let ie = obj.internal_energy(inst.step(0, &eta)).unwrap();
    let fe = obj.free_energy(&ie, &cov).unwrap();
    assert!(close(fe.f, fe.u + fe.w + fe.h, 1e-14));
    let h = 0.5
        * (cov.x.determinant().ln()
            + cov.v.determinant().ln()
            + cov.theta.determinant().ln()
            + cov.lambda.determinant().ln());
    assert!(close(fe.h, h, 1e-8));
    // Σ^x̃ = (−U_x̃x̃)⁻¹ makes its trace term equal to −dim x̃.
    assert!(close(frob(&cov.x, &ie.u_xx), -(obj.x_len() as f64), 1e-9));
}

#[test]
fn indefinite_covariance_names_its_block() {
    let inst = instance(70);
    let obj = inst.objective();
    let st = inst.stats(&obj);
    let mut cov = random_covariances(&obj, 71);
    cov.theta[(0, 0)] = -1.0;
    assert_eq!(
        obj.action(&st, &cov).unwrap_err(),
        DemError::NotPositiveDefinite { block: "Σ^θ".into() }
    );
}

#[test]
fn mismatched_step_dimensions_are_rejected() {
    let inst = instance(80);
    let obj = inst.objective();
    let short = DVector::zeros(1);
    let eta = obj.eta_v_at(0);
    let res = obj.prediction_errors(StepRef {
        y: &short,
        eta_v: &eta,
        x: &inst.xs[0],
        v: &inst.vs[0],
    });
    assert!(matches!(res, Err(DemError::Parameter(_))));
}
