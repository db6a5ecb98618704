//! Expectation maximization for the discrete linear-Gaussian state-space
//! model `x_{k+1} = F x_k + G v_k + w_k`, `y_k = H x_k + z_k` with white
//! noise, used as the white-noise baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::simulate_discrete;
use crate::error::{DemError, Result};
use crate::linalg::{spd_inverse, spd_logdet, symmetrize};

/// Discrete-time model estimated by EM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmModel {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub dt: f64,
}

impl EmModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.f.nrows();
        let m = self.c.nrows();
        if !self.f.is_square()
            || self.g.nrows() != n
            || self.c.ncols() != n
            || self.q.shape() != (n, n)
            || self.r.shape() != (m, m)
            || self.x0.len() != n
            || self.p0.shape() != (n, n)
        {
            return Err(DemError::param("EM model matrices have inconsistent shapes"));
        }
        spd_logdet(&self.q, "Q")?;
        spd_logdet(&self.r, "R")?;
        spd_logdet(&self.p0, "P0")?;
        Ok(())
    }
}

/// Smoothed moments of the state sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    /// `Cov(x_{k+1}, x_k | y)` for `k = 0..T−1`.
    pub lag_cov: Vec<DMatrix<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Kalman filter followed by the Rauch–Tung–Striebel smoother. `y` is
/// `T × m`, `v` is `T × r`.
pub fn kalman_smoother(model: &EmModel, y: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Smoothed> {
    model.validate()?;
    let len = y.nrows();
    if len == 0 || v.nrows() != len {
        return Err(DemError::param("output and input series must be non-empty and equal in length"));
    }
    if y.ncols() != model.c.nrows() || v.ncols() != model.g.ncols() {
        return Err(DemError::param("series channels do not match the model"));
    }
    let n = model.f.nrows();
    let m = y.ncols();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut pred_mean = Vec::with_capacity(len);
    let mut pred_cov = Vec::with_capacity(len);
    let mut filt_mean: Vec<DVector<f64>> = Vec::with_capacity(len);
    let mut filt_cov: Vec<DMatrix<f64>> = Vec::with_capacity(len);
    let mut loglik = 0.0;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    for k in 0..len {
        let (xp, pp) = if k == 0 {
            (model.x0.clone(), model.p0.clone())
        } else {
            (
                &model.f * &filt_mean[k - 1] + &model.g * v.row(k - 1).transpose(),
                symmetrize(&(&model.f * &filt_cov[k - 1] * model.f.transpose() + &model.q)),
            )
        };
        let innov = y.row(k).transpose() - &model.c * &xp;
        let s = symmetrize(&(&model.c * &pp * model.c.transpose() + &model.r));
        let s_inv = spd_inverse(&s, "innovation covariance")
            .map_err(|_| DemError::numerical("kalman filter", format!("innovation covariance not positive definite at step {k}")))?;
        let gain = &pp * model.c.transpose() * &s_inv;
        let xf = &xp + &gain * &innov;
        let ikh = &eye - &gain * &model.c;
        let pf = symmetrize(&(&ikh * &pp * ikh.transpose() + &gain * &model.r * gain.transpose()));
        loglik -= 0.5 * (m as f64 * ln2pi + spd_logdet(&s, "innovation covariance")? + innov.dot(&(&s_inv * &innov)));
        pred_mean.push(xp);
        pred_cov.push(pp);
        filt_mean.push(xf);
        filt_cov.push(pf);
    }

    let mut mean = filt_mean.clone();
    let mut cov = filt_cov.clone();
    let mut lag_cov = vec![DMatrix::zeros(n, n); len.saturating_sub(1)];
    for k in (0..len.saturating_sub(1)).rev() {
        let pinv = spd_inverse(&pred_cov[k + 1], "predicted covariance")
            .map_err(|_| DemError::numerical("rts smoother", format!("predicted covariance singular at step {}", k + 1)))?;
        let j = &filt_cov[k] * model.f.transpose() * pinv;
        mean[k] = &filt_mean[k] + &j * (&mean[k + 1] - &pred_mean[k + 1]);
        cov[k] = symmetrize(&(&filt_cov[k] + &j * (&cov[k + 1] - &pred_cov[k + 1]) * j.transpose()));
        lag_cov[k] = &cov[k + 1] * j.transpose();
    }
    Ok(Smoothed {
        mean,
        cov,
        lag_cov,
        filtered_cov: filt_cov,
        log_likelihood: loglik,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub model: EmModel,
    pub log_likelihood: Vec<f64>,
    /// Smoothed state at the last training sample.
    pub final_state: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Deterministic starting point: `F, G` from a one-lag least-squares fit on
/// proxy states `C⁺ y` (the outputs when `C = I`), `Q = R = I`.
pub fn initial_model(
    y: &DMatrix<f64>,
    v: &DMatrix<f64>,
    n: usize,
    known_c: Option<&DMatrix<f64>>,
    dt: f64,
) -> Result<EmModel> {
    let m = y.ncols();
    let r = v.ncols();
    let len = y.nrows();
    if len < 3 {
        return Err(DemError::param("EM needs at least three samples"));
    }
    let c = match known_c {
        Some(c) => {
            if c.shape() != (m, n) {
                return Err(DemError::param("known C has the wrong shape"));
            }
            c.clone()
        }
        None => DMatrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 }),
    };
    let pinv = c
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| DemError::numerical("em init", e.to_string()))?;
    let xs = y * pinv.transpose();
    let mut szz = DMatrix::zeros(n + r, n + r);
    let mut sxz = DMatrix::zeros(n, n + r);
    for k in 0..len - 1 {
        let mut z = DVector::zeros(n + r);
        z.rows_mut(0, n).copy_from(&xs.row(k).transpose());
        z.rows_mut(n, r).copy_from(&v.row(k).transpose());
        szz += &z * z.transpose();
        sxz += xs.row(k + 1).transpose() * z.transpose();
    }
    let reg = DMatrix::identity(n + r, n + r) * (1e-9 * szz.diagonal().amax().max(1e-12));
    let fg = &sxz * spd_inverse(&(szz + reg), "initial regression")?;
    Ok(EmModel {
        f: fg.columns(0, n).into_owned(),
        g: fg.columns(n, r).into_owned(),
        c,
        q: DMatrix::identity(n, n),
        r: DMatrix::identity(m, m),
        x0: xs.row(0).transpose(),
        p0: DMatrix::identity(n, n),
        dt,
    })
}

/// Alternates smoothing and closed-form maximization until the relative
/// log-likelihood change drops below `tol` or `max_iters`.
pub fn em_identify(
    y: &DMatrix<f64>,
    v: &DMatrix<f64>,
    n: usize,
    known_c: Option<&DMatrix<f64>>,
    dt: f64,
    max_iters: usize,
    tol: f64,
) -> Result<EmResult> {
    if n == 0 {
        return Err(DemError::param("state dimension must be at least 1"));
    }
    let mut model = initial_model(y, v, n, known_c, dt)?;
    let len = y.nrows();
    let (m, r) = (y.ncols(), v.ncols());
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sm = kalman_smoother(&model, y, v)?;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        trace.push(sm.log_likelihood);

        let mut szz = DMatrix::zeros(n + r, n + r);
        let mut sxz = DMatrix::zeros(n, n + r);
        let mut sxx_next = DMatrix::zeros(n, n);
        for k in 0..len - 1 {
            let x = &sm.mean[k];
            let vk = v.row(k).transpose();
            let mut ezz = DMatrix::zeros(n + r, n + r);
            ezz.view_mut((0, 0), (n, n)).copy_from(&(&sm.cov[k] + x * x.transpose()));
            ezz.view_mut((0, n), (n, r)).copy_from(&(x * vk.transpose()));
            ezz.view_mut((n, 0), (r, n)).copy_from(&(&vk * x.transpose()));
            ezz.view_mut((n, n), (r, r)).copy_from(&(&vk * vk.transpose()));
            szz += ezz;
            let xn = &sm.mean[k + 1];
            let mut exz = DMatrix::zeros(n, n + r);
            exz.view_mut((0, 0), (n, n)).copy_from(&(&sm.lag_cov[k] + xn * x.transpose()));
            exz.view_mut((0, n), (n, r)).copy_from(&(xn * vk.transpose()));
            sxz += exz;
            sxx_next += &sm.cov[k + 1] + xn * xn.transpose();
        }
        let fg = &sxz * spd_inverse(&szz, "state regression")?;
        let q = symmetrize(&((&sxx_next - &fg * sxz.transpose()) / (len - 1) as f64));

        let mut syx = DMatrix::zeros(m, n);
        let mut sxx = DMatrix::zeros(n, n);
        let mut syy = DMatrix::zeros(m, m);
        for k in 0..len {
            let yk = y.row(k).transpose();
            syx += &yk * sm.mean[k].transpose();
            sxx += &sm.cov[k] + &sm.mean[k] * sm.mean[k].transpose();
            syy += &yk * yk.transpose();
        }
        let c = match known_c {
            Some(c) => c.clone(),
            None => &syx * spd_inverse(&sxx, "output regression")?,
        };
        let rr = symmetrize(
            &((&syy - &c * syx.transpose() - &syx * c.transpose() + &c * &sxx * c.transpose()) / len as f64),
        );

        model = EmModel {
            f: fg.columns(0, n).into_owned(),
            g: fg.columns(n, r).into_owned(),
            c,
            q,
            r: rr,
            x0: sm.mean[0].clone(),
            p0: sm.cov[0].clone(),
            dt,
        };
        sm = kalman_smoother(&model, y, v)?;
        let prev = *trace.last().expect("trace is non-empty");
        if (sm.log_likelihood - prev).abs() <= tol * prev.abs().max(1.0) {
            converged = true;
            trace.push(sm.log_likelihood);
            break;
        }
    }
    if !converged {
        trace.push(sm.log_likelihood);
    }
    let final_state = sm.mean.last().expect("series is non-empty").clone();
    Ok(EmResult {
        model,
        log_likelihood: trace,
        final_state,
        iterations,
        converged,
    })
}

/// Noise-free `steps`-ahead prediction; `inputs` starts at the last
/// training sample.
pub fn em_predict_n_step(
    model: &EmModel,
    x0: &DVector<f64>,
    inputs: &DMatrix<f64>,
    steps: usize,
) -> Result<DMatrix<f64>> {
    simulate_discrete(&model.f, &model.g, None, &model.c, x0, inputs, steps)
}
