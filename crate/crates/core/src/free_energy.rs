//! Free energy of the linear generative model in generalized coordinates.
//!
//! Two evaluation routes are provided. Per-step quantities (`U`, `F` and
//! their derivatives at one time step) use the dense lifted matrices and the
//! explicit parameter Jacobian. The free energy action over a trajectory uses
//! [`TrajectoryStats`], precision-weighted second moments of the generalized
//! trajectory; because the model is linear in θ every quadratic term of the
//! action is a trace against those moments, and the mean-field terms reduce to
//! the same traces against the posterior covariances.

use nalgebra::{DMatrix, DVector};

use crate::error::{DemError, Result};
use crate::gencoord::{kron_lift, shift_operator};
use crate::linalg::{frob, kron, spd_inverse, spd_logdet};
use crate::model::{devectorize_params, LtiModel, ModelDims, Priors, ThetaVec};
use crate::noise::{smoothness_precision, HyperParams, TemporalPrecision};

/// Lifted system matrices and generalized precisions for one `(θ, λ)`.
#[derive(Debug, Clone)]
pub struct Lifted {
    /// Derivative (shift) operators for states and inputs.
    pub dx: DMatrix<f64>,
    pub dv: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// `(p+1)n × (d+1)r`; `B` on the first `d+1` diagonal blocks.
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub pi_z: DMatrix<f64>,
    pub p_v: DMatrix<f64>,
    pub pi_w: DMatrix<f64>,
    /// `∂ε̃/∂x̃` and `∂ε̃/∂ṽ`.
    pub e_x: DMatrix<f64>,
    pub e_v: DMatrix<f64>,
    /// `diag(Π̃^z, P̃^v, Π̃^w)`.
    pub pi: DMatrix<f64>,
    pub u_xx: DMatrix<f64>,
    pub u_vv: DMatrix<f64>,
    pub u_xv: DMatrix<f64>,
}

/// Stacked prediction errors `ε̃ = [ỹ − C̃x̃; ṽ − η̃^v; D^x x̃ − Ãx̃ − B̃ṽ]`,
/// `ε^θ = θ − η^θ` and `ε^λ = λ − η^λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionErrors {
    pub eps_tilde: DVector<f64>,
    pub eps_theta: DVector<f64>,
    pub eps_lambda: DVector<f64>,
    y_len: usize,
    v_len: usize,
}

impl PredictionErrors {
    pub fn output(&self) -> DVector<f64> {
        self.eps_tilde.rows(0, self.y_len).into_owned()
    }

    pub fn input(&self) -> DVector<f64> {
        self.eps_tilde.rows(self.y_len, self.v_len).into_owned()
    }

    pub fn state(&self) -> DVector<f64> {
        let off = self.y_len + self.v_len;
        self.eps_tilde.rows(off, self.eps_tilde.len() - off).into_owned()
    }
}

/// One time step of a generalized trajectory together with its data.
#[derive(Debug, Clone, Copy)]
pub struct StepRef<'s> {
    pub y: &'s DVector<f64>,
    pub eta_v: &'s DVector<f64>,
    pub x: &'s DVector<f64>,
    pub v: &'s DVector<f64>,
}

/// Internal energy at one time step and its first two derivatives.
#[derive(Debug, Clone)]
pub struct InternalEnergy {
    pub u: f64,
    pub u_x: DVector<f64>,
    pub u_v: DVector<f64>,
    pub u_xx: DMatrix<f64>,
    pub u_vv: DMatrix<f64>,
    pub u_xv: DMatrix<f64>,
    pub u_theta: DVector<f64>,
    pub u_theta_theta: DMatrix<f64>,
    pub u_lambda: DVector<f64>,
    pub u_lambda_lambda: DMatrix<f64>,
}

/// Posterior covariances of the four mean-field factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariances {
    pub x: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

/// `F = U + W + H` at one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeEnergyBreakdown {
    pub u: f64,
    pub w: f64,
    pub h: f64,
    pub f: f64,
}

/// Term-by-term free energy action.
///
/// For the fixed-covariance action the `mean_field` entry is
/// `½ (Σ_t W^x̃ + Σ_t W^ṽ + W^θ + W^λ)`. At optimal precision every mean-field
/// trace equals minus the factor dimension, so the entry becomes the constant
/// `−½ (n_t·dim X + dim θ + dim λ)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActionBreakdown {
    pub noise_entropy: f64,
    pub state_input_entropy: f64,
    pub param_entropy: f64,
    pub hyper_entropy: f64,
    pub output_error: f64,
    pub input_error: f64,
    pub state_error: f64,
    pub param_error: f64,
    pub hyper_error: f64,
    pub mean_field: f64,
    pub total: f64,
}

impl ActionBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.noise_entropy
            + self.state_input_entropy
            + self.param_entropy
            + self.hyper_entropy
            + self.output_error
            + self.input_error
            + self.state_error
            + self.param_error
            + self.hyper_error
            + self.mean_field;
        self
    }
}

/// Precision-weighted second moments of a generalized trajectory.
///
/// With `X_t` the `(p+1) × n` matrix of state derivative blocks (row `k` is
/// `x^{(k)}`), `Y_t` the output blocks, `Z_t` rows `[x^{(k)}, v^{(k)}]` and
/// `U_t` the shifted state rows `x^{(k+1)}` (zero in the last row):
/// `sxx = Σ_t X_tᵀ S X_t` and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStats {
    pub n_t: usize,
    pub syy: DMatrix<f64>,
    pub sxy: DMatrix<f64>,
    pub sxx: DMatrix<f64>,
    pub suu: DMatrix<f64>,
    pub szu: DMatrix<f64>,
    pub szz: DMatrix<f64>,
    /// `Σ_t (ṽ − η̃^v)ᵀ P̃^v (ṽ − η̃^v)`.
    pub q_v: f64,
}

/// The same moments for the posterior covariances (one time step).
#[derive(Debug, Clone, PartialEq)]
pub struct CovMoments {
    pub kxx: DMatrix<f64>,
    pub kuu: DMatrix<f64>,
    pub kzu: DMatrix<f64>,
    pub kzz: DMatrix<f64>,
    /// `tr(P̃^v Σ^ṽ)`.
    pub k_v: f64,
}

/// Evaluates free-energy terms for fixed parameters and hyperparameters.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    dims: ModelDims,
    p: usize,
    d: usize,
    s_p: TemporalPrecision,
    s_d: TemporalPrecision,
    theta: ThetaVec,
    model: LtiModel,
    hyper: HyperParams,
    priors: &'a Priors,
    lifted: Lifted,
}

impl<'a> Objective<'a> {
    pub fn new(
        theta: ThetaVec,
        dims: ModelDims,
        hyper: HyperParams,
        priors: &'a Priors,
        p: usize,
        d: usize,
        sigma: f64,
    ) -> Result<Self> {
        if d > p {
            return Err(DemError::param(format!("d={d} exceeds p={p}")));
        }
        priors.validate(dims)?;
        if hyper.omega_z.nrows() != dims.m || hyper.omega_w.nrows() != dims.n {
            return Err(DemError::param("noise correlation matrices do not match model"));
        }
        let model = devectorize_params(&theta, dims)?;
        let s_p = smoothness_precision(sigma, p)?;
        let s_d = smoothness_precision(sigma, d)?;
        let lifted = lift(&model, &hyper, &s_p, &s_d, &priors.p_v, p, d)?;
        Ok(Objective {
            dims,
            p,
            d,
            s_p,
            s_d,
            theta,
            model,
            hyper,
            priors,
            lifted,
        })
    }

    pub fn with_theta(&self, theta: ThetaVec) -> Result<Self> {
        Objective::new(theta, self.dims, self.hyper.clone(), self.priors, self.p, self.d, self.s_p.sigma())
    }

    pub fn with_lambda(&self, lambda_z: f64, lambda_w: f64) -> Result<Self> {
        let mut hyper = self.hyper.clone();
        hyper.lambda_z = lambda_z;
        hyper.lambda_w = lambda_w;
        Objective::new(self.theta.clone(), self.dims, hyper, self.priors, self.p, self.d, self.s_p.sigma())
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn orders(&self) -> (usize, usize) {
        (self.p, self.d)
    }

    pub fn sigma(&self) -> f64 {
        self.s_p.sigma()
    }

    pub fn theta(&self) -> &ThetaVec {
        &self.theta
    }

    pub fn model(&self) -> &LtiModel {
        &self.model
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn lambda(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.hyper.lambda_z, self.hyper.lambda_w])
    }

    pub fn priors(&self) -> &Priors {
        self.priors
    }

    pub fn lifted(&self) -> &Lifted {
        &self.lifted
    }

    pub fn temporal_precision(&self) -> &TemporalPrecision {
        &self.s_p
    }

    pub fn x_len(&self) -> usize {
        (self.p + 1) * self.dims.n
    }

    pub fn v_len(&self) -> usize {
        (self.d + 1) * self.dims.r
    }

    pub fn y_len(&self) -> usize {
        (self.p + 1) * self.dims.m
    }

    /// Prior mean of the generalized input at step `t`.
    pub fn eta_v_at(&self, t: usize) -> DVector<f64> {
        self.priors.eta_v_at(t, self.dims.r, self.d)
    }

    fn eps_theta(&self) -> DVector<f64> {
        &self.theta.0 - &self.priors.eta_theta.0
    }

    fn eps_lambda(&self) -> DVector<f64> {
        self.lambda() - &self.priors.eta_lambda
    }

    fn check_step(&self, s: &StepRef<'_>) -> Result<()> {
        if s.y.len() != self.y_len()
            || s.x.len() != self.x_len()
            || s.v.len() != self.v_len()
            || s.eta_v.len() != self.v_len()
        {
            return Err(DemError::param(format!(
                "step dimensions (y {}, x {}, v {}, eta_v {}) do not match (y {}, x {}, v {})",
                s.y.len(),
                s.x.len(),
                s.v.len(),
                s.eta_v.len(),
                self.y_len(),
                self.x_len(),
                self.v_len()
            )));
        }
        Ok(())
    }

    pub fn prediction_errors(&self, s: StepRef<'_>) -> Result<PredictionErrors> {
        self.check_step(&s)?;
        let l = &self.lifted;
        let ey = s.y - &l.c * s.x;
        let ev = s.v - s.eta_v;
        let ew = (&l.dx - &l.a) * s.x - &l.b * s.v;
        let mut eps = DVector::zeros(ey.len() + ev.len() + ew.len());
        eps.rows_mut(0, ey.len()).copy_from(&ey);
        eps.rows_mut(ey.len(), ev.len()).copy_from(&ev);
        eps.rows_mut(ey.len() + ev.len(), ew.len()).copy_from(&ew);
        Ok(PredictionErrors {
            eps_tilde: eps,
            eps_theta: self.eps_theta(),
            eps_lambda: self.eps_lambda(),
            y_len: ey.len(),
            v_len: ev.len(),
        })
    }

    /// `ln |Π̃^z|`, `ln |P̃^v|`, `ln |Π̃^w|`.
    pub fn noise_log_dets(&self) -> Result<(f64, f64, f64)> {
        let (n, r, m) = (self.dims.n as f64, self.dims.r as f64, self.dims.m as f64);
        let p1 = (self.p + 1) as f64;
        let d1 = (self.d + 1) as f64;
        let lz = m * self.s_p.log_det()
            + p1 * (m * self.hyper.lambda_z + spd_logdet(&self.hyper.omega_z, "Ω^z")?);
        let lv = r * self.s_d.log_det() + d1 * spd_logdet(&self.priors.p_v, "P^v")?;
        let lw = n * self.s_p.log_det()
            + p1 * (n * self.hyper.lambda_w + spd_logdet(&self.hyper.omega_w, "Ω^w")?);
        Ok((lz, lv, lw))
    }

    fn prior_log_dets(&self) -> Result<(f64, f64)> {
        Ok((
            spd_logdet(&self.priors.p_theta, "P^θ")?,
            spd_logdet(&self.priors.p_lambda, "P^λ")?,
        ))
    }

    /// `∂ε̃/∂θ` at one step (depends on the generalized state and input).
    pub fn theta_jacobian(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let ModelDims { n, r, m } = self.dims;
        let (p, d) = (self.p, self.d);
        let y_len = self.y_len();
        let w_off = y_len + self.v_len();
        let mut j = DMatrix::zeros(w_off + self.x_len(), self.dims.theta_len());
        for k in 0..=p {
            for i in 0..n {
                for c in 0..n {
                    j[(w_off + k * n + i, self.dims.ab_index(i, c))] = -x[k * n + c];
                }
                if k <= d {
                    for c in 0..r {
                        j[(w_off + k * n + i, self.dims.ab_index(i, n + c))] = -v[k * r + c];
                    }
                }
            }
            for i in 0..m {
                for c in 0..n {
                    j[(k * m + i, self.dims.c_index(i, c))] = -x[k * n + c];
                }
            }
        }
        j
    }

    /// `U` at one step with its derivatives, including the parameter and
    /// hyperparameter prior terms.
    pub fn internal_energy(&self, s: StepRef<'_>) -> Result<InternalEnergy> {
        let errs = self.prediction_errors(s)?;
        let l = &self.lifted;
        let (lz, lv, lw) = self.noise_log_dets()?;
        let (lpt, lpl) = self.prior_log_dets()?;
        let pi_eps = &l.pi * &errs.eps_tilde;
        let quad = errs.eps_tilde.dot(&pi_eps);
        let et = &errs.eps_theta;
        let el = &errs.eps_lambda;
        let p_et = &self.priors.p_theta * et;
        let p_el = &self.priors.p_lambda * el;
        let u = -0.5 * quad - 0.5 * et.dot(&p_et) - 0.5 * el.dot(&p_el)
            + 0.5 * (lz + lv + lw)
            + 0.5 * lpt
            + 0.5 * lpl;

        let jt = self.theta_jacobian(s.x, s.v);
        let u_theta = -(jt.transpose() * &pi_eps) - p_et;
        let u_theta_theta = -(jt.transpose() * &l.pi * &jt) - &self.priors.p_theta;

        let ey = errs.output();
        let ew = errs.state();
        let q_z = ey.dot(&(&l.pi_z * &ey));
        let q_w = ew.dot(&(&l.pi_w * &ew));
        let p1 = (self.p + 1) as f64;
        let mut u_lambda = DVector::from_vec(vec![
            -0.5 * q_z + 0.5 * p1 * self.dims.m as f64,
            -0.5 * q_w + 0.5 * p1 * self.dims.n as f64,
        ]);
        u_lambda -= &p_el;
        let mut u_lambda_lambda = -self.priors.p_lambda.clone();
        u_lambda_lambda[(0, 0)] -= 0.5 * q_z;
        u_lambda_lambda[(1, 1)] -= 0.5 * q_w;

        Ok(InternalEnergy {
            u,
            u_x: -(l.e_x.transpose() * &pi_eps),
            u_v: -(l.e_v.transpose() * &pi_eps),
            u_xx: l.u_xx.clone(),
            u_vv: l.u_vv.clone(),
            u_xv: l.u_xv.clone(),
            u_theta,
            u_theta_theta,
            u_lambda,
            u_lambda_lambda,
        })
    }

    /// `F = U + W + H` with `W = tr(Σ^x̃ U_x̃x̃ + Σ^ṽ U_ṽṽ + Σ^θ U_θθ + Σ^λ U_λλ)`
    /// and `H = ½ Σ ln |Σ|`.
    pub fn free_energy(&self, ie: &InternalEnergy, cov: &Covariances) -> Result<FreeEnergyBreakdown> {
        let w = frob(&cov.x, &ie.u_xx)
            + frob(&cov.v, &ie.u_vv)
            + frob(&cov.theta, &ie.u_theta_theta)
            + frob(&cov.lambda, &ie.u_lambda_lambda);
        let h = 0.5
            * (spd_logdet(&cov.x, "Σ^x")?
                + spd_logdet(&cov.v, "Σ^v")?
                + spd_logdet(&cov.theta, "Σ^θ")?
                + spd_logdet(&cov.lambda, "Σ^λ")?);
        Ok(FreeEnergyBreakdown {
            u: ie.u,
            w,
            h,
            f: ie.u + w + h,
        })
    }

    /// Accumulates [`TrajectoryStats`] over a trajectory. `ys` and `xs`/`vs`
    /// are generalized outputs and posterior means per time step.
    pub fn stats(
        &self,
        ys: &[DVector<f64>],
        xs: &[DVector<f64>],
        vs: &[DVector<f64>],
    ) -> Result<TrajectoryStats> {
        if ys.is_empty() {
            return Err(DemError::param("empty trajectory"));
        }
        if xs.len() != ys.len() || vs.len() != ys.len() {
            return Err(DemError::param("trajectory lengths differ"));
        }
        let ModelDims { n, r, m } = self.dims;
        let p1 = self.p + 1;
        let s = self.s_p.matrix();
        let mut st = TrajectoryStats {
            n_t: ys.len(),
            syy: DMatrix::zeros(m, m),
            sxy: DMatrix::zeros(n, m),
            sxx: DMatrix::zeros(n, n),
            suu: DMatrix::zeros(n, n),
            szu: DMatrix::zeros(n + r, n),
            szz: DMatrix::zeros(n + r, n + r),
            q_v: 0.0,
        };
        let mut ym = DMatrix::zeros(p1, m);
        let mut xm = DMatrix::zeros(p1, n);
        let mut zm = DMatrix::zeros(p1, n + r);
        let mut um = DMatrix::zeros(p1, n);
        for t in 0..ys.len() {
            let eta = self.eta_v_at(t);
            self.check_step(&StepRef {
                y: &ys[t],
                eta_v: &eta,
                x: &xs[t],
                v: &vs[t],
            })?;
            zm.fill(0.0);
            um.fill(0.0);
            for k in 0..p1 {
                for i in 0..m {
                    ym[(k, i)] = ys[t][k * m + i];
                }
                for i in 0..n {
                    xm[(k, i)] = xs[t][k * n + i];
                    zm[(k, i)] = xs[t][k * n + i];
                    if k > 0 {
                        um[(k - 1, i)] = xs[t][k * n + i];
                    }
                }
                if k <= self.d {
                    for i in 0..r {
                        zm[(k, n + i)] = vs[t][k * r + i];
                    }
                }
            }
            let sx = s * &xm;
            let sz = s * &zm;
            st.syy += ym.transpose() * (s * &ym);
            st.sxy += xm.transpose() * (s * &ym);
            st.sxx += xm.transpose() * &sx;
            st.suu += um.transpose() * (s * &um);
            st.szu += zm.transpose() * (s * &um);
            st.szz += zm.transpose() * &sz;
            let ev = &vs[t] - &eta;
            st.q_v += ev.dot(&(&self.lifted.p_v * &ev));
        }
        Ok(st)
    }

    /// Covariance moments from `Σ^x̃` and `Σ^ṽ`.
    pub fn cov_moments(&self, sigma_x: &DMatrix<f64>, sigma_v: &DMatrix<f64>) -> Result<CovMoments> {
        let ModelDims { n, r, .. } = self.dims;
        if sigma_x.shape() != (self.x_len(), self.x_len()) || sigma_v.shape() != (self.v_len(), self.v_len()) {
            return Err(DemError::param("covariance dimensions do not match the generalized state"));
        }
        let s = self.s_p.matrix();
        let p = self.p;
        let blk = |m: &DMatrix<f64>, k: usize, l: usize, sz: usize| m.view((k * sz, l * sz), (sz, sz)).into_owned();
        let mut kxx = DMatrix::zeros(n, n);
        let mut kuu = DMatrix::zeros(n, n);
        let mut kzu = DMatrix::zeros(n + r, n);
        let mut kzz = DMatrix::zeros(n + r, n + r);
        for k in 0..=p {
            for l in 0..=p {
                let w = s[(k, l)];
                if w == 0.0 {
                    continue;
                }
                kxx += blk(sigma_x, k, l, n) * w;
                if k < p && l < p {
                    kuu += blk(sigma_x, k + 1, l + 1, n) * w;
                }
                if l < p {
                    let c = blk(sigma_x, k, l + 1, n) * w;
                    let mut v = kzu.view_mut((0, 0), (n, n));
                    v += c;
                }
                if k <= self.d && l <= self.d {
                    let c = blk(sigma_v, k, l, r) * w;
                    let mut v = kzz.view_mut((n, n), (r, r));
                    v += c;
                }
            }
        }
        kzz.view_mut((0, 0), (n, n)).copy_from(&kxx);
        Ok(CovMoments {
            kxx,
            kuu,
            kzu,
            kzz,
            k_v: frob(&self.lifted.p_v, sigma_v),
        })
    }

    fn theta_block(&self) -> DMatrix<f64> {
        let n = self.dims.n;
        let mut t = DMatrix::zeros(n, n + self.dims.r);
        t.view_mut((0, 0), (n, n)).copy_from(&self.model.a);
        t.view_mut((0, n), (n, self.dims.r)).copy_from(&self.model.b);
        t
    }

    /// `Σ_t ε_yᵀ (S ⊗ Ω^z) ε_y` from moments (without `e^{λ^z}`).
    fn q_z(&self, syy: &DMatrix<f64>, sxy: &DMatrix<f64>, sxx: &DMatrix<f64>) -> f64 {
        let c = &self.model.c;
        let om = &self.hyper.omega_z;
        frob(om, syy) - 2.0 * (om * c * sxy).trace() + (om * c * sxx * c.transpose()).trace()
    }

    /// `Σ_t ε_wᵀ (S ⊗ Ω^w) ε_w` from moments (without `e^{λ^w}`).
    fn q_w(&self, suu: &DMatrix<f64>, szu: &DMatrix<f64>, szz: &DMatrix<f64>) -> f64 {
        let th = self.theta_block();
        let om = &self.hyper.omega_w;
        frob(om, suu) - 2.0 * (om * &th * szu).trace() + (om * &th * szz * th.transpose()).trace()
    }

    /// Hessian of the time-summed internal energy with respect to θ.
    pub fn u_bar_theta_theta(&self, st: &TrajectoryStats) -> DMatrix<f64> {
        -(self.theta_curvature(&st.sxx, &st.szz, 1.0, 1.0)) - &self.priors.p_theta
    }

    /// `e^{λ^z} Ω^z ⊗ sxx` on the C block plus `e^{λ^w} Ω^w ⊗ szz` on the
    /// `[A B]` block, in θ layout, scaled by `cz` and `cw`.
    fn theta_curvature(&self, sxx: &DMatrix<f64>, szz: &DMatrix<f64>, cz: f64, cw: f64) -> DMatrix<f64> {
        let ModelDims { n, r, m } = self.dims;
        let ez = cz * self.hyper.lambda_z.exp();
        let ew = cw * self.hyper.lambda_w.exp();
        let mut h = DMatrix::zeros(self.dims.theta_len(), self.dims.theta_len());
        let (oz, ow) = (&self.hyper.omega_z, &self.hyper.omega_w);
        for i in 0..m {
            for i2 in 0..m {
                if oz[(i, i2)] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    for j2 in 0..n {
                        h[(self.dims.c_index(i, j), self.dims.c_index(i2, j2))] = ez * oz[(i, i2)] * sxx[(j, j2)];
                    }
                }
            }
        }
        for i in 0..n {
            for i2 in 0..n {
                if ow[(i, i2)] == 0.0 {
                    continue;
                }
                for j in 0..n + r {
                    for j2 in 0..n + r {
                        h[(self.dims.ab_index(i, j), self.dims.ab_index(i2, j2))] = ew * ow[(i, i2)] * szz[(j, j2)];
                    }
                }
            }
        }
        h
    }

    /// Hessian of the time-summed internal energy with respect to λ.
    pub fn u_bar_lambda_lambda(&self, st: &TrajectoryStats) -> DMatrix<f64> {
        let qz = self.q_z(&st.syy, &st.sxy, &st.sxx);
        let qw = self.q_w(&st.suu, &st.szu, &st.szz);
        let mut h = -self.priors.p_lambda.clone();
        h[(0, 0)] -= 0.5 * self.hyper.lambda_z.exp() * qz;
        h[(1, 1)] -= 0.5 * self.hyper.lambda_w.exp() * qw;
        h
    }

    /// Optimal covariances: the inverse negative curvature of each factor.
    pub fn optimal_covariances(&self, st: &TrajectoryStats) -> Result<Covariances> {
        let precisions = self.optimal_precisions(st)?;
        Ok(Covariances {
            x: spd_inverse(&precisions.x, "Π^x")?,
            v: spd_inverse(&precisions.v, "Π^v")?,
            theta: spd_inverse(&precisions.theta, "Π^θ")?,
            lambda: spd_inverse(&precisions.lambda, "Π^λ")?,
        })
    }

    /// `Π^x̃ = −U_x̃x̃`, `Π^ṽ = −U_ṽṽ`, `Π^θ = −Ū_θθ`, `Π^λ = −Ū_λλ`, each
    /// checked for definiteness.
    pub fn optimal_precisions(&self, st: &TrajectoryStats) -> Result<Covariances> {
        let check = |m: DMatrix<f64>, name: &str| -> Result<DMatrix<f64>> {
            spd_logdet(&m, name)?;
            Ok(m)
        };
        Ok(Covariances {
            x: check(-self.lifted.u_xx.clone(), "Π^x")?,
            v: check(-self.lifted.u_vv.clone(), "Π^v")?,
            theta: check(-self.u_bar_theta_theta(st), "Π^θ")?,
            lambda: check(-self.u_bar_lambda_lambda(st), "Π^λ")?,
        })
    }

    fn common_terms(&self, st: &TrajectoryStats) -> Result<ActionBreakdown> {
        let nt = st.n_t as f64;
        let (lz, lv, lw) = self.noise_log_dets()?;
        let (lpt, lpl) = self.prior_log_dets()?;
        let et = self.eps_theta();
        let el = self.eps_lambda();
        Ok(ActionBreakdown {
            noise_entropy: 0.5 * nt * (lz + lv + lw),
            state_input_entropy: 0.0,
            param_entropy: 0.5 * lpt,
            hyper_entropy: 0.5 * lpl,
            output_error: -0.5 * self.hyper.lambda_z.exp() * self.q_z(&st.syy, &st.sxy, &st.sxx),
            input_error: -0.5 * st.q_v,
            state_error: -0.5 * self.hyper.lambda_w.exp() * self.q_w(&st.suu, &st.szu, &st.szz),
            param_error: -0.5 * et.dot(&(&self.priors.p_theta * &et)),
            hyper_error: -0.5 * el.dot(&(&self.priors.p_lambda * &el)),
            mean_field: 0.0,
            total: 0.0,
        })
    }

    /// Per-step `tr(Σ^x̃ U_x̃x̃) + tr(Σ^ṽ U_ṽṽ)` from covariance moments.
    fn state_mean_field(&self, k: &CovMoments) -> f64 {
        let c = &self.model.c;
        let th = self.theta_block();
        let (oz, ow) = (&self.hyper.omega_z, &self.hyper.omega_w);
        let wz = (oz * c * &k.kxx * c.transpose()).trace();
        let ww = frob(ow, &k.kuu) - 2.0 * (ow * &th * &k.kzu).trace() + (ow * &th * &k.kzz * th.transpose()).trace();
        -(self.hyper.lambda_z.exp() * wz + k.k_v + self.hyper.lambda_w.exp() * ww)
    }

    /// Free energy action at fixed posterior covariances.
    pub fn action(&self, st: &TrajectoryStats, cov: &Covariances) -> Result<ActionBreakdown> {
        let nt = st.n_t as f64;
        let mut out = self.common_terms(st)?;
        let k = self.cov_moments(&cov.x, &cov.v)?;
        let w_state = self.state_mean_field(&k);
        let w_theta = frob(&cov.theta, &self.u_bar_theta_theta(st));
        let w_lambda = frob(&cov.lambda, &self.u_bar_lambda_lambda(st));
        out.mean_field = 0.5 * (nt * w_state + w_theta + w_lambda);
        out.state_input_entropy = 0.5 * nt * (spd_logdet(&cov.x, "Σ^x")? + spd_logdet(&cov.v, "Σ^v")?);
        out.param_entropy += 0.5 * spd_logdet(&cov.theta, "Σ^θ")?;
        out.hyper_entropy += 0.5 * spd_logdet(&cov.lambda, "Σ^λ")?;
        Ok(out.finish())
    }

    /// Free energy action at optimal precision. Fails with the name of the
    /// offending block when a curvature is not negative definite.
    pub fn action_optimal(&self, st: &TrajectoryStats) -> Result<ActionBreakdown> {
        let nt = st.n_t as f64;
        let pr = self.optimal_precisions(st)?;
        let mut out = self.common_terms(st)?;
        out.state_input_entropy = -0.5 * nt * (spd_logdet(&pr.x, "Π^x")? + spd_logdet(&pr.v, "Π^v")?);
        out.param_entropy -= 0.5 * spd_logdet(&pr.theta, "Π^θ")?;
        out.hyper_entropy -= 0.5 * spd_logdet(&pr.lambda, "Π^λ")?;
        let dim_x = (self.x_len() + self.v_len()) as f64;
        out.mean_field = -0.5 * (nt * dim_x + self.dims.theta_len() as f64 + 2.0);
        Ok(out.finish())
    }

    /// Gradient and Hessian of [`Objective::action`] with respect to θ,
    /// covariances held fixed. The action is quadratic in θ, so the Hessian is
    /// exact everywhere.
    pub fn action_theta_derivatives(
        &self,
        st: &TrajectoryStats,
        cov: &Covariances,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let ModelDims { n, r, m } = self.dims;
        let nt = st.n_t as f64;
        let k = self.cov_moments(&cov.x, &cov.v)?;
        // W^λ contributes −¼ Σ^λ_zz e^{λ^z} Q_z (and likewise for w), so the
        // mean moments are reweighted before the covariance moments are added.
        let gz = 1.0 + 0.5 * cov.lambda[(0, 0)];
        let gw = 1.0 + 0.5 * cov.lambda[(1, 1)];
        let sxx_e = &st.sxx * gz + &k.kxx * nt;
        let sxy_e = &st.sxy * gz;
        let szz_e = &st.szz * gw + &k.kzz * nt;
        let szu_e = &st.szu * gw + &k.kzu * nt;

        let ez = self.hyper.lambda_z.exp();
        let ew = self.hyper.lambda_w.exp();
        let c = &self.model.c;
        let th = self.theta_block();
        let grad_c = (&self.hyper.omega_z * (sxy_e.transpose() - c * &sxx_e)) * ez;
        let grad_ab = (&self.hyper.omega_w * (szu_e.transpose() - &th * &szz_e)) * ew;

        let mut grad = DVector::zeros(self.dims.theta_len());
        for i in 0..n {
            for j in 0..n + r {
                grad[self.dims.ab_index(i, j)] = grad_ab[(i, j)];
            }
        }
        for i in 0..m {
            for j in 0..n {
                grad[self.dims.c_index(i, j)] = grad_c[(i, j)];
            }
        }
        grad -= &self.priors.p_theta * self.eps_theta();
        let hess = -self.theta_curvature(&sxx_e, &szz_e, 1.0, 1.0) - &self.priors.p_theta;
        Ok((grad, hess))
    }

    /// Gradient and Hessian of [`Objective::action`] with respect to
    /// `λ = (λ^z, λ^w)`, covariances held fixed.
    pub fn action_lambda_derivatives(
        &self,
        st: &TrajectoryStats,
        cov: &Covariances,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let nt = st.n_t as f64;
        let k = self.cov_moments(&cov.x, &cov.v)?;
        let qz = self.q_z(&st.syy, &st.sxy, &st.sxx);
        let qw = self.q_w(&st.suu, &st.szu, &st.szz);
        let c = &self.model.c;
        let th = self.theta_block();
        let (oz, ow) = (&self.hyper.omega_z, &self.hyper.omega_w);
        let wz = (oz * c * &k.kxx * c.transpose()).trace();
        let ww = frob(ow, &k.kuu) - 2.0 * (ow * &th * &k.kzu).trace() + (ow * &th * &k.kzz * th.transpose()).trace();
        let hz = self.theta_curvature(&st.sxx, &st.szz, 1.0, 0.0) / self.hyper.lambda_z.exp();
        let hw = self.theta_curvature(&st.sxx, &st.szz, 0.0, 1.0) / self.hyper.lambda_w.exp();
        // F̄(λ) = −a_z e^{λ^z} − a_w e^{λ^w} + b·λ − ½ ε^λᵀ P^λ ε^λ + const.
        let a_z = 0.5 * (qz + nt * wz) + 0.5 * frob(&cov.theta, &hz) + 0.25 * cov.lambda[(0, 0)] * qz;
        let a_w = 0.5 * (qw + nt * ww) + 0.5 * frob(&cov.theta, &hw) + 0.25 * cov.lambda[(1, 1)] * qw;
        let p1 = (self.p + 1) as f64;
        let b_z = 0.5 * nt * p1 * self.dims.m as f64;
        let b_w = 0.5 * nt * p1 * self.dims.n as f64;
        let ez = self.hyper.lambda_z.exp();
        let ew = self.hyper.lambda_w.exp();
        let mut grad = DVector::from_vec(vec![-a_z * ez + b_z, -a_w * ew + b_w]);
        grad -= &self.priors.p_lambda * self.eps_lambda();
        let mut hess = -self.priors.p_lambda.clone();
        hess[(0, 0)] -= a_z * ez;
        hess[(1, 1)] -= a_w * ew;
        Ok((grad, hess))
    }
}

fn lift(
    model: &LtiModel,
    hyper: &HyperParams,
    s_p: &TemporalPrecision,
    s_d: &TemporalPrecision,
    p_v: &DMatrix<f64>,
    p: usize,
    d: usize,
) -> Result<Lifted> {
    let ModelDims { n, r, m } = model.dims();
    let dx = shift_operator(n, p);
    let dv = shift_operator(r, d);
    let a = kron_lift(&model.a, p);
    let c = kron_lift(&model.c, p);
    let mut b = DMatrix::zeros((p + 1) * n, (d + 1) * r);
    for k in 0..=d {
        b.view_mut((k * n, k * r), (n, r)).copy_from(&model.b);
    }
    let pi_z = kron(s_p.matrix(), &hyper.pi_z());
    let pi_w = kron(s_p.matrix(), &hyper.pi_w());
    let p_v = kron(s_d.matrix(), p_v);
    let (ly, lv, lw) = ((p + 1) * m, (d + 1) * r, (p + 1) * n);
    let mut e_x = DMatrix::zeros(ly + lv + lw, lw);
    e_x.view_mut((0, 0), (ly, lw)).copy_from(&(-&c));
    e_x.view_mut((ly + lv, 0), (lw, lw)).copy_from(&(&dx - &a));
    let mut e_v = DMatrix::zeros(ly + lv + lw, lv);
    e_v.view_mut((ly, 0), (lv, lv)).fill_with_identity();
    e_v.view_mut((ly + lv, 0), (lw, lv)).copy_from(&(-&b));
    let mut pi = DMatrix::zeros(ly + lv + lw, ly + lv + lw);
    pi.view_mut((0, 0), (ly, ly)).copy_from(&pi_z);
    pi.view_mut((ly, ly), (lv, lv)).copy_from(&p_v);
    pi.view_mut((ly + lv, ly + lv), (lw, lw)).copy_from(&pi_w);
    let pe_x = &pi * &e_x;
    let pe_v = &pi * &e_v;
    let u_xx = crate::linalg::symmetrize(&-(e_x.transpose() * &pe_x));
    let u_vv = crate::linalg::symmetrize(&-(e_v.transpose() * &pe_v));
    let u_xv = -(e_x.transpose() * &pe_v);
    Ok(Lifted {
        dx,
        dv,
        a,
        b,
        c,
        pi_z,
        p_v,
        pi_w,
        e_x,
        e_v,
        pi,
        u_xx,
        u_vv,
        u_xv,
    })
}

/// Free-function form of [`Objective::prediction_errors`].
#[allow(clippy::too_many_arguments)]
pub fn prediction_errors(
    y_gen: &DVector<f64>,
    x_gen: &DVector<f64>,
    v_gen: &DVector<f64>,
    eta_v: &DVector<f64>,
    theta: &ThetaVec,
    dims: ModelDims,
    hyper: &HyperParams,
    priors: &Priors,
    p: usize,
    d: usize,
    sigma: f64,
) -> Result<PredictionErrors> {
    let obj = Objective::new(theta.clone(), dims, hyper.clone(), priors, p, d, sigma)?;
    obj.prediction_errors(StepRef {
        y: y_gen,
        eta_v,
        x: x_gen,
        v: v_gen,
    })
}
