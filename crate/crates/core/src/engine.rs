//! The D/E/M loop: state and input estimation by a generalized gradient flow,
//! hyperparameter and parameter updates by curvature-scaled ascent on the
//! free energy action.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DemError, Result};
use crate::free_energy::{Covariances, Objective, TrajectoryStats};
use crate::gencoord::TaylorEmbedder;
use crate::linalg::{expm_with_integral, foh, spd_solve, symmetrize};
use crate::model::{devectorize_params, DemConfig, LtiModel, ModelDims, Priors, ThetaVec};
use crate::noise::HyperParams;

const DIVERGENCE_NORM: f64 = 1e8;
const M_STEP_TOL: f64 = 1e-9;
const MIN_STEP_SCALE: f64 = 1.0 / 1024.0;

/// Posterior means of the generalized states and inputs per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

/// Why the parameter loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    /// Rejected updates shrank the step below the minimum scale.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemResult {
    pub dims: ModelDims,
    pub p: usize,
    pub d: usize,
    pub dt: f64,
    pub sigma: f64,
    #[serde(skip)]
    pub x: Vec<DVector<f64>>,
    #[serde(skip)]
    pub v: Vec<DVector<f64>>,
    pub theta: DVector<f64>,
    /// `(λ^z, λ^w)`.
    pub lambda: DVector<f64>,
    pub model: LtiModel,
    pub precision_x: DMatrix<f64>,
    pub precision_v: DMatrix<f64>,
    pub precision_theta: DMatrix<f64>,
    pub precision_lambda: DMatrix<f64>,
    /// `F̄°` at every accepted iteration.
    pub f_trace: Vec<f64>,
    /// Parameters at every accepted iteration.
    pub theta_trace: Vec<DVector<f64>>,
    pub lambda_trace: Vec<DVector<f64>>,
    pub iterations: usize,
    pub rejected: usize,
    pub stop: StopReason,
}

impl DemResult {
    /// Final `F̄°`.
    pub fn free_action(&self) -> f64 {
        *self.f_trace.last().expect("a result always holds one accepted iteration")
    }

    /// Estimated state at the last training step.
    pub fn final_state(&self) -> DVector<f64> {
        let n = self.dims.n;
        self.x
            .last()
            .map(|x| x.rows(0, n).into_owned())
            .unwrap_or_else(|| DVector::zeros(n))
    }
}

/// Embeds a `T × m` output series to order `p`.
pub fn embed_outputs(y: &DMatrix<f64>, p: usize, dt: f64) -> Result<Vec<DVector<f64>>> {
    Ok(TaylorEmbedder::new(p, dt)?
        .embed_series(y)?
        .into_iter()
        .map(|g| g.into_values())
        .collect())
}

/// Generalized gradient flow over the whole series, cold-started at the
/// priors. The flow is linear in `X = [x̃; ṽ]`, so its Jacobian and the
/// local-linearization propagator are shared by every step.
pub fn d_step(obj: &Objective<'_>, ys: &[DVector<f64>], dt: f64, k_x: f64) -> Result<Trajectory> {
    if ys.is_empty() {
        return Err(DemError::param("d-step needs at least one sample"));
    }
    let l = obj.lifted();
    let (nx, nv) = (obj.x_len(), obj.v_len());
    let dim = nx + nv;

    let mut e = DMatrix::zeros(l.e_x.nrows(), dim);
    e.view_mut((0, 0), (l.e_x.nrows(), nx)).copy_from(&l.e_x);
    e.view_mut((0, nx), (l.e_v.nrows(), nv)).copy_from(&l.e_v);
    let pe_t = -(e.transpose() * &l.pi);
    let u_xx = &pe_t * &e;

    let mut drift = DMatrix::zeros(dim, dim);
    drift.view_mut((0, 0), (nx, nx)).copy_from(&l.dx);
    drift.view_mut((nx, nx), (nv, nv)).copy_from(&l.dv);
    let jac = &drift + &u_xx * k_x;
    let (_, mut phi) = expm_with_integral(&jac, dt);
    if phi.iter().any(|v| !v.is_finite()) {
        phi = DMatrix::identity(dim, dim) * dt;
    }

    let y_len = obj.y_len();
    let mut eps0 = DVector::zeros(e.nrows());
    let mut state = DVector::zeros(dim);
    let mut out = Trajectory {
        x: Vec::with_capacity(ys.len()),
        v: Vec::with_capacity(ys.len()),
    };
    for (t, y) in ys.iter().enumerate() {
        if y.len() != y_len {
            return Err(DemError::param(format!(
                "embedded output at step {t} has length {}, expected {y_len}",
                y.len()
            )));
        }
        let eta = obj.eta_v_at(t);
        eps0.rows_mut(0, y_len).copy_from(y);
        eps0.rows_mut(y_len, nv).copy_from(&(-&eta));
        if t == 0 {
            state.rows_mut(0, nx).copy_from(&initial_state(obj, y));
            state.rows_mut(nx, nv).copy_from(&eta);
        } else {
            let grad = &pe_t * (&eps0 + &e * &state);
            let flow = &drift * &state + grad * k_x;
            state += &phi * flow;
        }
        let norm = state.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(DemError::numerical("d-step", format!("state diverged at step {t}")));
        }
        out.x.push(state.rows(0, nx).into_owned());
        out.v.push(state.rows(nx, nv).into_owned());
    }
    Ok(out)
}

/// `(I ⊗ C⁺) ỹ` when `C` has full column rank, zero otherwise.
fn initial_state(obj: &Objective<'_>, y: &DVector<f64>) -> DVector<f64> {
    let c = &obj.model().c;
    let (m, n) = c.shape();
    let (p, _) = obj.orders();
    let mut x = DVector::zeros((p + 1) * n);
    if c.rank(1e-10) < n {
        return x;
    }
    let Ok(pinv) = c.clone().pseudo_inverse(1e-12) else {
        return x;
    };
    for k in 0..=p {
        x.rows_mut(k * n, n).copy_from(&(&pinv * y.rows(k * m, m)));
    }
    x
}

/// Solves `(−H + jitter·I) Δ = g` with the bounded jitter schedule.
pub fn newton_direction(
    neg_hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    cfg: &DemConfig,
    stage: &str,
) -> Result<DVector<f64>> {
    let scale = neg_hess.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    let mut rel = cfg.jitter_floor;
    loop {
        let m = symmetrize(neg_hess) + DMatrix::identity(grad.len(), grad.len()) * jitter;
        if let Ok(dir) = spd_solve(&m, grad, stage) {
            if dir.iter().all(|v| v.is_finite()) {
                return Ok(dir);
            }
        }
        if rel > cfg.jitter_ceiling {
            return Err(DemError::numerical(stage, "curvature not invertible at maximum jitter"));
        }
        jitter = rel * scale;
        rel *= 10.0;
    }
}

/// One curvature-scaled ascent step on `F̄` in λ with the covariances held.
pub fn m_step(
    obj: &Objective<'_>,
    stats: &TrajectoryStats,
    cov: &Covariances,
    cfg: &DemConfig,
) -> Result<DVector<f64>> {
    let (grad, hess) = obj.action_lambda_derivatives(stats, cov)?;
    let dir = newton_direction(&-hess, &grad, cfg, "m-step")?;
    Ok(obj.lambda() + dir * cfg.k_lambda)
}

/// Iterates [`m_step`] until λ stops moving or the iteration cap.
pub fn m_loop<'a>(
    obj: &Objective<'a>,
    stats: &TrajectoryStats,
    cov: &Covariances,
    cfg: &DemConfig,
) -> Result<Objective<'a>> {
    let mut cur = obj.clone();
    for _ in 0..cfg.max_m_steps {
        let next = m_step(&cur, stats, cov, cfg)?;
        let moved = (&next - cur.lambda()).amax();
        cur = cur.with_lambda(next[0], next[1])?;
        if moved < M_STEP_TOL {
            break;
        }
    }
    Ok(cur)
}

/// Newton direction for θ over the free entries; frozen entries stay put.
pub fn e_step_direction(
    obj: &Objective<'_>,
    stats: &TrajectoryStats,
    cov: &Covariances,
    cfg: &DemConfig,
) -> Result<DVector<f64>> {
    let (grad, hess) = obj.action_theta_derivatives(stats, cov)?;
    let free = obj.priors().free_indices();
    let mut dir = DVector::zeros(grad.len());
    if free.is_empty() {
        return Ok(dir);
    }
    let g = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
    let h = DMatrix::from_fn(free.len(), free.len(), |a, b| -hess[(free[a], free[b])]);
    let step = newton_direction(&h, &g, cfg, "e-step")?;
    for (a, &i) in free.iter().enumerate() {
        dir[i] = step[a];
    }
    Ok(dir)
}

/// One curvature-scaled ascent update of θ.
pub fn e_step(
    obj: &Objective<'_>,
    stats: &TrajectoryStats,
    cov: &Covariances,
    cfg: &DemConfig,
) -> Result<ThetaVec> {
    let dir = e_step_direction(obj, stats, cov, cfg)?;
    Ok(ThetaVec(&obj.theta().0 + dir * cfg.k_theta))
}

/// Π of each factor from the curvatures, checked for definiteness.
pub fn optimal_precisions(obj: &Objective<'_>, stats: &TrajectoryStats) -> Result<Covariances> {
    obj.optimal_precisions(stats)
}

struct Accepted<'a> {
    obj: Objective<'a>,
    traj: Trajectory,
    stats: TrajectoryStats,
    direction: DVector<f64>,
}

/// A failed run with the `F̄°` values accepted before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct DemFailure {
    pub error: DemError,
    pub f_trace: Vec<f64>,
}

/// Runs DEM on a `T × m` output series. Parameters start at the prior mean.
pub fn run_dem(
    y: &DMatrix<f64>,
    dt: f64,
    dims: ModelDims,
    cfg: &DemConfig,
    priors: &Priors,
) -> Result<DemResult> {
    run_dem_traced(y, dt, dims, cfg, priors).map_err(|f| f.error)
}

/// Like [`run_dem`], but a failure keeps the partial trace.
pub fn run_dem_traced(
    y: &DMatrix<f64>,
    dt: f64,
    dims: ModelDims,
    cfg: &DemConfig,
    priors: &Priors,
) -> std::result::Result<DemResult, DemFailure> {
    let mut f_trace = Vec::new();
    run_dem_inner(y, dt, dims, cfg, priors, &mut f_trace).map_err(|error| DemFailure { error, f_trace })
}

fn run_dem_inner(
    y: &DMatrix<f64>,
    dt: f64,
    dims: ModelDims,
    cfg: &DemConfig,
    priors: &Priors,
    f_trace: &mut Vec<f64>,
) -> Result<DemResult> {
    cfg.validate()?;
    if y.ncols() != dims.m {
        return Err(DemError::param(format!(
            "output series has {} channels, model expects {}",
            y.ncols(),
            dims.m
        )));
    }
    let sigma = cfg.sigma_for(dt);
    let ys = embed_outputs(y, cfg.p, dt)?;
    let hyper = HyperParams::new(priors.eta_lambda[0], priors.eta_lambda[1], dims.m, dims.n);
    let mut obj = Objective::new(priors.eta_theta.clone(), dims, hyper, priors, cfg.p, cfg.d, sigma)?;

    let mut best: Option<Accepted<'_>> = None;
    let mut theta_trace = Vec::new();
    let mut lambda_trace = Vec::new();
    let mut rejected = 0;
    let mut scale = cfg.k_theta;
    let mut small_changes = 0;
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    for _ in 0..cfg.max_e_steps {
        iterations += 1;
        let traj = d_step(&obj, &ys, dt, cfg.k_x)?;
        let stats = obj.stats(&ys, &traj.x, &traj.v)?;
        let cov = obj.optimal_covariances(&stats)?;
        let tuned = m_loop(&obj, &stats, &cov, cfg)?;
        let f = tuned.action_optimal(&stats)?.total;
        let prev = f_trace.last().copied();

        if prev.is_none_or(|p| f > p) {
            if let Some(p) = prev {
                if (f - p).abs() < cfg.tol * p.abs().max(f64::MIN_POSITIVE) {
                    small_changes += 1;
                } else {
                    small_changes = 0;
                }
            }
            f_trace.push(f);
            theta_trace.push(tuned.theta().0.clone());
            lambda_trace.push(tuned.lambda());
            let cov = tuned.optimal_covariances(&stats)?;
            let direction = e_step_direction(&tuned, &stats, &cov, cfg)?;
            scale = cfg.k_theta;
            obj = tuned.with_theta(ThetaVec(&tuned.theta().0 + &direction * scale))?;
            best = Some(Accepted {
                obj: tuned,
                traj,
                stats,
                direction,
            });
            if small_changes >= 2 {
                stop = StopReason::Converged;
                break;
            }
        } else {
            rejected += 1;
            scale *= 0.5;
            let acc = best.as_ref().expect("rejection follows an acceptance");
            if scale < MIN_STEP_SCALE * cfg.k_theta {
                stop = StopReason::Stalled;
                break;
            }
            obj = acc
                .obj
                .with_theta(ThetaVec(&acc.obj.theta().0 + &acc.direction * scale))?;
        }
    }

    let acc = best.expect("the first iteration is always accepted");
    let precisions = acc.obj.optimal_precisions(&acc.stats)?;
    Ok(DemResult {
        dims,
        p: cfg.p,
        d: cfg.d,
        dt,
        sigma,
        x: acc.traj.x,
        v: acc.traj.v,
        theta: acc.obj.theta().0.clone(),
        lambda: acc.obj.lambda(),
        model: devectorize_params(acc.obj.theta(), dims)?,
        precision_x: precisions.x,
        precision_v: precisions.v,
        precision_theta: precisions.theta,
        precision_lambda: precisions.lambda,
        f_trace: f_trace.clone(),
        theta_trace,
        lambda_trace,
        iterations,
        rejected,
        stop,
    })
}

/// Noise-free forward simulation of a discrete system:
/// `x_i = F x_{i−1} + G₀ u_{i−1} + G₁ u_i`, `ŷ_i = H x_i` for `i = 1..=steps`,
/// where row `i` of `inputs` is `u_i` (row 0 pairs with `x0`). Without `G₁`
/// only `steps` input rows are needed.
pub fn simulate_discrete(
    f: &DMatrix<f64>,
    g0: &DMatrix<f64>,
    g1: Option<&DMatrix<f64>>,
    h: &DMatrix<f64>,
    x0: &DVector<f64>,
    inputs: &DMatrix<f64>,
    steps: usize,
) -> Result<DMatrix<f64>> {
    let needed = if g1.is_some() { steps + 1 } else { steps };
    if inputs.nrows() < needed {
        return Err(DemError::param(format!(
            "prediction of {steps} steps needs {needed} input rows, got {}",
            inputs.nrows()
        )));
    }
    if inputs.ncols() != g0.ncols() || x0.len() != f.nrows() {
        return Err(DemError::param("prediction inputs or initial state have the wrong dimension"));
    }
    let mut x = x0.clone();
    let mut out = DMatrix::zeros(steps, h.nrows());
    for i in 0..steps {
        x = f * &x + g0 * inputs.row(i).transpose();
        if let Some(g1) = g1 {
            x += g1 * inputs.row(i + 1).transpose();
        }
        out.row_mut(i).copy_from(&(h * &x).transpose());
    }
    Ok(out)
}

/// `steps`-ahead output prediction of a continuous-time model with inputs
/// interpolated linearly between samples, matching the simulator. `inputs`
/// starts at the last training sample and needs `steps + 1` rows.
pub fn predict_n_step(
    model: &LtiModel,
    x0: &DVector<f64>,
    inputs: &DMatrix<f64>,
    steps: usize,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let (f, p0, p1) = foh(&model.a, dt);
    let g1 = p1 * &model.b;
    simulate_discrete(&f, &(p0 * &model.b), Some(&g1), &model.c, x0, inputs, steps)
}
