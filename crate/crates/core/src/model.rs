//! The internal LTI model, its parameter vector, priors and the default
//! estimator configuration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DemError, Result};
use crate::gencoord::{GenConfig, GenVec, TaylorEmbedder};
use crate::linalg::is_spd;

/// State, input and output dimensions `(n, r, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub n: usize,
    pub r: usize,
    pub m: usize,
}

impl ModelDims {
    pub fn new(n: usize, r: usize, m: usize) -> Self {
        ModelDims { n, r, m }
    }

    pub fn theta_len(&self) -> usize {
        self.n * self.n + self.n * self.r + self.m * self.n
    }

    /// Offset of `B` inside θ.
    pub fn b_offset(&self) -> usize {
        self.n * self.n
    }

    /// Offset of `C` inside θ.
    pub fn c_offset(&self) -> usize {
        self.n * self.n + self.n * self.r
    }

    /// θ index of entry `(i, j)` of `[A B]`.
    pub fn ab_index(&self, i: usize, j: usize) -> usize {
        if j < self.n {
            i * self.n + j
        } else {
            self.b_offset() + i * self.r + (j - self.n)
        }
    }

    /// θ index of entry `(i, j)` of `C`.
    pub fn c_index(&self, i: usize, j: usize) -> usize {
        self.c_offset() + i * self.n + j
    }
}

/// `ẋ = A x + B v`, `y = C x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(DemError::param("A must be square and nonempty"));
        }
        if b.nrows() != n {
            return Err(DemError::param(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(DemError::param(format!("C has {} columns, expected {n}", c.ncols())));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(DemError::param("model matrices must be finite"));
        }
        Ok(LtiModel { a, b, c })
    }

    pub fn zeros(dims: ModelDims) -> Self {
        LtiModel {
            a: DMatrix::zeros(dims.n, dims.n),
            b: DMatrix::zeros(dims.n, dims.r),
            c: DMatrix::zeros(dims.m, dims.n),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.a.nrows(), self.b.ncols(), self.c.nrows())
    }
}

/// Parameters `θ = [vec(Aᵀ); vec(Bᵀ); vec(Cᵀ)]`, i.e. each matrix row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVec(pub DVector<f64>);

impl ThetaVec {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

pub fn vectorize_params(model: &LtiModel) -> ThetaVec {
    let mut v = Vec::with_capacity(model.dims().theta_len());
    push_row_major(&mut v, &model.a);
    push_row_major(&mut v, &model.b);
    push_row_major(&mut v, &model.c);
    ThetaVec(DVector::from_vec(v))
}

pub fn devectorize_params(theta: &ThetaVec, dims: ModelDims) -> Result<LtiModel> {
    if theta.len() != dims.theta_len() {
        return Err(DemError::param(format!(
            "theta has length {}, dims {:?} need {}",
            theta.len(),
            dims,
            dims.theta_len()
        )));
    }
    let t = &theta.0;
    let a = DMatrix::from_row_slice(dims.n, dims.n, &t.as_slice()[..dims.b_offset()]);
    let b = DMatrix::from_row_slice(dims.n, dims.r, &t.as_slice()[dims.b_offset()..dims.c_offset()]);
    let c = DMatrix::from_row_slice(dims.m, dims.n, &t.as_slice()[dims.c_offset()..]);
    Ok(LtiModel { a, b, c })
}

/// Whether the input trajectory is observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The measured input is the prior mean, held with high precision.
    Known,
    /// Zero prior mean with low precision.
    Unknown,
}

/// Prior settings; precisions are given as natural logarithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSettings {
    /// Half-width of the uniform draw for the parameter prior means.
    pub theta_range: f64,
    pub log_p_theta: f64,
    /// Precision for parameters frozen at a known value.
    pub log_p_frozen: f64,
    pub lambda_z: f64,
    pub log_p_lambda_z: f64,
    pub lambda_w: f64,
    pub log_p_lambda_w: f64,
    pub inputs: InputMode,
    pub log_p_v_known: f64,
    pub log_p_v_unknown: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings {
            theta_range: 1.0,
            log_p_theta: 4.0,
            log_p_frozen: 32.0,
            lambda_z: 20.0,
            log_p_lambda_z: 25.0,
            lambda_w: 3.0,
            log_p_lambda_w: 20.0,
            inputs: InputMode::Known,
            log_p_v_known: 16.0,
            log_p_v_unknown: 2.0,
        }
    }
}

/// Full estimator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemConfig {
    /// Embedding order of states and outputs.
    pub p: usize,
    /// Embedding order of inputs.
    pub d: usize,
    /// Noise smoothness in seconds; `None` means one sample interval.
    pub sigma: Option<f64>,
    pub k_x: f64,
    pub k_theta: f64,
    pub k_lambda: f64,
    pub max_e_steps: usize,
    pub max_m_steps: usize,
    /// Relative change of the optimal-precision free energy action that
    /// counts as converged.
    pub tol: f64,
    pub jitter_floor: f64,
    pub jitter_ceiling: f64,
    pub seed: u64,
    pub priors: PriorSettings,
}

impl Default for DemConfig {
    fn default() -> Self {
        DemConfig {
            p: 2,
            d: 1,
            sigma: None,
            k_x: 1.0,
            k_theta: 1.0,
            k_lambda: 1.0,
            max_e_steps: 64,
            max_m_steps: 16,
            tol: 1e-4,
            jitter_floor: 1e-8,
            jitter_ceiling: 1e-2,
            seed: 0,
            priors: PriorSettings::default(),
        }
    }
}

/// The published algorithm settings.
pub fn default_config() -> DemConfig {
    DemConfig::default()
}

impl DemConfig {
    /// Settings for unknown inputs: zero prior mean with precision `e²`.
    pub fn unknown_inputs(mut self) -> Self {
        self.priors.inputs = InputMode::Unknown;
        self
    }

    pub fn sigma_for(&self, dt: f64) -> f64 {
        self.sigma.unwrap_or(dt)
    }

    pub fn gen_config(&self, dt: f64) -> Result<GenConfig> {
        GenConfig::new(self.p, self.d, dt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d > self.p {
            return Err(DemError::param(format!("d={} exceeds p={}", self.d, self.p)));
        }
        for (name, v) in [("k_x", self.k_x), ("k_theta", self.k_theta), ("k_lambda", self.k_lambda)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DemError::param(format!("learning rate {name} must be positive")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(DemError::param("tolerance must be positive"));
        }
        if !(self.jitter_floor > 0.0 && self.jitter_ceiling >= self.jitter_floor) {
            return Err(DemError::param("invalid jitter schedule"));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DemError::param(format!("sigma must be positive, got {s}")));
            }
        }
        if self.max_e_steps == 0 || self.max_m_steps == 0 {
            return Err(DemError::param("iteration caps must be at least 1"));
        }
        Ok(())
    }
}

/// Gaussian priors over inputs, parameters and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    /// Generalized input prior mean per time step; empty means zero.
    pub eta_v: Vec<GenVec>,
    /// Input prior precision (`r × r`), lifted with the temporal precision.
    pub p_v: DMatrix<f64>,
    pub eta_theta: ThetaVec,
    pub p_theta: DMatrix<f64>,
    /// Entries of θ held at their prior mean.
    pub frozen: Vec<bool>,
    /// `(λ^z, λ^w)` prior mean.
    pub eta_lambda: DVector<f64>,
    pub p_lambda: DMatrix<f64>,
}

impl Priors {
    /// Builds priors from settings. `known_c` freezes the output matrix;
    /// `inputs` supplies the measured input series (rows are time steps) when
    /// the input mode is [`InputMode::Known`].
    pub fn from_settings(
        cfg: &DemConfig,
        dims: ModelDims,
        known_c: Option<&DMatrix<f64>>,
        inputs: Option<&DMatrix<f64>>,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        let s = &cfg.priors;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut eta = DVector::from_fn(dims.theta_len(), |_, _| {
            rng.random_range(-s.theta_range..=s.theta_range)
        });
        let mut p_diag = DVector::from_element(dims.theta_len(), s.log_p_theta.exp());
        let mut frozen = vec![false; dims.theta_len()];
        if let Some(c) = known_c {
            if c.shape() != (dims.m, dims.n) {
                return Err(DemError::param(format!(
                    "known C has shape {:?}, expected ({}, {})",
                    c.shape(),
                    dims.m,
                    dims.n
                )));
            }
            for i in 0..dims.m {
                for j in 0..dims.n {
                    let k = dims.c_index(i, j);
                    eta[k] = c[(i, j)];
                    p_diag[k] = s.log_p_frozen.exp();
                    frozen[k] = true;
                }
            }
        }
        let (eta_v, log_pv) = match s.inputs {
            InputMode::Known => {
                let series = inputs.ok_or_else(|| {
                    DemError::param("known-input priors need the measured input series")
                })?;
                if series.ncols() != dims.r {
                    return Err(DemError::param(format!(
                        "input series has {} channels, model expects {}",
                        series.ncols(),
                        dims.r
                    )));
                }
                let emb = TaylorEmbedder::new(cfg.d, dt)?;
                (emb.embed_series(series)?, s.log_p_v_known)
            }
            InputMode::Unknown => (Vec::new(), s.log_p_v_unknown),
        };
        let p_lambda = DMatrix::from_diagonal(&DVector::from_vec(vec![
            s.log_p_lambda_z.exp(),
            s.log_p_lambda_w.exp(),
        ]));
        let priors = Priors {
            eta_v,
            p_v: DMatrix::identity(dims.r, dims.r) * log_pv.exp(),
            eta_theta: ThetaVec(eta),
            p_theta: DMatrix::from_diagonal(&p_diag),
            frozen,
            eta_lambda: DVector::from_vec(vec![s.lambda_z, s.lambda_w]),
            p_lambda,
        };
        priors.validate(dims)?;
        Ok(priors)
    }

    pub fn validate(&self, dims: ModelDims) -> Result<()> {
        if self.eta_theta.len() != dims.theta_len() || self.p_theta.nrows() != dims.theta_len() {
            return Err(DemError::param("parameter prior does not match model dimensions"));
        }
        if self.frozen.len() != dims.theta_len() {
            return Err(DemError::param("frozen mask does not match model dimensions"));
        }
        if self.p_v.nrows() != dims.r || self.eta_lambda.len() != 2 || self.p_lambda.nrows() != 2 {
            return Err(DemError::param("input or hyperparameter prior has wrong shape"));
        }
        for (name, m) in [("P^v", &self.p_v), ("P^θ", &self.p_theta), ("P^λ", &self.p_lambda)] {
            if !is_spd(m) {
                return Err(DemError::not_pd(name));
            }
        }
        Ok(())
    }

    /// Prior mean of the generalized input at step `t`.
    pub fn eta_v_at(&self, t: usize, base_dim: usize, order: usize) -> DVector<f64> {
        match self.eta_v.get(t) {
            Some(g) => g.values().clone(),
            None => DVector::zeros((order + 1) * base_dim),
        }
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.frozen.len()).filter(|&k| !self.frozen[k]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn vectorize_layout() {
        let m = LtiModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            DMatrix::from_row_slice(2, 1, &[5.0, 6.0]),
            DMatrix::from_row_slice(1, 2, &[7.0, 8.0]),
        )
        .unwrap();
        let theta = vectorize_params(&m);
        assert_eq!(theta.0.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(devectorize_params(&theta, m.dims()).unwrap(), m);
    }

    #[test]
    fn zero_model_vectorizes_to_zeros() {
        let dims = ModelDims::new(3, 2, 4);
        let theta = vectorize_params(&LtiModel::zeros(dims));
        assert_eq!(theta.len(), 9 + 6 + 12);
        assert!(theta.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn devectorize_rejects_wrong_length() {
        let theta = ThetaVec(DVector::zeros(5));
        assert!(devectorize_params(&theta, ModelDims::new(2, 1, 1)).is_err());
    }

    #[test]
    fn index_helpers_match_layout() {
        let dims = ModelDims::new(2, 3, 2);
        let model = LtiModel::new(
            DMatrix::from_fn(2, 2, |i, j| (10 * i + j) as f64),
            DMatrix::from_fn(2, 3, |i, j| (100 + 10 * i + j) as f64),
            DMatrix::from_fn(2, 2, |i, j| (200 + 10 * i + j) as f64),
        )
        .unwrap();
        let theta = vectorize_params(&model);
        for i in 0..2 {
            for j in 0..5 {
                let expected = if j < 2 { model.a[(i, j)] } else { model.b[(i, j - 2)] };
                assert_eq!(theta.0[dims.ab_index(i, j)], expected);
            }
            for j in 0..2 {
                assert_eq!(theta.0[dims.c_index(i, j)], model.c[(i, j)]);
            }
        }
    }

    #[test]
    fn default_settings() {
        let cfg = default_config();
        assert_eq!(cfg.p, 2);
        assert_eq!(cfg.d, 1);
        assert_eq!(cfg.priors.log_p_theta.exp(), 4f64.exp());
        assert_eq!(cfg.sigma_for(0.0083), 0.0083);
        assert_eq!(cfg.priors.lambda_z, 20.0);
        assert_eq!(cfg.priors.log_p_lambda_z, 25.0);
        assert_eq!(cfg.priors.lambda_w, 3.0);
        assert_eq!(cfg.priors.log_p_lambda_w, 20.0);
        let unknown = cfg.unknown_inputs();
        assert_eq!(unknown.priors.inputs, InputMode::Unknown);
        assert_eq!(unknown.priors.log_p_v_unknown, 2.0);
    }

    #[test]
    fn priors_draw_uniform_and_freeze_known_c() {
        let dims = ModelDims::new(2, 1, 2);
        let cfg = default_config().unknown_inputs();
        let c = DMatrix::identity(2, 2);
        let pri = Priors::from_settings(&cfg, dims, Some(&c), None, 0.01, 9).unwrap();
        for k in 0..dims.c_offset() {
            assert!(pri.eta_theta.0[k].abs() <= 1.0);
            assert!(!pri.frozen[k]);
            assert_eq!(pri.p_theta[(k, k)], 4f64.exp());
        }
        assert_eq!(pri.eta_theta.0[dims.c_index(1, 1)], 1.0);
        assert_eq!(pri.eta_theta.0[dims.c_index(0, 1)], 0.0);
        assert!(pri.frozen[dims.c_index(0, 1)]);
        assert_eq!(pri.free_indices().len(), dims.c_offset());
        let again = Priors::from_settings(&cfg, dims, Some(&c), None, 0.01, 9).unwrap();
        assert_eq!(pri, again);
    }

    #[test]
    fn known_inputs_require_series() {
        let dims = ModelDims::new(1, 1, 1);
        assert!(Priors::from_settings(&default_config(), dims, None, None, 0.01, 0).is_err());
        let series = DMatrix::from_fn(10, 1, |t, _| t as f64);
        let pri = Priors::from_settings(&default_config(), dims, None, Some(&series), 0.5, 0).unwrap();
        assert_eq!(pri.eta_v.len(), 10);
        assert!((pri.eta_v[4].values()[1] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn vectorize_round_trip(n in 1usize..=5, r in 1usize..=5, m in 1usize..=5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mat = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-10.0..10.0));
            let model = LtiModel::new(mat(n, n), mat(n, r), mat(m, n)).unwrap();
            let theta = vectorize_params(&model);
            prop_assert_eq!(devectorize_params(&theta, ModelDims::new(n, r, m)).unwrap(), model);
        }
    }
}
