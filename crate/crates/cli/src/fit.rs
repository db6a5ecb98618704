//! Estimator dispatch shared by the commands.

use clap::ValueEnum;
use dem::baseline::{em_identify, em_predict_n_step, EmModel, EmResult};
use dem::engine::{predict_n_step, run_dem_traced, DemResult};
use dem::model::{LtiModel, ModelDims, Priors};
use dem::simkit::Dataset;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// DEM with generalized coordinates (configured p and d).
    Dem,
    /// DEM without generalized coordinates: p = 1, d = 0.
    DemNogc,
    /// Expectation maximization on the discrete white-noise model.
    Em,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dem, Method::DemNogc, Method::Em];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dem => "dem",
            Method::DemNogc => "dem-nogc",
            Method::Em => "em",
        }
    }

    /// The configuration this method actually runs with.
    pub fn resolve(self, cfg: &RunConfig) -> RunConfig {
        let mut cfg = cfg.clone();
        if self == Method::DemNogc {
            cfg.dem.p = 1;
            cfg.dem.d = 0;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Continuous { model: LtiModel, dt: f64 },
    Discrete { model: EmModel },
}

#[derive(Debug, Clone)]
pub enum FitDetail {
    Dem(Box<DemResult>),
    Em(Box<EmResult>),
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: FittedModel,
    /// State at the last training sample, where prediction starts.
    pub final_state: DVector<f64>,
    pub trace: Vec<f64>,
    pub detail: FitDetail,
}

#[derive(Debug)]
pub struct FitFailure {
    pub error: CliError,
    pub trace: Vec<f64>,
}

impl From<CliError> for FitFailure {
    fn from(error: CliError) -> Self {
        FitFailure { error, trace: Vec::new() }
    }
}

/// Training data, dimensions and priors for a DEM run on `ds`.
pub struct DemSetup {
    pub y: DMatrix<f64>,
    pub dims: ModelDims,
    pub priors: Priors,
}

pub fn dem_setup(ds: &Dataset, cfg: &RunConfig) -> Result<DemSetup> {
    let (y, v) = ds.train();
    let n = cfg.state_dim(&ds.meta);
    let dims = ModelDims::new(n, v.ncols(), y.ncols());
    let c = cfg.output_matrix(&ds.meta, n)?;
    let priors = Priors::from_settings(&cfg.dem, dims, c.as_ref(), Some(&v), ds.dt, cfg.dem.seed)?;
    Ok(DemSetup { y, dims, priors })
}

/// Fits `method` on the training split. `cfg` must already be resolved.
pub fn fit(method: Method, ds: &Dataset, cfg: &RunConfig) -> std::result::Result<Fit, FitFailure> {
    match method {
        Method::Dem | Method::DemNogc => {
            let setup = dem_setup(ds, cfg)?;
            let res = run_dem_traced(&setup.y, ds.dt, setup.dims, &cfg.dem, &setup.priors).map_err(|f| FitFailure {
                error: f.error.into(),
                trace: f.f_trace,
            })?;
            Ok(Fit {
                model: FittedModel::Continuous {
                    model: res.model.clone(),
                    dt: ds.dt,
                },
                final_state: res.final_state(),
                trace: res.f_trace.clone(),
                detail: FitDetail::Dem(Box::new(res)),
            })
        }
        Method::Em => {
            let (y, v) = ds.train();
            let n = cfg.state_dim(&ds.meta);
            let c = cfg.output_matrix(&ds.meta, n)?;
            let res = em_identify(&y, &v, n, c.as_ref(), ds.dt, cfg.em.max_iters, cfg.em.tol)
                .map_err(|e| FitFailure::from(CliError::from(e)))?;
            Ok(Fit {
                model: FittedModel::Discrete { model: res.model.clone() },
                final_state: res.final_state.clone(),
                trace: res.log_likelihood.clone(),
                detail: FitDetail::Em(Box::new(res)),
            })
        }
    }
}

/// `steps`-ahead prediction over the test segment of `ds`.
pub fn predict(model: &FittedModel, x0: &DVector<f64>, ds: &Dataset, steps: usize) -> Result<DMatrix<f64>> {
    let test_len = ds.len() - ds.split;
    if steps == 0 || steps > test_len {
        return Err(CliError::Usage(format!(
            "prediction steps must be in 1..={test_len} (test length), got {steps}"
        )));
    }
    let inputs = ds.prediction_inputs()?;
    let out = match model {
        FittedModel::Continuous { model, dt } => {
            if (dt - ds.dt).abs() > 1e-12 * dt.abs() {
                return Err(CliError::Data(format!("model dt {dt} differs from data dt {}", ds.dt)));
            }
            predict_n_step(model, x0, &inputs, steps, *dt)?
        }
        FittedModel::Discrete { model } => em_predict_n_step(model, x0, &inputs, steps)?,
    };
    Ok(out)
}
