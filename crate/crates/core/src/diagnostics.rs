//! Prediction metrics, noise diagnostics and free-energy landscape scans.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::DemResult;
use crate::error::{DemError, Result};
use crate::free_energy::Objective;
use crate::model::{ModelDims, Priors, ThetaVec};
use crate::noise::HyperParams;
use crate::par;

/// Squared prediction error per step, summed over channels.
pub fn n_step_error_series(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<Vec<f64>> {
    if y.shape() != y_hat.shape() {
        return Err(DemError::param(format!(
            "measured {:?} and predicted {:?} outputs differ in shape",
            y.shape(),
            y_hat.shape()
        )));
    }
    Ok((0..y.nrows())
        .map(|i| (y.row(i) - y_hat.row(i)).norm_squared())
        .collect())
}

/// Mean over steps of the channel-summed squared error.
pub fn mspe(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<f64> {
    let errs = n_step_error_series(y, y_hat)?;
    if errs.is_empty() {
        return Err(DemError::param("mspe of an empty series"));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autocorrelation {
    /// Lags `0..=max_lag`; lag 0 is exactly 1.
    pub values: Vec<f64>,
    /// White-noise 95% band `1.96/√N`.
    pub bound: f64,
}

impl Autocorrelation {
    /// Fraction of lags `1..=max_lag` inside the band.
    pub fn fraction_inside(&self) -> f64 {
        let lags = &self.values[1..];
        lags.iter().filter(|r| r.abs() <= self.bound).count() as f64 / lags.len() as f64
    }
}

/// Sample autocorrelation with the biased `1/N` normalization.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Autocorrelation> {
    let len = series.len();
    if max_lag == 0 || len <= max_lag {
        return Err(DemError::param(format!("need N > max_lag >= 1, got N={len}, max_lag={max_lag}")));
    }
    let mean = series.iter().sum::<f64>() / len as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0: f64 = centered.iter().map(|x| x * x).sum();
    if !(c0 > 0.0) {
        return Err(DemError::param("autocorrelation of a zero-variance series"));
    }
    let mut values = Vec::with_capacity(max_lag + 1);
    values.push(1.0);
    for lag in 1..=max_lag {
        let c: f64 = centered[lag..].iter().zip(&centered).map(|(a, b)| a * b).sum();
        values.push(c / c0);
    }
    Ok(Autocorrelation {
        values,
        bound: 1.96 / (len as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussianity {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub n: usize,
}

/// Sample skewness and excess kurtosis (moment estimators).
pub fn gaussianity(series: &[f64]) -> Result<Gaussianity> {
    let len = series.len();
    if len < 8 {
        return Err(DemError::param(format!("gaussianity needs at least 8 samples, got {len}")));
    }
    let nf = len as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in series {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    // Variance below round-off of the mean counts as constant.
    if !(m2 > (1e-12 * mean.abs()).powi(2)) || m2 == 0.0 {
        return Err(DemError::param("gaussianity of a zero-variance series"));
    }
    Ok(Gaussianity {
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        n: len,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mspe: f64,
    pub per_step: Vec<f64>,
    pub autocorrelation: Option<Autocorrelation>,
    pub gaussianity: Option<Gaussianity>,
}

impl MetricReport {
    pub fn from_predictions(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<Self> {
        let per_step = n_step_error_series(y, y_hat)?;
        Ok(MetricReport {
            mspe: mspe(y, y_hat)?,
            per_step,
            autocorrelation: None,
            gaussianity: None,
        })
    }
}

/// Uniform `(A, B)` grid for scalar landscape scans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub a_min: f64,
    pub a_max: f64,
    pub a_steps: usize,
    pub b_min: f64,
    pub b_max: f64,
    pub b_steps: usize,
}

impl LandscapeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.a_steps < 2 || self.b_steps < 2 || !(self.a_max > self.a_min) || !(self.b_max > self.b_min) {
            return Err(DemError::param("landscape grid needs increasing bounds and at least two points per axis"));
        }
        Ok(())
    }

    pub fn a_cell(&self) -> f64 {
        (self.a_max - self.a_min) / (self.a_steps - 1) as f64
    }

    pub fn b_cell(&self) -> f64 {
        (self.b_max - self.b_min) / (self.b_steps - 1) as f64
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.a_steps * self.b_steps);
        for i in 0..self.a_steps {
            for j in 0..self.b_steps {
                pts.push((
                    self.a_min + i as f64 * self.a_cell(),
                    self.b_min + j as f64 * self.b_cell(),
                ));
            }
        }
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub a: f64,
    pub b: f64,
    pub f_bar: f64,
}

/// `F̄°` over an `(A, B)` grid for a scalar model, holding the converged
/// trajectories, hyperparameters and output matrix of `fit`. The
/// state and input precisions follow each grid point.
pub fn fe_landscape(
    y: &DMatrix<f64>,
    fit: &DemResult,
    priors: &Priors,
    grid: &LandscapeGrid,
) -> Result<Vec<LandscapePoint>> {
    grid.validate()?;
    let dims = fit.dims;
    if dims != (ModelDims { n: 1, r: 1, m: 1 }) {
        return Err(DemError::param(format!(
            "landscape scans need a scalar model, got n={}, r={}, m={}",
            dims.n, dims.r, dims.m
        )));
    }
    let ys = crate::engine::embed_outputs(y, fit.p, fit.dt)?;
    let hyper = HyperParams::new(fit.lambda[0], fit.lambda[1], 1, 1);
    let base = Objective::new(ThetaVec(fit.theta.clone()), dims, hyper, priors, fit.p, fit.d, fit.sigma)?;
    let stats = base.stats(&ys, &fit.x, &fit.v)?;
    let c = fit.model.c[(0, 0)];
    let values = par::map(&grid.points(), |&(a, b)| -> Result<LandscapePoint> {
        let theta = ThetaVec(nalgebra::DVector::from_vec(vec![a, b, c]));
        let f_bar = base.with_theta(theta)?.action_optimal(&stats)?.total;
        Ok(LandscapePoint { a, b, f_bar })
    });
    values.into_iter().collect()
}

/// Grid point with the largest `F̄°`.
pub fn landscape_argmax(points: &[LandscapePoint]) -> Option<LandscapePoint> {
    points
        .iter()
        .copied()
        .filter(|p| p.f_bar.is_finite())
        .max_by(|a, b| a.f_bar.total_cmp(&b.f_bar))
}

/// Writes `A,B,F_bar` rows for plotting.
pub fn write_landscape_csv(points: &[LandscapePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DemError::Io(e.to_string()))?;
    w.write_record(["A", "B", "F_bar"]).map_err(|e| DemError::Io(e.to_string()))?;
    for p in points {
        w.write_record([p.a.to_string(), p.b.to_string(), p.f_bar.to_string()])
            .map_err(|e| DemError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
