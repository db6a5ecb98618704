//! Generalized coordinates: a trajectory point is stored as its value
//! stacked with its first `p` temporal derivatives, block `k` holding the
//! `k`-th derivative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DemError, Result};
use crate::linalg::kron;

/// A vector in generalized coordinates, laid out as `[v, v′, v″, …]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenVec {
    base_dim: usize,
    order: usize,
    values: DVector<f64>,
}

impl GenVec {
    pub fn zeros(base_dim: usize, order: usize) -> Self {
        GenVec {
            base_dim,
            order,
            values: DVector::zeros((order + 1) * base_dim),
        }
    }

    pub fn from_values(base_dim: usize, order: usize, values: DVector<f64>) -> Result<Self> {
        if base_dim == 0 {
            return Err(DemError::param("generalized vector needs base_dim >= 1"));
        }
        if values.len() != (order + 1) * base_dim {
            return Err(DemError::param(format!(
                "generalized vector of base_dim {base_dim} and order {order} needs {} values, got {}",
                (order + 1) * base_dim,
                values.len()
            )));
        }
        Ok(GenVec {
            base_dim,
            order,
            values,
        })
    }

    /// Stacks derivative blocks `[v, v′, …]`.
    pub fn from_blocks(blocks: &[DVector<f64>]) -> Result<Self> {
        let base_dim = blocks.first().map(|b| b.len()).unwrap_or(0);
        if blocks.iter().any(|b| b.len() != base_dim) {
            return Err(DemError::param("derivative blocks differ in length"));
        }
        let mut values = DVector::zeros(blocks.len() * base_dim);
        for (k, b) in blocks.iter().enumerate() {
            values.rows_mut(k * base_dim, base_dim).copy_from(b);
        }
        GenVec::from_values(base_dim, blocks.len().saturating_sub(1), values)
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    /// The `k`-th derivative block.
    pub fn block(&self, k: usize) -> DVector<f64> {
        self.values.rows(k * self.base_dim, self.base_dim).into_owned()
    }
}

/// Embedding orders and sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Order of generalized motion for states and outputs.
    pub p: usize,
    /// Order of generalized motion for inputs.
    pub d: usize,
    /// Sample interval in seconds.
    pub dt: f64,
}

impl GenConfig {
    pub fn new(p: usize, d: usize, dt: f64) -> Result<Self> {
        let cfg = GenConfig { p, d, dt };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d > self.p {
            return Err(DemError::param(format!(
                "input order d={} exceeds state order p={}",
                self.d, self.p
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DemError::param(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Upper shift of size `p+1` lifted by `I_base_dim`; moves block `k+1` into
/// block `k` and zeroes the last block.
pub fn shift_operator(base_dim: usize, p: usize) -> DMatrix<f64> {
    let mut shift = DMatrix::zeros(p + 1, p + 1);
    for k in 0..p {
        shift[(k, k + 1)] = 1.0;
    }
    kron(&shift, &DMatrix::identity(base_dim, base_dim))
}

/// `I_{p+1} ⊗ m`.
pub fn kron_lift(m: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    kron(&DMatrix::identity(p + 1, p + 1), m)
}

/// Center index of the embedding window for order `p`.
pub fn window_center(p: usize) -> usize {
    p / 2
}

/// Maps a window of `p+1` uniformly spaced samples onto the derivatives of
/// the interpolating degree-`p` polynomial at one of the nodes.
#[derive(Debug, Clone)]
pub struct TaylorEmbedder {
    p: usize,
    dt: f64,
    /// One map per position of the evaluation node inside the window.
    maps: Vec<DMatrix<f64>>,
}

impl TaylorEmbedder {
    pub fn new(p: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DemError::param(format!("dt must be positive, got {dt}")));
        }
        let maps = (0..=p)
            .map(|pos| {
                let e = taylor_matrix(p, dt, pos);
                e.transpose().try_inverse().ok_or_else(|| {
                    DemError::numerical("embedding", format!("singular Taylor matrix at node {pos}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaylorEmbedder { p, dt, maps })
    }

    pub fn order(&self) -> usize {
        self.p
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Embeds a window whose evaluation node sits at index `pos`.
    pub fn embed_at(&self, window: &[DVector<f64>], pos: usize) -> Result<GenVec> {
        if window.len() != self.p + 1 {
            return Err(DemError::param(format!(
                "embedding window needs {} samples, got {}",
                self.p + 1,
                window.len()
            )));
        }
        let m = window[0].len();
        if m == 0 || window.iter().any(|w| w.len() != m) {
            return Err(DemError::param("window samples differ in dimension"));
        }
        let map = &self.maps[pos];
        let mut values = DVector::zeros((self.p + 1) * m);
        for i in 0..=self.p {
            for (j, sample) in window.iter().enumerate() {
                let w = map[(i, j)];
                for ch in 0..m {
                    values[i * m + ch] += w * sample[ch];
                }
            }
        }
        GenVec::from_values(m, self.p, values)
    }

    /// Embeds every row of a `T × m` series. Windows are centered and shifted
    /// inward at the boundaries.
    pub fn embed_series(&self, series: &DMatrix<f64>) -> Result<Vec<GenVec>> {
        let len = series.nrows();
        let width = self.p + 1;
        if len < width {
            return Err(DemError::param(format!(
                "series of {len} samples is shorter than the embedding window {width}"
            )));
        }
        let c = window_center(self.p);
        let rows: Vec<DVector<f64>> = (0..len).map(|t| series.row(t).transpose()).collect();
        (0..len)
            .map(|t| {
                let start = t.saturating_sub(c).min(len - width);
                self.embed_at(&rows[start..start + width], t - start)
            })
            .collect()
    }
}

/// `E[i][j] = ((j − pos)·dt)^i / i!`.
pub fn taylor_matrix(p: usize, dt: f64, pos: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p + 1, p + 1, |i, j| {
        let tau = (j as f64 - pos as f64) * dt;
        tau.powi(i as i32) / factorial(i)
    })
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Generalized motion at the center of `window` (`p + 1` samples).
pub fn embed_measurements(window: &[DVector<f64>], dt: f64, p: usize) -> Result<GenVec> {
    if window.len() != p + 1 {
        return Err(DemError::param(format!(
            "embedding window needs {} samples, got {}",
            p + 1,
            window.len()
        )));
    }
    TaylorEmbedder::new(p, dt)?.embed_at(window, window_center(p))
}
