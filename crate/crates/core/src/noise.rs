//! Colored-noise model: temporal precision of noise derivatives, Kronecker
//! generalized precisions, and a Gaussian-kernel noise sampler.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DemError, Result};
use crate::linalg::{is_spd, kron, spd_inverse};

/// Precision `S(σ²)` of a noise process and its first `p` derivatives when the
/// noise is white noise smoothed by a Gaussian kernel of width `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPrecision {
    sigma: f64,
    order: usize,
    /// Covariance of `[w, w′, …]`; the inverse of `s`.
    v: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl TemporalPrecision {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// The precision matrix `S`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// The derivative covariance `S⁻¹`.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn log_det(&self) -> f64 {
        // det V = Π_i s^{-2i} det V₀, computed in log space for small σ.
        -log_det_unit_covariance(self.order) + self.order as f64 * (self.order as f64 + 1.0) * (2.0 * self.sigma * self.sigma).sqrt().ln()
    }
}

/// `k`-th derivative at zero of `ρ(h) = exp(−h²/2)`.
fn unit_autocorr_derivative(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    // (−1)^{k/2} (k − 1)!!
    let half = k / 2;
    let dfact: f64 = (1..k).step_by(2).map(|v| v as f64).product();
    if half.is_multiple_of(2) {
        dfact
    } else {
        -dfact
    }
}

fn unit_covariance(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p + 1, p + 1, |i, j| {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        sign * unit_autocorr_derivative(i + j)
    })
}

fn log_det_unit_covariance(p: usize) -> f64 {
    unit_covariance(p).determinant().ln()
}

/// Builds `S(σ²) = V⁻¹` with `V[i][j] = (−1)^j ρ^{(i+j)}(0)` and
/// `ρ(h) = exp(−h²/(4σ²))`.
pub fn smoothness_precision(sigma: f64, p: usize) -> Result<TemporalPrecision> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DemError::param(format!(
            "noise smoothness must be positive, got {sigma}"
        )));
    }
    // ρ is a unit Gaussian autocorrelation in h/s with s = √2·σ, so
    // V = Λ V₀ Λ with Λ = diag(s^{-i}).
    let s = (2.0f64).sqrt() * sigma;
    let scale = DVector::from_fn(p + 1, |i, _| s.powi(-(i as i32)));
    let v0 = unit_covariance(p);
    let s0 = v0
        .clone()
        .try_inverse()
        .ok_or_else(|| DemError::numerical("temporal precision", "singular derivative covariance"))?;
    let v = DMatrix::from_fn(p + 1, p + 1, |i, j| v0[(i, j)] * scale[i] * scale[j]);
    let mut prec = DMatrix::from_fn(p + 1, p + 1, |i, j| s0[(i, j)] / (scale[i] * scale[j]));
    // V has exact zeros at odd index sums; so does its inverse.
    for i in 0..=p {
        for j in 0..=p {
            if (i + j) % 2 == 1 {
                prec[(i, j)] = 0.0;
            }
        }
    }
    let prec = (&prec + prec.transpose()) * 0.5;
    Ok(TemporalPrecision {
        sigma,
        order: p,
        v,
        s: prec,
    })
}

/// Generalized precision `S ⊗ Π`.
pub fn generalized_precision(s: &TemporalPrecision, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_spd(pi) {
        return Err(DemError::not_pd("noise precision"));
    }
    Ok(kron(s.matrix(), pi))
}

/// Noise precision `e^λ Ω`.
pub fn hyper_to_precision(lambda: f64, omega: &DMatrix<f64>) -> DMatrix<f64> {
    omega * lambda.exp()
}

/// Log-precision hyperparameters of the measurement and process noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda_z: f64,
    pub lambda_w: f64,
    pub omega_z: DMatrix<f64>,
    pub omega_w: DMatrix<f64>,
}

impl HyperParams {
    /// Identity correlation structure for `m` outputs and `n` states.
    pub fn new(lambda_z: f64, lambda_w: f64, m: usize, n: usize) -> Self {
        HyperParams {
            lambda_z,
            lambda_w,
            omega_z: DMatrix::identity(m, m),
            omega_w: DMatrix::identity(n, n),
        }
    }

    pub fn pi_z(&self) -> DMatrix<f64> {
        hyper_to_precision(self.lambda_z, &self.omega_z)
    }

    pub fn pi_w(&self) -> DMatrix<f64> {
        hyper_to_precision(self.lambda_w, &self.omega_w)
    }
}

/// A colored noise realization. Rows are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredNoise {
    pub samples: DMatrix<f64>,
    /// Samples at each end that see the zero padding of the convolution.
    pub burn_in: usize,
}

impl ColoredNoise {
    /// Rows unaffected by the zero-padded boundaries.
    pub fn interior(&self) -> DMatrix<f64> {
        let len = self.samples.nrows();
        if 2 * self.burn_in >= len {
            return DMatrix::zeros(0, self.samples.ncols());
        }
        self.samples
            .rows(self.burn_in, len - 2 * self.burn_in)
            .into_owned()
    }
}

/// Unit-energy Gaussian smoothing kernel with `2·⌈4σ/dt⌉ + 1` taps.
pub fn gaussian_kernel(dt: f64, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let half = (4.0 * sigma / dt).ceil() as i64;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|j| {
            let tau = j as f64 * dt;
            (-tau * tau / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let energy = taps.iter().map(|k| k * k).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|k| *k /= energy);
    taps
}

/// Draws white Gaussian noise with covariance `Π⁻¹` and convolves each channel
/// with [`gaussian_kernel`]. Deterministic per `seed`.
pub fn sample_colored_noise(
    steps: usize,
    dt: f64,
    sigma: f64,
    pi: &DMatrix<f64>,
    seed: u64,
) -> Result<ColoredNoise> {
    if steps == 0 {
        return Err(DemError::param("noise needs at least one step"));
    }
    if !(dt > 0.0) || !(sigma >= 0.0) {
        return Err(DemError::param(format!("invalid dt={dt} or sigma={sigma}")));
    }
    let cov = spd_inverse(pi, "noise precision")?;
    let chol = nalgebra::Cholesky::new(cov).ok_or_else(|| DemError::not_pd("noise covariance"))?;
    let l = chol.l();
    let dim = pi.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut white = DMatrix::zeros(steps, dim);
    for t in 0..steps {
        let xi = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        white.row_mut(t).copy_from(&(&l * xi).transpose());
    }
    let kernel = gaussian_kernel(dt, sigma);
    let half = (kernel.len() / 2) as isize;
    let mut out = DMatrix::zeros(steps, dim);
    for t in 0..steps as isize {
        for (idx, k) in kernel.iter().enumerate() {
            let src = t - (idx as isize - half);
            if src < 0 || src >= steps as isize {
                continue;
            }
            for ch in 0..dim {
                out[(t as usize, ch)] += k * white[(src as usize, ch)];
            }
        }
    }
    Ok(ColoredNoise {
        samples: out,
        burn_in: half as usize,
    })
}
