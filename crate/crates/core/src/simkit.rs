//! Synthetic data from the linearized quadrotor models, input preprocessing,
//! train/test splitting and CSV persistence.

use std::f64::consts::PI;
use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DemError, Result};
use crate::linalg::foh;
use crate::model::LtiModel;
use crate::noise::{gaussian_kernel, sample_colored_noise};

pub const DEFAULT_STEPS: usize = 850;
pub const DEFAULT_DT: f64 = 0.0083;
pub const DEFAULT_TRAIN_FRACTION: f64 = 700.0 / 850.0;

/// Roll-rate gain of the rotors on the roll axis.
const ROTOR_GAIN: f64 = 0.3748;
const GRAVITY: f64 = 9.81;
const DIVERGENCE_NORM: f64 = 1e8;

/// Excitation frequencies (Hz), two per input channel.
const INPUT_FREQS: [f64; 8] = [0.35, 0.6, 0.85, 1.15, 1.45, 1.8, 2.2, 2.7];

/// The linearized quadrotor model of order `k` (1 to 4); `C` is the identity.
pub fn quadrotor_system(k: usize) -> Result<LtiModel> {
    if !(1..=4).contains(&k) {
        return Err(DemError::param(format!("quadrotor system must be 1..=4, got {k}")));
    }
    let mut a = DMatrix::zeros(k, k);
    match k {
        2 => a[(0, 1)] = 1.0,
        3 => {
            a[(0, 1)] = -GRAVITY;
            a[(1, 2)] = 1.0;
        }
        4 => {
            a[(0, 1)] = 1.0;
            a[(1, 2)] = -GRAVITY;
            a[(2, 3)] = 1.0;
        }
        _ => {}
    }
    let mut b = DMatrix::zeros(k, 4);
    for (j, s) in [1.0, -1.0, -1.0, 1.0].into_iter().enumerate() {
        b[(k - 1, j)] = s * ROTOR_GAIN;
    }
    LtiModel::new(a, b, DMatrix::identity(k, k))
}

/// Scalar stable system `ẋ = −2x + 2v`, `y = x`.
pub fn toy_system() -> LtiModel {
    LtiModel::new(
        DMatrix::from_element(1, 1, -2.0),
        DMatrix::from_element(1, 1, 2.0),
        DMatrix::from_element(1, 1, 1.0),
    )
    .expect("toy system is well formed")
}

/// Builds a system from its command-line name (`1`..`4` or `toy`).
pub fn system_by_name(name: &str) -> Result<LtiModel> {
    match name {
        "toy" => Ok(toy_system()),
        other => other
            .parse::<usize>()
            .map_err(|_| DemError::param(format!("unknown system `{other}`")))
            .and_then(quadrotor_system),
    }
}

/// Input excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSignal {
    /// Per-channel sum of two sinusoids with seeded phases, preprocessed to
    /// zero mean and unit range.
    Sines,
    /// Constant level per channel, used as is.
    Constant(Vec<f64>),
}

/// Parameters of a synthetic run. A `None` log-precision disables that noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub steps: usize,
    pub dt: f64,
    /// Smoothness of the process and measurement noise; `0` is white.
    pub sigma: f64,
    pub lambda_z: Option<f64>,
    pub lambda_w: Option<f64>,
    pub seed: u64,
    pub input: InputSignal,
}

impl SimSpec {
    /// Default length and step with noise precisions `e^{λ^z}`, `e^{λ^w}`.
    pub fn new(sigma: f64, lambda_z: f64, lambda_w: f64, seed: u64) -> Self {
        SimSpec {
            steps: DEFAULT_STEPS,
            dt: DEFAULT_DT,
            sigma,
            lambda_z: Some(lambda_z),
            lambda_w: Some(lambda_w),
            seed,
            input: InputSignal::Sines,
        }
    }

    pub fn noise_free(mut self) -> Self {
        self.lambda_z = None;
        self.lambda_w = None;
        self
    }
}

/// Sidecar metadata of a stored dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    pub n: usize,
    pub r: usize,
    pub m: usize,
    pub dt: f64,
    pub sigma: f64,
    pub seed: u64,
    pub split: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub t: DVector<f64>,
    /// `T × m` outputs.
    pub y: DMatrix<f64>,
    /// `T × r` inputs.
    pub v: DMatrix<f64>,
    pub dt: f64,
    /// Number of training samples; the rest is test data.
    pub split: usize,
    pub meta: DatasetMeta,
    /// True states of a synthetic run (`T × n`); not persisted.
    pub x: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        if self.t.len() != len || self.v.nrows() != len {
            return Err(DemError::Data("time, output and input series differ in length".into()));
        }
        if self.split > len {
            return Err(DemError::Data(format!("split {} exceeds length {len}", self.split)));
        }
        if !(self.dt > 0.0) {
            return Err(DemError::Data(format!("dt must be positive, got {}", self.dt)));
        }
        for k in 1..len {
            if ((self.t[k] - self.t[k - 1]) - self.dt).abs() > 1e-9 {
                return Err(DemError::Data(format!("non-uniform time stamp at row {k}")));
            }
        }
        Ok(())
    }

    /// Training outputs and inputs.
    pub fn train(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            self.y.rows(0, self.split).into_owned(),
            self.v.rows(0, self.split).into_owned(),
        )
    }

    /// Test outputs.
    pub fn test_outputs(&self) -> DMatrix<f64> {
        self.y.rows(self.split, self.len() - self.split).into_owned()
    }

    /// Inputs for predicting the test segment: the last training sample
    /// followed by every test sample.
    pub fn prediction_inputs(&self) -> Result<DMatrix<f64>> {
        if self.split == 0 {
            return Err(DemError::Data("prediction needs at least one training sample".into()));
        }
        Ok(self.v.rows(self.split - 1, self.len() - self.split + 1).into_owned())
    }
}

/// Per-channel affine map applied by [`preprocess_inputs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputTransform {
    pub mean: Vec<f64>,
    pub range: Vec<f64>,
}

/// `v ← (v − mean) / (max − min)` per channel.
pub fn preprocess_inputs(v: &DMatrix<f64>) -> Result<(DMatrix<f64>, InputTransform)> {
    if v.nrows() == 0 {
        return Err(DemError::Data("empty input series".into()));
    }
    let mut out = v.clone();
    let mut tf = InputTransform {
        mean: Vec::with_capacity(v.ncols()),
        range: Vec::with_capacity(v.ncols()),
    };
    for j in 0..v.ncols() {
        let col = v.column(j);
        let range = col.max() - col.min();
        if !(range > 0.0) {
            return Err(DemError::Data(format!("input channel {} has zero range", j + 1)));
        }
        let mean = col.mean();
        out.column_mut(j).apply(|x| *x = (*x - mean) / range);
        tf.mean.push(mean);
        tf.range.push(range);
    }
    Ok((out, tf))
}

fn sine_inputs(steps: usize, dt: f64, r: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..2 * r).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    DMatrix::from_fn(steps, r, |t, j| {
        let time = t as f64 * dt;
        (0..2)
            .map(|k| {
                let idx = 2 * j + k;
                let f = INPUT_FREQS[idx % INPUT_FREQS.len()] * (1.0 + (idx / INPUT_FREQS.len()) as f64 * 0.13);
                (2.0 * PI * f * time + phases[idx]).sin()
            })
            .sum()
    })
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

/// Colored noise of `steps` rows with covariance `e^{−λ} I`, free of
/// convolution edge effects.
fn noise_block(steps: usize, dt: f64, sigma: f64, lambda: Option<f64>, dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    let Some(lambda) = lambda else {
        return Ok(DMatrix::zeros(steps, dim));
    };
    let burn = gaussian_kernel(dt, sigma).len() / 2;
    let pi = DMatrix::identity(dim, dim) * lambda.exp();
    let raw = sample_colored_noise(steps + 2 * burn, dt, sigma, &pi, seed)?;
    Ok(raw.samples.rows(burn, steps).into_owned())
}

/// Simulates `ẋ = A x + B v + w`, `y = C x + z` from `x(0) = 0`. The
/// input and the process noise are interpolated linearly between samples
/// and the dynamics integrated exactly (first-order hold).
pub fn generate_dataset(model: &LtiModel, system: &str, spec: &SimSpec) -> Result<Dataset> {
    let dims = model.dims();
    if spec.steps < 2 {
        return Err(DemError::param("simulation needs at least two steps"));
    }
    if !(spec.dt > 0.0 && spec.dt.is_finite()) || !(spec.sigma >= 0.0) {
        return Err(DemError::param(format!("invalid dt={} or sigma={}", spec.dt, spec.sigma)));
    }
    let v = match &spec.input {
        InputSignal::Sines => preprocess_inputs(&sine_inputs(spec.steps, spec.dt, dims.r, stream_seed(spec.seed, 0)))?.0,
        InputSignal::Constant(levels) => {
            if levels.len() != dims.r {
                return Err(DemError::param(format!(
                    "constant input has {} channels, model expects {}",
                    levels.len(),
                    dims.r
                )));
            }
            DMatrix::from_fn(spec.steps, dims.r, |_, j| levels[j])
        }
    };
    let w = noise_block(spec.steps, spec.dt, spec.sigma, spec.lambda_w, dims.n, stream_seed(spec.seed, 1))?;
    let z = noise_block(spec.steps, spec.dt, spec.sigma, spec.lambda_z, dims.m, stream_seed(spec.seed, 2))?;

    // Input and process noise are interpolated linearly between samples.
    let (phi, p0, p1) = foh(&model.a, spec.dt);
    let drive = |k: usize| &model.b * v.row(k).transpose() + w.row(k).transpose();
    let mut x = DVector::zeros(dims.n);
    let mut xs = DMatrix::zeros(spec.steps, dims.n);
    let mut y = DMatrix::zeros(spec.steps, dims.m);
    for k in 0..spec.steps {
        if k > 0 {
            x = &phi * &x + &p0 * drive(k - 1) + &p1 * drive(k);
            if !(x.norm() <= DIVERGENCE_NORM) {
                return Err(DemError::numerical("simulation", format!("state diverged at step {k}")));
            }
        }
        xs.row_mut(k).copy_from(&x.transpose());
        y.row_mut(k).copy_from(&(&model.c * &x + z.row(k).transpose()).transpose());
    }
    let split = ((spec.steps as f64) * DEFAULT_TRAIN_FRACTION).round() as usize;
    Ok(Dataset {
        t: DVector::from_fn(spec.steps, |k, _| k as f64 * spec.dt),
        y,
        v,
        dt: spec.dt,
        split,
        meta: DatasetMeta {
            system: system.to_string(),
            n: dims.n,
            r: dims.r,
            m: dims.m,
            dt: spec.dt,
            sigma: spec.sigma,
            seed: spec.seed,
            split,
        },
        x: Some(xs),
    })
}

/// Contiguous split with `round(fraction·T)` training samples. `min_len` is
/// the smallest segment accepted on either side.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, min_len: usize) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DemError::param(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let len = ds.len();
    let cut = (len as f64 * train_fraction).round() as usize;
    if cut < min_len || len - cut < min_len {
        return Err(DemError::param(format!(
            "split of {len} samples at {cut} leaves a segment shorter than {min_len}"
        )));
    }
    let part = |start: usize, count: usize| {
        let mut meta = ds.meta.clone();
        meta.split = count;
        Dataset {
            t: ds.t.rows(start, count).into_owned(),
            y: ds.y.rows(start, count).into_owned(),
            v: ds.v.rows(start, count).into_owned(),
            dt: ds.dt,
            split: count,
            meta,
            x: ds.x.as_ref().map(|x| x.rows(start, count).into_owned()),
        }
    };
    Ok((part(0, cut), part(cut, len - cut)))
}

/// Path of the metadata sidecar stored next to a CSV file.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// Writes `t, y1..ym, v1..vr` and the metadata sidecar.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=ds.y.ncols()).map(|i| format!("y{i}")));
    header.extend((1..=ds.v.ncols()).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..ds.len() {
        let mut row = vec![ds.t[k].to_string()];
        row.extend(ds.y.row(k).iter().map(|v| v.to_string()));
        row.extend(ds.v.row(k).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    let meta = serde_json::to_string_pretty(&ds.meta).map_err(|e| DemError::Io(e.to_string()))?;
    std::fs::write(sidecar_path(path), meta + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> DemError {
    match e.kind() {
        csv::ErrorKind::Io(_) => DemError::Io(e.to_string()),
        _ => DemError::Data(e.to_string()),
    }
}

/// Reads a dataset written by [`save_csv`]. Without a sidecar the split uses
/// the default training fraction.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| DemError::Io(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(DemError::Data("missing column `t`".into()));
    }
    let m = header.iter().filter(|h| h.starts_with('y')).count();
    let r = header.iter().filter(|h| h.starts_with('v')).count();
    if m == 0 {
        return Err(DemError::Data("missing column `y1`".into()));
    }
    if r == 0 {
        return Err(DemError::Data("missing column `v1`".into()));
    }
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=m).map(|i| format!("y{i}")))
        .chain((1..=r).map(|i| format!("v{i}")))
        .collect();
    if let Some(miss) = expected.iter().find(|c| !header.contains(c)) {
        return Err(DemError::Data(format!("missing column `{miss}`")));
    }
    if header != expected {
        return Err(DemError::Data(format!(
            "unexpected header `{}`; expected `{}`",
            header.join(","),
            expected.join(",")
        )));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != expected.len() {
            return Err(DemError::Data(format!("row {} has {} fields, expected {}", i + 1, rec.len(), expected.len())));
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.parse::<f64>()
                    .map_err(|_| DemError::Data(format!("row {} column `{}`: cannot parse `{s}`", i + 1, expected[j])))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    if rows.len() < 2 {
        return Err(DemError::Data("dataset needs at least two rows".into()));
    }
    let len = rows.len();
    let t = DVector::from_fn(len, |k, _| rows[k][0]);
    let y = DMatrix::from_fn(len, m, |k, j| rows[k][1 + j]);
    let v = DMatrix::from_fn(len, r, |k, j| rows[k][1 + m + j]);
    let dt = t[1] - t[0];

    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = std::fs::read_to_string(&side)?;
        let meta: DatasetMeta = serde_json::from_str(&text)
            .map_err(|e| DemError::Data(format!("{}: {e}", side.display())))?;
        if meta.m != m || meta.r != r {
            return Err(DemError::Data("sidecar dimensions disagree with the CSV header".into()));
        }
        meta
    } else {
        DatasetMeta {
            system: "unknown".into(),
            n: m,
            r,
            m,
            dt,
            sigma: dt,
            seed: 0,
            split: (len as f64 * DEFAULT_TRAIN_FRACTION).round() as usize,
        }
    };
    let ds = Dataset {
        t,
        y,
        v,
        dt: meta.dt,
        split: meta.split,
        meta,
        x: None,
    };
    ds.validate()?;
    Ok(ds)
}
