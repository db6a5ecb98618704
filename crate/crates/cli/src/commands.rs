use std::path::{Path, PathBuf};
use std::time::Instant;

use dem::baseline::EmResult;
use dem::diagnostics::{autocorrelation, fe_landscape, gaussianity, write_landscape_csv, LandscapeGrid, MetricReport};
use dem::engine::DemResult;
use dem::order::{select_order, sweep_config, OrderSweepResult};
use dem::par;
use dem::simkit::{generate_dataset, load_csv, save_csv, sidecar_path, system_by_name, Dataset, DatasetMeta, SimSpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::fit::{dem_setup, fit, predict, FitDetail, FittedModel, Method};
use crate::manifest::{manifest_ref, write_json, RunManifest};
use crate::{BenchmarkArgs, IdentifyArgs, LandscapeArgs, OrderArgs, PredictArgs, SimulateArgs};

pub const SCHEMA_VERSION: u32 = 1;

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration serializes")
}

fn load_dataset(path: &Path, manifest: &mut RunManifest) -> Result<Dataset> {
    let ds = load_csv(path)?;
    manifest.add_input(path)?;
    let side = sidecar_path(path);
    if side.exists() {
        manifest.add_input(&side)?;
    }
    Ok(ds)
}

fn load_config(path: Option<&Path>, manifest: &mut RunManifest) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    if let Some(p) = path {
        manifest.add_input(p)?;
    }
    Ok(cfg)
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Data(e.to_string())
}

pub fn simulate(args: &SimulateArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let model = system_by_name(&args.system)?;
    let mut spec = SimSpec::new(args.sigma_mult * args.dt, args.lambda_z, args.lambda_w, args.seed);
    spec.steps = args.steps;
    spec.dt = args.dt;
    let ds = generate_dataset(&model, &args.system, &spec)?;
    save_csv(&ds, &args.out)?;

    let mut manifest = RunManifest::new("simulate", to_value(&spec), vec![args.seed]);
    manifest.add_output(&args.out);
    manifest.add_output(&sidecar_path(&args.out));
    manifest.finish(start.elapsed(), &args.out)?;
    println!("wrote {} ({} rows, system {})", args.out.display(), ds.len(), args.system);
    Ok(args.out.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

/// Result file of `identify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifyOutput {
    pub schema_version: u32,
    pub method: Method,
    pub status: Status,
    pub error: Option<String>,
    pub dataset: DatasetMeta,
    pub config: RunConfig,
    /// `free_action` for DEM, `log_likelihood` for EM.
    pub trace_kind: String,
    pub trace: Vec<f64>,
    pub model: Option<FittedModel>,
    pub final_state: Option<DVector<f64>>,
    pub dem: Option<DemResult>,
    pub em: Option<EmResult>,
    pub manifest: String,
}

pub fn identify(args: &IdentifyArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("identify", serde_json::Value::Null, Vec::new());
    let cfg = load_config(args.config.as_deref(), &mut manifest)?;
    let ds = load_dataset(&args.data, &mut manifest)?;
    let cfg = args.method.resolve(&cfg);
    manifest.config = to_value(&cfg);
    manifest.seeds = vec![cfg.dem.seed];

    let trace_kind = match args.method {
        Method::Em => "log_likelihood",
        _ => "free_action",
    };
    let mut out = IdentifyOutput {
        schema_version: SCHEMA_VERSION,
        method: args.method,
        status: Status::Ok,
        error: None,
        dataset: ds.meta.clone(),
        config: cfg.clone(),
        trace_kind: trace_kind.into(),
        trace: Vec::new(),
        model: None,
        final_state: None,
        dem: None,
        em: None,
        manifest: manifest_ref(&args.out),
    };
    let outcome = match fit(args.method, &ds, &cfg) {
        Ok(f) => {
            out.trace = f.trace;
            out.model = Some(f.model);
            out.final_state = Some(f.final_state);
            match f.detail {
                FitDetail::Dem(r) => out.dem = Some(*r),
                FitDetail::Em(r) => out.em = Some(*r),
            }
            Ok(())
        }
        Err(fail) => {
            out.status = Status::Failed;
            out.error = Some(fail.error.to_string());
            out.trace = fail.trace;
            Err(fail.error)
        }
    };
    write_json(&args.out, &out)?;
    manifest.add_output(&args.out);
    manifest.finish(start.elapsed(), &args.out)?;
    outcome?;
    println!(
        "{}: {} iterations, final {} {:.6e}",
        args.method.name(),
        out.trace.len(),
        trace_kind,
        out.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(args.out.clone())
}

/// Metrics file of `predict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionReport {
    pub schema_version: u32,
    pub method: Method,
    pub steps: usize,
    pub metrics: MetricReport,
    pub manifest: String,
}

pub fn report_path(prediction: &Path) -> PathBuf {
    prediction.with_extension("report.json")
}

/// Lags checked on the first-channel prediction residual.
const RESIDUAL_LAGS: usize = 20;

pub fn predict_cmd(args: &PredictArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("predict", serde_json::Value::Null, Vec::new());
    let text = std::fs::read_to_string(&args.model)
        .map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", args.model.display())))?;
    let fitted: IdentifyOutput = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid model file {}: {e}", args.model.display())))?;
    manifest.add_input(&args.model)?;
    let (Status::Ok, Some(model), Some(x0)) = (fitted.status, &fitted.model, &fitted.final_state) else {
        return Err(CliError::Usage("model file holds a failed fit".into()));
    };
    let ds = load_dataset(&args.data, &mut manifest)?;
    manifest.config = serde_json::json!({ "steps": args.steps, "method": fitted.method });

    let y_hat = predict(model, x0, &ds, args.steps)?;
    let y = ds.test_outputs().rows(0, args.steps).into_owned();
    let mut metrics = MetricReport::from_predictions(&y, &y_hat)?;
    let residual: Vec<f64> = (0..args.steps).map(|i| y[(i, 0)] - y_hat[(i, 0)]).collect();
    metrics.autocorrelation = autocorrelation(&residual, RESIDUAL_LAGS.min(args.steps.saturating_sub(1))).ok();
    metrics.gaussianity = gaussianity(&residual).ok();

    write_prediction_csv(&args.out, &ds, &y_hat)?;
    let report = PredictionReport {
        schema_version: SCHEMA_VERSION,
        method: fitted.method,
        steps: args.steps,
        metrics,
        manifest: manifest_ref(&args.out),
    };
    let rpath = report_path(&args.out);
    write_json(&rpath, &report)?;
    manifest.add_output(&args.out);
    manifest.add_output(&rpath);
    manifest.finish(start.elapsed(), &args.out)?;
    println!("{}-step MSPE {:.6e}", args.steps, report.metrics.mspe);
    Ok(args.out.clone())
}

/// Writes `t, y1..ym` rows of the predicted test outputs.
fn write_prediction_csv(path: &Path, ds: &Dataset, y_hat: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=y_hat.ncols()).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..y_hat.nrows() {
        let mut row = vec![ds.t[ds.split + i].to_string()];
        row.extend(y_hat.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub method: Method,
    pub mspe: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub mean_mspe: Option<f64>,
    pub total_mspe: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub schema_version: u32,
    pub simulation: SimSpec,
    pub system: String,
    pub config: RunConfig,
    pub steps: usize,
    pub rows: Vec<BenchmarkRow>,
    pub summary: Vec<MethodSummary>,
    pub manifest: String,
}

fn benchmark_seed(args: &BenchmarkArgs, cfg: &RunConfig, seed: u64) -> Vec<BenchmarkRow> {
    let row = |method, res: Result<f64>| match res {
        Ok(v) => BenchmarkRow { seed, method, mspe: Some(v), error: None },
        Err(e) => BenchmarkRow { seed, method, mspe: None, error: Some(e.to_string()) },
    };
    let ds = system_by_name(&args.system)
        .and_then(|model| generate_dataset(&model, &args.system, &simulation_spec(args, seed)))
        .map_err(CliError::from);
    let ds = match ds {
        Ok(ds) => ds,
        Err(e) => {
            let msg = e.to_string();
            return Method::ALL.iter().map(|&m| row(m, Err(CliError::Data(msg.clone())))).collect();
        }
    };
    Method::ALL
        .iter()
        .map(|&method| {
            let mut cfg = method.resolve(cfg);
            cfg.dem.seed = seed;
            let res = fit(method, &ds, &cfg).map_err(|f| f.error).and_then(|f| {
                let y_hat = predict(&f.model, &f.final_state, &ds, args.steps)?;
                let y = ds.test_outputs().rows(0, args.steps).into_owned();
                Ok(dem::diagnostics::mspe(&y, &y_hat)?)
            });
            row(method, res)
        })
        .collect()
}

fn simulation_spec(args: &BenchmarkArgs, seed: u64) -> SimSpec {
    let mut spec = SimSpec::new(args.sigma_mult * args.dt, args.lambda_z, args.lambda_w, seed);
    spec.dt = args.dt;
    spec
}

pub fn summarize(rows: &[BenchmarkRow]) -> Vec<MethodSummary> {
    Method::ALL
        .iter()
        .map(|&method| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.method == method).filter_map(|r| r.mspe).collect();
            let total: f64 = vals.iter().sum();
            MethodSummary {
                method,
                runs: vals.len(),
                mean_mspe: (!vals.is_empty()).then(|| total / vals.len() as f64),
                total_mspe: total,
            }
        })
        .collect()
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<PathBuf> {
    let start = Instant::now();
    if args.seeds.is_empty() {
        return Err(CliError::Usage("benchmark needs at least one seed".into()));
    }
    system_by_name(&args.system)?;
    let mut manifest = RunManifest::new("benchmark", serde_json::Value::Null, args.seeds.clone());
    let cfg = load_config(args.config.as_deref(), &mut manifest)?;

    let rows: Vec<BenchmarkRow> = par::map(&args.seeds, |&seed| benchmark_seed(args, &cfg, seed))
        .into_iter()
        .flatten()
        .collect();
    if rows.iter().all(|r| r.mspe.is_none()) {
        let first = rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(CliError::Numerical(format!("every benchmark run failed: {first}")));
    }
    let table = BenchmarkTable {
        schema_version: SCHEMA_VERSION,
        simulation: simulation_spec(args, args.seeds[0]),
        system: args.system.clone(),
        config: cfg.clone(),
        steps: args.steps,
        summary: summarize(&rows),
        rows,
        manifest: manifest_ref(&args.out),
    };
    manifest.config = serde_json::json!({
        "run": cfg,
        "system": args.system,
        "sigma_mult": args.sigma_mult,
        "lambda_z": args.lambda_z,
        "lambda_w": args.lambda_w,
        "steps": args.steps,
    });
    write_json(&args.out, &table)?;
    let csv_path = args.out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_error)?;
    w.write_record(["seed", "method", "mspe"]).map_err(csv_error)?;
    for r in &table.rows {
        let mspe = r.mspe.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.seed.to_string(), r.method.name().to_string(), mspe]).map_err(csv_error)?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    manifest.add_output(&args.out);
    manifest.add_output(&csv_path);
    manifest.finish(start.elapsed(), &args.out)?;
    for s in &table.summary {
        match s.mean_mspe {
            Some(m) => println!("{:>9}: mean MSPE {m:.6e} over {} runs", s.method.name(), s.runs),
            None => println!("{:>9}: every run failed", s.method.name()),
        }
    }
    Ok(args.out.clone())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderOutput {
    pub schema_version: u32,
    pub dataset: DatasetMeta,
    pub config: RunConfig,
    pub max_order: usize,
    pub sweep: OrderSweepResult,
    pub manifest: String,
}

pub fn order(args: &OrderArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("order", serde_json::Value::Null, Vec::new());
    let mut cfg = load_config(args.config.as_deref(), &mut manifest)?;
    let ds = load_dataset(&args.data, &mut manifest)?;
    cfg.dem = sweep_config(&cfg.dem);
    cfg.known_c = false;
    manifest.config = to_value(&cfg);
    manifest.seeds = vec![cfg.dem.seed];

    let (y, v) = ds.train();
    let sweep = select_order(&y, ds.dt, v.ncols(), &cfg.dem, args.max_order, args.threshold)?;
    let out = OrderOutput {
        schema_version: SCHEMA_VERSION,
        dataset: ds.meta.clone(),
        config: cfg,
        max_order: args.max_order,
        sweep,
        manifest: manifest_ref(&args.out),
    };
    write_json(&args.out, &out)?;
    manifest.add_output(&args.out);
    manifest.finish(start.elapsed(), &args.out)?;
    for (n, f) in out.sweep.curve() {
        match f {
            Some(f) => println!("n={n}: F_bar {f:.6e}"),
            None => println!("n={n}: failed"),
        }
    }
    println!("selected order {}{}", out.sweep.selected, if out.sweep.degenerate { " (degenerate)" } else { "" });
    Ok(args.out.clone())
}

pub fn landscape(args: &LandscapeArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("landscape", serde_json::Value::Null, Vec::new());
    let cfg = load_config(args.config.as_deref(), &mut manifest)?;
    let ds = load_dataset(&args.data, &mut manifest)?;
    let grid = LandscapeGrid {
        a_min: args.a_min,
        a_max: args.a_max,
        a_steps: args.a_steps,
        b_min: args.b_min,
        b_max: args.b_max,
        b_steps: args.b_steps,
    };
    grid.validate()?;
    manifest.config = serde_json::json!({ "run": cfg, "grid": grid });
    manifest.seeds = vec![cfg.dem.seed];

    let setup = dem_setup(&ds, &cfg)?;
    let res = dem::engine::run_dem(&setup.y, ds.dt, setup.dims, &cfg.dem, &setup.priors)?;
    let points = fe_landscape(&setup.y, &res, &setup.priors, &grid)?;
    write_landscape_csv(&points, &args.out)?;
    manifest.add_output(&args.out);
    manifest.finish(start.elapsed(), &args.out)?;
    if let Some(best) = dem::diagnostics::landscape_argmax(&points) {
        println!(
            "grid maximum at A={}, B={}; fit at A={}, B={}",
            best.a, best.b, res.model.a[(0, 0)], res.model.b[(0, 0)]
        );
    }
    Ok(args.out.clone())
}
