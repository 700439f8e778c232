//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit code:
//! 0 success, 1 usage error, 2 data error, 3 non-convergence under `--strict`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use crate::calibration::{calibrate, solve_c0, solve_c1, ConstantsTable, TABLE_ARES, TABLE_QS};
use crate::diagnostics::{
    asymptotic_covariance, breakdown_lower_bound, hyperplane_max_count, qq_data, DEFAULT_FLAG_LEVEL, HYPERPLANE_LIMIT,
};
use crate::error::MmError;
use crate::evaluation::{cross_validate, run_simulation, Estimator, Scenario, SCHEMA_VERSION};
use crate::initial_s::{s_estimate, SConfig};
use crate::mm::{mm_fit, FitResult, MMConfig};
use crate::model::Dataset;
use crate::scale::DEFAULT_B;

pub const INTERCEPT_NAME: &str = "(intercept)";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data { code: &'static str, message: String },
    NotConverged,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data { .. } => 2,
            CliError::NotConverged => 3,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data { code, .. } => code,
            CliError::NotConverged => "not_converged",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Data { message, .. } => message.clone(),
            CliError::NotConverged => "IRWLS stopped at --max-iters before converging".into(),
        }
    }

    fn data(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Data { code, message: message.into() }
    }
}

impl From<MmError> for CliError {
    fn from(e: MmError) -> Self {
        match e {
            MmError::Contract(m) => CliError::Usage(m),
            other => CliError::Data { code: other.code(), message: other.to_string() },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mmreg", version, about = "Robust MM-estimation for multivariate linear regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit an MM-estimate to a CSV file.
    Fit(FitArgs),
    /// Solve for the tuning constants c0 and c1.
    Calibrate(CalibrateArgs),
    /// Monte Carlo study under point-mass contamination.
    Simulate(SimulateArgs),
    /// k-fold cross-validation of prediction errors.
    Crossval(CrossvalArgs),
    /// QQ data, breakdown bound and asymptotic covariance of a fit.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated response columns.
    #[arg(long, value_delimiter = ',', required = true)]
    responses: Vec<String>,
    /// Comma-separated predictor columns.
    #[arg(long, value_delimiter = ',', required = true)]
    predictors: Vec<String>,
    /// Append a constant-1 predictor.
    #[arg(long)]
    intercept: bool,
}

#[derive(Debug, Args)]
struct TuningArgs {
    /// Gaussian efficiency of the coefficient estimate.
    #[arg(long, default_value_t = 0.90)]
    are: f64,
    #[arg(long, default_value_t = DEFAULT_B)]
    b: f64,
    /// Override the scale kernel constant.
    #[arg(long)]
    c0: Option<f64>,
    /// Override the loss kernel constant.
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Elemental subsamples for the initial S-estimate.
    #[arg(long, default_value_t = 2000)]
    subsamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TuningArgs {
    fn mm_config(&self, q: usize) -> CliResult<MMConfig> {
        let c0 = match self.c0 {
            Some(c) => c,
            None => match ConstantsTable::shipped().c0(q, self.b) {
                Some(c) => c,
                None => solve_c0(q, self.b)?,
            },
        };
        let c1 = match self.c1 {
            Some(c) => c,
            None => match ConstantsTable::shipped().c1(q, self.are) {
                Some(c) => c,
                None => solve_c1(q, self.are)?,
            },
        };
        let mut cfg = MMConfig::new(self.b, c0, c1)?;
        cfg.delta = self.delta;
        cfg.max_iters = self.max_iters;
        cfg.validate()?;
        Ok(cfg)
    }

    fn s_config(&self) -> SConfig {
        SConfig { n_subsamples: self.subsamples, seed: self.seed, b: self.b, ..SConfig::default() }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    tuning: TuningArgs,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Exit with status 3 if the iterations do not converge.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 2)]
    q: usize,
    #[arg(long, default_value_t = 0.90)]
    are: f64,
    #[arg(long, default_value_t = DEFAULT_B)]
    b: f64,
    /// Print the full constants table in the shipped text format instead.
    #[arg(long)]
    regenerate: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long, default_value_t = 2)]
    q: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 0.0)]
    contamination: f64,
    #[arg(long, default_value_t = 10.0)]
    x0: f64,
    /// Comma-separated slopes of the outlier (default 0, 0.4, ..., 5.6).
    #[arg(long, value_delimiter = ',')]
    m_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.90)]
    are: f64,
    #[arg(long, default_value_t = 2000)]
    subsamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path (default: standard output).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the long-format CSV table here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    tuning: TuningArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Chi-squared level above which observations are flagged.
    #[arg(long, default_value_t = DEFAULT_FLAG_LEVEL)]
    flag_level: f64,
    /// Write the QQ table as CSV here.
    #[arg(long)]
    qq_csv: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Reads the named columns of a headed CSV file.
pub fn parse_csv(path: &Path, responses: &[String], predictors: &[String], intercept: bool) -> CliResult<Dataset> {
    if responses.is_empty() || predictors.is_empty() {
        return Err(CliError::Usage("need at least one response and one predictor column".into()));
    }
    if let Some(dup) = responses.iter().find(|r| predictors.contains(r)) {
        return Err(CliError::Usage(format!("column '{dup}' is both a response and a predictor")));
    }
    let file = File::open(path).map_err(|e| CliError::data("io", format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| CliError::data("parse", format!("cannot read header: {e}")))?.clone();
    if headers.is_empty() {
        return Err(CliError::data("parse", format!("{} is empty", path.display())));
    }
    let locate = |name: &String| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("column '{name}' not found in {}", path.display())))
    };
    let y_idx = responses.iter().map(locate).collect::<CliResult<Vec<_>>>()?;
    let x_idx = predictors.iter().map(locate).collect::<CliResult<Vec<_>>>()?;

    let mut x_rows = Vec::new();
    let mut y_rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| CliError::data("parse", format!("line {line}: {e}")))?;
        let cell = |c: usize| -> CliResult<f64> {
            let raw = record.get(c).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(CliError::data(
                    "parse",
                    format!("line {line}, column '{}': '{raw}' is not a finite number", &headers[c]),
                )),
            }
        };
        let mut xr = x_idx.iter().map(|&c| cell(c)).collect::<CliResult<Vec<_>>>()?;
        if intercept {
            xr.push(1.0);
        }
        y_rows.push(y_idx.iter().map(|&c| cell(c)).collect::<CliResult<Vec<_>>>()?);
        x_rows.push(xr);
    }
    if x_rows.is_empty() {
        return Err(CliError::data("parse", format!("{} has no data rows", path.display())));
    }
    Dataset::from_rows(&x_rows, &y_rows).map_err(|e| CliError::data(e.code(), e.to_string()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn write_json<T: Serialize>(value: &T, output: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data("io", e.to_string()))?;
    write_text(&(text + "\n"), output)
}

fn write_text(text: &str, output: Option<&Path>) -> CliResult<()> {
    let res = match output {
        Some(p) => std::fs::write(p, text),
        None => io::stdout().write_all(text.as_bytes()),
    };
    res.map_err(|e| CliError::data("io", format!("cannot write output: {e}")))
}

fn create(path: &Path) -> CliResult<File> {
    File::create(path).map_err(|e| CliError::data("io", format!("cannot create {}: {e}", path.display())))
}

fn predictor_names(d: &DataArgs) -> Vec<String> {
    let mut names = d.predictors.clone();
    if d.intercept {
        names.push(INTERCEPT_NAME.to_string());
    }
    names
}

fn fit_json(fit: &FitResult) -> serde_json::Value {
    json!({
        "coef": rows(fit.coef.matrix()),
        "scatter": rows(&fit.scatter),
        "shape": rows(fit.shape.matrix()),
        "scale": fit.scale,
        "distances": fit.distances,
        "weights": fit.weights,
        "objective_trace": fit.objective_trace,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "exact_fit": fit.exact_fit,
        "fell_back": fit.fell_back,
    })
}

fn fit_dataset(data: &Dataset, tuning: &TuningArgs) -> CliResult<(MMConfig, FitResult)> {
    let cfg = tuning.mm_config(data.q())?;
    let init = s_estimate(data, &tuning.s_config(), &cfg.scale_kernel())?;
    Ok((cfg, mm_fit(data, &cfg, &init)?))
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let data = parse_csv(&a.data.input, &a.data.responses, &a.data.predictors, a.data.intercept)?;
    let (cfg, fit) = fit_dataset(&data, &a.tuning)?;
    let out = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "n": data.n(),
        "responses": a.data.responses,
        "predictors": predictor_names(&a.data),
        "config": cfg,
        "seed": a.tuning.seed,
        "fit": fit_json(&fit),
    });
    write_json(&out, a.output.as_deref())?;
    if a.strict && !fit.converged {
        return Err(CliError::NotConverged);
    }
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> CliResult<()> {
    if a.regenerate {
        let table = ConstantsTable::generate(&TABLE_QS, a.b, &TABLE_ARES)?;
        return write_text(&table.render(), a.output.as_deref());
    }
    let res = calibrate(a.q, a.b, a.are)?;
    let mut value = serde_json::to_value(res).map_err(|e| CliError::data("io", e.to_string()))?;
    value["schema_version"] = json!(SCHEMA_VERSION);
    write_json(&value, a.output.as_deref())
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let sc = Scenario {
        n: a.n,
        contamination_fraction: a.contamination,
        x0: a.x0,
        m_grid: a.m_grid.clone().unwrap_or_else(Scenario::default_m_grid),
        target_are: a.are,
        n_subsamples: a.subsamples,
        ..Scenario::clean(a.p, a.q, a.reps, a.seed)
    };
    let cfg = MMConfig::new(DEFAULT_B, solve_c0(a.q, DEFAULT_B)?, solve_c1(a.q, a.are)?)?;
    let report = run_simulation(&sc, &cfg)?;
    if let Some(path) = &a.csv {
        report.write_csv(create(path)?)?;
    }
    write_json(&report, a.output.as_deref())
}

fn cmd_crossval(a: &CrossvalArgs) -> CliResult<()> {
    let data = parse_csv(&a.data.input, &a.data.responses, &a.data.predictors, a.data.intercept)?;
    let cfg = a.tuning.mm_config(data.q())?;
    let report = cross_validate(&data, a.folds, &cfg, a.tuning.seed, a.tuning.subsamples, &Estimator::ALL)?;
    write_json(&report, a.output.as_deref())
}

fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult<()> {
    let data = parse_csv(&a.data.input, &a.data.responses, &a.data.predictors, a.data.intercept)?;
    let (cfg, fit) = fit_dataset(&data, &a.tuning)?;
    if fit.exact_fit {
        return Err(CliError::data("exact_fit", "the fit is exact; distances and covariance are undefined"));
    }
    let qq = qq_data(&fit, data.q(), a.flag_level)?;
    if let Some(path) = &a.qq_csv {
        qq.write_csv(create(path)?)?;
    }
    let k_n = if data.n() <= HYPERPLANE_LIMIT { Some(hyperplane_max_count(&data, HYPERPLANE_LIMIT)?) } else { None };
    // subsampling S-estimators reach the maximal breakdown point at b = 0.5
    let bound = match k_n {
        Some(k) if 2 * k < data.n() => Some(breakdown_lower_bound(data.n(), k, cfg.b.min(1.0 - cfg.b))?),
        _ => None,
    };
    let cov = asymptotic_covariance(&data, &fit, &cfg.loss_kernel())?;
    let out = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "diagnose",
        "responses": a.data.responses,
        "predictors": predictor_names(&a.data),
        "config": cfg,
        "qq": qq,
        "hyperplane_max_count": k_n,
        "breakdown_lower_bound": bound,
        "asymptotic_covariance": { "scalar_factor": cov.scalar_factor, "v": rows(&cov.v) },
        "fit": fit_json(&fit),
    });
    write_json(&out, a.output.as_deref())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Crossval(a) => cmd_crossval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(CliError::Usage(format!("cannot start {t} threads: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn intercept_appends_constant_column() {
        let f = csv_file("x,y\n1,2\n2,3.5\n3,4\n");
        let d = parse_csv(f.path(), &names(&["y"]), &names(&["x"]), true).unwrap();
        assert_eq!((d.n(), d.p(), d.q()), (3, 2, 1));
        assert_eq!(d.x().column(1).iter().copied().collect::<Vec<_>>(), vec![1.0; 3]);
    }

    #[test]
    fn nan_cell_is_a_located_data_error() {
        let f = csv_file("x,y\n1,2\n2,NaN\n3,4\n");
        let err = parse_csv(f.path(), &names(&["y"]), &names(&["x"]), true).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.message();
        assert!(msg.contains("line 3") && msg.contains("'y'"), "{msg}");
    }

    #[test]
    fn empty_file_and_missing_column() {
        let f = csv_file("");
        assert_eq!(parse_csv(f.path(), &names(&["y"]), &names(&["x"]), false).unwrap_err().exit_code(), 2);
        let f = csv_file("x,y\n");
        assert_eq!(parse_csv(f.path(), &names(&["y"]), &names(&["x"]), false).unwrap_err().exit_code(), 2);
        let f = csv_file("x,y\n1,2\n");
        assert_eq!(parse_csv(f.path(), &names(&["z"]), &names(&["x"]), false).unwrap_err().exit_code(), 1);
        assert_eq!(parse_csv(f.path(), &names(&["x"]), &names(&["x"]), false).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mmreg", "fit", "--input", "a.csv", "--predictors", "x"]), 1);
        assert_eq!(run(["mmreg", "bogus"]), 1);
        assert_eq!(run(["mmreg", "calibrate", "--are", "1.5"]), 1);
        assert_eq!(run(["mmreg", "--help"]), 0);
    }
}
