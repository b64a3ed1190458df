//! Command-line front end: replication studies and fits on CSV data.

pub mod data;

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use measel::problem::{PathSettings, Problem};
use measel::study::{run_study, Method, StudyConfig};
use measel::tuning::{Criterion, TuningTrace};
use measel::{Error, FitResult, PenaltySpec, Result, ScoreEngine};

pub use data::{AnalysisConfig, Prepared, Table};

#[derive(Debug, Parser)]
#[command(
    name = "measel",
    version,
    about = "Variable selection in logistic measurement-error models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a replication study on a simulation design.
    Simulate(SimulateArgs),
    /// Fit the unpenalized, GCV- and BIC-tuned models to a CSV file.
    Analyze(DataArgs),
    /// Fit at a single lambda.
    Fit(FitArgs),
    /// Fit the lambda grid and export the tuning trace.
    Tune(TuneArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct PathArgs {
    /// Penalty family: scad or l1.
    #[arg(long)]
    pub penalty: Option<String>,
    /// SCAD shape parameter.
    #[arg(long)]
    pub a: Option<f64>,
    /// Smallest grid lambda as a fraction of max |beta_EE|.
    #[arg(long)]
    pub grid_min: Option<f64>,
    /// Largest grid lambda as a fraction of max |beta_EE|.
    #[arg(long)]
    pub grid_max: Option<f64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
}

impl PathArgs {
    fn apply(&self, path: &mut PathSettings) -> Result<()> {
        if let Some(p) = &self.penalty {
            path.family = p.parse()?;
        }
        if let Some(a) = self.a {
            path.a = a;
        }
        if let Some(v) = self.grid_min {
            path.lo = v;
        }
        if let Some(v) = self.grid_max {
            path.hi = v;
        }
        if let Some(v) = self.grid_points {
            path.points = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    /// JSON study configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// example1 or example2.
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of EE, GCV, BIC.
    #[arg(long)]
    pub criteria: Option<String>,
    #[arg(long)]
    pub sigma_u: Option<f64>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Monte Carlo size of the model-error matrices.
    #[arg(long)]
    pub n_mc: Option<usize>,
    /// Directory caching the model-error matrices.
    #[arg(long)]
    pub c_cache: Option<PathBuf>,
    #[command(flatten)]
    pub path: PathArgs,
    /// Output directory for records.csv and table.md.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// JSON analysis configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Binary response column.
    #[arg(long)]
    pub response: Option<String>,
    /// Error-prone surrogate column.
    #[arg(long)]
    pub surrogate: Option<String>,
    /// Comma-separated error-free covariate columns (default: all others).
    #[arg(long)]
    pub covariates: Option<String>,
    /// Column entering through a smooth function.
    #[arg(long)]
    pub smooth: Option<String>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Measurement error SD.
    #[arg(long)]
    pub sigma_u: Option<f64>,
    /// Measurement error variance (alternative to --sigma-u).
    #[arg(long)]
    pub error_variance: Option<f64>,
    /// Comma-separated terms such as `w,w*z1,1,z1,z2^2`, or `saturated`.
    #[arg(long)]
    pub terms: Option<String>,
    /// Comma-separated labels of terms exempt from the penalty.
    #[arg(long)]
    pub unpenalized: Option<String>,
    /// Keep the surrogate and covariates on their original scales.
    #[arg(long)]
    pub no_standardize: bool,
    #[command(flatten)]
    pub path: PathArgs,
    /// Output directory (analyze) or file (fit, tune).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Regularization parameter; 0 gives the unpenalized fit.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Criterion whose choice is reported: gcv or bic.
    #[arg(long, default_value = "bic")]
    pub criterion: String,
}

/// Process exit status of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidModel(_)
        | Error::InvalidPenalty(_)
        | Error::Parse(_)
        | Error::Io(_)
        | Error::DimensionMismatch { .. } => 2,
        Error::TooManyFailures { .. } => 3,
        _ => 4,
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

impl SimulateArgs {
    pub fn study_config(&self) -> Result<StudyConfig> {
        let mut c: StudyConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => StudyConfig::default(),
        };
        if let Some(d) = &self.design {
            c.design = d.parse()?;
        }
        if let Some(v) = self.n {
            c.n = v;
        }
        if let Some(v) = self.reps {
            c.replications = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.criteria {
            c.methods = split_list(v).iter().map(|m| m.parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = self.sigma_u {
            c.error_sd = v;
        }
        if self.bandwidth.is_some() {
            c.bandwidth = self.bandwidth;
        }
        if let Some(v) = self.n_mc {
            c.n_mc = v;
        }
        if self.c_cache.is_some() {
            c.c_cache = self.c_cache.clone();
        }
        self.path.apply(&mut c.path)?;
        c.validate()?;
        Ok(c)
    }
}

impl DataArgs {
    pub fn analysis_config(&self) -> Result<AnalysisConfig> {
        let mut c: AnalysisConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => AnalysisConfig::default(),
        };
        if self.input.is_some() {
            c.input = self.input.clone();
        }
        if let Some(v) = &self.response {
            c.response = v.clone();
        }
        if let Some(v) = &self.surrogate {
            c.surrogate = v.clone();
        }
        if let Some(v) = &self.covariates {
            c.covariates = split_list(v);
        }
        if self.smooth.is_some() {
            c.smooth = self.smooth.clone();
        }
        if self.bandwidth.is_some() {
            c.bandwidth = self.bandwidth;
        }
        if self.sigma_u.is_some() || self.error_variance.is_some() {
            c.sigma_u = self.sigma_u;
            c.error_variance = self.error_variance;
        }
        if let Some(v) = &self.terms {
            c.terms = split_list(v);
        }
        if let Some(v) = &self.unpenalized {
            c.unpenalized = split_list(v);
        }
        if self.no_standardize {
            c.standardize = false;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        self.path.apply(&mut c.path)?;
        PenaltySpec::new(c.path.family, 0.0, c.path.a)?;
        Ok(c)
    }
}

/// Runs a parsed command, writing the human-readable summary to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let text = match &cli.command {
        Command::Simulate(a) => cmd_simulate(&a.study_config()?, a.out.as_deref())?,
        Command::Analyze(a) => cmd_analyze(&a.analysis_config()?)?.render(),
        Command::Fit(a) => cmd_fit(&a.data.analysis_config()?, a.lambda)?,
        Command::Tune(a) => {
            let criterion: Criterion = a.criterion.parse()?;
            cmd_tune(&a.data.analysis_config()?, criterion)?
        }
    };
    stdout.write_all(text.as_bytes())?;
    Ok(())
}

/// Runs the study and writes `records.csv` and `table.md` into `out` when given.
pub fn cmd_simulate(config: &StudyConfig, out: Option<&Path>) -> Result<String> {
    let report = run_study(config)?;
    let table = report.markdown();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        report.write_csv(create(&dir.join("records.csv"))?)?;
        create(&dir.join("table.md"))?.write_all(table.as_bytes())?;
    }
    Ok(table)
}

struct Session<'a> {
    problem: Problem<'a>,
    cfg: measel::SolverConfig,
}

fn with_problem<T>(config: &AnalysisConfig, f: impl FnOnce(&Prepared, &Session) -> Result<T>) -> Result<T> {
    let prep = config.prepare()?;
    let engine = ScoreEngine::new(prep.model.clone())?;
    let cfg = config.solver_for(&prep.labels)?;
    let problem = Problem::new(&engine, &prep.data, prep.kernel)?;
    f(&prep, &Session { problem, cfg })
}

fn unpenalized(s: &Session) -> Result<FitResult> {
    let mut full = s.problem.unpenalized(&s.cfg)?;
    if !full.converged {
        return Err(Error::NonConvergence {
            iterations: full.iterations,
            last_step: full.trace.last().copied().unwrap_or(f64::NAN),
        });
    }
    full.cov = Some(s.problem.sandwich(&full, &s.cfg.unpenalized)?);
    Ok(full)
}

fn selected(s: &Session, trace: &TuningTrace, c: Criterion) -> Result<FitResult> {
    let mut fit = trace
        .selected(c)
        .and_then(|r| r.fit.clone())
        .ok_or(Error::AllFitsFailed)?;
    fit.cov = Some(s.problem.sandwich(&fit, &s.cfg.unpenalized)?);
    Ok(fit)
}

/// `estimate (se)`, or `0 (NA)` for an excluded term.
pub fn cell(fit: &FitResult, j: usize) -> String {
    if fit.is_zero(j) {
        return "0 (NA)".into();
    }
    match fit.standard_errors()[j] {
        Some(se) => format!("{:.4} ({:.4})", fit.beta[j], se),
        None => format!("{:.4} (NA)", fit.beta[j]),
    }
}

fn write_fit_csv<W: Write>(out: W, labels: &[String], fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["term", "estimate", "se"])?;
    let se = fit.standard_errors();
    for (j, l) in labels.iter().enumerate() {
        let s = se[j].map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        w.write_record([l.clone(), fit.beta[j].to_string(), s])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_fit(config: &AnalysisConfig, lambda: f64) -> Result<String> {
    let spec = PenaltySpec::new(config.path.family, lambda, config.path.a)?;
    with_problem(config, |prep, s| {
        let full = unpenalized(s)?;
        let fit = if lambda == 0.0 {
            full
        } else {
            let (mut fit, _) = s.problem.penalized(&full, &spec, &s.cfg)?;
            fit.cov = Some(s.problem.sandwich(&fit, &s.cfg.unpenalized)?);
            fit
        };
        if let Some(path) = &config.out {
            write_fit_csv(create(path)?, &prep.labels, &fit)?;
        }
        let mut text = format!("lambda = {lambda}, converged = {}\n", fit.converged);
        for (j, l) in prep.labels.iter().enumerate() {
            let _ = writeln!(text, "{l:>12}  {}", cell(&fit, j));
        }
        Ok(text)
    })
}

pub fn cmd_tune(config: &AnalysisConfig, criterion: Criterion) -> Result<String> {
    with_problem(config, |_, s| {
        let full = unpenalized(s)?;
        let trace = s.problem.select_lambda(&full, &config.path, &s.cfg)?;
        match &config.out {
            Some(path) => trace.write_csv(create(path)?)?,
            None => trace.write_csv(std::io::stdout())?,
        }
        let row = trace.selected(criterion).ok_or(Error::AllFitsFailed)?;
        Ok(format!("selected lambda ({criterion}) = {}\n", row.lambda))
    })
}

/// Results of `analyze`: one fit per method plus the tuning trace.
pub struct Analysis {
    pub labels: Vec<String>,
    pub fits: Vec<(Method, FitResult)>,
    pub trace: TuningTrace,
    pub w_scale: f64,
}

impl Analysis {
    pub fn fit(&self, m: Method) -> &FitResult {
        &self.fits.iter().find(|(x, _)| *x == m).expect("all methods fitted").1
    }

    /// Three-column table of `estimate (se)`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Term | EE | GCV | BIC |");
        let _ = writeln!(s, "|---|---|---|---|");
        for (j, l) in self.labels.iter().enumerate() {
            let cells: Vec<String> = self.fits.iter().map(|(_, f)| cell(f, j)).collect();
            let _ = writeln!(s, "| {l} | {} |", cells.join(" | "));
        }
        let _ = writeln!(
            s,
            "\nlambda: GCV = {}, BIC = {}; W scaled by 1/{}",
            self.fit(Method::Gcv).lambda,
            self.fit(Method::Bic).lambda,
            self.w_scale
        );
        s
    }

    pub fn write_results<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["term", "method", "estimate", "se"])?;
        for (j, l) in self.labels.iter().enumerate() {
            for (m, f) in &self.fits {
                let se = f.standard_errors()[j]
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "NA".into());
                w.write_record([l.clone(), m.to_string(), f.beta[j].to_string(), se])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// GCV and BIC over the grid, each rescaled to `[0, 1]` over its finite values.
    pub fn write_scores<W: Write>(&self, out: W) -> Result<()> {
        let norm = |v: Vec<f64>| {
            let fin = v.iter().copied().filter(|x| x.is_finite());
            let lo = fin.clone().fold(f64::INFINITY, f64::min);
            let hi = fin.fold(f64::NEG_INFINITY, f64::max);
            v.into_iter()
                .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
                .collect::<Vec<_>>()
        };
        let gcv = norm(self.trace.rows.iter().map(|r| r.gcv).collect());
        let bic = norm(self.trace.rows.iter().map(|r| r.bic).collect());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "gcv", "bic"])?;
        for (k, r) in self.trace.rows.iter().enumerate() {
            w.write_record([r.lambda.to_string(), gcv[k].to_string(), bic[k].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Unpenalized, GCV and BIC fits. With `out` set, writes `results.csv`,
/// `scores.csv` and `trace.csv` there.
pub fn cmd_analyze(config: &AnalysisConfig) -> Result<Analysis> {
    let analysis = with_problem(config, |prep, s| {
        let full = unpenalized(s)?;
        let trace = s.problem.select_lambda(&full, &config.path, &s.cfg)?;
        let gcv = selected(s, &trace, Criterion::Gcv)?;
        let bic = selected(s, &trace, Criterion::Bic)?;
        Ok(Analysis {
            labels: prep.labels.clone(),
            fits: vec![(Method::Ee, full), (Method::Gcv, gcv), (Method::Bic, bic)],
            trace,
            w_scale: prep.w_scale,
        })
    })?;
    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir)?;
        analysis.write_results(create(&dir.join("results.csv"))?)?;
        analysis.write_scores(create(&dir.join("scores.csv"))?)?;
        analysis.trace.write_csv(create(&dir.join("trace.csv"))?)?;
    }
    Ok(analysis)
}
