//! Replication studies on the simulation designs.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::PathBuf;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{context_for, count_zeros, mad, median, rame, ErrorMetricContext, MIN_MC};
use crate::model::{Dataset, MeModel, QuadratureSettings};
use crate::problem::{PathSettings, Problem};
use crate::score::ScoreEngine;
use crate::semipar::{KernelFamily, KernelSpec};
use crate::sim::{gen_example1_with, gen_example2_with, stream_rng, truth, DesignName, ERROR_SD, RNG_NAME};
use crate::solver::{FitResult, SolverConfig};
use crate::tuning::Criterion;

/// Default seed of the `C` matrices, kept apart from the replication streams.
pub const DEFAULT_C_SEED: u64 = 0x5eed_c0de;

/// An estimator reported by a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Unpenalized locally efficient fit.
    #[serde(rename = "EE")]
    Ee,
    #[serde(rename = "GCV")]
    Gcv,
    #[serde(rename = "BIC")]
    Bic,
}

impl Method {
    pub fn criterion(&self) -> Option<Criterion> {
        match self {
            Method::Ee => None,
            Method::Gcv => Some(Criterion::Gcv),
            Method::Bic => Some(Criterion::Bic),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EE" => Ok(Method::Ee),
            "GCV" => Ok(Method::Gcv),
            "BIC" => Ok(Method::Bic),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (expected EE, GCV or BIC)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ee => "EE",
            Method::Gcv => "GCV",
            Method::Bic => "BIC",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub design: DesignName,
    pub n: usize,
    pub replications: usize,
    #[serde(rename = "criteria")]
    pub methods: Vec<Method>,
    pub seed: u64,
    pub solver: SolverConfig,
    pub path: PathSettings,
    pub kernel: KernelFamily,
    /// Bandwidth of the profiled designs; `None` uses the default rule on each dataset.
    pub bandwidth: Option<f64>,
    pub error_sd: f64,
    pub quad: QuadratureSettings,
    /// Monte Carlo size of `C_X` and `C_W`.
    pub n_mc: usize,
    pub c_seed: u64,
    /// Directory caching the `C` matrices.
    pub c_cache: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            design: DesignName::Example1,
            n: 1000,
            replications: 200,
            methods: vec![Method::Ee, Method::Gcv, Method::Bic],
            seed: 1,
            solver: SolverConfig::default(),
            path: PathSettings::default(),
            kernel: KernelFamily::Quartic,
            bandwidth: None,
            error_sd: ERROR_SD,
            quad: QuadratureSettings::default(),
            n_mc: 100_000,
            c_seed: DEFAULT_C_SEED,
            c_cache: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.replications < 1 {
            return bad("replications must be at least 1");
        }
        if self.n < 50 {
            return bad("n must be at least 50");
        }
        if self.methods.is_empty() {
            return bad("at least one criterion is required");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::InvalidConfig(format!("criterion {m} listed twice")));
            }
        }
        if self.n_mc < MIN_MC {
            return Err(Error::InvalidConfig(format!("n_mc must be at least {MIN_MC}")));
        }
        if !(self.error_sd >= 0.0) {
            return bad("error_sd must be nonnegative");
        }
        let p = &self.path;
        if p.points < 1 || !(p.lo > 0.0) || !(p.hi >= p.lo) {
            return bad("the lambda grid needs points >= 1 and 0 < min <= max");
        }
        if let Some(h) = self.bandwidth {
            KernelSpec::new(self.kernel, h)?;
        }
        self.solver.validate()
    }

    /// The model fitted to every replication.
    pub fn model(&self) -> Result<MeModel> {
        let model = match self.design {
            DesignName::Example1 => MeModel::named("logistic_quadratic", 7, self.error_sd)?,
            DesignName::Example2 => MeModel::named("partially_linear_logistic", 9, self.error_sd)?,
        };
        Ok(model.with_quadrature(self.quad))
    }

    /// Coefficient labels in `β` order.
    pub fn labels(&self) -> Result<Vec<String>> {
        let mut labels = self.model()?.design.labels();
        if self.design == DesignName::Example2 {
            labels.pop();
        }
        Ok(labels)
    }

    /// Replication `r` draws its data from stream `r + 1` of `seed`.
    pub fn dataset(&self, r: usize) -> Dataset {
        let mut rng = stream_rng(self.seed, r as u64 + 1);
        match self.design {
            DesignName::Example1 => gen_example1_with(self.n, &mut rng).0,
            DesignName::Example2 => gen_example2_with(self.n, &mut rng).0,
        }
    }

    pub fn kernel_for(&self, data: &Dataset) -> Result<Option<KernelSpec>> {
        match &data.smoothing {
            None => Ok(None),
            Some(z) => {
                let h = match self.bandwidth {
                    Some(h) => h,
                    None => KernelSpec::default_bandwidth(z)?,
                };
                Ok(Some(KernelSpec::new(self.kernel, h)?))
            }
        }
    }
}

/// One estimator on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: Method,
    /// `0` for the unpenalized fit.
    pub lambda: f64,
    pub rame: f64,
    pub rame_w: f64,
    /// Estimated zeros among the true zeros.
    pub correct_zeros: usize,
    /// Estimated zeros among the true nonzeros.
    pub wrong_zeros: usize,
    /// Largest estimating-equation residual over the converged fits of the replication.
    pub max_residual: f64,
    pub beta: Vec<f64>,
    pub se: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub replications: usize,
    pub median_rame: f64,
    pub mad_rame: f64,
    pub median_rame_w: f64,
    pub mad_rame_w: f64,
    pub mean_c: f64,
    pub mean_e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSummary {
    pub method: Method,
    pub index: usize,
    pub label: String,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    /// Mean and SD of the sandwich SE over replications where the coefficient was kept.
    pub mean_se: f64,
    pub sd_se: f64,
    pub se_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub design: DesignName,
    pub n: usize,
    pub seed: u64,
    pub configured: usize,
    pub labels: Vec<String>,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<Failure>,
}

/// Runs every replication of `config` and collects the raw records.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let ctx = context_for(config.design, config.n_mc, config.c_seed, config.c_cache.as_deref())?;
    let outcomes: Vec<Result<Vec<ReplicationRecord>>> = (0..config.replications)
        .into_par_iter()
        .map(|r| replicate(config, r, &ctx))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(recs) => records.extend(recs),
            Err(e) => {
                warn!("replication {r} failed: {e}");
                failures.push(Failure {
                    replication: r,
                    message: e.to_string(),
                });
            }
        }
    }
    if failures.len() * 5 > config.replications {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: config.replications,
        });
    }
    Ok(StudyReport {
        design: config.design,
        n: config.n,
        seed: config.seed,
        configured: config.replications,
        labels: config.labels()?,
        records,
        failures,
    })
}

/// Fits one replication with every configured method.
pub fn replicate(config: &StudyConfig, r: usize, ctx: &ErrorMetricContext) -> Result<Vec<ReplicationRecord>> {
    let data = config.dataset(r);
    let engine = ScoreEngine::new(config.model()?)?;
    let problem = Problem::new(&engine, &data, config.kernel_for(&data)?)?;
    let cfg = &config.solver;
    let mut full = problem.unpenalized(cfg)?;
    if !full.converged {
        return Err(Error::NonConvergence {
            iterations: full.iterations,
            last_step: full.trace.last().copied().unwrap_or(f64::NAN),
        });
    }
    full.cov = Some(problem.sandwich(&full, &cfg.unpenalized)?);
    let mut max_residual = full.residual;

    let trace = if config.methods.iter().any(|m| m.criterion().is_some()) {
        let t = problem.select_lambda(&full, &config.path, cfg)?;
        for row in &t.rows {
            if let Some(f) = row.fit.as_ref().filter(|f| f.converged) {
                max_residual = max_residual.max(f.residual);
            }
        }
        Some(t)
    } else {
        None
    };

    let mut out = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let fit = match (method.criterion(), &trace) {
            (Some(c), Some(t)) => {
                let mut fit: FitResult = t
                    .selected(c)
                    .and_then(|row| row.fit.clone())
                    .ok_or(Error::AllFitsFailed)?;
                fit.cov = Some(problem.sandwich(&fit, &cfg.unpenalized)?);
                fit
            }
            _ => full.clone(),
        };
        let (correct_zeros, wrong_zeros) = count_zeros(&fit.beta, &ctx.zero_set);
        out.push(ReplicationRecord {
            replication: r,
            method,
            lambda: fit.lambda,
            rame: rame(&fit, &full, ctx, false)?,
            rame_w: rame(&fit, &full, ctx, true)?,
            correct_zeros,
            wrong_zeros,
            max_residual,
            se: fit.standard_errors(),
            beta: fit.beta,
        });
    }
    info!("replication {r} done");
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// SD with divisor `max(n − 1, 1)`, so a single value has SD 0.
fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    let ss = v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    (ss / (v.len().saturating_sub(1)).max(1) as f64).sqrt()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StudyReport {
    /// Methods in the order they first appear in the records.
    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = Vec::new();
        for r in &self.records {
            if !m.contains(&r.method) {
                m.push(r.method);
            }
        }
        m
    }

    fn of(&self, method: Method) -> Vec<&ReplicationRecord> {
        self.records.iter().filter(|r| r.method == method).collect()
    }

    pub fn summaries(&self) -> Vec<MethodSummary> {
        self.methods()
            .into_iter()
            .map(|method| {
                let recs = self.of(method);
                let rame: Vec<f64> = recs.iter().map(|r| r.rame).collect();
                let rame_w: Vec<f64> = recs.iter().map(|r| r.rame_w).collect();
                let c: Vec<f64> = recs.iter().map(|r| r.correct_zeros as f64).collect();
                let e: Vec<f64> = recs.iter().map(|r| r.wrong_zeros as f64).collect();
                MethodSummary {
                    method,
                    replications: recs.len(),
                    median_rame: median(&rame),
                    mad_rame: mad(&rame),
                    median_rame_w: median(&rame_w),
                    mad_rame_w: mad(&rame_w),
                    mean_c: mean(&c),
                    mean_e: mean(&e),
                }
            })
            .collect()
    }

    pub fn summary(&self, method: Method) -> Option<MethodSummary> {
        self.summaries().into_iter().find(|s| s.method == method)
    }

    pub fn coefficients(&self) -> Vec<CoefficientSummary> {
        let beta0 = truth(self.design).beta;
        let mut out = Vec::new();
        for method in self.methods() {
            let recs = self.of(method);
            for (j, label) in self.labels.iter().enumerate() {
                let b: Vec<f64> = recs.iter().map(|r| r.beta[j]).collect();
                let se: Vec<f64> = recs.iter().filter_map(|r| r.se[j]).collect();
                out.push(CoefficientSummary {
                    method,
                    index: j,
                    label: label.clone(),
                    truth: beta0[j],
                    bias: mean(&b) - beta0[j],
                    sd: sd(&b),
                    mean_se: if se.is_empty() { f64::NAN } else { mean(&se) },
                    sd_se: if se.is_empty() { f64::NAN } else { sd(&se) },
                    se_count: se.len(),
                });
            }
        }
        out
    }

    pub fn coefficient(&self, method: Method, index: usize) -> Option<CoefficientSummary> {
        self.coefficients()
            .into_iter()
            .find(|c| c.method == method && c.index == index)
    }

    /// Raw records, one row per replication and method. Floats are written in
    /// shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.labels.len();
        let mut header: Vec<String> = [
            "design",
            "n",
            "seed",
            "replication",
            "method",
            "lambda",
            "rame",
            "rame_w",
            "c",
            "e",
            "max_residual",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..d).map(|j| format!("beta_{j}")));
        header.extend((0..d).map(|j| format!("se_{j}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                self.design.to_string(),
                self.n.to_string(),
                self.seed.to_string(),
                r.replication.to_string(),
                r.method.to_string(),
                r.lambda.to_string(),
                r.rame.to_string(),
                r.rame_w.to_string(),
                r.correct_zeros.to_string(),
                r.wrong_zeros.to_string(),
                r.max_residual.to_string(),
            ];
            row.extend(r.beta.iter().map(|b| b.to_string()));
            row.extend(r.se.iter().map(|s| fmt_opt(*s)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads records written by [`StudyReport::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Vec<ReplicationRecord>> {
        let mut rd = csv::Reader::from_reader(input);
        let width = rd.headers()?.len();
        if width < 11 || (width - 11) % 2 != 0 {
            return Err(Error::Parse(format!("unexpected record width {width}")));
        }
        let d = (width - 11) / 2;
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        let mut out = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let beta = (0..d).map(|j| num(&rec[11 + j])).collect::<Result<Vec<_>>>()?;
            let se = (0..d)
                .map(|j| match &rec[11 + d + j] {
                    "" => Ok(None),
                    s => num(s).map(Some),
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(ReplicationRecord {
                replication: int(&rec[3])?,
                method: rec[4].parse()?,
                lambda: num(&rec[5])?,
                rame: num(&rec[6])?,
                rame_w: num(&rec[7])?,
                correct_zeros: int(&rec[8])?,
                wrong_zeros: int(&rec[9])?,
                max_residual: num(&rec[10])?,
                beta,
                se,
            });
        }
        Ok(out)
    }

    /// Model-error table followed by the bias table of the true nonzero coefficients.
    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "## {} (n = {}, {} of {} replications, seed {}, generator {})\n",
            self.design,
            self.n,
            self.configured - self.failures.len(),
            self.configured,
            self.seed,
            RNG_NAME
        );
        let _ = writeln!(s, "| Method | MRME (MAD) | MRME_W (MAD) | C | E |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for m in self.summaries() {
            let _ = writeln!(
                s,
                "| {} | {:.3} ({:.3}) | {:.3} ({:.3}) | {:.3} | {:.3} |",
                m.method, m.median_rame, m.mad_rame, m.median_rame_w, m.mad_rame_w, m.mean_c, m.mean_e
            );
        }
        let _ = writeln!(s, "\n| Method | Coefficient | True | Bias | SD | SE (SD of SE) |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for c in self.coefficients().into_iter().filter(|c| c.truth != 0.0) {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.3} | {:.3} | {:.3} ({:.3}) |",
                c.method, c.label, c.truth, c.bias, c.sd, c.mean_se, c.sd_se
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\nFailed replications:");
            for f in &self.failures {
                let _ = writeln!(s, "- {}: {}", f.replication, f.message);
            }
        }
        s
    }
}
