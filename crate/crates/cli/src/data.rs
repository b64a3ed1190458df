//! Analysis configuration and CSV input.

use std::path::{Path, PathBuf};

use measel::model::{Design, Family, Term};
use measel::problem::PathSettings;
use measel::semipar::{KernelFamily, KernelSpec};
use measel::{Dataset, Error, MeModel, NormalError, QuadratureSettings, Result, SolverConfig};
use serde::{Deserialize, Serialize};

/// Everything `analyze`, `fit` and `tune` need to set up a model on user data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub input: Option<PathBuf>,
    pub response: String,
    pub surrogate: String,
    /// Error-free covariate columns; empty means every other column.
    pub covariates: Vec<String>,
    /// Column entering through an unspecified smooth function.
    pub smooth: Option<String>,
    pub kernel: KernelFamily,
    pub bandwidth: Option<f64>,
    pub sigma_u: Option<f64>,
    pub error_variance: Option<f64>,
    /// Design terms over `w` and the covariates, or the single entry `saturated`.
    pub terms: Vec<String>,
    /// Labels of terms exempt from the penalty.
    pub unpenalized: Vec<String>,
    /// Center and scale `W` and the covariates to unit variance (the error SD
    /// is scaled with `W`).
    pub standardize: bool,
    pub path: PathSettings,
    pub solver: SolverConfig,
    pub quad: QuadratureSettings,
    pub out: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            input: None,
            response: "y".into(),
            surrogate: "w".into(),
            covariates: Vec::new(),
            smooth: None,
            kernel: KernelFamily::Quartic,
            bandwidth: None,
            sigma_u: None,
            error_variance: None,
            terms: Vec::new(),
            unpenalized: Vec::new(),
            standardize: true,
            path: PathSettings::default(),
            solver: SolverConfig::default(),
            quad: QuadratureSettings::default(),
            out: None,
        }
    }
}

/// A parsed CSV: header and numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(input: R) -> Result<Table> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let names: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if names.is_empty() {
            return Err(Error::Parse("CSV has no header".into()));
        }
        let mut columns = vec![Vec::new(); names.len()];
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            for (k, cell) in rec.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Parse(format!(
                        "row {}: column `{}` has non-numeric value `{cell}`",
                        line + 1,
                        names[k]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!(
                        "row {}: column `{}` is not finite",
                        line + 1,
                        names[k]
                    )));
                }
                columns[k].push(v);
            }
        }
        Ok(Table { names, columns })
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.columns[k].as_slice())
            .ok_or_else(|| {
                Error::InvalidConfig(format!("no column named `{name}` (columns: {})", self.names.join(", ")))
            })
    }
}

/// Data, model and options ready for fitting.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub model: MeModel,
    pub kernel: Option<KernelSpec>,
    pub labels: Vec<String>,
    /// Mean and SD used to standardize `W` (`(0, 1)` when not standardized).
    pub w_center: f64,
    pub w_scale: f64,
}

fn is_binary(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0 || x == 1.0)
}

/// Centers `v` and scales it to unit sample SD; returns the mean and SD.
fn standardize(v: &mut [f64], name: &str) -> Result<(f64, f64)> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if s.is_nan() || s <= 0.0 {
        return Err(Error::InvalidConfig(format!("column `{name}` has no spread")));
    }
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
    Ok((m, s))
}

/// Interactions of `w` with every covariate, the intercept (unless a smooth term
/// takes its place), main effects, squares of non-binary covariates and pairwise products.
pub fn saturated_terms(covariates: &[String], binary: &[bool], intercept: bool) -> Vec<String> {
    let mut t = vec!["w".to_string()];
    t.extend(covariates.iter().map(|c| format!("w*{c}")));
    if intercept {
        t.push("1".into());
    }
    t.extend(covariates.iter().cloned());
    for (c, &b) in covariates.iter().zip(binary) {
        if !b {
            t.push(format!("{c}^2"));
        }
    }
    for i in 0..covariates.len() {
        for j in i + 1..covariates.len() {
            t.push(format!("{}*{}", covariates[i], covariates[j]));
        }
    }
    t
}

impl AnalysisConfig {
    pub fn error_sd(&self) -> Result<f64> {
        match (self.sigma_u, self.error_variance) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "give either sigma_u or error_variance, not both".into(),
            )),
            (Some(s), None) => Ok(s),
            (None, Some(v)) if v >= 0.0 => Ok(v.sqrt()),
            (None, Some(v)) => Err(Error::InvalidConfig(format!("error variance must be >= 0, got {v}"))),
            (None, None) => Err(Error::InvalidConfig(
                "the measurement error SD (sigma_u) is required".into(),
            )),
        }
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("an input CSV is required".into()))?;
        self.prepare_table(&Table::read(input)?)
    }

    pub fn prepare_table(&self, table: &Table) -> Result<Prepared> {
        let sd = self.error_sd()?;
        NormalError::new(sd)?;
        if self.terms.is_empty() {
            return Err(Error::InvalidConfig("the term list is empty".into()));
        }
        let y = table.column(&self.response)?.to_vec();
        if !is_binary(&y) {
            return Err(Error::InvalidConfig(format!(
                "response `{}` must be 0/1",
                self.response
            )));
        }
        let mut w = table.column(&self.surrogate)?.to_vec();
        let roles = [Some(&self.response), Some(&self.surrogate), self.smooth.as_ref()];
        let covariates: Vec<String> = if self.covariates.is_empty() {
            table
                .names
                .iter()
                .filter(|n| !roles.contains(&Some(*n)))
                .cloned()
                .collect()
        } else {
            self.covariates.clone()
        };
        for c in &covariates {
            if roles.contains(&Some(c)) {
                return Err(Error::InvalidConfig(format!("column `{c}` has two roles")));
            }
        }
        let mut cols = covariates
            .iter()
            .map(|c| table.column(c).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let binary: Vec<bool> = cols.iter().map(|c| is_binary(c)).collect();
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidConfig("need at least two rows".into()));
        }
        let (mut center, mut scale) = (0.0, 1.0);
        if self.standardize {
            (center, scale) = standardize(&mut w, &self.surrogate)?;
            for (c, name) in cols.iter_mut().zip(&covariates) {
                standardize(c, name)?;
            }
        }
        let mut cov = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            cov.extend(cols.iter().map(|c| c[i]));
        }
        let mut data = Dataset::new(w, cov, covariates.len(), y)?;

        let specs: Vec<String> = if self.terms.len() == 1 && self.terms[0] == "saturated" {
            saturated_terms(&covariates, &binary, self.smooth.is_none())
        } else {
            self.terms.clone()
        };
        let mut terms = specs
            .iter()
            .map(|s| Term::parse(s, &covariates))
            .collect::<Result<Vec<_>>>()?;
        let kernel = match &self.smooth {
            Some(name) => {
                let z = table.column(name)?.to_vec();
                let h = match self.bandwidth {
                    Some(h) => h,
                    None => KernelSpec::default_bandwidth(&z)?,
                };
                data = data.with_smoothing(z)?;
                terms.push(Term::new("theta", 0, vec![]));
                Some(KernelSpec::new(self.kernel, h)?)
            }
            None => None,
        };
        let design = Design::new(terms, covariates.len())?;
        let mut labels = design.labels();
        if kernel.is_some() {
            labels.pop();
        }
        let model = MeModel::new(Family::Logistic, design, NormalError::new(sd / scale)?).with_quadrature(self.quad);
        Ok(Prepared {
            data,
            model,
            kernel,
            labels,
            w_center: center,
            w_scale: scale,
        })
    }

    /// Solver settings with the unpenalized labels resolved against `labels`.
    pub fn solver_for(&self, labels: &[String]) -> Result<SolverConfig> {
        let mut cfg = self.solver.clone();
        cfg.unpenalized = self
            .unpenalized
            .iter()
            .map(|l| {
                labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::InvalidConfig(format!("unpenalized term `{l}` is not in the model")))
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "y,w,a,b\n1,0.5,1,2.0\n0,-1.5,0,1.0\n1,1.0,1,-0.5\n";

    fn config() -> AnalysisConfig {
        AnalysisConfig {
            sigma_u: Some(0.1),
            terms: vec!["w".into(), "1".into(), "a".into()],
            ..Default::default()
        }
    }

    #[test]
    fn saturated_layout() {
        let cols = vec!["z1".to_string(), "z2".to_string(), "z3".to_string()];
        let t = saturated_terms(&cols, &[true, false, true], true);
        assert_eq!(
            t,
            ["w", "w*z1", "w*z2", "w*z3", "1", "z1", "z2", "z3", "z2^2", "z1*z2", "z1*z3", "z2*z3"]
        );
    }

    #[test]
    fn standardizes_columns_and_scales_error() {
        let t = Table::from_reader(CSV.as_bytes()).unwrap();
        let p = config().prepare_table(&t).unwrap();
        let m = p.data.w.iter().sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-15);
        let a: Vec<f64> = (0..3).map(|i| p.data.covariates_of(i)[0]).collect();
        assert!((a[0] - a[2]).abs() < 1e-15 && a[0] > 0.0 && a[1] < 0.0);
        assert!((p.model.error.sd - 0.1 / p.w_scale).abs() < 1e-15);
        assert_eq!(p.data.n_covariates, 2);
        assert_eq!(p.labels, ["w", "1", "a"]);
    }

    #[test]
    fn input_errors() {
        let t = Table::from_reader(CSV.as_bytes()).unwrap();
        let empty = AnalysisConfig {
            terms: vec![],
            ..config()
        };
        assert!(matches!(empty.prepare_table(&t), Err(Error::InvalidConfig(_))));
        let missing = AnalysisConfig {
            response: "q".into(),
            ..config()
        };
        assert!(missing.prepare_table(&t).is_err());
        let unknown = AnalysisConfig {
            terms: vec!["w*c".into()],
            ..config()
        };
        assert!(matches!(unknown.prepare_table(&t), Err(Error::Parse(_))));
        assert!(Table::from_reader("y,w\n1,NA\n".as_bytes()).is_err());
        assert!(Table::from_reader("y,w\n1\n".as_bytes()).is_err());
    }
}
