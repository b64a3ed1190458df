//! Measurement-error model specification.
//!
//! The main model is a GLM whose linear predictor is a polynomial in the
//! error-prone covariate `x` with covariate-dependent coefficients:
//! `η(x, z) = Σ_t β_t · x^{p_t} · m_t(z)`, where each design term `t` carries an
//! `x` power `p_t` and a monomial `m_t` in the error-free covariates. The error
//! model is additive normal `W = X + U`, and the posited law for `X` is either
//! normal or an arbitrary density.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::InterpKind;

/// Largest supported power of `x` in a design term, plus one.
pub const MAX_POW: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Family {
    Logistic,
    Gaussian { sd: f64 },
}

impl Family {
    pub fn mean(&self, eta: f64) -> f64 {
        match self {
            Family::Logistic => logistic(eta),
            Family::Gaussian { .. } => eta,
        }
    }

    pub fn log_density(&self, y: f64, eta: f64) -> f64 {
        match *self {
            Family::Logistic => y * eta - softplus(eta),
            Family::Gaussian { sd } => {
                let r = (y - eta) / sd;
                -0.5 * r * r - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
        }
    }

    pub fn density(&self, y: f64, eta: f64) -> f64 {
        self.log_density(y, eta).exp()
    }

    /// `∂ log p(y | η) / ∂η`.
    pub fn residual(&self, y: f64, eta: f64) -> f64 {
        match *self {
            Family::Logistic => y - logistic(eta),
            Family::Gaussian { sd } => (y - eta) / (sd * sd),
        }
    }

    /// `∂² log p(y | η) / ∂η²` (free of `y` for both families).
    pub fn residual_slope(&self, eta: f64) -> f64 {
        match *self {
            Family::Logistic => {
                let mu = logistic(eta);
                -mu * (1.0 - mu)
            }
            Family::Gaussian { sd } => -1.0 / (sd * sd),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Family::Logistic)
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One column of the design: `x^x_power · Π_k z[covariates[k]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub label: String,
    pub x_power: usize,
    pub covariates: Vec<usize>,
}

impl Term {
    pub fn new(label: impl Into<String>, x_power: usize, covariates: Vec<usize>) -> Self {
        Self {
            label: label.into(),
            x_power,
            covariates,
        }
    }

    pub fn factor(&self, z: &[f64]) -> f64 {
        self.covariates.iter().map(|&k| z[k]).product()
    }

    /// Parses products of factors such as `1`, `w`, `x^2`, `w*z1`, `z2^2`.
    /// `x` and `w` both name the error-prone covariate.
    pub fn parse(spec: &str, columns: &[String]) -> Result<Term> {
        let spec = spec.trim();
        if spec.is_empty() {
            return Err(Error::Parse("empty term".into()));
        }
        let mut x_power = 0;
        let mut covariates = Vec::new();
        for factor in spec.split('*') {
            let factor = factor.trim();
            let (name, power) = match factor.split_once('^') {
                Some((n, p)) => {
                    let p: usize = p
                        .trim()
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad power in term `{spec}`")))?;
                    (n.trim(), p)
                }
                None => (factor, 1),
            };
            match name {
                "1" | "intercept" => {}
                "x" | "w" => x_power += power,
                col => {
                    let idx = columns
                        .iter()
                        .position(|c| c == col)
                        .ok_or_else(|| Error::Parse(format!("term `{spec}` references unknown column `{col}`")))?;
                    covariates.extend(std::iter::repeat_n(idx, power));
                }
            }
        }
        if x_power >= MAX_POW {
            return Err(Error::Parse(format!(
                "term `{spec}` has x power {x_power}; at most {} supported",
                MAX_POW - 1
            )));
        }
        Ok(Term::new(spec, x_power, covariates))
    }
}

/// Ordered list of design terms over `n_covariates` error-free covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    terms: Vec<Term>,
    n_covariates: usize,
}

impl Design {
    pub fn new(terms: Vec<Term>, n_covariates: usize) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidModel("design has no terms".into()));
        }
        for t in &terms {
            if t.x_power >= MAX_POW {
                return Err(Error::InvalidModel(format!(
                    "term {} has x power {}",
                    t.label, t.x_power
                )));
            }
            if let Some(&k) = t.covariates.iter().find(|&&k| k >= n_covariates) {
                return Err(Error::InvalidModel(format!(
                    "term {} references covariate {k} of {n_covariates}",
                    t.label
                )));
            }
        }
        Ok(Self { terms, n_covariates })
    }

    /// Logistic-quadratic layout `(1, x, x², z_1, …, z_k)`.
    pub fn quadratic(n_covariates: usize) -> Self {
        let mut terms = vec![
            Term::new("1", 0, vec![]),
            Term::new("x", 1, vec![]),
            Term::new("x^2", 2, vec![]),
        ];
        terms.extend((0..n_covariates).map(|k| Term::new(format!("z{}", k + 1), 0, vec![k])));
        Self::new(terms, n_covariates).expect("valid by construction")
    }

    /// `(1, x, z_1, …, z_k)`.
    pub fn linear(n_covariates: usize) -> Self {
        let mut terms = vec![Term::new("1", 0, vec![]), Term::new("x", 1, vec![])];
        terms.extend((0..n_covariates).map(|k| Term::new(format!("z{}", k + 1), 0, vec![k])));
        Self::new(terms, n_covariates).expect("valid by construction")
    }

    /// `(x, s_1, …, s_k, θ)`: a partially linear layout whose last term is the
    /// intercept slot standing in for `θ(z)`.
    pub fn partially_linear(n_covariates: usize) -> Self {
        let mut terms = vec![Term::new("x", 1, vec![])];
        terms.extend((0..n_covariates).map(|k| Term::new(format!("s{}", k + 1), 0, vec![k])));
        terms.push(Term::new("theta", 0, vec![]));
        Self::new(terms, n_covariates).expect("valid by construction")
    }

    pub fn parse(specs: &[&str], columns: &[String]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Parse("term list is empty".into()));
        }
        let terms = specs
            .iter()
            .map(|s| Term::parse(s, columns))
            .collect::<Result<Vec<_>>>()?;
        Self::new(terms, columns.len())
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.label.clone()).collect()
    }

    /// Number of `x` powers in use (`max power + 1`).
    pub fn n_powers(&self) -> usize {
        self.terms.iter().map(|t| t.x_power).max().unwrap_or(0) + 1
    }

    pub fn row(&self, x: f64, z: &[f64]) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| x.powi(t.x_power as i32) * t.factor(z))
            .collect()
    }

    pub fn eta(&self, beta: &[f64], x: f64, z: &[f64]) -> f64 {
        self.terms
            .iter()
            .zip(beta)
            .map(|(t, b)| b * x.powi(t.x_power as i32) * t.factor(z))
            .sum()
    }

    /// Coefficients `c_p` of the linear predictor as a polynomial in `x`.
    pub fn poly_coefficients(&self, beta: &[f64], z: &[f64]) -> [f64; MAX_POW] {
        let mut c = [0.0; MAX_POW];
        for (t, b) in self.terms.iter().zip(beta) {
            if *b != 0.0 {
                c[t.x_power] += b * t.factor(z);
            }
        }
        c
    }

    pub fn factors(&self, z: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.factor(z)).collect()
    }

    /// True when every term involving `x` is free of covariates, so the
    /// observations differ only through the `x⁰` coefficient.
    pub fn x_slopes_common(&self) -> bool {
        self.terms.iter().all(|t| t.x_power == 0 || t.covariates.is_empty())
    }
}

/// Additive normal measurement error `W = X + U`, `U ~ N(0, sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalError {
    pub sd: f64,
}

impl NormalError {
    pub fn new(sd: f64) -> Result<Self> {
        if !(sd >= 0.0 && sd.is_finite()) {
            return Err(Error::InvalidModel(format!("error sd must be >= 0, got {sd}")));
        }
        Ok(Self { sd })
    }

    pub fn density(&self, w: f64, x: f64) -> f64 {
        let r = (w - x) / self.sd;
        (-0.5 * r * r).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(rand_distr::StandardNormal);
        x + self.sd * u
    }
}

/// Working density `p*(x)` for the unobserved covariate (independent of `z`).
#[derive(Clone)]
pub enum Posited {
    Normal {
        mean: f64,
        sd: f64,
    },
    Density {
        name: String,
        pdf: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        mean: f64,
        sd: f64,
    },
}

impl fmt::Debug for Posited {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Posited::Normal { mean, sd } => write!(f, "Normal({mean}, {sd})"),
            Posited::Density { name, mean, sd, .. } => {
                write!(f, "Density({name}, mean {mean}, sd {sd})")
            }
        }
    }
}

impl Default for Posited {
    fn default() -> Self {
        Posited::Normal { mean: 0.0, sd: 1.0 }
    }
}

impl Posited {
    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Posited::Normal { mean, sd } => {
                let r = (x - mean) / sd;
                (-0.5 * r * r).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            Posited::Density { pdf, .. } => pdf(x),
        }
    }

    pub fn mean_sd(&self) -> (f64, f64) {
        match self {
            Posited::Normal { mean, sd } | Posited::Density { mean, sd, .. } => (*mean, *sd),
        }
    }
}

/// How the posited-law integral `E*{· | W, Z, Y}` is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositedRule {
    /// Discrete posited law on the `x` grid itself.
    Grid,
    /// Gauss–Hermite nodes adapted to each `w` (product of error and posited densities);
    /// the `a` function is interpolated from its values at the grid nodes.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSettings {
    /// Number of `x` grid nodes `G` (collocation nodes for the integral equation).
    pub grid_size: usize,
    /// Nodes of the `W | X` rule in the outer expectation.
    pub w_nodes: usize,
    /// Nodes of the adaptive `E*` rule.
    pub estar_nodes: usize,
    /// Nodes of the `Y | X` rule for continuous responses.
    pub y_nodes: usize,
    pub rule: PositedRule,
    pub interp: InterpKind,
    /// Average node spacing of the offset table used when observations share the `x` slopes;
    /// `None` forces a per-observation solve.
    pub table_step: Option<f64>,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            grid_size: 25,
            w_nodes: 20,
            estar_nodes: 10,
            y_nodes: 20,
            rule: PositedRule::Adaptive,
            interp: InterpKind::Cubic,
            table_step: Some(crate::score::DEFAULT_TABLE_SPACING),
        }
    }
}

/// Complete parametric measurement-error model.
#[derive(Debug, Clone)]
pub struct MeModel {
    pub family: Family,
    pub design: Design,
    pub error: NormalError,
    pub posited: Posited,
    pub quad: QuadratureSettings,
}

impl MeModel {
    pub fn new(family: Family, design: Design, error: NormalError) -> Self {
        Self {
            family,
            design,
            error,
            posited: Posited::default(),
            quad: QuadratureSettings::default(),
        }
    }

    pub fn with_posited(mut self, posited: Posited) -> Self {
        self.posited = posited;
        self
    }

    pub fn with_quadrature(mut self, quad: QuadratureSettings) -> Self {
        self.quad = quad;
        self
    }

    /// Builds one of the named models: `logistic_linear`, `logistic_quadratic`,
    /// `partially_linear_logistic`, `linear_normal`.
    pub fn named(name: &str, n_covariates: usize, error_sd: f64) -> Result<Self> {
        let error = NormalError::new(error_sd)?;
        match name {
            "logistic_linear" => Ok(Self::new(
                Family::Logistic,
                Design::linear(n_covariates),
                error,
            )),
            "logistic_quadratic" => Ok(Self::new(
                Family::Logistic,
                Design::quadratic(n_covariates),
                error,
            )),
            "partially_linear_logistic" => Ok(Self::new(
                Family::Logistic,
                Design::partially_linear(n_covariates),
                error,
            )),
            "linear_normal" => Ok(Self::new(
                Family::Gaussian { sd: 1.0 },
                Design::linear(n_covariates),
                error,
            )),
            other => Err(Error::InvalidModel(format!(
                "unknown model `{other}` (expected logistic_linear, logistic_quadratic, partially_linear_logistic or linear_normal)"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.design.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let q = &self.quad;
        if q.grid_size < 1 || q.w_nodes < 1 || q.estar_nodes < 1 || q.y_nodes < 1 {
            return Err(Error::InvalidModel("quadrature sizes must be positive".into()));
        }
        if let Some(step) = q.table_step {
            if !(step > 0.0) {
                return Err(Error::InvalidModel("table step must be positive".into()));
            }
        }
        if let Family::Gaussian { sd } = self.family {
            if !(sd > 0.0) {
                return Err(Error::InvalidModel("response sd must be positive".into()));
            }
        }
        let (_, sd) = self.posited.mean_sd();
        if !(sd > 0.0) {
            return Err(Error::InvalidModel("posited sd must be positive".into()));
        }
        if q.rule == PositedRule::Grid && self.error.sd == 0.0 {
            return Err(Error::InvalidModel(
                "grid posited rule needs a positive error sd".into(),
            ));
        }
        Ok(())
    }
}

/// Observed data. `covariates` is row-major `n × n_covariates` (the `Z` of a
/// parametric model, the `S` of a semiparametric one); `smoothing` holds the
/// scalar `Z` of a semiparametric fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    pub covariates: Vec<f64>,
    pub n_covariates: usize,
    pub smoothing: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(w: Vec<f64>, covariates: Vec<f64>, n_covariates: usize, y: Vec<f64>) -> Result<Self> {
        let n = w.len();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        if covariates.len() != n * n_covariates {
            return Err(Error::DimensionMismatch {
                expected: n * n_covariates,
                got: covariates.len(),
            });
        }
        Ok(Self {
            w,
            y,
            covariates,
            n_covariates,
            smoothing: None,
        })
    }

    pub fn with_smoothing(mut self, z: Vec<f64>) -> Result<Self> {
        if z.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: z.len(),
            });
        }
        self.smoothing = Some(z);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn covariates_of(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.n_covariates..(i + 1) * self.n_covariates]
    }

    pub fn obs(&self, i: usize) -> Obs<'_> {
        Obs {
            w: self.w[i],
            z: self.covariates_of(i),
            y: self.y[i],
        }
    }

    /// Rows selected by `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut cov = Vec::with_capacity(idx.len() * self.n_covariates);
        for &i in idx {
            cov.extend_from_slice(self.covariates_of(i));
        }
        Dataset {
            w: idx.iter().map(|&i| self.w[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            covariates: cov,
            n_covariates: self.n_covariates,
            smoothing: self.smoothing.as_ref().map(|z| idx.iter().map(|&i| z[i]).collect()),
        }
    }
}

/// One observation `(W, Z, Y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obs<'a> {
    pub w: f64,
    pub z: &'a [f64],
    pub y: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_parsing() {
        let cols: Vec<String> = ["z1", "z2", "z3"].iter().map(|s| s.to_string()).collect();
        let d = Design::parse(&["w", "w*z1", "1", "z2^2", "z1*z3", "x^2"], &cols).unwrap();
        let t = d.terms();
        assert_eq!(t[0].x_power, 1);
        assert_eq!(t[1].x_power, 1);
        assert_eq!(t[1].covariates, vec![0]);
        assert_eq!(t[2].x_power, 0);
        assert!(t[2].covariates.is_empty());
        assert_eq!(t[3].covariates, vec![1, 1]);
        assert_eq!(t[4].covariates, vec![0, 2]);
        assert_eq!(t[5].x_power, 2);
        assert!(!d.x_slopes_common());
        assert!(Design::parse(&["w*age"], &cols).is_err());
        assert!(Design::parse(&[], &cols).is_err());
        assert!(Design::parse(&["x^4"], &cols).is_err());
    }

    #[test]
    fn poly_coefficients_match_eta() {
        let cols: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let d = Design::parse(&["1", "x", "x*a", "x^2", "b", "a*b"], &cols).unwrap();
        let beta = [0.3, -1.0, 0.5, 0.25, 2.0, -0.7];
        let z = [1.5, -0.4];
        let c = d.poly_coefficients(&beta, &z);
        for x in [-1.3f64, 0.0, 0.8, 2.2] {
            let via_poly: f64 = (0..MAX_POW).map(|p| c[p] * x.powi(p as i32)).sum();
            assert!((via_poly - d.eta(&beta, x, &z)).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_helpers_are_stable() {
        assert_eq!(logistic(800.0), 1.0);
        assert!(logistic(-800.0) >= 0.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        let f = Family::Logistic;
        assert!((f.density(1.0, 0.3) + f.density(0.0, 0.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dataset_shape_checks() {
        assert!(Dataset::new(vec![0.0; 3], vec![0.0; 5], 2, vec![0.0; 3]).is_err());
        let d = Dataset::new(vec![0.0, 1.0], vec![1.0, 2.0, 3.0, 4.0], 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(d.covariates_of(1), &[3.0, 4.0]);
        let s = d.subset(&[1]);
        assert_eq!(s.w, vec![1.0]);
        assert_eq!(s.covariates, vec![3.0, 4.0]);
    }
}
