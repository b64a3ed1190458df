//! Newton solves of the (penalized) estimating equations and the sandwich covariance.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Family};
use crate::penalty::{default_zero_threshold, lqa_weight, penalty_prime, LqaWeight, PenaltySpec};
use crate::score::{ObsRule, ScoreEngine};

/// An averaged estimating function `β ↦ (1/n) Σ_i S_i(β)`.
pub trait EstimatingFunction: Sync {
    fn dim(&self) -> usize;

    fn n_obs(&self) -> usize;

    /// Mean score and, on request, its Jacobian and the per-observation scores.
    fn evaluate(&self, beta: &[f64], want: Want) -> Result<Evaluation>;
}

/// What [`EstimatingFunction::evaluate`] should return besides the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Want {
    pub jacobian: bool,
    pub scores: bool,
}

impl Want {
    pub const MEAN: Want = Want {
        jacobian: false,
        scores: false,
    };
    pub const JACOBIAN: Want = Want {
        jacobian: true,
        scores: false,
    };
    pub const ALL: Want = Want {
        jacobian: true,
        scores: true,
    };
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mean: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub scores: Option<DMatrix<f64>>,
}

/// `Σ_i S_eff(obs_i, β)` for a parametric model.
pub struct ParametricEquation<'a> {
    engine: &'a ScoreEngine,
    data: &'a Dataset,
    rules: Vec<ObsRule>,
}

impl<'a> ParametricEquation<'a> {
    pub fn new(engine: &'a ScoreEngine, data: &'a Dataset) -> Result<Self> {
        if data.n_covariates != engine.model().design.n_covariates() {
            return Err(Error::DimensionMismatch {
                expected: engine.model().design.n_covariates(),
                got: data.n_covariates,
            });
        }
        if data.is_empty() {
            return Err(Error::InvalidConfig("dataset is empty".into()));
        }
        if engine.model().family.is_binary() && data.y.iter().any(|y| *y != 0.0 && *y != 1.0) {
            return Err(Error::InvalidConfig("logistic response must be 0 or 1".into()));
        }
        Ok(Self {
            engine,
            data,
            rules: engine.obs_rules(data),
        })
    }

    pub fn engine(&self) -> &ScoreEngine {
        self.engine
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }
}

impl EstimatingFunction for ParametricEquation<'_> {
    fn dim(&self) -> usize {
        self.engine.model().dim()
    }

    fn n_obs(&self) -> usize {
        self.data.len()
    }

    fn evaluate(&self, beta: &[f64], want: Want) -> Result<Evaluation> {
        let b = self.engine.evaluate_with(&self.rules, self.data, beta, want.jacobian)?;
        Ok(Evaluation {
            mean: b.mean,
            jacobian: b.jacobian,
            scores: want.scores.then_some(b.scores),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Convergence tolerance on the ∞-norm of the Newton step.
    pub tol: f64,
    pub max_iter: usize,
    /// Zero-lock threshold; `None` uses `1e-6·max(1, ‖β⁰‖∞)`.
    pub zero_threshold: Option<f64>,
    /// Multiple of `trace/d` added to the Newton matrix diagonal.
    pub ridge: f64,
    pub max_halvings: usize,
    /// Random restarts of the unpenalized solve after a failure.
    pub restarts: usize,
    pub seed: u64,
    /// Coefficients exempt from the penalty.
    pub unpenalized: Vec<usize>,
    /// Jacobian refresh period (in iterations) between forced refreshes.
    pub refresh_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
            zero_threshold: None,
            ridge: 0.0,
            max_halvings: 10,
            restarts: 5,
            seed: 0,
            unpenalized: Vec::new(),
            refresh_every: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter < 1 || self.refresh_every < 1 {
            return Err(Error::InvalidConfig("tol must be > 0 and max_iter >= 1".into()));
        }
        if let Some(t) = self.zero_threshold {
            if !(t > 0.0) {
                return Err(Error::InvalidConfig("zero threshold must be positive".into()));
            }
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidConfig("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    /// Indices with nonzero coefficients (plus unpenalized ones).
    pub active: Vec<usize>,
    /// Covariance on the active set, filled by a sandwich estimator.
    #[serde(skip)]
    pub cov: Option<DMatrix<f64>>,
    pub lambda: f64,
    pub penalty: Option<PenaltySpec>,
    pub iterations: usize,
    pub converged: bool,
    /// ∞-norm of each accepted step.
    pub trace: Vec<f64>,
    /// ∞-norm of the penalized estimating equation on the active set at `beta`.
    pub residual: f64,
    /// Last Jacobian of the unpenalized mean score, reused to start later solves.
    #[serde(skip)]
    pub jacobian: Option<DMatrix<f64>>,
}

impl FitResult {
    pub fn is_zero(&self, j: usize) -> bool {
        self.beta[j] == 0.0
    }

    /// Sandwich standard errors aligned with `beta` (`None` for inactive coordinates).
    pub fn standard_errors(&self) -> Vec<Option<f64>> {
        let mut se = vec![None; self.beta.len()];
        if let Some(cov) = &self.cov {
            for (k, &j) in self.active.iter().enumerate() {
                se[j] = Some(cov[(k, k)].max(0.0).sqrt());
            }
        }
        se
    }
}

/// Maximum-likelihood fit of the main model with `W` in place of `X`.
pub fn naive_fit(engine: &ScoreEngine, data: &Dataset) -> Result<Vec<f64>> {
    let design = &engine.model().design;
    let d = design.dim();
    let rows: Vec<Vec<f64>> = (0..data.len())
        .map(|i| design.row(data.w[i], data.covariates_of(i)))
        .collect();
    let mut beta = vec![0.0; d];
    let iters = match engine.model().family {
        Family::Logistic => 50,
        Family::Gaussian { .. } => 1,
    };
    for _ in 0..iters {
        let mut info = DMatrix::<f64>::zeros(d, d);
        let mut grad = DVector::<f64>::zeros(d);
        for (v, y) in rows.iter().zip(&data.y) {
            let eta: f64 = v.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let (r, q) = match engine.model().family {
                Family::Logistic => {
                    let mu = crate::model::logistic(eta);
                    (y - mu, mu * (1.0 - mu))
                }
                Family::Gaussian { .. } => (y - eta, 1.0),
            };
            for a in 0..d {
                grad[a] += v[a] * r;
                for b in 0..=a {
                    info[(a, b)] += q * v[a] * v[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let step = info.cholesky().map(|c| c.solve(&grad)).ok_or(Error::SingularInfo)?;
        beta.iter_mut().zip(step.iter()).for_each(|(b, s)| *b += s);
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonConvergence {
                iterations: 0,
                last_step: f64::INFINITY,
            });
        }
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok(beta)
}

fn submat(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

struct Penalized<'a> {
    spec: Option<&'a PenaltySpec>,
    unpenalized: &'a [usize],
}

impl Penalized<'_> {
    fn penalized(&self, j: usize) -> bool {
        self.spec.is_some_and(|s| s.lambda() > 0.0) && !self.unpenalized.contains(&j)
    }

    fn weight(&self, j: usize, b: f64, thr: f64) -> f64 {
        match self.spec {
            Some(s) if self.penalized(j) => match lqa_weight(b, s, thr) {
                LqaWeight::Weight(w) => w,
                LqaWeight::ZeroLock => 0.0,
            },
            _ => 0.0,
        }
    }

    fn prime(&self, j: usize, b: f64) -> f64 {
        match self.spec {
            Some(s) if self.penalized(j) => penalty_prime(b, s),
            _ => 0.0,
        }
    }
}

fn norm2(v: &DVector<f64>) -> f64 {
    v.norm()
}

/// Aitken extrapolation of penalized coordinates whose LQA iterates approach
/// their limit geometrically and slowly (typical for coefficients heading to
/// zero). Returns true when any coordinate moved.
fn aitken(history: &mut [Vec<f64>], beta: &mut [f64], active: &[usize], pen: &Penalized<'_>) -> bool {
    let mut moved = false;
    for &j in active {
        if !pen.penalized(j) {
            continue;
        }
        let h = &mut history[j];
        h.push(beta[j]);
        if h.len() > 4 {
            h.remove(0);
        }
        if h.len() < 4 {
            continue;
        }
        let q: Vec<f64> = h.windows(2).map(|w| w[1] - w[0]).collect();
        if q[0] == 0.0 || q[1] == 0.0 {
            continue;
        }
        let (r1, r2) = (q[1] / q[0], q[2] / q[1]);
        if r2 > 0.5 && r2 < 1.0 && (r1 - r2).abs() < 0.02 {
            let limit = h[3] + q[2] * r2 / (1.0 - r2);
            // a limit on the other side of zero means the iterates head to zero
            beta[j] = if limit * h[3] <= 0.0 { 0.0 } else { limit };
            moved = true;
        }
    }
    moved
}

/// LQA–Newton iteration from `start`; `jac0` is reused as the first Jacobian.
fn newton(
    eq: &dyn EstimatingFunction,
    start: &[f64],
    penalty: Option<&PenaltySpec>,
    cfg: &SolverConfig,
    jac0: Option<&DMatrix<f64>>,
) -> Result<FitResult> {
    cfg.validate()?;
    let d = eq.dim();
    if start.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: start.len(),
        });
    }
    let pen = Penalized {
        spec: penalty,
        unpenalized: &cfg.unpenalized,
    };
    let thr = cfg.zero_threshold.unwrap_or_else(|| default_zero_threshold(start));
    let mut beta = start.to_vec();
    let mut active: Vec<usize> = Vec::with_capacity(d);
    for j in 0..d {
        if pen.penalized(j) && beta[j].abs() < thr {
            beta[j] = 0.0;
        } else {
            active.push(j);
        }
    }
    let lambda = penalty.map_or(0.0, |p| p.lambda());
    let mut fit = FitResult {
        beta: beta.clone(),
        active: active.clone(),
        cov: None,
        lambda,
        penalty: penalty.copied(),
        iterations: 0,
        converged: false,
        trace: Vec::new(),
        residual: f64::INFINITY,
        jacobian: None,
    };
    if active.is_empty() {
        fit.converged = true;
        fit.residual = 0.0;
        fit.jacobian = jac0.cloned();
        return Ok(fit);
    }

    let first = eq.evaluate(
        &beta,
        Want {
            jacobian: jac0.is_none(),
            scores: false,
        },
    )?;
    let mut s = first.mean;
    let mut jac = match jac0 {
        Some(j) => j.clone(),
        None => first.jacobian.expect("requested"),
    };
    let mut fresh = jac0.is_none();
    let mut since_refresh = 0usize;
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); d];

    let residual = |s: &DVector<f64>, beta: &[f64], active: &[usize]| -> f64 {
        active
            .iter()
            .map(|&j| (s[j] - pen.prime(j, beta[j])).abs())
            .fold(0.0, f64::max)
    };

    let refresh = |beta: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let e = eq.evaluate(beta, Want::JACOBIAN)?;
        Ok((e.mean, e.jacobian.expect("requested")))
    };

    for it in 1..=cfg.max_iter {
        fit.iterations = it;
        let w: Vec<f64> = active.iter().map(|&j| pen.weight(j, beta[j], thr)).collect();
        let f = DVector::from_iterator(active.len(), active.iter().zip(&w).map(|(&j, wj)| s[j] - wj * beta[j]));
        let mut a = submat(&jac, &active);
        for (k, wk) in w.iter().enumerate() {
            a[(k, k)] -= wk;
        }
        if cfg.ridge > 0.0 {
            let shift = cfg.ridge * a.trace().abs() / active.len() as f64;
            for k in 0..active.len() {
                a[(k, k)] -= shift;
            }
        }
        let Some(delta) = a.lu().solve(&(-&f)) else {
            if !fresh {
                (s, jac) = refresh(&beta)?;
                fresh = true;
                since_refresh = 0;
                continue;
            }
            return Err(Error::SingularBread);
        };
        let f0 = norm2(&f);
        let dmax = delta.amax();

        let mut t = 1.0;
        let mut accepted: Option<(Vec<f64>, DVector<f64>, f64)> = None;
        for _ in 0..=cfg.max_halvings {
            let mut trial = beta.clone();
            for (k, &j) in active.iter().enumerate() {
                trial[j] += t * delta[k];
            }
            if let Ok(e) = eq.evaluate(&trial, Want::MEAN) {
                let ft = DVector::from_iterator(
                    active.len(),
                    active.iter().zip(&w).map(|(&j, wj)| e.mean[j] - wj * trial[j]),
                );
                let f1 = norm2(&ft);
                if f1 < f0 || t * dmax < cfg.tol {
                    accepted = Some((trial, e.mean, f1));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, s_new, f1)) = accepted else {
            if !fresh {
                debug!("iteration {it}: no decrease with stale Jacobian, refreshing");
                (s, jac) = refresh(&beta)?;
                fresh = true;
                since_refresh = 0;
                continue;
            }
            fit.residual = residual(&s, &beta, &active);
            if fit.residual <= 10.0 * cfg.tol {
                fit.converged = true;
            }
            break;
        };
        let step = t * dmax;
        fit.trace.push(step);
        beta = trial;
        s = s_new;
        let before = active.len();
        active.retain(|&j| {
            if pen.penalized(j) && beta[j].abs() < thr {
                beta[j] = 0.0;
                false
            } else {
                true
            }
        });
        fresh = false;
        since_refresh += 1;
        if pen.spec.is_some() && aitken(&mut history, &mut beta, &active, &pen) {
            active.retain(|&j| {
                if pen.penalized(j) && beta[j].abs() < thr {
                    beta[j] = 0.0;
                    false
                } else {
                    true
                }
            });
            s = eq.evaluate(&beta, Want::MEAN)?.mean;
            history.iter_mut().for_each(Vec::clear);
        }
        if active.is_empty() {
            fit.converged = true;
            fit.residual = 0.0;
            break;
        }
        if step < cfg.tol && before == active.len() {
            let r = residual(&s, &beta, &active);
            if r <= 10.0 * cfg.tol {
                fit.converged = true;
                fit.residual = r;
                break;
            }
            (s, jac) = refresh(&beta)?;
            fresh = true;
            since_refresh = 0;
        } else if f1 > 0.5 * f0 || since_refresh >= cfg.refresh_every {
            (s, jac) = refresh(&beta)?;
            fresh = true;
            since_refresh = 0;
        }
    }
    if !fit.converged {
        fit.residual = residual(&s, &beta, &active);
    }
    fit.beta = beta;
    fit.active = active;
    fit.jacobian = Some(jac);
    Ok(fit)
}

/// Newton solve of `Σ_i S_eff = 0` from `init` with random restarts on failure.
pub fn solve_unpenalized_eq(eq: &dyn EstimatingFunction, init: &[f64], cfg: &SolverConfig) -> Result<FitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for attempt in 0..=cfg.restarts {
        let start: Vec<f64> = if attempt == 0 {
            init.to_vec()
        } else {
            init.iter()
                .map(|b| b + 0.25 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        };
        match newton(eq, &start, None, cfg, None) {
            Ok(fit) if fit.converged => return Ok(fit),
            Ok(fit) => {
                warn!("unpenalized solve did not converge (attempt {attempt})");
                if best.as_ref().is_none_or(|b| fit.residual < b.residual) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                warn!("unpenalized solve failed (attempt {attempt}): {e}");
                last_err = Some(e);
            }
        }
    }
    match (best, last_err) {
        (Some(fit), _) => Ok(fit),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one attempt runs"),
    }
}

/// Unpenalized locally efficient fit; `beta_init = None` starts from [`naive_fit`].
pub fn solve_unpenalized(
    engine: &ScoreEngine,
    data: &Dataset,
    beta_init: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    let eq = ParametricEquation::new(engine, data)?;
    let init = match beta_init {
        Some(b) => b.to_vec(),
        None => naive_fit(engine, data)?,
    };
    solve_unpenalized_eq(&eq, &init, cfg)
}

/// Penalized solve started from an unpenalized fit of the same equation.
pub fn solve_penalized_from(
    eq: &dyn EstimatingFunction,
    unpenalized: &FitResult,
    penalty: &PenaltySpec,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    if penalty.lambda() == 0.0 {
        let mut fit = unpenalized.clone();
        fit.penalty = Some(*penalty);
        return Ok(fit);
    }
    newton(eq, &unpenalized.beta, Some(penalty), cfg, unpenalized.jacobian.as_ref())
}

/// Solves the penalized equations `Σ_i S_eff(β) − n·p'_λ(β) = 0` by LQA–Newton
/// from the unpenalized estimate.
pub fn solve_penalized(
    engine: &ScoreEngine,
    data: &Dataset,
    penalty: &PenaltySpec,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    let eq = ParametricEquation::new(engine, data)?;
    let init = naive_fit(engine, data)?;
    let full = solve_unpenalized_eq(&eq, &init, cfg)?;
    solve_penalized_from(&eq, &full, penalty, cfg)
}

/// `Σ_λ` diagonal on the active set.
pub fn sigma_lambda(fit: &FitResult, unpenalized: &[usize]) -> Vec<f64> {
    fit.active
        .iter()
        .map(|&j| match fit.penalty {
            Some(p) if !unpenalized.contains(&j) && fit.beta[j] != 0.0 => {
                penalty_prime(fit.beta[j].abs(), &p) / fit.beta[j].abs()
            }
            _ => 0.0,
        })
        .collect()
}

/// `(1/n)(E − Σ_λ)⁻¹ F (E − Σ_λ)⁻ᵀ` from a Jacobian `E` and per-observation scores
/// restricted to the active set.
pub fn sandwich_from(
    jacobian: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    fit: &FitResult,
    unpenalized: &[usize],
) -> Result<DMatrix<f64>> {
    let act = &fit.active;
    if act.is_empty() {
        return Err(Error::InvalidConfig("sandwich needs a nonempty active set".into()));
    }
    let n = scores.nrows() as f64;
    let mut bread = submat(jacobian, act);
    for (k, s) in sigma_lambda(fit, unpenalized).iter().enumerate() {
        bread[(k, k)] -= s;
    }
    let cols: Vec<_> = act.iter().map(|&j| scores.column(j)).collect();
    let sa = DMatrix::from_columns(&cols);
    let meat = sa.transpose() * &sa / n;
    let inv = bread.try_inverse().ok_or(Error::SingularBread)?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularBread);
    }
    let cov = &inv * meat * inv.transpose() / n;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Sandwich covariance of a converged fit, evaluated at `fit.beta`.
pub fn sandwich_cov_eq(eq: &dyn EstimatingFunction, fit: &FitResult, unpenalized: &[usize]) -> Result<DMatrix<f64>> {
    let e = eq.evaluate(&fit.beta, Want::ALL)?;
    sandwich_from(
        e.jacobian.as_ref().expect("requested"),
        e.scores.as_ref().expect("requested"),
        fit,
        unpenalized,
    )
}

pub fn sandwich_cov(
    engine: &ScoreEngine,
    data: &Dataset,
    fit: &FitResult,
    unpenalized: &[usize],
) -> Result<DMatrix<f64>> {
    let eq = ParametricEquation::new(engine, data)?;
    sandwich_cov_eq(&eq, fit, unpenalized)
}
