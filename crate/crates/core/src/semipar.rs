//! Kernel-profiled estimation of partially linear models `η = βᵀv(x, s) + θ(z)`.
//!
//! `θ` enters the efficient score of the augmented parametric model as an
//! intercept slot (the last design term). Its score component `Ψ` is solved
//! locally at every `z_j` with kernel weights, and the remaining components
//! `L` are profiled over `θ̂_j(β)`.
//!
//! Every local equation involves `ψ_i(θ) = Ψ(obs_i; β, θ)` over a window of
//! observations. These are smooth in `θ`, so each is represented by a Chebyshev
//! series on a common interval; a local equation is then a single series whose
//! coefficients are the kernel-weighted sum of the members'.

use std::sync::Mutex;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, MAX_POW};
use crate::penalty::PenaltySpec;
use crate::quadrature::{Chebyshev, ChebyshevBasis};
use crate::score::{ObsRule, ScoreEngine, Scratch, TableSet};
use crate::solver::{
    naive_fit, sandwich_from, solve_penalized_from, solve_unpenalized_eq, EstimatingFunction, Evaluation, FitResult,
    SolverConfig, Want,
};

/// Chebyshev points per observation series.
const SERIES_POINTS: usize = 20;
/// Half-width added around the current `θ̂` range when series are built.
const THETA_MARGIN: f64 = 1.0;
/// Local equations are solved to `|Σ K ψ| ≤ LOCAL_TOL · Σ K`.
const LOCAL_TOL: f64 = 1e-11;
const MAX_DOUBLINGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `(15/16)(1 − u²)²`.
    Quartic,
    /// `(35/32)(1 − u²)³`, the smoother member of the same family.
    Triweight,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quartic" | "biweight" => Ok(KernelFamily::Quartic),
            "triweight" | "epanechnikov-smooth" => Ok(KernelFamily::Triweight),
            other => Err(Error::InvalidConfig(format!(
                "unknown kernel `{other}` (expected quartic or triweight)"
            ))),
        }
    }
}

/// Compact symmetric kernel rescaled to unit second moment, with bandwidth `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidConfig("bandwidth must be positive".into()));
        }
        Ok(Self { family, bandwidth })
    }

    /// `1.2·SD(z)·n^{−1/3}`.
    pub fn default_bandwidth(z: &[f64]) -> Result<f64> {
        let n = z.len();
        if n < 2 {
            return Err(Error::InvalidConfig("bandwidth needs at least two z values".into()));
        }
        let m = z.iter().sum::<f64>() / n as f64;
        let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::InvalidConfig("z has no spread".into()));
        }
        Ok(1.2 * sd * (n as f64).powf(-1.0 / 3.0))
    }

    /// Quartic kernel with the default bandwidth for `z`.
    pub fn for_data(z: &[f64]) -> Result<Self> {
        Self::new(KernelFamily::Quartic, Self::default_bandwidth(z)?)
    }

    /// Scale `c` with `K(t) = K₀(t/c)/c` and `∫t²K = 1`.
    fn scale(&self) -> f64 {
        match self.family {
            KernelFamily::Quartic => 7f64.sqrt(),
            KernelFamily::Triweight => 3.0,
        }
    }

    /// Half-width of the support of `K`.
    pub fn support(&self) -> f64 {
        self.scale()
    }

    /// The rescaled kernel `K(t)`.
    pub fn kernel(&self, t: f64) -> f64 {
        let c = self.scale();
        let u = t / c;
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let v = 1.0 - u * u;
        let k0 = match self.family {
            KernelFamily::Quartic => 15.0 / 16.0 * v * v,
            KernelFamily::Triweight => 35.0 / 32.0 * v * v * v,
        };
        k0 / c
    }

    /// `K_h(dz) = K(dz/h)/h`.
    pub fn weight(&self, dz: f64) -> f64 {
        self.kernel(dz / self.bandwidth) / self.bandwidth
    }

    fn doubled(&self) -> Self {
        Self {
            bandwidth: 2.0 * self.bandwidth,
            ..*self
        }
    }

    /// Warns when `h` falls outside `n h⁴ < 1 < n h²`.
    pub fn check_regime(&self, n: usize) {
        let (n, h) = (n as f64, self.bandwidth);
        if n * h.powi(4) >= 1.0 || n * h * h <= 1.0 {
            warn!("bandwidth {h:.4} is outside the n h^4 -> 0, n h^2 -> inf regime for n = {n}");
        }
    }
}

/// Splits an augmented score into the parametric part `L` and the last `m` components `Ψ`.
pub fn partition_score(full: &[f64], m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m > full.len() {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: full.len(),
        });
    }
    let (l, psi) = full.split_at(full.len() - m);
    Ok((l.to_vec(), psi.to_vec()))
}

/// `θ̂_i` at every observation and, when computed, `∂θ̂_i/∂βᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaProfile {
    pub theta: Vec<f64>,
    /// `n × d` sensitivities.
    pub dtheta: Option<DMatrix<f64>>,
    /// Bandwidth actually used at each `z_i` (larger than nominal where the
    /// window had to be widened).
    pub bandwidth: Vec<f64>,
}

/// Kernel weights of one local equation.
#[derive(Debug, Clone)]
struct Window {
    idx: Vec<usize>,
    w: Vec<f64>,
    h: f64,
}

fn window_at(kernel: &KernelSpec, z: &[f64], order: &[usize], y: &[f64], binary: bool, at: f64) -> Result<Window> {
    let mut k = *kernel;
    for _ in 0..=MAX_DOUBLINGS {
        let reach = k.support() * k.bandwidth;
        let start = order.partition_point(|&i| z[i] <= at - reach);
        let mut idx = Vec::new();
        let mut w = Vec::new();
        for &i in &order[start..] {
            if z[i] >= at + reach {
                break;
            }
            let wi = k.weight(z[i] - at);
            if wi > 0.0 {
                idx.push(i);
                w.push(wi);
            }
        }
        let both = !binary || {
            let ones = idx.iter().filter(|&&i| y[i] > 0.5).count();
            ones > 0 && ones < idx.len()
        };
        if idx.len() >= 2 && both {
            return Ok(Window { idx, w, h: k.bandwidth });
        }
        k = k.doubled();
    }
    Err(Error::EmptyWindow { z: at })
}

fn sorted_order(z: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]));
    order
}

/// Safeguarded Newton on `[lo, hi]`; `Ok(None)` when `f` has no sign change there.
fn find_root<F>(mut f: F, x0: f64, lo: f64, hi: f64, tol: f64) -> Result<Option<f64>>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    let (flo, _) = f(lo)?;
    let (fhi, _) = f(hi)?;
    if flo.abs() <= tol {
        return Ok(Some(lo));
    }
    if fhi.abs() <= tol {
        return Ok(Some(hi));
    }
    if flo.signum() == fhi.signum() {
        return Ok(None);
    }
    let rising = fhi > flo;
    let (mut a, mut b) = (lo, hi);
    let mut x = x0.clamp(lo, hi);
    for _ in 0..200 {
        let (fx, dfx) = f(x)?;
        if fx.abs() <= tol {
            return Ok(Some(x));
        }
        if (fx > 0.0) == rising {
            b = x;
        } else {
            a = x;
        }
        let newton = x - fx / dfx;
        x = if dfx != 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if b - a <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            return Ok(Some(x));
        }
    }
    Err(Error::NonConvergence {
        iterations: 200,
        last_step: b - a,
    })
}

/// Per-observation series in `θ`: `ψ_i` and `∂ψ_i/∂c_q`, `q ≥ 1`.
struct ObsSeries {
    psi: Chebyshev,
    slopes: Vec<Chebyshev>,
}

/// Everything computed at one `β`.
struct Profiled {
    theta: Vec<f64>,
    dtheta: Option<DMatrix<f64>>,
    rho: Vec<[f64; MAX_POW]>,
    drho: Option<Vec<[[f64; MAX_POW]; MAX_POW]>>,
}

#[derive(Debug, Clone, Default)]
struct State {
    theta: Vec<f64>,
    profile: Option<ThetaProfile>,
}

/// The profiled equation `β ↦ (1/n) Σ_i L(obs_i; β, θ̂_i(β))`.
pub struct ProfileEquation<'a> {
    engine: &'a ScoreEngine,
    data: &'a Dataset,
    kernel: KernelSpec,
    rules: Vec<ObsRule>,
    windows: Vec<Window>,
    /// `n × (d + 1)` design factors `m_t(s_i)`.
    factors: DMatrix<f64>,
    powers: Vec<usize>,
    basis: ChebyshevBasis,
    state: Mutex<State>,
}

impl<'a> ProfileEquation<'a> {
    pub fn new(engine: &'a ScoreEngine, data: &'a Dataset, kernel: KernelSpec) -> Result<Self> {
        let design = &engine.model().design;
        let last = design.terms().last().expect("design has terms");
        if design.dim() < 2 || last.x_power != 0 || !last.covariates.is_empty() {
            return Err(Error::InvalidModel(
                "a profiled model needs an intercept slot as its last term".into(),
            ));
        }
        if design.terms()[..design.dim() - 1]
            .iter()
            .any(|t| t.x_power == 0 && t.covariates.is_empty())
        {
            return Err(Error::InvalidModel(
                "the parametric part of a profiled model cannot hold an intercept".into(),
            ));
        }
        if data.n_covariates != design.n_covariates() {
            return Err(Error::DimensionMismatch {
                expected: design.n_covariates(),
                got: data.n_covariates,
            });
        }
        let z = data
            .smoothing
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("profiled fit needs a smoothing variable".into()))?;
        if data.len() < 2 {
            return Err(Error::InvalidConfig("dataset is too small".into()));
        }
        let binary = engine.model().family.is_binary();
        if binary && data.y.iter().any(|y| *y != 0.0 && *y != 1.0) {
            return Err(Error::InvalidConfig("logistic response must be 0 or 1".into()));
        }
        kernel.check_regime(data.len());
        let order = sorted_order(z);
        let windows = z
            .iter()
            .map(|&at| window_at(&kernel, z, &order, &data.y, binary, at))
            .collect::<Result<Vec<_>>>()?;
        let widened = windows.iter().filter(|w| w.h > kernel.bandwidth).count();
        if widened > 0 {
            debug!("{widened} kernel windows widened at the boundary");
        }
        let d1 = design.dim();
        let factors = DMatrix::from_fn(data.len(), d1, |i, t| design.terms()[t].factor(data.covariates_of(i)));
        Ok(Self {
            engine,
            data,
            kernel,
            rules: engine.obs_rules(data),
            windows,
            factors,
            powers: design.terms().iter().map(|t| t.x_power).collect(),
            basis: ChebyshevBasis::new(SERIES_POINTS),
            state: Mutex::new(State {
                theta: vec![0.0; data.len()],
                profile: None,
            }),
        })
    }

    pub fn engine(&self) -> &ScoreEngine {
        self.engine
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    /// Starting values for the local solves.
    pub fn set_theta(&self, theta: Vec<f64>) {
        assert_eq!(theta.len(), self.data.len());
        self.state.lock().expect("state lock").theta = theta;
    }

    /// The profile at the most recently evaluated `β`.
    pub fn profile(&self) -> Option<ThetaProfile> {
        self.state.lock().expect("state lock").profile.clone()
    }

    fn series(
        &self,
        tables: &TableSet,
        coefs: &[[f64; MAX_POW]],
        lo: f64,
        hi: f64,
        derivs: bool,
    ) -> Result<Vec<ObsSeries>> {
        let np = self.engine.n_powers();
        let pts = self.basis.points(lo, hi);
        (0..self.data.len())
            .into_par_iter()
            .map_init(Scratch::default, |s, i| {
                let rule = &self.rules[i];
                let y = self.data.y[i];
                let mut psi = Vec::with_capacity(pts.len());
                let mut slope_vals = vec![Vec::with_capacity(pts.len()); if derivs { np - 1 } else { 0 }];
                for &t in &pts {
                    let mut c = coefs[i];
                    c[0] += t;
                    let tag = |e: Error| match e {
                        Error::DegenerateLikelihood { .. } => Error::DegenerateLikelihood { index: i },
                        other => other,
                    };
                    psi.push(self.engine.reduced_at(&tables.main, rule, y, &c, s).map_err(tag)?[0]);
                    for (q, (h, tp, tm)) in tables.sides.iter().enumerate() {
                        let (mut cp, mut cm) = (c, c);
                        cp[q + 1] += h;
                        cm[q + 1] -= h;
                        let rp = self.engine.reduced_at(tp, rule, y, &cp, s).map_err(tag)?[0];
                        let rm = self.engine.reduced_at(tm, rule, y, &cm, s).map_err(tag)?[0];
                        slope_vals[q].push((rp - rm) / (2.0 * h));
                    }
                }
                Ok(ObsSeries {
                    psi: self.basis.fit(lo, hi, &psi),
                    slopes: slope_vals.iter().map(|v| self.basis.fit(lo, hi, v)).collect(),
                })
            })
            .collect()
    }

    /// Solves every local equation; `Ok(None)` when some root lies outside `[lo, hi]`.
    fn local_solves(&self, series: &[ObsSeries], lo: f64, hi: f64, warm: &[f64]) -> Result<Option<Vec<f64>>> {
        let n_pts = self.basis.len();
        let out = self
            .windows
            .par_iter()
            .enumerate()
            .map(|(j, win)| {
                let mut vals = vec![0.0; n_pts];
                let total: f64 = win.w.iter().sum();
                for (&i, &w) in win.idx.iter().zip(&win.w) {
                    for (v, c) in vals.iter_mut().zip(series[i].psi.coefficients()) {
                        *v += w * c;
                    }
                }
                let f = Chebyshev::from_coefficients(lo, hi, vals);
                find_root(|t| Ok((f.eval(t), f.derivative(t))), warm[j], lo, hi, LOCAL_TOL * total)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(out.into_iter().collect())
    }

    /// `θ̂` and the augmented reduced scores at `β`.
    fn profile_at(&self, beta: &[f64], derivs: bool) -> Result<Profiled> {
        let engine = self.engine;
        let d = engine.model().dim() - 1;
        if beta.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: beta.len(),
            });
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig("non-finite coefficient".into()));
        }
        let mut full = beta.to_vec();
        full.push(0.0);
        let base = engine.coefficients(self.data, &full);
        let warm = self.state.lock().expect("state lock").theta.clone();
        let (a_lo, a_hi) = base.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| {
            (l.min(c[0]), h.max(c[0]))
        });
        let (w_lo, w_hi) = warm
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(*t), h.max(*t)));
        let mut margin = THETA_MARGIN;
        for _ in 0..4 {
            let (lo, hi) = (w_lo - margin, w_hi + margin);
            let mut c_lo = a_lo + lo;
            let mut c_hi = a_hi + hi;
            c_lo -= ScoreEngine::fd_step(c_lo);
            c_hi += ScoreEngine::fd_step(c_hi);
            let tables = engine.build_table_set(&base[0], c_lo, c_hi, derivs)?;
            let series = self.series(&tables, &base, lo, hi, derivs)?;
            let Some(theta) = self.local_solves(&series, lo, hi, &warm)? else {
                margin *= 4.0;
                debug!("local root outside the series range; widening to ±{margin}");
                continue;
            };
            let coefs: Vec<[f64; MAX_POW]> = base
                .iter()
                .zip(&theta)
                .map(|(c, t)| {
                    let mut c = *c;
                    c[0] += t;
                    c
                })
                .collect();
            let red = engine.reduced_from_tables(&tables, &self.rules, &self.data.y, &coefs, derivs)?;
            let dtheta = derivs.then(|| self.sensitivities(&series, &theta, d));
            return Ok(Profiled {
                theta,
                dtheta,
                rho: red.rho,
                drho: red.drho,
            });
        }
        Err(Error::NonConvergence {
            iterations: 4,
            last_step: margin,
        })
    }

    /// `∂θ̂_j/∂β_u = −Σ_i K_ij m_u(s_i) ∂ψ_i/∂c_{p_u} / Σ_i K_ij ∂ψ_i/∂θ`, all at `θ̂_j`.
    fn sensitivities(&self, series: &[ObsSeries], theta: &[f64], d: usize) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = self
            .windows
            .par_iter()
            .enumerate()
            .map(|(j, win)| {
                let t = theta[j];
                let mut denom = 0.0;
                let mut num = vec![0.0; d];
                for (&i, &w) in win.idx.iter().zip(&win.w) {
                    let s = &series[i];
                    let dpsi = s.psi.derivative(t);
                    denom += w * dpsi;
                    let by_power: Vec<f64> = std::iter::once(dpsi)
                        .chain(s.slopes.iter().map(|c| c.eval(t)))
                        .collect();
                    for (u, nu) in num.iter_mut().enumerate() {
                        *nu += w * self.factors[(i, u)] * by_power[self.powers[u]];
                    }
                }
                num.iter().map(|v| -v / denom).collect()
            })
            .collect();
        DMatrix::from_fn(theta.len(), d, |i, u| rows[i][u])
    }

    /// `(L, ∂L/∂θ)` per observation: `n × d` each.
    fn components(&self, p: &Profiled, d: usize) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let n = self.data.len();
        let l = DMatrix::from_fn(n, d, |i, t| self.factors[(i, t)] * p.rho[i][self.powers[t]]);
        let lt = p
            .drho
            .as_ref()
            .map(|dr| DMatrix::from_fn(n, d, |i, t| self.factors[(i, t)] * dr[i][self.powers[t]][0]));
        (l, lt)
    }

    /// Mean Jacobian `(1/n) Σ_i (∂L_i/∂β + ∂L_i/∂θ · ∂θ̂_i/∂βᵀ)`.
    fn jacobian(&self, p: &Profiled, lt: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
        let n = self.data.len();
        let dr = p.drho.as_ref().expect("derivatives computed");
        let dth = p.dtheta.as_ref().expect("sensitivities computed");
        let mut jac = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            for t in 0..d {
                let ft = self.factors[(i, t)];
                if ft == 0.0 {
                    continue;
                }
                let pt = self.powers[t];
                for u in 0..d {
                    jac[(t, u)] += ft * self.factors[(i, u)] * dr[i][pt][self.powers[u]] + lt[(i, t)] * dth[(i, u)];
                }
            }
        }
        jac / n as f64
    }

    fn remember(&self, p: &Profiled) {
        let mut st = self.state.lock().expect("state lock");
        st.theta = p.theta.clone();
        st.profile = Some(ThetaProfile {
            theta: p.theta.clone(),
            dtheta: p.dtheta.clone(),
            bandwidth: self.windows.iter().map(|w| w.h).collect(),
        });
    }

    /// Residuals `Σ_i K_ij Ψ_i(θ̂_j) / Σ_i K_ij` of the local equations at `β`,
    /// evaluated without series (for verification).
    pub fn local_residuals(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let p = self.profile_at(beta, false)?;
        let mut full = beta.to_vec();
        full.push(0.0);
        let base = self.engine.coefficients(self.data, &full);
        let engine = self.engine;
        let (a_lo, a_hi) = base.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| {
            (l.min(c[0]), h.max(c[0]))
        });
        let (t_lo, t_hi) = p
            .theta
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(*t), h.max(*t)));
        let tables = engine.build_table_set(&base[0], a_lo + t_lo, a_hi + t_hi, false)?;
        self.windows
            .par_iter()
            .enumerate()
            .map_init(Scratch::default, |s, (j, win)| {
                let mut acc = 0.0;
                for (&i, &w) in win.idx.iter().zip(&win.w) {
                    let mut c = base[i];
                    c[0] += p.theta[j];
                    acc += w * engine.reduced_at(&tables.main, &self.rules[i], self.data.y[i], &c, s)?[0];
                }
                Ok(acc / win.w.iter().sum::<f64>())
            })
            .collect()
    }
}

impl EstimatingFunction for ProfileEquation<'_> {
    fn dim(&self) -> usize {
        self.engine.model().dim() - 1
    }

    fn n_obs(&self) -> usize {
        self.data.len()
    }

    fn evaluate(&self, beta: &[f64], want: Want) -> Result<Evaluation> {
        let d = self.dim();
        let p = self.profile_at(beta, want.jacobian)?;
        let (l, lt) = self.components(&p, d);
        let n = self.data.len() as f64;
        let mean = DVector::from_iterator(d, l.column_iter().map(|c| c.sum() / n));
        let jacobian = lt.as_ref().map(|lt| self.jacobian(&p, lt, d));
        self.remember(&p);
        Ok(Evaluation {
            mean,
            jacobian,
            scores: want.scores.then_some(l),
        })
    }
}

/// Solves one local equation `Σ_i K_h(z_i − z) Ψ(obs_i; β, θ) = 0` directly.
pub fn local_theta_solve(
    engine: &ScoreEngine,
    data: &Dataset,
    beta: &[f64],
    z_target: f64,
    kernel: &KernelSpec,
) -> Result<f64> {
    let z = data
        .smoothing
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("local solve needs a smoothing variable".into()))?;
    let d = engine.model().dim() - 1;
    if beta.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: beta.len(),
        });
    }
    let binary = engine.model().family.is_binary();
    let win = window_at(kernel, z, &sorted_order(z), &data.y, binary, z_target)?;
    let sub = data.subset(&win.idx);
    let rules = engine.obs_rules(&sub);
    let mut full = beta.to_vec();
    full.push(0.0);
    let base = engine.coefficients(&sub, &full);
    let total: f64 = win.w.iter().sum();
    let mut eval = |theta: f64| -> Result<(f64, f64)> {
        let coefs: Vec<[f64; MAX_POW]> = base
            .iter()
            .map(|c| {
                let mut c = *c;
                c[0] += theta;
                c
            })
            .collect();
        let red = engine.reduced_scores(&rules, &sub.y, &coefs, true)?;
        let dr = red.drho.expect("requested");
        let f = red.rho.iter().zip(&win.w).map(|(r, w)| w * r[0]).sum::<f64>();
        let df = dr.iter().zip(&win.w).map(|(r, w)| w * r[0][0]).sum::<f64>();
        Ok((f, df))
    };
    let mut width = 2.0;
    for _ in 0..5 {
        if let Some(t) = find_root(&mut eval, 0.0, -width, width, 1e-10 * total)? {
            return Ok(t);
        }
        width *= 3.0;
    }
    Err(Error::NonConvergence {
        iterations: 5,
        last_step: width,
    })
}

/// Unpenalized profiled fit, started from the naive fit with `W` for `X`.
pub fn profile_unpenalized(eq: &ProfileEquation<'_>, cfg: &SolverConfig) -> Result<FitResult> {
    let naive = naive_fit(eq.engine, eq.data)?;
    let d = eq.dim();
    eq.set_theta(vec![naive[d]; eq.data.len()]);
    solve_unpenalized_eq(eq, &naive[..d], cfg)
}

/// Penalized profiled fit `Σ_i L(obs_i; β, θ̂_i) − n p'_λ(β) = 0` and its `θ̂` profile.
pub fn profile_fit(
    engine: &ScoreEngine,
    data: &Dataset,
    penalty: &PenaltySpec,
    kernel: KernelSpec,
    cfg: &SolverConfig,
) -> Result<(FitResult, ThetaProfile)> {
    let eq = ProfileEquation::new(engine, data, kernel)?;
    let full = profile_unpenalized(&eq, cfg)?;
    let fit = solve_penalized_from(&eq, &full, penalty, cfg)?;
    eq.evaluate(&fit.beta, Want::MEAN)?;
    Ok((fit, eq.profile().expect("evaluated")))
}

/// Sandwich `(1/n)(A − Σ_λ)⁻¹ B (A − Σ_λ)⁻ᵀ` with `A` the profiled Jacobian and
/// `B` the second moment of `L − U(z)Ψ`, `U = E(L_θ | z) / E(Ψ_θ | z)`.
pub fn semipar_sandwich(eq: &ProfileEquation<'_>, fit: &FitResult, unpenalized: &[usize]) -> Result<DMatrix<f64>> {
    let d = eq.dim();
    let p = eq.profile_at(&fit.beta, true)?;
    let (l, lt) = eq.components(&p, d);
    let lt = lt.expect("derivatives computed");
    let a = eq.jacobian(&p, &lt, d);
    let dr = p.drho.as_ref().expect("derivatives computed");
    let n = eq.data.len();
    let z = eq.data.smoothing.as_deref().expect("checked at construction");
    let mut corrected = l.clone();
    for (j, win) in eq.windows.iter().enumerate() {
        let total: f64 = win.w.iter().sum();
        let mut omega = 0.0;
        let mut elt = vec![0.0; d];
        for (&i, &w) in win.idx.iter().zip(&win.w) {
            omega += w * dr[i][0][0];
            for (t, e) in elt.iter_mut().enumerate() {
                *e += w * lt[(i, t)];
            }
        }
        omega /= total;
        if !(omega.abs() > 1e-12) {
            return Err(Error::SingularOmega { z: z[j] });
        }
        let psi = p.rho[j][0];
        for t in 0..d {
            corrected[(j, t)] -= elt[t] / total / omega * psi;
        }
    }
    debug_assert_eq!(corrected.nrows(), n);
    sandwich_from(&a, &corrected, fit, unpenalized)
}
