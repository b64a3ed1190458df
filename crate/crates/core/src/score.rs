//! Locally efficient score for a parametric measurement-error model.
//!
//! Because the linear predictor is a polynomial in `x` whose coefficients
//! `c_p(z)` absorb the covariates, every score component factors as
//! `S_t = m_t(z)·ρ_{p_t}` where `ρ ∈ R^{P+1}` is a reduced score indexed by
//! the `x` power. The integral equation for `a(x, z)` therefore only has to
//! be solved for the `P+1` reduced right-hand sides `E{E*[r·X^p | W, Y] | x}`,
//! with `r = ∂ log p(y | η)/∂η`, and the solution `α` depends on `z` through
//! `c(z)` alone.
//!
//! `a` is represented by its values at the `x` grid nodes, extended by
//! interpolation; the integral equation is enforced at the nodes
//! (collocation). When all observations share `c_1, …, c_P` the solution is a
//! function of the offset `c_0` only and is tabulated at Chebyshev offsets.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dataset, Family, MeModel, Obs, Posited, PositedRule, MAX_POW};
use crate::quadrature::{normal_rule, trapezoid_rule, Interpolator, Stencil};

const RESIDUAL_TOL: f64 = 1e-8;
const RIDGES: [f64; 3] = [1e-10, 1e-8, 1e-6];
/// Average spacing of the offset table nodes when none is configured.
pub const DEFAULT_TABLE_SPACING: f64 = 0.3;

/// Collocation nodes and posited weights for `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct XGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl XGrid {
    /// Hermite nodes for a normal posited law, trapezoid nodes over ±5 SD otherwise.
    /// Nodes with zero posited mass are dropped; weights sum to one.
    pub fn for_posited(posited: &Posited, g: usize) -> Result<Self> {
        let (mean, sd) = posited.mean_sd();
        let (nodes, weights) = match posited {
            _ if g == 1 => (vec![mean], vec![1.0]),
            Posited::Normal { .. } => {
                let (t, w) = normal_rule(g);
                (t.iter().map(|t| mean + sd * t).collect(), w)
            }
            Posited::Density { .. } => {
                let (x, w) = trapezoid_rule(mean - 5.0 * sd, mean + 5.0 * sd, g);
                let w = x.iter().zip(&w).map(|(x, w)| w * posited.pdf(*x)).collect();
                (x, w)
            }
        };
        let (nodes, weights): (Vec<f64>, Vec<f64>) = nodes
            .into_iter()
            .zip(weights)
            .filter(|(_, w)| *w > 0.0 && w.is_finite())
            .unzip();
        let total: f64 = weights.iter().sum();
        if nodes.is_empty() || !(total > 0.0) {
            return Err(Error::InvalidModel("posited law has no mass on the x grid".into()));
        }
        Ok(Self {
            nodes,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Discretized `E*{· | W = w}` before the response enters: nodes `ξ_k`,
/// unnormalized weights, interpolation stencils and powers of `ξ`.
#[derive(Debug, Clone)]
pub struct ObsRule {
    xi: Vec<f64>,
    base: Vec<f64>,
    log_base: Vec<f64>,
    stencils: Vec<Stencil>,
    pows: Vec<[f64; MAX_POW]>,
}

impl ObsRule {
    pub fn nodes(&self) -> &[f64] {
        &self.xi
    }

    fn len(&self) -> usize {
        self.xi.len()
    }

    fn eta(&self, k: usize, c: &[f64; MAX_POW]) -> f64 {
        let p = &self.pows[k];
        c[0] + c[1] * p[1] + c[2] * p[2] + c[3] * p[3]
    }
}

/// Solution of the discretized integral equation for one coefficient vector `c`:
/// nodal values `α[g][p]` and, for spline interpolation, their second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Alpha {
    g: usize,
    np: usize,
    values: Vec<f64>,
    second: Vec<f64>,
    ridge: f64,
}

impl Alpha {
    fn zeros(g: usize, np: usize) -> Self {
        Self {
            g,
            np,
            values: vec![0.0; g * np],
            second: vec![0.0; g * np],
            ridge: 0.0,
        }
    }

    /// `G × (P+1)` matrix of nodal values.
    pub fn values(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.g, self.np, &self.values)
    }

    /// Ridge multiplier used to regularize the kernel (0 when none was needed).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }
}

/// Read access to `(α, Dα)` at node `g`, power `p`.
pub(crate) trait AlphaLookup {
    fn at(&self, g: usize, p: usize) -> (f64, f64);
}

impl AlphaLookup for Alpha {
    #[inline]
    fn at(&self, g: usize, p: usize) -> (f64, f64) {
        let i = g * self.np + p;
        (self.values[i], self.second[i])
    }
}

/// `α(c_0)` at Chebyshev offsets for fixed slopes, evaluated by barycentric
/// interpolation.
#[derive(Debug, Clone)]
pub struct AlphaTable {
    slopes: [f64; MAX_POW],
    offsets: Vec<f64>,
    nodes: Vec<Alpha>,
    /// `(α, Dα)` at grid node `g`, power `p` across all offsets, stored at
    /// `[(g·np + p)·2 + {0, 1}]`.
    columns: Vec<Vec<f64>>,
}

impl AlphaTable {
    pub fn range(&self) -> (f64, f64) {
        (self.offsets[self.offsets.len() - 1], self.offsets[0])
    }

    pub fn slopes(&self) -> &[f64; MAX_POW] {
        &self.slopes
    }

    pub fn contains(&self, c0: f64) -> bool {
        let (lo, hi) = self.range();
        c0 >= lo && c0 <= hi
    }

    /// Interpolated nodal solution at offset `c0` (must lie in [`range`](Self::range)).
    pub fn alpha_at(&self, c0: f64) -> Alpha {
        let lam = self.weights(c0);
        let first = &self.nodes[0];
        let mut out = Alpha::zeros(first.g, first.np);
        for (l, a) in lam.iter().zip(&self.nodes) {
            if *l == 0.0 {
                continue;
            }
            for (o, v) in out.values.iter_mut().zip(&a.values) {
                *o += l * v;
            }
            for (o, v) in out.second.iter_mut().zip(&a.second) {
                *o += l * v;
            }
        }
        out
    }
}

/// Table values at the few grid nodes one [`ObsRule`] touches.
pub(crate) struct LocalAlpha {
    np: usize,
    nodes: Vec<usize>,
    values: Vec<(f64, f64)>,
}

impl AlphaLookup for LocalAlpha {
    #[inline]
    fn at(&self, g: usize, p: usize) -> (f64, f64) {
        let k = self
            .nodes
            .iter()
            .position(|&n| n == g)
            .expect("node touched by the rule");
        self.values[k * self.np + p]
    }
}

impl AlphaTable {
    fn weights(&self, c0: f64) -> Vec<f64> {
        let n = self.offsets.len();
        let mut lam = vec![0.0; n];
        match self.offsets.iter().position(|&x| x == c0) {
            Some(k) => lam[k] = 1.0,
            None => {
                let mut total = 0.0;
                for (k, l) in lam.iter_mut().enumerate() {
                    let mut w = if k % 2 == 0 { 1.0 } else { -1.0 };
                    if k == 0 || k == n - 1 {
                        w *= 0.5;
                    }
                    *l = w / (c0 - self.offsets[k]);
                    total += *l;
                }
                lam.iter_mut().for_each(|l| *l /= total);
            }
        }
        lam
    }

    /// Interpolates only the nodes referenced by `rule`'s stencils.
    pub(crate) fn local(&self, c0: f64, rule: &ObsRule) -> LocalAlpha {
        let lam = self.weights(c0);
        let np = self.nodes[0].np;
        let mut nodes: Vec<usize> = Vec::with_capacity(8);
        for st in &rule.stencils {
            for g in [st.left, st.right] {
                if !nodes.contains(&g) {
                    nodes.push(g);
                }
            }
        }
        let dot = |col: &[f64]| dot4(&lam, col);
        let mut values = Vec::with_capacity(nodes.len() * np);
        for &g in &nodes {
            for p in 0..np {
                let at = (g * np + p) * 2;
                values.push((dot(&self.columns[at]), dot(&self.columns[at + 1])));
            }
        }
        LocalAlpha { np, nodes, values }
    }
}

/// An offset table at fixed slopes plus, for derivatives, tables at slopes
/// perturbed by `±h_q` in each `c_q`, `q ≥ 1`.
#[derive(Debug, Clone)]
pub struct TableSet {
    pub(crate) main: AlphaTable,
    pub(crate) sides: Vec<(f64, AlphaTable, AlphaTable)>,
}

impl TableSet {
    pub fn main(&self) -> &AlphaTable {
        &self.main
    }

    pub fn has_sides(&self) -> bool {
        !self.sides.is_empty()
    }
}

/// The `a` function at one conditioning value: `a_t(x) = m_t(z)·α_{p_t}(x)`.
#[derive(Debug, Clone)]
pub struct AFunction {
    alpha: Alpha,
    coefficients: Option<[f64; MAX_POW]>,
    factors: Vec<f64>,
    powers: Vec<usize>,
}

impl AFunction {
    /// `a ≡ 0`, valid at every conditioning value.
    pub fn zero(engine: &ScoreEngine) -> Self {
        let d = engine.model.design.dim();
        Self {
            alpha: Alpha::zeros(engine.grid.len(), engine.np),
            coefficients: None,
            factors: vec![0.0; d],
            powers: engine.model.design.terms().iter().map(|t| t.x_power).collect(),
        }
    }

    /// `G × d` matrix of `a(x_g)`.
    pub fn values(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.alpha.g, self.factors.len(), |g, t| {
            self.factors[t] * self.alpha.at(g, self.powers[t]).0
        })
    }

    pub fn alpha(&self) -> &Alpha {
        &self.alpha
    }
}

/// Scores of a whole dataset at one `β`.
#[derive(Debug, Clone)]
pub struct ScoreBatch {
    /// `n × d` per-observation efficient scores.
    pub scores: DMatrix<f64>,
    /// `(1/n) Σ_i S_eff(obs_i)`.
    pub mean: DVector<f64>,
    /// `(1/n) Σ_i ∂S_eff/∂βᵀ` when requested.
    pub jacobian: Option<DMatrix<f64>>,
}

/// Per-observation reduced scores and, optionally, `∂ρ_p/∂c_q`.
#[derive(Debug, Clone)]
pub struct Reduced {
    pub rho: Vec<[f64; MAX_POW]>,
    pub drho: Option<Vec<[[f64; MAX_POW]; MAX_POW]>>,
}

/// Reusable buffers for per-observation evaluations.
#[derive(Default)]
pub struct Scratch {
    post: Vec<f64>,
    resid: Vec<f64>,
    eta: Vec<f64>,
}

/// Evaluator of `S*` and `S*_eff` for one model.
#[derive(Debug, Clone)]
pub struct ScoreEngine {
    model: MeModel,
    grid: XGrid,
    interp: Interpolator,
    np: usize,
    /// Rules for `w = x_j + σ t_q`, stored `j`-major.
    colloc: Vec<ObsRule>,
    w_weights: Vec<f64>,
    y_rule: (Vec<f64>, Vec<f64>),
    estar_std: (Vec<f64>, Vec<f64>),
}

fn logistic_pair(eta: f64) -> (f64, f64) {
    if eta >= 0.0 {
        let e = (-eta).exp();
        let d = 1.0 / (1.0 + e);
        (d, e * d)
    } else {
        let e = eta.exp();
        let d = 1.0 / (1.0 + e);
        (e * d, d)
    }
}

/// Dot product with four independent accumulators.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

fn powers(x: f64) -> [f64; MAX_POW] {
    let mut p = [1.0; MAX_POW];
    for k in 1..MAX_POW {
        p[k] = p[k - 1] * x;
    }
    p
}

impl ScoreEngine {
    pub fn new(model: MeModel) -> Result<Self> {
        model.validate()?;
        let q = model.quad;
        let grid = XGrid::for_posited(&model.posited, q.grid_size)?;
        let interp = Interpolator::new(grid.nodes(), q.interp);
        let np = model.design.n_powers();
        let (wt, ww) = if model.error.sd == 0.0 {
            (vec![0.0], vec![1.0])
        } else {
            normal_rule(q.w_nodes)
        };
        let mut engine = Self {
            np,
            colloc: Vec::new(),
            w_weights: ww,
            y_rule: normal_rule(q.y_nodes),
            estar_std: normal_rule(q.estar_nodes),
            grid,
            interp,
            model,
        };
        let sd = engine.model.error.sd;
        let mut colloc = Vec::with_capacity(engine.grid.len() * wt.len());
        for &x in engine.grid.nodes() {
            for t in &wt {
                colloc.push(engine.obs_rule(x + sd * t));
            }
        }
        engine.colloc = colloc;
        Ok(engine)
    }

    pub fn model(&self) -> &MeModel {
        &self.model
    }

    pub fn grid(&self) -> &XGrid {
        &self.grid
    }

    /// Number of reduced score components (`max x power + 1`).
    pub fn n_powers(&self) -> usize {
        self.np
    }

    /// The `E*` rule for an observed surrogate `w`.
    pub fn obs_rule(&self, w: f64) -> ObsRule {
        let sd = self.model.error.sd;
        let (xi, base): (Vec<f64>, Vec<f64>) = match self.model.quad.rule {
            PositedRule::Grid => {
                let log_w: Vec<f64> = self
                    .grid
                    .nodes()
                    .iter()
                    .zip(self.grid.weights())
                    .map(|(x, p)| {
                        let r = (w - x) / sd;
                        p.ln() - 0.5 * r * r
                    })
                    .collect();
                let mx = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (
                    self.grid.nodes().to_vec(),
                    log_w.iter().map(|l| (l - mx).exp()).collect(),
                )
            }
            PositedRule::Adaptive if sd == 0.0 => (vec![w], vec![1.0]),
            PositedRule::Adaptive => {
                let (t, wt) = &self.estar_std;
                match &self.model.posited {
                    Posited::Normal { mean, sd: tau } => {
                        let v = sd * sd + tau * tau;
                        let m = (w * tau * tau + mean * sd * sd) / v;
                        let s = sd * tau / v.sqrt();
                        (t.iter().map(|t| m + s * t).collect(), wt.clone())
                    }
                    Posited::Density { .. } => {
                        let xi: Vec<f64> = t.iter().map(|t| w + sd * t).collect();
                        let base = xi
                            .iter()
                            .zip(wt)
                            .map(|(x, wk)| wk * self.model.posited.pdf(*x))
                            .collect();
                        (xi, base)
                    }
                }
            }
        };
        let mx = base.iter().cloned().fold(0.0, f64::max);
        let base: Vec<f64> = if mx > 0.0 {
            base.iter().map(|b| b / mx).collect()
        } else {
            base
        };
        ObsRule {
            stencils: xi.iter().map(|x| self.interp.stencil(*x)).collect(),
            pows: xi.iter().map(|x| powers(*x)).collect(),
            log_base: base.iter().map(|b| b.ln()).collect(),
            base,
            xi,
        }
    }

    /// Normalized posterior over the rule nodes given `y` and the residuals `r_k`.
    /// Returns false when the observed-data likelihood underflows.
    fn posterior(&self, rule: &ObsRule, c: &[f64; MAX_POW], y: f64, s: &mut Scratch) -> bool {
        let k = rule.len();
        s.post.clear();
        s.resid.clear();
        s.eta.clear();
        for i in 0..k {
            s.eta.push(rule.eta(i, c));
        }
        if let Family::Logistic = self.model.family {
            let mut total = 0.0;
            for i in 0..k {
                let (mu, nmu) = logistic_pair(s.eta[i]);
                let lik = if y > 0.5 { mu } else { nmu };
                let p = rule.base[i] * lik;
                total += p;
                s.post.push(p);
                s.resid.push(y - mu);
            }
            if total > 1e-250 && total.is_finite() {
                s.post.iter_mut().for_each(|p| *p /= total);
                return true;
            }
            s.post.clear();
            s.resid.clear();
        }
        let family = self.model.family;
        let mut mx = f64::NEG_INFINITY;
        for i in 0..k {
            let l = rule.log_base[i] + family.log_density(y, s.eta[i]);
            mx = mx.max(l);
            s.post.push(l);
            s.resid.push(family.residual(y, s.eta[i]));
        }
        if !mx.is_finite() {
            return false;
        }
        let mut total = 0.0;
        for p in s.post.iter_mut() {
            *p = (*p - mx).exp();
            total += *p;
        }
        s.post.iter_mut().for_each(|p| *p /= total);
        true
    }

    fn interp_at<A: AlphaLookup>(&self, st: &Stencil, p: usize, alpha: &A) -> f64 {
        let (al, dl) = alpha.at(st.left, p);
        let (ar, dr) = alpha.at(st.right, p);
        st.cl * al + st.cr * ar + st.dl * dl + st.dr * dr
    }

    /// `ρ_p = E*{r·X^p − α_p(X) | w, y}`; `alpha = None` gives the purported score.
    fn reduced_one<A: AlphaLookup>(
        &self,
        rule: &ObsRule,
        y: f64,
        c: &[f64; MAX_POW],
        alpha: Option<&A>,
        s: &mut Scratch,
    ) -> Option<[f64; MAX_POW]> {
        if !self.posterior(rule, c, y, s) {
            return None;
        }
        let mut rho = [0.0; MAX_POW];
        for k in 0..rule.len() {
            let pk = s.post[k];
            if pk == 0.0 {
                continue;
            }
            let pr = pk * s.resid[k];
            let pw = &rule.pows[k];
            for p in 0..self.np {
                let mut v = pr * pw[p];
                if let Some(a) = alpha {
                    v -= pk * self.interp_at(&rule.stencils[k], p, a);
                }
                rho[p] += v;
            }
        }
        Some(rho)
    }

    /// Assembles the collocation system `M α = R` at coefficients `c`.
    fn assemble(&self, c: &[f64; MAX_POW]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let g = self.grid.len();
        let np = self.np;
        let qn = self.w_weights.len();
        let dmat = self.interp.second_operator();
        let cubic = dmat.ncols() > 0 && self.interp.kind() == crate::quadrature::InterpKind::Cubic;
        let mut m = DMatrix::<f64>::zeros(g, g);
        let mut rhs = DMatrix::<f64>::zeros(g, np);
        let mut s = Scratch::default();
        let mut u = vec![0.0; g];
        let mut v = vec![0.0; g];
        let ys = match self.model.family {
            Family::Logistic => Vec::new(),
            Family::Gaussian { sd } => self.y_rule.0.iter().map(|t| sd * t).collect(),
        };
        for j in 0..g {
            u.iter_mut().for_each(|x| *x = 0.0);
            v.iter_mut().for_each(|x| *x = 0.0);
            let xj = self.grid.nodes()[j];
            let eta_j = c[0] + c[1] * xj + c[2] * xj * xj + c[3] * xj * xj * xj;
            let mut acc = [0.0; MAX_POW];
            for q in 0..qn {
                let rule = &self.colloc[j * qn + q];
                let wq = self.w_weights[q];
                match self.model.family {
                    Family::Logistic => {
                        let (mu_j, nmu_j) = logistic_pair(eta_j);
                        s.eta.clear();
                        s.post.clear();
                        s.resid.clear();
                        let mut s1 = 0.0;
                        let mut s0 = 0.0;
                        for k in 0..rule.len() {
                            let (mu, nmu) = logistic_pair(rule.eta(k, c));
                            s1 += rule.base[k] * mu;
                            s0 += rule.base[k] * nmu;
                            s.eta.push(mu);
                            s.resid.push(nmu);
                        }
                        if s1 > 1e-250 && s0 > 1e-250 {
                            let t1 = wq * mu_j / s1;
                            let t0 = wq * nmu_j / s0;
                            for k in 0..rule.len() {
                                let (mu, nmu) = (s.eta[k], s.resid[k]);
                                let b = rule.base[k];
                                let pk = b * (t1 * mu + t0 * nmu);
                                let rk = b * mu * nmu * (t1 - t0);
                                let st = &rule.stencils[k];
                                u[st.left] += pk * st.cl;
                                u[st.right] += pk * st.cr;
                                v[st.left] += pk * st.dl;
                                v[st.right] += pk * st.dr;
                                let pw = &rule.pows[k];
                                for p in 0..np {
                                    acc[p] += rk * pw[p];
                                }
                            }
                        } else {
                            for (y, py) in [(1.0, mu_j), (0.0, nmu_j)] {
                                self.accumulate_generic(rule, c, y, wq * py, &mut s, &mut u, &mut v, &mut acc)?;
                            }
                        }
                    }
                    Family::Gaussian { .. } => {
                        for (t, wy) in ys.iter().zip(&self.y_rule.1) {
                            self.accumulate_generic(rule, c, eta_j + t, wq * wy, &mut s, &mut u, &mut v, &mut acc)?;
                        }
                    }
                }
            }
            for col in 0..g {
                let mut val = u[col];
                if cubic {
                    for (r, vr) in v.iter().enumerate() {
                        if *vr != 0.0 {
                            val += vr * dmat[(r, col)];
                        }
                    }
                }
                m[(j, col)] = val;
            }
            for p in 0..np {
                rhs[(j, p)] = acc[p];
            }
        }
        Ok((m, rhs))
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate_generic(
        &self,
        rule: &ObsRule,
        c: &[f64; MAX_POW],
        y: f64,
        weight: f64,
        s: &mut Scratch,
        u: &mut [f64],
        v: &mut [f64],
        acc: &mut [f64; MAX_POW],
    ) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        if !self.posterior(rule, c, y, s) {
            return Err(Error::SingularKernel {
                condition: f64::INFINITY,
            });
        }
        for k in 0..rule.len() {
            let pk = weight * s.post[k];
            let st = &rule.stencils[k];
            u[st.left] += pk * st.cl;
            u[st.right] += pk * st.cr;
            v[st.left] += pk * st.dl;
            v[st.right] += pk * st.dr;
            let pw = &rule.pows[k];
            for p in 0..self.np {
                acc[p] += pk * s.resid[k] * pw[p];
            }
        }
        Ok(())
    }

    /// Solves the discretized integral equation at coefficients `c`.
    pub fn solve_alpha(&self, c: &[f64; MAX_POW]) -> Result<Alpha> {
        let (m, rhs) = self.assemble(c)?;
        let g = self.grid.len();
        let scale = rhs.amax();
        let mut alpha = Alpha::zeros(g, self.np);
        if scale == 0.0 {
            return Ok(alpha);
        }
        let tol = RESIDUAL_TOL * scale;
        let attempt = |ridge: f64| -> Option<DMatrix<f64>> {
            let mut mm = m.clone();
            if ridge > 0.0 {
                let shift = ridge * m.trace() / g as f64;
                for i in 0..g {
                    mm[(i, i)] += shift;
                }
            }
            let sol = mm.clone().lu().solve(&rhs)?;
            let res = (&mm * &sol - &rhs).amax();
            (res <= tol && sol.iter().all(|v| v.is_finite())).then_some(sol)
        };
        let mut found = attempt(0.0).map(|s| (s, 0.0));
        for &ridge in &RIDGES {
            if found.is_some() {
                break;
            }
            found = attempt(ridge).map(|s| (s, ridge));
        }
        let Some((sol, ridge)) = found else {
            let sv = m.singular_values();
            let condition = sv.max() / sv.min();
            return Err(Error::SingularKernel { condition });
        };
        let second = self.interp.second_operator() * &sol;
        for gi in 0..g {
            for p in 0..self.np {
                alpha.values[gi * self.np + p] = sol[(gi, p)];
                alpha.second[gi * self.np + p] = if second.nrows() == g { second[(gi, p)] } else { 0.0 };
            }
        }
        alpha.ridge = ridge;
        Ok(alpha)
    }

    /// Tabulates `α` over offsets covering `[c0_min, c0_max]` for fixed slopes.
    pub fn build_table(&self, slopes: &[f64; MAX_POW], c0_min: f64, c0_max: f64) -> Result<AlphaTable> {
        let spacing = self.model.quad.table_step.unwrap_or(DEFAULT_TABLE_SPACING);
        let pad = 0.5 * spacing;
        let (lo, hi) = (c0_min - pad, c0_max + pad);
        let n = (((hi - lo) / spacing).ceil() as usize + 1).clamp(8, 600);
        let offsets: Vec<f64> = (0..n)
            .map(|k| {
                let t = (std::f64::consts::PI * k as f64 / (n - 1) as f64).cos();
                0.5 * (lo + hi) + 0.5 * (hi - lo) * t
            })
            .collect();
        let nodes = offsets
            .par_iter()
            .map(|&c0| {
                let mut c = *slopes;
                c[0] = c0;
                self.solve_alpha(&c)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut slopes = *slopes;
        slopes[0] = 0.0;
        let (g, np) = (nodes[0].g, nodes[0].np);
        let mut columns = vec![Vec::with_capacity(nodes.len()); g * np * 2];
        for a in &nodes {
            for gi in 0..g {
                for p in 0..np {
                    let (v, d) = a.at(gi, p);
                    columns[(gi * np + p) * 2].push(v);
                    columns[(gi * np + p) * 2 + 1].push(d);
                }
            }
        }
        Ok(AlphaTable {
            slopes,
            offsets,
            nodes,
            columns,
        })
    }

    /// `α` at offset `c0` from `table`, solving directly outside its range.
    pub fn table_alpha(&self, table: &AlphaTable, c0: f64) -> Result<Alpha> {
        if table.contains(c0) {
            Ok(table.alpha_at(c0))
        } else {
            let mut c = table.slopes;
            c[0] = c0;
            self.solve_alpha(&c)
        }
    }

    pub fn obs_rules(&self, data: &Dataset) -> Vec<ObsRule> {
        data.w.iter().map(|w| self.obs_rule(*w)).collect()
    }

    /// Whether `coefs` can be served by a single offset table.
    fn table_applicable(&self, coefs: &[[f64; MAX_POW]]) -> bool {
        self.model.quad.table_step.is_some() && coefs.len() > 1 && coefs.iter().all(|c| c[1..] == coefs[0][1..])
    }

    /// Reduced scores `ρ_i` at per-observation coefficients `coefs[i]`,
    /// with `∂ρ_i/∂c` by central differences when `derivs` is set.
    pub fn reduced_scores(
        &self,
        rules: &[ObsRule],
        y: &[f64],
        coefs: &[[f64; MAX_POW]],
        derivs: bool,
    ) -> Result<Reduced> {
        if self.table_applicable(coefs) {
            self.reduced_table(rules, y, coefs, derivs)
        } else {
            self.reduced_exact(rules, y, coefs, derivs)
        }
    }

    pub(crate) fn fd_step(c: f64) -> f64 {
        f64::EPSILON.cbrt() * c.abs().max(1.0)
    }

    fn reduced_exact(&self, rules: &[ObsRule], y: &[f64], coefs: &[[f64; MAX_POW]], derivs: bool) -> Result<Reduced> {
        let np = self.np;
        let out = (0..rules.len())
            .into_par_iter()
            .map_init(Scratch::default, |s, i| {
                let degenerate = Error::DegenerateLikelihood { index: i };
                let eval = |c: &[f64; MAX_POW], s: &mut Scratch| -> Result<[f64; MAX_POW]> {
                    let alpha = self.solve_alpha(c)?;
                    self.reduced_one(&rules[i], y[i], c, Some(&alpha), s)
                        .ok_or_else(|| degenerate.clone())
                };
                let rho = eval(&coefs[i], s)?;
                let mut d = [[0.0; MAX_POW]; MAX_POW];
                if derivs {
                    for q in 0..np {
                        let h = Self::fd_step(coefs[i][q]);
                        let mut cp = coefs[i];
                        let mut cm = coefs[i];
                        cp[q] += h;
                        cm[q] -= h;
                        let rp = eval(&cp, s)?;
                        let rm = eval(&cm, s)?;
                        for p in 0..np {
                            d[p][q] = (rp[p] - rm[p]) / (2.0 * h);
                        }
                    }
                }
                Ok((rho, d))
            })
            .collect::<Result<Vec<_>>>()?;
        let (rho, d): (Vec<_>, Vec<_>) = out.into_iter().unzip();
        Ok(Reduced {
            rho,
            drho: derivs.then_some(d),
        })
    }

    fn reduced_table(&self, rules: &[ObsRule], y: &[f64], coefs: &[[f64; MAX_POW]], derivs: bool) -> Result<Reduced> {
        let (mut lo, mut hi) = coefs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| {
            (l.min(c[0]), h.max(c[0]))
        });
        if derivs {
            lo -= Self::fd_step(lo);
            hi += Self::fd_step(hi);
        }
        let tables = self.build_table_set(&coefs[0], lo, hi, derivs)?;
        self.reduced_from_tables(&tables, rules, y, coefs, derivs)
    }

    /// Offset tables over `[c0_min, c0_max]` at `slopes`, with the perturbed
    /// side tables needed for slope derivatives when `derivs` is set.
    pub fn build_table_set(&self, slopes: &[f64; MAX_POW], c0_min: f64, c0_max: f64, derivs: bool) -> Result<TableSet> {
        let main = self.build_table(slopes, c0_min, c0_max)?;
        let mut sides = Vec::new();
        if derivs {
            for q in 1..self.np {
                let h = Self::fd_step(slopes[q]);
                let mut sp = *slopes;
                let mut sm = *slopes;
                sp[q] += h;
                sm[q] -= h;
                sides.push((
                    h,
                    self.build_table(&sp, c0_min, c0_max)?,
                    self.build_table(&sm, c0_min, c0_max)?,
                ));
            }
        }
        Ok(TableSet { main, sides })
    }

    /// `ρ` at `c` for one observation, with `α` read from `table`
    /// (solved directly when `c_0` is outside its range).
    pub fn reduced_at(
        &self,
        table: &AlphaTable,
        rule: &ObsRule,
        y: f64,
        c: &[f64; MAX_POW],
        s: &mut Scratch,
    ) -> Result<[f64; MAX_POW]> {
        let degenerate = || Error::DegenerateLikelihood { index: 0 };
        if table.contains(c[0]) {
            let a = table.local(c[0], rule);
            self.reduced_one(rule, y, c, Some(&a), s).ok_or_else(degenerate)
        } else {
            let a = self.table_alpha(table, c[0])?;
            self.reduced_one(rule, y, c, Some(&a), s).ok_or_else(degenerate)
        }
    }

    /// `∂ρ/∂c` for one observation by central differences on `tables`.
    pub fn reduced_derivs_at(
        &self,
        tables: &TableSet,
        rule: &ObsRule,
        y: f64,
        c: &[f64; MAX_POW],
        s: &mut Scratch,
    ) -> Result<[[f64; MAX_POW]; MAX_POW]> {
        let np = self.np;
        let mut d = [[0.0; MAX_POW]; MAX_POW];
        let h = Self::fd_step(c[0]);
        let (mut cp, mut cm) = (*c, *c);
        cp[0] += h;
        cm[0] -= h;
        let rp = self.reduced_at(&tables.main, rule, y, &cp, s)?;
        let rm = self.reduced_at(&tables.main, rule, y, &cm, s)?;
        for p in 0..np {
            d[p][0] = (rp[p] - rm[p]) / (2.0 * h);
        }
        for (q, (h, tp, tm)) in tables.sides.iter().enumerate() {
            let q = q + 1;
            let (mut cp, mut cm) = (*c, *c);
            cp[q] += h;
            cm[q] -= h;
            let rp = self.reduced_at(tp, rule, y, &cp, s)?;
            let rm = self.reduced_at(tm, rule, y, &cm, s)?;
            for p in 0..np {
                d[p][q] = (rp[p] - rm[p]) / (2.0 * h);
            }
        }
        Ok(d)
    }

    /// Reduced scores at `coefs` (sharing the slopes of `tables`).
    pub fn reduced_from_tables(
        &self,
        tables: &TableSet,
        rules: &[ObsRule],
        y: &[f64],
        coefs: &[[f64; MAX_POW]],
        derivs: bool,
    ) -> Result<Reduced> {
        if derivs && tables.sides.len() + 1 < self.np {
            return Err(Error::InvalidConfig("table set lacks slope derivatives".into()));
        }
        let out = (0..rules.len())
            .into_par_iter()
            .map_init(Scratch::default, |s, i| {
                let tag = |e: Error| match e {
                    Error::DegenerateLikelihood { .. } => Error::DegenerateLikelihood { index: i },
                    other => other,
                };
                let rho = self
                    .reduced_at(&tables.main, &rules[i], y[i], &coefs[i], s)
                    .map_err(tag)?;
                let d = if derivs {
                    self.reduced_derivs_at(tables, &rules[i], y[i], &coefs[i], s)
                        .map_err(tag)?
                } else {
                    [[0.0; MAX_POW]; MAX_POW]
                };
                Ok((rho, d))
            })
            .collect::<Result<Vec<_>>>()?;
        let (rho, d): (Vec<_>, Vec<_>) = out.into_iter().unzip();
        Ok(Reduced {
            rho,
            drho: derivs.then_some(d),
        })
    }

    /// Per-observation polynomial coefficients `c(z_i)` at `β`.
    pub fn coefficients(&self, data: &Dataset, beta: &[f64]) -> Vec<[f64; MAX_POW]> {
        (0..data.len())
            .map(|i| self.model.design.poly_coefficients(beta, data.covariates_of(i)))
            .collect()
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.model.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.dim(),
                got: beta.len(),
            });
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Efficient scores of every observation, their mean and optionally the mean Jacobian.
    pub fn evaluate(&self, data: &Dataset, beta: &[f64], jacobian: bool) -> Result<ScoreBatch> {
        let rules = self.obs_rules(data);
        self.evaluate_with(&rules, data, beta, jacobian)
    }

    /// As [`evaluate`](Self::evaluate) with precomputed `E*` rules.
    pub fn evaluate_with(&self, rules: &[ObsRule], data: &Dataset, beta: &[f64], jacobian: bool) -> Result<ScoreBatch> {
        self.check_beta(beta)?;
        let coefs = self.coefficients(data, beta);
        let red = self.reduced_scores(rules, &data.y, &coefs, jacobian)?;
        Ok(self.expand(data, &red))
    }

    /// Maps reduced scores back to the design: `S_t = m_t ρ_{p_t}`,
    /// `∂S_t/∂β_u = m_t m_u ∂ρ_{p_t}/∂c_{p_u}`.
    pub fn expand(&self, data: &Dataset, red: &Reduced) -> ScoreBatch {
        let n = data.len();
        let terms = self.model.design.terms();
        let d = terms.len();
        let mut scores = DMatrix::<f64>::zeros(n, d);
        let mut jac = red.drho.as_ref().map(|_| DMatrix::<f64>::zeros(d, d));
        for i in 0..n {
            let f = self.model.design.factors(data.covariates_of(i));
            for t in 0..d {
                scores[(i, t)] = f[t] * red.rho[i][terms[t].x_power];
            }
            if let (Some(j), Some(dr)) = (jac.as_mut(), red.drho.as_ref()) {
                for t in 0..d {
                    for u in 0..d {
                        j[(t, u)] += f[t] * f[u] * dr[i][terms[t].x_power][terms[u].x_power];
                    }
                }
            }
        }
        let nf = n.max(1) as f64;
        let mean = DVector::from_iterator(d, scores.column_iter().map(|c| c.sum() / nf));
        ScoreBatch {
            scores,
            mean,
            jacobian: jac.map(|j| j / nf),
        }
    }
}

fn expand_one(engine: &ScoreEngine, z: &[f64], rho: &[f64; MAX_POW]) -> Vec<f64> {
    engine
        .model
        .design
        .terms()
        .iter()
        .map(|t| t.factor(z) * rho[t.x_power])
        .collect()
}

/// `S*_β` at one observation: the gradient of the observed-data log-likelihood
/// under the posited law.
pub fn purported_score(engine: &ScoreEngine, obs: Obs<'_>, beta: &[f64]) -> Result<Vec<f64>> {
    engine.check_beta(beta)?;
    let rule = engine.obs_rule(obs.w);
    let c = engine.model.design.poly_coefficients(beta, obs.z);
    let rho = engine
        .reduced_one::<Alpha>(&rule, obs.y, &c, None, &mut Scratch::default())
        .ok_or(Error::DegenerateLikelihood { index: 0 })?;
    Ok(expand_one(engine, obs.z, &rho))
}

/// Solves the integral equation for `a(·, z)` at `β`.
pub fn solve_a_function(engine: &ScoreEngine, z: &[f64], beta: &[f64]) -> Result<AFunction> {
    engine.check_beta(beta)?;
    let c = engine.model.design.poly_coefficients(beta, z);
    let alpha = engine.solve_alpha(&c)?;
    Ok(AFunction {
        alpha,
        coefficients: Some(c),
        factors: engine.model.design.factors(z),
        powers: engine.model.design.terms().iter().map(|t| t.x_power).collect(),
    })
}

/// `S*_eff = S*_β − E*{a(X, z) | w, z, y}` at one observation.
pub fn eff_score(engine: &ScoreEngine, obs: Obs<'_>, beta: &[f64], a: &AFunction) -> Result<Vec<f64>> {
    engine.check_beta(beta)?;
    let c = engine.model.design.poly_coefficients(beta, obs.z);
    if let Some(ac) = a.coefficients {
        let scale = c.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if ac.iter().zip(&c).any(|(x, y)| (x - y).abs() > 1e-12 * scale) {
            return Err(Error::InvalidConfig(
                "a function was solved at a different conditioning value or coefficient".into(),
            ));
        }
    }
    let rule = engine.obs_rule(obs.w);
    let rho = engine
        .reduced_one(&rule, obs.y, &c, Some(&a.alpha), &mut Scratch::default())
        .ok_or(Error::DegenerateLikelihood { index: 0 })?;
    Ok(expand_one(engine, obs.z, &rho))
}

/// `(1/n) Σ_i ∂S_eff(obs_i, β)/∂βᵀ`.
pub fn eff_score_jacobian(engine: &ScoreEngine, data: &Dataset, beta: &[f64]) -> Result<DMatrix<f64>> {
    Ok(engine.evaluate(data, beta, true)?.jacobian.expect("requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Design, NormalError, QuadratureSettings};

    fn logistic_model(sd: f64, quad: QuadratureSettings) -> ScoreEngine {
        let m = MeModel::new(Family::Logistic, Design::linear(1), NormalError::new(sd).unwrap()).with_quadrature(quad);
        ScoreEngine::new(m).unwrap()
    }

    #[test]
    fn xgrid_normal_matches_hermite() {
        let g = XGrid::for_posited(&Posited::Normal { mean: 1.0, sd: 2.0 }, 15).unwrap();
        let mean: f64 = g.nodes().iter().zip(g.weights()).map(|(x, w)| x * w).sum();
        let var: f64 = g
            .nodes()
            .iter()
            .zip(g.weights())
            .map(|(x, w)| w * (x - 1.0).powi(2))
            .sum();
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((var - 4.0).abs() < 1e-10);
    }

    #[test]
    fn single_node_grid_gives_complete_data_score() {
        let quad = QuadratureSettings {
            grid_size: 1,
            rule: PositedRule::Grid,
            ..Default::default()
        };
        let e = logistic_model(0.5, quad);
        let beta = [0.3, -1.2, 0.7];
        let z = [0.4];
        let s = purported_score(&e, Obs { w: 1.7, z: &z, y: 1.0 }, &beta).unwrap();
        let r = 1.0 - crate::model::logistic(0.3 + 0.7 * 0.4);
        let expect = [r, 0.0, r * 0.4];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
        // a(x1) is the conditional mean of S*, which is zero at the single node
        let a = solve_a_function(&e, &z, &beta).unwrap();
        assert!(a.values().amax() < 1e-14);
    }

    #[test]
    fn zero_a_gives_purported_score() {
        let e = logistic_model(0.3, QuadratureSettings::default());
        let beta = [0.1, 0.8, -0.5];
        let z = [1.1];
        let obs = Obs { w: -0.4, z: &z, y: 0.0 };
        let s = purported_score(&e, obs, &beta).unwrap();
        let t = eff_score(&e, obs, &beta, &AFunction::zero(&e)).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn table_matches_exact() {
        let e = logistic_model(0.4, QuadratureSettings::default());
        let slopes = [0.0, 1.3, 0.0, 0.0];
        let t = e.build_table(&slopes, -6.0, 5.0).unwrap();
        for c0 in [-5.9, -1.37, 0.0, 0.512, 1.9, 4.99] {
            let mut c = slopes;
            c[0] = c0;
            let exact = e.solve_alpha(&c).unwrap().values();
            let tab = t.alpha_at(c0).values();
            let err = (exact - tab).amax();
            assert!(err < 1e-6, "c0 {c0}: {err:e}");
        }
    }

    #[test]
    fn efficient_score_is_conditionally_mean_zero_at_nodes() {
        // E{S_eff | X = x_j} vanishes at the collocation nodes by construction
        let e = logistic_model(0.5, QuadratureSettings::default());
        let beta = [0.2, 1.0, -0.3];
        let z = [0.5];
        let a = solve_a_function(&e, &z, &beta).unwrap();
        let (t, wt) = normal_rule(40);
        for &xj in &e.grid().nodes()[5..20] {
            let mut mean = vec![0.0; 3];
            for (tq, wq) in t.iter().zip(&wt) {
                let w = xj + 0.5 * tq;
                let mu = crate::model::logistic(0.2 + xj - 0.15);
                for (y, py) in [(1.0, mu), (0.0, 1.0 - mu)] {
                    let s = eff_score(&e, Obs { w, z: &z, y }, &beta, &a).unwrap();
                    for (m, v) in mean.iter_mut().zip(s) {
                        *m += wq * py * v;
                    }
                }
            }
            assert!(mean.iter().all(|m| m.abs() < 1e-6), "{mean:?}");
        }
    }
}
