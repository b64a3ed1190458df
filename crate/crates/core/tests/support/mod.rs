//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use measel::model::{logistic, Design, Family, PositedRule};
use measel::{Dataset, MeModel, NormalError, QuadratureSettings, ScoreEngine};
use nalgebra::{DMatrix, DVector, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Gamma, StandardNormal};

/// Logistic model linear in `(1, x)`, two-node posited grid, two-point `W` rule.
pub fn toy_engine(sd: f64) -> ScoreEngine {
    let quad = QuadratureSettings {
        grid_size: 2,
        w_nodes: 2,
        rule: PositedRule::Grid,
        ..Default::default()
    };
    let model = MeModel::new(Family::Logistic, Design::linear(0), NormalError::new(sd).unwrap()).with_quadrature(quad);
    ScoreEngine::new(model).unwrap()
}

/// Hand-built discretized integral equation: grid `x = ±1` with weights 1/2,
/// `W | x` at `x ± σ` with weights 1/2, posterior weights over the grid.
pub fn brute_force_a(beta: [f64; 2], sd: f64) -> [[f64; 2]; 2] {
    let xs = [-1.0, 1.0];
    let p = |y: f64, x: f64| {
        let m = logistic(beta[0] + beta[1] * x);
        if y == 1.0 {
            m
        } else {
            1.0 - m
        }
    };
    let phi = |w: f64, x: f64| (-0.5 * ((w - x) / sd).powi(2)).exp();
    let post = |w: f64, y: f64| {
        let u = [0.5 * phi(w, xs[0]) * p(y, xs[0]), 0.5 * phi(w, xs[1]) * p(y, xs[1])];
        let s = u[0] + u[1];
        [u[0] / s, u[1] / s]
    };
    let score = |x: f64, y: f64| {
        let r = y - logistic(beta[0] + beta[1] * x);
        [r, r * x]
    };
    let mut m = Matrix2::<f64>::zeros();
    let mut r = Matrix2::<f64>::zeros();
    for j in 0..2 {
        for w in [xs[j] - sd, xs[j] + sd] {
            for y in [0.0, 1.0] {
                let wt = 0.5 * p(y, xs[j]);
                let pi = post(w, y);
                for g in 0..2 {
                    m[(j, g)] += wt * pi[g];
                    let s = score(xs[g], y);
                    r[(j, 0)] += wt * pi[g] * s[0];
                    r[(j, 1)] += wt * pi[g] * s[1];
                }
            }
        }
    }
    let a = m.lu().solve(&r).unwrap();
    [[a[(0, 0)], a[(0, 1)]], [a[(1, 0)], a[(1, 1)]]]
}

pub fn logistic_engine(sd: f64, n_cov: usize) -> ScoreEngine {
    ScoreEngine::new(MeModel::new(
        Family::Logistic,
        Design::linear(n_cov),
        NormalError::new(sd).unwrap(),
    ))
    .unwrap()
}

pub fn logistic_sample(n: usize, beta: &[f64], error_sd: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut w, mut z, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let zi: f64 = rng.sample(StandardNormal);
        let m = logistic(beta[0] + beta[1] * x + beta[2] * zi);
        y.push(if rng.random::<f64>() < m { 1.0 } else { 0.0 });
        w.push(x + error_sd * rng.sample::<f64, _>(StandardNormal));
        z.push(zi);
    }
    Dataset::new(w, z, 1, y).unwrap()
}

/// Logistic MLE of `y` on `(1, w, z)` by Newton's method.
pub fn logistic_mle(d: &Dataset) -> Vec<f64> {
    let mut b = DVector::<f64>::zeros(3);
    for _ in 0..50 {
        let mut g = DVector::<f64>::zeros(3);
        let mut h = DMatrix::<f64>::zeros(3, 3);
        for i in 0..d.len() {
            let v = DVector::from_vec(vec![1.0, d.w[i], d.covariates_of(i)[0]]);
            let m = logistic(v.dot(&b));
            g += &v * (d.y[i] - m);
            h += &v * v.transpose() * (m * (1.0 - m));
        }
        b += h.lu().solve(&g).unwrap();
    }
    b.iter().copied().collect()
}

/// Observations with `X` from a centred, skewed gamma law; the fit posits a standard normal.
pub fn misspecified_sample(n: usize, beta: &[f64], error_sd: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(2.0, 0.5).unwrap();
    let coin = Bernoulli::new(0.4).unwrap();
    let (mut w, mut z, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x: f64 = rng.sample(gamma) - 1.0;
        let zi = if rng.sample(coin) { 1.0 } else { 0.0 };
        let m = logistic(beta[0] + beta[1] * x + beta[2] * zi);
        y.push(if rng.random::<f64>() < m { 1.0 } else { 0.0 });
        w.push(x + error_sd * rng.sample::<f64, _>(StandardNormal));
        z.push(zi);
    }
    Dataset::new(w, z, 1, y).unwrap()
}
