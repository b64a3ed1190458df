//! Simulation designs and the replication harness.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logistic, Dataset};

/// Generator name recorded in reports.
pub const RNG_NAME: &str = "ChaCha8 (rand_chacha), stream = replication + 1";

/// Stream `stream` of the master seed. Stream 0 drives the one-off generators,
/// replication `r` uses stream `r + 1`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignName {
    Example1,
    Example2,
}

impl std::str::FromStr for DesignName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example1" => Ok(DesignName::Example1),
            "example2" => Ok(DesignName::Example2),
            other => Err(Error::InvalidConfig(format!(
                "unknown design `{other}` (valid designs: example1, example2)"
            ))),
        }
    }
}

impl std::fmt::Display for DesignName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DesignName::Example1 => "example1",
            DesignName::Example2 => "example2",
        })
    }
}

/// True parameters of a simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub zero_set: Vec<usize>,
    pub error_sd: f64,
    /// Whether the design has the nonparametric `θ(Z) = 0.5 cos Z` component.
    pub semiparametric: bool,
}

impl Truth {
    pub fn theta(&self, z: f64) -> f64 {
        if self.semiparametric {
            0.5 * z.cos()
        } else {
            0.0
        }
    }
}

pub const EXAMPLE1_BETA: [f64; 10] = [0.0, 1.5, 2.0, 0.0, 3.0, 0.0, 1.5, 0.0, 0.0, 0.0];
pub const EXAMPLE2_BETA: [f64; 10] = [1.5, 2.0, 0.0, 0.0, 3.0, 0.0, 1.5, 0.0, 0.0, 0.0];
pub const ERROR_SD: f64 = 0.1;

pub fn truth(design: DesignName) -> Truth {
    let beta = match design {
        DesignName::Example1 => EXAMPLE1_BETA.to_vec(),
        DesignName::Example2 => EXAMPLE2_BETA.to_vec(),
    };
    Truth {
        zero_set: beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b == 0.0)
            .map(|(j, _)| j)
            .collect(),
        beta,
        error_sd: ERROR_SD,
        semiparametric: design == DesignName::Example2,
    }
}

/// Lower Cholesky factor of the `0.5^{|i−j|}` covariance of order `k`.
pub fn ar_factor(k: usize, rho: f64) -> DMatrix<f64> {
    let cov = DMatrix::from_fn(k, k, |i, j| rho.powi((i as i32 - j as i32).abs()));
    cov.cholesky().expect("AR covariance is positive definite").l()
}

/// Correlated normals with covariance factor `l`, then a fair binary.
fn covariates<R: Rng + ?Sized>(rng: &mut R, l: &DMatrix<f64>, out: &mut Vec<f64>) {
    let k = l.nrows();
    let e: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..k {
        out.push((0..=i).map(|j| l[(i, j)] * e[j]).sum());
    }
    let b: bool = rng.sample(Bernoulli::new(0.5).expect("valid probability"));
    out.push(if b { 1.0 } else { 0.0 });
}

/// Draws one row `(x, z)` of Example 1: `x ~ N(0,1)`, six AR(0.5) normals and a fair binary.
pub fn draw_example1_row<R: Rng + ?Sized>(rng: &mut R, l: &DMatrix<f64>, z: &mut Vec<f64>) -> f64 {
    let x: f64 = rng.sample(StandardNormal);
    z.clear();
    covariates(rng, l, z);
    x
}

/// Example 1: logistic model quadratic in `X` with seven error-free covariates.
pub fn gen_example1_with<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Dataset, Vec<f64>) {
    let beta = EXAMPLE1_BETA;
    let l = ar_factor(6, 0.5);
    let mut cov = Vec::with_capacity(n * 7);
    let (mut w, mut y, mut xs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut z = Vec::with_capacity(7);
    for _ in 0..n {
        let x = draw_example1_row(rng, &l, &mut z);
        let u: f64 = rng.sample(StandardNormal);
        let eta = beta[0] + beta[1] * x + beta[2] * x * x + z.iter().zip(&beta[3..]).map(|(a, b)| a * b).sum::<f64>();
        let v: f64 = rng.sample(Uniform::new(0.0, 1.0).expect("valid range"));
        y.push(if v < logistic(eta) { 1.0 } else { 0.0 });
        w.push(x + ERROR_SD * u);
        xs.push(x);
        cov.extend_from_slice(&z);
    }
    (Dataset::new(w, cov, 7, y).expect("consistent shapes"), xs)
}

pub fn gen_example1(n: usize, seed: u64) -> (Dataset, Truth) {
    let (d, _) = gen_example1_with(n, &mut stream_rng(seed, 0));
    (d, truth(DesignName::Example1))
}

/// Draws one row of Example 2: `x ~ N(0,1)`, `z ~ U[−π/2, π/2]`, eight AR(0.5)
/// normals and a fair binary in `s`.
pub fn draw_example2_row<R: Rng + ?Sized>(rng: &mut R, l: &DMatrix<f64>, s: &mut Vec<f64>) -> (f64, f64) {
    let x: f64 = rng.sample(StandardNormal);
    s.clear();
    covariates(rng, l, s);
    let half = std::f64::consts::FRAC_PI_2;
    let z: f64 = rng.sample(Uniform::new_inclusive(-half, half).expect("valid range"));
    (x, z)
}

/// Example 2: partially linear logistic model `β₁X + β_sᵀS + θ(Z)` with `θ(Z) = 0.5 cos Z`.
pub fn gen_example2_with<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Dataset, Vec<f64>) {
    let beta = EXAMPLE2_BETA;
    let l = ar_factor(8, 0.5);
    let mut cov = Vec::with_capacity(n * 9);
    let (mut w, mut y, mut zs, mut xs) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut s = Vec::with_capacity(9);
    for _ in 0..n {
        let (x, z) = draw_example2_row(rng, &l, &mut s);
        let u: f64 = rng.sample(StandardNormal);
        let eta = beta[0] * x + s.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>() + 0.5 * z.cos();
        let v: f64 = rng.sample(Uniform::new(0.0, 1.0).expect("valid range"));
        y.push(if v < logistic(eta) { 1.0 } else { 0.0 });
        w.push(x + ERROR_SD * u);
        xs.push(x);
        zs.push(z);
        cov.extend_from_slice(&s);
    }
    let data = Dataset::new(w, cov, 9, y)
        .and_then(|d| d.with_smoothing(zs))
        .expect("consistent shapes");
    (data, xs)
}

pub fn gen_example2(n: usize, seed: u64) -> (Dataset, Truth) {
    let (d, _) = gen_example2_with(n, &mut stream_rng(seed, 0));
    (d, truth(DesignName::Example2))
}

/// Terms of the three-covariate analysis layout: interactions of `w` with each
/// covariate, main effects, the square of the continuous `z2` and pairwise products.
pub const ANALYSIS_TERMS: [&str; 12] = [
    "w", "w*z1", "w*z2", "w*z3", "1", "z1", "z2", "z3", "z2^2", "z1*z2", "z1*z3", "z2*z3",
];

/// Sparse truth over [`ANALYSIS_TERMS`].
pub const ANALYSIS_BETA: [f64; 12] = [1.0, 0.0, 0.0, 0.0, -1.0, 0.8, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0];

/// Synthetic data for [`ANALYSIS_TERMS`]: `x ~ N(0,1)`, binary `z1` and `z3`,
/// `z2 ~ N(0,1)`, `W = X + U` with `U ~ N(0, error_sd²)`. Returns the dataset
/// with covariate columns `(z1, z2, z3)` and the true `x`.
pub fn gen_analysis_with<R: Rng + ?Sized>(n: usize, error_sd: f64, rng: &mut R) -> (Dataset, Vec<f64>) {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let (mut w, mut y, mut xs, mut cov) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let z = [
            if rng.sample(coin) { 1.0 } else { 0.0 },
            rng.sample(StandardNormal),
            if rng.sample(coin) { 1.0 } else { 0.0 },
        ];
        let row = [
            x,
            x * z[0],
            x * z[1],
            x * z[2],
            1.0,
            z[0],
            z[1],
            z[2],
            z[1] * z[1],
            z[0] * z[1],
            z[0] * z[2],
            z[1] * z[2],
        ];
        let eta: f64 = row.iter().zip(&ANALYSIS_BETA).map(|(a, b)| a * b).sum();
        y.push(if rng.sample(unit) < logistic(eta) { 1.0 } else { 0.0 });
        w.push(x + error_sd * rng.sample::<f64, _>(StandardNormal));
        xs.push(x);
        cov.extend_from_slice(&z);
    }
    (Dataset::new(w, cov, 3, y).expect("consistent shapes"), xs)
}
