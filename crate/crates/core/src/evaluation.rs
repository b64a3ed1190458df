//! Approximate model error and zero-count summaries of simulation fits.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::logistic;
use crate::sim::{ar_factor, draw_example1_row, draw_example2_row, stream_rng, truth, DesignName, Truth};
use crate::solver::FitResult;

/// Smallest Monte Carlo size accepted for `C`.
pub const MIN_MC: usize = 10_000;
/// Draws per independently seeded chunk.
const CHUNK: usize = 10_000;
/// Scale making the MAD consistent for a normal SD.
pub const MAD_SCALE: f64 = 0.6745;

/// `C_X`, `C_W`, the true coefficients and the true zero set of a design.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMetricContext {
    pub c_x: DMatrix<f64>,
    pub c_w: DMatrix<f64>,
    pub beta0: Vec<f64>,
    pub zero_set: Vec<usize>,
}

impl ErrorMetricContext {
    pub fn new(c_x: DMatrix<f64>, c_w: DMatrix<f64>, truth: &Truth) -> Result<Self> {
        let d = truth.beta.len();
        for c in [&c_x, &c_w] {
            if c.nrows() != d || c.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: c.nrows(),
                });
            }
        }
        Ok(Self {
            c_x,
            c_w,
            beta0: truth.beta.clone(),
            zero_set: truth.zero_set.clone(),
        })
    }

    fn c(&self, use_w: bool) -> &DMatrix<f64> {
        if use_w {
            &self.c_w
        } else {
            &self.c_x
        }
    }
}

/// Monte Carlo estimate of `E[w(η) v vᵀ]` over `n_mc` draws of `(v, η)`.
/// Chunk `k` of `10⁴` draws uses stream `k` of `seed`.
pub fn estimate_c_with<D, W>(n_mc: usize, seed: u64, dim: usize, draw: D, weight: W) -> Result<DMatrix<f64>>
where
    D: Fn(&mut dyn RngCore, &mut Vec<f64>) -> f64 + Sync,
    W: Fn(f64) -> f64 + Sync,
{
    if n_mc < MIN_MC {
        return Err(Error::InvalidConfig(format!("n_mc must be at least {MIN_MC}")));
    }
    let chunks = n_mc.div_ceil(CHUNK);
    let sum = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let count = CHUNK.min(n_mc - k * CHUNK);
            let mut acc = DMatrix::<f64>::zeros(dim, dim);
            let mut v = Vec::with_capacity(dim);
            for _ in 0..count {
                v.clear();
                let eta = draw(&mut rng, &mut v);
                let w = weight(eta);
                for a in 0..dim {
                    let wa = w * v[a];
                    for b in 0..=a {
                        acc[(a, b)] += wa * v[b];
                    }
                }
            }
            acc
        })
        .reduce(|| DMatrix::zeros(dim, dim), |a, b| a + b);
    let mut c = sum / n_mc as f64;
    for a in 0..dim {
        for b in 0..a {
            c[(b, a)] = c[(a, b)];
        }
    }
    Ok(c)
}

/// `{μ(1 − μ)}²`, the squared derivative of the inverse logit.
fn logit_weight(eta: f64) -> f64 {
    let m = logistic(eta);
    (m * (1.0 - m)).powi(2)
}

/// `C_X` (or `C_W` with `W = X + U` in place of `X`) of a simulation design at its true parameters.
pub fn estimate_c(design: DesignName, n_mc: usize, seed: u64, use_w: bool) -> Result<DMatrix<f64>> {
    let t = truth(design);
    let sd = t.error_sd;
    match design {
        DesignName::Example1 => {
            let l = ar_factor(6, 0.5);
            let beta = t.beta.clone();
            estimate_c_with(
                n_mc,
                seed,
                beta.len(),
                move |rng, v| {
                    let mut z = Vec::with_capacity(7);
                    let mut x = draw_example1_row(rng, &l, &mut z);
                    if use_w {
                        x += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                    v.extend_from_slice(&[1.0, x, x * x]);
                    v.extend_from_slice(&z);
                    v.iter().zip(&beta).map(|(a, b)| a * b).sum()
                },
                logit_weight,
            )
        }
        DesignName::Example2 => {
            let l = ar_factor(8, 0.5);
            let beta = t.beta.clone();
            let t2 = t.clone();
            estimate_c_with(
                n_mc,
                seed,
                beta.len(),
                move |rng, v| {
                    let mut s = Vec::with_capacity(9);
                    let (mut x, z) = draw_example2_row(rng, &l, &mut s);
                    if use_w {
                        x += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                    v.push(x);
                    v.extend_from_slice(&s);
                    t2.theta(z) + v.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()
                },
                logit_weight,
            )
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CRecord {
    design: String,
    seed: u64,
    n_mc: usize,
    use_w: bool,
    row: usize,
    values: String,
}

/// Writes `C` with its provenance (`design`, `seed`, `n_mc`, `use_w`) on every row.
pub fn write_c<W: Write>(
    out: W,
    c: &DMatrix<f64>,
    design: DesignName,
    seed: u64,
    n_mc: usize,
    use_w: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in 0..c.nrows() {
        let values = (0..c.ncols())
            .map(|k| format!("{:e}", c[(r, k)]))
            .collect::<Vec<_>>()
            .join(" ");
        w.serialize(CRecord {
            design: design.to_string(),
            seed,
            n_mc,
            use_w,
            row: r,
            values,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_c`], checking its provenance.
pub fn read_c<R: Read>(input: R, design: DesignName, seed: u64, n_mc: usize, use_w: bool) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in csv::Reader::from_reader(input).deserialize::<CRecord>() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.design != design.to_string() || rec.seed != seed || rec.n_mc != n_mc || rec.use_w != use_w {
            return Err(Error::Parse("C file was produced with different settings".into()));
        }
        if rec.row != rows.len() {
            return Err(Error::Parse("C rows out of order".into()));
        }
        rows.push(
            rec.values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<_>>()?,
        );
    }
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Parse("C file is not a square matrix".into()));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn c_path(dir: &Path, design: DesignName, seed: u64, n_mc: usize, use_w: bool) -> PathBuf {
    let which = if use_w { "w" } else { "x" };
    dir.join(format!("c_{design}_{which}_seed{seed}_n{n_mc}.csv"))
}

/// `C` from the cache in `dir`, estimated and stored on a miss.
pub fn cached_c(dir: &Path, design: DesignName, seed: u64, n_mc: usize, use_w: bool) -> Result<DMatrix<f64>> {
    let path = c_path(dir, design, seed, n_mc, use_w);
    if let Ok(f) = File::open(&path) {
        if let Ok(c) = read_c(f, design, seed, n_mc, use_w) {
            return Ok(c);
        }
    }
    let c = estimate_c(design, n_mc, seed, use_w)?;
    std::fs::create_dir_all(dir)?;
    write_c(File::create(&path)?, &c, design, seed, n_mc, use_w)?;
    Ok(c)
}

/// Context for a design with `C_X` and `C_W` estimated (or cached in `dir`).
pub fn context_for(design: DesignName, n_mc: usize, seed: u64, dir: Option<&Path>) -> Result<ErrorMetricContext> {
    let get = |use_w| match dir {
        Some(d) => cached_c(d, design, seed, n_mc, use_w),
        None => estimate_c(design, n_mc, seed, use_w),
    };
    ErrorMetricContext::new(get(false)?, get(true)?, &truth(design))
}

/// `(β̂ − β₀)ᵀ C (β̂ − β₀)`.
pub fn ame(beta_hat: &[f64], ctx: &ErrorMetricContext, use_w: bool) -> Result<f64> {
    let d = ctx.beta0.len();
    if beta_hat.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: beta_hat.len(),
        });
    }
    let c = ctx.c(use_w);
    let e: Vec<f64> = beta_hat.iter().zip(&ctx.beta0).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for a in 0..d {
        for b in 0..d {
            q += e[a] * c[(a, b)] * e[b];
        }
    }
    Ok(q.max(0.0))
}

/// `AME(selected) / AME(full)`.
pub fn rame(selected: &FitResult, full: &FitResult, ctx: &ErrorMetricContext, use_w: bool) -> Result<f64> {
    let den = ame(&full.beta, ctx, use_w)?;
    if den == 0.0 {
        return Err(Error::DivideByZero);
    }
    Ok(ame(&selected.beta, ctx, use_w)? / den)
}

/// `(C, E)`: estimated zeros among the true zeros and among the true nonzeros.
pub fn count_zeros(beta: &[f64], zero_set: &[usize]) -> (usize, usize) {
    beta.iter()
        .enumerate()
        .filter(|(_, b)| **b == 0.0)
        .fold(
            (0, 0),
            |(c, e), (j, _)| {
                if zero_set.contains(&j) {
                    (c + 1, e)
                } else {
                    (c, e + 1)
                }
            },
        )
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation divided by 0.6745.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev) / MAD_SCALE
}
